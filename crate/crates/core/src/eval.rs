//! Downstream evaluation: supervised classifiers trained on selected subsets,
//! stride and cross tests, seed consistency, class balance and cossim
//! distribution statistics.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::random_subset;
use crate::config::ClassifierConfig;
use crate::data::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{sgd_step, Activation, LayerStack, OptimizerState};
use crate::rng::{self, derive_seed, Stream};
use crate::scoring::{write_atomic, CoresetRanking};

/// Trunk `input -> hidden (ReLU) -> feature` followed by a linear softmax head.
#[derive(Debug, Clone)]
pub struct Classifier {
    stack: LayerStack,
    params: Vec<f64>,
    stats: ChannelStats,
}

impl Classifier {
    pub fn new(input_dim: usize, num_classes: usize, cfg: &ClassifierConfig, stats: ChannelStats, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("classifier needs at least two classes"));
        }
        let stack = LayerStack::new(
            vec![input_dim, cfg.hidden_dim, cfg.feature_dim, num_classes],
            vec![Activation::Relu, Activation::Identity, Activation::Identity],
        )?;
        let mut params = vec![0.0; stack.param_count()];
        let mut rng = rng::keyed(Stream::Classifier, seed, 0, 0);
        for l in 0..stack.num_layers() {
            let (w, _) = stack.block_ranges(l);
            let normal = Normal::new(0.0, (2.0 / stack.sizes()[l] as f64).sqrt()).expect("positive std");
            params[w].iter_mut().for_each(|p| *p = normal.sample(&mut rng));
        }
        Ok(Self { stack, params, stats })
    }

    pub fn num_classes(&self) -> usize {
        self.stack.output_dim()
    }

    fn inputs(&self, dataset: &Dataset, indices: &[usize]) -> Array2<f64> {
        let mut x = dataset.images.select(Axis(0), indices);
        for mut row in x.rows_mut() {
            self.stats.apply(row.as_slice_mut().expect("rows of an owned array are contiguous"));
        }
        x
    }

    pub fn logits(&self, dataset: &Dataset, indices: &[usize]) -> Result<Array2<f64>> {
        let x = self.inputs(dataset, indices);
        Ok(self.stack.forward(&self.params, x.view())?.output)
    }

    /// Penultimate-layer representation.
    pub fn features(&self, dataset: &Dataset, indices: &[usize]) -> Result<Array2<f64>> {
        let x = self.inputs(dataset, indices);
        Ok(self.stack.forward(&self.params, x.view())?.layer_output(1).clone())
    }

    pub fn predict(&self, dataset: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
        let logits = self.logits(dataset, indices)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| (0..r.len()).fold(0, |best, c| if r[c] > r[best] { c } else { best }))
            .collect())
    }

    /// Per-example correctness; fails if any label is missing.
    pub fn correctness(&self, dataset: &Dataset, indices: &[usize]) -> Result<Vec<bool>> {
        let labels = labels_of(dataset, indices)?;
        let preds = self.predict(dataset, indices)?;
        Ok(preds.iter().zip(&labels).map(|(p, y)| p == y).collect())
    }

    pub fn accuracy(&self, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Err(Error::config("cannot measure accuracy on an empty set"));
        }
        let correct = self.correctness(dataset, indices)?;
        Ok(correct.iter().filter(|&&c| c).count() as f64 / indices.len() as f64)
    }

    /// Mean cross-entropy and its gradient over one batch.
    fn step_gradient(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let cache = self.stack.forward(&self.params, x)?;
        let b = labels.len() as f64;
        let mut grad = cache.output.clone();
        let mut loss = 0.0;
        for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
            loss -= row[y].ln();
            row[y] -= 1.0;
            row.mapv_inplace(|v| v / b);
        }
        let mut g = vec![0.0; self.params.len()];
        self.stack.backward(&self.params, &cache, grad, &mut g, false)?;
        Ok((loss / b, g))
    }
}

fn labels_of(dataset: &Dataset, indices: &[usize]) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&k| {
            if k >= dataset.len() {
                return Err(Error::Bounds(format!("index {k} outside dataset of {}", dataset.len())));
            }
            dataset
                .label(k)
                .ok_or_else(|| Error::config(format!("example {k} of {} has no label", dataset.name)))
        })
        .collect()
}

/// Train on exactly `subset`; `observe` runs after every epoch.
pub fn train_classifier_observed(
    train: &Dataset,
    subset: &[usize],
    cfg: &ClassifierConfig,
    seed: u64,
    mut observe: impl FnMut(usize, &Classifier) -> Result<()>,
) -> Result<Classifier> {
    if subset.is_empty() {
        return Err(Error::config("cannot train a classifier on an empty subset"));
    }
    let labels = labels_of(train, subset)?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= train.num_classes) {
        return Err(Error::Data(format!("label {bad} outside {} classes", train.num_classes)));
    }
    let stats = ChannelStats::compute(train);
    stats.validate(train.shape.channels)?;
    let mut clf = Classifier::new(train.shape.len(), train.num_classes, cfg, stats, seed)?;
    let x = clf.inputs(train, subset);
    let mut opt = OptimizerState::new(clf.params.len(), cfg.base_lr, cfg.momentum, cfg.epochs)?;
    let mut order: Vec<usize> = (0..subset.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::keyed(Stream::Classifier, seed, epoch as u64, 1));
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let xb = x.select(Axis(0), batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (loss, g) = clf.step_gradient(xb.view(), &yb)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("classifier loss diverged at epoch {epoch}")));
            }
            sgd_step(&mut clf.params, &g, &mut opt, epoch)?;
        }
        observe(epoch, &clf)?;
    }
    Ok(clf)
}

pub fn train_classifier(train: &Dataset, subset: &[usize], cfg: &ClassifierConfig, seed: u64) -> Result<Classifier> {
    train_classifier_observed(train, subset, cfg, seed, |_, _| Ok(()))
}

/// One trained-and-tested classifier.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub method: String,
    #[serde(rename = "L")]
    pub size: usize,
    pub stride: usize,
    pub run: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub runtime_seconds: f64,
}

/// Aggregate over repeated runs of one subset specification.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub size: usize,
    pub stride: usize,
    pub seeds: Vec<u64>,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
    pub runtime_seconds: f64,
    pub runs: Vec<RunRecord>,
}

impl EvalReport {
    pub fn from_runs(method: &str, size: usize, stride: usize, runs: Vec<RunRecord>) -> Self {
        let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        Self {
            method: method.to_string(),
            size,
            stride,
            seeds: runs.iter().map(|r| r.seed).collect(),
            test_accuracy_mean: mean,
            test_accuracy_std: std,
            runtime_seconds: runs.iter().map(|r| r.runtime_seconds).sum(),
            runs,
        }
    }
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed of run `r` in an experiment seeded by `seed`.
pub fn run_seed(seed: u64, run: usize) -> u64 {
    derive_seed(seed, run as u64)
}

/// Train on `subset` of `train` and report accuracy on `test_indices` of `test`.
pub fn evaluate_subset(
    train: &Dataset,
    subset: &[usize],
    test: &Dataset,
    test_indices: &[usize],
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let start = Instant::now();
    let clf = train_classifier(train, subset, cfg, seed)?;
    let acc = clf.accuracy(test, test_indices)?;
    Ok((acc, start.elapsed().as_secs_f64()))
}

fn all_indices(dataset: &Dataset) -> Vec<usize> {
    (0..dataset.len()).collect()
}

/// `runs` repetitions of a subset chooser, in parallel, in run order.
fn repeat(
    method: &str,
    size: usize,
    stride: usize,
    runs: usize,
    seed: u64,
    job: impl Fn(u64) -> Result<(f64, f64)> + Sync,
) -> Result<EvalReport> {
    if runs == 0 {
        return Err(Error::config("eval.runs must be at least 1"));
    }
    let records = (0..runs)
        .into_par_iter()
        .map(|run| {
            let s = run_seed(seed, run);
            let (test_accuracy, runtime_seconds) = job(s)?;
            Ok(RunRecord {
                method: method.to_string(),
                size,
                stride,
                run,
                seed: s,
                test_accuracy,
                runtime_seconds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_runs(method, size, stride, records))
}

/// Accuracy of classifiers trained on one fixed subset, one per run seed.
#[allow(clippy::too_many_arguments)]
pub fn subset_report(
    method: &str,
    train: &Dataset,
    subset: &[usize],
    test: &Dataset,
    runs: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<EvalReport> {
    let test_idx = all_indices(test);
    repeat(method, subset.len(), 0, runs, seed, |s| {
        evaluate_subset(train, subset, test, &test_idx, cfg, s)
    })
}

/// Coreset arm per stride plus a paired random arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrideResult {
    pub coreset: Vec<EvalReport>,
    pub random: EvalReport,
}

#[allow(clippy::too_many_arguments)]
pub fn stride_experiment(
    ranking: &CoresetRanking,
    train: &Dataset,
    test: &Dataset,
    size: usize,
    strides: &[usize],
    runs: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<StrideResult> {
    if ranking.len() != train.len() {
        return Err(Error::config(format!(
            "ranking covers {} examples, training set has {}",
            ranking.len(),
            train.len()
        )));
    }
    let test_idx = all_indices(test);
    let coreset = strides
        .iter()
        .map(|&stride| {
            let subset = ranking.select(size, stride)?;
            repeat("coreset", size, stride, runs, seed, |s| {
                evaluate_subset(train, subset, test, &test_idx, cfg, s)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let random = repeat("random", size, 0, runs, seed, |s| {
        let subset = random_subset(train.len(), size, s)?;
        evaluate_subset(train, &subset, test, &test_idx, cfg, s)
    })?;
    Ok(StrideResult { coreset, random })
}

/// Train on one end of the ranking and test on the other end.
pub fn cross_test(
    ranking: &CoresetRanking,
    dataset: &Dataset,
    train_size: usize,
    test_size: usize,
    runs: usize,
    cfg: &ClassifierConfig,
    seed: u64,
) -> Result<(EvalReport, EvalReport)> {
    let n = ranking.len();
    if n != dataset.len() {
        return Err(Error::config(format!("ranking covers {n} examples, dataset has {}", dataset.len())));
    }
    if train_size == 0 || test_size == 0 {
        return Err(Error::config("cross test needs nonempty train and test slices"));
    }
    if train_size + test_size > n {
        return Err(Error::config(format!(
            "train slice {train_size} and test slice {test_size} overlap in a ranking of {n}"
        )));
    }
    let top_train = ranking.select(train_size, 0)?;
    let bottom_test = ranking.select(test_size, n - test_size)?;
    let bottom_train = ranking.select(train_size, n - train_size)?;
    let top_test = ranking.select(test_size, 0)?;
    let c2n = repeat("c_to_n", train_size, 0, runs, seed, |s| {
        evaluate_subset(dataset, top_train, dataset, bottom_test, cfg, s)
    })?;
    let n2c = repeat("n_to_c", train_size, n - train_size, runs, seed, |s| {
        evaluate_subset(dataset, bottom_train, dataset, top_test, cfg, s)
    })?;
    Ok((c2n, n2c))
}

/// `|intersection of top-size sets| / size`.
pub fn consistency(rankings: &[CoresetRanking], size: usize) -> Result<f64> {
    if rankings.len() < 2 {
        return Err(Error::config("consistency needs at least two rankings"));
    }
    let n = rankings[0].len();
    if rankings.iter().any(|r| r.len() != n) {
        return Err(Error::config("rankings cover different numbers of examples"));
    }
    if size == 0 {
        return Err(Error::config("consistency needs a positive subset size"));
    }
    let mut hits = vec![0usize; n];
    for r in rankings {
        for &k in r.select(size, 0)? {
            hits[k] += 1;
        }
    }
    let common = hits.iter().filter(|&&h| h == rankings.len()).count();
    Ok(common as f64 / size as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassFractionHistogram {
    pub counts: Vec<usize>,
    pub fraction: Vec<f64>,
}

/// Per-class share of `subset`.
pub fn imbalance(subset: &[usize], labels: &[usize], num_classes: usize) -> Result<ClassFractionHistogram> {
    if subset.is_empty() {
        return Err(Error::config("imbalance of an empty subset"));
    }
    let mut counts = vec![0usize; num_classes];
    for &k in subset {
        let y = *labels
            .get(k)
            .ok_or_else(|| Error::Bounds(format!("index {k} outside {} labels", labels.len())))?;
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::Data(format!("label {y} outside {num_classes} classes")))? += 1;
    }
    let total = subset.len() as f64;
    let fraction = counts.iter().map(|&c| c as f64 / total).collect();
    Ok(ClassFractionHistogram { counts, fraction })
}

pub const COSSIM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CossimStats {
    pub mean: f64,
    pub median: f64,
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn cossim_stats(values: &[f64]) -> Result<CossimStats> {
    if values.is_empty() {
        return Err(Error::config("cossim statistics of an empty array"));
    }
    if let Some(v) = values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
        return Err(Error::config(format!("mean cossim {v} outside [-1, 1]")));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    let width = 2.0 / COSSIM_BINS as f64;
    let bin_edges = (0..=COSSIM_BINS).map(|i| -1.0 + i as f64 * width).collect();
    let mut counts = vec![0; COSSIM_BINS];
    for &v in values {
        counts[(((v + 1.0) / width) as usize).min(COSSIM_BINS - 1)] += 1;
    }
    Ok(CossimStats {
        mean,
        median,
        bin_edges,
        counts,
    })
}

/// Report CSV: `method,L,stride,run,seed,test_accuracy,runtime_seconds`.
pub fn write_report_csv(path: &Path, reports: &[&EvalReport]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(Vec::new());
    for report in reports {
        for run in &report.runs {
            w.serialize(run).map_err(csv_err)?;
        }
    }
    if reports.iter().all(|r| r.runs.is_empty()) {
        w.write_record(["method", "L", "stride", "run", "seed", "test_accuracy", "runtime_seconds"])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}
