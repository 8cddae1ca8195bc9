//! Run configuration in a line-oriented `key = value` format.
//!
//! ```text
//! # comments start with '#'
//! loss_mode = simclr
//! epochs = 40
//! augment.flip_prob = 0.5
//! dataset.source = synthetic
//! ```
//!
//! Unknown keys are rejected. Relative paths resolve against the directory of
//! the config file.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::contrastive::LossMode;
use crate::data::{self, cifar, idx, Dataset, Split, SyntheticSpec, SyntheticTruth};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    Synthetic {
        spec: SyntheticSpec,
        test_n: usize,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
    Cifar {
        batches: Vec<PathBuf>,
        test_batches: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Keep only the first `limit` training and test examples.
    pub limit: Option<usize>,
}

/// Training and test splits plus synthetic ground truth when available.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub truth: Option<SyntheticTruth>,
}

impl DatasetConfig {
    pub fn load(&self) -> Result<LoadedData> {
        let limit = |d: Dataset| match self.limit {
            Some(l) => d.truncate(l),
            None => d,
        };
        match &self.source {
            DatasetSource::Synthetic { spec, test_n } => {
                let (train, truth) = data::make_synthetic(spec, Split::Train)?;
                let test = if *test_n > 0 {
                    Some(data::make_synthetic(&spec.test_split(*test_n), Split::Test)?.0)
                } else {
                    None
                };
                Ok(LoadedData {
                    train: limit(train),
                    test: test.map(limit),
                    truth: Some(truth),
                })
            }
            DatasetSource::Idx {
                images,
                labels,
                test_images,
                test_labels,
            } => {
                let train = idx::load_idx(images, labels, Split::Train)?;
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => Some(idx::load_idx(i, l, Split::Test)?),
                    _ => None,
                };
                Ok(LoadedData {
                    train: limit(train),
                    test: test.map(limit),
                    truth: None,
                })
            }
            DatasetSource::Cifar { batches, test_batches } => {
                let train = cifar::load_cifar_binary(batches, Split::Train)?;
                let test = if test_batches.is_empty() {
                    None
                } else {
                    Some(cifar::load_cifar_binary(test_batches, Split::Test)?)
                };
                Ok(LoadedData {
                    train: limit(train),
                    test: test.map(limit),
                    truth: None,
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            feature_dim: 128,
            epochs: 30,
            batch_size: 64,
            base_lr: 0.01,
            momentum: 0.9,
        }
    }
}

/// Settings consumed by the `eval` verbs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub rankings: Vec<PathBuf>,
    pub subset: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub subset_fraction: f64,
    pub strides: Vec<f64>,
    pub runs: usize,
    pub train_fracs: Vec<f64>,
    pub test_frac: f64,
    pub method: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rankings: Vec::new(),
            subset: None,
            scores: None,
            subset_fraction: 0.3,
            strides: vec![0.0, 0.2, 0.4, 0.6],
            runs: 5,
            train_fracs: vec![0.3],
            test_frac: 0.3,
            method: "random".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub loss_mode: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub momentum_m: f64,
    pub queue_capacity: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig {
                source: DatasetSource::Synthetic {
                    spec: SyntheticSpec::default(),
                    test_n: 1000,
                },
                limit: None,
            },
            loss_mode: LossMode::SimClr,
            epochs: 40,
            batch_size: 128,
            temperature: LossMode::SimClr.default_temperature(),
            momentum_m: 0.99,
            queue_capacity: 1024,
            optimizer: OptimizerConfig {
                base_lr: 0.05,
                momentum: 0.9,
            },
            augment: AugmentConfig::default(),
            encoder: EncoderConfig {
                hidden_dim: 256,
                feature_dim: 128,
                projection_dim: 64,
            },
            classifier: ClassifierConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {raw:?}")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn path_list(items: &[PathBuf]) -> String {
    items.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

/// Split `key = value` lines into a map, rejecting malformed and duplicate lines.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", no + 1)))?;
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", no + 1)));
        }
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key {key}", no + 1)));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parse config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let map = RefCell::new(parse_pairs(text)?);
        let explicit_out = {
            let m = map.borrow();
            m.contains_key("augment.output_height") || m.contains_key("augment.output_width")
        };
        let mut cfg = RunConfig::default();
        let take = |key: &str| map.borrow_mut().remove(key);
        let resolve = |raw: &str| {
            let p = PathBuf::from(raw);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(raw) = take($key) {
                    $field = parse_value($key, &raw)?;
                }
            };
        }

        if let Some(raw) = take("loss_mode") {
            cfg.loss_mode = raw.parse()?;
            cfg.temperature = cfg.loss_mode.default_temperature();
        }
        set!("epochs", cfg.epochs);
        set!("batch_size", cfg.batch_size);
        set!("temperature", cfg.temperature);
        set!("momentum_m", cfg.momentum_m);
        set!("queue_capacity", cfg.queue_capacity);
        set!("seed", cfg.seed);
        if let Some(raw) = take("output_dir") {
            cfg.output_dir = resolve(&raw);
        }

        set!("optimizer.base_lr", cfg.optimizer.base_lr);
        set!("optimizer.momentum", cfg.optimizer.momentum);

        set!("augment.crop_scale_lo", cfg.augment.crop_scale.0);
        set!("augment.crop_scale_hi", cfg.augment.crop_scale.1);
        set!("augment.flip_prob", cfg.augment.flip_prob);
        set!("augment.jitter_strength", cfg.augment.jitter_strength);
        set!("augment.grayscale_prob", cfg.augment.grayscale_prob);
        set!("augment.output_height", cfg.augment.output_size.0);
        set!("augment.output_width", cfg.augment.output_size.1);

        set!("encoder.hidden_dim", cfg.encoder.hidden_dim);
        set!("encoder.feature_dim", cfg.encoder.feature_dim);
        set!("encoder.projection_dim", cfg.encoder.projection_dim);

        set!("classifier.hidden_dim", cfg.classifier.hidden_dim);
        set!("classifier.feature_dim", cfg.classifier.feature_dim);
        set!("classifier.epochs", cfg.classifier.epochs);
        set!("classifier.batch_size", cfg.classifier.batch_size);
        set!("classifier.base_lr", cfg.classifier.base_lr);
        set!("classifier.momentum", cfg.classifier.momentum);

        if let Some(raw) = take("eval.rankings") {
            cfg.eval.rankings = raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(resolve).collect();
        }
        if let Some(raw) = take("eval.subset") {
            cfg.eval.subset = Some(resolve(&raw));
        }
        if let Some(raw) = take("eval.scores") {
            cfg.eval.scores = Some(resolve(&raw));
        }
        set!("eval.subset_fraction", cfg.eval.subset_fraction);
        if let Some(raw) = take("eval.strides") {
            cfg.eval.strides = parse_list("eval.strides", &raw)?;
        }
        set!("eval.runs", cfg.eval.runs);
        if let Some(raw) = take("eval.train_fracs") {
            cfg.eval.train_fracs = parse_list("eval.train_fracs", &raw)?;
        }
        set!("eval.test_frac", cfg.eval.test_frac);
        if let Some(raw) = take("eval.method") {
            cfg.eval.method = raw;
        }

        let limit = take("dataset.limit")
            .map(|raw| parse_value::<usize>("dataset.limit", &raw))
            .transpose()?;
        let source = take("dataset.source").unwrap_or_else(|| "synthetic".into());
        let source = match source.as_str() {
            "synthetic" => {
                let mut spec = SyntheticSpec::default();
                let mut test_n = 1000;
                set!("synthetic.n", spec.n);
                set!("synthetic.image_size", spec.image_size);
                set!("synthetic.channels", spec.channels);
                set!("synthetic.num_classes", spec.num_classes);
                set!("synthetic.hard_fraction", spec.hard_fraction);
                set!("synthetic.seed", spec.seed);
                set!("synthetic.test_n", test_n);
                if !explicit_out {
                    cfg.augment.output_size = (spec.image_size, spec.image_size);
                }
                DatasetSource::Synthetic { spec, test_n }
            }
            "idx" => {
                let need = |v: Option<String>, key: &str| {
                    v.map(|r| resolve(&r))
                        .ok_or_else(|| Error::config(format!("{key} is required for dataset.source = idx")))
                };
                let images = need(take("dataset.images"), "dataset.images")?;
                let labels = need(take("dataset.labels"), "dataset.labels")?;
                DatasetSource::Idx {
                    images,
                    labels,
                    test_images: take("dataset.test_images").map(|r| resolve(&r)),
                    test_labels: take("dataset.test_labels").map(|r| resolve(&r)),
                }
            }
            "cifar" => {
                let list = |v: Option<String>| -> Vec<PathBuf> {
                    v.map(|raw| raw.split(',').map(str::trim).filter(|s| !s.is_empty()).map(resolve).collect())
                        .unwrap_or_default()
                };
                let batches = list(take("dataset.batches"));
                if batches.is_empty() {
                    return Err(Error::config("dataset.batches is required for dataset.source = cifar"));
                }
                if !explicit_out {
                    cfg.augment.output_size = (32, 32);
                }
                DatasetSource::Cifar {
                    batches,
                    test_batches: list(take("dataset.test_batches")),
                }
            }
            other => {
                return Err(Error::config(format!(
                    "dataset.source: unknown source {other:?} (synthetic|idx|cifar)"
                )))
            }
        };
        if matches!(source, DatasetSource::Idx { .. }) && !explicit_out {
            cfg.augment.output_size = (28, 28);
        }
        cfg.dataset = DatasetConfig { source, limit };

        if let Some(key) = map.borrow().keys().next() {
            return Err(Error::config(format!("{key}: unknown configuration key")));
        }
        Ok(cfg)
    }

    /// Field-level checks run before any work starts.
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: String| Err(Error::config(format!("{name}: {msg}")));
        if self.epochs == 0 {
            return field("epochs", "must be at least 1".into());
        }
        let min_batch = match self.loss_mode {
            LossMode::SimClr => 4,
            LossMode::Moco => 1,
        };
        if self.batch_size < min_batch {
            return field("batch_size", format!("must be at least {min_batch} in {} mode", self.loss_mode));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return field("temperature", format!("must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.momentum_m) {
            return field("momentum_m", format!("must lie in [0, 1), got {}", self.momentum_m));
        }
        if self.queue_capacity == 0 {
            return field("queue_capacity", "must be positive".into());
        }
        if !(self.optimizer.base_lr > 0.0) {
            return field("optimizer.base_lr", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return field("optimizer.momentum", "must lie in [0, 1)".into());
        }
        self.augment
            .validate()
            .map_err(|e| Error::config(format!("augment: {e}")))?;
        let enc = &self.encoder;
        if enc.hidden_dim == 0 || enc.feature_dim == 0 || enc.projection_dim == 0 {
            return field("encoder", "dimensions must be positive".into());
        }
        let cls = &self.classifier;
        if cls.hidden_dim == 0 || cls.feature_dim == 0 || cls.epochs == 0 || cls.batch_size == 0 {
            return field("classifier", "dimensions, epochs and batch size must be positive".into());
        }
        if !(cls.base_lr > 0.0) || !(0.0..1.0).contains(&cls.momentum) {
            return field("classifier", "learning rate must be positive and momentum in [0, 1)".into());
        }
        if self.eval.runs == 0 {
            return field("eval.runs", "must be positive".into());
        }
        match &self.dataset.source {
            DatasetSource::Synthetic { spec, .. } => {
                spec.validate().map_err(|e| Error::config(format!("synthetic: {e}")))?;
            }
            DatasetSource::Idx {
                images,
                labels,
                test_images,
                test_labels,
            } => {
                let mut paths = vec![("dataset.images", images), ("dataset.labels", labels)];
                if let Some(p) = test_images {
                    paths.push(("dataset.test_images", p));
                }
                if let Some(p) = test_labels {
                    paths.push(("dataset.test_labels", p));
                }
                for (name, p) in paths {
                    if !p.exists() {
                        return field(name, format!("{} does not exist", p.display()));
                    }
                }
            }
            DatasetSource::Cifar { batches, test_batches } => {
                for p in batches.iter().chain(test_batches) {
                    if !p.exists() {
                        return field("dataset.batches", format!("{} does not exist", p.display()));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical text of every resolved setting except `output_dir`, sorted by key.
    pub fn canonical_text(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("loss_mode", self.loss_mode.to_string());
        kv.insert("epochs", self.epochs.to_string());
        kv.insert("batch_size", self.batch_size.to_string());
        kv.insert("temperature", self.temperature.to_string());
        kv.insert("momentum_m", self.momentum_m.to_string());
        kv.insert("queue_capacity", self.queue_capacity.to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("optimizer.base_lr", self.optimizer.base_lr.to_string());
        kv.insert("optimizer.momentum", self.optimizer.momentum.to_string());
        let a = &self.augment;
        kv.insert("augment.crop_scale_lo", a.crop_scale.0.to_string());
        kv.insert("augment.crop_scale_hi", a.crop_scale.1.to_string());
        kv.insert("augment.flip_prob", a.flip_prob.to_string());
        kv.insert("augment.jitter_strength", a.jitter_strength.to_string());
        kv.insert("augment.grayscale_prob", a.grayscale_prob.to_string());
        kv.insert("augment.output_height", a.output_size.0.to_string());
        kv.insert("augment.output_width", a.output_size.1.to_string());
        kv.insert("encoder.hidden_dim", self.encoder.hidden_dim.to_string());
        kv.insert("encoder.feature_dim", self.encoder.feature_dim.to_string());
        kv.insert("encoder.projection_dim", self.encoder.projection_dim.to_string());
        let c = &self.classifier;
        kv.insert("classifier.hidden_dim", c.hidden_dim.to_string());
        kv.insert("classifier.feature_dim", c.feature_dim.to_string());
        kv.insert("classifier.epochs", c.epochs.to_string());
        kv.insert("classifier.batch_size", c.batch_size.to_string());
        kv.insert("classifier.base_lr", c.base_lr.to_string());
        kv.insert("classifier.momentum", c.momentum.to_string());
        let e = &self.eval;
        if !e.rankings.is_empty() {
            kv.insert("eval.rankings", path_list(&e.rankings));
        }
        if let Some(p) = &e.subset {
            kv.insert("eval.subset", p.display().to_string());
        }
        if let Some(p) = &e.scores {
            kv.insert("eval.scores", p.display().to_string());
        }
        kv.insert("eval.subset_fraction", e.subset_fraction.to_string());
        kv.insert("eval.strides", join(&e.strides));
        kv.insert("eval.runs", e.runs.to_string());
        kv.insert("eval.train_fracs", join(&e.train_fracs));
        kv.insert("eval.test_frac", e.test_frac.to_string());
        kv.insert("eval.method", e.method.clone());
        if let Some(l) = self.dataset.limit {
            kv.insert("dataset.limit", l.to_string());
        }
        match &self.dataset.source {
            DatasetSource::Synthetic { spec, test_n } => {
                kv.insert("dataset.source", "synthetic".into());
                kv.insert("synthetic.n", spec.n.to_string());
                kv.insert("synthetic.image_size", spec.image_size.to_string());
                kv.insert("synthetic.channels", spec.channels.to_string());
                kv.insert("synthetic.num_classes", spec.num_classes.to_string());
                kv.insert("synthetic.hard_fraction", spec.hard_fraction.to_string());
                kv.insert("synthetic.seed", spec.seed.to_string());
                kv.insert("synthetic.test_n", test_n.to_string());
            }
            DatasetSource::Idx {
                images,
                labels,
                test_images,
                test_labels,
            } => {
                kv.insert("dataset.source", "idx".into());
                kv.insert("dataset.images", images.display().to_string());
                kv.insert("dataset.labels", labels.display().to_string());
                if let Some(p) = test_images {
                    kv.insert("dataset.test_images", p.display().to_string());
                }
                if let Some(p) = test_labels {
                    kv.insert("dataset.test_labels", p.display().to_string());
                }
            }
            DatasetSource::Cifar { batches, test_batches } => {
                kv.insert("dataset.source", "cifar".into());
                kv.insert("dataset.batches", path_list(batches));
                if !test_batches.is_empty() {
                    kv.insert("dataset.test_batches", path_list(test_batches));
                }
            }
        }
        let mut out = String::new();
        for (k, v) in kv {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }

    /// Resolved configuration including `output_dir`, for the `config_echo` file.
    pub fn echo_text(&self) -> String {
        format!("{}output_dir = {}\n", self.canonical_text(), self.output_dir.display())
    }

    /// SHA-256 of [`RunConfig::canonical_text`].
    pub fn hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}
