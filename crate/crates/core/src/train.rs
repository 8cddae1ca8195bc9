//! Contrastive training with per-epoch score accumulation.
//!
//! One epoch visits every example exactly once in a seeded shuffled order.
//! For each mini-batch the two views of every example are encoded, the loss
//! reports the positive-pair cosine similarities, and the parameters take one
//! SGD step. The similarities of the whole epoch are committed to the score
//! table only once the epoch has finished.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::augment::{make_views, AugmentConfig};
use crate::config::RunConfig;
use crate::contrastive::{moco_loss, ntxent_loss, ContrastiveBatchResult, LossMode, NegativeQueue};
use crate::data::{ChannelStats, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{checkpoint, momentum_update, sgd_step, EncoderDims, EncoderParams, OptimizerState};
use crate::rng::{self, Stream};
use crate::scoring::{self, Provenance, ScoreTable};

/// Hyperparameters of one contrastive run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub loss_mode: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub momentum_m: f64,
    pub queue_capacity: usize,
    pub base_lr: f64,
    pub optimizer_momentum: f64,
    pub augment: AugmentConfig,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub projection_dim: usize,
    pub seed: u64,
}

impl TrainSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            loss_mode: cfg.loss_mode,
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            temperature: cfg.temperature,
            momentum_m: cfg.momentum_m,
            queue_capacity: cfg.queue_capacity,
            base_lr: cfg.optimizer.base_lr,
            optimizer_momentum: cfg.optimizer.momentum,
            augment: cfg.augment,
            hidden_dim: cfg.encoder.hidden_dim,
            feature_dim: cfg.encoder.feature_dim,
            projection_dim: cfg.encoder.projection_dim,
            seed: cfg.seed,
        }
    }

    pub fn dims(&self, channels: usize) -> EncoderDims {
        let (h, w) = self.augment.output_size;
        EncoderDims::new(channels * h * w, self.hidden_dim, self.feature_dim, self.projection_dim)
    }
}

/// Per-epoch progress report.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_cossim: f64,
    /// `(example_index, cossim)` for every example, in visiting order.
    pub pair_cossims: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct ContrastiveTrainer {
    settings: TrainSettings,
    stats: ChannelStats,
    query: EncoderParams,
    key: Option<EncoderParams>,
    queue: Option<NegativeQueue>,
    optimizer: OptimizerState,
    table: ScoreTable,
}

/// Loss, per-pair similarities and parameter gradient for one two-view batch.
#[derive(Debug, Clone)]
pub struct BatchStep {
    pub result: ContrastiveBatchResult,
    pub grads: Vec<f64>,
    /// Key projections to enqueue (MoCo only).
    pub keys: Option<Array2<f64>>,
}

/// Evaluate the contrastive objective on `views`, whose rows `0..B` are the
/// first views and rows `B..2B` the second views of `indices`.
pub fn batch_step(
    query: &EncoderParams,
    key: Option<&EncoderParams>,
    queue: Option<&NegativeQueue>,
    views: ArrayView2<f64>,
    indices: &[usize],
    mode: LossMode,
    temperature: f64,
) -> Result<BatchStep> {
    let b = indices.len();
    if views.nrows() != 2 * b {
        return Err(Error::config(format!("{} view rows for {b} examples", views.nrows())));
    }
    match mode {
        LossMode::SimClr => {
            let fwd = query.forward(views)?;
            let result = ntxent_loss(fwd.projections.view(), indices, temperature)?;
            let grads = fwd.backward(query, result.grad_on_projections.view())?;
            Ok(BatchStep { result, grads, keys: None })
        }
        LossMode::Moco => {
            let (key, queue) = key
                .zip(queue)
                .ok_or_else(|| Error::State("moco step needs a key encoder and a queue".into()))?;
            let fwd = query.forward(views.slice(s![..b, ..]))?;
            let keys = key.forward(views.slice(s![b.., ..]))?.projections;
            let result = moco_loss(fwd.projections.view(), keys.view(), queue, indices, temperature)?;
            let grads = fwd.backward(query, result.grad_on_projections.view())?;
            Ok(BatchStep {
                result,
                grads,
                keys: Some(keys),
            })
        }
    }
}

/// Partition a shuffled order into batches of `size`; a trailing batch smaller
/// than `min` is merged into its predecessor.
pub fn epoch_batches(order: &[usize], size: usize, min: usize) -> Vec<&[usize]> {
    let mut batches: Vec<&[usize]> = order.chunks(size).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < min) {
        let n = batches.len();
        let start = (n - 2) * size;
        batches.truncate(n - 2);
        batches.push(&order[start..]);
    }
    batches
}

/// Seeded visiting order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::keyed(Stream::Shuffle, seed, epoch as u64, 0));
    order
}

impl ContrastiveTrainer {
    pub fn new(dataset: &Dataset, settings: TrainSettings, config_hash: [u8; 32]) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::config("cannot train on an empty dataset"));
        }
        settings.augment.validate()?;
        let min_examples = if settings.loss_mode == LossMode::SimClr { 2 } else { 1 };
        if dataset.len() < min_examples || settings.batch_size < min_examples {
            return Err(Error::config("batch and dataset too small for the loss"));
        }
        let stats = ChannelStats::compute(dataset);
        stats.validate(dataset.shape.channels)?;
        let dims = settings.dims(dataset.shape.channels);
        let query = EncoderParams::init(dims, settings.seed)?;
        let (key, queue) = match settings.loss_mode {
            LossMode::SimClr => (None, None),
            LossMode::Moco => (
                Some(query.clone()),
                Some(NegativeQueue::random(settings.queue_capacity, dims.projection_dim, settings.seed)?),
            ),
        };
        let optimizer = OptimizerState::new(query.len(), settings.base_lr, settings.optimizer_momentum, settings.epochs)?;
        let table = ScoreTable::new(
            dataset.len(),
            Provenance {
                seed: settings.seed,
                loss_mode: Some(settings.loss_mode),
                config_hash,
            },
        );
        Ok(Self {
            settings,
            stats,
            query,
            key,
            queue,
            optimizer,
            table,
        })
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    pub fn table(&self) -> &ScoreTable {
        &self.table
    }

    pub fn into_table(self) -> ScoreTable {
        self.table
    }

    pub fn encoder(&self) -> &EncoderParams {
        &self.query
    }

    pub fn epochs_done(&self) -> usize {
        self.table.epochs_seen() as usize
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.settings.epochs
    }

    /// Normalized two-view batch: rows `0..B` are view a, rows `B..2B` view b.
    fn view_batch(&self, dataset: &Dataset, batch: &[usize], epoch: usize) -> Array2<f64> {
        let b = batch.len();
        let shape = self.settings.augment.output_shape(dataset.shape.channels);
        let pairs: Vec<_> = batch
            .par_iter()
            .map(|&k| {
                let mut pair = make_views(&dataset.example(k), &self.settings.augment, self.settings.seed, epoch as u64);
                self.stats.apply(&mut pair.view_a);
                self.stats.apply(&mut pair.view_b);
                pair
            })
            .collect();
        let mut x = Array2::<f64>::zeros((2 * b, shape.len()));
        for (i, pair) in pairs.into_iter().enumerate() {
            x.row_mut(i).assign(&ndarray::ArrayView1::from(&pair.view_a));
            x.row_mut(i + b).assign(&ndarray::ArrayView1::from(&pair.view_b));
        }
        x
    }

    /// Train one epoch and commit its similarities to the score table.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<EpochSummary> {
        if dataset.len() != self.table.len() {
            return Err(Error::config("dataset size changed between epochs"));
        }
        if self.is_finished() {
            return Err(Error::State(format!("all {} epochs already ran", self.settings.epochs)));
        }
        let epoch = self.epochs_done();
        let order = epoch_order(dataset.len(), self.settings.seed, epoch);
        let min = if self.settings.loss_mode == LossMode::SimClr { 2 } else { 1 };
        let mut pair_cossims = Vec::with_capacity(dataset.len());
        let mut loss_sum = 0.0;
        let batches = epoch_batches(&order, self.settings.batch_size, min);
        for batch in &batches {
            let x = self.view_batch(dataset, batch, epoch);
            let step = batch_step(
                &self.query,
                self.key.as_ref(),
                self.queue.as_ref(),
                x.view(),
                batch,
                self.settings.loss_mode,
                self.settings.temperature,
            )?;
            if !step.result.loss.is_finite() {
                return Err(Error::Numeric(format!("loss diverged at epoch {epoch}")));
            }
            sgd_step(self.query.values_mut(), &step.grads, &mut self.optimizer, epoch)?;
            if let (Some(key), Some(queue), Some(keys)) = (self.key.as_mut(), self.queue.as_mut(), step.keys.as_ref()) {
                momentum_update(key, &self.query, self.settings.momentum_m)?;
                queue.push(keys.view());
            }
            let result = step.result;
            loss_sum += result.loss * batch.len() as f64;
            pair_cossims.extend(result.pair_cossims);
        }
        self.table.accumulate(&pair_cossims)?;
        let n = pair_cossims.len() as f64;
        Ok(EpochSummary {
            epoch,
            mean_loss: loss_sum / n,
            mean_cossim: pair_cossims.iter().map(|p| p.1).sum::<f64>() / n,
            pair_cossims,
        })
    }

    /// Persist everything needed to continue bit-exactly.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let dims = self.query.dims();
        scoring::write_atomic(&dir.join(ENCODER_FILE), &checkpoint::encode(dims, self.query.values()))?;
        scoring::write_atomic(
            &dir.join(VELOCITY_FILE),
            &checkpoint::encode(dims, &self.optimizer.velocity),
        )?;
        if let (Some(key), Some(queue)) = (&self.key, &self.queue) {
            scoring::write_atomic(&dir.join(KEY_ENCODER_FILE), &checkpoint::encode(dims, key.values()))?;
            scoring::write_atomic(&dir.join(QUEUE_FILE), &encode_queue(queue))?;
        }
        // Scores last: their epoch count marks the checkpoint as complete.
        scoring::save_scores(&dir.join(SCORES_FILE), &self.table)
    }

    /// Restore state written by [`ContrastiveTrainer::save_checkpoint`].
    pub fn resume(dataset: &Dataset, settings: TrainSettings, config_hash: [u8; 32], dir: &Path) -> Result<Self> {
        let mut trainer = Self::new(dataset, settings, config_hash)?;
        let table = scoring::load_scores(&dir.join(SCORES_FILE))?;
        if table.provenance.config_hash != config_hash {
            return Err(Error::config("checkpoint was written by a different configuration"));
        }
        if table.len() != dataset.len() {
            return Err(Error::config("checkpoint covers a different number of examples"));
        }
        let query = checkpoint::load(&dir.join(ENCODER_FILE))?;
        if query.dims() != trainer.query.dims() {
            return Err(Error::config("checkpoint encoder dims differ from the configuration"));
        }
        let velocity = checkpoint::load(&dir.join(VELOCITY_FILE))?;
        trainer.optimizer.velocity = velocity.into_values();
        trainer.query = query;
        if trainer.settings.loss_mode == LossMode::Moco {
            trainer.key = Some(checkpoint::load(&dir.join(KEY_ENCODER_FILE))?);
            let path = dir.join(QUEUE_FILE);
            trainer.queue = Some(decode_queue(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?);
        }
        trainer.table = ScoreTable::from_parts(table.scores().to_vec(), table.epochs_seen(), trainer.table.provenance.clone());
        Ok(trainer)
    }
}

pub const SCORES_FILE: &str = "scores.cscr";
pub const ENCODER_FILE: &str = "encoder.csel";
pub const VELOCITY_FILE: &str = "optimizer_velocity.csel";
pub const KEY_ENCODER_FILE: &str = "key_encoder.csel";
pub const QUEUE_FILE: &str = "queue.csq";

const QUEUE_MAGIC: &[u8; 4] = b"CSQU";

/// Little-endian: magic, version u32, capacity u64, dim u64, len u64, head u64,
/// then capacity x dim f64 in storage order.
fn encode_queue(queue: &NegativeQueue) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(QUEUE_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    for v in [queue.capacity(), queue.dim(), queue.len(), queue.head()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in queue.raw_entries().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_queue(bytes: &[u8]) -> Result<NegativeQueue> {
    if bytes.len() < 40 || &bytes[..4] != QUEUE_MAGIC {
        return Err(Error::format("queue", "not a queue checkpoint"));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 + 8 * i..16 + 8 * i].try_into().expect("8 bytes")) as usize;
    let (cap, dim, len, head) = (word(0), word(1), word(2), word(3));
    let payload = &bytes[40..];
    if Some(payload.len()) != cap.checked_mul(dim).and_then(|v| v.checked_mul(8)) {
        return Err(Error::format("queue", "payload length does not match header"));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let entries = Array2::from_shape_vec((cap, dim), values).map_err(|e| Error::format("queue", e.to_string()))?;
    NegativeQueue::from_parts(entries, len, head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, Split, SyntheticSpec};

    fn settings(mode: LossMode, epochs: usize) -> TrainSettings {
        let mut cfg = RunConfig::default();
        cfg.loss_mode = mode;
        cfg.temperature = mode.default_temperature();
        cfg.epochs = epochs;
        cfg.batch_size = 16;
        cfg.queue_capacity = 32;
        cfg.encoder.hidden_dim = 32;
        cfg.encoder.feature_dim = 16;
        cfg.encoder.projection_dim = 8;
        cfg.augment.output_size = (8, 8);
        TrainSettings::from_config(&cfg)
    }

    fn tiny() -> Dataset {
        let spec = SyntheticSpec {
            n: 50,
            image_size: 8,
            ..SyntheticSpec::default()
        };
        make_synthetic(&spec, Split::Train).unwrap().0
    }

    #[test]
    fn batches_cover_order_and_merge_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = epoch_batches(&order, 4, 2);
        assert_eq!(b, vec![&order[0..4], &order[4..9]]);
        let b = epoch_batches(&order, 3, 2);
        assert_eq!(b.len(), 3);
        let b = epoch_batches(&order[..1], 4, 2);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn every_epoch_commits_one_cossim_per_example() {
        for mode in [LossMode::SimClr, LossMode::Moco] {
            let ds = tiny();
            let mut t = ContrastiveTrainer::new(&ds, settings(mode, 3), [0; 32]).unwrap();
            for e in 0..3 {
                let s = t.run_epoch(&ds).unwrap();
                assert_eq!(s.epoch, e);
                assert_eq!(s.pair_cossims.len(), 50);
                assert!(s.mean_loss.is_finite());
            }
            assert!(t.is_finished());
            assert!(matches!(t.run_epoch(&ds), Err(Error::State(_))));
            assert!(t.table().scores().iter().all(|m| m.abs() <= 3.0));
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        for mode in [LossMode::SimClr, LossMode::Moco] {
            let ds = tiny();
            let dir = tempfile::tempdir().unwrap();
            let mut straight = ContrastiveTrainer::new(&ds, settings(mode, 4), [1; 32]).unwrap();
            for _ in 0..4 {
                straight.run_epoch(&ds).unwrap();
            }
            let mut first = ContrastiveTrainer::new(&ds, settings(mode, 4), [1; 32]).unwrap();
            first.run_epoch(&ds).unwrap();
            first.run_epoch(&ds).unwrap();
            first.save_checkpoint(dir.path()).unwrap();
            let mut resumed = ContrastiveTrainer::resume(&ds, settings(mode, 4), [1; 32], dir.path()).unwrap();
            assert_eq!(resumed.epochs_done(), 2);
            resumed.run_epoch(&ds).unwrap();
            resumed.run_epoch(&ds).unwrap();
            assert_eq!(resumed.table().scores(), straight.table().scores());
            assert!(ContrastiveTrainer::resume(&ds, settings(mode, 4), [2; 32], dir.path()).is_err());
        }
    }

    fn finite_difference_check(mode: LossMode, seed: u64) {
        let dims = EncoderDims::new(12, 10, 8, 6);
        let mut rng = rng::keyed(Stream::Init, seed, 99, 0);
        let mut random_params = || {
            let n = EncoderParams::zeros(dims).unwrap().len();
            let values = (0..n).map(|_| rand::Rng::random_range(&mut rng, -0.5..0.5)).collect();
            EncoderParams::from_values(dims, values).unwrap()
        };
        let query = random_params();
        let key = random_params();
        let queue = NegativeQueue::random(9, 6, seed).unwrap();
        let views = Array2::from_shape_fn((8, 12), |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let idx = [0, 1, 2, 3];
        let tau = mode.default_temperature();
        let analytic = batch_step(&query, Some(&key), Some(&queue), views.view(), &idx, mode, tau).unwrap().grads;
        let loss = |p: &EncoderParams| batch_step(p, Some(&key), Some(&queue), views.view(), &idx, mode, tau).unwrap().result.loss;
        let eps = 1e-5;
        for i in 0..query.len() {
            let mut up = query.clone();
            up.values_mut()[i] += eps;
            let mut down = query.clone();
            down.values_mut()[i] -= eps;
            let fd = (loss(&up) - loss(&down)) / (2.0 * eps);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err <= 1e-4, "{mode} coordinate {i}: fd {fd} analytic {}", analytic[i]);
        }
    }

    #[test]
    fn batch_gradients_match_finite_differences() {
        for seed in 0..3 {
            finite_difference_check(LossMode::SimClr, seed);
            finite_difference_check(LossMode::Moco, seed);
        }
    }

    #[test]
    fn moco_step_requires_key_state() {
        let dims = EncoderDims::new(4, 4, 4, 4);
        let q = EncoderParams::init(dims, 0).unwrap();
        let views = Array2::zeros((4, 4));
        assert!(matches!(
            batch_step(&q, None, None, views.view(), &[0, 1], LossMode::Moco, 0.2),
            Err(Error::State(_))
        ));
        assert!(batch_step(&q, None, None, views.view(), &[0], LossMode::SimClr, 0.5).is_err());
    }
}
