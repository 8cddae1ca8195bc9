//! Contrastive objectives and the cosine similarity that feeds the score.
//!
//! Both losses report, besides the loss and its gradient on the projections,
//! the raw (untempered) cosine similarity of every positive pair. Those values
//! are what the score table accumulates.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Which contrastive objective drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// NT-Xent over in-batch negatives.
    SimClr,
    /// InfoNCE against a momentum encoder and a negative queue.
    Moco,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::SimClr => "simclr",
            LossMode::Moco => "moco",
        }
    }

    pub fn default_temperature(&self) -> f64 {
        match self {
            LossMode::SimClr => 0.5,
            LossMode::Moco => 0.2,
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simclr" => Ok(LossMode::SimClr),
            "moco" => Ok(LossMode::Moco),
            other => Err(Error::config(format!("unknown loss mode {other:?} (simclr|moco)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatchResult {
    pub loss: f64,
    /// `(example_index, cossim)` for each positive pair, in batch order.
    pub pair_cossims: Vec<(usize, f64)>,
    /// dLoss/dz for every projection row the loss was computed from.
    pub grad_on_projections: Array2<f64>,
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cossim(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::config(format!("cossim of lengths {} and {}", u.len(), v.len())));
    }
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Numeric("cossim of a zero vector".into()));
    }
    Ok((u.dot(&v) / (nu * nv)).clamp(-1.0, 1.0))
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    Ok(())
}

/// NT-Xent over `2B` unit-norm rows where row `i` and row `i + B` are the two
/// views of `example_indices[i]`.
pub fn ntxent_loss(
    projections: ArrayView2<f64>,
    example_indices: &[usize],
    temperature: f64,
) -> Result<ContrastiveBatchResult> {
    check_temperature(temperature)?;
    let rows = projections.nrows();
    let b = example_indices.len();
    if rows != 2 * b {
        return Err(Error::config(format!("{rows} projection rows for {b} examples")));
    }
    if b < 2 {
        return Err(Error::config("NT-Xent needs at least two examples (four views) per batch"));
    }
    let partner = |i: usize| if i < b { i + b } else { i - b };
    let sims = projections.dot(&projections.t());

    // weights[i][k] = softmax_k - [k is the positive of i]; diagonal excluded.
    let mut weights = Array2::<f64>::zeros((rows, rows));
    let mut loss = 0.0;
    for i in 0..rows {
        let logits = sims.row(i).mapv(|s| s / temperature);
        let max = logits
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for k in (0..rows).filter(|&k| k != i) {
            let e = (logits[k] - max).exp();
            weights[[i, k]] = e;
            denom += e;
        }
        loss += -(logits[partner(i)] - max) + denom.ln();
        weights.row_mut(i).mapv_inplace(|w| w / denom);
        weights[[i, partner(i)]] -= 1.0;
    }
    let scale = 1.0 / (rows as f64 * temperature);
    let grad = (weights.dot(&projections) + weights.t().dot(&projections)) * scale;
    let loss = loss / rows as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("NT-Xent loss is {loss}")));
    }
    let pair_cossims = example_indices
        .iter()
        .enumerate()
        .map(|(i, &k)| Ok((k, cossim(projections.row(i), projections.row(i + b))?)))
        .collect::<Result<_>>()?;
    Ok(ContrastiveBatchResult {
        loss,
        pair_cossims,
        grad_on_projections: grad,
    })
}

/// FIFO ring of unit-norm key vectors used as negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    entries: Array2<f64>,
    len: usize,
    head: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::config("queue capacity and dimension must be positive"));
        }
        Ok(Self {
            entries: Array2::zeros((capacity, dim)),
            len: 0,
            head: 0,
        })
    }

    /// A full queue of random unit vectors.
    pub fn random(capacity: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut queue = Self::new(capacity, dim)?;
        let mut rng = rng::keyed(Stream::Queue, seed, 0, 0);
        let mut keys = Array2::from_shape_simple_fn((capacity, dim), || rng.sample::<f64, _>(StandardNormal));
        for mut row in keys.axis_iter_mut(Axis(0)) {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        queue.push(keys.view());
        Ok(queue)
    }

    /// Rebuild from stored state (checkpoint resume).
    pub fn from_parts(entries: Array2<f64>, len: usize, head: usize) -> Result<Self> {
        if len > entries.nrows() || head >= entries.nrows().max(1) {
            return Err(Error::State(format!(
                "queue state len {len}, head {head} invalid for capacity {}",
                entries.nrows()
            )));
        }
        Ok(Self { entries, len, head })
    }

    pub fn capacity(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn raw_entries(&self) -> ArrayView2<'_, f64> {
        self.entries.view()
    }

    /// Stored keys, oldest first.
    pub fn fifo(&self) -> Vec<ArrayView1<'_, f64>> {
        let start = if self.len < self.capacity() { 0 } else { self.head };
        (0..self.len)
            .map(|i| self.entries.row((start + i) % self.capacity()))
            .collect()
    }

    /// Append keys in row order, evicting the oldest when full.
    pub fn push(&mut self, keys: ArrayView2<f64>) {
        debug_assert_eq!(keys.ncols(), self.dim());
        for key in keys.rows() {
            debug_assert!((key.dot(&key).sqrt() - 1.0).abs() < 1e-6, "queue keys must be unit-norm");
            self.entries.row_mut(self.head).assign(&key);
            self.head = (self.head + 1) % self.capacity();
            self.len = (self.len + 1).min(self.capacity());
        }
    }

    fn negatives(&self) -> ArrayView2<'_, f64> {
        self.entries.slice(ndarray::s![..self.len, ..])
    }
}

/// InfoNCE with the matching key as positive and the queue as negatives.
/// Keys and queue are constants: the gradient covers the queries only.
pub fn moco_loss(
    queries: ArrayView2<f64>,
    keys: ArrayView2<f64>,
    queue: &NegativeQueue,
    example_indices: &[usize],
    temperature: f64,
) -> Result<ContrastiveBatchResult> {
    check_temperature(temperature)?;
    if queue.is_empty() {
        return Err(Error::State("negative queue is empty".into()));
    }
    let b = example_indices.len();
    if queries.nrows() != b || keys.dim() != queries.dim() || b == 0 {
        return Err(Error::config(format!(
            "queries {:?} and keys {:?} for {b} examples",
            queries.dim(),
            keys.dim()
        )));
    }
    if queries.ncols() != queue.dim() {
        return Err(Error::config("queue dimension differs from projection dimension"));
    }
    let negatives = queue.negatives();
    let neg_logits = queries.dot(&negatives.t()) / temperature;
    let mut grad = Array2::<f64>::zeros(queries.dim());
    let mut loss = 0.0;
    let mut pair_cossims = Vec::with_capacity(b);
    for i in 0..b {
        let pos = queries.row(i).dot(&keys.row(i)) / temperature;
        let row = neg_logits.row(i);
        let max = row.iter().copied().fold(pos, f64::max);
        let e_pos = (pos - max).exp();
        let e_neg = row.mapv(|v| (v - max).exp());
        let denom = e_pos + e_neg.sum();
        loss += -(pos - max) + denom.ln();
        let p_pos = e_pos / denom;
        let p_neg = e_neg / denom;
        let mut g = grad.row_mut(i);
        g.scaled_add(p_pos - 1.0, &keys.row(i));
        g += &p_neg.dot(&negatives);
        g /= b as f64 * temperature;
        pair_cossims.push((example_indices[i], cossim(queries.row(i), keys.row(i))?));
    }
    let loss = loss / b as f64;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("InfoNCE loss is {loss}")));
    }
    Ok(ContrastiveBatchResult {
        loss,
        pair_cossims,
        grad_on_projections: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m: Array2<f64> = Array2::from_shape_simple_fn((rows, dim), || rng.random_range(-1.0..1.0));
        for mut r in m.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n;
        }
        m
    }

    #[test]
    fn cossim_basics() {
        let v = array![0.3, -2.0, 1.5];
        assert!((cossim(v.view(), v.view()).unwrap() - 1.0).abs() < 1e-15);
        assert!((cossim(v.view(), (-&v).view()).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cossim(array![1.0, 0.0].view(), array![0.0, 1.0].view()).unwrap(), 0.0);
        assert!(cossim(Array1::zeros(2).view(), array![0.0, 1.0].view()).is_err());
    }

    /// Term-by-term softmax over explicit sums.
    fn brute_ntxent(z: &Array2<f64>, tau: f64) -> f64 {
        let n = z.nrows();
        let b = n / 2;
        let mut total = 0.0;
        for i in 0..n {
            let p = if i < b { i + b } else { i - b };
            let num = (z.row(i).dot(&z.row(p)) / tau).exp();
            let mut den = 0.0;
            for k in 0..n {
                if k != i {
                    den += (z.row(i).dot(&z.row(k)) / tau).exp();
                }
            }
            total += -(num / den).ln();
        }
        total / n as f64
    }

    #[test]
    fn ntxent_matches_brute_force_softmax() {
        let s = 0.5f64.sqrt();
        let z = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [s, s, 0.0], [0.0, s, s]];
        let out = ntxent_loss(z.view(), &[10, 11], 1.0).unwrap();
        assert!((out.loss - brute_ntxent(&z, 1.0)).abs() < 1e-9);
        assert_eq!(out.pair_cossims.len(), 2);
        assert_eq!(out.pair_cossims[0].0, 10);
        assert!((out.pair_cossims[0].1 - s).abs() < 1e-12);
        assert!((out.pair_cossims[1].1 - s).abs() < 1e-12);
    }

    #[test]
    fn ntxent_identical_rows_give_log_2b_minus_1() {
        let b = 3;
        let z = Array2::from_shape_fn((2 * b, 4), |(_, j)| if j == 1 { 1.0 } else { 0.0 });
        let out = ntxent_loss(z.view(), &[0, 1, 2], 0.5).unwrap();
        assert!((out.loss - ((2 * b - 1) as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn ntxent_rejects_degenerate_batch_and_bad_temperature() {
        let z = unit_rows(2, 3, 1);
        assert!(matches!(ntxent_loss(z.view(), &[0], 0.5), Err(Error::Config(_))));
        let z = unit_rows(4, 3, 1);
        assert!(matches!(ntxent_loss(z.view(), &[0, 1], 0.0), Err(Error::Config(_))));
        assert!(matches!(ntxent_loss(z.view(), &[0, 1], -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn ntxent_pair_cossims_ignore_temperature() {
        let z = unit_rows(8, 5, 3);
        let idx = [4, 5, 6, 7];
        let a = ntxent_loss(z.view(), &idx, 0.1).unwrap();
        let b = ntxent_loss(z.view(), &idx, 1.0).unwrap();
        assert_eq!(a.pair_cossims, b.pair_cossims);
        assert_ne!(a.loss, b.loss);
    }

    #[test]
    fn ntxent_is_permutation_symmetric() {
        let b = 4;
        let z = unit_rows(2 * b, 6, 9);
        let idx = [0, 1, 2, 3];
        let perm = [2, 0, 3, 1];
        let mut zp = z.clone();
        for (new, &old) in perm.iter().enumerate() {
            zp.row_mut(new).assign(&z.row(old));
            zp.row_mut(new + b).assign(&z.row(old + b));
        }
        let idx_p: Vec<usize> = perm.iter().map(|&o| idx[o]).collect();
        let a = ntxent_loss(z.view(), &idx, 0.5).unwrap();
        let p = ntxent_loss(zp.view(), &idx_p, 0.5).unwrap();
        assert!((a.loss - p.loss).abs() < 1e-12);
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(p.pair_cossims[new], a.pair_cossims[old]);
        }
    }

    fn fd_check(f: impl Fn(&Array2<f64>) -> f64, z: &Array2<f64>, grad: &Array2<f64>) {
        let eps = 1e-6;
        for ((i, j), &g) in grad.indexed_iter() {
            let mut plus = z.clone();
            plus[[i, j]] += eps;
            let mut minus = z.clone();
            minus[[i, j]] -= eps;
            let fd = (f(&plus) - f(&minus)) / (2.0 * eps);
            let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
            assert!(err < 1e-5, "({i},{j}) analytic {g} numeric {fd}");
        }
    }

    #[test]
    fn ntxent_gradient_matches_finite_differences() {
        let z = unit_rows(6, 4, 21);
        let idx = [0, 1, 2];
        let out = ntxent_loss(z.view(), &idx, 0.5).unwrap();
        fd_check(|m| ntxent_loss(m.view(), &idx, 0.5).unwrap().loss, &z, &out.grad_on_projections);
    }

    #[test]
    fn moco_orthogonal_queue_closed_form() {
        let tau = 0.2;
        let q = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let mut queue = NegativeQueue::new(8, 4).unwrap();
        queue.push(array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, 0.0, -1.0, 0.0]].view());
        let out = moco_loss(q.view(), q.view(), &queue, &[0, 1], tau).unwrap();
        let e = (1.0f64 / tau).exp();
        assert!((out.loss - -(e / (e + 3.0)).ln()).abs() < 1e-12);
        assert_eq!(out.pair_cossims, vec![(0, 1.0), (1, 1.0)]);
    }

    #[test]
    fn moco_uniform_two_way() {
        let v = array![[0.6, 0.8]];
        let mut queue = NegativeQueue::new(1, 2).unwrap();
        queue.push(v.view());
        let out = moco_loss(v.view(), v.view(), &queue, &[0], 0.2).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn moco_empty_queue_is_a_state_error() {
        let v = array![[1.0, 0.0]];
        let queue = NegativeQueue::new(4, 2).unwrap();
        assert!(matches!(moco_loss(v.view(), v.view(), &queue, &[0], 0.2), Err(Error::State(_))));
    }

    #[test]
    fn moco_gradient_matches_finite_differences() {
        let q = unit_rows(3, 5, 1);
        let k = unit_rows(3, 5, 2);
        let queue = NegativeQueue::random(7, 5, 3).unwrap();
        let idx = [0, 1, 2];
        let out = moco_loss(q.view(), k.view(), &queue, &idx, 0.2).unwrap();
        fd_check(
            |m| moco_loss(m.view(), k.view(), &queue, &idx, 0.2).unwrap().loss,
            &q,
            &out.grad_on_projections,
        );
    }

    #[test]
    fn queue_ring_semantics() {
        let mut queue = NegativeQueue::new(4, 2).unwrap();
        let keys: Vec<Array2<f64>> = (1..=6)
            .map(|i| {
                let a = i as f64;
                let n = (a * a + 1.0).sqrt();
                array![[a / n, 1.0 / n]]
            })
            .collect();
        for (pushed, key) in keys.iter().enumerate() {
            queue.push(key.view());
            assert_eq!(queue.len(), (pushed + 1).min(4));
            assert_eq!(queue.fifo().last().unwrap(), &key.row(0));
        }
        let held: Vec<Vec<f64>> = queue.fifo().iter().map(|r| r.to_vec()).collect();
        let expect: Vec<Vec<f64>> = keys[2..].iter().map(|k| k.row(0).to_vec()).collect();
        assert_eq!(held, expect);
    }
}
