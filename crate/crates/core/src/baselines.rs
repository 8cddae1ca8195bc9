//! Comparison selectors: uniform random subsets, forgetting events, greedy
//! k-centers.

use ndarray::ArrayView2;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::scoring::CoresetRanking;

/// Uniform sample of `size` distinct indices from `0..n`.
pub fn random_subset(n: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > n {
        return Err(Error::Bounds(format!("subset size {size} exceeds dataset size {n}")));
    }
    let mut rng = rng::keyed(Stream::Subset, seed, n as u64, size as u64);
    Ok(index::sample(&mut rng, n, size).into_vec())
}

/// Per-example count of correct-to-incorrect transitions across epochs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForgettingTable {
    forget_count: Vec<u32>,
    prev_correct: Vec<bool>,
    epochs_seen: u32,
}

impl ForgettingTable {
    pub fn new(n: usize) -> Self {
        Self {
            forget_count: vec![0; n],
            prev_correct: vec![false; n],
            epochs_seen: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.forget_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forget_count.is_empty()
    }

    pub fn counts(&self) -> &[u32] {
        &self.forget_count
    }

    pub fn epochs_seen(&self) -> u32 {
        self.epochs_seen
    }

    pub fn update(&mut self, correct: &[bool]) -> Result<()> {
        if correct.len() != self.len() {
            return Err(Error::Protocol(format!(
                "correctness vector has {} entries, table has {}",
                correct.len(),
                self.len()
            )));
        }
        for ((count, prev), &now) in self.forget_count.iter_mut().zip(&mut self.prev_correct).zip(correct) {
            if *prev && !now {
                *count += 1;
            }
            *prev = now;
        }
        self.epochs_seen += 1;
        Ok(())
    }

    /// Counts as scores; more forgetting ranks higher.
    pub fn scores(&self) -> Vec<f64> {
        self.forget_count.iter().map(|&c| c as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterSet {
    pub chosen: Vec<usize>,
    pub min_dist: Vec<f64>,
}

impl CenterSet {
    pub fn covering_radius(&self) -> f64 {
        self.min_dist.iter().copied().fold(0.0, f64::max)
    }
}

fn distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Farthest-point selection from a seed-chosen first center.
pub fn kcenters_greedy(features: ArrayView2<f64>, size: usize, seed: u64) -> Result<CenterSet> {
    let n = features.nrows();
    if n == 0 || size == 0 {
        return Ok(CenterSet {
            chosen: Vec::new(),
            min_dist: vec![f64::INFINITY; n],
        });
    }
    let first = rng::keyed(Stream::KCenters, seed, n as u64, 0).random_range(0..n);
    kcenters_from(features, size, first)
}

/// Farthest-point selection with an explicit first center.
pub fn kcenters_from(features: ArrayView2<f64>, size: usize, first: usize) -> Result<CenterSet> {
    greedy(features, size, first).map(|(set, _)| set)
}

/// Full greedy order of all points; each point's score is its distance to
/// the chosen set at the moment it was picked (infinite for the first).
pub fn kcenters_ranking(features: ArrayView2<f64>, seed: u64) -> Result<CoresetRanking> {
    let n = features.nrows();
    if n == 0 {
        return Ok(CoresetRanking::identity(0));
    }
    let first = rng::keyed(Stream::KCenters, seed, n as u64, 0).random_range(0..n);
    let (set, picked_at) = greedy(features, n, first)?;
    let mut scores = vec![0.0; n];
    for (&k, &d) in set.chosen.iter().zip(&picked_at) {
        scores[k] = d;
    }
    CoresetRanking::from_order(set.chosen, scores)
}

/// Forgetting counts as a ranking: most-forgotten first.
pub fn forgetting_ranking(table: &ForgettingTable) -> CoresetRanking {
    CoresetRanking::from_scores(table.scores())
}

fn greedy(features: ArrayView2<f64>, size: usize, first: usize) -> Result<(CenterSet, Vec<f64>)> {
    let n = features.nrows();
    if size > n {
        return Err(Error::Bounds(format!("{size} centers requested from {n} points")));
    }
    if first >= n {
        return Err(Error::Bounds(format!("first center {first} out of range for {n} points")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("k-centers features contain non-finite values".into()));
    }
    let mut min_dist = vec![f64::INFINITY; n];
    let mut chosen = Vec::with_capacity(size);
    let mut picked_at = Vec::with_capacity(size);
    let mut next = first;
    while chosen.len() < size {
        chosen.push(next);
        picked_at.push(min_dist[next]);
        let center = features.row(next);
        min_dist.par_iter_mut().enumerate().for_each(|(k, d)| {
            *d = d.min(distance(features.row(k), center));
        });
        min_dist[next] = 0.0;
        let mut best = 0;
        for k in 1..n {
            if min_dist[k] > min_dist[best] {
                best = k;
            }
        }
        next = best;
    }
    Ok((CenterSet { chosen, min_dist }, picked_at))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_subset_basics() {
        let mut all = random_subset(50, 50, 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(random_subset(50, 20, 9).unwrap(), random_subset(50, 20, 9).unwrap());
        assert_ne!(random_subset(50, 20, 9).unwrap(), random_subset(50, 20, 10).unwrap());
        assert!(matches!(random_subset(5, 6, 0), Err(Error::Bounds(_))));
    }

    #[test]
    fn five_seed_random_intersection_near_f_to_the_fourth() {
        let (n, l) = (2000, 600);
        let f = l as f64 / n as f64;
        let mut common: Vec<bool> = vec![true; n];
        for seed in 0..5 {
            let mut hit = vec![false; n];
            for k in random_subset(n, l, seed).unwrap() {
                hit[k] = true;
            }
            common.iter_mut().zip(&hit).for_each(|(c, h)| *c &= h);
        }
        let ratio = common.iter().filter(|&&c| c).count() as f64 / l as f64;
        let p = f.powi(4);
        assert!((ratio - p).abs() <= 3.0 * (p * (1.0 - p) / l as f64).sqrt());
    }

    #[test]
    fn forgetting_unrolled_sequences() {
        let mut t = ForgettingTable::new(2);
        for step in [[true, true], [false, true], [true, true], [false, true]] {
            t.update(&step).unwrap();
        }
        assert_eq!(t.counts(), &[2, 0]);
        assert_eq!(t.epochs_seen(), 4);
        assert!(matches!(t.update(&[true]), Err(Error::Protocol(_))));
    }

    #[test]
    fn forgetting_matches_transition_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let matrix: Vec<Vec<bool>> = (0..6).map(|_| (0..20).map(|_| rng.random_bool(0.6)).collect()).collect();
            let mut t = ForgettingTable::new(20);
            for row in &matrix {
                t.update(row).unwrap();
            }
            for k in 0..20 {
                let seq: Vec<bool> = matrix.iter().map(|r| r[k]).collect();
                let scan = seq.windows(2).filter(|w| w[0] && !w[1]).count() as u32;
                assert_eq!(t.counts()[k], scan);
                assert!(t.counts()[k] <= t.epochs_seen());
            }
        }
    }

    #[test]
    fn farthest_point_on_a_line() {
        let pts = array![[0.0], [1.0], [10.0]];
        let c = kcenters_from(pts.view(), 2, 0).unwrap();
        assert_eq!(c.chosen, vec![0, 2]);
        assert_eq!(c.min_dist, vec![0.0, 1.0, 0.0]);
        let all = kcenters_greedy(pts.view(), 3, 5).unwrap();
        let mut chosen = all.chosen.clone();
        chosen.sort_unstable();
        assert_eq!(chosen, vec![0, 1, 2]);
        assert!(kcenters_greedy(pts.view(), 4, 0).is_err());
    }

    #[test]
    fn greedy_order_ranking() {
        let pts = array![[0.0], [1.0], [10.0], [4.0]];
        let r = kcenters_ranking(pts.view(), 0).unwrap();
        let first = r.order()[0];
        assert_eq!(r.scores()[first], f64::INFINITY);
        let prefix = kcenters_greedy(pts.view(), 3, 0).unwrap();
        assert_eq!(&r.order()[..3], prefix.chosen.as_slice());
        let mut t = ForgettingTable::new(3);
        t.update(&[true, true, true]).unwrap();
        t.update(&[false, true, false]).unwrap();
        t.update(&[true, true, false]).unwrap();
        t.update(&[false, false, false]).unwrap();
        assert_eq!(forgetting_ranking(&t).order(), &[0, 1, 2]);
    }

    #[test]
    fn ties_break_to_lower_index() {
        let pts = array![[0.0], [-1.0], [1.0]];
        let c = kcenters_from(pts.view(), 2, 0).unwrap();
        assert_eq!(c.chosen, vec![0, 1]);
    }

    fn exhaustive_radius(pts: &Array2<f64>, k: usize) -> f64 {
        let n = pts.nrows();
        let mut best = f64::INFINITY;
        let mut combo: Vec<usize> = (0..k).collect();
        loop {
            let radius = (0..n)
                .map(|p| combo.iter().map(|&c| distance(pts.row(p), pts.row(c))).fold(f64::INFINITY, f64::min))
                .fold(0.0, f64::max);
            best = best.min(radius);
            let mut i = k;
            while i > 0 && combo[i - 1] == n - k + i - 1 {
                i -= 1;
            }
            if i == 0 {
                return best;
            }
            combo[i - 1] += 1;
            for j in i..k {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }

    #[test]
    fn greedy_radius_within_twice_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            let pts = Array2::from_shape_fn((12, 2), |_| rng.random_range(-1.0..1.0));
            let greedy = kcenters_greedy(pts.view(), 5, trial).unwrap();
            let opt = exhaustive_radius(&pts, 5);
            assert!(greedy.covering_radius() <= 2.0 * opt + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn centers_are_distinct_and_radius_shrinks(seed in 0u64..500, n in 2usize..30) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts = Array2::from_shape_fn((n, 3), |_| rng.random_range(-5.0..5.0));
            let mut prev = f64::INFINITY;
            let mut prev_dist = vec![f64::INFINITY; n];
            for l in 1..=n {
                let c = kcenters_greedy(pts.view(), l, seed).unwrap();
                let mut sorted = c.chosen.clone();
                sorted.sort_unstable();
                sorted.dedup();
                prop_assert_eq!(sorted.len(), l);
                for &k in &c.chosen {
                    prop_assert_eq!(c.min_dist[k], 0.0);
                }
                for k in 0..n {
                    prop_assert!(c.min_dist[k] <= prev_dist[k]);
                }
                prev_dist = c.min_dist.clone();
                let r = c.covering_radius();
                prop_assert!(r <= prev);
                prev = r;
            }
        }
    }
}
