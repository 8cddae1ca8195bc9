//! Synthetic images with planted hard examples.
//!
//! Every class owns a smooth periodic texture (its own orientation and colour).
//! A normal example carries its class texture over the whole image. A hard
//! example is split near the vertical midline: the slightly wider side shows
//! its class texture at reduced contrast, the other side a different class
//! texture at full contrast. Two random crops of it often see unrelated
//! content. Textures repeat exactly across the midline, which makes the left
//! and right halves of a normal example identical up to noise.
//!
//! Each example also draws a persistent noise level, giving normal examples a
//! graded, seed-independent difficulty.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageShape, Split};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Upper end of the per-example noise standard deviation.
pub const MAX_NOISE: f64 = 0.08;

/// Relative contrast of the labelled texture inside a hard example.
pub const LABEL_CONTRAST: f64 = 0.7;

/// Texture frequencies in cycles per half-image (x, y).
const FREQUENCIES: [(i32, i32); 12] = [
    (1, 0),
    (0, 1),
    (1, 1),
    (1, -1),
    (2, 0),
    (0, 2),
    (2, 1),
    (1, 2),
    (2, -1),
    (1, -2),
    (2, 2),
    (2, -2),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub image_size: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub hard_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            image_size: 16,
            channels: 3,
            num_classes: 4,
            hard_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.hard_fraction > 0.0 && self.hard_fraction < 1.0) {
            return Err(Error::config(format!(
                "hard_fraction must lie in (0, 1), got {}",
                self.hard_fraction
            )));
        }
        if self.image_size < 8 {
            return Err(Error::config(format!("image_size must be at least 8, got {}", self.image_size)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("synthetic data needs at least two classes"));
        }
        if self.channels == 0 || self.n == 0 {
            return Err(Error::config("synthetic data needs n >= 1 and channels >= 1"));
        }
        Ok(())
    }

    pub fn hard_count(&self) -> usize {
        (self.hard_fraction * self.n as f64).round() as usize
    }

    /// Settings for a held-out split drawn from the same distribution.
    pub fn test_split(&self, n: usize) -> Self {
        Self {
            n,
            seed: rng::derive_seed(self.seed, 0x7e57),
            ..self.clone()
        }
    }

    pub fn shape(&self) -> ImageShape {
        ImageShape::new(self.channels, self.image_size, self.image_size)
    }
}

/// Texture classes on the two sides of one image. Columns `< boundary` show
/// `left`, the rest show `right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextureLayout {
    pub left: usize,
    pub right: usize,
    pub boundary: usize,
}

impl TextureLayout {
    pub fn is_hard(&self) -> bool {
        self.left != self.right
    }

    /// Class of the texture covering more columns.
    pub fn dominant(&self, width: usize) -> usize {
        if 2 * self.boundary >= width {
            self.left
        } else {
            self.right
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    /// Sorted ascending.
    pub hard_indices: Vec<usize>,
    pub layouts: Vec<TextureLayout>,
    pub noise_levels: Vec<f64>,
}

fn class_colour(class: usize, channels: usize) -> Vec<f64> {
    if channels == 1 {
        return vec![1.0];
    }
    let hot = class % channels;
    if (class / channels) % 2 == 0 {
        (0..channels).map(|c| if c == hot { 1.0 } else { 0.0 }).collect()
    } else {
        (0..channels).map(|c| if c == hot { 0.0 } else { 0.8 }).collect()
    }
}

/// Smooth nonnegative texture value in [0, 1].
fn texture(class: usize, x: usize, y: usize, size: usize, phase: f64) -> f64 {
    let (u, v) = FREQUENCIES[class % FREQUENCIES.len()];
    let half = (size / 2) as f64;
    let arg = 2.0 * PI * (u as f64 * x as f64 / half + v as f64 * y as f64 / half) + phase;
    let p = 0.5 * (1.0 + arg.cos());
    (p * p) * (p * p)
}

/// Columns by which the labelled region of a hard example exceeds half.
fn dominance_margin(size: usize) -> usize {
    (size / 16).max(1)
}

pub fn make_synthetic(spec: &SyntheticSpec, split: Split) -> Result<(Dataset, SyntheticTruth)> {
    spec.validate()?;
    let (n, size, c, k) = (spec.n, spec.image_size, spec.channels, spec.num_classes);
    let shape = spec.shape();

    let mut layout_rng = rng::keyed(Stream::Synthetic, spec.seed, u64::MAX, 0);
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(&mut layout_rng);
    let hard: BTreeSet<usize> = index::sample(&mut layout_rng, n, spec.hard_count()).into_iter().collect();

    let colours: Vec<Vec<f64>> = (0..k).map(|cl| class_colour(cl, c)).collect();
    let mut images = Array2::<f64>::zeros((n, shape.len()));
    let mut layouts = Vec::with_capacity(n);
    let mut noise_levels = Vec::with_capacity(n);
    for (i, mut row) in images.rows_mut().into_iter().enumerate() {
        let mut rng = rng::keyed(Stream::Synthetic, spec.seed, i as u64, 1);
        let label = labels[i];
        let layout = if hard.contains(&i) {
            let other = (label + 1 + rng.random_range(0..k - 1)) % k;
            if rng.random_bool(0.5) {
                TextureLayout { left: label, right: other, boundary: size / 2 + dominance_margin(size) }
            } else {
                TextureLayout { left: other, right: label, boundary: size / 2 - dominance_margin(size) }
            }
        } else {
            TextureLayout { left: label, right: label, boundary: size / 2 }
        };
        let amplitude = rng.random_range(0.7..1.0);
        let mut phases = [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)];
        if !layout.is_hard() {
            phases[1] = phases[0];
        }
        let sigma = rng.random_range(0.0..MAX_NOISE);
        let px = row.as_slice_mut().expect("contiguous row");
        for ch in 0..c {
            for y in 0..size {
                for x in 0..size {
                    let side = usize::from(x >= layout.boundary);
                    let class = if side == 0 { layout.left } else { layout.right };
                    let contrast = if layout.is_hard() && class == label { LABEL_CONTRAST } else { 1.0 };
                    let signal = contrast * amplitude * colours[class][ch] * texture(class, x, y, size, phases[side]);
                    let z: f64 = rng.sample(StandardNormal);
                    px[ch * size * size + y * size + x] = (signal + sigma * z).clamp(0.0, 1.0);
                }
            }
        }
        layouts.push(layout);
        noise_levels.push(sigma);
    }
    let dataset = Dataset::new("synthetic", split, shape, images, Some(labels), k)?;
    let truth = SyntheticTruth {
        hard_indices: hard.into_iter().collect(),
        layouts,
        noise_levels,
    };
    Ok((dataset, truth))
}
