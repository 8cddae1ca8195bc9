//! Seeded two-view augmentation.
//!
//! Each view applies, in order: random resized crop, horizontal flip, per-channel
//! colour jitter and random grayscale. All draws come from a stream keyed by
//! `(seed, epoch, example_index, view_id)`, so a view is a pure function of the
//! example, the config and the key.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Example, ImageShape};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Crop area as a fraction of the image area, `(lo, hi)`.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub grayscale_prob: f64,
    /// `(height, width)` of every view.
    pub output_size: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.2, 1.0),
            flip_prob: 0.5,
            jitter_strength: 0.4,
            grayscale_prob: 0.2,
            output_size: (16, 16),
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation producing `output_size` views.
    pub fn identity(output_size: (usize, usize)) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.jitter_strength >= 0.0 && self.jitter_strength.is_finite()) {
            return Err(Error::config(format!(
                "jitter_strength must be nonnegative, got {}",
                self.jitter_strength
            )));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::config("output size must be positive"));
        }
        Ok(())
    }

    pub fn output_shape(&self, channels: usize) -> ImageShape {
        ImageShape::new(channels, self.output_size.0, self.output_size.1)
    }
}

/// Key of one augmentation stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewKey {
    pub seed: u64,
    pub epoch: u64,
    pub example_index: u64,
    pub view_id: u64,
}

impl ViewKey {
    fn stream(&self) -> ChaCha8Rng {
        rng::augment_stream(self.seed, self.epoch, self.example_index, self.view_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Vec<f64>,
    pub view_b: Vec<f64>,
    pub shape: ImageShape,
    pub example_index: usize,
}

/// Crop window in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Area fraction uniform in `scale`, aspect ratio uniform in `[3/4, 4/3]`,
/// ten attempts to fit inside the image and a whole-image fallback clamped to
/// the ratio range.
pub fn sample_crop(rng: &mut ChaCha8Rng, height: usize, width: usize, scale: (f64, f64)) -> CropWindow {
    const RATIO: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);
    let area = (height * width) as f64;
    for _ in 0..10 {
        let target = area * if scale.0 < scale.1 { rng.random_range(scale.0..=scale.1) } else { scale.0 };
        let aspect = rng.random_range(RATIO.0..=RATIO.1);
        let w = ((target * aspect).sqrt().round() as usize).max(1);
        let h = ((target / aspect).sqrt().round() as usize).max(1);
        if w <= width && h <= height {
            let top = rng.random_range(0..=height - h);
            let left = rng.random_range(0..=width - w);
            return CropWindow { top, left, height: h, width: w };
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < RATIO.0 {
        (width, ((width as f64 / RATIO.0).round() as usize).clamp(1, height))
    } else if in_ratio > RATIO.1 {
        (((height as f64 * RATIO.1).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    CropWindow {
        top: (height - h) / 2,
        left: (width - w) / 2,
        height: h,
        width: w,
    }
}

/// Bilinear resize of a crop window (half-pixel centres, edge clamping).
pub fn resized_crop(pixels: &[f64], shape: ImageShape, window: CropWindow, out: (usize, usize)) -> Vec<f64> {
    let (oh, ow) = out;
    let full = window.top == 0 && window.left == 0 && window.height == shape.height && window.width == shape.width;
    if full && (oh, ow) == (shape.height, shape.width) {
        return pixels.to_vec();
    }
    let sy = window.height as f64 / oh as f64;
    let sx = window.width as f64 / ow as f64;
    let axis = |dst: usize, scale: f64, len: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut result = Vec::with_capacity(shape.channels * oh * ow);
    for ch in 0..shape.channels {
        let plane = &pixels[ch * shape.plane()..(ch + 1) * shape.plane()];
        for y in 0..oh {
            let (y0, y1, fy) = axis(y, sy, window.height);
            let (r0, r1) = ((window.top + y0) * shape.width, (window.top + y1) * shape.width);
            for x in 0..ow {
                let (x0, x1, fx) = axis(x, sx, window.width);
                let (c0, c1) = (window.left + x0, window.left + x1);
                let top = plane[r0 + c0] * (1.0 - fx) + plane[r0 + c1] * fx;
                let bottom = plane[r1 + c0] * (1.0 - fx) + plane[r1 + c1] * fx;
                result.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    result
}

/// Reverse the column order of every row in every channel.
pub fn hflip(pixels: &mut [f64], shape: ImageShape) {
    for row in pixels.chunks_mut(shape.width) {
        row.reverse();
    }
}

/// Per-channel brightness then contrast scaling, each factor uniform in
/// `[1 - s, 1 + s]`, clamped to [0, 1].
fn jitter(rng: &mut ChaCha8Rng, pixels: &mut [f64], shape: ImageShape, strength: f64) {
    let plane = shape.plane();
    for chunk in pixels.chunks_mut(plane) {
        let brightness = rng.random_range(1.0 - strength..=1.0 + strength);
        let contrast = rng.random_range(1.0 - strength..=1.0 + strength);
        chunk.iter_mut().for_each(|v| *v *= brightness);
        let mean = chunk.iter().sum::<f64>() / plane as f64;
        chunk
            .iter_mut()
            .for_each(|v| *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0));
    }
}

/// Luma (0.299, 0.587, 0.114) replicated to all channels. Single-channel images
/// are left untouched; other channel counts use the plain channel mean.
pub fn grayscale(pixels: &mut [f64], shape: ImageShape) {
    let plane = shape.plane();
    match shape.channels {
        1 => {}
        3 => {
            for i in 0..plane {
                let y = 0.299 * pixels[i] + 0.587 * pixels[plane + i] + 0.114 * pixels[2 * plane + i];
                for ch in 0..3 {
                    pixels[ch * plane + i] = y;
                }
            }
        }
        c => {
            for i in 0..plane {
                let y = (0..c).map(|ch| pixels[ch * plane + i]).sum::<f64>() / c as f64;
                for ch in 0..c {
                    pixels[ch * plane + i] = y;
                }
            }
        }
    }
}

/// One augmented view.
pub fn augment_view(example: &Example<'_>, cfg: &AugmentConfig, key: ViewKey) -> Vec<f64> {
    let mut rng = key.stream();
    let shape = example.shape;
    let pixels = example.pixels.as_slice().expect("contiguous example");
    let window = sample_crop(&mut rng, shape.height, shape.width, cfg.crop_scale);
    let mut view = resized_crop(pixels, shape, window, cfg.output_size);
    let out_shape = cfg.output_shape(shape.channels);
    if rng.random_bool(cfg.flip_prob) {
        hflip(&mut view, out_shape);
    }
    if cfg.jitter_strength > 0.0 {
        jitter(&mut rng, &mut view, out_shape, cfg.jitter_strength);
    }
    if rng.random_bool(cfg.grayscale_prob) {
        grayscale(&mut view, out_shape);
    }
    view
}

/// The positive pair for one example: view ids 0 and 1 under `(seed, epoch)`.
pub fn make_views(example: &Example<'_>, cfg: &AugmentConfig, seed: u64, epoch: u64) -> ViewPair {
    let key = |view_id| ViewKey {
        seed,
        epoch,
        example_index: example.index as u64,
        view_id,
    };
    ViewPair {
        view_a: augment_view(example, cfg, key(0)),
        view_b: augment_view(example, cfg, key(1)),
        shape: cfg.output_shape(example.shape.channels),
        example_index: example.index,
    }
}
