//! Datasets: in-memory representation, IDX / CIFAR-binary ingestion, the
//! planted-hard synthetic generator and per-channel normalization.

pub mod cifar;
pub mod idx;
pub mod synthetic;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{make_synthetic, SyntheticSpec, SyntheticTruth, TextureLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// One image, borrowed from its dataset.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub index: usize,
    /// Channel-major pixels (`[C][H][W]`).
    pub pixels: ArrayView1<'a, f64>,
    pub shape: ImageShape,
    pub label: Option<usize>,
}

/// A set of equally shaped images stored one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub shape: ImageShape,
    pub images: Array2<f64>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        shape: ImageShape,
        images: Array2<f64>,
        labels: Option<Vec<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.ncols() != shape.len() {
            return Err(Error::Data(format!(
                "image rows have {} values, shape {:?} needs {}",
                images.ncols(),
                shape,
                shape.len()
            )));
        }
        if let Some(labels) = &labels {
            if labels.len() != images.nrows() {
                return Err(Error::Data(format!(
                    "{} labels for {} images",
                    labels.len(),
                    images.nrows()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Data(format!("label {bad} outside [0, {num_classes})")));
            }
        }
        Ok(Self {
            name: name.into(),
            split,
            shape,
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example(&self, index: usize) -> Example<'_> {
        Example {
            index,
            pixels: self.images.row(index),
            shape: self.shape,
            label: self.labels.as_ref().map(|l| l[index]),
        }
    }

    pub fn label(&self, index: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[index])
    }

    /// Keep only the first `limit` examples.
    pub fn truncate(mut self, limit: usize) -> Self {
        if limit < self.len() {
            self.images = self.images.slice(ndarray::s![..limit, ..]).to_owned();
            if let Some(labels) = &mut self.labels {
                labels.truncate(limit);
            }
        }
        self
    }

    /// Stack several datasets of identical shape.
    pub fn concat(name: impl Into<String>, split: Split, parts: Vec<Dataset>) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Data("no datasets to concatenate".into()));
        };
        let shape = first.shape;
        let num_classes = parts.iter().map(|p| p.num_classes).max().unwrap_or(0);
        let labelled = parts.iter().all(|p| p.labels.is_some());
        if parts.iter().any(|p| p.shape != shape) {
            return Err(Error::Data("cannot concatenate datasets of different shapes".into()));
        }
        let views: Vec<_> = parts.iter().map(|p| p.images.view()).collect();
        let images = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Data(e.to_string()))?;
        let labels = labelled.then(|| parts.iter().flat_map(|p| p.labels.clone().unwrap_or_default()).collect());
        Dataset::new(name, split, shape, images, labels, num_classes)
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics over every pixel of every image.
    pub fn compute(dataset: &Dataset) -> Self {
        let c = dataset.shape.channels;
        let plane = dataset.shape.plane();
        let count = (dataset.len() * plane) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for row in dataset.images.rows() {
            for ch in 0..c {
                mean[ch] += row.iter().skip(ch * plane).take(plane).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for row in dataset.images.rows() {
            for ch in 0..c {
                var[ch] += row
                    .iter()
                    .skip(ch * plane)
                    .take(plane)
                    .map(|v| (v - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt()).collect();
        Self { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::config(format!(
                "statistics for {} channels, data has {channels}",
                self.mean.len()
            )));
        }
        if let Some(ch) = self.std.iter().position(|&s| !(s > 0.0)) {
            return Err(Error::config(format!("channel {ch} has zero standard deviation")));
        }
        Ok(())
    }

    /// Normalize one channel-major image in place.
    pub fn apply(&self, pixels: &mut [f64]) {
        let plane = pixels.len() / self.mean.len();
        for (ch, chunk) in pixels.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

/// `x <- (x - mean) / std` channel-wise. Statistics should come from the
/// training split and be reused for the test split.
pub fn normalize(dataset: &Dataset, stats: &ChannelStats) -> Result<Dataset> {
    stats.validate(dataset.shape.channels)?;
    let mut out = dataset.clone();
    for mut row in out.images.rows_mut() {
        stats.apply(row.as_slice_mut().expect("standard layout rows"));
    }
    Ok(out)
}
