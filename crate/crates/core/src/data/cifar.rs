//! CIFAR binary batches: records of one label byte followed by 3x32x32
//! channel-major pixel bytes.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::idx::to_byte;
use super::{Dataset, ImageShape, Split};
use crate::error::{Error, Result};

pub const PIXELS: usize = 3 * 32 * 32;
pub const RECORD: usize = PIXELS + 1;
pub const NUM_CLASSES: usize = 10;

pub fn decode(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.len() % RECORD != 0 {
        return Err(Error::format(
            "record",
            format!("file length {} is not a multiple of {RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * PIXELS);
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= NUM_CLASSES {
            return Err(Error::format("label", format!("record {i} has label {label}")));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Array2::from_shape_vec((n, PIXELS), pixels).expect("record-sized payload");
    Dataset::new("cifar", split, ImageShape::new(3, 32, 32), images, Some(labels), NUM_CLASSES)
}

/// Load and concatenate several batch files in the given order.
pub fn load_cifar_binary(paths: &[impl AsRef<Path>], split: Split) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let chunk = fs::read(p).map_err(|e| Error::io(p, e))?;
        if chunk.len() % RECORD != 0 {
            return Err(Error::format(
                "record",
                format!("{}: length {} is not a multiple of {RECORD}", p.display(), chunk.len()),
            ));
        }
        bytes.extend_from_slice(&chunk);
    }
    decode(&bytes, split)
}

pub fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.shape != ImageShape::new(3, 32, 32) {
        return Err(Error::Data(format!("CIFAR records are 3x32x32, dataset is {:?}", dataset.shape)));
    }
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("CIFAR export needs labels".into()))?;
    let mut out = Vec::with_capacity(dataset.len() * RECORD);
    for (row, &label) in dataset.images.rows().into_iter().zip(labels) {
        if label >= NUM_CLASSES {
            return Err(Error::Data(format!("label {label} outside [0, {NUM_CLASSES})")));
        }
        out.push(label as u8);
        for &v in row {
            out.push(to_byte(v)?);
        }
    }
    Ok(out)
}

pub fn write_cifar_binary(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode(dataset)?).map_err(|e| Error::io(path, e))
}
