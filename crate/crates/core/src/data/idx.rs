//! IDX (MNIST family) files: big-endian headers, one unsigned byte per pixel.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{Dataset, ImageShape, Split};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::format(field, "file ends inside the header"))
}

/// Parse an image file into `(count, rows, cols, pixel bytes)`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "images.magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format("images.magic", format!("expected 0x00000803, found {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "images.count")? as usize;
    let rows = be_u32(bytes, 8, "images.rows")? as usize;
    let cols = be_u32(bytes, 12, "images.cols")? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format("images.count", "header dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::format(
            "images.payload",
            format!("header promises {expected} pixel bytes, file has {}", payload.len()),
        ));
    }
    Ok((count, rows, cols, payload))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels.magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format("labels.magic", format!("expected 0x00000801, found {magic:#010x}")));
    }
    let count = be_u32(bytes, 4, "labels.count")? as usize;
    let payload = &bytes[8..];
    if payload.len() != count {
        return Err(Error::format(
            "labels.payload",
            format!("header promises {count} labels, file has {}", payload.len()),
        ));
    }
    Ok(payload)
}

pub fn decode(image_bytes: &[u8], label_bytes: &[u8], split: Split) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_images(image_bytes)?;
    let labels = parse_labels(label_bytes)?;
    if labels.len() != count {
        return Err(Error::format(
            "labels.count",
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    let shape = ImageShape::new(1, rows, cols);
    let images = Array2::from_shape_vec((count, rows * cols), pixels.iter().map(|&b| b as f64 / 255.0).collect())
        .map_err(|e| Error::format("images.payload", e.to_string()))?;
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new("idx", split, shape, images, Some(labels), num_classes)
}

pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let image_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let label_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    decode(&image_bytes, &label_bytes, split)
}

pub(crate) fn to_byte(v: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Data(format!("pixel {v} outside [0, 1]")));
    }
    Ok((v * 255.0).round() as u8)
}

/// Encode a single-channel labelled dataset as (image file, label file).
pub fn encode(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    if dataset.shape.channels != 1 {
        return Err(Error::Data("IDX stores single-channel images only".into()));
    }
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("IDX export needs labels".into()))?;
    let mut img = Vec::with_capacity(16 + dataset.images.len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [dataset.len(), dataset.shape.height, dataset.shape.width] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in dataset.images.iter() {
        img.push(to_byte(v)?);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        lab.push(u8::try_from(l).map_err(|_| Error::Data(format!("label {l} does not fit a byte")))?);
    }
    Ok((img, lab))
}

pub fn write_idx(dataset: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (img, lab) = encode(dataset)?;
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 1, 2, 255, 128, 64, 32, 16]);
        let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 9];
        (img, lab)
    }

    #[test]
    fn hand_built_file_loads_exact_values() {
        let (img, lab) = fixture();
        let ds = decode(&img, &lab, Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.shape, ImageShape::new(1, 2, 2));
        assert_eq!(ds.images.row(0).to_vec(), vec![0.0, 1.0 / 255.0, 2.0 / 255.0, 1.0]);
        assert_eq!(ds.images.row(1).to_vec(), vec![128.0 / 255.0, 64.0 / 255.0, 32.0 / 255.0, 16.0 / 255.0]);
        assert_eq!(ds.labels, Some(vec![3, 9]));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let (img, lab) = fixture();
        for cut in [0, 3, 10, img.len() - 1] {
            let err = decode(&img[..cut], &lab, Split::Train).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn count_mismatch_names_the_field() {
        let (img, mut lab) = fixture();
        lab[7] = 3;
        lab.push(1);
        let err = decode(&img, &lab, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "labels.count"));
    }

    #[test]
    fn bad_magic_is_reported() {
        let (mut img, lab) = fixture();
        img[3] = 1;
        let err = decode(&img, &lab, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Format { ref field, .. } if field == "images.magic"));
    }

    #[test]
    fn encode_reproduces_fixture_bytes() {
        let (img, lab) = fixture();
        let ds = decode(&img, &lab, Split::Train).unwrap();
        assert_eq!(encode(&ds).unwrap(), (img, lab));
    }
}
