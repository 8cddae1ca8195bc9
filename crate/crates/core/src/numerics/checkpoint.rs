//! Parameter checkpoint format.
//!
//! Little-endian: magic `CSEL`, version `u32`, the four encoder dims as
//! `u32`, then every parameter as `f64` in flat-address order.

use std::fs;
use std::path::Path;

use super::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSEL";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 16;

pub fn encode(dims: EncoderDims, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [dims.input_dim, dims.hidden_dim, dims.feature_dim, dims.projection_dim] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decode a checkpoint into its dims and raw value buffer.
pub fn decode(bytes: &[u8]) -> Result<(EncoderDims, Vec<f64>)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format("header", format!("{} bytes, need {HEADER_LEN}", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format("magic", format!("expected CSEL, found {:?}", &bytes[0..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let dims = EncoderDims::new(word(8) as usize, word(12) as usize, word(16) as usize, word(20) as usize);
    let payload = &bytes[HEADER_LEN..];
    if payload.len() % 8 != 0 {
        return Err(Error::format("payload", "length is not a multiple of 8"));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((dims, values))
}

pub fn save(path: &Path, params: &EncoderParams) -> Result<()> {
    fs::write(path, encode(params.dims(), params.values())).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<EncoderParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, values) = decode(&bytes)?;
    let expected = dims.stack()?.param_count();
    if values.len() != expected {
        return Err(Error::format(
            "payload",
            format!("{} values for dims {:?}, expected {expected}", values.len(), dims),
        ));
    }
    EncoderParams::from_values(dims, values)
}
