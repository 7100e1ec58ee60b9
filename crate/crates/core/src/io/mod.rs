//! On-disk formats: volume container, FSL gradient tables, checkpoints,
//! map rendering and CSV reports. All writers are byte-deterministic and
//! little-endian.

mod checkpoint;
mod container;
mod gradients;
mod render;
mod report;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, read_param_file, save_checkpoint, write_param_file,
    ParamFile, CHECKPOINT_MAGIC,
};
pub use container::{
    decode_container, encode_container, read_container, write_container, Container, PlaneGroup, PlaneRole, VOLUME_MAGIC,
};
pub use gradients::{format_bvals, format_bvecs, parse_gradient_table, read_gradient_table, write_gradient_table};
pub use render::{render_dec, render_gray, write_bytes};
pub use report::{metrics_csv, training_csv, MetricRow, METRICS_HEADER, TRAINING_HEADER};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(Error::at(path))
}

/// JSON text with object keys in lexicographic order.
pub(crate) fn sorted_json<T: serde::Serialize>(v: &T) -> Result<String> {
    // serde_json::Value objects are BTreeMap-backed, so this sorts keys
    let value = serde_json::to_value(v).map_err(|e| Error::HeaderJsonInvalid(e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| Error::HeaderJsonInvalid(e.to_string()))
}

/// Splits `magic | u32le length | json | payload`.
pub(crate) fn split_framed<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a str, &'a [u8])> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(Error::PayloadTruncated { expected: 12, found: bytes.len() });
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let end = 12 + len;
    if bytes.len() < end {
        return Err(Error::PayloadTruncated { expected: end, found: bytes.len() });
    }
    let header = std::str::from_utf8(&bytes[12..end]).map_err(|e| Error::HeaderJsonInvalid(e.to_string()))?;
    Ok((header, &bytes[end..]))
}

pub(crate) fn frame(magic: &[u8; 8], header: &str, payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + header.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
}
