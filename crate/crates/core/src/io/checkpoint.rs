use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{f32s, frame, push_f32s, read_file, sorted_json, split_framed};
use crate::error::{Error, Result};
use crate::net::{Checkpoint, EpochLog, FlexNet, NetConfig};
use crate::nn::{Array4, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FDTI0001";

/// Generic parameter file: a JSON config, the loss history and named blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFile {
    pub config: serde_json::Value,
    pub history: Vec<EpochLog>,
    pub params: ParamStore<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    len: usize,
    name: String,
    /// Byte offset into the payload.
    offset: usize,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: serde_json::Value,
    history: Vec<EpochLog>,
    params: Vec<Entry>,
}

pub fn write_param_file(f: &ParamFile) -> Result<Vec<u8>> {
    let mut offset = 0;
    let mut params = Vec::with_capacity(f.params.len());
    for (name, a) in f.params.iter() {
        params.push(Entry { len: a.len(), name: name.to_string(), offset, shape: a.shape() });
        offset += 4 * a.len();
    }
    let manifest = Manifest { config: f.config.clone(), history: f.history.clone(), params };
    let header = sorted_json(&manifest)?;
    let mut out = frame(CHECKPOINT_MAGIC, &header, offset);
    for (_, a) in f.params.iter() {
        push_f32s(&mut out, a.data());
    }
    Ok(out)
}

pub fn read_param_file(bytes: &[u8]) -> Result<ParamFile> {
    let (header, payload) = split_framed(bytes, CHECKPOINT_MAGIC)?;
    let m: Manifest = serde_json::from_str(header).map_err(|e| Error::HeaderJsonInvalid(e.to_string()))?;
    let mut params = ParamStore::new();
    let mut end = 0;
    for e in m.params {
        let bad = |why: String| Error::ManifestShapeMismatch(format!("{}: {why}", e.name));
        if e.shape.iter().product::<usize>() != e.len {
            return Err(bad(format!("shape {:?} does not hold {} values", e.shape, e.len)));
        }
        if e.offset < end {
            return Err(bad(format!("offset {} overlaps the previous blob ending at {end}", e.offset)));
        }
        let stop = e.offset + 4 * e.len;
        if stop > payload.len() {
            return Err(bad(format!("blob {}..{stop} exceeds payload of {} bytes", e.offset, payload.len())));
        }
        end = stop;
        let a = Array4::from_vec(e.shape, f32s(&payload[e.offset..stop]))?;
        params.add(e.name.clone(), a).map_err(|_| bad("duplicate name".into()))?;
    }
    Ok(ParamFile { config: m.config, history: m.history, params })
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let config = serde_json::to_value(ck.net.config()).map_err(|e| Error::HeaderJsonInvalid(e.to_string()))?;
    write_param_file(&ParamFile { config, history: ck.history.clone(), params: ck.net.params().clone() })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let f = read_param_file(bytes)?;
    let cfg: NetConfig = serde_json::from_value(f.config).map_err(|e| Error::HeaderJsonInvalid(e.to_string()))?;
    Ok(Checkpoint { net: FlexNet::from_params(cfg, f.params)?, history: f.history })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?).map_err(Error::at(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}
