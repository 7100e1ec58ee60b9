use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{f32s, frame, push_f32s, read_file, sorted_json, split_framed};
use crate::error::{Error, Result};
use crate::phantom::{DwiVolume, TensorField};
use crate::scheme::GradientScheme;
use crate::tensor::DiffusionTensor6;

pub const VOLUME_MAGIC: &[u8; 8] = b"DWIV0001";
const DTYPE: &str = "f32le";
const ORDER: &str = "row-major, plane-major";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlaneRole {
    B0,
    Dwi,
    Mask,
    Tensor,
}

/// Consecutive planes sharing a role. Each plane covers the whole
/// `h × w × slices` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneGroup {
    pub role: PlaneRole,
    pub planes: Vec<Vec<f32>>,
}

/// Stack of 3-D planes with dims `[h, w, slices]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub dims: [usize; 3],
    pub groups: Vec<PlaneGroup>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupHeader {
    count: usize,
    role: PlaneRole,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    dtype: String,
    order: String,
    planes: Vec<GroupHeader>,
}

impl Container {
    pub fn plane_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn group(&self, role: PlaneRole) -> Option<&PlaneGroup> {
        self.groups.iter().find(|g| g.role == role)
    }

    /// b=0, DWI and mask planes of `v`, quantized to f32.
    pub fn from_volume(v: &DwiVolume) -> Self {
        let q = |p: &Vec<f64>| p.iter().map(|&x| x as f32).collect();
        Self {
            dims: [v.ny, v.nx, v.nz],
            groups: vec![
                PlaneGroup { role: PlaneRole::B0, planes: v.b0.iter().map(q).collect() },
                PlaneGroup { role: PlaneRole::Dwi, planes: v.dwi.iter().map(q).collect() },
                PlaneGroup { role: PlaneRole::Mask, planes: vec![mask_plane(&v.mask)] },
            ],
        }
    }

    /// Rebuilds a volume acquired with `scheme`. The container does not store
    /// acquisition constants, so `s0` is taken as the masked mean b=0 signal
    /// and `sigma` as 0.
    pub fn to_volume(&self, scheme: &GradientScheme) -> Result<DwiVolume> {
        let [ny, nx, nz] = self.dims;
        let planes = |role| self.group(role).map(|g| g.planes.clone()).unwrap_or_default();
        let widen = |ps: Vec<Vec<f32>>| -> Vec<Vec<f64>> {
            ps.into_iter().map(|p| p.into_iter().map(f64::from).collect()).collect()
        };
        let b0 = widen(planes(PlaneRole::B0));
        let dwi = widen(planes(PlaneRole::Dwi));
        if b0.len() != scheme.n_b0() || dwi.len() != scheme.len() {
            return Err(Error::ShapeMismatch(format!(
                "container has {} b0 / {} dwi planes, scheme has {} / {}",
                b0.len(),
                dwi.len(),
                scheme.n_b0(),
                scheme.len()
            )));
        }
        let mask = self.mask()?;
        let mut v = DwiVolume { nx, ny, nz, b0, dwi, mask, scheme: scheme.clone(), s0: 0.0, sigma: 0.0 };
        let mean = v.mean_b0();
        let (sum, n) = v.mask.iter().zip(&mean).filter(|(m, _)| **m).fold((0.0, 0), |(s, n), (_, b)| (s + b, n + 1));
        v.s0 = if n > 0 { sum / n as f64 } else { 0.0 };
        Ok(v)
    }

    /// Six tensor-element planes `(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)` plus mask.
    pub fn from_field(tf: &TensorField) -> Self {
        let planes = (0..6).map(|c| tf.tensors.iter().map(|t| t.to_array()[c] as f32).collect()).collect();
        Self {
            dims: [tf.ny, tf.nx, tf.nz],
            groups: vec![
                PlaneGroup { role: PlaneRole::Tensor, planes },
                PlaneGroup { role: PlaneRole::Mask, planes: vec![mask_plane(&tf.mask)] },
            ],
        }
    }

    pub fn to_field(&self) -> Result<TensorField> {
        let [ny, nx, nz] = self.dims;
        let g = self
            .group(PlaneRole::Tensor)
            .filter(|g| g.planes.len() == 6)
            .ok_or_else(|| Error::ShapeMismatch("container lacks six tensor planes".into()))?;
        let mut tf = TensorField::zeros(nx, ny, nz);
        for (i, t) in tf.tensors.iter_mut().enumerate() {
            let mut e = [0.0; 6];
            for (c, v) in e.iter_mut().enumerate() {
                *v = f64::from(g.planes[c][i]);
            }
            *t = DiffusionTensor6::from_array(e);
        }
        tf.mask = self.mask()?;
        Ok(tf)
    }

    fn mask(&self) -> Result<Vec<bool>> {
        match self.group(PlaneRole::Mask).and_then(|g| g.planes.first()) {
            Some(p) => Ok(p.iter().map(|&m| m != 0.0).collect()),
            None => Err(Error::ShapeMismatch("container has no mask plane".into())),
        }
    }
}

fn mask_plane(mask: &[bool]) -> Vec<f32> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

pub fn encode_container(c: &Container) -> Result<Vec<u8>> {
    let n = c.plane_len();
    for g in &c.groups {
        if let Some(p) = g.planes.iter().find(|p| p.len() != n) {
            return Err(Error::ShapeMismatch(format!("plane of {} values in a {:?} grid", p.len(), c.dims)));
        }
    }
    let header = Header {
        dims: c.dims,
        dtype: DTYPE.into(),
        order: ORDER.into(),
        planes: c.groups.iter().map(|g| GroupHeader { count: g.planes.len(), role: g.role }).collect(),
    };
    let total: usize = c.groups.iter().map(|g| g.planes.len() * n * 4).sum();
    let header = sorted_json(&header)?;
    let mut out = frame(VOLUME_MAGIC, &header, total);
    for p in c.groups.iter().flat_map(|g| &g.planes) {
        push_f32s(&mut out, p);
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<Container> {
    let (header, payload) = split_framed(bytes, VOLUME_MAGIC)?;
    let h: Header = serde_json::from_str(header).map_err(|e| Error::HeaderJsonInvalid(e.to_string()))?;
    if h.dtype != DTYPE {
        return Err(Error::HeaderJsonInvalid(format!("unsupported dtype {}", h.dtype)));
    }
    if h.order != ORDER {
        return Err(Error::HeaderJsonInvalid(format!("unsupported order {}", h.order)));
    }
    let n: usize = h.dims.iter().product();
    let expected = h.planes.iter().map(|g| g.count * n * 4).sum::<usize>();
    if payload.len() < expected {
        let head = bytes.len() - payload.len();
        return Err(Error::PayloadTruncated { expected: head + expected, found: bytes.len() });
    }
    if payload.len() > expected {
        return Err(Error::HeaderJsonInvalid(format!("{} trailing payload bytes", payload.len() - expected)));
    }
    let mut off = 0;
    let mut groups = Vec::with_capacity(h.planes.len());
    for g in &h.planes {
        let mut planes = Vec::with_capacity(g.count);
        for _ in 0..g.count {
            planes.push(f32s(&payload[off..off + 4 * n]));
            off += 4 * n;
        }
        groups.push(PlaneGroup { role: g.role, planes });
    }
    Ok(Container { dims: h.dims, groups })
}

pub fn write_container(path: &Path, c: &Container) -> Result<()> {
    std::fs::write(path, encode_container(c)?).map_err(Error::at(path))
}

pub fn read_container(path: &Path) -> Result<Container> {
    decode_container(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Container {
        Container {
            dims: [1, 1, 1],
            groups: vec![
                PlaneGroup { role: PlaneRole::B0, planes: vec![vec![1.5]] },
                PlaneGroup { role: PlaneRole::Mask, planes: vec![vec![1.0]] },
            ],
        }
    }

    #[test]
    fn one_voxel_round_trip_and_header_layout() {
        let bytes = encode_container(&tiny()).unwrap();
        assert_eq!(&bytes[..8], b"DWIV0001");
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        assert_eq!(
            header,
            r#"{"dims":[1,1,1],"dtype":"f32le","order":"row-major, plane-major","planes":[{"count":1,"role":"b0"},{"count":1,"role":"mask"}]}"#
        );
        assert_eq!(&bytes[12 + len..], &[0, 0, 0xc0, 0x3f, 0, 0, 0x80, 0x3f]);
        assert_eq!(decode_container(&bytes).unwrap(), tiny());
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = encode_container(&tiny()).unwrap();
        assert!(matches!(decode_container(&bytes[..bytes.len() - 1]), Err(Error::PayloadTruncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_container(&bad), Err(Error::BadMagic)));
        let mut bad = bytes.clone();
        bad[13] = b'!';
        assert!(matches!(decode_container(&bad), Err(Error::HeaderJsonInvalid(_))));
    }
}
