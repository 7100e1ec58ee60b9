//! Synthetic tensor fields with exact ground truth, and DWI synthesis with
//! Rician noise.
//!
//! A phantom slice is an elliptical "brain" mask filled with isotropic tissue,
//! one isotropic disc (FA≈0), concentric fibre rings whose principal direction
//! follows the ring tangent, and straight bundles with random 3-D orientation.
//! Everything is drawn from a seeded generator, so a spec maps to exactly one
//! field.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, mix64};
use crate::scheme::GradientScheme;
use crate::tensor::{signal_forward, DiffusionTensor6, UnitDirection};

pub const MIN_DIM: usize = 32;
/// Upper bound for any ground-truth eigenvalue, mm²/s.
pub const MAX_EIGENVALUE: f64 = 4e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Isotropic tissue only.
    Isotropic,
    Rings,
    Bundles,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub nx: usize,
    pub ny: usize,
    #[serde(default = "one")]
    pub slices: usize,
    pub layout: Layout,
    /// Axial diffusivity range for fibre regions.
    #[serde(default = "default_parallel")]
    pub lambda_parallel: (f64, f64),
    /// Radial diffusivity range for fibre regions.
    #[serde(default = "default_perpendicular")]
    pub lambda_perpendicular: (f64, f64),
    /// Diffusivity range for isotropic regions.
    #[serde(default = "default_isotropic")]
    pub isotropic: (f64, f64),
    pub seed: u64,
}

fn one() -> usize {
    1
}
fn default_parallel() -> (f64, f64) {
    (1.2e-3, 2.0e-3)
}
fn default_perpendicular() -> (f64, f64) {
    (0.2e-3, 0.6e-3)
}
fn default_isotropic() -> (f64, f64) {
    (0.7e-3, 3.0e-3)
}

impl PhantomSpec {
    pub fn new(nx: usize, ny: usize, layout: Layout, seed: u64) -> Self {
        Self {
            nx,
            ny,
            slices: 1,
            layout,
            lambda_parallel: default_parallel(),
            lambda_perpendicular: default_perpendicular(),
            isotropic: default_isotropic(),
            seed,
        }
    }

    pub fn with_slices(mut self, slices: usize) -> Self {
        self.slices = slices;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.nx < MIN_DIM || self.ny < MIN_DIM {
            return Err(Error::DimsTooSmall { nx: self.nx, ny: self.ny });
        }
        if self.slices == 0 {
            return Err(Error::BadPhantomSpec("slices must be at least 1".into()));
        }
        let within = |r: (f64, f64), lo: f64, hi: f64| r.0 <= r.1 && r.0 >= lo && r.1 <= hi;
        if !within(self.lambda_parallel, 1.0e-3, 2.2e-3) {
            return Err(Error::BadPhantomSpec("lambda_parallel must lie in [1.0e-3, 2.2e-3]".into()));
        }
        if !within(self.lambda_perpendicular, 0.1e-3, 0.8e-3) {
            return Err(Error::BadPhantomSpec("lambda_perpendicular must lie in [0.1e-3, 0.8e-3]".into()));
        }
        if !within(self.isotropic, 0.7e-3, 3.2e-3) {
            return Err(Error::BadPhantomSpec("isotropic must lie in [0.7e-3, 3.2e-3]".into()));
        }
        Ok(())
    }
}

/// Tensor field over `nz` slices of `ny` rows by `nx` columns; voxel
/// `(x, y, z)` lives at `(z * ny + y) * nx + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub tensors: Vec<DiffusionTensor6>,
    pub mask: Vec<bool>,
}

impl TensorField {
    pub fn zeros(nx: usize, ny: usize, nz: usize) -> Self {
        let n = nx * ny * nz;
        Self { nx, ny, nz, tensors: vec![DiffusionTensor6::ZERO; n], mask: vec![false; n] }
    }

    pub fn voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn slice(&self, z: usize) -> TensorField {
        let r = z * self.slice_len()..(z + 1) * self.slice_len();
        TensorField {
            nx: self.nx,
            ny: self.ny,
            nz: 1,
            tensors: self.tensors[r.clone()].to_vec(),
            mask: self.mask[r].to_vec(),
        }
    }

    /// Concatenates slices with equal in-plane dims.
    pub fn stack(slices: &[TensorField]) -> Result<TensorField> {
        let first = slices.first().ok_or(Error::EmptyDataset)?;
        let mut out = TensorField { nx: first.nx, ny: first.ny, nz: 0, tensors: vec![], mask: vec![] };
        for s in slices {
            if (s.nx, s.ny) != (first.nx, first.ny) {
                return Err(Error::ShapeMismatch(format!("slice {}x{} vs {}x{}", s.nx, s.ny, first.nx, first.ny)));
            }
            out.nz += s.nz;
            out.tensors.extend_from_slice(&s.tensors);
            out.mask.extend_from_slice(&s.mask);
        }
        Ok(out)
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// A fibre ring: tensors in the annulus `inner ≤ r ≤ outer` point along the
/// tangent of the circle around `center`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ring {
    pub center: (f64, f64),
    pub inner: f64,
    pub outer: f64,
    pub lambda_parallel: f64,
    pub lambda_perpendicular: f64,
}

/// A straight band of constant tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bundle {
    /// A point on the band centre line and its in-plane unit direction.
    pub anchor: (f64, f64),
    pub along: (f64, f64),
    pub half_width: f64,
    pub orientation: UnitDirection,
    pub lambda_parallel: f64,
    pub lambda_perpendicular: f64,
}

/// Region layout of one slice, in paint order.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGeometry {
    pub mask_center: (f64, f64),
    pub mask_radii: (f64, f64),
    pub tissue: f64,
    pub iso_disc: Option<((f64, f64), f64, f64)>,
    pub rings: Vec<Ring>,
    pub bundles: Vec<Bundle>,
}

fn uniform(r: &mut rng::Rng, range: (f64, f64)) -> f64 {
    if range.0 == range.1 {
        range.0
    } else {
        r.random_range(range.0..=range.1)
    }
}

/// Geometry of slice `z` of `spec`.
pub fn slice_geometry(spec: &PhantomSpec, z: usize) -> Result<SliceGeometry> {
    spec.validate()?;
    let mut r = rng::stream(spec.seed, mix64(0x9a4e ^ z as u64));
    let (w, h) = (spec.nx as f64, spec.ny as f64);
    let s = w.min(h);
    let mask_center = (w / 2.0 + r.random_range(-0.03..=0.03) * w, h / 2.0 + r.random_range(-0.03..=0.03) * h);
    let mask_radii = (w * r.random_range(0.40..=0.47), h * r.random_range(0.40..=0.47));

    // grey-matter-like background: the low end of the isotropic range
    let iso_lo = spec.isotropic.0;
    let tissue = uniform(&mut r, (iso_lo, (iso_lo + 0.3e-3).min(spec.isotropic.1)));

    let mut geom = SliceGeometry { mask_center, mask_radii, tissue, iso_disc: None, rings: vec![], bundles: vec![] };

    let point_in_mask = |r: &mut rng::Rng, frac: f64| {
        let t = r.random_range(0.0..std::f64::consts::TAU);
        let rad = frac * r.random_range(0.0f64..=1.0).sqrt();
        (mask_center.0 + rad * mask_radii.0 * t.cos(), mask_center.1 + rad * mask_radii.1 * t.sin())
    };

    let want_iso = matches!(spec.layout, Layout::Mixed);
    let want_rings = matches!(spec.layout, Layout::Rings | Layout::Mixed);
    let want_bundles = matches!(spec.layout, Layout::Bundles | Layout::Mixed);

    if want_iso {
        let c = point_in_mask(&mut r, 0.5);
        let rad = s * r.random_range(0.06..=0.12);
        let d = uniform(&mut r, ((spec.isotropic.1 - 0.6e-3).max(iso_lo), spec.isotropic.1));
        geom.iso_disc = Some((c, rad, d));
    }
    if want_rings {
        let count = if spec.layout == Layout::Rings { r.random_range(1..=2) } else { 1 };
        for _ in 0..count {
            let c = point_in_mask(&mut r, 0.35);
            let outer = s * r.random_range(0.16..=0.26);
            let inner = outer * r.random_range(0.45..=0.65);
            geom.rings.push(Ring {
                center: c,
                inner,
                outer,
                lambda_parallel: uniform(&mut r, spec.lambda_parallel),
                lambda_perpendicular: uniform(&mut r, spec.lambda_perpendicular),
            });
        }
    }
    if want_bundles {
        let count = r.random_range(2..=3);
        for _ in 0..count {
            let anchor = point_in_mask(&mut r, 0.6);
            let t = r.random_range(0.0..std::f64::consts::PI);
            let o = crate::scheme::random_directions(1, &mut r)[0];
            geom.bundles.push(Bundle {
                anchor,
                along: (t.cos(), t.sin()),
                half_width: s * r.random_range(0.03..=0.06),
                orientation: o,
                lambda_parallel: uniform(&mut r, spec.lambda_parallel),
                lambda_perpendicular: uniform(&mut r, spec.lambda_perpendicular),
            });
        }
    }
    Ok(geom)
}

fn cylinder(axis: [f64; 3], par: f64, perp: f64) -> DiffusionTensor6 {
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let id = if i == j { 1.0 } else { 0.0 };
            *v = perp * id + (par - perp) * axis[i] * axis[j];
        }
    }
    DiffusionTensor6::from_matrix(&m)
}

impl SliceGeometry {
    /// Tensor at the centre of voxel `(x, y)`, or `None` outside the mask.
    pub fn tensor_at(&self, x: usize, y: usize) -> Option<DiffusionTensor6> {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let (ex, ey) = ((px - self.mask_center.0) / self.mask_radii.0, (py - self.mask_center.1) / self.mask_radii.1);
        if ex * ex + ey * ey > 1.0 {
            return None;
        }
        let mut t = DiffusionTensor6::diag(self.tissue, self.tissue, self.tissue);
        if let Some((c, rad, d)) = self.iso_disc {
            if (px - c.0).hypot(py - c.1) <= rad {
                t = DiffusionTensor6::diag(d, d, d);
            }
        }
        for ring in &self.rings {
            let (dx, dy) = (px - ring.center.0, py - ring.center.1);
            let rr = dx.hypot(dy);
            if rr >= ring.inner && rr <= ring.outer {
                let tangent = [-dy / rr, dx / rr, 0.0];
                t = cylinder(tangent, ring.lambda_parallel, ring.lambda_perpendicular);
            }
        }
        for b in &self.bundles {
            let (dx, dy) = (px - b.anchor.0, py - b.anchor.1);
            let dist = (dx * b.along.1 - dy * b.along.0).abs();
            if dist <= b.half_width {
                t = cylinder(b.orientation.to_array(), b.lambda_parallel, b.lambda_perpendicular);
            }
        }
        Some(t)
    }
}

pub fn make_tensor_field(spec: &PhantomSpec) -> Result<TensorField> {
    spec.validate()?;
    let mut tf = TensorField::zeros(spec.nx, spec.ny, spec.slices);
    for z in 0..spec.slices {
        let geom = slice_geometry(spec, z)?;
        for y in 0..spec.ny {
            for x in 0..spec.nx {
                let i = (z * spec.ny + y) * spec.nx + x;
                if let Some(t) = geom.tensor_at(x, y) {
                    tf.tensors[i] = t;
                    tf.mask[i] = true;
                }
            }
        }
    }
    Ok(tf)
}

/// Diffusion-weighted acquisition over a tensor field's grid. Planes are
/// indexed like [`TensorField`] voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiVolume {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// One plane per b=0 repeat.
    pub b0: Vec<Vec<f64>>,
    /// One plane per scheme direction, in scheme order.
    pub dwi: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    pub scheme: GradientScheme,
    pub s0: f64,
    pub sigma: f64,
}

impl DwiVolume {
    pub fn voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    /// Average of the b=0 repeats.
    pub fn mean_b0(&self) -> Vec<f64> {
        let n = self.b0.len() as f64;
        (0..self.voxels()).map(|i| self.b0.iter().map(|p| p[i]).sum::<f64>() / n).collect()
    }

    /// `s0 / σ`; infinite for noiseless data.
    pub fn snr(&self) -> f64 {
        if self.sigma == 0.0 {
            f64::INFINITY
        } else {
            self.s0 / self.sigma
        }
    }

    /// Keeps only the directions at `indices` (in that order).
    pub fn select(&self, indices: &[usize]) -> Result<DwiVolume> {
        let scheme = self.scheme.subset(indices)?;
        Ok(DwiVolume {
            dwi: indices.iter().map(|&i| self.dwi[i].clone()).collect(),
            scheme,
            ..self.clone_without_planes()
        })
    }

    pub fn slice(&self, z: usize) -> DwiVolume {
        let r = z * self.slice_len()..(z + 1) * self.slice_len();
        DwiVolume {
            nz: 1,
            b0: self.b0.iter().map(|p| p[r.clone()].to_vec()).collect(),
            dwi: self.dwi.iter().map(|p| p[r.clone()].to_vec()).collect(),
            mask: self.mask[r.clone()].to_vec(),
            ..self.clone_without_planes()
        }
    }

    fn clone_without_planes(&self) -> DwiVolume {
        DwiVolume {
            nx: self.nx,
            ny: self.ny,
            nz: self.nz,
            b0: self.b0.clone(),
            dwi: vec![],
            mask: self.mask.clone(),
            scheme: self.scheme.clone(),
            s0: self.s0,
            sigma: self.sigma,
        }
    }
}

/// Rician magnitude `√((x + σn₁)² + (σn₂)²)` for the noise pair keyed by
/// `(seed, plane, voxel)`.
pub fn rician(x: f64, sigma: f64, seed: u64, plane: u64, voxel: u64) -> f64 {
    if sigma == 0.0 {
        return x;
    }
    let (n1, n2) = rng::normal_pair(seed, plane, voxel);
    ((x + sigma * n1).powi(2) + (sigma * n2).powi(2)).sqrt()
}

/// Signals for every plane of `scheme`. Background voxels carry zero proton
/// density, so with noise they are pure Rayleigh. Noise is keyed per
/// `(plane, voxel)`: b=0 repeats are planes `0..n_b0`, direction `i` is plane
/// `n_b0 + i`.
pub fn synthesize_dwi(tf: &TensorField, scheme: &GradientScheme, s0: f64, sigma: f64, seed: u64) -> Result<DwiVolume> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::BadPhantomSpec(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if !(s0 >= 0.0) {
        return Err(Error::BadPhantomSpec(format!("s0 must be >= 0, got {s0}")));
    }
    let n = tf.voxels();
    let n_b0 = scheme.n_b0();
    let b0 = (0..n_b0)
        .map(|p| {
            (0..n)
                .map(|v| {
                    let x = if tf.mask[v] { s0 } else { 0.0 };
                    rician(x, sigma, seed, p as u64, v as u64)
                })
                .collect()
        })
        .collect();
    let dwi = scheme
        .directions()
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let plane = (n_b0 + i) as u64;
            (0..n)
                .map(|v| {
                    let x = if tf.mask[v] { signal_forward(&tf.tensors[v], g, scheme.b(), s0) } else { 0.0 };
                    rician(x, sigma, seed, plane, v as u64)
                })
                .collect()
        })
        .collect();
    Ok(DwiVolume { nx: tf.nx, ny: tf.ny, nz: tf.nz, b0, dwi, mask: tf.mask.clone(), scheme: scheme.clone(), s0, sigma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::generate_uniform;
    use crate::tensor::{derive_maps, eig_sym3, BValue};

    fn scheme(n: usize) -> GradientScheme {
        GradientScheme::new(BValue::new(1000.0).unwrap(), generate_uniform(n, 2).unwrap(), 1).unwrap()
    }

    #[test]
    fn dims_too_small() {
        let spec = PhantomSpec::new(31, 64, Layout::Mixed, 0);
        assert!(matches!(make_tensor_field(&spec), Err(Error::DimsTooSmall { .. })));
    }

    #[test]
    fn isotropic_layout_has_low_fa() {
        let tf = make_tensor_field(&PhantomSpec::new(48, 40, Layout::Isotropic, 3)).unwrap();
        assert!(tf.masked_count() > 0);
        for (t, m) in tf.tensors.iter().zip(&tf.mask) {
            if *m {
                assert!(derive_maps(&eig_sym3(t)).fa < 0.05);
            }
        }
    }

    #[test]
    fn ground_truth_is_psd_and_bounded_and_background_zero() {
        let tf = make_tensor_field(&PhantomSpec::new(64, 64, Layout::Mixed, 9).with_slices(3)).unwrap();
        for (t, m) in tf.tensors.iter().zip(&tf.mask) {
            if *m {
                let e = eig_sym3(t);
                assert!(e.values[2] >= -1e-18 && e.values[0] <= MAX_EIGENVALUE);
            } else {
                assert_eq!(*t, DiffusionTensor6::ZERO);
            }
        }
    }

    #[test]
    fn ring_direction_rotates_with_angle() {
        let spec = PhantomSpec::new(64, 64, Layout::Rings, 4);
        let geom = slice_geometry(&spec, 0).unwrap();
        let ring = geom.rings[0];
        let mid = 0.5 * (ring.inner + ring.outer);
        // voxel on the +x side and voxel a quarter turn later (+y side)
        let at = |theta: f64| {
            let x = (ring.center.0 + mid * theta.cos()).floor() as usize;
            let y = (ring.center.1 + mid * theta.sin()).floor() as usize;
            eig_sym3(&geom.tensor_at(x, y).unwrap()).principal()
        };
        let a = at(0.0);
        let b = at(std::f64::consts::FRAC_PI_2);
        let angle = a.dot(&b).abs().acos().to_degrees();
        assert!((angle - 90.0).abs() < 3.0, "angle {angle}");
    }

    #[test]
    fn deterministic_fields() {
        let spec = PhantomSpec::new(40, 40, Layout::Mixed, 77).with_slices(2);
        assert_eq!(make_tensor_field(&spec).unwrap(), make_tensor_field(&spec).unwrap());
    }

    #[test]
    fn noiseless_b0_is_s0() {
        let tf = make_tensor_field(&PhantomSpec::new(32, 32, Layout::Mixed, 1)).unwrap();
        let v = synthesize_dwi(&tf, &scheme(6), 1000.0, 0.0, 5).unwrap();
        for (s, m) in v.b0[0].iter().zip(&tf.mask) {
            assert_eq!(*s, if *m { 1000.0 } else { 0.0 });
        }
        assert_eq!(v.dwi.len(), 6);
        assert!(v.snr().is_infinite());
    }

    #[test]
    fn snr_scales_with_sigma() {
        let tf = make_tensor_field(&PhantomSpec::new(32, 32, Layout::Mixed, 1)).unwrap();
        let a = synthesize_dwi(&tf, &scheme(6), 1000.0, 50.0, 5).unwrap();
        let b = synthesize_dwi(&tf, &scheme(6), 1000.0, 100.0, 5).unwrap();
        assert_eq!(a.snr(), 20.0);
        assert_eq!(b.snr(), a.snr() / 2.0);
    }

    #[test]
    fn rayleigh_mean_at_zero_signal() {
        let sigma = 3.0;
        let n = 1_000_000u64;
        let mean = (0..n).map(|i| rician(0.0, sigma, 12, 0, i)).sum::<f64>() / n as f64;
        let expect = sigma * (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean / expect - 1.0).abs() < 0.01, "mean {mean} expect {expect}");
    }

    #[test]
    fn noise_independent_across_voxels_and_planes() {
        let n = 100_000u64;
        let corr = |f: &dyn Fn(u64) -> (f64, f64)| {
            let pairs: Vec<(f64, f64)> = (0..n).map(f).collect();
            let (ma, mb) = pairs.iter().fold((0.0, 0.0), |s, p| (s.0 + p.0, s.1 + p.1));
            let (ma, mb) = (ma / n as f64, mb / n as f64);
            let (mut c, mut va, mut vb) = (0.0, 0.0, 0.0);
            for (a, b) in &pairs {
                c += (a - ma) * (b - mb);
                va += (a - ma).powi(2);
                vb += (b - mb).powi(2);
            }
            c / (va * vb).sqrt()
        };
        let across_planes = corr(&|i| (rician(100.0, 10.0, 3, 0, i), rician(100.0, 10.0, 3, 1, i)));
        let across_voxels = corr(&|i| (rician(100.0, 10.0, 3, 0, 2 * i), rician(100.0, 10.0, 3, 0, 2 * i + 1)));
        assert!(across_planes.abs() < 0.01, "{across_planes}");
        assert!(across_voxels.abs() < 0.01, "{across_voxels}");
    }

    #[test]
    fn select_and_slice() {
        let tf = make_tensor_field(&PhantomSpec::new(32, 32, Layout::Mixed, 1).with_slices(2)).unwrap();
        let v = synthesize_dwi(&tf, &scheme(10), 1000.0, 0.0, 5).unwrap();
        let s = v.select(&[3, 1, 7, 0, 2, 9]).unwrap();
        assert_eq!(s.dwi[0], v.dwi[3]);
        assert_eq!(s.scheme.directions()[2], v.scheme.directions()[7]);
        let z1 = v.slice(1);
        assert_eq!(z1.nz, 1);
        assert_eq!(z1.dwi[4][..], v.dwi[4][1024..2048]);
    }
}
