//! Rank-2 diffusion tensor algebra.
//!
//! Signal model `S = S0 exp(-b gᵀ D g)`, its log-linear design rows, a
//! closed-form symmetric 3×3 eigensolver and the scalar maps derived from the
//! eigenvalues. Diffusivities are in mm²/s throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const UNIT_TOL: f64 = 1e-9;

/// A unit gradient direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitDirection {
    x: f64,
    y: f64,
    z: f64,
}

impl UnitDirection {
    pub const X: UnitDirection = UnitDirection { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: UnitDirection = UnitDirection { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: UnitDirection = UnitDirection { x: 0.0, y: 0.0, z: 1.0 };

    /// Accepts components whose norm is within 1e-9 of one.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::NonUnitDirection { x, y, z, norm });
        }
        Ok(Self { x, y, z })
    }

    /// Scales an arbitrary non-zero vector onto the sphere.
    pub fn normalize(x: f64, y: f64, z: f64) -> Result<Self> {
        let norm = (x * x + y * y + z * z).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::NonUnitDirection { x, y, z, norm });
        }
        Ok(Self { x: x / norm, y: y / norm, z: z / norm })
    }

    pub(crate) fn from_unit_unchecked(v: [f64; 3]) -> Self {
        Self { x: v[0], y: v[1], z: v[2] }
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(&self, other: &UnitDirection) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn flipped(self) -> Self {
        Self { x: -self.x, y: -self.y, z: -self.z }
    }

    /// Angle between the two lines through the origin, in radians (∈ [0, π/2]).
    pub fn line_angle(&self, other: &UnitDirection) -> f64 {
        self.dot(other).abs().min(1.0).acos()
    }
}

/// Diffusion weighting in s/mm².
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct BValue(f64);

impl BValue {
    pub fn new(b: f64) -> Result<Self> {
        if !b.is_finite() || b < 0.0 {
            return Err(Error::NegativeB(b));
        }
        Ok(Self(b))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for BValue {
    type Error = Error;

    fn try_from(b: f64) -> Result<Self> {
        BValue::new(b)
    }
}

impl From<BValue> for f64 {
    fn from(b: BValue) -> f64 {
        b.0
    }
}

/// The six unique elements of a symmetric 3×3 tensor, ordered
/// `(Dxx, Dyy, Dzz, Dxy, Dxz, Dyz)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTensor6 {
    pub dxx: f64,
    pub dyy: f64,
    pub dzz: f64,
    pub dxy: f64,
    pub dxz: f64,
    pub dyz: f64,
}

impl DiffusionTensor6 {
    pub const ZERO: DiffusionTensor6 = DiffusionTensor6 { dxx: 0.0, dyy: 0.0, dzz: 0.0, dxy: 0.0, dxz: 0.0, dyz: 0.0 };

    pub fn from_array(v: [f64; 6]) -> Self {
        Self { dxx: v[0], dyy: v[1], dzz: v[2], dxy: v[3], dxz: v[4], dyz: v[5] }
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.dxx, self.dyy, self.dzz, self.dxy, self.dxz, self.dyz]
    }

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        Self { dxx: a, dyy: b, dzz: c, ..Self::ZERO }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [[self.dxx, self.dxy, self.dxz], [self.dxy, self.dyy, self.dyz], [self.dxz, self.dyz, self.dzz]]
    }

    /// Symmetrizes `m` by averaging the off-diagonal pairs.
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Self {
        Self {
            dxx: m[0][0],
            dyy: m[1][1],
            dzz: m[2][2],
            dxy: 0.5 * (m[0][1] + m[1][0]),
            dxz: 0.5 * (m[0][2] + m[2][0]),
            dyz: 0.5 * (m[1][2] + m[2][1]),
        }
    }

    /// Builds `Σ λ_i v_i v_iᵀ`.
    pub fn from_eigen(values: [f64; 3], vectors: [[f64; 3]; 3]) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (l, v) in values.iter().zip(vectors.iter()) {
            for r in 0..3 {
                for c in 0..3 {
                    m[r][c] += l * v[r] * v[c];
                }
            }
        }
        Self::from_matrix(&m)
    }

    /// `gᵀ D g`.
    pub fn quadratic_form(&self, g: &UnitDirection) -> f64 {
        let (x, y, z) = (g.x, g.y, g.z);
        self.dxx * x * x
            + self.dyy * y * y
            + self.dzz * z * z
            + 2.0 * (self.dxy * x * y + self.dxz * x * z + self.dyz * y * z)
    }

    pub fn trace(&self) -> f64 {
        self.dxx + self.dyy + self.dzz
    }

    /// `R D Rᵀ`.
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Self {
        let d = self.matrix();
        let mut rd = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rd[i][j] = (0..3).map(|k| r[i][k] * d[k][j]).sum();
            }
        }
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| rd[i][k] * r[j][k]).sum();
            }
        }
        Self::from_matrix(&out)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::from_array(self.to_array().map(|v| v * s))
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Row `α = (gx², gy², gz², 2gxgy, 2gxgz, 2gygz)` of the log-linear design matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DesignRow(pub [f64; 6]);

impl DesignRow {
    pub fn dot(&self, d: &DiffusionTensor6) -> f64 {
        self.0.iter().zip(d.to_array()).map(|(a, b)| a * b).sum()
    }
}

/// Eigenvalues sorted descending with matching unit eigenvectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenSystem {
    pub values: [f64; 3],
    pub vectors: [UnitDirection; 3],
}

impl EigenSystem {
    pub fn principal(&self) -> UnitDirection {
        self.vectors[0]
    }

    pub fn reconstruct(&self) -> DiffusionTensor6 {
        DiffusionTensor6::from_eigen(self.values, self.vectors.map(|v| v.to_array()))
    }
}

/// Scalar maps for one voxel.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DtiScalars {
    pub fa: f64,
    pub md: f64,
    pub ad: f64,
    pub rd: f64,
}

/// `s0 · exp(-b gᵀ D g)`.
pub fn signal_forward(d: &DiffusionTensor6, g: &UnitDirection, b: BValue, s0: f64) -> f64 {
    s0 * (-b.0 * d.quadratic_form(g)).exp()
}

pub fn design_row(g: &UnitDirection) -> DesignRow {
    let (x, y, z) = (g.x, g.y, g.z);
    DesignRow([x * x, y * y, z * z, 2.0 * x * y, 2.0 * x * z, 2.0 * y * z])
}

/// Apparent diffusion coefficient `ln(s0 / si) / b`.
pub fn log_signal_ratio(s0: f64, si: f64, b: BValue) -> Result<f64> {
    if !(s0 > 0.0 && si > 0.0) {
        return Err(Error::NonPositiveSignal { s0, si });
    }
    if b.0 == 0.0 {
        return Err(Error::ZeroB);
    }
    Ok((s0 / si).ln() / b.0)
}

/// Normalized spread below which the characteristic-polynomial route hands
/// over to Jacobi rotations.
const DEGENERATE_SPREAD: f64 = 1e-12;

/// Eigendecomposition of a symmetric 3×3 tensor.
///
/// The most isolated eigenvalue comes from the trigonometric solution of the
/// characteristic cubic and its eigenvector from the best-conditioned cross
/// product of two rows of `D - λI`. The remaining pair is resolved exactly as a
/// 2×2 problem on the orthogonal complement, so clustered eigenvalues never
/// rely on an ill-conditioned null-space estimate. Nearly isotropic inputs fall
/// back to cyclic Jacobi.
///
/// Eigenvectors are sign-normalized so their first non-zero component is
/// positive.
pub fn eig_sym3(d: &DiffusionTensor6) -> EigenSystem {
    let raw = d.matrix();
    let scale = raw.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return EigenSystem { values: [0.0; 3], vectors: [UnitDirection::X, UnitDirection::Y, UnitDirection::Z] };
    }
    if d.dxy == 0.0 && d.dxz == 0.0 && d.dyz == 0.0 {
        let mut axes = [(d.dxx, UnitDirection::X), (d.dyy, UnitDirection::Y), (d.dzz, UnitDirection::Z)];
        axes.sort_by(|a, b| b.0.total_cmp(&a.0));
        return EigenSystem { values: axes.map(|a| a.0), vectors: axes.map(|a| a.1) };
    }
    let mut m = raw;
    m.iter_mut().flatten().for_each(|v| *v /= scale);

    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    let off = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    let spread = ((m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * off) / 6.0;

    let (values, vectors) =
        if spread <= DEGENERATE_SPREAD { jacobi_sym3(m) } else { analytic_sym3(&m, q, spread.sqrt()) };

    let mut pairs: [(f64, [f64; 3]); 3] = [(values[0], vectors[0]), (values[1], vectors[1]), (values[2], vectors[2])];
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    EigenSystem {
        values: pairs.map(|(l, _)| l * scale),
        vectors: pairs.map(|(_, v)| UnitDirection::from_unit_unchecked(fix_sign(v))),
    }
}

fn analytic_sym3(m: &[[f64; 3]; 3], q: f64, p: f64) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut b = *m;
    for (i, row) in b.iter_mut().enumerate() {
        row[i] -= q;
        row.iter_mut().for_each(|v| *v /= p);
    }
    let r = (det3(&b) / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3).cos();
    let mid = 3.0 * q - hi - lo;
    let isolated = if hi - mid >= mid - lo { hi } else { lo };

    let v0 = null_vector(m, isolated);
    let (u, w) = complement_basis(&v0);

    // Restrict to span{u, w} and diagonalize the 2×2 block with one rotation.
    let mu = mat_vec(m, &u);
    let mw = mat_vec(m, &w);
    let a11 = dot3(&u, &mu);
    let a22 = dot3(&w, &mw);
    let a12 = 0.5 * (dot3(&u, &mw) + dot3(&w, &mu));
    let theta = 0.5 * (2.0 * a12).atan2(a11 - a22);
    let (s, c) = theta.sin_cos();
    let e1 = [c * u[0] + s * w[0], c * u[1] + s * w[1], c * u[2] + s * w[2]];
    let e2 = [-s * u[0] + c * w[0], -s * u[1] + c * w[1], -s * u[2] + c * w[2]];
    let l1 = c * c * a11 + 2.0 * s * c * a12 + s * s * a22;
    let l2 = s * s * a11 - 2.0 * s * c * a12 + c * c * a22;

    ([isolated, l1, l2], [v0, normalize3(e1), normalize3(e2)])
}

fn null_vector(m: &[[f64; 3]; 3], lambda: f64) -> [f64; 3] {
    let mut rows = *m;
    for (i, row) in rows.iter_mut().enumerate() {
        row[i] -= lambda;
    }
    let candidates = [cross3(&rows[0], &rows[1]), cross3(&rows[0], &rows[2]), cross3(&rows[1], &rows[2])];
    let best = candidates.iter().max_by(|a, b| dot3(a, a).total_cmp(&dot3(b, b))).copied().unwrap_or([1.0, 0.0, 0.0]);
    if dot3(&best, &best) == 0.0 {
        return [1.0, 0.0, 0.0];
    }
    normalize3(best)
}

fn complement_basis(v: &[f64; 3]) -> ([f64; 3], [f64; 3]) {
    // Cross with the axis least aligned with v.
    let ax = v.iter().map(|c| c.abs()).enumerate().min_by(|a, b| a.1.total_cmp(&b.1)).map(|(i, _)| i);
    let mut e = [0.0; 3];
    e[ax.unwrap_or(0)] = 1.0;
    let u = normalize3(cross3(v, &e));
    let w = normalize3(cross3(v, &u));
    (u, w)
}

/// Cyclic Jacobi rotations; eigenvectors are the columns of the accumulated rotation.
fn jacobi_sym3(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _ in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let cols = [[v[0][0], v[1][0], v[2][0]], [v[0][1], v[1][1], v[2][1]], [v[0][2], v[1][2], v[2][2]]];
    ([a[0][0], a[1][1], a[2][2]], cols.map(normalize3))
}

fn fix_sign(v: [f64; 3]) -> [f64; 3] {
    match v.iter().find(|c| **c != 0.0) {
        Some(c) if *c < 0.0 => v.map(|c| -c),
        _ => v,
    }
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn mat_vec(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [dot3(&m[0], v), dot3(&m[1], v), dot3(&m[2], v)]
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = dot3(&v, &v).sqrt();
    v.map(|c| c / n)
}

/// FA, MD, AD and RD from a sorted eigensystem. FA is clamped to `[0, 1]`
/// and defined as zero for the all-zero tensor.
pub fn derive_maps(e: &EigenSystem) -> DtiScalars {
    let [l1, l2, l3] = e.values;
    let md = (l1 + l2 + l3) / 3.0;
    let norm2 = l1 * l1 + l2 * l2 + l3 * l3;
    let fa = if norm2 == 0.0 {
        0.0
    } else {
        let dev2 = (l1 - md).powi(2) + (l2 - md).powi(2) + (l3 - md).powi(2);
        (1.5 * dev2 / norm2).sqrt().clamp(0.0, 1.0)
    };
    DtiScalars { fa, md, ad: l1, rd: 0.5 * (l2 + l3) }
}

/// Direction-encoded colour `|v1| · FA`, each channel in `[0, 1]`.
pub fn dec_color(e: &EigenSystem, fa: f64) -> [f64; 3] {
    let fa = fa.clamp(0.0, 1.0);
    e.principal().to_array().map(|c| (c.abs() * fa).min(1.0))
}

/// Per-voxel scalar maps over a field of tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DtiMaps {
    pub fa: Vec<f64>,
    pub md: Vec<f64>,
    pub ad: Vec<f64>,
    pub rd: Vec<f64>,
    /// Principal eigenvector per voxel.
    pub v1: Vec<[f64; 3]>,
}

impl DtiMaps {
    pub fn from_tensors(tensors: &[DiffusionTensor6]) -> Self {
        let mut maps = DtiMaps::default();
        for t in tensors {
            let e = eig_sym3(t);
            let s = derive_maps(&e);
            maps.fa.push(s.fa);
            maps.md.push(s.md);
            maps.ad.push(s.ad);
            maps.rd.push(s.rd);
            maps.v1.push(e.principal().to_array());
        }
        maps
    }

    pub fn dec(&self) -> Vec<[f64; 3]> {
        self.v1
            .iter()
            .zip(&self.fa)
            .map(|(v, fa)| {
                let fa = fa.clamp(0.0, 1.0);
                v.map(|c| (c.abs() * fa).min(1.0))
            })
            .collect()
    }

    pub fn get(&self, kind: MapKind) -> &[f64] {
        match kind {
            MapKind::Fa => &self.fa,
            MapKind::Md => &self.md,
            MapKind::Ad => &self.ad,
            MapKind::Rd => &self.rd,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Fa,
    Md,
    Ad,
    Rd,
}

impl MapKind {
    pub const ALL: [MapKind; 4] = [MapKind::Fa, MapKind::Md, MapKind::Ad, MapKind::Rd];

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Fa => "fa",
            MapKind::Md => "md",
            MapKind::Ad => "ad",
            MapKind::Rd => "rd",
        }
    }
}
