//! Unweighted log-linear least squares tensor fitting.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::phantom::{DwiVolume, TensorField};
use crate::scheme::MIN_DIRECTIONS;
use crate::tensor::{design_row, DesignRow, DiffusionTensor6};

/// Signals are clamped to `SIGNAL_FLOOR · S0` before taking the log.
pub const SIGNAL_FLOOR: f64 = 1e-4;

/// Cholesky pivots below this fraction of the largest diagonal entry of
/// `AᵀA` mark the design as rank deficient.
const PIVOT_TOL: f64 = 1e-12;

fn row_order(a: &DesignRow, b: &DesignRow) -> Ordering {
    a.0.iter().zip(&b.0).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Normal-equation solver for a fixed design. Rows are held in a canonical
/// order, which makes the arithmetic (and hence the bits of the result)
/// independent of the order in which measurements were supplied.
#[derive(Debug, Clone)]
pub struct LlsSolver {
    rows: Vec<DesignRow>,
    /// `order[k]` is the caller index of canonical row `k`.
    order: Vec<usize>,
    chol: [[f64; 6]; 6],
}

impl LlsSolver {
    pub fn new(rows: &[DesignRow]) -> Result<Self> {
        if rows.len() < MIN_DIRECTIONS {
            return Err(Error::NotEnoughDirections { n: rows.len() });
        }
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&i, &j| row_order(&rows[i], &rows[j]));
        let sorted: Vec<DesignRow> = order.iter().map(|&i| rows[i]).collect();

        let mut ata = [[0.0; 6]; 6];
        for r in &sorted {
            for i in 0..6 {
                for j in 0..6 {
                    ata[i][j] += r.0[i] * r.0[j];
                }
            }
        }
        let chol = cholesky6(&ata).ok_or(Error::RankDeficient)?;
        Ok(Self { rows: sorted, order, chol })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Solves for the tensor given `betas` in the caller's original row order.
    pub fn solve(&self, betas: &[f64]) -> DiffusionTensor6 {
        let mut atb = [0.0; 6];
        for (row, &k) in self.rows.iter().zip(&self.order) {
            for (acc, a) in atb.iter_mut().zip(&row.0) {
                *acc += a * betas[k];
            }
        }
        DiffusionTensor6::from_array(cholesky_solve(&self.chol, atb))
    }

    /// RMS of `α·D − β` scaled by `b`, i.e. in log-signal units.
    pub fn residual_rms(&self, d: &DiffusionTensor6, betas: &[f64], b: f64) -> f64 {
        let ss: f64 = self.rows.iter().zip(&self.order).map(|(row, &k)| (b * (row.dot(d) - betas[k])).powi(2)).sum();
        (ss / self.rows.len() as f64).sqrt()
    }
}

fn cholesky6(a: &[[f64; 6]; 6]) -> Option<[[f64; 6]; 6]> {
    let scale = (0..6).map(|i| a[i][i]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    let mut l = [[0.0; 6]; 6];
    for j in 0..6 {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if !(d > PIVOT_TOL * scale) {
            return None;
        }
        let djj = d.sqrt();
        l[j][j] = djj;
        for i in (j + 1)..6 {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / djj;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[[f64; 6]; 6], b: [f64; 6]) -> [f64; 6] {
    let mut y = [0.0; 6];
    for i in 0..6 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0; 6];
    for i in (0..6).rev() {
        let mut s = y[i];
        for k in (i + 1)..6 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    x
}

/// Least squares tensor for one voxel. The (row, β) pairs are put in a
/// canonical order first, so any permutation of the inputs gives the same bits.
pub fn fit_voxel(betas: &[f64], rows: &[DesignRow]) -> Result<DiffusionTensor6> {
    if betas.len() != rows.len() {
        return Err(Error::ShapeMismatch(format!("{} betas for {} rows", betas.len(), rows.len())));
    }
    let mut pairs: Vec<(DesignRow, f64)> = rows.iter().copied().zip(betas.iter().copied()).collect();
    pairs.sort_by(|a, b| row_order(&a.0, &b.0).then(a.1.total_cmp(&b.1)));
    let sorted_rows: Vec<DesignRow> = pairs.iter().map(|p| p.0).collect();
    let sorted_betas: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(LlsSolver::new(&sorted_rows)?.solve(&sorted_betas))
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub field: TensorField,
    /// Per-voxel RMS residual in log-signal units; zero outside the mask.
    pub residual_rms: Vec<f64>,
    /// Masked voxels where at least one signal hit the floor.
    pub clamped: usize,
    /// Masked voxels that could not be fitted and were zero-filled.
    pub failed: usize,
    /// Why voxels failed, when they did.
    pub failure: Option<String>,
}

/// Fits every masked voxel of `v` using the directions in `subset` (all when
/// `None`). Per-voxel problems zero-fill that voxel and are counted; only an
/// undersized subset aborts.
pub fn fit_volume(v: &DwiVolume, subset: Option<&[usize]>) -> Result<FitReport> {
    let all: Vec<usize>;
    let idx = match subset {
        Some(s) => s,
        None => {
            all = (0..v.dwi.len()).collect();
            &all
        }
    };
    if idx.len() < MIN_DIRECTIONS {
        return Err(Error::NotEnoughDirections { n: idx.len() });
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= v.dwi.len()) {
        return Err(Error::SubsetTooLarge { k: bad + 1, pool: v.dwi.len() });
    }

    let n = v.voxels();
    let mut field = TensorField::zeros(v.nx, v.ny, v.nz);
    field.mask = v.mask.clone();
    let mut report = FitReport { field, residual_rms: vec![0.0; n], clamped: 0, failed: 0, failure: None };
    let masked = v.mask.iter().filter(|m| **m).count();

    let rows: Vec<DesignRow> = idx.iter().map(|&i| design_row(&v.scheme.directions()[i])).collect();
    let solver = match LlsSolver::new(&rows) {
        Ok(s) => s,
        Err(e) => {
            report.failed = masked;
            report.failure = Some(e.to_string());
            return Ok(report);
        }
    };
    let b = v.scheme.b().value();
    let s0 = v.mean_b0();
    let mut betas = vec![0.0; idx.len()];

    for vox in 0..n {
        if !v.mask[vox] {
            continue;
        }
        let base = s0[vox];
        if !(base > 0.0) || b == 0.0 {
            report.failed += 1;
            report.failure.get_or_insert_with(|| "non-positive b=0 signal".into());
            continue;
        }
        let floor = SIGNAL_FLOOR * base;
        let mut clamped = false;
        for (beta, &i) in betas.iter_mut().zip(idx) {
            let mut si = v.dwi[i][vox];
            if !(si > floor) {
                si = floor;
                clamped = true;
            }
            *beta = (base / si).ln() / b;
        }
        if clamped {
            report.clamped += 1;
        }
        let d = solver.solve(&betas);
        report.residual_rms[vox] = solver.residual_rms(&d, &betas, b);
        report.field.tensors[vox] = d;
    }
    Ok(report)
}
