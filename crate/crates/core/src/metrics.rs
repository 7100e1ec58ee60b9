//! Global (whole-mask) PSNR, SSIM and NRMSE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub nrmse: f64,
    pub voxels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range; `None` takes max − min of the reference over the mask.
    pub range: Option<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self { k1: 0.01, k2: 0.03, range: None }
    }
}

fn masked<'a>(est: &'a [f64], reference: &'a [f64], mask: &'a [bool]) -> impl Iterator<Item = (f64, f64)> + 'a {
    est.iter().zip(reference).zip(mask).filter(|(_, m)| **m).map(|((e, r), _)| (*e, *r))
}

fn check(est: &[f64], reference: &[f64], mask: &[bool], min: usize) -> Result<usize> {
    if est.len() != reference.len() || est.len() != mask.len() {
        return Err(Error::ShapeMismatch(format!("est {} / ref {} / mask {}", est.len(), reference.len(), mask.len())));
    }
    let v = mask.iter().filter(|m| **m).count();
    if v < min {
        return Err(Error::EmptyMask);
    }
    Ok(v)
}

/// `10 log10(Peak² / MSE)`, Peak the reference maximum over the mask.
pub fn psnr(est: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    let v = check(est, reference, mask, 1)?;
    let peak = masked(est, reference, mask).map(|(_, r)| r).fold(f64::NEG_INFINITY, f64::max);
    let mse = masked(est, reference, mask).map(|(e, r)| (e - r).powi(2)).sum::<f64>() / v as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Single-window SSIM from masked means, variances and covariance.
pub fn ssim(est: &[f64], reference: &[f64], mask: &[bool], cfg: &SsimConfig) -> Result<f64> {
    let v = check(est, reference, mask, 2)? as f64;
    let (mut se, mut sr) = (0.0, 0.0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (e, r) in masked(est, reference, mask) {
        se += e;
        sr += r;
        lo = lo.min(r);
        hi = hi.max(r);
    }
    let (mu_e, mu_r) = (se / v, sr / v);
    let (mut var_e, mut var_r, mut cov) = (0.0, 0.0, 0.0);
    for (e, r) in masked(est, reference, mask) {
        var_e += (e - mu_e).powi(2);
        var_r += (r - mu_r).powi(2);
        cov += (e - mu_e) * (r - mu_r);
    }
    var_e /= v;
    var_r /= v;
    cov /= v;
    let range = cfg.range.unwrap_or(hi - lo);
    // a flat reference has no range; fall back to its magnitude so c1, c2 > 0
    let range = if range > 0.0 { range } else { mu_r.abs().max(1.0) };
    let c1 = (cfg.k1 * range).powi(2);
    let c2 = (cfg.k2 * range).powi(2);
    Ok(((2.0 * mu_e * mu_r + c1) * (2.0 * cov + c2)) / ((mu_e * mu_e + mu_r * mu_r + c1) * (var_e + var_r + c2)))
}

/// `√(Σ(est − ref)² / Σ ref²)` over the mask.
pub fn nrmse(est: &[f64], reference: &[f64], mask: &[bool]) -> Result<f64> {
    check(est, reference, mask, 1)?;
    let (num, den) = masked(est, reference, mask).fold((0.0, 0.0), |(n, d), (e, r)| (n + (e - r).powi(2), d + r * r));
    if den == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok((num / den).sqrt())
}

pub fn report(est: &[f64], reference: &[f64], mask: &[bool]) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(est, reference, mask)?,
        ssim: ssim(est, reference, mask, &SsimConfig::default())?,
        nrmse: nrmse(est, reference, mask)?,
        voxels: mask.iter().filter(|m| **m).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> (Vec<f64>, Vec<bool>) {
        let r: Vec<f64> = (0..64).map(|i| 0.2 + 0.8 * ((i * 37) % 64) as f64 / 63.0).collect();
        let m: Vec<bool> = (0..64).map(|i| i % 5 != 0).collect();
        (r, m)
    }

    #[test]
    fn identical_images() {
        let (r, m) = data();
        assert_eq!(psnr(&r, &r, &m).unwrap(), PSNR_CAP_DB);
        assert!((ssim(&r, &r, &m, &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nrmse(&r, &r, &m).unwrap(), 0.0);
    }

    #[test]
    fn psnr_hand_case() {
        // peak 1, every masked error 0.1 ⇒ MSE 0.01 ⇒ 20 dB
        let r = vec![1.0, 0.5, 0.25, 0.0];
        let e: Vec<f64> = r.iter().map(|x| x + 0.1).collect();
        let p = psnr(&e, &r, &[true; 4]).unwrap();
        assert!((p - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_scale_invariant() {
        let (r, m) = data();
        let e: Vec<f64> = r.iter().enumerate().map(|(i, x)| x + 0.01 * (i % 3) as f64).collect();
        let a = psnr(&e, &r, &m).unwrap();
        let e2: Vec<f64> = e.iter().map(|x| 2.0 * x).collect();
        let r2: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        assert!((a - psnr(&e2, &r2, &m).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ssim_penalizes_offset_and_is_symmetric_with_fixed_range() {
        let (r, m) = data();
        let shifted: Vec<f64> = r.iter().map(|x| x + 5.0).collect();
        assert!(ssim(&shifted, &r, &m, &SsimConfig::default()).unwrap() < 1.0);
        let cfg = SsimConfig { range: Some(1.0), ..Default::default() };
        let e: Vec<f64> = r.iter().enumerate().map(|(i, x)| x * 0.9 + 0.03 * (i % 4) as f64).collect();
        let a = ssim(&e, &r, &m, &cfg).unwrap();
        let b = ssim(&r, &e, &m, &cfg).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn ssim_hand_case_equal_stats() {
        // est = ref shuffled in a way that keeps μ = 0.5 and σ² equal, with
        // cov = σ² only when they coincide
        let r = vec![0.0, 1.0, 0.0, 1.0];
        assert!((ssim(&r, &r, &[true; 4], &SsimConfig::default()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nrmse_cases() {
        let (r, m) = data();
        let zero = vec![0.0; r.len()];
        assert!((nrmse(&zero, &r, &m).unwrap() - 1.0).abs() < 1e-15);
        let twice: Vec<f64> = r.iter().map(|x| 2.0 * x).collect();
        assert!((nrmse(&twice, &r, &m).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(nrmse(&r, &zero, &m), Err(Error::ZeroReference)));
    }

    #[test]
    fn empty_mask() {
        let (r, _) = data();
        let none = vec![false; r.len()];
        assert!(matches!(psnr(&r, &r, &none), Err(Error::EmptyMask)));
        assert!(matches!(ssim(&r, &r, &none, &SsimConfig::default()), Err(Error::EmptyMask)));
    }

    #[test]
    fn psnr_drops_with_noise() {
        let (r, m) = data();
        let mut last = f64::INFINITY;
        for level in 1..=10 {
            let s = level as f64 * 0.01;
            let e: Vec<f64> =
                r.iter().enumerate().map(|(i, x)| x + s * crate::rng::normal_pair(1, 0, i as u64).0).collect();
            let p = psnr(&e, &r, &m).unwrap();
            assert!(p < last);
            last = p;
        }
    }
}
