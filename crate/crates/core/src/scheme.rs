//! Gradient direction sets: electrostatic generation, conditioning and
//! train/test partitioning.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{design_row, BValue, UnitDirection};

/// Minimum direction count for a rank-6 tensor fit.
pub const MIN_DIRECTIONS: usize = 6;

/// Two directions closer than this (as lines, radians) are duplicates.
pub const DUPLICATE_ANGLE: f64 = 1e-6;

/// Singular values below `RANK_TOL · σ_max` count as zero.
const RANK_TOL: f64 = 1e-10;

/// A single-shell acquisition: `n_b0` unweighted volumes followed by one
/// diffusion-weighted volume per direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientScheme {
    b: BValue,
    directions: Vec<UnitDirection>,
    n_b0: usize,
}

impl GradientScheme {
    pub fn new(b: BValue, directions: Vec<UnitDirection>, n_b0: usize) -> Result<Self> {
        if n_b0 == 0 {
            return Err(Error::NoB0);
        }
        for (i, a) in directions.iter().enumerate() {
            for (j, c) in directions.iter().enumerate().skip(i + 1) {
                if a.line_angle(c) < DUPLICATE_ANGLE {
                    return Err(Error::DuplicateDirection { a: i, b: j });
                }
            }
        }
        Ok(Self { b, directions, n_b0 })
    }

    pub fn b(&self) -> BValue {
        self.b
    }

    pub fn directions(&self) -> &[UnitDirection] {
        &self.directions
    }

    pub fn n_b0(&self) -> usize {
        self.n_b0
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Scheme restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let dirs = indices
            .iter()
            .map(|&i| self.directions.get(i).copied().ok_or(Error::SubsetTooLarge { k: i + 1, pool: self.len() }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.b, dirs, self.n_b0)
    }

    pub fn condition_number(&self) -> Result<f64> {
        condition_number(&self.directions)
    }

    /// Smallest pairwise angle between direction lines, in degrees.
    pub fn min_line_angle_deg(&self) -> f64 {
        min_line_angle_deg(&self.directions)
    }
}

pub fn min_line_angle_deg(dirs: &[UnitDirection]) -> f64 {
    let mut best = f64::INFINITY;
    for (i, a) in dirs.iter().enumerate() {
        for c in &dirs[i + 1..] {
            best = best.min(a.line_angle(c));
        }
    }
    best.to_degrees()
}

/// Antipodally symmetric Coulomb energy `Σ_{i<j} 1/|gi − gj| + 1/|gi + gj|`.
pub fn coulomb_energy(points: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            let (mut dm, mut dp) = (0.0, 0.0);
            for k in 0..3 {
                dm += (a[k] - b[k]).powi(2);
                dp += (a[k] + b[k]).powi(2);
            }
            e += 1.0 / dm.sqrt() + 1.0 / dp.sqrt();
        }
    }
    e
}

fn coulomb_gradient(points: &[[f64; 3]]) -> Vec<[f64; 3]> {
    let mut grad = vec![[0.0; 3]; points.len()];
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            let (a, b) = (points[i], points[j]);
            let m = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            let p = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
            let rm3 = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).powf(1.5);
            let rp3 = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).powf(1.5);
            for k in 0..3 {
                // d/da (1/|a−b|) = −(a−b)/|a−b|³ ; d/da (1/|a+b|) = −(a+b)/|a+b|³
                grad[i][k] += -m[k] / rm3 - p[k] / rp3;
                grad[j][k] += m[k] / rm3 - p[k] / rp3;
            }
        }
    }
    grad
}

/// Result of the repulsion optimizer; `energies[0]` is the random start.
#[derive(Debug, Clone)]
pub struct RepulsionTrace {
    pub directions: Vec<UnitDirection>,
    pub energies: Vec<f64>,
}

pub const REPULSION_ITERATIONS: usize = 500;

/// Projected gradient descent on the sphere with a backtracking step; an
/// iteration that cannot lower the energy leaves the points unchanged.
pub fn repulsion_descent(n: usize, seed: u64, iterations: usize) -> Result<RepulsionTrace> {
    if n < MIN_DIRECTIONS {
        return Err(Error::TooFewDirections { n, min: MIN_DIRECTIONS });
    }
    let mut r = rng::stream(seed, 0x5c4e3e);
    let mut points: Vec<[f64; 3]> = (0..n).map(|_| random_unit(&mut r)).collect();
    let mut energy = coulomb_energy(&points);
    let mut energies = vec![energy];
    let mut step = 0.1;

    for _ in 0..iterations {
        let grad = coulomb_gradient(&points);
        let tangent: Vec<[f64; 3]> = points
            .iter()
            .zip(&grad)
            .map(|(x, g)| {
                let radial = x[0] * g[0] + x[1] * g[1] + x[2] * g[2];
                [g[0] - radial * x[0], g[1] - radial * x[1], g[2] - radial * x[2]]
            })
            .collect();
        let gmax = tangent.iter().map(|t| (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt()).fold(0.0, f64::max);
        if gmax == 0.0 {
            energies.push(energy);
            continue;
        }
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<[f64; 3]> = points
                .iter()
                .zip(&tangent)
                .map(|(x, t)| {
                    let s = step / gmax;
                    normalize([x[0] - s * t[0], x[1] - s * t[1], x[2] - s * t[2]])
                })
                .collect();
            let e = coulomb_energy(&trial);
            if e <= energy {
                points = trial;
                energy = e;
                step = (step * 1.5).min(0.5);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            step = step.max(1e-12);
        }
        energies.push(energy);
    }

    let directions = points
        .into_iter()
        .map(|p| {
            // canonical hemisphere (z ≥ 0); the model is antipodally symmetric
            let p = if p[2] < 0.0 { p.map(|c| -c) } else { p };
            UnitDirection::normalize(p[0], p[1], p[2])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RepulsionTrace { directions, energies })
}

/// `n` directions with near-uniform angular coverage.
pub fn generate_uniform(n: usize, seed: u64) -> Result<Vec<UnitDirection>> {
    Ok(repulsion_descent(n, seed, REPULSION_ITERATIONS)?.directions)
}

/// Uniform random scheme of `n` directions (no optimization).
pub fn random_directions(n: usize, r: &mut rng::Rng) -> Vec<UnitDirection> {
    (0..n)
        .map(|_| {
            let p = random_unit(r);
            UnitDirection::from_unit_unchecked(p)
        })
        .collect()
}

fn random_unit(r: &mut rng::Rng) -> [f64; 3] {
    use rand_distr::{Distribution, StandardNormal};
    loop {
        let v: [f64; 3] = [StandardNormal.sample(r), StandardNormal.sample(r), StandardNormal.sample(r)];
        let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if n2 > 1e-12 {
            return normalize(v);
        }
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    v.map(|c| c / n)
}

/// `σ_max / σ_min` of the n×6 design matrix.
pub fn condition_number(dirs: &[UnitDirection]) -> Result<f64> {
    if dirs.len() < MIN_DIRECTIONS {
        return Err(Error::TooFewDirections { n: dirs.len(), min: MIN_DIRECTIONS });
    }
    let a = DMatrix::from_fn(dirs.len(), 6, |r, c| design_row(&dirs[r]).0[c]);
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    if !(min > RANK_TOL * max) {
        return Err(Error::RankDeficient);
    }
    Ok(max / min)
}

/// Index pools into a scheme: `[0, train_count)` for training, the rest for testing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionPools {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_pools(n: usize, train_count: usize) -> Result<DirectionPools> {
    if train_count < MIN_DIRECTIONS || train_count >= n {
        return Err(Error::BadSplit { train: train_count, n });
    }
    Ok(DirectionPools { train: (0..train_count).collect(), test: (train_count..n).collect() })
}

/// `k` distinct entries of `pool`, uniformly without replacement, in random order.
pub fn sample_subset(pool: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut r = rng::stream(seed, 0x5ab5e7);
    sample_subset_with(pool, k, &mut r)
}

pub fn sample_subset_with(pool: &[usize], k: usize, r: &mut rng::Rng) -> Result<Vec<usize>> {
    if k < MIN_DIRECTIONS {
        return Err(Error::SubsetTooSmall { k, min: MIN_DIRECTIONS });
    }
    if k > pool.len() {
        return Err(Error::SubsetTooLarge { k, pool: pool.len() });
    }
    let mut v = pool.to_vec();
    let (chosen, _) = v.partial_shuffle(r, k);
    Ok(chosen.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_few_directions() {
        assert!(matches!(generate_uniform(1, 0), Err(Error::TooFewDirections { n: 1, .. })));
        assert!(matches!(generate_uniform(5, 0), Err(Error::TooFewDirections { .. })));
    }

    #[test]
    fn six_directions_reach_icosahedral_spacing() {
        let dirs = generate_uniform(6, 11).unwrap();
        let angle = min_line_angle_deg(&dirs);
        // icosahedron axes are 63.43° apart
        assert!(angle >= 58.0, "min angle {angle}");
    }

    #[test]
    fn energy_never_increases() {
        let trace = repulsion_descent(20, 3, 200).unwrap();
        for w in trace.energies.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(trace.energies.last().unwrap() < &trace.energies[0]);
    }

    #[test]
    fn deterministic_generation() {
        let a = generate_uniform(30, 42).unwrap();
        let b = generate_uniform(30, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_uniform(30, 43).unwrap());
    }

    #[test]
    fn energy_is_antipodally_symmetric() {
        let dirs = generate_uniform(10, 5).unwrap();
        let pts: Vec<[f64; 3]> = dirs.iter().map(|d| d.to_array()).collect();
        let mut flipped = pts.clone();
        flipped[3] = flipped[3].map(|c| -c);
        flipped[7] = flipped[7].map(|c| -c);
        let (e0, e1) = (coulomb_energy(&pts), coulomb_energy(&flipped));
        assert!((e0 - e1).abs() <= 1e-12 * e0);
        let flipped_dirs: Vec<_> =
            dirs.iter().enumerate().map(|(i, d)| if i % 2 == 0 { d.flipped() } else { *d }).collect();
        let (k0, k1) = (condition_number(&dirs).unwrap(), condition_number(&flipped_dirs).unwrap());
        assert!((k0 - k1).abs() <= 1e-9 * k0);
    }

    #[test]
    fn condition_number_rank_deficient() {
        let same = vec![UnitDirection::X; 6];
        assert!(matches!(condition_number(&same), Err(Error::RankDeficient)));
        let planar: Vec<_> = (0..8)
            .map(|i| {
                let t = i as f64 * 0.3;
                UnitDirection::normalize(t.cos(), t.sin(), 0.0).unwrap()
            })
            .collect();
        assert!(matches!(condition_number(&planar), Err(Error::RankDeficient)));
        assert!(matches!(condition_number(&same[..5]), Err(Error::TooFewDirections { .. })));
    }

    #[test]
    fn uniform_schemes_reach_minimal_conditioning() {
        // √(5/2) is the smallest achievable κ for a rank-2 tensor design; the
        // icosahedral 6-set attains it and denser uniform sets approach it.
        let floor = 2.5f64.sqrt();
        let k6 = condition_number(&generate_uniform(6, 1).unwrap()).unwrap();
        let k90 = condition_number(&generate_uniform(90, 1).unwrap()).unwrap();
        assert!((k6 - floor).abs() < 1e-3, "k6 {k6}");
        assert!(k90.is_finite() && (k90 - floor).abs() < 5e-3, "k90 {k90}");
    }

    #[test]
    fn pools() {
        let p = split_pools(90, 50).unwrap();
        assert_eq!((p.train.len(), p.test.len()), (50, 40));
        assert_eq!(p.test[0], 50);
        let p = split_pools(7, 6).unwrap();
        assert_eq!((p.train.len(), p.test.len()), (6, 1));
        assert!(matches!(split_pools(90, 5), Err(Error::BadSplit { .. })));
        assert!(matches!(split_pools(90, 90), Err(Error::BadSplit { .. })));
    }

    #[test]
    fn subsets() {
        let pool: Vec<usize> = (50..90).collect();
        let mut all = sample_subset(&pool, 40, 1).unwrap();
        all.sort_unstable();
        assert_eq!(all, pool);

        let a = sample_subset(&pool, 6, 1).unwrap();
        let b = sample_subset(&pool, 6, 2).unwrap();
        assert_eq!(a, sample_subset(&pool, 6, 1).unwrap());
        assert_ne!(a, b);
        let mut dedup = a.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 6);

        assert!(matches!(sample_subset(&pool, 5, 1), Err(Error::SubsetTooSmall { .. })));
        assert!(matches!(sample_subset(&pool, 41, 1), Err(Error::SubsetTooLarge { .. })));
    }

    #[test]
    fn scheme_rejects_duplicate_lines() {
        let b = BValue::new(1000.0).unwrap();
        let dirs = vec![UnitDirection::X, UnitDirection::Y, UnitDirection::X.flipped()];
        assert!(matches!(GradientScheme::new(b, dirs, 1), Err(Error::DuplicateDirection { a: 0, b: 2 })));
        assert!(matches!(GradientScheme::new(b, vec![UnitDirection::X], 0), Err(Error::NoB0)));
    }
}
