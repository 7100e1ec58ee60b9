//! End-to-end experiment steps shared by the command line front end and the
//! test suites: dataset generation, LLS fitting, training and evaluation.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Container, MetricRow};
use crate::lls;
use crate::metrics::{self, MetricReport};
use crate::net::{self, Checkpoint, EpochLog, FlexNet, NetConfig, TrainingSet};
use crate::phantom::{make_tensor_field, synthesize_dwi, DwiVolume, PhantomSpec, TensorField};
use crate::rng::mix64;
use crate::scheme::{self, generate_uniform, DirectionPools, GradientScheme};
use crate::tensor::{BValue, DtiMaps, MapKind};

/// Display window for diffusivity maps, mm²/s.
pub const DIFFUSIVITY_WINDOW: (f64, f64) = (0.0, 3e-3);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeConfig {
    /// Directions in the full scheme; the first `train_pool` form the training pool.
    pub directions: usize,
    pub train_pool: usize,
    pub n_b0: usize,
    pub b: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self { directions: 90, train_pool: 50, n_b0: 1, b: 1000.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub s0: f64,
    pub sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { s0: 1.0, sigma: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub dirs: Vec<usize>,
    /// Random test-pool subsets drawn per direction count.
    pub draws: usize,
    pub subset_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { dirs: vec![6, 8, 12, 20], draws: 3, subset_seed: 0 }
    }
}

/// One experiment. `phantom.slices` is ignored; slice counts come from
/// `splits`, and the three splits use phantom seeds `seed`, `seed + 1`,
/// `seed + 2`. `seed` drives noise, subsets and network initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub splits: Splits,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub net: NetConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Resolved against the config file's directory when loaded from disk.
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::at(path))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.output_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.splits.train == 0 || self.splits.test == 0 {
            return bad("splits.train and splits.test must be positive".into());
        }
        let s = &self.scheme;
        if s.n_b0 == 0 {
            return bad("scheme.n_b0 must be at least 1".into());
        }
        if !(s.b > 0.0) {
            return bad("scheme.b must be positive".into());
        }
        if s.train_pool < scheme::MIN_DIRECTIONS || s.train_pool >= s.directions {
            return bad(format!("scheme.train_pool must be in [6, {})", s.directions));
        }
        if !(self.noise.s0 > 0.0) || !(self.noise.sigma >= 0.0) {
            return bad("noise.s0 must be positive and noise.sigma non-negative".into());
        }
        self.net.validate()?;
        self.check_dirs(&self.eval.dirs)?;
        if self.eval.draws == 0 {
            return bad("eval.draws must be at least 1".into());
        }
        Ok(())
    }

    /// Direction counts must fit both the network and the test pool.
    pub fn check_dirs(&self, dirs: &[usize]) -> Result<()> {
        let pool = self.scheme.directions - self.scheme.train_pool;
        let max = self.net.n_max.min(pool);
        match dirs.iter().find(|&&d| d < scheme::MIN_DIRECTIONS || d > max) {
            Some(&d) => Err(Error::SubsetOutOfRange { k: d, min: scheme::MIN_DIRECTIONS, max }),
            None => Ok(()),
        }
    }

    fn split_spec(&self, k: u64, slices: usize) -> PhantomSpec {
        let mut p = self.phantom.clone().with_slices(slices);
        p.seed = self.phantom.seed.wrapping_add(k);
        p
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    pub const FILE: &'static str = ".flexdti.lock";

    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(Error::at(dir))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => Ok(Self { path, _file: f }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::Path { path, source: e }),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Uniform scheme of `n` directions with `n_b0` b=0 images.
pub fn make_scheme(n: usize, n_b0: usize, b: f64, seed: u64) -> Result<GradientScheme> {
    GradientScheme::new(BValue::new(b)?, generate_uniform(n, seed)?, n_b0)
}

/// Ground truth and acquisitions for one experiment. Training noise is
/// synthesized on the fly, so only validation and test acquisitions exist.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scheme: GradientScheme,
    pub pools: DirectionPools,
    pub train: TensorField,
    pub val: TensorField,
    pub test: TensorField,
    pub test_volume: DwiVolume,
}

const TEST_NOISE: u64 = 0x7e57;
const VAL_NOISE: u64 = 0x0a1;
const TRAIN_NOISE: u64 = 0x7a1;

pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let s = &cfg.scheme;
    let scheme = make_scheme(s.directions, s.n_b0, s.b, cfg.seed)?;
    let pools = scheme::split_pools(s.directions, s.train_pool)?;
    let train = make_tensor_field(&cfg.split_spec(0, cfg.splits.train))?;
    let val = if cfg.splits.val > 0 {
        make_tensor_field(&cfg.split_spec(1, cfg.splits.val))?
    } else {
        TensorField::zeros(cfg.phantom.nx, cfg.phantom.ny, 0)
    };
    let test = make_tensor_field(&cfg.split_spec(2, cfg.splits.test))?;
    let test_volume = synthesize_dwi(&test, &scheme, cfg.noise.s0, cfg.noise.sigma, mix64(cfg.seed ^ TEST_NOISE))?;
    Ok(Dataset { scheme, pools, train, val, test, test_volume })
}

const FILES: [&str; 7] =
    ["bvals", "bvecs", "pools.json", "train_truth.dwiv", "val_truth.dwiv", "test_truth.dwiv", "test.dwiv"];

pub fn write_dataset(ds: &Dataset, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(Error::at(out))?;
    io::write_gradient_table(&ds.scheme, &out.join(FILES[0]), &out.join(FILES[1]))?;
    let pools = serde_json::to_string_pretty(&ds.pools).map_err(|e| Error::Config(e.to_string()))? + "\n";
    fs::write(out.join(FILES[2]), pools).map_err(Error::at(out.join(FILES[2])))?;
    io::write_container(&out.join(FILES[3]), &Container::from_field(&ds.train))?;
    io::write_container(&out.join(FILES[4]), &Container::from_field(&ds.val))?;
    io::write_container(&out.join(FILES[5]), &Container::from_field(&ds.test))?;
    io::write_container(&out.join(FILES[6]), &Container::from_volume(&ds.test_volume))
}

/// Reads what [`write_dataset`] wrote. Values come back f32-quantized.
pub fn read_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset> {
    let missing = FILES.iter().find(|f| !dir.join(f).exists());
    if let Some(f) = missing {
        return Err(Error::Config(format!("{} not found; run the phantom step first", dir.join(f).display())));
    }
    let scheme = io::read_gradient_table(&dir.join(FILES[0]), &dir.join(FILES[1]))?;
    let pools_path = dir.join(FILES[2]);
    let text = fs::read_to_string(&pools_path).map_err(Error::at(&pools_path))?;
    let pools: DirectionPools = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let field = |i: usize| io::read_container(&dir.join(FILES[i]))?.to_field();
    let mut test_volume = io::read_container(&dir.join(FILES[6]))?.to_volume(&scheme)?;
    test_volume.s0 = cfg.noise.s0;
    test_volume.sigma = cfg.noise.sigma;
    Ok(Dataset { scheme, pools, train: field(3)?, val: field(4)?, test: field(5)?, test_volume })
}

pub fn train_model(cfg: &RunConfig, ds: &Dataset, progress: impl FnMut(&EpochLog)) -> Result<Checkpoint> {
    let set = |truth| TrainingSet {
        truth,
        scheme: &ds.scheme,
        pool: &ds.pools.train,
        s0: cfg.noise.s0,
        sigma: cfg.noise.sigma,
        seed: mix64(cfg.seed ^ TRAIN_NOISE),
    };
    let train = set(&ds.train);
    let mut val = set(&ds.val);
    val.seed = mix64(cfg.seed ^ VAL_NOISE);
    let net_cfg = NetConfig { seed: cfg.seed, ..cfg.net.clone() };
    net::train(&net_cfg, &train, (ds.val.nz > 0).then_some(&val), progress)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    FlexDti,
    Lls,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FlexDti => "flexdti",
            Method::Lls => "lls",
        }
    }
}

/// NRMSE of one map on one test slice for one subset draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceScore {
    pub method: Method,
    pub n_directions: usize,
    pub draw: usize,
    pub slice: usize,
    pub map: MapKind,
    pub nrmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Volume-level metrics averaged over draws, one row per (map, method, d).
    pub rows: Vec<MetricRow>,
    pub slices: Vec<SliceScore>,
}

impl Evaluation {
    pub fn nrmse_values(&self, method: Method, d: usize, map: MapKind) -> Vec<f64> {
        self.slices
            .iter()
            .filter(|s| s.method == method && s.n_directions == d && s.map == map)
            .map(|s| s.nrmse)
            .collect()
    }

    pub fn slices_csv(&self) -> String {
        let mut out = String::from("method,n_directions,draw,slice,map_name,nrmse\n");
        for s in &self.slices {
            out += &format!(
                "{},{},{},{},{},{:.6}\n",
                s.method.name(),
                s.n_directions,
                s.draw,
                s.slice,
                s.map.name(),
                s.nrmse
            );
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Subset `draw` of size `d` from `pool`.
pub fn eval_subset(pool: &[usize], d: usize, draw: usize, subset_seed: u64) -> Result<Vec<usize>> {
    scheme::sample_subset(pool, d, mix64(subset_seed ^ mix64(((d as u64) << 32) | draw as u64)))
}

/// Fits every subset with both methods and scores the maps against the
/// test ground truth. When `render_dir` is given, the middle slice of the
/// first draw is rendered per method and direction count.
pub fn evaluate(
    ds: &Dataset,
    net: &FlexNet<f32>,
    dirs: &[usize],
    draws: usize,
    subset_seed: u64,
    render_dir: Option<&Path>,
) -> Result<Evaluation> {
    let truth = DtiMaps::from_tensors(&ds.test.tensors);
    let mask = &ds.test.mask;
    let hw = ds.test.slice_len();
    let mut eval = Evaluation { rows: vec![], slices: vec![] };
    if let Some(dir) = render_dir {
        render_maps(&truth, mask, ds.test.nx, ds.test.ny, ds.test.nz / 2, dir, "truth")?;
    }
    for &d in dirs {
        let mut sums: Vec<Vec<MetricReport>> = vec![vec![]; 2 * MapKind::ALL.len()];
        for draw in 0..draws {
            let subset = eval_subset(&ds.pools.test, d, draw, subset_seed)?;
            for method in [Method::FlexDti, Method::Lls] {
                let field = match method {
                    Method::FlexDti => net::infer(&ds.test_volume, &subset, net)?,
                    Method::Lls => lls::fit_volume(&ds.test_volume, Some(&subset))?.field,
                };
                let maps = DtiMaps::from_tensors(&field.tensors);
                if draw == 0 {
                    if let Some(dir) = render_dir {
                        let tag = format!("{}_d{d}", method.name());
                        render_maps(&maps, mask, ds.test.nx, ds.test.ny, ds.test.nz / 2, dir, &tag)?;
                    }
                }
                for (k, kind) in MapKind::ALL.iter().enumerate() {
                    let (est, reference) = (maps.get(*kind), truth.get(*kind));
                    sums[(method as usize) * MapKind::ALL.len() + k].push(metrics::report(est, reference, mask)?);
                    for z in 0..ds.test.nz {
                        let r = z * hw..(z + 1) * hw;
                        if let Ok(v) = metrics::nrmse(&est[r.clone()], &reference[r.clone()], &mask[r]) {
                            eval.slices.push(SliceScore {
                                method,
                                n_directions: d,
                                draw,
                                slice: z,
                                map: *kind,
                                nrmse: v,
                            });
                        }
                    }
                }
            }
        }
        for method in [Method::FlexDti, Method::Lls] {
            for (k, kind) in MapKind::ALL.iter().enumerate() {
                let reps = &sums[(method as usize) * MapKind::ALL.len() + k];
                let avg = |f: fn(&MetricReport) -> f64| reps.iter().map(f).sum::<f64>() / reps.len() as f64;
                eval.rows.push(MetricRow {
                    map: kind.name().into(),
                    method: method.name().into(),
                    n_directions: d,
                    report: MetricReport {
                        psnr: avg(|r| r.psnr),
                        ssim: avg(|r| r.ssim),
                        nrmse: avg(|r| r.nrmse),
                        voxels: reps[0].voxels,
                    },
                });
            }
        }
    }
    Ok(eval)
}

/// Writes `fa`, `md`, `ad`, `rd` PGMs and a DEC PPM for slice `z`, named
/// `{map}_{tag}`.
pub fn render_maps(maps: &DtiMaps, mask: &[bool], nx: usize, ny: usize, z: usize, dir: &Path, tag: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::at(dir))?;
    let r = z * nx * ny..(z + 1) * nx * ny;
    let m = &mask[r.clone()];
    for kind in MapKind::ALL {
        let (lo, hi) = if kind == MapKind::Fa { (0.0, 1.0) } else { DIFFUSIVITY_WINDOW };
        let img = io::render_gray(&maps.get(kind)[r.clone()], m, nx, ny, lo, hi)?;
        io::write_bytes(&dir.join(format!("{}_{tag}.pgm", kind.name())), &img)?;
    }
    let dec = maps.dec();
    io::write_bytes(&dir.join(format!("dec_{tag}.ppm")), &io::render_dec(&dec[r], m, nx, ny)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSummary {
    pub clamped: usize,
    pub failed: usize,
    /// Metrics against the supplied ground truth, one row per map.
    pub rows: Vec<MetricRow>,
}

/// LLS fit of `v` restricted to `subset`, written as `fit.dwiv` plus
/// renders of slice `z` (and `metrics.csv` when `truth` is given).
pub fn fit_command(
    v: &DwiVolume,
    subset: Option<&[usize]>,
    truth: Option<&TensorField>,
    z: usize,
    out: &Path,
) -> Result<FitSummary> {
    let report = lls::fit_volume(v, subset)?;
    fs::create_dir_all(out).map_err(Error::at(out))?;
    io::write_container(&out.join("fit.dwiv"), &Container::from_field(&report.field))?;
    let maps = DtiMaps::from_tensors(&report.field.tensors);
    render_maps(&maps, &v.mask, v.nx, v.ny, z.min(v.nz.saturating_sub(1)), out, "lls")?;
    let mut rows = Vec::new();
    if let Some(t) = truth {
        let tm = DtiMaps::from_tensors(&t.tensors);
        let n = subset.map_or(v.dwi.len(), <[usize]>::len);
        for kind in MapKind::ALL {
            rows.push(MetricRow {
                map: kind.name().into(),
                method: Method::Lls.name().into(),
                n_directions: n,
                report: metrics::report(maps.get(kind), tm.get(kind), &t.mask)?,
            });
        }
        fs::write(out.join("metrics.csv"), io::metrics_csv(&rows)).map_err(Error::at(out.join("metrics.csv")))?;
    }
    Ok(FitSummary { clamped: report.clamped, failed: report.failed, rows })
}

/// Phantom step: builds the dataset and writes it under `cfg.output_dir`.
pub fn phantom_command(cfg: &RunConfig) -> Result<Dataset> {
    let ds = build_dataset(cfg)?;
    write_dataset(&ds, &cfg.output_dir)?;
    Ok(ds)
}

/// Train step: reads the dataset and writes `checkpoint.fdti` and `training.csv`.
pub fn train_command(cfg: &RunConfig, progress: impl FnMut(&EpochLog)) -> Result<Checkpoint> {
    let ds = read_dataset(&cfg.output_dir, cfg)?;
    let ck = train_model(cfg, &ds, progress)?;
    io::save_checkpoint(&cfg.output_dir.join("checkpoint.fdti"), &ck)?;
    let csv = io::training_csv(&ck.history);
    fs::write(cfg.output_dir.join("training.csv"), csv).map_err(Error::at(cfg.output_dir.join("training.csv")))?;
    Ok(ck)
}

/// Eval step: writes `metrics.csv`, `slice_metrics.csv` and renders under `maps/`.
pub fn eval_command(cfg: &RunConfig, checkpoint: &Path, dirs: &[usize], subset_seed: u64) -> Result<Evaluation> {
    cfg.check_dirs(dirs)?;
    let ck = io::load_checkpoint(checkpoint)?;
    let max = ck.net.config().n_max;
    if let Some(&d) = dirs.iter().find(|&&d| d > max) {
        return Err(Error::SubsetOutOfRange { k: d, min: scheme::MIN_DIRECTIONS, max });
    }
    let ds = read_dataset(&cfg.output_dir, cfg)?;
    let out = &cfg.output_dir;
    let eval = evaluate(&ds, &ck.net, dirs, cfg.eval.draws, subset_seed, Some(&out.join("maps")))?;
    fs::write(out.join("metrics.csv"), io::metrics_csv(&eval.rows)).map_err(Error::at(out.join("metrics.csv")))?;
    fs::write(out.join("slice_metrics.csv"), eval.slices_csv()).map_err(Error::at(out.join("slice_metrics.csv")))?;
    Ok(eval)
}
