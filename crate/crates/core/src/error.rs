use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("direction ({x}, {y}, {z}) is not unit length (|g| = {norm})")]
    NonUnitDirection { x: f64, y: f64, z: f64, norm: f64 },
    #[error("b-value must be finite and non-negative, got {0}")]
    NegativeB(f64),
    #[error("non-positive signal: s0 = {s0}, si = {si}")]
    NonPositiveSignal { s0: f64, si: f64 },
    #[error("log signal ratio is undefined at b = 0")]
    ZeroB,

    #[error("need at least {min} directions, got {n}")]
    TooFewDirections { n: usize, min: usize },
    #[error("at most {max} directions are supported, got {n}")]
    TooManyDirections { n: usize, max: usize },
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("invalid pool split: train_count {train} for {n} directions (need 6 <= train < n)")]
    BadSplit { train: usize, n: usize },
    #[error("subset of {k} requested from a pool of {pool}")]
    SubsetTooLarge { k: usize, pool: usize },
    #[error("subset of {k} is below the minimum of {min}")]
    SubsetTooSmall { k: usize, min: usize },
    #[error("directions {a} and {b} coincide (as lines)")]
    DuplicateDirection { a: usize, b: usize },
    #[error("scheme needs at least one b=0 acquisition")]
    NoB0,

    #[error("phantom dims {nx}x{ny} below the 32x32 minimum")]
    DimsTooSmall { nx: usize, ny: usize },
    #[error("invalid phantom spec: {0}")]
    BadPhantomSpec(String),

    #[error("least squares needs at least 6 directions, got {n}")]
    NotEnoughDirections { n: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial dims {h}x{w} are not divisible by {factor}")]
    OddSpatialDims { h: usize, w: usize, factor: usize },
    #[error("image with {h} rows cannot be split into {bands} bands")]
    ImageTooSmall { h: usize, bands: usize },
    #[error("loss node does not depend on any parameter")]
    DisconnectedLoss,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, batch {batch} (last finite loss {last_finite})")]
    NonFiniteLoss { epoch: usize, batch: usize, last_finite: f64 },
    #[error("subset size {k} outside [{min}, {max}]")]
    SubsetOutOfRange { k: usize, min: usize, max: usize },
    #[error("mean b=0 intensity over the mask is zero")]
    ZeroB0Mean,
    #[error("invalid network config: {0}")]
    BadConfig(String),

    #[error("mask selects too few voxels")]
    EmptyMask,
    #[error("reference image is zero on the mask")]
    ZeroReference,

    #[error("bad magic bytes")]
    BadMagic,
    #[error("invalid header: {0}")]
    HeaderJsonInvalid(String),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    PayloadTruncated { expected: usize, found: usize },
    #[error("bvals has {bvals} columns but bvecs has {bvecs}")]
    ColumnCountMismatch { bvals: usize, bvecs: usize },
    #[error("gradient table parse error: {0}")]
    GradientTable(String),
    #[error("checkpoint manifest mismatch: {0}")]
    ManifestShapeMismatch(String),
    #[error("bad display window [{lo}, {hi}]")]
    BadWindow { lo: f64, hi: f64 },

    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Path { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}
