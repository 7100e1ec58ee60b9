//! Diffusion tensor reconstruction from diffusion-weighted images.
//!
//! Two estimators share one data model: per-voxel log-linear least squares
//! ([`lls`]) and a dynamic-convolution network ([`net`]) that accepts any
//! number (6 to `n_max`) and orientation of gradient directions.

pub mod error;
pub mod io;
pub mod lls;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod scheme;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{BValue, DesignRow, DiffusionTensor6, DtiMaps, DtiScalars, EigenSystem, MapKind, UnitDirection};
