//! Small tape-based autodiff engine for 4-D arrays.

mod array;
pub mod gradcheck;
mod graph;
mod kernels;
mod optim;

pub use array::{Array4, Real};
pub use gradcheck::{gradcheck, GradCheck};
pub use graph::{Gradients, Graph, NodeId, ParamId, ParamStore};
pub use kernels::band_rows;
pub use optim::Adam;
