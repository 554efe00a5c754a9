//! Minimal tensor and autodiff toolkit used by the avatar renderer.
//!
//! Values are dense row-major `f64` matrices. Differentiable computation is
//! recorded on a [`Graph`]; the coarse operations (sparse row maps, rulebook
//! convolutions, grouped attention, ray compositing) keep the tape short for
//! per-sample rendering workloads.

mod conv;
mod graph;
mod mat;
mod optim;
mod params;
mod sparse;

pub use conv::{Dims3, Rulebook};
pub use graph::{composite_kernel, composite_weights, sigmoid, softmax_in_place, softplus, Gradients, Graph, Var};
pub use mat::Mat;
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use sparse::{SparseMap, SparseMapBuilder};
