//! A small define-by-run reverse-mode tensor engine.
//!
//! Every tensor and op is generic over [`Scalar`] (`f32` or `f64`): models
//! train in `f32` and the same code is differentiated in `f64` for
//! finite-difference checks. Graphs are single-threaded; parallelism comes
//! from running one graph per sample against a shared [`ParamStore`].

pub mod gradcheck;
mod graph;
mod ops;
mod optim;
mod param;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use ops::spatial::{border_tap, half_pixel_tap, Tap};
pub use optim::AdamW;
pub use param::{Grads, Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
