pub mod captioner;
pub mod config;
pub mod datagen;
pub mod detector;
pub mod encoder;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod perceiver;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor32 = autograd::Tensor<f32>;
pub type Tensor64 = autograd::Tensor<f64>;
pub type ParamStore32 = autograd::ParamStore<f32>;
pub type ParamStore64 = autograd::ParamStore<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
pub type Trained32 = trainer::Trained<f32>;
pub type Trained64 = trainer::Trained<f64>;
