//! Versatile query-prompted segmentation.

pub mod archive;
pub mod clicks;
pub mod config;
pub mod dataio;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod mask;
pub mod model;
pub mod nn;
pub mod prompts;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Prediction, Step, Verse};
pub use prompts::Mode;

pub type Verse32 = Verse<f32>;
pub type Verse64 = Verse<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
