//! Mammography classification toolkit: a small reverse-mode autodiff engine,
//! seven image classifiers, contrast enhancements, attribution methods,
//! evaluation metrics and a weighted-voting ensemble.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`). The aliases at
//! the crate root fix the storage type to `f32`, which is what training and
//! the command line use; `f64` instantiations serve as reference oracles.

pub mod data;
pub mod enhance;
pub mod ensemble;
pub mod grid;
pub mod eval;
pub mod image;
pub mod models;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod xai;

pub use data::{Dataset, Label, LabeledImage};
pub use enhance::EnhancementKind;
pub use image::ImageGray;
pub use models::{ModelConfig, ModelKind};
pub use scalar::Scalar;
pub use tensor::{BackwardRule, GradientMap as GenericGradientMap, Primitive, TensorError, Var};

pub type Tensor = tensor::Tensor<f32>;
pub type Graph = tensor::Graph<f32>;
pub type GradientMap = tensor::GradientMap<f32>;
pub type Model = models::Model<f32>;
