//! Background-guided image harmonization on a small reverse-mode autodiff
//! engine.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Training
//! and the on-disk formats use `f32`; gradient checks use `f64`.

pub mod autograd;
pub mod data;
pub mod error;
pub mod extractor;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use extractor::{DomainCode, ExtractorConfig, ExtractorNet};
pub use generator::{GeneratorConfig, GeneratorNet};
pub use losses::{CodeQuadruple, LossConfig};
pub use model::{HarmonizationModel, ModelConfig};
pub use nn::RegionMask;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{Checkpoint, TrainConfig, Trainer};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type ParamStore32 = autograd::ParamStore<f32>;
pub type ParamStore64 = autograd::ParamStore<f64>;
pub type DomainCode32 = DomainCode<f32>;
pub type Model32 = HarmonizationModel<f32>;
pub type Model64 = HarmonizationModel<f64>;
