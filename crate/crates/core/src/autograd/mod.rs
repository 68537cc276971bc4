//! Minimal reverse-mode automatic differentiation.

mod adam;
mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod params;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use gradcheck::{grad_check, CheckReport};
pub use graph::{CustomBackward, Graph, Var};
pub use kernels::conv_out_size;
pub use params::{ParamId, ParamStore};
