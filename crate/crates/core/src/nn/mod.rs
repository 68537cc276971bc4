//! Layers built on the autodiff tape.

mod batchnorm;
mod conv;
mod init;
mod mask;

pub use batchnorm::BatchNorm2d;
pub use conv::{Conv2d, PartialConv2d};
pub use init::Initializer;
pub use mask::RegionMask;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Whether batchnorm layers use batch statistics (and update running
/// statistics) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel spatial mean, (N,C,H,W) -> (N,C,1,1).
pub fn adaptive_avg_pool<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.global_avg_pool(x)
}

/// Per-channel mean restricted to locations where `mask` (N,1,H,W) is set.
pub fn masked_adaptive_avg_pool<T: Scalar>(g: &mut Graph<T>, x: Var, mask: &Tensor<T>) -> Result<Var> {
    g.masked_avg_pool(x, mask)
}
