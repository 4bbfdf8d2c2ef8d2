//! Dense tensors with tape-based reverse-mode differentiation, plus the small
//! set of layers, the optimizer and the checkpoint format used by the
//! MFF-EINV2 network.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
pub mod ops;
pub mod optim;
mod reduce;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::attention::AttentionWeights;
pub use ops::conv::ConvSpec;
pub use ops::norm::{BatchNormMode, BatchNormOutput, BN_EPS, LN_EPS};
pub use ops::pool::PoolMode;
pub use scalar::Scalar;
pub use tensor::Tensor;
