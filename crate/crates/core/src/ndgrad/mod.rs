//! Dense tensors with tape-based reverse-mode differentiation.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod params;
mod real;
pub mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{BufferId, ParamId, ParamStore, Session, StepGrads};
pub use real::{gemm, Real};
pub use tape::{Conv1dSpec, Gradients, Padding, Tape, Unary, Var};
pub use tensor::Tensor;
