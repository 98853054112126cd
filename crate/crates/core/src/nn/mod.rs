//! Minimal differentiable kernel: dense tensors, a reverse-mode tape and the
//! layers the encoder and the MDFN head are built from.

pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod scalar;
mod tensor;


pub use graph::{Graph, Var, LOG_CLAMP};
pub use params::{Gradients, Initializer, ParamRegistry};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;
