//! Minimal `f32` tensor engine: dense tensors, a differentiation tape with the
//! operations the generator needs, parameter storage and the Adam optimiser.

mod gemm;
mod graph;
mod params;
mod tensor;

pub use gemm::gemm;
pub use graph::{clamp_log_b, Graph, ParamGrads, TokenSource, Var, LOG_B_MAX, LOG_B_MIN};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck;
