//! Dense tensors, reverse-mode gradients, AdamW and checkpoint I/O.

pub mod checkpoint;
pub(crate) mod gemm;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{Gradients, Graph, Mode, ParamId, ParamStore, Var};
pub use optim::AdamW;
pub use tensor::Tensor;
