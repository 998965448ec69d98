//! Minimal dense-tensor arithmetic with reverse-mode autodiff, Adam and a
//! splittable deterministic RNG.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{NumericsError, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use io::{encode_tensor, read_tensor, write_tensor, TENSOR_MAGIC, TENSOR_VERSION};
pub use rng::SeededRng;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
