//! Algebraic layer recovery for feed-forward CNNs.
//!
//! The crate models a small family of inference networks (convolution, bias,
//! dense, ReLU, max-pooling, flatten), detects parameter corruption with cheap
//! stored invariants, and recovers corrupted layers by solving the linear
//! systems that relate layer inputs, outputs, and parameters. A SECDED memory
//! model and bit-level fault injectors support end-to-end experiments.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fault;
pub mod linalg;
pub mod milr;
pub mod network;
pub mod rng;
pub mod secded;
pub mod tensor;
pub mod weights;

pub use error::{MilrError, Result};
pub use tensor::{Dtype, Tensor};
