pub mod attacks;
pub mod data;
pub mod dp;
pub mod error;
pub mod harness;
pub mod labelspace;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod verifier;
pub mod watermark;

pub use error::{Error, Result};
pub use tensor::TensorF64;
