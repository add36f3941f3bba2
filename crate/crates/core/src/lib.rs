//! Conditional diffusion imputation for multichannel time series, with
//! mixture-of-experts convolution blocks and a CPU autodiff tape.

pub mod backbone;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod kshot_theorem;
pub mod masking;
pub mod metrics;
pub mod moe_blocks;
pub mod rng;
pub mod tensor_core;

pub use error::{Error, Result};
pub use tensor_core::Tensor;
