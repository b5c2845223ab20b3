//! Post-training quantization for toy video diffusion transformer blocks.
//!
//! The crate is `no_std` (with `alloc`). File formats, configuration and the
//! command line live in the companion `vdtq` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod attention;
pub mod distill;
pub mod engine;
pub mod error;
pub mod gptq;
pub mod linalg;
pub mod quant;
pub mod salience;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::Tensor;
