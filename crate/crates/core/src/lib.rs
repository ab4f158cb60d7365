//! Block-diffusion discrete action policies at desk scale.
//!
//! Continuous action chunks are quantile-binned into tokens, a small
//! transformer is trained to denoise masked action blocks, and decoding runs
//! block by block with the prefix and finished blocks held in a KV cache.

pub mod codec;
pub mod corruption;
pub mod envbench;
pub mod error;
pub mod kv;
pub mod masks;
pub mod net;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
