pub mod bits;
pub mod bitstream;
pub mod cascade;
pub mod codec;
pub mod config;
pub mod entropy;
pub mod error;
pub mod framing;
pub mod kernels;
pub mod lpc;
pub mod mel;
pub mod module;
pub mod quantizer;
pub mod real;
pub mod synth;
pub mod train;

pub use error::{CmrlError, Result};
