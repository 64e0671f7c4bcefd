//! Block floating-point quantization toolkit and a functional, cycle-approximate
//! simulator of a MatMul accelerator that switches between Q2_K and Q3_K
//! weights at runtime.
//!
//! Layout:
//! - [`codec`]: bit-exact Q2_K / Q3_K / Q8_K superblocks.
//! - [`kernels`]: fp32 oracle, fused quantized dot products and MatMuls.
//! - [`isa`]: the opcode stream exchanged between driver and accelerator.
//! - [`driver`]: output-stationary tiling and program generation.
//! - [`sim`]: instruction decoder, data loader, scheduler and super block processor.
//! - [`gguf`]: minimal GGUF reader/writer.

pub mod codec;
pub mod driver;
pub mod error;
pub mod gguf;
pub mod isa;
pub mod kernels;
pub mod par;
pub mod sim;

pub use error::{Error, Result};
pub use par::Exec;
