//! Phase-aware NVFP4 inference for a small decoder-only transformer.
//!
//! The prefill pass can run every linear projection as an emulated NVFP4
//! W4A4 GEMM while decoding stays in working precision (`f32`). The KV
//! cache is always written in working precision, so any prefill can feed
//! any decode, in-process or across a prefill/decode worker pair.

pub mod analysis;
pub mod cli;
pub mod disagg;
pub mod engine;
pub mod error;
pub mod formats;
pub mod model;
pub mod qgemm;
pub mod quant;
pub mod rng;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
