//! Draft-and-verify decoding on one int4 model run at two activation precisions.
//!
//! One int4 group-quantized model runs in two execution modes. The
//! low-precision mode (activations fake-quantized to int4) drafts tokens
//! cheaply; the high-precision mode (activations kept in f32) verifies them
//! in a single pass and overwrites the drafted KV entries with its own. With
//! greedy acceptance the output is token-identical to plain high-precision
//! greedy decoding.

pub mod costmodel;
pub mod error;
pub mod init;
pub mod model;
pub mod numerics;
pub mod quant;
pub mod serving;
pub mod specdec;
pub mod storage;

pub use error::{Error, Result};

/// Largest supported draft length.
pub const GAMMA_MAX: usize = 7;

/// Draft length used when none is given.
pub const DEFAULT_GAMMA: usize = 3;

/// Quantization group size used when none is given.
pub const DEFAULT_GROUP_SIZE: usize = 128;
