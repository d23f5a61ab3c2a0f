//! Speculative decoding on toy transformers with a verification pass that
//! can be sparsified along attention (block retrieval with cross-layer
//! reuse), feed-forward channels and MoE experts.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernels`]: matrices, dot products and FLOP counters.
//! - [`model`]: the toy transformer, KV cache and verification sessions.
//! - [`specdec`]: drafting, lossless acceptance and the decode loop.
//! - [`sparse_attention`], [`retrieval_reuse`], [`sparse_ffn`],
//!   [`sparse_moe`]: the three sparsity dimensions and their calibration.
//! - [`flops`]: the analytical cost model and counter reconciliation.
//! - [`harness`]: experiment files and the commands behind the binary.

pub mod error;
pub mod flops;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod retrieval_reuse;
pub mod rng;
pub mod sparse_attention;
pub mod sparse_ffn;
pub mod sparse_moe;
pub mod specdec;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Session, SparsityPlan, TokenId};
pub use rng::Rng;
pub use specdec::{decode, DecodeConfig, Decoder, DraftMode, DraftTree};
