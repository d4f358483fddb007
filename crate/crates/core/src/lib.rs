//! A small, fully deterministic implementation of an instruction-aware
//! embedding + reranking training recipe: hashed n-gram encoder, contrastive
//! loss with false-negative masking, yes/no pointwise reranker, slerp
//! checkpoint merging, data filtering/synthesis, and retrieval evaluation.

pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod merge;
pub mod numeric;
pub mod reranker;

pub use error::{Error, FormatError, Result};
pub use numeric::{Mat64, Seed, Vec64};
