//! End-to-end speech-text embeddings for retrieval.
//!
//! A speech encoder and a text encoder feed a shared scaling head so that
//! spoken queries and written documents land in one cosine-similarity space.
//! Training runs in two stages: pooled-feature alignment, then task-dispatched
//! contrastive fine-tuning. The crate also carries the comparison arms (a
//! cascaded CTC recognizer plus text retrieval, CTC alignment, and
//! projection into text space), the corpus filters, and the evaluation and
//! latency harness.

pub mod adapter;
pub mod config;
pub mod error;
pub mod filter;
pub mod gradcheck;
pub mod gradsuite;
pub mod layers;
pub mod ops;
pub mod loss;
pub mod model;
pub mod retrieval;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Param, Parameterized, Real, Tensor2D};
