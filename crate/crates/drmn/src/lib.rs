//! Conversation generation with a deep reading memory over similar dialogues.
//!
//! The pipeline: a JSONL corpus of role-tagged conversations is indexed with
//! BM25; for every training example the nearest past conversations are
//! retrieved and reranked; a hierarchical Bi-LSTM encoder represents the
//! target context; an iterative attention recurrence distills the retrieved
//! conversations into a shared-memory vector; a pointer-generator decoder
//! mixes vocabulary generation with copying from both the context and the
//! retrieved conversations. Everything runs on a 64-bit tape autodiff so
//! gradients are exact and checkable against finite differences.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
