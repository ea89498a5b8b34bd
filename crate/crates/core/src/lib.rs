//! Reconstructing text from dense text embeddings.
//!
//! A base inverter proposes an initial hypothesis from an embedding; a
//! corrector repeatedly edits the hypothesis, conditioned on the target
//! embedding, the hypothesis, and the hypothesis' own re-embedding. Search
//! runs over whole sequences, keeping candidates only when they move closer
//! to the target in cosine similarity.

pub mod corpus;
pub mod defense;
pub mod embedders;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod models;
pub mod plot;
pub mod tokenizer;

pub use error::{Error, Result};
