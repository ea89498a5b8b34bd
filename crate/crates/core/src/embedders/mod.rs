//! Black-box text embedders.
//!
//! An attacker only ever calls [`Embedder::embed_batch`]; no gradients or
//! internals are exposed. Implementations: a seeded synthetic bag-of-rows
//! embedder for desk-scale experiments, a word-table encoder loaded from
//! disk, an OpenAI-compatible HTTP client, and a Gaussian-noise wrapper.

mod cache;
mod noisy;
mod remote;
mod synthetic;
mod table;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::pre_tokenize;

pub use cache::{get_or_embed, CachedEmbedder, EmbeddingCache};
pub use noisy::{NoiseConfig, NoisyEmbedder};
pub use remote::{RemoteEmbedder, RemoteEndpoint, RemoteStats, RetryPolicy, API_BASE_ENV, API_KEY_ENV};
pub use synthetic::SyntheticEmbedder;
pub use table::TableEncoder;

/// Tolerance on the L2 norm of vectors from unit-norm embedders.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub model_id: String,
}

impl EmbeddingVector {
    /// Checks finiteness and, for non-empty `model_id`, nothing else.
    pub fn new(values: Vec<f32>, model_id: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("embedding has zero dimensions"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("embedding entry {i} is not finite")));
        }
        Ok(Self {
            values,
            model_id: model_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn zeros(dim: usize, model_id: impl Into<String>) -> Self {
        Self {
            values: vec![0.0; dim],
            model_id: model_id.into(),
        }
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &EmbeddingVector) -> Result<EmbeddingVector> {
        check_dims(self, other)?;
        Ok(EmbeddingVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
            model_id: self.model_id.clone(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    LocalEncoder,
    RemoteApi,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderDescriptor {
    pub model_id: String,
    pub dimension: usize,
    pub unit_norm: bool,
    pub max_input_tokens: usize,
    pub kind: EmbedderKind,
    /// Stand-in text embedded in place of the empty string, for embedders
    /// that reject empty input.
    #[serde(default)]
    pub empty_substitute: Option<String>,
}

impl EmbedderDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(Error::config("embedder dimension must be positive"));
        }
        if self.max_input_tokens == 0 {
            return Err(Error::config("embedder max_input_tokens must be positive"));
        }
        if self.model_id.is_empty() {
            return Err(Error::config("embedder model_id must be nonempty"));
        }
        Ok(())
    }
}

pub trait Embedder: Send + Sync {
    fn descriptor(&self) -> &EmbedderDescriptor;

    /// One vector per input text, in input order.
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    /// Number of texts this embedder has been asked to embed so far.
    fn queries(&self) -> u64;

    /// Independent view for one job. Stateless embedders return themselves;
    /// stochastic wrappers derive a per-job random stream so concurrent jobs
    /// stay reproducible.
    fn for_job(self: Arc<Self>, _job: u64) -> Arc<dyn Embedder>;
}

/// Counts embedding queries; shared between an embedder and its job views.
#[derive(Clone, Debug, Default)]
pub struct QueryCounter(Arc<AtomicU64>);

impl QueryCounter {
    pub fn add(&self, n: usize) {
        self.0.fetch_add(n as u64, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Embeds texts that may be empty, mapping `""` to the descriptor's
/// substitute. This is how φ(∅) and empty hypotheses are handled.
pub fn embed_texts(embedder: &dyn Embedder, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
    if texts.iter().all(|t| !t.trim().is_empty()) {
        return embedder.embed_batch(texts);
    }
    let substitute = embedder.descriptor().empty_substitute.clone().ok_or_else(|| {
        Error::contract(format!(
            "embedder {} rejects empty input and has no substitute",
            embedder.descriptor().model_id
        ))
    })?;
    let mapped: Vec<String> = texts
        .iter()
        .map(|t| {
            if t.trim().is_empty() {
                substitute.clone()
            } else {
                t.clone()
            }
        })
        .collect();
    embedder.embed_batch(&mapped)
}

pub fn embed_one(embedder: &dyn Embedder, text: &str) -> Result<EmbeddingVector> {
    let mut out = embed_texts(embedder, &[text.to_string()])?;
    Ok(out.pop().expect("one vector per input"))
}

pub(crate) fn check_batch(texts: &[String]) -> Result<()> {
    if texts.is_empty() {
        return Err(Error::contract("embedding batch is empty"));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::contract(format!("text {i} in embedding batch is empty")));
    }
    Ok(())
}

/// Pre-tokenized words of `text`, truncated to `max_tokens`. Truncation is
/// logged, not an error.
pub(crate) fn input_words<'a>(text: &'a str, max_tokens: usize, model_id: &str) -> Vec<&'a str> {
    let mut words = pre_tokenize(text);
    if words.len() > max_tokens {
        tracing::debug!(
            model_id,
            tokens = words.len(),
            max_tokens,
            "embedder input truncated"
        );
        words.truncate(max_tokens);
    }
    words
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Cosine of the angle between two embeddings, computed in f64.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine similarity of a zero vector"));
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec(), "t").unwrap()
    }

    #[test]
    fn cosine_identity_and_antipode() {
        let a = v(&[0.3, -1.2, 4.0]);
        let neg = v(&[-0.3, 1.2, -4.0]);
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert!((cosine_similarity(&a, &neg).unwrap() + 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_hand_value() {
        let c = cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 1.0])).unwrap();
        assert!((c - 0.7071).abs() < 1e-4);
    }

    #[test]
    fn cosine_rejects_bad_inputs() {
        assert!(matches!(
            cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0, 0.0])),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn rejects_non_finite_entries() {
        assert!(EmbeddingVector::new(vec![1.0, f32::NAN], "t").is_err());
    }

    proptest::proptest! {
        #[test]
        fn cosine_symmetric_and_bounded(
            a in proptest::collection::vec(-10.0f32..10.0, 8),
            b in proptest::collection::vec(-10.0f32..10.0, 8),
        ) {
            let (a, b) = (v(&a), v(&b));
            if a.norm() > 1e-3 && b.norm() > 1e-3 {
                let ab = cosine_similarity(&a, &b).unwrap();
                let ba = cosine_similarity(&b, &a).unwrap();
                proptest::prop_assert_eq!(ab, ba);
                proptest::prop_assert!(ab.abs() <= 1.0 + 1e-9);
            }
        }
    }
}
