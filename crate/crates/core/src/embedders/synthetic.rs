use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{check_batch, input_words, Embedder, EmbedderDescriptor, EmbedderKind, EmbeddingVector, QueryCounter};
use crate::error::Result;

/// Seeded bag-of-rows embedder.
///
/// Every word gets a fixed standard-normal row in R^d, derived from the
/// model seed and the word itself, so the vocabulary is open. A text embeds
/// to the L2-normalized mean of its word rows. Word order does not matter.
pub struct SyntheticEmbedder {
    descriptor: EmbedderDescriptor,
    seed: u64,
    rows: RwLock<HashMap<String, Arc<[f64]>>>,
    counter: QueryCounter,
}

impl SyntheticEmbedder {
    pub const DEFAULT_MAX_INPUT_TOKENS: usize = 512;

    pub fn new(dimension: usize, seed: u64) -> Self {
        Self {
            descriptor: EmbedderDescriptor {
                model_id: format!("synthetic-d{dimension}-s{seed}"),
                dimension,
                unit_norm: true,
                max_input_tokens: Self::DEFAULT_MAX_INPUT_TOKENS,
                kind: EmbedderKind::Synthetic,
                empty_substitute: Some("<pad>".to_string()),
            },
            seed,
            rows: RwLock::new(HashMap::new()),
            counter: QueryCounter::default(),
        }
    }

    pub fn with_max_input_tokens(mut self, max_input_tokens: usize) -> Self {
        self.descriptor.max_input_tokens = max_input_tokens;
        self
    }

    /// The fixed row assigned to `word`.
    pub fn row(&self, word: &str) -> Arc<[f64]> {
        if let Some(row) = self.rows.read().expect("row cache poisoned").get(word) {
            return Arc::clone(row);
        }
        let row = synthetic_row(self.seed, word, self.descriptor.dimension);
        self.rows
            .write()
            .expect("row cache poisoned")
            .entry(word.to_string())
            .or_insert(row)
            .clone()
    }

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector> {
        let d = self.descriptor.dimension;
        let words = input_words(text, self.descriptor.max_input_tokens, &self.descriptor.model_id);
        // Text with no word characters at all (e.g. only whitespace after
        // trimming) falls back to the substitute word.
        let words = if words.is_empty() { vec!["<pad>"] } else { words };
        let mut acc = vec![0.0f64; d];
        for w in &words {
            for (a, r) in acc.iter_mut().zip(self.row(w).iter()) {
                *a += r;
            }
        }
        let n = words.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        EmbeddingVector::new(
            acc.iter().map(|a| (a / norm) as f32).collect(),
            self.descriptor.model_id.clone(),
        )
    }
}

pub(crate) fn synthetic_row(seed: u64, word: &str, dim: usize) -> Arc<[f64]> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(word.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

impl Embedder for SyntheticEmbedder {
    fn descriptor(&self) -> &EmbedderDescriptor {
        &self.descriptor
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        check_batch(texts)?;
        self.counter.add(texts.len());
        texts.iter().map(|t| self.embed_one(t)).collect()
    }

    fn queries(&self) -> u64 {
        self.counter.get()
    }

    fn for_job(self: Arc<Self>, _job: u64) -> Arc<dyn Embedder> {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedders::UNIT_NORM_TOLERANCE;

    #[test]
    fn single_token_shape_and_norm() {
        let emb = SyntheticEmbedder::new(32, 7);
        let out = emb.embed_batch(&["a".to_string()]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].dim(), 32);
        assert!((out[0].norm() - 1.0).abs() < UNIT_NORM_TOLERANCE);
    }

    #[test]
    fn deterministic_across_instances() {
        let a = SyntheticEmbedder::new(16, 3).embed_batch(&["x y z".into()]).unwrap();
        let b = SyntheticEmbedder::new(16, 3).embed_batch(&["x y z".into()]).unwrap();
        assert_eq!(a, b);
        let c = SyntheticEmbedder::new(16, 4).embed_batch(&["x y z".into()]).unwrap();
        assert_ne!(a[0].values, c[0].values);
    }

    #[test]
    fn rejects_empty_batch_and_text() {
        let emb = SyntheticEmbedder::new(8, 0);
        assert!(emb.embed_batch(&[]).is_err());
        assert!(emb.embed_batch(&["".into()]).is_err());
    }

    #[test]
    fn long_inputs_are_truncated() {
        let emb = SyntheticEmbedder::new(8, 0).with_max_input_tokens(2);
        let out = emb.embed_batch(&["a b".into(), "a b c d".into()]).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn counts_queries() {
        let emb = SyntheticEmbedder::new(8, 0);
        emb.embed_batch(&["a".into(), "b".into()]).unwrap();
        assert_eq!(emb.queries(), 2);
    }
}
