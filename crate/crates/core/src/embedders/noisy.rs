use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Embedder, EmbedderDescriptor, EmbeddingVector, QueryCounter};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub lambda: f64,
    pub seed: u64,
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!(
                "noise lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// `φ(x) + λ·ε` with `ε` i.i.d. standard normal per coordinate.
///
/// Noise is drawn fresh on every call from a seed-keyed stream and added to
/// the raw embedding without re-normalization. With `λ = 0` the inner vectors
/// are returned untouched.
pub struct NoisyEmbedder {
    inner: Arc<dyn Embedder>,
    noise: NoiseConfig,
    descriptor: EmbedderDescriptor,
    rng: Mutex<ChaCha8Rng>,
    counter: QueryCounter,
}

impl NoisyEmbedder {
    pub fn new(inner: Arc<dyn Embedder>, noise: NoiseConfig) -> Result<Self> {
        noise.validate()?;
        let mut descriptor = inner.descriptor().clone();
        if noise.lambda > 0.0 {
            descriptor.model_id = format!("{}+noise{}", descriptor.model_id, noise.lambda);
            descriptor.unit_norm = false;
        }
        Ok(Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(noise.seed)),
            inner,
            noise,
            descriptor,
            counter: QueryCounter::default(),
        })
    }

    pub fn noise(&self) -> NoiseConfig {
        self.noise
    }
}

impl Embedder for NoisyEmbedder {
    fn descriptor(&self) -> &EmbedderDescriptor {
        &self.descriptor
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut out = self.inner.embed_batch(texts)?;
        self.counter.add(texts.len());
        if self.noise.lambda == 0.0 {
            return Ok(out);
        }
        let lambda = self.noise.lambda;
        let mut rng = self.rng.lock().expect("noise stream poisoned");
        for v in &mut out {
            for x in &mut v.values {
                let eps: f64 = StandardNormal.sample(&mut *rng);
                *x = (f64::from(*x) + lambda * eps) as f32;
            }
            v.model_id = self.descriptor.model_id.clone();
        }
        Ok(out)
    }

    fn queries(&self) -> u64 {
        self.counter.get()
    }

    fn for_job(self: Arc<Self>, job: u64) -> Arc<dyn Embedder> {
        let stream = self
            .noise
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(job.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
        Arc::new(NoisyEmbedder {
            inner: Arc::clone(&self.inner),
            noise: self.noise,
            descriptor: self.descriptor.clone(),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(stream)),
            counter: self.counter.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedders::SyntheticEmbedder;

    fn base() -> Arc<dyn Embedder> {
        Arc::new(SyntheticEmbedder::new(32, 1))
    }

    #[test]
    fn zero_lambda_is_bit_identical() {
        let inner = base();
        let noisy = NoisyEmbedder::new(Arc::clone(&inner), NoiseConfig { lambda: 0.0, seed: 9 }).unwrap();
        let texts = vec!["alpha beta".to_string(), "gamma".to_string()];
        assert_eq!(noisy.embed_batch(&texts).unwrap(), inner.embed_batch(&texts).unwrap());
        assert!(noisy.descriptor().unit_norm);
    }

    #[test]
    fn fresh_noise_per_call() {
        let noisy = NoisyEmbedder::new(base(), NoiseConfig { lambda: 0.1, seed: 9 }).unwrap();
        let texts = vec!["alpha".to_string()];
        let a = noisy.embed_batch(&texts).unwrap();
        let b = noisy.embed_batch(&texts).unwrap();
        assert_ne!(a[0].values, b[0].values);
        assert!(!noisy.descriptor().unit_norm);
    }

    #[test]
    fn half_normal_mean_of_perturbation() {
        let inner = base();
        let noisy = NoisyEmbedder::new(Arc::clone(&inner), NoiseConfig { lambda: 1.0, seed: 42 }).unwrap();
        let texts: Vec<String> = (0..10_000).map(|i| format!("w{}", i % 97)).collect();
        let clean = inner.embed_batch(&texts).unwrap();
        let perturbed = noisy.embed_batch(&texts).unwrap();
        let mut total = 0.0;
        let mut n = 0usize;
        for (c, p) in clean.iter().zip(&perturbed) {
            for (a, b) in c.values.iter().zip(&p.values) {
                total += f64::from(b - a).abs();
                n += 1;
            }
        }
        let expected = (2.0 / std::f64::consts::PI).sqrt();
        let mean = total / n as f64;
        assert!((mean - expected).abs() < 0.05 * expected, "mean {mean}");
    }

    #[test]
    fn job_views_are_reproducible() {
        let noisy = Arc::new(NoisyEmbedder::new(base(), NoiseConfig { lambda: 0.5, seed: 3 }).unwrap());
        let texts = vec!["alpha".to_string()];
        let a = Arc::clone(&noisy).for_job(5).embed_batch(&texts).unwrap();
        let b = Arc::clone(&noisy).for_job(5).embed_batch(&texts).unwrap();
        let c = Arc::clone(&noisy).for_job(6).embed_batch(&texts).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(noisy.queries(), 3);
    }

    #[test]
    fn negative_lambda_rejected() {
        assert!(NoisyEmbedder::new(base(), NoiseConfig { lambda: -1.0, seed: 0 }).is_err());
    }
}
