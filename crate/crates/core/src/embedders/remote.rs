//! OpenAI-compatible embeddings client.
//!
//! Request: `POST {base}/embeddings` with `{"input": [...], "model": name}`.
//! Response: `{"data": [{"embedding": [...], "index": i}, ...]}`, re-sorted
//! by `index`. Transient failures (429, 5xx, connection errors) are retried
//! with exponential backoff.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{check_batch, EmbedderDescriptor, EmbedderKind, EmbeddingCache, EmbeddingVector, QueryCounter};
use crate::embedders::Embedder;
use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "EMBED_API_KEY";
pub const API_BASE_ENV: &str = "EMBED_API_BASE_URL";

#[derive(Clone, Debug)]
pub struct RemoteEndpoint {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
}

impl RemoteEndpoint {
    /// Reads the base URL and key from `EMBED_API_BASE_URL` / `EMBED_API_KEY`.
    pub fn from_env(model: impl Into<String>) -> Result<Self> {
        let base_url = std::env::var(API_BASE_ENV)
            .map_err(|_| Error::config(format!("{API_BASE_ENV} is not set")))?;
        Ok(Self {
            base_url,
            api_key: std::env::var(API_KEY_ENV).ok(),
            model: model.into(),
        })
    }

    fn url(&self) -> String {
        format!("{}/embeddings", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt.saturating_sub(1));
        self.initial_delay.saturating_mul(factor).min(self.max_delay)
    }
}

#[derive(Debug, Default)]
pub struct RemoteStats {
    /// HTTP requests sent, including retries.
    pub attempts: AtomicU64,
    pub cache_hits: AtomicU64,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    input: &'a [String],
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
    index: usize,
}

enum Failure {
    Transient(String),
    Fatal(Error),
}

pub struct RemoteEmbedder {
    endpoint: RemoteEndpoint,
    descriptor: EmbedderDescriptor,
    http: reqwest::blocking::Client,
    retry: RetryPolicy,
    batch_size: usize,
    max_in_flight: usize,
    cache: Option<Arc<EmbeddingCache>>,
    stats: Arc<RemoteStats>,
    counter: QueryCounter,
}

impl RemoteEmbedder {
    pub fn new(endpoint: RemoteEndpoint, dimension: usize, unit_norm: bool) -> Result<Self> {
        let descriptor = EmbedderDescriptor {
            model_id: format!("remote:{}", endpoint.model),
            dimension,
            unit_norm,
            max_input_tokens: 8191,
            kind: EmbedderKind::RemoteApi,
            empty_substitute: Some(" .".to_string()),
        };
        descriptor.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| Error::Transport(format!("building HTTP client: {e}")))?;
        Ok(Self {
            endpoint,
            descriptor,
            http,
            retry: RetryPolicy::default(),
            batch_size: 128,
            max_in_flight: 4,
            cache: None,
            stats: Arc::default(),
            counter: QueryCounter::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_cache(mut self, cache: Arc<EmbeddingCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_batching(mut self, batch_size: usize, max_in_flight: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self.max_in_flight = max_in_flight.max(1);
        self
    }

    pub fn stats(&self) -> &RemoteStats {
        &self.stats
    }

    /// Fetches embeddings for `texts`, serving cached ones locally and
    /// writing fresh ones through the cache.
    pub fn fetch_remote_embeddings(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        check_batch(texts)?;
        let mut out: Vec<Option<EmbeddingVector>> = match &self.cache {
            Some(cache) => texts.iter().map(|t| cache.get(t)).collect(),
            None => vec![None; texts.len()],
        };
        let hits = out.iter().filter(|o| o.is_some()).count();
        self.stats.cache_hits.fetch_add(hits as u64, Ordering::Relaxed);

        let mut misses: Vec<String> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for (t, o) in texts.iter().zip(&out) {
            if o.is_none() && !slot.contains_key(t.as_str()) {
                slot.insert(t.as_str(), misses.len());
                misses.push(t.clone());
            }
        }
        if misses.is_empty() {
            return Ok(out.into_iter().map(|o| o.expect("all hits")).collect());
        }

        let chunks: Vec<&[String]> = misses.chunks(self.batch_size).collect();
        let mut fresh: Vec<EmbeddingVector> = Vec::with_capacity(misses.len());
        for group in chunks.chunks(self.max_in_flight) {
            let results: Vec<Result<Vec<EmbeddingVector>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = group
                    .iter()
                    .map(|chunk| scope.spawn(move || self.request_with_retry(chunk)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("request thread panicked"))
                    .collect()
            });
            for r in results {
                fresh.extend(r?);
            }
        }
        if let Some(cache) = &self.cache {
            for (text, vector) in misses.iter().zip(&fresh) {
                cache.insert(text, vector)?;
            }
            cache.flush()?;
        }
        for (t, o) in texts.iter().zip(out.iter_mut()) {
            if o.is_none() {
                *o = Some(fresh[slot[t.as_str()]].clone());
            }
        }
        Ok(out.into_iter().map(|o| o.expect("filled")).collect())
    }

    fn request_with_retry(&self, chunk: &[String]) -> Result<Vec<EmbeddingVector>> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.stats.attempts.fetch_add(1, Ordering::Relaxed);
            match self.request(chunk) {
                Ok(v) => {
                    tracing::debug!(attempt, n = chunk.len(), "embedding request succeeded");
                    return Ok(v);
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) => {
                    tracing::warn!(attempt, max = self.retry.max_attempts, %msg, "embedding request failed");
                    if attempt >= self.retry.max_attempts {
                        return Err(Error::Transport(format!(
                            "giving up after {attempt} attempts: {msg}"
                        )));
                    }
                    std::thread::sleep(self.retry.delay(attempt));
                }
            }
        }
    }

    fn request(&self, chunk: &[String]) -> std::result::Result<Vec<EmbeddingVector>, Failure> {
        let body = EmbeddingRequest {
            input: chunk,
            model: &self.endpoint.model,
        };
        let mut req = self.http.post(self.endpoint.url()).json(&body);
        if let Some(key) = &self.endpoint.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| Failure::Transient(format!("request error: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Failure::Transient(format!("reading body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let excerpt: String = text.chars().take(200).collect();
            return Err(Failure::Fatal(Error::Transport(format!(
                "HTTP {status}: {excerpt}"
            ))));
        }
        let parsed: EmbeddingResponse = serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(Error::Transport(format!("malformed response: {e}"))))?;
        self.collect(chunk.len(), parsed).map_err(Failure::Fatal)
    }

    fn collect(&self, expected: usize, mut parsed: EmbeddingResponse) -> Result<Vec<EmbeddingVector>> {
        parsed.data.sort_by_key(|d| d.index);
        if parsed.data.len() != expected
            || parsed.data.iter().enumerate().any(|(i, d)| d.index != i)
        {
            return Err(Error::Transport(format!(
                "expected indices 0..{expected}, got {} items",
                parsed.data.len()
            )));
        }
        parsed
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.descriptor.dimension {
                    return Err(Error::contract(format!(
                        "remote returned {}-dim vector, descriptor says {}",
                        d.embedding.len(),
                        self.descriptor.dimension
                    )));
                }
                EmbeddingVector::new(d.embedding, self.descriptor.model_id.clone())
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn descriptor(&self) -> &EmbedderDescriptor {
        &self.descriptor
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let out = self.fetch_remote_embeddings(texts)?;
        self.counter.add(texts.len());
        Ok(out)
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

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            initial_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(p.delay(1), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(200));
        assert_eq!(p.delay(3), Duration::from_millis(350));
    }
}
