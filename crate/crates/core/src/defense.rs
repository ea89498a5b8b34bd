//! Gaussian-noise defense: how much retrieval quality survives a noise
//! level that degrades inversion.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, InversionDataset};
use crate::embedders::{cosine_similarity, embed_texts, Embedder, EmbeddingVector, NoiseConfig, NoisyEmbedder};
use crate::error::{Error, Result};
use crate::inference::InversionMethod;
use crate::metrics::{evaluate_targets, EvalOptions, ReconstructionReport};
use crate::plot::{xy_chart, Mark, Series};
use crate::tokenizer::WordTokenizer;

/// Noise levels swept by default.
pub const DEFAULT_LAMBDAS: [f64; 5] = [0.0, 0.001, 0.01, 0.1, 1.0];

/// Correction rounds used by default when attacking noised embeddings.
pub const DEFAULT_DEFENSE_ROUNDS: usize = 10;

const NDCG_DEPTH: usize = 10;

/// NDCG@10 with linear gains and log2 discounts. An empty relevance map scores 0.
pub fn ndcg_at_10(ranked: &[String], relevance: &BTreeMap<String, f64>) -> Result<f64> {
    let mut seen = HashSet::new();
    if let Some(dup) = ranked.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::contract(format!("document {dup} ranked twice")));
    }
    if relevance.is_empty() {
        tracing::warn!("query without relevance judgements scores 0");
        return Ok(0.0);
    }
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(NDCG_DEPTH)
        .enumerate()
        .map(|(i, id)| relevance.get(id).copied().unwrap_or(0.0) * discount(i))
        .sum();
    let mut gains: Vec<f64> = relevance.values().copied().collect();
    gains.sort_by(|a, b| b.total_cmp(a));
    let ideal: f64 = gains.iter().take(NDCG_DEPTH).enumerate().map(|(i, g)| g * discount(i)).sum();
    Ok(if ideal > 0.0 { (dcg / ideal).clamp(0.0, 1.0) } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub text: String,
    /// Relevant doc ids with their gain levels.
    pub relevant: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTask {
    pub name: String,
    pub queries: Vec<RetrievalQuery>,
    pub corpus: Vec<Document>,
}

impl RetrievalTask {
    pub fn validate(&self) -> Result<()> {
        if self.queries.is_empty() {
            return Err(Error::config(format!("retrieval task {} has no queries", self.name)));
        }
        let ids: HashSet<&str> = self.corpus.iter().map(|d| d.doc_id.as_str()).collect();
        for q in &self.queries {
            if let Some(missing) = q.relevant.keys().find(|id| !ids.contains(id.as_str())) {
                return Err(Error::config(format!(
                    "retrieval task {} judges unknown document {missing}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Every document is its own query with a single relevant hit.
    pub fn self_retrieval(name: &str, corpus: &[Document]) -> Self {
        Self {
            name: name.to_string(),
            queries: corpus
                .iter()
                .map(|d| RetrievalQuery {
                    text: d.text.clone(),
                    relevant: BTreeMap::from([(d.doc_id.clone(), 1.0)]),
                })
                .collect(),
            corpus: corpus.to_vec(),
        }
    }
}

/// Ranks `corpus` by cosine to `query`, descending; ties go to the smaller doc id.
pub fn rank(query: &EmbeddingVector, corpus: &[(String, EmbeddingVector)]) -> Result<Vec<String>> {
    let mut scored: Vec<(f64, &str)> = corpus
        .iter()
        .map(|(id, v)| Ok((cosine_similarity(query, v)?, id.as_str())))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored.into_iter().map(|(_, id)| id.to_string()).collect())
}

/// Embeds the corpus once and every query through `embedder`, then
/// averages per-query NDCG@10.
pub fn run_retrieval(embedder: &dyn Embedder, task: &RetrievalTask) -> Result<f64> {
    task.validate()?;
    let texts: Vec<String> = task.corpus.iter().map(|d| d.text.clone()).collect();
    let corpus: Vec<(String, EmbeddingVector)> = task
        .corpus
        .iter()
        .map(|d| d.doc_id.clone())
        .zip(embed_texts(embedder, &texts)?)
        .collect();
    let queries: Vec<String> = task.queries.iter().map(|q| q.text.clone()).collect();
    let query_vectors = embed_texts(embedder, &queries)?;
    let mut total = 0.0;
    for (q, v) in task.queries.iter().zip(&query_vectors) {
        total += ndcg_at_10(&rank(v, &corpus)?, &q.relevant)?;
    }
    Ok(total / task.queries.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub lambda: f64,
    pub ndcg_at_10: f64,
    pub reconstruction: ReconstructionReport,
}

/// Stream id reserved for re-embedding evaluation targets under noise.
const TARGET_STREAM: u64 = u64::MAX;

/// For each λ: noise the embedder, re-embed the evaluation targets through
/// it, attack them with `method` (trained on clean embeddings), and run
/// retrieval through the same noised embedder.
#[allow(clippy::too_many_arguments)]
pub fn noise_sweep(
    clean: Arc<dyn Embedder>,
    lambdas: &[f64],
    noise_seed: u64,
    dataset: &InversionDataset,
    task: &RetrievalTask,
    method: &dyn InversionMethod,
    tokenizer: &WordTokenizer,
    options: &EvalOptions,
) -> Result<Vec<TradeoffPoint>> {
    if lambdas.is_empty() {
        return Err(Error::config("noise sweep needs at least one lambda"));
    }
    task.validate()?;
    let mut points = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let noisy: Arc<dyn Embedder> = Arc::new(NoisyEmbedder::new(
            clean.clone(),
            NoiseConfig {
                lambda,
                seed: noise_seed,
            },
        )?);
        let targets: Vec<EmbeddingVector> = if lambda == 0.0 {
            dataset.examples.iter().map(|e| e.target_embedding.clone()).collect()
        } else {
            let texts: Vec<String> = dataset.examples.iter().map(|e| e.tokens.text.clone()).collect();
            embed_texts(noisy.clone().for_job(TARGET_STREAM).as_ref(), &texts)?
        };
        let run = evaluate_targets(method, dataset, &targets, noisy.clone(), clean.as_ref(), tokenizer, options)?;
        let ndcg = run_retrieval(noisy.clone().for_job(TARGET_STREAM - 1).as_ref(), task)?;
        tracing::info!(lambda, ndcg, bleu = run.report.bleu, cos = run.report.cos, "sweep point");
        points.push(TradeoffPoint {
            lambda,
            ndcg_at_10: ndcg,
            reconstruction: run.report,
        });
    }
    Ok(points)
}

pub fn tradeoff_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from("lambda,ndcg,bleu,tf1,exact,cos\n");
    for p in points {
        let r = &p.reconstruction;
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            p.lambda, p.ndcg_at_10, r.bleu, r.token_f1, r.exact, r.cos
        );
    }
    out
}

/// Retrieval NDCG and reconstruction BLEU (both scaled to 0–1) against log10 λ;
/// λ = 0 is drawn at one decade below the smallest positive λ.
pub fn tradeoff_plot(points: &[TradeoffPoint]) -> String {
    let min_pos = points
        .iter()
        .map(|p| p.lambda)
        .filter(|l| *l > 0.0)
        .fold(f64::INFINITY, f64::min);
    let zero_at = if min_pos.is_finite() { min_pos.log10() - 1.0 } else { 0.0 };
    let x = |l: f64| if l > 0.0 { l.log10() } else { zero_at };
    let series = [
        Series {
            label: "retrieval NDCG@10".into(),
            points: points.iter().map(|p| (x(p.lambda), p.ndcg_at_10)).collect(),
        },
        Series {
            label: "reconstruction BLEU / 100".into(),
            points: points.iter().map(|p| (x(p.lambda), p.reconstruction.bleu / 100.0)).collect(),
        },
        Series {
            label: "reconstruction cosine".into(),
            points: points.iter().map(|p| (x(p.lambda), p.reconstruction.cos)).collect(),
        },
    ];
    xy_chart("Noise level trade-off", "log10 λ", "score", &series, Mark::Line)
}

pub fn write_tradeoff(dir: &Path, points: &[TradeoffPoint]) -> Result<()> {
    let csv = dir.join("tradeoff.csv");
    std::fs::write(&csv, tradeoff_csv(points)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("tradeoff.json");
    std::fs::write(&json, serde_json::to_string_pretty(points)?).map_err(|e| Error::io(&json, e))?;
    crate::plot::write_svg(&dir.join("tradeoff.svg"), &tradeoff_plot(points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedders::SyntheticEmbedder;

    fn rel(ids: &[(&str, f64)]) -> BTreeMap<String, f64> {
        ids.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn ndcg_fixtures() {
        let r = rel(&[("a", 1.0)]);
        assert_eq!(ndcg_at_10(&["a".into(), "b".into()], &r).unwrap(), 1.0);
        let v = ndcg_at_10(&["b".into(), "a".into()], &r).unwrap();
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_10(&["a".into()], &BTreeMap::new()).unwrap(), 0.0);
        assert!(ndcg_at_10(&["a".into(), "a".into()], &r).is_err());
    }

    #[test]
    fn relevant_doc_past_depth_scores_zero() {
        let ranked: Vec<String> = (0..11).map(|i| format!("d{i:02}")).collect();
        assert_eq!(ndcg_at_10(&ranked, &rel(&[("d10", 1.0)])).unwrap(), 0.0);
    }

    #[test]
    fn self_retrieval_is_perfect_without_noise() {
        let docs = crate::corpus::synthetic_corpus(50, 64, 1, 6, 1).unwrap();
        let task = RetrievalTask::self_retrieval("self", &docs);
        let emb = SyntheticEmbedder::new(32, 0);
        assert_eq!(run_retrieval(&emb, &task).unwrap(), 1.0);
    }

    #[test]
    fn unknown_judgement_rejected() {
        let mut task = RetrievalTask::self_retrieval("t", &[]);
        task.queries.push(RetrievalQuery {
            text: "x".into(),
            relevant: rel(&[("nope", 1.0)]),
        });
        assert!(task.validate().unwrap_err().is_config());
    }
}
