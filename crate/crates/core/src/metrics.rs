//! Reconstruction metrics and the dataset evaluation harness.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::InversionDataset;
use crate::embedders::{cosine_similarity, embed_texts, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::inference::{CorrectionTrace, InversionMethod};
use crate::plot::{bar_chart, xy_chart, Mark, Series};
use crate::tokenizer::{pre_tokenize, WordTokenizer};

/// Name of the BLEU variant computed by [`bleu`]; stored in every report.
pub const BLEU_VARIANT: &str = "bleu4-add1-orders2to4-brevity";

/// Predicted-token counts exclude padding and sequence markers.
pub const PRED_TOKEN_CONVENTION: &str = "non-special tokens";

fn ngram_counts<'a>(tokens: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU (0–100) over word tokens: clipped n-gram precision up to
/// 4-grams, add-one smoothing on orders 2–4, standard brevity penalty.
pub fn bleu(pred: &str, reference: &str) -> f64 {
    bleu_tokens(&pre_tokenize(pred), &pre_tokenize(reference))
}

pub fn bleu_tokens(pred: &[&str], reference: &[&str]) -> f64 {
    if pred.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let p = ngram_counts(pred, n);
        let r = ngram_counts(reference, n);
        let total: usize = p.values().sum();
        let matched: usize = p.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
        let precision = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += precision.ln();
    }
    let (c, r) = (pred.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (100.0 * bp * (log_sum / 4.0).exp()).clamp(0.0, 100.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum F1Mode {
    /// Clipped counts, so repeated tokens must be recovered as often as they occur.
    #[default]
    Multiset,
    Set,
}

/// Token-level F1 (0–100). Both empty is a perfect score; one empty scores 0.
pub fn token_f1(pred: &str, reference: &str, mode: F1Mode) -> f64 {
    let p = pre_tokenize(pred);
    let r = pre_tokenize(reference);
    match (p.is_empty(), r.is_empty()) {
        (true, true) => return 100.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let (overlap, np, nr) = match mode {
        F1Mode::Set => {
            let ps: HashSet<&str> = p.into_iter().collect();
            let rs: HashSet<&str> = r.into_iter().collect();
            (ps.intersection(&rs).count(), ps.len(), rs.len())
        }
        F1Mode::Multiset => {
            let mut rc: HashMap<&str, usize> = HashMap::new();
            for t in &r {
                *rc.entry(t).or_insert(0) += 1;
            }
            let mut overlap = 0;
            for t in &p {
                if let Some(c) = rc.get_mut(t) {
                    if *c > 0 {
                        *c -= 1;
                        overlap += 1;
                    }
                }
            }
            (overlap, p.len(), r.len())
        }
    };
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / np as f64;
    let recall = overlap as f64 / nr as f64;
    100.0 * 2.0 * precision * recall / (precision + recall)
}

/// Equality of the tokenizer-canonical forms of both strings.
pub fn exact_match(tokenizer: &WordTokenizer, pred: &str, reference: &str) -> bool {
    tokenizer.canonicalize(pred) == tokenizer.canonicalize(reference)
}

fn contains_run(haystack: &[&str], needle: &[&str]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NameRecoveryReport {
    pub first: f64,
    pub last: f64,
    pub full: f64,
    pub names: usize,
    /// Examples without name annotations.
    pub skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<ReconstructionReport>,
}

/// Percentages of first, last, and full names found in the predictions.
/// A name part counts when its tokens occur contiguously anywhere in the
/// prediction; the full name needs `first last` contiguously.
pub fn name_recovery(preds: &[String], names: &[Option<Vec<(String, String)>>]) -> Result<NameRecoveryReport> {
    if preds.len() != names.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} references",
            preds.len(),
            names.len()
        )));
    }
    let (mut first, mut last, mut full, mut total, mut skipped) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (pred, spans) in preds.iter().zip(names) {
        let spans = match spans {
            Some(s) if !s.is_empty() => s,
            _ => {
                skipped += 1;
                continue;
            }
        };
        let tokens = pre_tokenize(pred);
        for (f, l) in spans {
            let ft = pre_tokenize(f);
            let lt = pre_tokenize(l);
            total += 1;
            first += contains_run(&tokens, &ft) as usize;
            last += contains_run(&tokens, &lt) as usize;
            let both: Vec<&str> = ft.iter().chain(lt.iter()).copied().collect();
            full += contains_run(&tokens, &both) as usize;
        }
    }
    let pct = |k: usize| if total == 0 { 0.0 } else { 100.0 * k as f64 / total as f64 };
    Ok(NameRecoveryReport {
        first: pct(first),
        last: pct(last),
        full: pct(full),
        names: total,
        skipped,
        reconstruction: None,
    })
}

/// Word occurrence counts over a corpus, using the metric tokenization.
pub fn word_counts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for t in texts {
        for w in pre_tokenize(t) {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// Bucket 0 holds unseen words; bucket k ≥ 1 holds counts in [10^(k-1), 10^k).
pub fn frequency_bucket(count: u64) -> usize {
    if count == 0 {
        0
    } else {
        count.ilog10() as usize + 1
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBucket {
    pub bucket: usize,
    pub min_count: u64,
    pub max_count: u64,
    pub correct: usize,
    pub incorrect: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBucketReport {
    pub buckets: Vec<FrequencyBucket>,
}

impl FrequencyBucketReport {
    /// Bucket 0: reference words never seen in training.
    pub fn unseen(&self) -> &FrequencyBucket {
        &self.buckets[0]
    }

    pub fn plot(&self) -> String {
        let labels: Vec<String> = self
            .buckets
            .iter()
            .map(|b| if b.bucket == 0 { "unseen".to_string() } else { format!("≥{}", b.min_count) })
            .collect();
        bar_chart(
            "Reference words by training frequency",
            "training count",
            "words",
            &labels,
            &[
                ("correct".into(), self.buckets.iter().map(|b| b.correct as f64).collect()),
                ("incorrect".into(), self.buckets.iter().map(|b| b.incorrect as f64).collect()),
            ],
        )
    }
}

/// Each reference word occurrence is correct iff the word appears in the paired prediction.
pub fn frequency_bucketed_accuracy(
    preds: &[String],
    refs: &[String],
    train_counts: &HashMap<String, u64>,
) -> Result<FrequencyBucketReport> {
    if preds.len() != refs.len() {
        return Err(Error::contract(format!("{} predictions for {} references", preds.len(), refs.len())));
    }
    let mut buckets: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    buckets.insert(0, (0, 0));
    for (p, r) in preds.iter().zip(refs) {
        let predicted: HashSet<&str> = pre_tokenize(p).into_iter().collect();
        for w in pre_tokenize(r) {
            let b = frequency_bucket(train_counts.get(w).copied().unwrap_or(0));
            let e = buckets.entry(b).or_insert((0, 0));
            if predicted.contains(w) {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
        }
    }
    let max = *buckets.keys().last().unwrap_or(&0);
    Ok(FrequencyBucketReport {
        buckets: (0..=max)
            .map(|b| {
                let (correct, incorrect) = buckets.get(&b).copied().unwrap_or((0, 0));
                let (min_count, max_count) = if b == 0 {
                    (0, 0)
                } else {
                    (10u64.pow(b as u32 - 1), 10u64.pow(b as u32) - 1)
                };
                FrequencyBucket {
                    bucket: b,
                    min_count,
                    max_count,
                    correct,
                    incorrect,
                }
            })
            .collect(),
    })
}

/// Per-example evaluation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub doc_id: String,
    pub reference: String,
    pub prediction: String,
    pub true_tokens: usize,
    pub pred_tokens: usize,
    pub bleu: f64,
    pub token_f1: f64,
    pub exact: bool,
    pub cos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleFailure {
    pub doc_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub dataset: String,
    pub method: String,
    pub bleu_variant: String,
    pub f1_mode: F1Mode,
    pub pred_token_convention: String,
    pub examples: usize,
    pub mean_true_tokens: f64,
    pub mean_pred_tokens: f64,
    pub bleu: f64,
    pub token_f1: f64,
    pub exact: f64,
    pub cos: f64,
    pub failures: Vec<ExampleFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub records: Option<Vec<ExampleRecord>>,
}

/// Published full-scale results, shown for orientation next to local runs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub dataset: &'static str,
    pub method: &'static str,
    pub bleu: f64,
    pub exact: f64,
}

pub const REFERENCE_ROWS: &[ReferenceRow] = &[
    ReferenceRow {
        dataset: "nq-32 (gtr-base)",
        method: "50 steps + sbeam",
        bleu: 97.3,
        exact: 92.0,
    },
    ReferenceRow {
        dataset: "msmarco-32 (openai ada-002)",
        method: "50 steps + sbeam",
        bleu: 83.4,
        exact: 60.9,
    },
];

impl ReconstructionReport {
    /// Aggregates per-example records. Sums run in doc-id order so the
    /// result does not depend on the order of `records`.
    pub fn aggregate(
        dataset: &str,
        method: &str,
        f1_mode: F1Mode,
        mut records: Vec<ExampleRecord>,
        mut failures: Vec<ExampleFailure>,
        keep_records: bool,
    ) -> Self {
        records.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        failures.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        let n = records.len();
        let mean = |f: &dyn Fn(&ExampleRecord) -> f64| {
            if n == 0 {
                0.0
            } else {
                records.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            dataset: dataset.to_string(),
            method: method.to_string(),
            bleu_variant: BLEU_VARIANT.to_string(),
            f1_mode,
            pred_token_convention: PRED_TOKEN_CONVENTION.to_string(),
            examples: n,
            mean_true_tokens: mean(&|r| r.true_tokens as f64),
            mean_pred_tokens: mean(&|r| r.pred_tokens as f64),
            bleu: mean(&|r| r.bleu),
            token_f1: mean(&|r| r.token_f1),
            exact: mean(&|r| if r.exact { 100.0 } else { 0.0 }),
            cos: mean(&|r| r.cos),
            failures,
            records: keep_records.then_some(records),
        }
    }

    /// Fixed-width table of this report followed by the reference rows.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:<36} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
            "dataset", "method", "tokens", "pred", "bleu", "tf1", "exact", "cos"
        );
        let _ = writeln!(
            out,
            "{:<28} {:<36} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.4}",
            self.dataset,
            self.method,
            self.mean_true_tokens,
            self.mean_pred_tokens,
            self.bleu,
            self.token_f1,
            self.exact,
            self.cos
        );
        for r in REFERENCE_ROWS {
            let _ = writeln!(
                out,
                "{:<28} {:<36} {:>7} {:>7} {:>7.1} {:>7} {:>7.1} {:>7}",
                r.dataset,
                format!("{} (reference)", r.method),
                "-",
                "-",
                r.bleu,
                "-",
                r.exact,
                "-"
            );
        }
        out
    }

    pub fn write(&self, json_path: &Path, table_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))?;
        std::fs::write(table_path, self.to_table()).map_err(|e| Error::io(table_path, e))
    }

    /// Cosine-vs-BLEU scatter of the per-example records, if kept.
    pub fn scatter_plot(&self) -> Option<String> {
        let records = self.records.as_ref()?;
        let series = Series {
            label: self.method.clone(),
            points: records.iter().map(|r| (r.cos, r.bleu)).collect(),
        };
        Some(xy_chart("Cosine similarity vs BLEU", "cosine", "BLEU", &[series], Mark::Dots))
    }
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub f1_mode: F1Mode,
    pub keep_records: bool,
    pub keep_traces: bool,
    /// Worker threads; 0 uses the global pool.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            f1_mode: F1Mode::Multiset,
            keep_records: true,
            keep_traces: false,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvaluationRun {
    pub report: ReconstructionReport,
    /// Traces in dataset order, for methods that produce them.
    pub traces: Vec<CorrectionTrace>,
}

/// Stable per-example job id, independent of dataset order.
pub fn job_id(doc_id: &str) -> u64 {
    let digest = Sha256::digest(doc_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Inverts every example of `dataset` and scores the reconstructions.
///
/// `attack` is what the inversion method may query (possibly noised);
/// `targets[i]` is the embedding handed to the method for example `i`.
/// Cosines are always measured with `clean` against the dataset's own
/// target embeddings.
pub fn evaluate_targets(
    method: &dyn InversionMethod,
    dataset: &InversionDataset,
    targets: &[EmbeddingVector],
    attack: Arc<dyn Embedder>,
    clean: &dyn Embedder,
    tokenizer: &WordTokenizer,
    options: &EvalOptions,
) -> Result<EvaluationRun> {
    if targets.len() != dataset.len() {
        return Err(Error::contract(format!(
            "{} targets for {} examples",
            targets.len(),
            dataset.len()
        )));
    }
    if dataset.embedder.model_id != clean.descriptor().model_id {
        return Err(Error::config(format!(
            "dataset embedded with {}, evaluator uses {}",
            dataset.embedder.model_id,
            clean.descriptor().model_id
        )));
    }
    let run_one = |i: usize| -> Result<(String, Option<CorrectionTrace>)> {
        let ex = &dataset.examples[i];
        let job = job_id(&ex.doc_id);
        let embedder = attack.clone().for_job(job);
        let inv = method.invert(embedder.as_ref(), &targets[i], job)?;
        Ok((inv.output.text, inv.trace))
    };
    let outputs: Vec<Result<(String, Option<CorrectionTrace>)>> = if options.workers == 0 {
        (0..dataset.len()).into_par_iter().map(run_one).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(options.workers)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?
            .install(|| (0..dataset.len()).into_par_iter().map(run_one).collect())
    };

    let mut preds: Vec<(usize, String)> = Vec::new();
    let mut failures = Vec::new();
    let mut traces = Vec::new();
    for (i, out) in outputs.into_iter().enumerate() {
        match out {
            Ok((text, trace)) => {
                preds.push((i, text));
                if options.keep_traces {
                    traces.extend(trace);
                }
            }
            Err(e) => failures.push(ExampleFailure {
                doc_id: dataset.examples[i].doc_id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let texts: Vec<String> = preds.iter().map(|(_, t)| t.clone()).collect();
    let vectors = if texts.is_empty() {
        Vec::new()
    } else {
        embed_texts(clean, &texts)?
    };
    let mut records = Vec::with_capacity(preds.len());
    for ((i, pred), v) in preds.into_iter().zip(vectors) {
        let ex = &dataset.examples[i];
        let pred = tokenizer.canonicalize(&pred);
        records.push(ExampleRecord {
            doc_id: ex.doc_id.clone(),
            true_tokens: ex.tokens.len(),
            pred_tokens: tokenizer.encode(&pred).len(),
            bleu: bleu(&pred, &ex.tokens.text),
            token_f1: token_f1(&pred, &ex.tokens.text, options.f1_mode),
            exact: exact_match(tokenizer, &pred, &ex.tokens.text),
            cos: cosine_similarity(&v, &ex.target_embedding)?,
            reference: ex.tokens.text.clone(),
            prediction: pred,
        });
    }
    let report = ReconstructionReport::aggregate(
        &dataset_id(dataset),
        &method.id(),
        options.f1_mode,
        records,
        failures,
        options.keep_records,
    );
    Ok(EvaluationRun { report, traces })
}

/// Evaluation without a defense: the method sees the clean embedder and
/// the dataset's own targets.
pub fn evaluate_dataset(
    method: &dyn InversionMethod,
    dataset: &InversionDataset,
    embedder: Arc<dyn Embedder>,
    tokenizer: &WordTokenizer,
    options: &EvalOptions,
) -> Result<EvaluationRun> {
    let targets: Vec<EmbeddingVector> = dataset.examples.iter().map(|e| e.target_embedding.clone()).collect();
    evaluate_targets(method, dataset, &targets, embedder.clone(), embedder.as_ref(), tokenizer, options)
}

fn dataset_id(dataset: &InversionDataset) -> String {
    format!("{}-{}", dataset.embedder.model_id, dataset.max_tokens)
}
