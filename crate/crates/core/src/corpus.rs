//! Corpora, inversion datasets, and hypothesis datasets for corrector training.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedders::{embed_texts, get_or_embed, Embedder, EmbedderDescriptor, EmbeddingCache, EmbeddingVector};
use crate::error::{Error, Result};
use crate::models::{greedy, Inverter};
use crate::tokenizer::{synthetic_word, TokenSequence, WordTokenizer};

const EMBED_CHUNK: usize = 256;
const DECODE_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name_spans: Option<Vec<(String, String)>>,
}

/// A document after tokenization and truncation, before embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruncatedDocument {
    pub doc_id: String,
    pub tokens: TokenSequence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name_spans: Option<Vec<(String, String)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionExample {
    pub doc_id: String,
    /// Truncated tokens; `tokens.text` is the canonical ground truth.
    pub tokens: TokenSequence,
    /// φ of the truncated text.
    pub target_embedding: EmbeddingVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name_spans: Option<Vec<(String, String)>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypothesisRecord {
    pub example: InversionExample,
    pub hypothesis: TokenSequence,
    pub hypothesis_embedding: EmbeddingVector,
}

/// How to obtain a tokenizer: `synthetic:<n>`, `vocab:<path>`, or
/// `fit:<max_words>` (fit on the corpus being ingested).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenizerSpec {
    Synthetic(usize),
    Vocab(std::path::PathBuf),
    Fit(usize),
}

impl TokenizerSpec {
    pub fn parse(spec: &str) -> Result<Self> {
        let (kind, arg) = spec
            .split_once(':')
            .ok_or_else(|| Error::config(format!("unknown tokenizer {spec:?}")))?;
        let count = |a: &str| {
            a.parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::config(format!("bad tokenizer size in {spec:?}")))
        };
        match kind {
            "synthetic" => Ok(Self::Synthetic(count(arg)?)),
            "fit" => Ok(Self::Fit(count(arg)?)),
            "vocab" => Ok(Self::Vocab(arg.into())),
            _ => Err(Error::config(format!("unknown tokenizer {spec:?}"))),
        }
    }

    pub fn resolve(&self, corpus: &[Document]) -> Result<WordTokenizer> {
        match self {
            Self::Synthetic(n) => Ok(WordTokenizer::synthetic(*n)),
            Self::Vocab(path) => WordTokenizer::load(path),
            Self::Fit(n) => Ok(WordTokenizer::fit(corpus.iter().map(|d| d.text.as_str()), *n, 1)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IngestReport {
    pub documents: Vec<TruncatedDocument>,
    pub tokenizer: WordTokenizer,
    pub malformed_lines: Vec<usize>,
    pub dropped_empty: usize,
}

/// Reads a JSONL corpus (`{doc_id, text, name_spans?}` per line).
/// Malformed lines are skipped and their 1-based line numbers reported.
pub fn read_corpus(path: &Path) -> Result<(Vec<Document>, Vec<usize>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    let mut malformed = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Document>(&line) {
            Ok(doc) if !doc.text.trim().is_empty() && seen.insert(doc.doc_id.clone()) => docs.push(doc),
            Ok(doc) => {
                tracing::warn!(line = i + 1, doc_id = %doc.doc_id, "skipping empty or duplicate document");
                malformed.push(i + 1);
            }
            Err(e) => {
                tracing::warn!(line = i + 1, error = %e, "skipping malformed corpus line");
                malformed.push(i + 1);
            }
        }
    }
    Ok((docs, malformed))
}

pub fn write_corpus(path: &Path, docs: &[Document]) -> Result<()> {
    write_jsonl(path, docs)
}

/// Tokenizes and truncates documents to `max_tokens`; documents empty
/// after truncation are dropped and counted.
pub fn truncate_documents(docs: &[Document], tokenizer: &WordTokenizer, max_tokens: usize) -> (Vec<TruncatedDocument>, usize) {
    let mut out = Vec::with_capacity(docs.len());
    let mut dropped = 0;
    for d in docs {
        let tokens = tokenizer.tokenize_truncated(&d.text, max_tokens);
        if tokens.is_empty() {
            dropped += 1;
            continue;
        }
        out.push(TruncatedDocument {
            doc_id: d.doc_id.clone(),
            tokens,
            name_spans: d.name_spans.clone(),
        });
    }
    (out, dropped)
}

pub fn ingest_corpus(path: &Path, tokenizer: &TokenizerSpec, max_tokens: usize) -> Result<IngestReport> {
    if max_tokens == 0 {
        return Err(Error::config("max_tokens must be positive"));
    }
    let (docs, malformed_lines) = read_corpus(path)?;
    let tokenizer = tokenizer.resolve(&docs)?;
    let (documents, dropped_empty) = truncate_documents(&docs, &tokenizer, max_tokens);
    if dropped_empty > 0 {
        tracing::info!(dropped_empty, "documents empty after truncation");
    }
    Ok(IngestReport {
        documents,
        tokenizer,
        malformed_lines,
        dropped_empty,
    })
}

/// Examples plus the embedder and tokenizer they were built with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionDataset {
    pub tokenizer_id: String,
    pub embedder: EmbedderDescriptor,
    pub max_tokens: usize,
    pub examples: Vec<InversionExample>,
}

impl InversionDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn with_examples(&self, examples: Vec<InversionExample>) -> Self {
        Self {
            tokenizer_id: self.tokenizer_id.clone(),
            embedder: self.embedder.clone(),
            max_tokens: self.max_tokens,
            examples,
        }
    }
}

/// Embeds every truncated document (through the cache when given).
pub fn build_inversion_dataset(
    docs: &[TruncatedDocument],
    tokenizer: &WordTokenizer,
    max_tokens: usize,
    embedder: &dyn Embedder,
    cache: Option<&EmbeddingCache>,
) -> Result<InversionDataset> {
    embedder.descriptor().validate()?;
    let chunks: Vec<Vec<EmbeddingVector>> = docs
        .par_chunks(EMBED_CHUNK)
        .map(|chunk| {
            let texts: Vec<String> = chunk.iter().map(|d| d.tokens.text.clone()).collect();
            match cache {
                Some(c) => get_or_embed(&texts, c, embedder),
                None => embedder.embed_batch(&texts),
            }
        })
        .collect::<Result<_>>()?;
    let examples = docs
        .iter()
        .zip(chunks.into_iter().flatten())
        .map(|(d, e)| InversionExample {
            doc_id: d.doc_id.clone(),
            tokens: d.tokens.clone(),
            target_embedding: e,
            name_spans: d.name_spans.clone(),
        })
        .collect();
    Ok(InversionDataset {
        tokenizer_id: tokenizer.id().to_string(),
        embedder: embedder.descriptor().clone(),
        max_tokens,
        examples,
    })
}

/// Greedy base-model hypotheses `x⁰` for every example, re-embedded.
pub fn generate_hypothesis_dataset(
    base: &Inverter,
    tokenizer: &WordTokenizer,
    dataset: &InversionDataset,
    embedder: &dyn Embedder,
) -> Result<Vec<HypothesisRecord>> {
    check_compatible(base, tokenizer, dataset)?;
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.examples.chunks(DECODE_CHUNK) {
        let conds: Vec<_> = chunk.iter().map(|ex| base.base_conditioning(&ex.target_embedding)).collect();
        let encoded = base.net().encode(&conds)?;
        let decoded = greedy(base.net(), &encoded)?;
        let hyps: Vec<TokenSequence> = decoded.into_iter().map(|d| tokenizer.sequence(d.ids)).collect();
        let texts: Vec<String> = hyps.iter().map(|h| h.text.clone()).collect();
        let embeddings = embed_texts(embedder, &texts)?;
        for ((ex, hypothesis), hypothesis_embedding) in chunk.iter().zip(hyps).zip(embeddings) {
            out.push(HypothesisRecord {
                example: ex.clone(),
                hypothesis,
                hypothesis_embedding,
            });
        }
    }
    Ok(out)
}

pub(crate) fn check_compatible(model: &Inverter, tokenizer: &WordTokenizer, dataset: &InversionDataset) -> Result<()> {
    let cfg = model.config();
    if cfg.tokenizer_id != tokenizer.id() || dataset.tokenizer_id != tokenizer.id() {
        return Err(Error::config(format!(
            "tokenizer mismatch: model {}, dataset {}, tokenizer {}",
            cfg.tokenizer_id,
            dataset.tokenizer_id,
            tokenizer.id()
        )));
    }
    if cfg.embedder.dimension != dataset.embedder.dimension {
        return Err(Error::config(format!(
            "model expects {}-dim embeddings, dataset has {}",
            cfg.embedder.dimension, dataset.embedder.dimension
        )));
    }
    Ok(())
}

/// Seeded split into disjoint train/eval sets; both keep input order.
pub fn split_train_eval<T: Clone>(items: &[T], eval_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::config(format!("eval_fraction must be in (0, 1), got {eval_fraction}")));
    }
    let n_eval = (items.len() as f64 * eval_fraction).round() as usize;
    if n_eval == 0 || n_eval >= items.len() {
        return Err(Error::config(format!(
            "cannot split {} examples with eval_fraction {eval_fraction}",
            items.len()
        )));
    }
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_eval = vec![false; items.len()];
    idx[..n_eval].iter().for_each(|&i| is_eval[i] = true);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (item, e) in items.iter().zip(is_eval) {
        if e {
            eval.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, eval))
}

/// Synthetic benchmark corpus: each document is a set of distinct words
/// `t000..t{vocab-1}` written in ascending order, with length drawn
/// uniformly from `min_len..=max_len`. Order-free embedders are injective
/// on such sets, so every document is recoverable in principle.
pub fn synthetic_corpus(count: usize, vocab: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Vec<Document>> {
    if min_len == 0 || min_len > max_len || max_len > vocab {
        return Err(Error::config(format!(
            "invalid synthetic corpus lengths {min_len}..={max_len} for vocabulary {vocab}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut docs = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while docs.len() < count {
        attempts += 1;
        if attempts > count * 100 {
            return Err(Error::config("synthetic corpus space too small for the requested count"));
        }
        let len = rng.random_range(min_len..=max_len);
        let mut ids = rand::seq::index::sample(&mut rng, vocab, len).into_vec();
        ids.sort_unstable();
        let text = ids.iter().map(|&i| synthetic_word(i)).collect::<Vec<_>>().join(" ");
        if seen.insert(text.clone()) {
            docs.push(Document {
                doc_id: format!("syn-{:05}", docs.len()),
                text,
                name_spans: None,
            });
        }
    }
    Ok(docs)
}

/// Writes the dataset as JSONL rows referencing the embedding cache by the
/// SHA-256 of each example's text; the header line records provenance.
pub fn write_dataset_manifest(path: &Path, dataset: &InversionDataset) -> Result<()> {
    #[derive(Serialize)]
    struct Header<'a> {
        tokenizer_id: &'a str,
        embedder: &'a EmbedderDescriptor,
        max_tokens: usize,
        examples: usize,
    }
    #[derive(Serialize)]
    struct Row<'a> {
        doc_id: &'a str,
        text: &'a str,
        token_ids: &'a [u32],
        embedding_key: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        name_spans: &'a Option<Vec<(String, String)>>,
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(
        &mut w,
        &Header {
            tokenizer_id: &dataset.tokenizer_id,
            embedder: &dataset.embedder,
            max_tokens: dataset.max_tokens,
            examples: dataset.len(),
        },
    )?;
    writeln!(w).map_err(io)?;
    for ex in &dataset.examples {
        let key = crate::tokenizer::hex_prefix(&Sha256::digest(ex.tokens.text.as_bytes()), 64);
        serde_json::to_writer(
            &mut w,
            &Row {
                doc_id: &ex.doc_id,
                text: &ex.tokens.text,
                token_ids: &ex.tokens.ids,
                embedding_key: key,
                name_spans: &ex.name_spans,
            },
        )?;
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reloads a manifest, pulling vectors from `cache`. Every row must hit.
pub fn read_dataset_manifest(path: &Path, cache: &EmbeddingCache) -> Result<InversionDataset> {
    #[derive(Deserialize)]
    struct Header {
        tokenizer_id: String,
        embedder: EmbedderDescriptor,
        max_tokens: usize,
    }
    #[derive(Deserialize)]
    struct Row {
        doc_id: String,
        text: String,
        token_ids: Vec<u32>,
        #[serde(default)]
        name_spans: Option<Vec<(String, String)>>,
    }
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header: Header = match lines.next() {
        Some(l) => serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)?,
        None => return Err(Error::config(format!("{} is empty", path.display()))),
    };
    let mut examples = Vec::new();
    for line in lines {
        let row: Row = serde_json::from_str(&line.map_err(|e| Error::io(path, e))?)?;
        let target_embedding = cache.get(&row.text).ok_or_else(|| {
            Error::config(format!("embedding for {} missing from cache", row.doc_id))
        })?;
        examples.push(InversionExample {
            doc_id: row.doc_id,
            tokens: TokenSequence {
                ids: row.token_ids,
                text: row.text,
            },
            target_embedding,
            name_spans: row.name_spans,
        });
    }
    Ok(InversionDataset {
        tokenizer_id: header.tokenizer_id,
        embedder: header.embedder,
        max_tokens: header.max_tokens,
        examples,
    })
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedders::{cosine_similarity, SyntheticEmbedder};

    fn docs(texts: &[&str]) -> Vec<Document> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| Document {
                doc_id: format!("d{i}"),
                text: t.to_string(),
                name_spans: None,
            })
            .collect()
    }

    #[test]
    fn truncation_contract() {
        let tok = WordTokenizer::synthetic(200);
        let long: String = (0..100).map(synthetic_word).collect::<Vec<_>>().join(" ");
        let (out, dropped) = truncate_documents(&docs(&[&long, "t001 t002", "!!"]), &tok, 32);
        assert_eq!(out[0].tokens.len(), 32);
        assert_eq!(out[1].tokens.text, "t001 t002");
        // "!!" tokenizes to two <unk> tokens, so it is kept
        assert_eq!(dropped, 0);
        let again = tok.tokenize_truncated(&out[0].tokens.text, 32);
        assert_eq!(again, out[0].tokens);
    }

    #[test]
    fn ingest_skips_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(
            &path,
            "{\"doc_id\":\"a\",\"text\":\"hello world\"}\nnot json\n{\"doc_id\":\"b\",\"text\":\"x\",\"name_spans\":[[\"Rhona\",\"Arntson\"]]}\n",
        )
        .unwrap();
        let report = ingest_corpus(&path, &TokenizerSpec::Fit(100), 32).unwrap();
        assert_eq!(report.documents.len(), 2);
        assert_eq!(report.malformed_lines, vec![2]);
        assert_eq!(
            report.documents[1].name_spans,
            Some(vec![("Rhona".to_string(), "Arntson".to_string())])
        );
    }

    #[test]
    fn unknown_tokenizer_is_config_error() {
        assert!(TokenizerSpec::parse("bpe:foo").unwrap_err().is_config());
        assert!(TokenizerSpec::parse("synthetic").unwrap_err().is_config());
        assert_eq!(TokenizerSpec::parse("synthetic:256").unwrap(), TokenizerSpec::Synthetic(256));
    }

    #[test]
    fn dataset_targets_match_truncated_text() {
        let tok = WordTokenizer::synthetic(50);
        let corpus = synthetic_corpus(10, 50, 1, 8, 0).unwrap();
        let (trunc, _) = truncate_documents(&corpus, &tok, 4);
        let emb = SyntheticEmbedder::new(16, 2);
        let ds = build_inversion_dataset(&trunc, &tok, 4, &emb, None).unwrap();
        assert_eq!(ds.len(), 10);
        for ex in &ds.examples {
            assert!(ex.tokens.len() <= 4);
            let again = emb.embed_batch(&[ex.tokens.text.clone()]).unwrap();
            assert!((cosine_similarity(&again[0], &ex.target_embedding).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn warm_cache_rebuild_makes_no_queries() {
        let dir = tempfile::tempdir().unwrap();
        let tok = WordTokenizer::synthetic(50);
        let corpus = synthetic_corpus(10, 50, 1, 8, 0).unwrap();
        let (trunc, _) = truncate_documents(&corpus, &tok, 8);
        let emb = SyntheticEmbedder::new(16, 2);
        let cache = EmbeddingCache::open(&dir.path().join("c.bin"), &emb.descriptor().model_id, 16).unwrap();
        let first = build_inversion_dataset(&trunc, &tok, 8, &emb, Some(&cache)).unwrap();
        assert_eq!(emb.queries(), 10);
        let second = build_inversion_dataset(&trunc, &tok, 8, &emb, Some(&cache)).unwrap();
        assert_eq!(emb.queries(), 10);
        assert_eq!(first, second);

        let manifest = dir.path().join("dataset.jsonl");
        write_dataset_manifest(&manifest, &first).unwrap();
        assert_eq!(read_dataset_manifest(&manifest, &cache).unwrap(), first);
    }

    #[test]
    fn duplicate_texts_share_targets() {
        let tok = WordTokenizer::synthetic(10);
        let (trunc, _) = truncate_documents(&docs(&["t001 t002", "t001 t002"]), &tok, 8);
        let ds = build_inversion_dataset(&trunc, &tok, 8, &SyntheticEmbedder::new(8, 0), None).unwrap();
        assert_eq!(ds.examples[0].target_embedding, ds.examples[1].target_embedding);
    }

    #[test]
    fn split_is_seeded_disjoint_and_complete() {
        let items: Vec<usize> = (0..100).collect();
        let (train, eval) = split_train_eval(&items, 0.1, 7).unwrap();
        assert_eq!((train.len(), eval.len()), (90, 10));
        assert_eq!(split_train_eval(&items, 0.1, 7).unwrap(), (train.clone(), eval.clone()));
        let mut all: Vec<usize> = train.iter().chain(&eval).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        assert!(split_train_eval(&items[..1], 0.5, 0).unwrap_err().is_config());
        assert!(split_train_eval(&items, 1.0, 0).unwrap_err().is_config());
    }

    #[test]
    fn synthetic_corpus_is_sorted_distinct() {
        let corpus = synthetic_corpus(200, 256, 1, 8, 3).unwrap();
        let texts: HashSet<_> = corpus.iter().map(|d| d.text.clone()).collect();
        assert_eq!(texts.len(), 200);
        for d in &corpus {
            let words: Vec<&str> = d.text.split(' ').collect();
            assert!(words.len() <= 8);
            assert!(words.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
