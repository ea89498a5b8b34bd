//! Dataset-level entry points: training the two roles and base-model decoding.

use std::io::Write;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha8Rng;

use super::decode::{beam_search, nucleus, DecodeStrategy};
use super::inverter::InverterConfig;
use super::train::{Inverter, ModelRole, TrainHyperparams, Trainer, TrainingPair};
use crate::corpus::{HypothesisRecord, InversionDataset};
use crate::embedders::{cosine_similarity, embed_one, embed_texts, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, WordTokenizer};

/// φ(∅), embedded through the embedder's empty-input substitute.
pub fn empty_embedding(embedder: &dyn Embedder) -> Result<EmbeddingVector> {
    embed_one(embedder, "")
}

pub fn base_pairs(dataset: &InversionDataset, empty: &EmbeddingVector) -> Vec<TrainingPair> {
    dataset
        .examples
        .iter()
        .map(|ex| TrainingPair {
            target: ex.target_embedding.clone(),
            hypothesis: Vec::new(),
            hypothesis_embedding: Some(empty.clone()),
            gold: ex.tokens.ids.clone(),
        })
        .collect()
}

/// Corrector supervision: predict the truth given `(e, x⁰, ê⁰)`. With
/// `feedback = false` the hypothesis embedding is withheld.
pub fn corrector_pairs(records: &[HypothesisRecord], feedback: bool) -> Vec<TrainingPair> {
    records
        .iter()
        .map(|r| TrainingPair {
            target: r.example.target_embedding.clone(),
            hypothesis: r.hypothesis.ids.clone(),
            hypothesis_embedding: feedback.then(|| r.hypothesis_embedding.clone()),
            gold: r.example.tokens.ids.clone(),
        })
        .collect()
}

fn check_dataset(config: &InverterConfig, dataset: &InversionDataset) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    if dataset.tokenizer_id != config.tokenizer_id {
        return Err(Error::config(format!(
            "dataset tokenizer {} differs from model tokenizer {}",
            dataset.tokenizer_id, config.tokenizer_id
        )));
    }
    if dataset.embedder.dimension != config.embedder.dimension {
        return Err(Error::config("dataset and model embedding dimensions differ"));
    }
    Ok(())
}

/// Trains `p(x | e, ∅, φ(∅))` by maximum likelihood.
pub fn train_base(
    train: &InversionDataset,
    eval: Option<&InversionDataset>,
    config: InverterConfig,
    empty: EmbeddingVector,
    hyperparams: TrainHyperparams,
    log: Option<&mut dyn Write>,
) -> Result<Trainer> {
    check_dataset(&config, train)?;
    let train_pairs = base_pairs(train, &empty);
    let eval_pairs = eval.map(|e| base_pairs(e, &empty)).unwrap_or_default();
    let inverter = Inverter::new(ModelRole::Base, config, empty, hyperparams.seed)?;
    let mut trainer = Trainer::new(inverter, hyperparams)?;
    trainer.train(&train_pairs, &eval_pairs, log)?;
    Ok(trainer)
}

/// Trains `p(x | e, x⁰, ê⁰)` on base-model hypotheses.
pub fn train_corrector(
    train: &[HypothesisRecord],
    eval: &[HypothesisRecord],
    config: InverterConfig,
    empty: EmbeddingVector,
    hyperparams: TrainHyperparams,
    log: Option<&mut dyn Write>,
) -> Result<Trainer> {
    if train.is_empty() {
        return Err(Error::config("hypothesis dataset is empty"));
    }
    if let Some(r) = train.iter().find(|r| r.hypothesis_embedding.dim() != config.embedder.dimension) {
        return Err(Error::config(format!(
            "hypothesis for {} was embedded with a different embedder",
            r.example.doc_id
        )));
    }
    let train_pairs = corrector_pairs(train, config.feedback);
    let eval_pairs = corrector_pairs(eval, config.feedback);
    let inverter = Inverter::new(ModelRole::Corrector, config, empty, hyperparams.seed)?;
    let mut trainer = Trainer::new(inverter, hyperparams)?;
    trainer.train(&train_pairs, &eval_pairs, log)?;
    Ok(trainer)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedCandidate {
    pub sequence: TokenSequence,
    pub logprob: f64,
    /// Cosine to the target when reranking was requested.
    pub cosine: Option<f64>,
}

/// Decodes `num_return` candidates from the base model. With `rerank`, the
/// candidates are re-embedded and sorted by cosine to `target`, descending.
pub fn base_generate(
    model: &Inverter,
    tokenizer: &WordTokenizer,
    target: &EmbeddingVector,
    strategy: DecodeStrategy,
    num_return: usize,
    rerank: Option<&dyn Embedder>,
) -> Result<Vec<GeneratedCandidate>> {
    strategy.validate()?;
    if num_return == 0 {
        return Err(Error::config("num_return must be at least 1"));
    }
    let encoded = model.net().encode(&[model.base_conditioning(target)])?;
    let decoded = match strategy {
        DecodeStrategy::Greedy => beam_search(model.net(), &encoded, 1)?,
        DecodeStrategy::Beam { width } => beam_search(model.net(), &encoded, width.max(num_return))?,
        DecodeStrategy::Nucleus { top_p, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            nucleus(model.net(), &encoded, num_return, top_p, &mut rng)?
        }
    };
    let mut out: Vec<GeneratedCandidate> = decoded
        .into_iter()
        .next()
        .unwrap_or_default()
        .into_iter()
        .take(num_return)
        .map(|d| GeneratedCandidate {
            sequence: tokenizer.sequence(d.ids),
            logprob: d.logprob,
            cosine: None,
        })
        .collect();
    if let Some(embedder) = rerank {
        let texts: Vec<String> = out.iter().map(|c| c.sequence.text.clone()).collect();
        let vectors = embed_texts(embedder, &texts)?;
        for (c, v) in out.iter_mut().zip(&vectors) {
            c.cosine = Some(cosine_similarity(v, target)?);
        }
        out.sort_by(|a, b| {
            b.cosine
                .partial_cmp(&a.cosine)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.sequence.text.cmp(&b.sequence.text))
        });
    }
    Ok(out)
}

/// Extra corrector supervision: copies of each gold text with random
/// word-level edits, re-embedded so `ê` matches the edited text.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Edited copies per example.
    pub copies: usize,
    /// Each copy gets between 0 and `max_edits` edits.
    pub max_edits: usize,
    /// Copies whose hypothesis is random tokens, unrelated to the example.
    pub random_copies: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            copies: 0,
            max_edits: 3,
            random_copies: 0,
            seed: 0,
        }
    }
}

/// Applies `edits` random deletions, insertions, or substitutions.
pub fn perturb<R: Rng>(ids: &[u32], edits: usize, content: std::ops::Range<u32>, max_len: usize, rng: &mut R) -> Vec<u32> {
    let mut out = ids.to_vec();
    for _ in 0..edits {
        let op = rng.random_range(0..3);
        if (op == 0 && out.len() > 1) || out.len() >= max_len {
            let i = rng.random_range(0..out.len());
            out.remove(i);
        } else if op == 1 || out.is_empty() {
            let i = rng.random_range(0..=out.len());
            out.insert(i, rng.random_range(content.clone()));
        } else {
            let i = rng.random_range(0..out.len());
            out[i] = rng.random_range(content.clone());
        }
    }
    out
}

pub fn augment_hypotheses(
    dataset: &InversionDataset,
    tokenizer: &WordTokenizer,
    embedder: &dyn Embedder,
    config: &AugmentConfig,
) -> Result<Vec<HypothesisRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut hyps = Vec::with_capacity(dataset.len() * (config.copies + config.random_copies));
    for ex in &dataset.examples {
        for _ in 0..config.copies {
            let edits = rng.random_range(0..=config.max_edits);
            let ids = perturb(&ex.tokens.ids, edits, tokenizer.content_ids(), dataset.max_tokens, &mut rng);
            hyps.push((ex, tokenizer.sequence(ids)));
        }
        for _ in 0..config.random_copies {
            let len = rng.random_range(1..=dataset.max_tokens.max(1));
            let ids = (0..len).map(|_| rng.random_range(tokenizer.content_ids())).collect();
            hyps.push((ex, tokenizer.sequence(ids)));
        }
    }
    let mut out = Vec::with_capacity(hyps.len());
    for chunk in hyps.chunks(1024) {
        let texts: Vec<String> = chunk.iter().map(|(_, h)| h.text.clone()).collect();
        for ((ex, hypothesis), hypothesis_embedding) in chunk.iter().zip(embed_texts(embedder, &texts)?) {
            out.push(HypothesisRecord {
                example: (*ex).clone(),
                hypothesis: hypothesis.clone(),
                hypothesis_embedding,
            });
        }
    }
    Ok(out)
}
