//! Search in embedding space by iterative correction.
//!
//! Each round re-embeds the current hypotheses, asks the corrector for
//! edits, scores the proposals by cosine to the target, and keeps a new
//! sequence only if it is closer than what it competes with. With beam
//! width `b`, every member yields `b` proposals and the best `b` distinct
//! strings of the pool (old members included) survive.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedders::{cosine_similarity, embed_texts, Embedder, EmbeddingVector};
use crate::error::{Error, Result};
use crate::models::{base_generate, beam_search, Conditioning, DecodeStrategy, Inverter};
use crate::tokenizer::{TokenSequence, WordTokenizer};

/// A hypothesis whose cosine reaches `1 − EXACT_HIT_TOLERANCE` ends the search.
pub const EXACT_HIT_TOLERANCE: f64 = 1e-6;

/// Preset from the initialization ablation: a fixed unrelated sentence.
pub const MOTORCYCLE_TEXT: &str =
    "there's no reverse on a motorcycle, as my friend found out quite dramatically the other day";

/// Preset from the initialization ablation: `"the "` repeated 32 times.
pub fn repeated_the() -> String {
    "the ".repeat(32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "text")]
pub enum Initializer {
    BaseModel,
    FixedText(String),
    RandomTokens,
}

impl Initializer {
    /// Parses `base`, `random`, or `fixed:<text>`.
    pub fn parse(spec: &str) -> Result<Self> {
        match spec {
            "base" => Ok(Self::BaseModel),
            "random" => Ok(Self::RandomTokens),
            _ => spec
                .strip_prefix("fixed:")
                .map(|t| Self::FixedText(t.to_string()))
                .ok_or_else(|| Error::config(format!("unknown initializer {spec:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub width: usize,
    pub max_rounds: usize,
    pub feedback_enabled: bool,
    pub initializer: Initializer,
    pub seed: u64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 1,
            max_rounds: 20,
            feedback_enabled: true,
            initializer: Initializer::BaseModel,
            seed: 0,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("beam width must be at least 1"));
        }
        Ok(())
    }
}

/// Base inverter, corrector, and their shared tokenizer.
#[derive(Clone)]
pub struct ModelStack {
    pub base: Option<Arc<Inverter>>,
    pub corrector: Arc<Inverter>,
    pub tokenizer: Arc<WordTokenizer>,
}

impl ModelStack {
    pub fn new(base: Option<Arc<Inverter>>, corrector: Arc<Inverter>, tokenizer: Arc<WordTokenizer>) -> Result<Self> {
        let check = |m: &Inverter| {
            if m.config().tokenizer_id != tokenizer.id() {
                return Err(Error::config(format!(
                    "model tokenizer {} differs from {}",
                    m.config().tokenizer_id,
                    tokenizer.id()
                )));
            }
            Ok(())
        };
        check(&corrector)?;
        if let Some(b) = &base {
            check(b)?;
            if b.config().embedder.dimension != corrector.config().embedder.dimension {
                return Err(Error::config("base and corrector expect different embedding sizes"));
            }
        }
        Ok(Self {
            base,
            corrector,
            tokenizer,
        })
    }

    fn max_tokens(&self) -> usize {
        self.corrector.config().max_tokens
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionStep {
    pub round: usize,
    pub hypothesis: TokenSequence,
    #[serde(skip)]
    pub hypothesis_embedding: Option<EmbeddingVector>,
    pub cosine_to_target: f64,
    /// True when the hypothesis entered the beam in this round.
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Beam after this round, best first.
    pub beam: Vec<CorrectionStep>,
    pub feedback_queries: u64,
    pub scoring_queries: u64,
}

impl RoundRecord {
    pub fn best_cosine(&self) -> f64 {
        self.beam.first().map_or(f64::NEG_INFINITY, |s| s.cosine_to_target)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTrace {
    pub job: u64,
    pub rounds: Vec<RoundRecord>,
}

impl CorrectionTrace {
    pub fn final_step(&self) -> &CorrectionStep {
        &self.rounds.last().expect("trace has round 0").beam[0]
    }

    pub fn final_output(&self) -> &TokenSequence {
        &self.final_step().hypothesis
    }

    pub fn total_queries(&self) -> u64 {
        self.rounds
            .iter()
            .map(|r| r.feedback_queries + r.scoring_queries)
            .sum()
    }

    /// Rounds where the best-of-beam cosine dropped.
    pub fn monotonicity_violations(&self) -> usize {
        self.rounds
            .windows(2)
            .filter(|w| w[1].best_cosine() < w[0].best_cosine())
            .count()
    }

    /// One JSON object per round.
    pub fn write_jsonl(&self, w: &mut dyn Write) -> Result<()> {
        #[derive(Serialize)]
        struct Member<'a> {
            text: &'a str,
            cosine: f64,
            accepted: bool,
        }
        #[derive(Serialize)]
        struct Queries {
            feedback: u64,
            scoring: u64,
        }
        #[derive(Serialize)]
        struct Line<'a> {
            job: u64,
            round: usize,
            beam: Vec<Member<'a>>,
            queries: Queries,
        }
        for r in &self.rounds {
            let line = Line {
                job: self.job,
                round: r.round,
                beam: r
                    .beam
                    .iter()
                    .map(|s| Member {
                        text: &s.hypothesis.text,
                        cosine: s.cosine_to_target,
                        accepted: s.accepted,
                    })
                    .collect(),
                queries: Queries {
                    feedback: r.feedback_queries,
                    scoring: r.scoring_queries,
                },
            };
            serde_json::to_writer(&mut *w, &line)?;
            writeln!(w).map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("utf-8 json")
    }
}

pub fn write_traces(path: &Path, traces: &[CorrectionTrace]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in traces {
        t.write_jsonl(&mut w)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn is_exact_hit(cosine: f64) -> bool {
    cosine >= 1.0 - EXACT_HIT_TOLERANCE
}

fn score(embedder: &dyn Embedder, target: &EmbeddingVector, seqs: &[TokenSequence]) -> Result<Vec<(EmbeddingVector, f64)>> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let texts: Vec<String> = seqs.iter().map(|s| s.text.clone()).collect();
    embed_texts(embedder, &texts)?
        .into_iter()
        .map(|v| {
            let c = cosine_similarity(&v, target)?;
            Ok((v, c))
        })
        .collect()
}

fn truncated(tokenizer: &WordTokenizer, seq: &TokenSequence, max_tokens: usize) -> TokenSequence {
    if seq.len() <= max_tokens {
        seq.clone()
    } else {
        tokenizer.sequence(seq.ids[..max_tokens].to_vec())
    }
}

/// Decodes `width` corrections for each hypothesis in one batch.
/// `feedback[i]` is `ê` for hypothesis `i`, or `None` when withheld.
fn propose(
    stack: &ModelStack,
    target: &EmbeddingVector,
    hypotheses: &[&TokenSequence],
    feedback: &[Option<EmbeddingVector>],
    width: usize,
) -> Result<Vec<Vec<TokenSequence>>> {
    let conds: Vec<Conditioning<'_>> = hypotheses
        .iter()
        .zip(feedback)
        .map(|(h, f)| Conditioning {
            target,
            hypothesis: &h.ids,
            hypothesis_embedding: f.as_ref(),
        })
        .collect();
    let net = stack.corrector.net();
    let encoded = net.encode(&conds)?;
    Ok(beam_search(net, &encoded, width)?
        .into_iter()
        .map(|cands| cands.into_iter().map(|d| stack.tokenizer.sequence(d.ids)).collect())
        .collect())
}

/// One greedy correction of `hypothesis`. With feedback the hypothesis is
/// re-embedded (one query); without it no query is made.
pub fn correct_once(
    stack: &ModelStack,
    target: &EmbeddingVector,
    hypothesis: &TokenSequence,
    embedder: &dyn Embedder,
    feedback_enabled: bool,
) -> Result<TokenSequence> {
    let hypothesis = truncated(&stack.tokenizer, hypothesis, stack.max_tokens());
    let feedback = if feedback_enabled {
        Some(embed_texts(embedder, &[hypothesis.text.clone()])?.remove(0))
    } else {
        None
    };
    Ok(propose(stack, target, &[&hypothesis], &[feedback], 1)?.remove(0).remove(0))
}

fn random_sequence(stack: &ModelStack, rng: &mut ChaCha8Rng) -> TokenSequence {
    let ids = stack.tokenizer.content_ids();
    let seq: Vec<u32> = (0..stack.max_tokens()).map(|_| rng.random_range(ids.clone())).collect();
    stack.tokenizer.sequence(seq)
}

/// Round-0 candidates: up to `width` distinct sequences.
fn initial_candidates(stack: &ModelStack, target: &EmbeddingVector, config: &BeamConfig, job: u64) -> Result<Vec<TokenSequence>> {
    let max_tokens = stack.max_tokens();
    let mut cands = match &config.initializer {
        Initializer::BaseModel => {
            let base = stack
                .base
                .as_ref()
                .ok_or_else(|| Error::config("base-model initializer needs a base model"))?;
            let encoded = base.net().encode(&[base.base_conditioning(target)])?;
            beam_search(base.net(), &encoded, config.width)?
                .remove(0)
                .into_iter()
                .map(|d| stack.tokenizer.sequence(d.ids))
                .collect()
        }
        Initializer::FixedText(text) => vec![stack.tokenizer.tokenize_truncated(text, max_tokens)],
        Initializer::RandomTokens => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ job.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            (0..config.width).map(|_| random_sequence(stack, &mut rng)).collect()
        }
    };
    let mut seen = HashSet::new();
    cands.retain(|c| seen.insert(c.text.clone()));
    Ok(cands)
}

fn step(round: usize, hypothesis: TokenSequence, scored: (EmbeddingVector, f64), accepted: bool) -> CorrectionStep {
    CorrectionStep {
        round,
        hypothesis,
        hypothesis_embedding: Some(scored.0),
        cosine_to_target: scored.1,
        accepted,
    }
}

/// Greedy iterative correction (beam width 1).
pub fn invert_iterative(
    stack: &ModelStack,
    embedder: &dyn Embedder,
    target: &EmbeddingVector,
    config: &BeamConfig,
    job: u64,
) -> Result<CorrectionTrace> {
    config.validate()?;
    if config.width != 1 {
        return Err(Error::config("invert_iterative runs with beam width 1"));
    }
    let init = initial_candidates(stack, target, config, job)?.remove(0);
    let scored = score(embedder, target, std::slice::from_ref(&init))?.remove(0);
    let mut current = step(0, init, scored, true);
    let mut rounds = vec![RoundRecord {
        round: 0,
        beam: vec![current.clone()],
        feedback_queries: 0,
        scoring_queries: 1,
    }];
    for round in 1..=config.max_rounds {
        if is_exact_hit(current.cosine_to_target) {
            break;
        }
        let mut feedback_queries = 0;
        let feedback = if config.feedback_enabled {
            feedback_queries = 1;
            Some(embed_texts(embedder, &[current.hypothesis.text.clone()])?.remove(0))
        } else {
            None
        };
        let proposal = propose(stack, target, &[&current.hypothesis], &[feedback], 1)?.remove(0).remove(0);
        let mut scoring_queries = 0;
        if proposal.text != current.hypothesis.text {
            scoring_queries = 1;
            let scored = score(embedder, target, std::slice::from_ref(&proposal))?.remove(0);
            if scored.1 > current.cosine_to_target {
                current = step(round, proposal, scored, true);
            }
        }
        let mut kept = current.clone();
        if kept.round != round {
            kept.round = round;
            kept.accepted = false;
        }
        rounds.push(RoundRecord {
            round,
            beam: vec![kept],
            feedback_queries,
            scoring_queries,
        });
    }
    Ok(CorrectionTrace { job, rounds })
}

fn rank_pool(pool: &mut [CorrectionStep]) {
    pool.sort_by(|a, b| {
        b.cosine_to_target
            .partial_cmp(&a.cosine_to_target)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.accepted.cmp(&b.accepted))
            .then_with(|| a.hypothesis.text.cmp(&b.hypothesis.text))
    });
}

/// Sequence-level beam search over corrections.
pub fn invert_sbeam(
    stack: &ModelStack,
    embedder: &dyn Embedder,
    target: &EmbeddingVector,
    config: &BeamConfig,
    job: u64,
) -> Result<CorrectionTrace> {
    config.validate()?;
    let width = config.width;
    let init = initial_candidates(stack, target, config, job)?;
    let scored = score(embedder, target, &init)?;
    let mut beam: Vec<CorrectionStep> = init
        .into_iter()
        .zip(scored)
        .map(|(h, s)| step(0, h, s, true))
        .collect();
    let initial_scoring = beam.len() as u64;
    rank_pool(&mut beam);
    beam.truncate(width);
    let mut rounds = vec![RoundRecord {
        round: 0,
        beam: beam.clone(),
        feedback_queries: 0,
        scoring_queries: initial_scoring,
    }];
    for round in 1..=config.max_rounds {
        if is_exact_hit(beam[0].cosine_to_target) {
            break;
        }
        let hyps: Vec<&TokenSequence> = beam.iter().map(|s| &s.hypothesis).collect();
        let mut feedback_queries = 0;
        let feedback: Vec<Option<EmbeddingVector>> = if config.feedback_enabled {
            let texts: Vec<String> = hyps.iter().map(|h| h.text.clone()).collect();
            feedback_queries = texts.len() as u64;
            embed_texts(embedder, &texts)?.into_iter().map(Some).collect()
        } else {
            vec![None; hyps.len()]
        };
        let proposals = propose(stack, target, &hyps, &feedback, width)?;

        let mut seen: HashSet<String> = beam.iter().map(|s| s.hypothesis.text.clone()).collect();
        let mut fresh: Vec<TokenSequence> = Vec::new();
        for p in proposals.into_iter().flatten() {
            if seen.insert(p.text.clone()) {
                fresh.push(p);
            }
        }
        let scored = score(embedder, target, &fresh)?;
        let scoring_queries = fresh.len() as u64;
        let mut pool: Vec<CorrectionStep> = beam
            .iter()
            .map(|s| CorrectionStep {
                round,
                accepted: false,
                ..s.clone()
            })
            .collect();
        pool.extend(fresh.into_iter().zip(scored).map(|(h, s)| step(round, h, s, true)));
        rank_pool(&mut pool);
        pool.truncate(width);
        beam = pool;
        rounds.push(RoundRecord {
            round,
            beam: beam.clone(),
            feedback_queries,
            scoring_queries,
        });
    }
    Ok(CorrectionTrace { job, rounds })
}

/// Dispatches to [`invert_iterative`] for width 1 and [`invert_sbeam`] otherwise.
pub fn invert(
    stack: &ModelStack,
    embedder: &dyn Embedder,
    target: &EmbeddingVector,
    config: &BeamConfig,
    job: u64,
) -> Result<CorrectionTrace> {
    if config.width == 1 {
        invert_iterative(stack, embedder, target, config, job)
    } else {
        invert_sbeam(stack, embedder, target, config, job)
    }
}

/// Output of one inversion job.
#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub output: TokenSequence,
    pub trace: Option<CorrectionTrace>,
}

/// Anything that maps a target embedding back to text.
pub trait InversionMethod: Send + Sync {
    /// Short label used in reports, e.g. `corrector-20r-b4`.
    fn id(&self) -> String;

    /// `embedder` is the attacker's view of the embedding model.
    fn invert(&self, embedder: &dyn Embedder, target: &EmbeddingVector, job: u64) -> Result<Inversion>;
}

/// Base initializer followed by corrector search.
pub struct CorrectionSearch {
    pub stack: ModelStack,
    pub config: BeamConfig,
}

impl InversionMethod for CorrectionSearch {
    fn id(&self) -> String {
        let init = match &self.config.initializer {
            Initializer::BaseModel => "base".to_string(),
            Initializer::FixedText(_) => "fixed".to_string(),
            Initializer::RandomTokens => "random".to_string(),
        };
        format!(
            "corrector-{}r-b{}{}-init-{init}",
            self.config.max_rounds,
            self.config.width,
            if self.config.feedback_enabled { "" } else { "-nofeedback" }
        )
    }

    fn invert(&self, embedder: &dyn Embedder, target: &EmbeddingVector, job: u64) -> Result<Inversion> {
        let trace = invert(&self.stack, embedder, target, &self.config, job)?;
        Ok(Inversion {
            output: trace.final_output().clone(),
            trace: Some(trace),
        })
    }
}

/// One-shot decoding from the base model, optionally reranked by cosine.
pub struct BaseDecode {
    pub model: Arc<Inverter>,
    pub tokenizer: Arc<WordTokenizer>,
    pub strategy: DecodeStrategy,
    pub num_return: usize,
    pub rerank: bool,
}

impl InversionMethod for BaseDecode {
    fn id(&self) -> String {
        let s = match self.strategy {
            DecodeStrategy::Greedy => "greedy".to_string(),
            DecodeStrategy::Beam { width } => format!("beam{width}"),
            DecodeStrategy::Nucleus { top_p, .. } => format!("nucleus{top_p}"),
        };
        if self.rerank {
            format!("base-{s}-rerank{}", self.num_return)
        } else {
            format!("base-{s}")
        }
    }

    fn invert(&self, embedder: &dyn Embedder, target: &EmbeddingVector, job: u64) -> Result<Inversion> {
        let strategy = match self.strategy {
            DecodeStrategy::Nucleus { top_p, seed } => DecodeStrategy::Nucleus {
                top_p,
                seed: seed ^ job.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            },
            s => s,
        };
        let rerank = if self.rerank { Some(embedder) } else { None };
        let mut out = base_generate(&self.model, &self.tokenizer, target, strategy, self.num_return, rerank)?;
        Ok(Inversion {
            output: out.remove(0).sequence,
            trace: None,
        })
    }
}

/// Upper bound on candidates [`brute_force_invert`] will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq)]
pub struct BruteForceResult {
    pub words: Vec<String>,
    pub text: String,
    pub cosine: f64,
    pub candidates_scored: u64,
}

/// Exhaustive `argmax_x cos(φ(x), e)` over all sequences of 1..=`max_len`
/// words from `vocabulary`. Ties (within 1e-9) go to the shorter, then the
/// lexicographically smaller string.
pub fn brute_force_invert(
    embedder: &dyn Embedder,
    vocabulary: &[String],
    max_len: usize,
    target: &EmbeddingVector,
) -> Result<BruteForceResult> {
    let v = vocabulary.len() as u64;
    let mut space: u64 = 0;
    let mut layer: u64 = 1;
    for _ in 0..max_len {
        layer = layer.saturating_mul(v);
        space = space.saturating_add(layer);
    }
    if space > BRUTE_FORCE_LIMIT {
        return Err(Error::config(format!(
            "search space of {space} sequences exceeds the limit of {BRUTE_FORCE_LIMIT}"
        )));
    }
    if vocabulary.is_empty() || max_len == 0 {
        return Err(Error::config("brute force needs a nonempty vocabulary and max_len ≥ 1"));
    }
    let mut best: Option<(Vec<usize>, String, f64)> = None;
    let mut scored = 0u64;
    let mut batch_idx: Vec<Vec<usize>> = Vec::new();
    let mut flush = |batch_idx: &mut Vec<Vec<usize>>, best: &mut Option<(Vec<usize>, String, f64)>| -> Result<()> {
        if batch_idx.is_empty() {
            return Ok(());
        }
        let texts: Vec<String> = batch_idx
            .iter()
            .map(|ix| ix.iter().map(|&i| vocabulary[i].as_str()).collect::<Vec<_>>().join(" "))
            .collect();
        let vectors = embedder.embed_batch(&texts)?;
        for ((ix, text), vec) in batch_idx.drain(..).zip(texts).zip(vectors) {
            let c = cosine_similarity(&vec, target)?;
            scored += 1;
            let better = match best {
                None => true,
                Some((bix, btext, bc)) => {
                    c > *bc + 1e-9
                        || ((c - *bc).abs() <= 1e-9
                            && (ix.len(), text.as_str()) < (bix.len(), btext.as_str()))
                }
            };
            if better {
                *best = Some((ix, text, c));
            }
        }
        Ok(())
    };
    for len in 1..=max_len {
        let mut ix = vec![0usize; len];
        loop {
            batch_idx.push(ix.clone());
            if batch_idx.len() == 4096 {
                flush(&mut batch_idx, &mut best)?;
            }
            let mut pos = len;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                ix[pos] += 1;
                if ix[pos] < vocabulary.len() {
                    break;
                }
                ix[pos] = 0;
                if pos == 0 {
                    pos = usize::MAX;
                    break;
                }
            }
            if pos == usize::MAX {
                break;
            }
        }
    }
    flush(&mut batch_idx, &mut best)?;
    drop(flush);
    let (ix, text, cosine) = best.expect("nonempty search space");
    Ok(BruteForceResult {
        words: ix.iter().map(|&i| vocabulary[i].clone()).collect(),
        text,
        cosine,
        candidates_scored: scored,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosenessHistogram {
    /// Lower edges of equal-width bins over [-1, 1].
    pub bin_edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub count: usize,
}

/// Distribution of `cos(e, ê⁰)` over a hypothesis dataset.
pub fn analyze_hypothesis_closeness(records: &[crate::corpus::HypothesisRecord], bins: usize) -> Result<ClosenessHistogram> {
    if records.is_empty() {
        return Err(Error::contract("hypothesis dataset is empty"));
    }
    let bins = bins.max(1);
    let width = 2.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut sum = 0.0;
    for r in records {
        let c = cosine_similarity(&r.example.target_embedding, &r.hypothesis_embedding)?;
        sum += c;
        let b = (((c + 1.0) / width).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(ClosenessHistogram {
        bin_edges: (0..bins).map(|i| -1.0 + i as f64 * width).collect(),
        counts,
        mean: sum / records.len() as f64,
        count: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedders::SyntheticEmbedder;

    #[test]
    fn initializer_parsing() {
        assert_eq!(Initializer::parse("base").unwrap(), Initializer::BaseModel);
        assert_eq!(Initializer::parse("random").unwrap(), Initializer::RandomTokens);
        assert_eq!(
            Initializer::parse("fixed:the the").unwrap(),
            Initializer::FixedText("the the".into())
        );
        assert!(Initializer::parse("other").unwrap_err().is_config());
        assert_eq!(repeated_the().split_whitespace().count(), 32);
    }

    #[test]
    fn brute_force_counts_and_recovers() {
        let emb = SyntheticEmbedder::new(32, 0);
        let vocab: Vec<String> = "a b c d e f g h i j".split(' ').map(String::from).collect();
        let target = emb.embed_batch(&["a b".into()]).unwrap().remove(0);
        let res = brute_force_invert(&emb, &vocab, 2, &target).unwrap();
        assert_eq!(res.candidates_scored, 110);
        assert_eq!(res.text, "a b");
        assert!((res.cosine - 1.0).abs() < 1e-6);
    }

    #[test]
    fn brute_force_prefers_shorter_on_ties() {
        let emb = SyntheticEmbedder::new(32, 0);
        let vocab: Vec<String> = vec!["b".into(), "a".into()];
        // "a a" has the same mean as "a"
        let target = emb.embed_batch(&["a a".into()]).unwrap().remove(0);
        assert_eq!(brute_force_invert(&emb, &vocab, 2, &target).unwrap().text, "a");
        // "b a" and "a b" tie; the lexicographically smaller string wins
        let target = emb.embed_batch(&["b a".into()]).unwrap().remove(0);
        assert_eq!(brute_force_invert(&emb, &vocab, 2, &target).unwrap().text, "a b");
    }

    #[test]
    fn brute_force_guard() {
        let emb = SyntheticEmbedder::new(8, 0);
        let vocab: Vec<String> = (0..101).map(|i| format!("w{i}")).collect();
        let target = emb.embed_batch(&["w1".into()]).unwrap().remove(0);
        assert!(brute_force_invert(&emb, &vocab, 3, &target).unwrap_err().is_config());
    }
}
