//! Token-level decoding: beam search (width 1 is greedy) and nucleus sampling.

use std::cmp::Ordering;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::inverter::{Encoded, InverterModel};
use super::transformer::{last_position, log_softmax_last};
use crate::error::{Error, Result};
use crate::tokenizer::{BOS, EOS, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize },
    Nucleus { top_p: f64, seed: u64 },
}

impl DecodeStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DecodeStrategy::Greedy => Ok(()),
            DecodeStrategy::Beam { width } if width >= 1 => Ok(()),
            DecodeStrategy::Beam { width } => {
                Err(Error::config(format!("beam width must be at least 1, got {width}")))
            }
            DecodeStrategy::Nucleus { top_p, .. } if top_p > 0.0 && top_p <= 1.0 => Ok(()),
            DecodeStrategy::Nucleus { top_p, .. } => {
                Err(Error::config(format!("nucleus top_p must be in (0, 1], got {top_p}")))
            }
        }
    }
}

/// A finished decoded sequence (content tokens only) with its log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub ids: Vec<u32>,
    pub logprob: f64,
}

#[derive(Clone)]
struct Beam {
    ids: Vec<u32>,
    logprob: f64,
    done: bool,
}

fn rank(a: &Beam, b: &Beam) -> Ordering {
    b.logprob
        .partial_cmp(&a.logprob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.ids.cmp(&b.ids))
}

fn step_logprobs(model: &InverterModel, encoded: &Encoded, rows: &[u32], prefixes: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
    let t = prefixes[0].len() + 1;
    let mut ids = Vec::with_capacity(prefixes.len() * t);
    for p in prefixes {
        ids.push(BOS);
        ids.extend_from_slice(p);
    }
    let inputs = Tensor::from_vec(ids, (prefixes.len(), t), model.device())?;
    let enc = encoded.select(rows)?;
    let logits = last_position(&model.decode(&enc, &inputs)?)?;
    Ok(log_softmax_last(&logits)?.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

/// Beam search of the given width for every row of `encoded`. Returns, per
/// row, up to `width` finished sequences sorted by log-probability
/// (ties broken by token ids). Width 1 is greedy decoding.
pub fn beam_search(model: &InverterModel, encoded: &Encoded, width: usize) -> Result<Vec<Vec<Decoded>>> {
    if width == 0 {
        return Err(Error::config("beam width must be at least 1"));
    }
    let max_len = model.config().max_tokens;
    let rows = encoded.batch_size()?;
    let mut beams: Vec<Vec<Beam>> = vec![
        vec![Beam {
            ids: Vec::new(),
            logprob: 0.0,
            done: false,
        }];
        rows
    ];
    for step in 0..=max_len {
        let mut owners = Vec::new();
        let mut prefixes: Vec<&[u32]> = Vec::new();
        for (r, bs) in beams.iter().enumerate() {
            for (k, b) in bs.iter().enumerate() {
                if !b.done {
                    owners.push((r, k));
                    prefixes.push(&b.ids);
                }
            }
        }
        if owners.is_empty() {
            break;
        }
        let rows_idx: Vec<u32> = owners.iter().map(|&(r, _)| r as u32).collect();
        let logprobs = step_logprobs(model, encoded, &rows_idx, &prefixes)?;
        let mut pools: Vec<Vec<Beam>> = beams
            .iter()
            .map(|bs| bs.iter().filter(|b| b.done).cloned().collect())
            .collect();
        for (&(r, k), lp) in owners.iter().zip(&logprobs) {
            let parent = &beams[r][k];
            if step == max_len {
                pools[r].push(Beam {
                    ids: parent.ids.clone(),
                    logprob: parent.logprob + f64::from(lp[EOS as usize]),
                    done: true,
                });
                continue;
            }
            let mut order: Vec<u32> = (0..lp.len() as u32)
                .filter(|&tok| tok != PAD && tok != BOS)
                .collect();
            order.sort_by(|&a, &b| {
                lp[b as usize]
                    .partial_cmp(&lp[a as usize])
                    .unwrap_or(Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for &tok in order.iter().take(width) {
                let mut ids = parent.ids.clone();
                let done = tok == EOS;
                if !done {
                    ids.push(tok);
                }
                pools[r].push(Beam {
                    ids,
                    logprob: parent.logprob + f64::from(lp[tok as usize]),
                    done,
                });
            }
        }
        for (bs, mut pool) in beams.iter_mut().zip(pools) {
            pool.sort_by(rank);
            pool.truncate(width);
            *bs = pool;
        }
    }
    Ok(beams
        .into_iter()
        .map(|bs| {
            bs.into_iter()
                .map(|b| Decoded {
                    ids: b.ids,
                    logprob: b.logprob,
                })
                .collect()
        })
        .collect())
}

pub fn greedy(model: &InverterModel, encoded: &Encoded) -> Result<Vec<Decoded>> {
    Ok(beam_search(model, encoded, 1)?
        .into_iter()
        .map(|mut v| v.remove(0))
        .collect())
}

/// `samples` independent nucleus samples for each row of `encoded`.
pub fn nucleus<R: Rng>(
    model: &InverterModel,
    encoded: &Encoded,
    samples: usize,
    top_p: f64,
    rng: &mut R,
) -> Result<Vec<Vec<Decoded>>> {
    DecodeStrategy::Nucleus { top_p, seed: 0 }.validate()?;
    let max_len = model.config().max_tokens;
    let rows = encoded.batch_size()?;
    let mut seqs: Vec<Beam> = (0..rows * samples)
        .map(|_| Beam {
            ids: Vec::new(),
            logprob: 0.0,
            done: false,
        })
        .collect();
    for step in 0..=max_len {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| !seqs[i].done).collect();
        if active.is_empty() {
            break;
        }
        let rows_idx: Vec<u32> = active.iter().map(|&i| (i / samples) as u32).collect();
        let prefixes: Vec<&[u32]> = active.iter().map(|&i| seqs[i].ids.as_slice()).collect();
        let logprobs = step_logprobs(model, encoded, &rows_idx, &prefixes)?;
        for (&i, lp) in active.iter().zip(&logprobs) {
            let tok = if step == max_len {
                EOS
            } else {
                sample_top_p(lp, top_p, rng)
            };
            let s = &mut seqs[i];
            s.logprob += f64::from(lp[tok as usize]);
            if tok == EOS {
                s.done = true;
            } else {
                s.ids.push(tok);
            }
        }
    }
    Ok(seqs
        .chunks(samples)
        .map(|c| {
            c.iter()
                .map(|b| Decoded {
                    ids: b.ids.clone(),
                    logprob: b.logprob,
                })
                .collect()
        })
        .collect())
}

fn sample_top_p<R: Rng>(logprobs: &[f32], top_p: f64, rng: &mut R) -> u32 {
    let mut order: Vec<u32> = (0..logprobs.len() as u32)
        .filter(|&t| t != PAD && t != BOS)
        .collect();
    order.sort_by(|&a, &b| {
        logprobs[b as usize]
            .partial_cmp(&logprobs[a as usize])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let probs: Vec<f64> = order.iter().map(|&t| f64::from(logprobs[t as usize]).exp()).collect();
    let mut kept = 0;
    let mut mass = 0.0;
    for p in &probs {
        kept += 1;
        mass += p;
        if mass >= top_p {
            break;
        }
    }
    let mut u = rng.random::<f64>() * mass;
    for (tok, p) in order.iter().zip(&probs).take(kept) {
        if u < *p {
            return *tok;
        }
        u -= p;
    }
    order[kept - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedders::{Embedder, EmbeddingVector, SyntheticEmbedder};
    use crate::models::inverter::Conditioning;
    use crate::models::params::ParamStore;
    use rand::SeedableRng;

    fn setup() -> (InverterModel, Vec<EmbeddingVector>) {
        let mut cfg = crate::models::inverter::tests::tiny_config(8, 2, 8);
        cfg.max_tokens = 4;
        let mut ps = ParamStore::new(5, DType::F32);
        let model = InverterModel::build(&cfg, &mut ps).unwrap();
        let vs = SyntheticEmbedder::new(8, 1)
            .embed_batch(&["a".into(), "b".into()])
            .unwrap();
        (model, vs)
    }

    fn encode<'a>(model: &InverterModel, vs: &'a [EmbeddingVector]) -> Encoded {
        let conds: Vec<Conditioning<'a>> = vs
            .iter()
            .map(|v| Conditioning {
                target: v,
                hypothesis: &[],
                hypothesis_embedding: Some(v),
            })
            .collect();
        model.encode(&conds).unwrap()
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let (model, vs) = setup();
        let enc = encode(&model, &vs);
        let a = greedy(&model, &enc).unwrap();
        let b = greedy(&model, &enc).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|d| d.ids.len() <= 4));
    }

    #[test]
    fn beam_returns_sorted_distinct_candidates() {
        let (model, vs) = setup();
        let enc = encode(&model, &vs);
        let out = beam_search(&model, &enc, 3).unwrap();
        for cands in &out {
            assert_eq!(cands.len(), 3);
            assert!(cands.windows(2).all(|w| w[0].logprob >= w[1].logprob));
            assert!(cands[0].ids != cands[1].ids && cands[1].ids != cands[2].ids);
        }
        // beam search never scores below greedy's top sequence
        let g = greedy(&model, &enc).unwrap();
        for (c, g) in out.iter().zip(&g) {
            assert!(c[0].logprob >= g.logprob - 1e-5);
        }
    }

    #[test]
    fn nucleus_is_seeded() {
        let (model, vs) = setup();
        let enc = encode(&model, &vs);
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let a = nucleus(&model, &enc, 3, 0.9, &mut r1).unwrap();
        let b = nucleus(&model, &enc, 3, 0.9, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), 3);
    }

    #[test]
    fn invalid_parameters() {
        assert!(DecodeStrategy::Beam { width: 0 }.validate().unwrap_err().is_config());
        assert!(DecodeStrategy::Nucleus { top_p: 0.0, seed: 0 }.validate().unwrap_err().is_config());
        assert!(DecodeStrategy::Nucleus { top_p: 1.5, seed: 0 }.validate().unwrap_err().is_config());
        assert!(DecodeStrategy::Nucleus { top_p: 1.0, seed: 0 }.validate().is_ok());
    }
}
