//! Maximum-likelihood training for the base inverter and the corrector,
//! with checkpointing.
//!
//! Checkpoint directory: `config.json` (role, architecture, φ(∅), training
//! state), `weights.safetensors`, `optimizer.safetensors`.

use std::io::Write;
use std::path::Path;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::inverter::{Conditioning, InverterConfig, InverterModel};
use super::params::{Adam, ParamStore};
use crate::embedders::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelRole {
    Base,
    Corrector,
}

/// A trainable inverter network plus the metadata needed to condition it.
pub struct Inverter {
    pub role: ModelRole,
    config: InverterConfig,
    /// φ(∅): the hypothesis embedding the base model is conditioned on.
    pub empty_embedding: EmbeddingVector,
    params: ParamStore,
    net: InverterModel,
}

impl Inverter {
    pub fn new(role: ModelRole, config: InverterConfig, empty_embedding: EmbeddingVector, seed: u64) -> Result<Self> {
        if empty_embedding.dim() != config.embedder.dimension {
            return Err(Error::contract("φ(∅) dimension differs from the embedder"));
        }
        let mut params = ParamStore::new(seed, DType::F32);
        let net = InverterModel::build(&config, &mut params)?;
        params.freeze();
        Ok(Self {
            role,
            config,
            empty_embedding,
            params,
            net,
        })
    }

    pub fn config(&self) -> &InverterConfig {
        &self.config
    }

    pub fn net(&self) -> &InverterModel {
        &self.net
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Base-case conditioning: `(e, ∅, φ(∅))`.
    pub fn base_conditioning<'a>(&'a self, target: &'a EmbeddingVector) -> Conditioning<'a> {
        Conditioning {
            target,
            hypothesis: &[],
            hypothesis_embedding: Some(&self.empty_embedding),
        }
    }
}

/// One supervised example: conditioning inputs plus the gold token ids.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub target: EmbeddingVector,
    pub hypothesis: Vec<u32>,
    pub hypothesis_embedding: Option<EmbeddingVector>,
    pub gold: Vec<u32>,
}

impl TrainingPair {
    fn conditioning(&self) -> Conditioning<'_> {
        Conditioning {
            target: &self.target,
            hypothesis: &self.hypothesis,
            hypothesis_embedding: self.hypothesis_embedding.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    /// Evaluate on the held-out pairs every this many steps (0 = only at the end).
    pub eval_every: usize,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 2e-4,
            warmup_fraction: 0.05,
            max_steps: None,
            seed: 0,
            clip_norm: Some(1.0),
            eval_every: 0,
        }
    }
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::config("warmup_fraction must be in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, examples: usize) -> usize {
        examples.div_ceil(self.batch_size).max(1)
    }

    pub fn total_steps(&self, examples: usize) -> usize {
        self.max_steps
            .unwrap_or(self.epochs * self.steps_per_epoch(examples))
    }
}

/// Linear warmup from 0 over `warmup_fraction · total` steps, then linear
/// decay to 0 at `total`.
pub fn learning_rate_at(step: usize, total: usize, hp: &TrainHyperparams) -> f64 {
    let warmup = (hp.warmup_fraction * total as f64).round() as usize;
    if step < warmup {
        hp.learning_rate * step as f64 / warmup as f64
    } else if step >= total {
        0.0
    } else {
        hp.learning_rate * (total - step) as f64 / (total - warmup).max(1) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub best_eval_loss: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub token_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_token_accuracy: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub token_accuracy: f64,
}

/// Owns an inverter and its optimizer for the duration of a training job.
pub struct Trainer {
    pub inverter: Inverter,
    pub hyperparams: TrainHyperparams,
    pub state: TrainState,
    optimizer: Adam,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    role: ModelRole,
    config: InverterConfig,
    empty_embedding: EmbeddingVector,
    hyperparams: TrainHyperparams,
    state: TrainState,
}

impl Trainer {
    pub fn new(inverter: Inverter, hyperparams: TrainHyperparams) -> Result<Self> {
        hyperparams.validate()?;
        let mut optimizer = Adam::default();
        optimizer.clip_norm = hyperparams.clip_norm;
        Ok(Self {
            state: TrainState {
                step: 0,
                best_eval_loss: None,
                seed: hyperparams.seed,
            },
            inverter,
            hyperparams,
            optimizer,
        })
    }

    fn check_pairs(&self, pairs: &[TrainingPair]) -> Result<()> {
        let cfg = self.inverter.config();
        for (i, p) in pairs.iter().enumerate() {
            if p.target.dim() != cfg.embedder.dimension {
                return Err(Error::config(format!(
                    "example {i}: {}-dim target, model expects {}",
                    p.target.dim(),
                    cfg.embedder.dimension
                )));
            }
            if let Some(&bad) = p
                .gold
                .iter()
                .chain(&p.hypothesis)
                .find(|&&t| t as usize >= cfg.vocab_size)
            {
                return Err(Error::config(format!(
                    "example {i}: token id {bad} outside vocabulary of {}",
                    cfg.vocab_size
                )));
            }
        }
        Ok(())
    }

    fn batch_loss(&self, batch: &[&TrainingPair]) -> Result<super::inverter::LossOutput> {
        let conds: Vec<Conditioning<'_>> = batch.iter().map(|p| p.conditioning()).collect();
        let gold: Vec<&[u32]> = batch.iter().map(|p| p.gold.as_slice()).collect();
        self.inverter.net.loss(&conds, &gold)
    }

    /// Mean per-token NLL and token accuracy (teacher forcing).
    pub fn evaluate(&self, pairs: &[TrainingPair]) -> Result<EvalResult> {
        evaluate_pairs(&self.inverter, pairs, self.hyperparams.batch_size)
    }

    /// Runs until the configured step budget is exhausted, resuming from
    /// `state.step`. Each step's record is appended to `log` as JSON.
    pub fn train(
        &mut self,
        train: &[TrainingPair],
        eval: &[TrainingPair],
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<StepRecord>> {
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        self.check_pairs(train)?;
        self.check_pairs(eval)?;
        let hp = self.hyperparams.clone();
        let per_epoch = hp.steps_per_epoch(train.len());
        let total = hp.total_steps(train.len());
        let mut records = Vec::new();
        let mut order: Vec<usize> = Vec::new();
        let mut order_epoch = usize::MAX;
        while self.state.step < total {
            let step = self.state.step;
            let epoch = step / per_epoch;
            if epoch != order_epoch {
                order = (0..train.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
                order.shuffle(&mut rng);
                order_epoch = epoch;
            }
            let start = (step % per_epoch) * hp.batch_size;
            let batch: Vec<&TrainingPair> = order[start..(start + hp.batch_size).min(train.len())]
                .iter()
                .map(|&i| &train[i])
                .collect();
            let out = self.batch_loss(&batch)?;
            let loss = f64::from(out.loss.to_scalar::<f32>()?);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss is {loss} at step {step}")));
            }
            let lr = learning_rate_at(step, total, &hp);
            let grads = out.loss.backward()?;
            self.optimizer.step(&self.inverter.params, &grads, lr)?;
            self.state.step += 1;

            let mut record = StepRecord {
                step,
                loss,
                lr,
                token_accuracy: out.correct as f64 / out.total as f64,
                eval_loss: None,
                eval_token_accuracy: None,
            };
            let last = self.state.step == total;
            if !eval.is_empty() && ((hp.eval_every > 0 && self.state.step % hp.eval_every == 0) || last) {
                let ev = self.evaluate(eval)?;
                record.eval_loss = Some(ev.loss);
                record.eval_token_accuracy = Some(ev.token_accuracy);
                if self.state.best_eval_loss.is_none_or(|b| ev.loss < b) {
                    self.state.best_eval_loss = Some(ev.loss);
                }
            }
            if let Some(w) = log.as_deref_mut() {
                serde_json::to_writer(&mut *w, &record)?;
                writeln!(w).map_err(|e| Error::io("<metrics log>", e))?;
            }
            if step % 100 == 0 || last {
                tracing::info!(step, loss, lr, acc = record.token_accuracy, "train step");
            }
            records.push(record);
        }
        Ok(records)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = CheckpointManifest {
            role: self.inverter.role,
            config: self.inverter.config.clone(),
            empty_embedding: self.inverter.empty_embedding.clone(),
            hyperparams: self.hyperparams.clone(),
            state: self.state.clone(),
        };
        let path = dir.join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        self.inverter.params.save(&dir.join("weights.safetensors"))?;
        self.optimizer.save(&dir.join("optimizer.safetensors"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("config.json");
        let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&raw)?;
        let inverter = load_weights(dir, manifest.role, manifest.config, manifest.empty_embedding)?;
        let mut optimizer = Adam::load(&dir.join("optimizer.safetensors"))?;
        optimizer.clip_norm = manifest.hyperparams.clip_norm;
        Ok(Self {
            inverter,
            hyperparams: manifest.hyperparams,
            state: manifest.state,
            optimizer,
        })
    }
}

fn load_weights(dir: &Path, role: ModelRole, config: InverterConfig, empty: EmbeddingVector) -> Result<Inverter> {
    let path = dir.join("weights.safetensors");
    if !path.exists() {
        return Err(Error::config(format!("{} does not exist", path.display())));
    }
    let mut params = ParamStore::load(&path)?;
    let net = InverterModel::build(&config, &mut params)?;
    Ok(Inverter {
        role,
        config,
        empty_embedding: empty,
        params,
        net,
    })
}

/// Loads only the model from a checkpoint directory.
pub fn load_inverter(dir: &Path) -> Result<Inverter> {
    Ok(Trainer::load(dir)?.inverter)
}

pub fn evaluate_pairs(inverter: &Inverter, pairs: &[TrainingPair], batch_size: usize) -> Result<EvalResult> {
    if pairs.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let mut nll = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let conds: Vec<Conditioning<'_>> = chunk.iter().map(|p| p.conditioning()).collect();
        let gold: Vec<&[u32]> = chunk.iter().map(|p| p.gold.as_slice()).collect();
        let out = inverter.net().loss(&conds, &gold)?;
        nll += f64::from(out.loss.to_scalar::<f32>()?) * out.total as f64;
        correct += out.correct;
        total += out.total;
    }
    Ok(EvalResult {
        loss: nll / total as f64,
        token_accuracy: correct as f64 / total as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_warms_up_then_decays() {
        let hp = TrainHyperparams {
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            ..Default::default()
        };
        assert_eq!(learning_rate_at(0, 100, &hp), 0.0);
        assert!((learning_rate_at(5, 100, &hp) - 5e-4).abs() < 1e-12);
        assert!((learning_rate_at(10, 100, &hp) - 1e-3).abs() < 1e-12);
        assert!((learning_rate_at(55, 100, &hp) - 5e-4).abs() < 1e-12);
        assert_eq!(learning_rate_at(100, 100, &hp), 0.0);
    }

    #[test]
    fn defaults_follow_reference_setup() {
        let hp = TrainHyperparams::default();
        assert_eq!(hp.epochs, 100);
        assert_eq!(hp.batch_size, 128);
        assert_eq!(hp.learning_rate, 2e-4);
        assert_eq!(hp.total_steps(1000), 100 * 8);
    }
}
