//! Encoder-decoder inverter conditioned on embeddings.
//!
//! The encoder input for one example is
//! `[P_e(e) ; P_h(ê) ; P_d(e − ê) ; w_1 .. w_n]`, i.e. `3s + n` vectors: three
//! independent projection heads followed by the word embeddings of the
//! hypothesis. The base model is the same network with an empty hypothesis
//! and `ê = φ(∅)`.

use candle_core::{DType, Device, IndexOp, Module, Tensor};
use candle_nn::{Embedding, Linear};
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamStore};
use super::projection::ProjectionHead;
use super::transformer::{
    causal_mask, layer_norm, linear, padding_mask, DecoderLayer, EncoderLayer, LayerNorm,
};
use crate::embedders::{EmbedderDescriptor, EmbeddingVector};
use crate::error::{Error, Result};
use crate::tokenizer::{BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InverterConfig {
    pub tokenizer_id: String,
    pub vocab_size: usize,
    /// Encoder/decoder hidden size (`d_enc`).
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_hidden: usize,
    /// Pseudo-tokens per projected embedding (`s`).
    pub projection_len: usize,
    pub max_tokens: usize,
    pub embedder: EmbedderDescriptor,
    /// When false, the hypothesis embedding is replaced by zeros, giving a
    /// text-only corrector.
    pub feedback: bool,
}

impl InverterConfig {
    pub const DEFAULT_PROJECTION_LEN: usize = 16;

    pub fn new(tokenizer_id: &str, vocab_size: usize, embedder: EmbedderDescriptor, max_tokens: usize) -> Self {
        Self {
            tokenizer_id: tokenizer_id.to_string(),
            vocab_size,
            d_model: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_hidden: 512,
            projection_len: Self::DEFAULT_PROJECTION_LEN,
            max_tokens,
            embedder,
            feedback: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection_len == 0 {
            return Err(Error::config("projection_len must be at least 1"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size <= EOS as usize || self.max_tokens == 0 {
            return Err(Error::config("vocab_size and max_tokens must be positive"));
        }
        self.embedder.validate()
    }

    /// Encoder sequence length for a hypothesis of `n` tokens.
    pub fn encoder_len(&self, n: usize) -> usize {
        3 * self.projection_len + n
    }
}

/// One example's conditioning: target `e`, hypothesis tokens, and `ê`.
#[derive(Clone, Copy, Debug)]
pub struct Conditioning<'a> {
    pub target: &'a EmbeddingVector,
    pub hypothesis: &'a [u32],
    /// `None` means "no feedback": zeros are used in place of `ê`.
    pub hypothesis_embedding: Option<&'a EmbeddingVector>,
}

/// Encoder output for a batch, with its key-padding mask.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub memory: Tensor,
    pub mask: Tensor,
}

impl Encoded {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.memory.dim(0)?)
    }

    /// Rows `indices` of the batch, in order (repeats allowed).
    pub fn select(&self, indices: &[u32]) -> Result<Encoded> {
        let idx = Tensor::new(indices, self.memory.device())?;
        Ok(Encoded {
            memory: self.memory.index_select(&idx, 0)?,
            mask: self.mask.index_select(&idx, 0)?,
        })
    }
}

pub struct InverterModel {
    config: InverterConfig,
    heads: [ProjectionHead; 3],
    tokens: Embedding,
    encoder_pos: Tensor,
    decoder_pos: Tensor,
    encoder: Vec<EncoderLayer>,
    encoder_ln: LayerNorm,
    decoder: Vec<DecoderLayer>,
    decoder_ln: LayerNorm,
    lm_head: Linear,
    dtype: DType,
    device: Device,
}

impl InverterModel {
    pub fn build(config: &InverterConfig, ps: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let (d, s, dm) = (config.embedder.dimension, config.projection_len, config.d_model);
        let heads = [
            ProjectionHead::new(ps, "proj.target", d, s, dm)?,
            ProjectionHead::new(ps, "proj.hypothesis", d, s, dm)?,
            ProjectionHead::new(ps, "proj.difference", d, s, dm)?,
        ];
        let table = ps.get("tokens", &[config.vocab_size, dm], Init::Normal(0.1))?;
        let encoder_pos = ps.get(
            "encoder.pos",
            &[config.encoder_len(config.max_tokens), dm],
            Init::Normal(0.1),
        )?;
        let decoder_pos = ps.get("decoder.pos", &[config.max_tokens + 1, dm], Init::Normal(0.1))?;
        let encoder = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(ps, &format!("encoder.{i}"), dm, config.heads, config.ff_hidden))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(ps, &format!("decoder.{i}"), dm, config.heads, config.ff_hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            heads,
            tokens: Embedding::new(table, dm),
            encoder_pos,
            decoder_pos,
            encoder,
            encoder_ln: layer_norm(ps, "encoder.ln", dm)?,
            decoder,
            decoder_ln: layer_norm(ps, "decoder.ln", dm)?,
            lm_head: linear(ps, "lm_head", dm, config.vocab_size, true)?,
            dtype: ps.dtype(),
            device: ps.device().clone(),
        })
    }

    pub fn config(&self) -> &InverterConfig {
        &self.config
    }

    pub fn projection_heads(&self) -> &[ProjectionHead; 3] {
        &self.heads
    }

    fn vectors(&self, rows: &[&[f32]]) -> Result<Tensor> {
        let d = self.config.embedder.dimension;
        let mut flat = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::contract(format!(
                    "model expects {d}-dim embeddings, got {}",
                    r.len()
                )));
            }
            flat.extend_from_slice(r);
        }
        Ok(Tensor::from_vec(flat, (rows.len(), d), &self.device)?.to_dtype(self.dtype)?)
    }

    /// Concatenates `P_e(e)`, `P_h(ê)`, `P_d(e − ê)` and the hypothesis word
    /// embeddings along the sequence axis. `target`/`hypothesis_embedding`
    /// are `(batch, d)`; `words` is `(batch, n, d_enc)` or `None` for `n = 0`.
    pub fn assemble_corrector_input(
        &self,
        target: &Tensor,
        hypothesis_embedding: &Tensor,
        words: Option<&Tensor>,
    ) -> Result<Tensor> {
        if target.dims() != hypothesis_embedding.dims() {
            return Err(Error::contract(format!(
                "target {:?} and hypothesis embedding {:?} differ in shape",
                target.dims(),
                hypothesis_embedding.dims()
            )));
        }
        let diff = (target - hypothesis_embedding)?;
        let mut parts = vec![
            self.heads[0].forward(target)?,
            self.heads[1].forward(hypothesis_embedding)?,
            self.heads[2].forward(&diff)?,
        ];
        if let Some(w) = words {
            parts.push(w.clone());
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    pub fn encode(&self, batch: &[Conditioning<'_>]) -> Result<Encoded> {
        if batch.is_empty() {
            return Err(Error::contract("empty conditioning batch"));
        }
        let max_n = self.config.max_tokens;
        let targets: Vec<&[f32]> = batch.iter().map(|c| c.target.values.as_slice()).collect();
        let zeros = vec![0.0f32; self.config.embedder.dimension];
        let feedback: Vec<&[f32]> = batch
            .iter()
            .map(|c| match (self.config.feedback, c.hypothesis_embedding) {
                (true, Some(e)) => e.values.as_slice(),
                _ => zeros.as_slice(),
            })
            .collect();
        let lens: Vec<usize> = batch.iter().map(|c| c.hypothesis.len().min(max_n)).collect();
        let n = lens.iter().copied().max().unwrap_or(0);
        let words = if n > 0 {
            let mut ids = Vec::with_capacity(batch.len() * n);
            for (c, &len) in batch.iter().zip(&lens) {
                ids.extend_from_slice(&c.hypothesis[..len]);
                ids.extend(std::iter::repeat(PAD).take(n - len));
            }
            let ids = Tensor::from_vec(ids, (batch.len(), n), &self.device)?;
            Some(self.tokens.forward(&ids)?)
        } else {
            None
        };
        let x = self.assemble_corrector_input(&self.vectors(&targets)?, &self.vectors(&feedback)?, words.as_ref())?;
        let t = x.dim(1)?;
        let mut x = x.broadcast_add(&self.encoder_pos.i(..t)?)?;
        let prefix = 3 * self.config.projection_len;
        let valid: Vec<usize> = lens.iter().map(|l| prefix + l).collect();
        let mask = padding_mask(&valid, t, self.dtype, &self.device)?;
        for layer in &self.encoder {
            x = layer.forward(&x, &mask)?;
        }
        Ok(Encoded {
            memory: self.encoder_ln.forward(&x)?,
            mask,
        })
    }

    /// Next-token logits `(batch, t, vocab)` for decoder inputs `(batch, t)`
    /// that start with BOS.
    pub fn decode(&self, encoded: &Encoded, inputs: &Tensor) -> Result<Tensor> {
        let (_, t) = inputs.dims2()?;
        if t > self.config.max_tokens + 1 {
            return Err(Error::contract(format!(
                "decoder input of length {t} exceeds max_tokens + 1"
            )));
        }
        let mut x = self.tokens.forward(inputs)?.broadcast_add(&self.decoder_pos.i(..t)?)?;
        let causal = causal_mask(t, self.dtype, &self.device)?;
        for layer in &self.decoder {
            x = layer.forward(&x, &encoded.memory, &causal, &encoded.mask)?;
        }
        Ok(self.lm_head.forward(&self.decoder_ln.forward(&x)?)?)
    }

    /// Mean token-level negative log-likelihood of `gold` (each truncated to
    /// `max_tokens`, EOS appended) plus the count of argmax-correct tokens.
    pub fn loss(&self, batch: &[Conditioning<'_>], gold: &[&[u32]]) -> Result<LossOutput> {
        if batch.len() != gold.len() {
            return Err(Error::contract("conditioning and gold batches differ in size"));
        }
        let encoded = self.encode(batch)?;
        let max_n = self.config.max_tokens;
        let t = gold.iter().map(|g| g.len().min(max_n)).max().unwrap_or(0) + 1;
        let mut inputs = Vec::with_capacity(gold.len() * t);
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        for (row, g) in gold.iter().enumerate() {
            let g = &g[..g.len().min(max_n)];
            inputs.push(BOS);
            inputs.extend_from_slice(g);
            inputs.extend(std::iter::repeat(PAD).take(t - 1 - g.len()));
            for (j, &tok) in g.iter().chain(std::iter::once(&EOS)).enumerate() {
                positions.push((row * t + j) as u32);
                targets.push(tok);
            }
        }
        let inputs = Tensor::from_vec(inputs, (gold.len(), t), &self.device)?;
        let logits = self.decode(&encoded, &inputs)?;
        let flat = logits.reshape((gold.len() * t, self.config.vocab_size))?;
        let picked = flat.index_select(&Tensor::new(positions.as_slice(), &self.device)?, 0)?;
        let target_t = Tensor::new(targets.as_slice(), &self.device)?;
        let nll = candle_nn::loss::cross_entropy(&picked.to_dtype(DType::F32)?, &target_t)?;
        let predicted = picked.argmax(1)?.to_vec1::<u32>()?;
        let correct = predicted.iter().zip(&targets).filter(|(p, g)| p == g).count();
        Ok(LossOutput {
            loss: nll,
            correct,
            total: targets.len(),
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }
}

pub struct LossOutput {
    pub loss: Tensor,
    pub correct: usize,
    pub total: usize,
}
