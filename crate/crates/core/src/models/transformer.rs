//! Pre-LayerNorm encoder/decoder blocks.

use candle_core::{Module, Tensor, D};
use candle_nn::Linear;

use super::params::{Init, ParamStore};
use crate::error::Result;

pub(crate) fn linear(
    ps: &mut ParamStore,
    name: &str,
    inputs: usize,
    outputs: usize,
    bias: bool,
) -> Result<Linear> {
    let w = ps.get(
        &format!("{name}.weight"),
        &[outputs, inputs],
        Init::Normal(1.0 / (inputs as f64).sqrt()),
    )?;
    let b = if bias {
        Some(ps.get(&format!("{name}.bias"), &[outputs], Init::Const(0.0))?)
    } else {
        None
    };
    Ok(Linear::new(w, b))
}

/// Layer normalization over the last dimension, composed from primitive ops
/// so that it participates in backpropagation.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

pub(crate) fn layer_norm(ps: &mut ParamStore, name: &str, dim: usize) -> Result<LayerNorm> {
    Ok(LayerNorm {
        weight: ps.get(&format!("{name}.weight"), &[dim], Init::Const(1.0))?,
        bias: ps.get(&format!("{name}.bias"), &[dim], Init::Const(0.0))?,
        eps: 1e-5,
    })
}

#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: linear(ps, &format!("{name}.q"), dim, dim, true)?,
            k: linear(ps, &format!("{name}.k"), dim, dim, true)?,
            v: linear(ps, &format!("{name}.v"), dim, dim, true)?,
            out: linear(ps, &format!("{name}.out"), dim, dim, true)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `mask` is additive and broadcast against `(batch, heads, tq, tk)`.
    pub fn forward(&self, query: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(memory)?)?;
        let v = self.split(&self.v.forward(memory)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        Ok(self.out.forward(&ctx)?)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: linear(ps, &format!("{name}.up"), dim, hidden, true)?,
            down: linear(ps, &format!("{name}.down"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.down.forward(&self.up.forward(x)?.gelu()?)?)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln_attn: layer_norm(ps, &format!("{name}.ln_attn"), dim)?,
            attn: Attention::new(ps, &format!("{name}.attn"), dim, heads)?,
            ln_ff: layer_norm(ps, &format!("{name}.ln_ff"), dim)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, hidden)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.ln_attn.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, Some(mask))?)?;
        let h = self.ln_ff.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            ln_self: layer_norm(ps, &format!("{name}.ln_self"), dim)?,
            self_attn: Attention::new(ps, &format!("{name}.self_attn"), dim, heads)?,
            ln_cross: layer_norm(ps, &format!("{name}.ln_cross"), dim)?,
            cross_attn: Attention::new(ps, &format!("{name}.cross_attn"), dim, heads)?,
            ln_ff: layer_norm(ps, &format!("{name}.ln_ff"), dim)?,
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, hidden)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        causal: &Tensor,
        memory_mask: &Tensor,
    ) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let x = (x + self.self_attn.forward(&h, &h, Some(causal))?)?;
        let h = self.ln_cross.forward(&x)?;
        let x = (&x + self.cross_attn.forward(&h, memory, Some(memory_mask))?)?;
        let h = self.ln_ff.forward(&x)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}

/// Additive causal mask of shape `(t, t)`.
pub fn causal_mask(t: usize, dtype: candle_core::DType, device: &candle_core::Device) -> Result<Tensor> {
    let data: Vec<f32> = (0..t)
        .flat_map(|i| (0..t).map(move |j| if j <= i { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(data, (t, t), device)?.to_dtype(dtype)?)
}

/// Additive key-padding mask of shape `(batch, 1, 1, t)` from valid lengths.
pub fn padding_mask(
    lengths: &[usize],
    t: usize,
    dtype: candle_core::DType,
    device: &candle_core::Device,
) -> Result<Tensor> {
    let data: Vec<f32> = lengths
        .iter()
        .flat_map(|&len| (0..t).map(move |j| if j < len { 0.0 } else { -1e9 }))
        .collect();
    Ok(Tensor::from_vec(data, (lengths.len(), 1, 1, t), device)?.to_dtype(dtype)?)
}

pub(crate) fn last_position(x: &Tensor) -> Result<Tensor> {
    let t = x.dim(1)?;
    Ok(x.narrow(1, t - 1, 1)?.squeeze(1)?)
}

pub(crate) fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::log_softmax(x, D::Minus1)?)
}
