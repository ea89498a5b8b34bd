//! Projection of one embedding vector into `s` pseudo-token vectors:
//! `W2 · σ(W1 · e)` reshaped to `(s, d_enc)`. No biases; σ is GELU.

use candle_core::{Module, Tensor};
use candle_nn::Linear;

use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ProjectionHead {
    w1: Linear,
    w2: Linear,
    embed_dim: usize,
    seq_len: usize,
    enc_dim: usize,
}

impl ProjectionHead {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        seq_len: usize,
        enc_dim: usize,
    ) -> Result<Self> {
        if seq_len == 0 || embed_dim == 0 || enc_dim == 0 {
            return Err(Error::config("projection dimensions must be positive"));
        }
        let w1 = ps.get(&format!("{name}.w1"), &[embed_dim, embed_dim], Init::Normal(1.0))?;
        let w2 = ps.get(
            &format!("{name}.w2"),
            &[seq_len * enc_dim, embed_dim],
            Init::Normal(1.0 / (embed_dim as f64).sqrt()),
        )?;
        Ok(Self::from_weights(w1, w2, seq_len, enc_dim)?)
    }

    /// `w1` is `(d, d)`, `w2` is `(s·d_enc, d)`.
    pub fn from_weights(w1: Tensor, w2: Tensor, seq_len: usize, enc_dim: usize) -> Result<Self> {
        let (o1, embed_dim) = w1.dims2()?;
        let (o2, i2) = w2.dims2()?;
        if o1 != embed_dim || i2 != embed_dim || o2 != seq_len * enc_dim {
            return Err(Error::contract(format!(
                "projection weights {:?}/{:?} do not fit d={embed_dim}, s={seq_len}, d_enc={enc_dim}",
                w1.dims(),
                w2.dims()
            )));
        }
        Ok(Self {
            w1: Linear::new(w1, None),
            w2: Linear::new(w2, None),
            embed_dim,
            seq_len,
            enc_dim,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn enc_dim(&self) -> usize {
        self.enc_dim
    }

    /// `(batch, d)` to `(batch, s, d_enc)`.
    pub fn forward(&self, e: &Tensor) -> Result<Tensor> {
        let (b, d) = e.dims2()?;
        if d != self.embed_dim {
            return Err(Error::contract(format!(
                "projection expects {}-dim embeddings, got {d}",
                self.embed_dim
            )));
        }
        let h = self.w1.forward(e)?.gelu()?;
        Ok(self.w2.forward(&h)?.reshape((b, self.seq_len, self.enc_dim))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let dev = Device::Cpu;
        let head = ProjectionHead::from_weights(
            Tensor::zeros((4, 4), DType::F64, &dev).unwrap(),
            Tensor::zeros((6, 4), DType::F64, &dev).unwrap(),
            2,
            3,
        )
        .unwrap();
        let e = Tensor::new(&[[0.5f64, -1.0, 2.0, 0.1]], &dev).unwrap();
        let out = head.forward(&e).unwrap();
        assert_eq!(out.dims(), &[1, 2, 3]);
        assert!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_hand_multiply() {
        // d=2, s=1, d_enc=2
        let dev = Device::Cpu;
        let w1 = [[1.0, 0.0], [0.5, -1.0]];
        let w2 = [[2.0, 1.0], [0.0, 1.0]];
        let e = [0.3, 0.7];
        let h: Vec<f64> = w1.iter().map(|r| gelu(r[0] * e[0] + r[1] * e[1])).collect();
        let expected: Vec<f64> = w2.iter().map(|r| r[0] * h[0] + r[1] * h[1]).collect();
        let head = ProjectionHead::from_weights(
            Tensor::new(&w1, &dev).unwrap(),
            Tensor::new(&w2, &dev).unwrap(),
            1,
            2,
        )
        .unwrap();
        let out = head
            .forward(&Tensor::new(&[e], &dev).unwrap())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for (o, x) in out.iter().zip(&expected) {
            assert!((o - x).abs() < 1e-12, "{out:?} vs {expected:?}");
        }
    }

    #[test]
    fn rejects_wrong_embedding_dim() {
        let mut ps = ParamStore::new(0, DType::F32);
        let head = ProjectionHead::new(&mut ps, "p", 4, 2, 3).unwrap();
        let e = Tensor::zeros((1, 5), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(head.forward(&e), Err(Error::Contract(_))));
    }

    #[test]
    fn default_length_sixteen() {
        let mut ps = ParamStore::new(0, DType::F32);
        let head = ProjectionHead::new(&mut ps, "p", 8, 16, 4).unwrap();
        let e = Tensor::ones((3, 8), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(head.forward(&e).unwrap().dims(), &[3, 16, 4]);
    }
}
