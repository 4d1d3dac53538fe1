use super::params::{Forward, ParamId, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Epsilon added to the variance inside layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gain), f.param(self.bias));
        f.tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Multi-head self-attention over the joints of each sample.
///
/// A fused projection produces `Q`, `K` and `V` (each `dim` wide), which are
/// split into `heads` slices of width `dim / heads`. Scores are scaled by
/// `1 / sqrt(dim / heads)`.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    dim: usize,
    heads: usize,
    qkv_weight: ParamId,
    qkv_bias: ParamId,
    proj_weight: ParamId,
    proj_bias: ParamId,
}

impl MultiHeadSelfAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model dim {dim} is not divisible by {heads} heads"
            )));
        }
        let bound = 1.0 / (dim as f64).sqrt();
        let qkv_weight =
            store.add_uniform(format!("{name}.qkv.weight"), &[dim, 3 * dim], bound, rng);
        let qkv_bias = store.add(format!("{name}.qkv.bias"), Tensor::zeros(&[3 * dim]));
        let proj_weight = store.add_uniform(format!("{name}.proj.weight"), &[dim, dim], bound, rng);
        let proj_bias = store.add(format!("{name}.proj.bias"), Tensor::zeros(&[dim]));
        Ok(Self {
            dim,
            heads,
            qkv_weight,
            qkv_bias,
            proj_weight,
            proj_bias,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(f, x)?.0)
    }

    /// Also returns each head's attention matrix (`[.., j, j]`).
    pub fn forward_with_attention(&self, f: &mut Forward, x: Var) -> Result<(Var, Vec<Var>)> {
        let xs = f.tape.shape(x);
        if xs.len() < 2 || xs[xs.len() - 1] != self.dim {
            return Err(Error::Shape {
                op: "mhsa",
                lhs: vec![self.dim],
                rhs: xs.to_vec(),
            });
        }
        let (w, b) = (f.param(self.qkv_weight), f.param(self.qkv_bias));
        let qkv = f.tape.matmul(x, w)?;
        let qkv = f.tape.add(qkv, b)?;
        let head_dim = self.dim / self.heads;
        let widths = vec![head_dim; 3 * self.heads];
        let pieces = f.tape.split(qkv, &widths)?;
        let (q, rest) = pieces.split_at(self.heads);
        let (k, v) = rest.split_at(self.heads);
        let scale = 1.0 / (head_dim as f64).sqrt();

        let mut outputs = Vec::with_capacity(self.heads);
        let mut attention = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let kt = f.tape.transpose_last_two(k[h])?;
            let scores = f.tape.matmul(q[h], kt)?;
            let scores = f.tape.scale(scores, scale);
            let attn = f.tape.softmax_last_axis(scores);
            outputs.push(f.tape.matmul(attn, v[h])?);
            attention.push(attn);
        }
        let merged = if outputs.len() == 1 {
            outputs[0]
        } else {
            f.tape.concat(&outputs)?
        };
        let (pw, pb) = (f.param(self.proj_weight), f.param(self.proj_bias));
        let y = f.tape.matmul(merged, pw)?;
        Ok((f.tape.add(y, pb)?, attention))
    }
}
