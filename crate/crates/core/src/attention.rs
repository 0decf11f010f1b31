//! Scaled dot-product multi-head self-attention.
//!
//! Shapes follow the usual convention: inputs `X: [B, N, d]`, projections
//! `W: [d, d]`, per-head tensors `[B, H, N, d_k]` with `H * d_k = d`, and
//! logits / weights `[B, H, N, N]`. Attention is bidirectional (no causal
//! mask) and the projections carry no bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Tolerance for the row-stochastic check in [`attend`].
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub seq_len: usize,
}

impl AttentionConfig {
    /// Splits `model_dim` evenly over `heads`.
    pub fn new(model_dim: usize, heads: usize, seq_len: usize) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {model_dim} is not divisible into {heads} heads"
            )));
        }
        let cfg = AttentionConfig {
            model_dim,
            heads,
            head_dim: model_dim / heads,
            seq_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.seq_len == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!("attention dimensions must be positive: {self:?}")));
        }
        if self.heads * self.head_dim != self.model_dim {
            return Err(Error::Config(format!(
                "heads ({}) x head_dim ({}) must equal model_dim ({})",
                self.heads, self.head_dim, self.model_dim
            )));
        }
        Ok(())
    }
}

/// Handles to the tensors of one attention sublayer on a graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionBatch {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub logits: Var,
    pub weights: Var,
    pub output: Var,
}

/// `[B, N, d] -> [B, H, N, d_k]`.
pub fn split_heads(g: &mut Graph, x: Var, cfg: &AttentionConfig) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.model_dim {
        return Err(Error::shape("split_heads", &shape, &[cfg.model_dim]));
    }
    let r = g.reshape(x, &[shape[0], shape[1], cfg.heads, cfg.head_dim])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[B, H, N, d_k] -> [B, N, d]`.
pub fn merge_heads(g: &mut Graph, z: Var) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 4 {
        return Err(Error::InvalidShape(format!("merge_heads expects rank 4, got {shape:?}")));
    }
    let p = g.permute(z, &[0, 2, 1, 3])?;
    g.reshape(p, &[shape[0], shape[2], shape[1] * shape[3]])
}

/// Linear projections `Q = X W_q`, `K = X W_k`, `V = X W_v`, split into heads.
pub fn project_qkv(
    g: &mut Graph,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Var, Var)> {
    cfg.validate()?;
    let d = cfg.model_dim;
    for w in [wq, wk, wv] {
        if g.shape(w) != [d, d] {
            return Err(Error::shape("project_qkv", g.shape(w), &[d, d]));
        }
    }
    let mut heads = [wq, wk, wv].into_iter().map(|w| {
        let p = g.matmul(x, w)?;
        split_heads(g, p, cfg)
    });
    let q = heads.next().unwrap()?;
    let k = heads.next().unwrap()?;
    let v = heads.next().unwrap()?;
    Ok((q, k, v))
}

/// `L = Q K^T / sqrt(d_k)`.
pub fn attention_logits(g: &mut Graph, q: Var, k: Var) -> Result<Var> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq != sk || sq.len() < 2 {
        return Err(Error::shape("attention_logits", &sq, &sk));
    }
    let d_k = *sq.last().unwrap() as f64;
    let kt = g.transpose_last2(k)?;
    let scores = g.matmul(q, kt)?;
    Ok(g.scale(scores, 1.0 / d_k.sqrt()))
}

/// `Z = A V`.
///
/// In debug builds, `A` must be row-stochastic to within
/// [`ROW_SUM_TOLERANCE`]; release builds skip the check.
pub fn attend(g: &mut Graph, a: Var, v: Var) -> Result<Var> {
    if cfg!(debug_assertions) {
        check_row_stochastic(g, a)?;
    }
    g.matmul(a, v)
}

fn check_row_stochastic(g: &Graph, a: Var) -> Result<()> {
    let t = g.value(a);
    for (r, row) in t.rows().enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOLERANCE || row.iter().any(|&x| x < -ROW_SUM_TOLERANCE) {
            return Err(Error::Contract(format!(
                "attention row {r} is not a distribution (sums to {total})"
            )));
        }
    }
    Ok(())
}

/// Full self-attention sublayer. `weights_from_logits` turns `L` into `A`;
/// plain softmax for the clean model, a perturbation for AttentionDrop.
pub fn self_attention(
    g: &mut Graph,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    cfg: &AttentionConfig,
    weights_from_logits: impl FnOnce(&mut Graph, Var) -> Result<Var>,
) -> Result<AttentionBatch> {
    let (q, k, v) = project_qkv(g, x, wq, wk, wv, cfg)?;
    let logits = attention_logits(g, q, k)?;
    let weights = weights_from_logits(g, logits)?;
    let output = attend(g, weights, v)?;
    Ok(AttentionBatch {
        q,
        k,
        v,
        logits,
        weights,
        output,
    })
}
