//! Small post-norm transformer encoder classifier.
//!
//! token + learned position embedding -> `layers` x [self-attention,
//! add & norm, ReLU feed-forward, add & norm] -> mean over tokens ->
//! linear classifier. Attention weights come from a [`Perturber`], so the
//! same forward serves clean evaluation and every AttentionDrop variant.
//!
//! The classifier head starts at zero, so an untrained model predicts a
//! constant class.

use serde::{Deserialize, Serialize};

use crate::attention::{merge_heads, self_attention, AttentionConfig};
use crate::drop::Perturber;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};

use super::task::Batch;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.model_dim, self.heads, self.seq_len)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.vocab, self.seq_len, self.layers, self.model_dim, self.heads, self.ffn_dim]
            .contains(&0)
        {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("model needs >= 2 classes, got {}", self.classes)));
        }
        self.attention().map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Matrices get weight decay; gains, biases do not.
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    attention: AttentionConfig,
    params: Vec<Param>,
}

const PER_LAYER: usize = 12;

/// `build_model`: deterministic initialisation from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<Model> {
    Model::new(config.clone())
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let attention = config.attention()?;
        let mut rng = RngStream::new(config.seed);
        let (d, f) = (config.model_dim, config.ffn_dim);
        let mut params = Vec::new();
        let matrix = |name: String, rows: usize, cols: usize, rng: &mut RngStream| {
            let bound = (6.0 / (rows + cols) as f64).sqrt();
            let value = Tensor::from_fn(&[rows, cols], |_| rng.uniform_range(-bound, bound)).unwrap();
            Param { name, value, decay: true }
        };
        params.push(matrix("tok_emb".into(), config.vocab, d, &mut rng));
        params.push(matrix("pos_emb".into(), config.seq_len, d, &mut rng));
        let vector = |name: String, n: usize, v: f64| Param {
            name,
            value: Tensor::full(&[n], v).unwrap(),
            decay: false,
        };
        for l in 0..config.layers {
            for w in ["wq", "wk", "wv", "wo"] {
                params.push(matrix(format!("l{l}.{w}"), d, d, &mut rng));
            }
            params.push(vector(format!("l{l}.ln1_g"), d, 1.0));
            params.push(vector(format!("l{l}.ln1_b"), d, 0.0));
            params.push(matrix(format!("l{l}.ff1_w"), d, f, &mut rng));
            params.push(vector(format!("l{l}.ff1_b"), f, 0.0));
            params.push(matrix(format!("l{l}.ff2_w"), f, d, &mut rng));
            params.push(vector(format!("l{l}.ff2_b"), d, 0.0));
            params.push(vector(format!("l{l}.ln2_g"), d, 1.0));
            params.push(vector(format!("l{l}.ln2_b"), d, 0.0));
        }
        params.push(Param {
            name: "cls_w".into(),
            value: Tensor::zeros(&[d, config.classes]).unwrap(),
            decay: true,
        });
        params.push(vector("cls_b".into(), config.classes, 0.0));
        Ok(Model {
            config,
            attention,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// All parameters concatenated in declaration order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::shape("set_flat_params", &[self.num_parameters()], &[flat.len()]));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn register(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Class logits `[B, C]` for a batch.
    pub fn forward(&self, g: &mut Graph, params: &[Var], batch: &Batch, perturber: &mut Perturber) -> Result<Var> {
        let (n, d) = (self.config.seq_len, self.config.model_dim);
        if batch.seq_len != n {
            return Err(Error::shape("forward", &[batch.seq_len], &[n]));
        }
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter handles, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let b = batch.size();
        let emb = g.embedding(params[0], &batch.tokens, &[b, n])?;
        let mut x = g.add_broadcast(emb, params[1])?;
        for l in 0..self.config.layers {
            let p = &params[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
            let att = self_attention(g, x, p[0], p[1], p[2], &self.attention, |g, logits| {
                perturber.weights(g, logits)
            })?;
            let merged = merge_heads(g, att.output)?;
            let projected = g.matmul(merged, p[3])?;
            let res1 = g.add(x, projected)?;
            let h = g.layer_norm(res1, p[4], p[5], LN_EPS)?;
            let f1 = g.matmul(h, p[6])?;
            let f1 = g.add_broadcast(f1, p[7])?;
            let f1 = g.relu(f1);
            let f2 = g.matmul(f1, p[8])?;
            let f2 = g.add_broadcast(f2, p[9])?;
            let res2 = g.add(h, f2)?;
            x = g.layer_norm(res2, p[10], p[11], LN_EPS)?;
        }
        let pooled = g.mean_axis(x, 1)?;
        debug_assert_eq!(g.shape(pooled), &[b, d]);
        let k = params.len();
        let logits = g.matmul(pooled, params[k - 2])?;
        g.add_broadcast(logits, params[k - 1])
    }
}
