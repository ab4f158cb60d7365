//! Small pre-norm transformer with rotary positions taken from explicit
//! position ids, dense boolean attention masks, an append-only KV cache, and
//! hand-written reverse-mode gradients.

mod cache;
pub mod checkpoint;
pub(crate) mod linalg;
mod model;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use cache::KvCache;
pub use linalg::Matrix;
pub use model::{forward, loss, loss_and_grad, loss_from_logits, CacheMode, TrainExample};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    pub init_scale: f64,
}

impl ModelConfig {
    /// 4 layers, width 128, 4 heads.
    pub fn default_for_vocab(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers: 4,
            d_ff: 512,
            rope_base: 10_000.0,
            init_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.vocab_size, self.d_model, self.n_heads, self.d_ff];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config("rotary embedding needs an even head dimension".into()));
        }
        if !(self.rope_base > 1.0) || !(self.init_scale >= 0.0) {
            return Err(Error::Config("rope_base must exceed 1 and init_scale be >= 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub attn_norm: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    pub mlp_norm: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Model weights. Matrices are row-major `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub config: ModelConfig,
    pub embed: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub final_norm: Vec<f64>,
    pub head: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl Params {
    /// Zero matrices and biases with unit norm gains.
    pub fn zeros(config: &ModelConfig) -> Self {
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let layer = LayerParams {
            attn_norm: vec![1.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            mlp_norm: vec![1.0; d],
            w1: vec![0.0; d * f],
            b1: vec![0.0; f],
            w2: vec![0.0; f * d],
            b2: vec![0.0; d],
        };
        Self {
            config: config.clone(),
            embed: vec![0.0; v * d],
            layers: vec![layer; config.n_layers],
            final_norm: vec![1.0; d],
            head: vec![0.0; d * v],
            head_bias: vec![0.0; v],
        }
    }

    /// Same shapes, every entry zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}.");
            out.extend([
                (format!("{p}attn_norm"), &l.attn_norm),
                (format!("{p}wq"), &l.wq),
                (format!("{p}wk"), &l.wk),
                (format!("{p}wv"), &l.wv),
                (format!("{p}wo"), &l.wo),
                (format!("{p}mlp_norm"), &l.mlp_norm),
                (format!("{p}w1"), &l.w1),
                (format!("{p}b1"), &l.b1),
                (format!("{p}w2"), &l.w2),
                (format!("{p}b2"), &l.b2),
            ]);
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out.push(("head_bias".to_string(), &self.head_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = vec![("embed".to_string(), &mut self.embed)];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}.");
            out.extend([
                (format!("{p}attn_norm"), &mut l.attn_norm),
                (format!("{p}wq"), &mut l.wq),
                (format!("{p}wk"), &mut l.wk),
                (format!("{p}wv"), &mut l.wv),
                (format!("{p}wo"), &mut l.wo),
                (format!("{p}mlp_norm"), &mut l.mlp_norm),
                (format!("{p}w1"), &mut l.w1),
                (format!("{p}b1"), &mut l.b1),
                (format!("{p}w2"), &mut l.w2),
                (format!("{p}b2"), &mut l.b2),
            ]);
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out.push(("head_bias".to_string(), &mut self.head_bias));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Draws matrices and the embedding from `N(0, init_scale^2)`; norm gains
/// start at one and biases at zero.
pub fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Params> {
    config.validate()?;
    let mut params = Params::zeros(config);
    if config.init_scale == 0.0 {
        return Ok(params);
    }
    let normal = Normal::new(0.0, config.init_scale)
        .map_err(|e| Error::Config(format!("init scale: {e}")))?;
    for (name, t) in params.tensors_mut() {
        if name.ends_with("norm") || name.ends_with("b1") || name.ends_with("b2") || name == "head_bias" {
            continue;
        }
        for v in t.iter_mut() {
            *v = normal.sample(rng);
        }
    }
    Ok(params)
}
