//! A small pre-norm GPT-style transformer with tied input/output embeddings,
//! trained from scratch with hand-written backward passes in f64.
//!
//! The embedding matrix covers the whole union vocabulary (tokens and
//! hypernym classes); the output logits are `ln_f(x) · wteᵀ` and the softmax
//! support is chosen per step.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod support;
pub mod transformer;

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

pub use support::{masked_log_softmax_into, masked_softmax, SoftmaxSupport, SupportMode, Supports};
pub use transformer::{ForwardOutput, LanguageModel, OutputHead};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub seq_len: usize,
    pub dropout: f64,
    /// |V_x| + |V_¬x| + |V_h|; filled in from the vocabulary partition.
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(0)
    }
}

impl ModelConfig {
    /// 2 layers, 4 heads, hidden 64, ffn 256, context 64, dropout 0.1.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            hidden_size: 64,
            ffn_size: 256,
            seq_len: 64,
            dropout: 0.1,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("hidden_size", self.hidden_size),
            ("ffn_size", self.ffn_size),
            ("seq_len", self.seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub w_qkv: Range<usize>,   // (C, 3C)
    pub b_qkv: Range<usize>,   // (3C)
    pub w_attn: Range<usize>,  // (C, C)
    pub b_attn: Range<usize>,  // (C)
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub w_fc: Range<usize>,    // (C, F)
    pub b_fc: Range<usize>,    // (F)
    pub w_proj: Range<usize>,  // (F, C)
    pub b_proj: Range<usize>,  // (C)
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub wte: Range<usize>, // (V, C), shared by input and output
    pub wpe: Range<usize>, // (T, C)
    pub layers: Vec<LayerLayout>,
    pub lnf_gain: Range<usize>,
    pub lnf_bias: Range<usize>,
    pub total: usize,
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (c, f) = (cfg.hidden_size, cfg.ffn_size);
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let wte = take(cfg.vocab_size * c);
        let wpe = take(cfg.seq_len * c);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                ln1_gain: take(c),
                ln1_bias: take(c),
                w_qkv: take(c * 3 * c),
                b_qkv: take(3 * c),
                w_attn: take(c * c),
                b_attn: take(c),
                ln2_gain: take(c),
                ln2_bias: take(c),
                w_fc: take(c * f),
                b_fc: take(f),
                w_proj: take(f * c),
                b_proj: take(c),
            })
            .collect();
        let lnf_gain = take(c);
        let lnf_bias = take(c);
        ParamLayout {
            wte,
            wpe,
            layers,
            lnf_gain,
            lnf_bias,
            total: at,
        }
    }

    /// Every tensor with a name and initializer, in storage order.
    pub fn tensors(&self) -> Vec<(String, Range<usize>, Init)> {
        let mut out = vec![
            ("wte".to_string(), self.wte.clone(), Init::Normal),
            ("wpe".to_string(), self.wpe.clone(), Init::Normal),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let named = [
                ("ln1_gain", &layer.ln1_gain, Init::Ones),
                ("ln1_bias", &layer.ln1_bias, Init::Zeros),
                ("w_qkv", &layer.w_qkv, Init::Normal),
                ("b_qkv", &layer.b_qkv, Init::Zeros),
                ("w_attn", &layer.w_attn, Init::Normal),
                ("b_attn", &layer.b_attn, Init::Zeros),
                ("ln2_gain", &layer.ln2_gain, Init::Ones),
                ("ln2_bias", &layer.ln2_bias, Init::Zeros),
                ("w_fc", &layer.w_fc, Init::Normal),
                ("b_fc", &layer.b_fc, Init::Zeros),
                ("w_proj", &layer.w_proj, Init::Normal),
                ("b_proj", &layer.b_proj, Init::Zeros),
            ];
            for (name, r, init) in named {
                out.push((format!("layer{l}.{name}"), r.clone(), init));
            }
        }
        out.push(("lnf_gain".to_string(), self.lnf_gain.clone(), Init::Ones));
        out.push(("lnf_bias".to_string(), self.lnf_bias.clone(), Init::Zeros));
        out
    }

    pub fn tensor_name(&self, index: usize) -> String {
        self.tensors()
            .into_iter()
            .find(|(_, r, _)| r.contains(&index))
            .map(|(name, r, _)| format!("{name}[{}]", index - r.start))
            .unwrap_or_else(|| format!("param[{index}]"))
    }
}

/// Flat parameter storage plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layout = ParamLayout::new(cfg);
        let data = vec![0.0; layout.total];
        ModelParams { layout, data }
    }

    /// Matrices ~ N(0, std²), biases 0, layer-norm gains 1.
    pub fn init(cfg: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut p = Self::zeros(cfg);
        let mut rng = rng::stream(seed, Domain::Init, 0);
        for (_, range, init) in p.layout.tensors() {
            for v in &mut p.data[range] {
                *v = match init {
                    Init::Normal => std * rng.sample::<f64, _>(StandardNormal),
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                };
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    /// Embedding row for an id (input vector and output vector alike).
    pub fn embedding(&self, id: usize, hidden: usize) -> &[f64] {
        let start = self.layout.wte.start + id * hidden;
        &self.data[start..start + hidden]
    }

    pub fn embedding_mut(&mut self, id: usize, hidden: usize) -> &mut [f64] {
        let start = self.layout.wte.start + id * hidden;
        &mut self.data[start..start + hidden]
    }
}
