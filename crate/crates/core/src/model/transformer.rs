use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, gemm, View};
use super::support::{masked_log_softmax_into, SoftmaxSupport, SupportMode, Supports};
use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::vocab::{Batch, TokenId};

/// How token probabilities are produced at the output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Tied-embedding softmax over the step's support.
    #[default]
    Softmax,
    /// Two-stage class-then-token factorization (see `baselines`).
    Adaptive,
}

#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub head: OutputHead,
}

/// Training-time dropout; masks are keyed by `(seed, step, site)`.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
    pub seed: u64,
    pub step: u64,
}

impl Dropout {
    fn mask(&self, site: u64, len: usize) -> Option<Vec<f64>> {
        if self.p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.p);
        let mut rng = rng::stream(self.seed, Domain::Dropout, self.step * 1024 + site);
        Some(
            (0..len)
                .map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep })
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    att: Vec<f64>,
    attn_y: Vec<f64>,
    attn_mask: Option<Vec<f64>>,
    mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    fc_pre: Vec<f64>,
    fc_act: Vec<f64>,
    mlp_mask: Option<Vec<f64>>,
}

/// Activations of one trunk pass. `residuals[l]` is the residual stream after
/// `l` blocks (`residuals[0]` is the embedding output).
#[derive(Debug, Clone)]
pub struct TrunkCache {
    pub batch_size: usize,
    pub seq_len: usize,
    pub residuals: Vec<Vec<f64>>,
    inputs: Vec<TokenId>,
    emb_mask: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
}

impl TrunkCache {
    pub fn positions(&self) -> usize {
        self.batch_size * self.seq_len
    }
}

/// Final layer norm and tied-embedding logits for one residual stream.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub normed: Vec<f64>,
    mean: Vec<f64>,
    rstd: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Hidden states `x` and log-probabilities over the active support
/// (`-inf` for inactive ids), both row-major per position.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub positions: usize,
    pub hidden_size: usize,
    pub vocab_size: usize,
    pub mode: SupportMode,
    pub hidden: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl ForwardOutput {
    pub fn log_probs_at(&self, pos: usize) -> &[f64] {
        &self.log_probs[pos * self.vocab_size..(pos + 1) * self.vocab_size]
    }

    pub fn hidden_at(&self, pos: usize) -> &[f64] {
        &self.hidden[pos * self.hidden_size..(pos + 1) * self.hidden_size]
    }
}

fn pair_mut<'a>(buf: &'a mut [f64], first: &Range<usize>, second: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    assert!(first.end <= second.start);
    let (lo, hi) = buf.split_at_mut(second.start);
    (&mut lo[first.clone()], &mut hi[..second.len()])
}

impl LanguageModel {
    pub fn new(config: ModelConfig, params: ModelParams, head: OutputHead) -> Result<Self> {
        config.validate()?;
        if params.layout != super::ParamLayout::new(&config) {
            return Err(Error::Config("parameter layout does not match model config".into()));
        }
        Ok(LanguageModel {
            config,
            params,
            head,
        })
    }

    /// Normal(0, 0.02) initialization.
    pub fn init(config: ModelConfig, seed: u64, head: OutputHead) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed, 0.02);
        Self::new(config, params, head)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn trunk_forward(
        &self,
        inputs: &[TokenId],
        batch_size: usize,
        seq_len: usize,
        dropout: Option<&Dropout>,
    ) -> Result<TrunkCache> {
        let cfg = &self.config;
        let (c, f, v) = (cfg.hidden_size, cfg.ffn_size, cfg.vocab_size);
        if seq_len == 0 || seq_len > cfg.seq_len {
            return Err(Error::Validation(format!(
                "sequence length {seq_len} outside 1..={}",
                cfg.seq_len
            )));
        }
        if inputs.len() != batch_size * seq_len {
            return Err(Error::Validation("input length does not match batch shape".into()));
        }
        if let Some(bad) = inputs.iter().find(|&&id| id as usize >= v) {
            return Err(Error::Validation(format!("input id {bad} outside vocabulary of {v}")));
        }
        let n = batch_size * seq_len;
        let p = &self.params;
        let data = &p.data;
        let layout = &p.layout;
        let drop = dropout.filter(|d| d.p > 0.0);

        let mut x = vec![0.0; n * c];
        for (i, &id) in inputs.iter().enumerate() {
            let t = i % seq_len;
            let tok = p.embedding(id as usize, c);
            let pos = &data[layout.wpe.start + t * c..layout.wpe.start + (t + 1) * c];
            for ((o, a), b) in x[i * c..(i + 1) * c].iter_mut().zip(tok).zip(pos) {
                *o = a + b;
            }
        }
        let emb_mask = drop.and_then(|d| d.mask(0, n * c));
        if let Some(m) = &emb_mask {
            x.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
        }

        let mut residuals = Vec::with_capacity(cfg.n_layers + 1);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        residuals.push(x);
        for (l, lw) in layout.layers.iter().enumerate() {
            let x = residuals.last().expect("residual");
            let mut ln1 = vec![0.0; n * c];
            let mut ln1_mean = vec![0.0; n];
            let mut ln1_rstd = vec![0.0; n];
            ops::layernorm_forward(
                x,
                &data[lw.ln1_gain.clone()],
                &data[lw.ln1_bias.clone()],
                n,
                c,
                &mut ln1,
                &mut ln1_mean,
                &mut ln1_rstd,
            );
            let mut qkv = vec![0.0; n * 3 * c];
            ops::linear_forward(&ln1, &data[lw.w_qkv.clone()], &data[lw.b_qkv.clone()], n, c, 3 * c, &mut qkv);
            let (att, attn_y) = self.attention_forward(&qkv, batch_size, seq_len);
            let mut attn_out = vec![0.0; n * c];
            ops::linear_forward(&attn_y, &data[lw.w_attn.clone()], &data[lw.b_attn.clone()], n, c, c, &mut attn_out);
            let attn_mask = drop.and_then(|d| d.mask(1 + 2 * l as u64, n * c));
            if let Some(m) = &attn_mask {
                attn_out.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            let mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();

            let mut ln2 = vec![0.0; n * c];
            let mut ln2_mean = vec![0.0; n];
            let mut ln2_rstd = vec![0.0; n];
            ops::layernorm_forward(
                &mid,
                &data[lw.ln2_gain.clone()],
                &data[lw.ln2_bias.clone()],
                n,
                c,
                &mut ln2,
                &mut ln2_mean,
                &mut ln2_rstd,
            );
            let mut fc_pre = vec![0.0; n * f];
            ops::linear_forward(&ln2, &data[lw.w_fc.clone()], &data[lw.b_fc.clone()], n, c, f, &mut fc_pre);
            let fc_act: Vec<f64> = fc_pre.iter().map(|&z| ops::gelu(z)).collect();
            let mut mlp_out = vec![0.0; n * c];
            ops::linear_forward(&fc_act, &data[lw.w_proj.clone()], &data[lw.b_proj.clone()], n, f, c, &mut mlp_out);
            let mlp_mask = drop.and_then(|d| d.mask(2 + 2 * l as u64, n * c));
            if let Some(m) = &mlp_mask {
                mlp_out.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            let out: Vec<f64> = mid.iter().zip(&mlp_out).map(|(a, b)| a + b).collect();

            layers.push(LayerCache {
                ln1,
                ln1_mean,
                ln1_rstd,
                qkv,
                att,
                attn_y,
                attn_mask,
                mid,
                ln2,
                ln2_mean,
                ln2_rstd,
                fc_pre,
                fc_act,
                mlp_mask,
            });
            residuals.push(out);
        }

        Ok(TrunkCache {
            batch_size,
            seq_len,
            residuals,
            inputs: inputs.to_vec(),
            emb_mask,
            layers,
        })
    }

    /// Causal multi-head attention. Returns the attention weights
    /// `(B, H, T, T)` (exact zeros above the diagonal) and the concatenated
    /// head outputs `(B·T, C)`.
    fn attention_forward(&self, qkv: &[f64], b: usize, t: usize) -> (Vec<f64>, Vec<f64>) {
        let cfg = &self.config;
        let (c, h, hs) = (cfg.hidden_size, cfg.n_heads, cfg.head_size());
        let c3 = 3 * c;
        let scale = 1.0 / (hs as f64).sqrt();
        let mut att = vec![0.0; b * h * t * t];
        let mut y = vec![0.0; b * t * c];
        let mut scores = vec![0.0; t * t];
        for bi in 0..b {
            let base = bi * t * c3;
            for hi in 0..h {
                let q = View::rows(base + hi * hs, c3);
                let k_t = View::transposed(base + c + hi * hs, c3);
                gemm(t, hs, t, scale, qkv, q, qkv, k_t, 0.0, &mut scores, View::rows(0, t));
                let off = (bi * h + hi) * t * t;
                for i in 0..t {
                    let row = &scores[i * t..i * t + i + 1];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let out = &mut att[off + i * t..off + i * t + i + 1];
                    let mut sum = 0.0;
                    for (o, s) in out.iter_mut().zip(row) {
                        *o = (s - max).exp();
                        sum += *o;
                    }
                    out.iter_mut().for_each(|o| *o /= sum);
                }
                let v = View::rows(base + 2 * c + hi * hs, c3);
                gemm(t, t, hs, 1.0, &att, View::rows(off, t), qkv, v, 0.0, &mut y, View::rows(bi * t * c + hi * hs, c));
            }
        }
        (att, y)
    }

    fn attention_backward(&self, cache: &LayerCache, d_y: &[f64], b: usize, t: usize) -> Vec<f64> {
        let cfg = &self.config;
        let (c, h, hs) = (cfg.hidden_size, cfg.n_heads, cfg.head_size());
        let c3 = 3 * c;
        let scale = 1.0 / (hs as f64).sqrt();
        let qkv = &cache.qkv;
        let att = &cache.att;
        let mut d_qkv = vec![0.0; b * t * c3];
        let mut d_att = vec![0.0; t * t];
        for bi in 0..b {
            let base = bi * t * c3;
            for hi in 0..h {
                let off = (bi * h + hi) * t * t;
                let dy = View::rows(bi * t * c + hi * hs, c);
                let q = View::rows(base + hi * hs, c3);
                let k = View::rows(base + c + hi * hs, c3);
                let v = View::rows(base + 2 * c + hi * hs, c3);
                // d_att = dy · vᵀ ; d_v = attᵀ · dy
                gemm(t, hs, t, 1.0, d_y, dy, qkv, View::transposed(v.offset, c3), 0.0, &mut d_att, View::rows(0, t));
                gemm(t, t, hs, 1.0, att, View::transposed(off, t), d_y, dy, 1.0, &mut d_qkv, v);
                // softmax backward, restricted to the causal triangle
                for i in 0..t {
                    let a = &att[off + i * t..off + (i + 1) * t];
                    let da = &mut d_att[i * t..(i + 1) * t];
                    let dot: f64 = (0..=i).map(|j| a[j] * da[j]).sum();
                    for j in 0..t {
                        da[j] = if j <= i { scale * a[j] * (da[j] - dot) } else { 0.0 };
                    }
                }
                // d_q = dS · k ; d_k = dSᵀ · q
                gemm(t, t, hs, 1.0, &d_att, View::rows(0, t), qkv, k, 1.0, &mut d_qkv, q);
                gemm(t, t, hs, 1.0, &d_att, View::transposed(0, t), qkv, q, 1.0, &mut d_qkv, k);
            }
        }
        d_qkv
    }

    /// Backward through the trunk. `d_residuals[l]` is an optional gradient
    /// arriving at `residuals[l]`; gradients accumulate into `grads`.
    pub fn trunk_backward(&self, cache: &TrunkCache, mut d_residuals: Vec<Option<Vec<f64>>>, grads: &mut [f64]) {
        let cfg = &self.config;
        let (c, f) = (cfg.hidden_size, cfg.ffn_size);
        let n = cache.positions();
        let data = &self.params.data;
        let layout = &self.params.layout;
        assert_eq!(d_residuals.len(), cfg.n_layers + 1);

        let mut d = d_residuals[cfg.n_layers].take().unwrap_or_else(|| vec![0.0; n * c]);
        for l in (0..cfg.n_layers).rev() {
            let lw = &layout.layers[l];
            let lc = &cache.layers[l];
            let x = &cache.residuals[l];

            // MLP branch: out = mid + drop(proj(gelu(fc(ln2(mid)))))
            let mut d_mid = d.clone();
            let mut d_mlp = d;
            if let Some(m) = &lc.mlp_mask {
                d_mlp.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            let mut d_act = vec![0.0; n * f];
            {
                let (dw, db) = pair_mut(grads, &lw.w_proj, &lw.b_proj);
                ops::linear_backward(&lc.fc_act, &data[lw.w_proj.clone()], &d_mlp, n, f, c, &mut d_act, dw, db);
            }
            for (g, &z) in d_act.iter_mut().zip(&lc.fc_pre) {
                *g *= ops::gelu_grad(z);
            }
            let mut d_ln2 = vec![0.0; n * c];
            {
                let (dw, db) = pair_mut(grads, &lw.w_fc, &lw.b_fc);
                ops::linear_backward(&lc.ln2, &data[lw.w_fc.clone()], &d_act, n, c, f, &mut d_ln2, dw, db);
            }
            {
                let (dg, db) = pair_mut(grads, &lw.ln2_gain, &lw.ln2_bias);
                ops::layernorm_backward(
                    &lc.mid,
                    &data[lw.ln2_gain.clone()],
                    &lc.ln2_mean,
                    &lc.ln2_rstd,
                    &d_ln2,
                    n,
                    c,
                    &mut d_mid,
                    dg,
                    db,
                );
            }

            // attention branch: mid = x + drop(attn_proj(attn(qkv(ln1(x)))))
            let mut d_x = d_mid.clone();
            let mut d_attn = d_mid;
            if let Some(m) = &lc.attn_mask {
                d_attn.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
            }
            let mut d_y = vec![0.0; n * c];
            {
                let (dw, db) = pair_mut(grads, &lw.w_attn, &lw.b_attn);
                ops::linear_backward(&lc.attn_y, &data[lw.w_attn.clone()], &d_attn, n, c, c, &mut d_y, dw, db);
            }
            let d_qkv = self.attention_backward(lc, &d_y, cache.batch_size, cache.seq_len);
            let mut d_ln1 = vec![0.0; n * c];
            {
                let (dw, db) = pair_mut(grads, &lw.w_qkv, &lw.b_qkv);
                ops::linear_backward(&lc.ln1, &data[lw.w_qkv.clone()], &d_qkv, n, c, 3 * c, &mut d_ln1, dw, db);
            }
            {
                let (dg, db) = pair_mut(grads, &lw.ln1_gain, &lw.ln1_bias);
                ops::layernorm_backward(
                    x,
                    &data[lw.ln1_gain.clone()],
                    &lc.ln1_mean,
                    &lc.ln1_rstd,
                    &d_ln1,
                    n,
                    c,
                    &mut d_x,
                    dg,
                    db,
                );
            }
            if let Some(extra) = d_residuals[l].take() {
                d_x.iter_mut().zip(&extra).for_each(|(a, b)| *a += b);
            }
            d = d_x;
        }
        if cfg.n_layers == 0 {
            if let Some(extra) = d_residuals[0].take() {
                d.iter_mut().zip(&extra).for_each(|(a, b)| *a += b);
            }
        }

        if let Some(m) = &cache.emb_mask {
            d.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
        }
        for (i, &id) in cache.inputs.iter().enumerate() {
            let t = i % cache.seq_len;
            let g = &d[i * c..(i + 1) * c];
            let tok = layout.wte.start + id as usize * c;
            for (acc, v) in grads[tok..tok + c].iter_mut().zip(g) {
                *acc += v;
            }
            let pos = layout.wpe.start + t * c;
            for (acc, v) in grads[pos..pos + c].iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    /// Final layer norm followed by tied-embedding logits over the full union vocabulary.
    pub fn head_forward(&self, residual: &[f64], n: usize) -> HeadCache {
        let cfg = &self.config;
        let (c, v) = (cfg.hidden_size, cfg.vocab_size);
        let data = &self.params.data;
        let layout = &self.params.layout;
        let mut normed = vec![0.0; n * c];
        let mut mean = vec![0.0; n];
        let mut rstd = vec![0.0; n];
        ops::layernorm_forward(
            residual,
            &data[layout.lnf_gain.clone()],
            &data[layout.lnf_bias.clone()],
            n,
            c,
            &mut normed,
            &mut mean,
            &mut rstd,
        );
        let mut logits = vec![0.0; n * v];
        gemm(n, c, v, 1.0, &normed, View::rows(0, c), data, View::transposed(layout.wte.start, c), 0.0, &mut logits, View::rows(0, v));
        HeadCache {
            normed,
            mean,
            rstd,
            logits,
        }
    }

    /// Returns the gradient w.r.t. `residual`; parameter gradients accumulate into `grads`.
    pub fn head_backward(&self, residual: &[f64], cache: &HeadCache, d_logits: &[f64], n: usize, grads: &mut [f64]) -> Vec<f64> {
        let cfg = &self.config;
        let (c, v) = (cfg.hidden_size, cfg.vocab_size);
        let data = &self.params.data;
        let layout = &self.params.layout;
        let mut d_normed = vec![0.0; n * c];
        gemm(n, v, c, 1.0, d_logits, View::rows(0, v), data, View::rows(layout.wte.start, c), 0.0, &mut d_normed, View::rows(0, c));
        gemm(v, n, c, 1.0, d_logits, View::transposed(0, v), &cache.normed, View::rows(0, c), 1.0, grads, View::rows(layout.wte.start, c));
        let mut d_residual = vec![0.0; n * c];
        let (dg, db) = pair_mut(grads, &layout.lnf_gain, &layout.lnf_bias);
        ops::layernorm_backward(
            residual,
            &data[layout.lnf_gain.clone()],
            &cache.mean,
            &cache.rstd,
            &d_normed,
            n,
            c,
            &mut d_residual,
            dg,
            db,
        );
        d_residual
    }

    /// Log-probabilities read from the residual stream after `layer` blocks.
    pub fn forward_at_layer(&self, batch: &Batch, layer: usize, support: &SoftmaxSupport) -> Result<ForwardOutput> {
        if layer == 0 || layer > self.config.n_layers {
            return Err(Error::Config(format!(
                "layer {layer} outside 1..={}",
                self.config.n_layers
            )));
        }
        let trunk = self.trunk_forward(&batch.inputs, batch.batch_size, batch.seq_len, None)?;
        Ok(self.output_from(&trunk, layer, support))
    }

    /// Token-step batches use the token support, HCP-step batches the HCP support.
    pub fn forward(&self, batch: &Batch, supports: &Supports) -> Result<ForwardOutput> {
        self.forward_at_layer(batch, self.config.n_layers, supports.for_step(batch.kind))
    }

    pub fn output_from(&self, trunk: &TrunkCache, layer: usize, support: &SoftmaxSupport) -> ForwardOutput {
        let n = trunk.positions();
        let v = self.config.vocab_size;
        let head = self.head_forward(&trunk.residuals[layer], n);
        let mut log_probs = vec![0.0; n * v];
        for (row, out) in head.logits.chunks_exact(v).zip(log_probs.chunks_exact_mut(v)) {
            masked_log_softmax_into(row, support, out);
        }
        ForwardOutput {
            positions: n,
            hidden_size: self.config.hidden_size,
            vocab_size: v,
            mode: support.mode(),
            hidden: head.normed,
            log_probs,
        }
    }
}

/// Mean negative log-likelihood of `targets`. A target outside the output's
/// support is an error, never silently masked.
pub fn loss(out: &ForwardOutput, targets: &[TokenId]) -> Result<f64> {
    if targets.len() != out.positions {
        return Err(Error::Validation("target count does not match positions".into()));
    }
    let mut total = 0.0;
    for (pos, &t) in targets.iter().enumerate() {
        let lp = out.log_probs_at(pos).get(t as usize).copied().unwrap_or(f64::NEG_INFINITY);
        if lp == f64::NEG_INFINITY {
            return Err(Error::TrainingData(format!(
                "target {t} at position {pos} outside the {:?} support",
                out.mode
            )));
        }
        total -= lp;
    }
    Ok(total / targets.len().max(1) as f64)
}

/// Masked softmax cross-entropy over the positions with a target. Returns the
/// mean loss, the number of scored positions and `d loss / d logits`.
pub fn softmax_cross_entropy(
    logits: &[f64],
    targets: &[Option<TokenId>],
    support: &SoftmaxSupport,
) -> Result<(f64, usize, Vec<f64>)> {
    let v = support.vocab_size();
    let count = targets.iter().filter(|t| t.is_some()).count();
    let mut d_logits = vec![0.0; logits.len()];
    if count == 0 {
        return Ok((0.0, 0, d_logits));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    let mut lp = vec![0.0; v];
    for (pos, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        if !support.contains(t) {
            return Err(Error::TrainingData(format!(
                "target {t} at position {pos} outside the {:?} support",
                support.mode()
            )));
        }
        masked_log_softmax_into(&logits[pos * v..(pos + 1) * v], support, &mut lp);
        total -= lp[t as usize];
        let d = &mut d_logits[pos * v..(pos + 1) * v];
        for (g, l) in d.iter_mut().zip(&lp) {
            *g = l.exp() * inv;
        }
        d[t as usize] -= inv;
    }
    Ok((total * inv, count, d_logits))
}

/// Loss and gradient for a plain LM step (token or HCP, chosen by `batch.kind`).
pub fn standard_loss_and_grad(
    model: &LanguageModel,
    batch: &Batch,
    supports: &Supports,
    dropout: Option<&Dropout>,
) -> Result<(f64, Vec<f64>)> {
    let trunk = model.trunk_forward(&batch.inputs, batch.batch_size, batch.seq_len, dropout)?;
    let n = trunk.positions();
    let last = model.config.n_layers;
    let head = model.head_forward(&trunk.residuals[last], n);
    let targets: Vec<Option<TokenId>> = batch.targets.iter().map(|&t| Some(t)).collect();
    let (loss, _, d_logits) = softmax_cross_entropy(&head.logits, &targets, supports.for_step(batch.kind))?;
    let mut grads = vec![0.0; model.num_params()];
    let d_res = model.head_backward(&trunk.residuals[last], &head, &d_logits, n, &mut grads);
    let mut d_residuals = vec![None; last + 1];
    d_residuals[last] = Some(d_res);
    model.trunk_backward(&trunk, d_residuals, &mut grads);
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcheck::{gradient_check, tiny_config};
    use crate::model::optim::{AdamState, OptimizerConfig};
    use crate::vocab::{partition_from_pairs, substitute, StepKind, VocabPartition};
    use rand::Rng;

    fn toy() -> (VocabPartition, Supports) {
        let part = partition_from_pairs(
            &[("a", 9), ("b", 8), ("c", 7), ("d", 6), ("e", 5), ("f", 4)],
            &[("a", "X"), ("b", "X"), ("c", "Y")],
        )
        .unwrap();
        let supports = Supports::new(&part).unwrap();
        (part, supports)
    }

    fn token_batch(part: &VocabPartition, b: usize, t: usize, seed: u64) -> Batch {
        let mut rng = rng::stream(seed, Domain::Batch, 0);
        let n = part.n_tokens() as TokenId;
        let mut draw = || (0..b * t).map(|_| rng.random_range(0..n)).collect::<Vec<_>>();
        let inputs = draw();
        let targets = draw();
        Batch::new(b, t, inputs, targets, StepKind::Token).unwrap()
    }

    fn model(part: &VocabPartition, seq_len: usize, std: f64) -> LanguageModel {
        let cfg = tiny_config(part.vocab_size(), seq_len);
        LanguageModel::new(cfg, ModelParams::init(&cfg, 5, std), OutputHead::Softmax).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_in_both_modes() {
        let (part, supports) = toy();
        let m = model(&part, 4, 0.3);
        let batch = token_batch(&part, 2, 4, 1);
        let hcp = substitute(&batch, &part).unwrap();
        for b in [&batch, &hcp] {
            let report = gradient_check(b.kind.as_str(), &m, |m| standard_loss_and_grad(m, b, &supports, None), 1e-5, None, 0).unwrap();
            report.ensure(1e-4).unwrap();
            assert_eq!(report.checked, m.num_params());
        }
    }

    #[test]
    fn gradients_with_fixed_dropout_masks() {
        let (part, supports) = toy();
        let mut m = model(&part, 3, 0.3);
        m.config.dropout = 0.2;
        let batch = token_batch(&part, 2, 3, 2);
        let drop = Dropout {
            p: 0.2,
            seed: 4,
            step: 17,
        };
        let report = gradient_check("dropout", &m, |m| standard_loss_and_grad(m, &batch, &supports, Some(&drop)), 1e-5, Some(400), 3).unwrap();
        report.ensure(1e-4).unwrap();
    }

    #[test]
    fn outputs_are_causal() {
        let (part, supports) = toy();
        let m = model(&part, 6, 0.2);
        let batch = token_batch(&part, 1, 6, 3);
        let base = m.forward(&batch, &supports).unwrap();
        for j in 0..6 {
            let mut probe = batch.clone();
            probe.inputs[j] = (probe.inputs[j] + 1) % part.n_tokens() as TokenId;
            let out = m.forward(&probe, &supports).unwrap();
            for pos in 0..j {
                assert_eq!(out.log_probs_at(pos), base.log_probs_at(pos), "pos {pos} saw input {j}");
            }
            assert_ne!(out.log_probs_at(j), base.log_probs_at(j));
        }
    }

    #[test]
    fn distributions_normalize_over_the_active_support() {
        let (part, supports) = toy();
        let m = model(&part, 5, 0.5);
        let batch = token_batch(&part, 3, 5, 4);
        for mode in [SupportMode::Token, SupportMode::Hcp, SupportMode::ClassOnly] {
            let support = supports.get(mode).unwrap();
            let out = m.forward_at_layer(&batch, 2, support).unwrap();
            for pos in 0..out.positions {
                let lp = out.log_probs_at(pos);
                let total: f64 = lp.iter().map(|l| l.exp()).sum();
                assert!((total - 1.0).abs() < 1e-12);
                for (id, l) in lp.iter().enumerate() {
                    if !support.contains(id as TokenId) {
                        assert_eq!(l.exp(), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_embeddings_give_uniform_predictions() {
        let (part, supports) = toy();
        let mut m = model(&part, 4, 0.2);
        let wte = m.params.layout.wte.clone();
        m.params.data[wte].iter_mut().for_each(|v| *v = 0.0);
        let batch = Batch::new(1, 1, vec![3], vec![4], StepKind::Token).unwrap();
        let out = m.forward(&batch, &supports).unwrap();
        let k = supports.token.len() as f64;
        for id in 0..part.vocab_size() {
            let p = out.log_probs_at(0)[id].exp();
            let want = if supports.token.contains(id as TokenId) { 1.0 / k } else { 0.0 };
            assert!((p - want).abs() < 1e-12);
        }
        assert!((loss(&out, &batch.targets).unwrap() - k.ln()).abs() < 1e-12);
    }

    #[test]
    fn permuting_rows_permutes_outputs() {
        let (part, supports) = toy();
        let m = model(&part, 4, 0.2);
        let batch = token_batch(&part, 3, 4, 5);
        let rows: Vec<&[TokenId]> = batch.inputs.chunks(4).collect();
        let swapped: Vec<TokenId> = [rows[2], rows[0], rows[1]].concat();
        let perm = Batch::new(3, 4, swapped, batch.targets.clone(), StepKind::Token).unwrap();
        let a = m.forward(&batch, &supports).unwrap();
        let b = m.forward(&perm, &supports).unwrap();
        for (src, dst) in [(2, 0), (0, 1), (1, 2)] {
            for t in 0..4 {
                assert_eq!(a.log_probs_at(src * 4 + t), b.log_probs_at(dst * 4 + t));
            }
        }
    }

    #[test]
    fn embedding_storage_is_shared_between_input_and_output() {
        let (part, supports) = toy();
        let m = model(&part, 2, 0.2);
        let batch = Batch::new(1, 2, vec![4, 5], vec![5, 6], StepKind::Token).unwrap();
        let before = m.forward(&batch, &supports).unwrap();
        let mut tweaked = m.clone();
        tweaked.params.embedding_mut(4, 16)[0] += 0.5;
        let after = tweaked.forward(&batch, &supports).unwrap();
        assert_ne!(before.hidden_at(0), after.hidden_at(0));
        let mut other = m.clone();
        other.params.embedding_mut(7, 16)[0] += 0.5;
        let out = other.forward(&batch, &supports).unwrap();
        assert_eq!(out.hidden_at(0), before.hidden_at(0));
        assert_ne!(out.log_probs_at(0)[7], before.log_probs_at(0)[7]);
    }

    #[test]
    fn hand_computed_loss() {
        let support = SoftmaxSupport::from_mask(SupportMode::Token, vec![true, true, false]).unwrap();
        let ln = |p: f64| p.ln();
        let out = ForwardOutput {
            positions: 3,
            hidden_size: 0,
            vocab_size: 3,
            mode: SupportMode::Token,
            hidden: vec![],
            log_probs: vec![ln(0.5), ln(0.5), f64::NEG_INFINITY, ln(0.25), ln(0.75), f64::NEG_INFINITY, ln(0.9), ln(0.1), f64::NEG_INFINITY],
        };
        let want = -(0.5f64.ln() + 0.75f64.ln() + 0.1f64.ln()) / 3.0;
        assert!((loss(&out, &[0, 1, 1]).unwrap() - want).abs() < 1e-15);
        assert!(matches!(loss(&out, &[0, 2, 1]), Err(Error::TrainingData(_))));
        assert!(softmax_cross_entropy(&[0.0; 3], &[Some(2)], &support).is_err());
    }

    #[test]
    fn unscored_and_future_positions_get_no_gradient() {
        let (part, supports) = toy();
        let m = model(&part, 4, 0.3);
        let batch = token_batch(&part, 1, 4, 6);
        let trunk = m.trunk_forward(&batch.inputs, 1, 4, None).unwrap();
        let head = m.head_forward(&trunk.residuals[2], 4);
        let targets = [Some(batch.targets[0]), None, None, None];
        let (_, count, d_logits) = softmax_cross_entropy(&head.logits, &targets, &supports.token).unwrap();
        assert_eq!(count, 1);
        assert!(d_logits[part.vocab_size()..].iter().all(|&g| g == 0.0));
        let mut grads = vec![0.0; m.num_params()];
        let d = m.head_backward(&trunk.residuals[2], &head, &d_logits, 4, &mut grads);
        let mut d_res = vec![None; 3];
        d_res[2] = Some(d);
        m.trunk_backward(&trunk, d_res, &mut grads);
        let wpe = m.params.layout.wpe.start;
        assert!(grads[wpe + 16..wpe + 64].iter().all(|&g| g == 0.0));
        assert!(grads[wpe..wpe + 16].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn alternating_corpus_learns_the_bigram() {
        let part = partition_from_pairs(&[("a", 10), ("b", 10)], &[]).unwrap();
        let supports = Supports::new(&part).unwrap();
        let (a, b) = (part.token_id("a").unwrap(), part.token_id("b").unwrap());
        let stream: Vec<TokenId> = (0..9).map(|i| if i % 2 == 0 { a } else { b }).collect();
        let batch = Batch::new(1, 8, stream[..8].to_vec(), stream[1..].to_vec(), StepKind::Token).unwrap();
        let mut m = model(&part, 8, 0.02);
        let opt = OptimizerConfig {
            lr: 1e-2,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut adam = AdamState::new(m.num_params());
        for _ in 0..150 {
            let (_, mut g) = standard_loss_and_grad(&m, &batch, &supports, None).unwrap();
            adam.step(&opt, opt.lr, &mut m.params.data, &mut g);
        }
        let out = m.forward(&batch, &supports).unwrap();
        for pos in (0..8).step_by(2) {
            assert!(out.log_probs_at(pos)[b as usize].exp() > 0.99);
        }
    }
}
