//! Alternative ways of using hypernym classes: a weighted multi-objective loss
//! with a class head tapped from any layer, and a two-stage class-then-token
//! (adaptive) softmax.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::transformer::{loss, softmax_cross_entropy, Dropout};
use crate::model::{masked_log_softmax_into, ForwardOutput, LanguageModel, OutputHead, SoftmaxSupport, SupportMode, Supports};
use crate::vocab::{Batch, StepKind, TokenId, VocabPartition};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiObjectiveConfig {
    pub hypernym_loss_weight: f64,
    /// 1-based; 0 means the last layer.
    pub tap_layer: usize,
    /// Normalize the class head over V_h ∪ V_¬x instead of V_h alone.
    pub mix_vocab: bool,
}

impl Default for MultiObjectiveConfig {
    fn default() -> Self {
        MultiObjectiveConfig {
            hypernym_loss_weight: 0.2,
            tap_layer: 0,
            mix_vocab: false,
        }
    }
}

impl MultiObjectiveConfig {
    pub fn resolved_tap(&self, n_layers: usize) -> Result<usize> {
        if !(self.hypernym_loss_weight >= 0.0 && self.hypernym_loss_weight.is_finite()) {
            return Err(Error::Config(format!(
                "hypernym_loss_weight {} must be a finite value >= 0",
                self.hypernym_loss_weight
            )));
        }
        match self.tap_layer {
            0 => Ok(n_layers),
            l if l <= n_layers => Ok(l),
            l => Err(Error::Config(format!("tap_layer {l} outside 1..={n_layers}"))),
        }
    }

    pub fn support<'a>(&self, supports: &'a Supports) -> Result<&'a SoftmaxSupport> {
        if self.mix_vocab {
            Ok(&supports.hcp)
        } else {
            supports.get(SupportMode::ClassOnly)
        }
    }
}

/// Class targets for the hypernym head: `class_of(t)` for V_x targets, `None` elsewhere.
pub fn hypernym_targets(targets: &[TokenId], part: &VocabPartition) -> Vec<Option<TokenId>> {
    targets.iter().map(|&t| part.class_of(t)).collect()
}

fn hypernym_loss(out_hyp: &ForwardOutput, targets: &[TokenId], part: &VocabPartition) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (pos, t) in hypernym_targets(targets, part).into_iter().enumerate() {
        if let Some(c) = t {
            let lp = out_hyp.log_probs_at(pos)[c as usize];
            if lp == f64::NEG_INFINITY {
                return Err(Error::TrainingData(format!("class {c} outside the hypernym head's support")));
            }
            total -= lp;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// `token_loss + weight · hypernym_loss`, the class loss averaged over V_x targets only.
pub fn multi_objective_loss(
    out_token: &ForwardOutput,
    out_hyp: &ForwardOutput,
    targets: &[TokenId],
    part: &VocabPartition,
    cfg: &MultiObjectiveConfig,
) -> Result<f64> {
    let token = loss(out_token, targets)?;
    if cfg.hypernym_loss_weight == 0.0 {
        return Ok(token);
    }
    Ok(token + cfg.hypernym_loss_weight * hypernym_loss(out_hyp, targets, part)?)
}

/// Components of a multi-objective training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiObjectiveLoss {
    pub total: f64,
    pub token: f64,
    pub hypernym: f64,
}

pub fn multi_objective_loss_and_grad(
    model: &LanguageModel,
    batch: &Batch,
    part: &VocabPartition,
    supports: &Supports,
    cfg: &MultiObjectiveConfig,
    dropout: Option<&Dropout>,
) -> Result<(MultiObjectiveLoss, Vec<f64>)> {
    if batch.kind != StepKind::Token {
        return Err(Error::TrainingData("multi-objective training expects token batches".into()));
    }
    let last = model.config.n_layers;
    let tap = cfg.resolved_tap(last)?;
    let trunk = model.trunk_forward(&batch.inputs, batch.batch_size, batch.seq_len, dropout)?;
    let n = trunk.positions();
    let mut grads = vec![0.0; model.num_params()];
    let mut d_res = vec![None; last + 1];

    let head = model.head_forward(&trunk.residuals[last], n);
    let targets: Vec<Option<TokenId>> = batch.targets.iter().map(|&t| Some(t)).collect();
    let (token, _, d_logits) = softmax_cross_entropy(&head.logits, &targets, &supports.token)?;
    d_res[last] = Some(model.head_backward(&trunk.residuals[last], &head, &d_logits, n, &mut grads));

    let mut hypernym = 0.0;
    if cfg.hypernym_loss_weight > 0.0 {
        let hyp_head = model.head_forward(&trunk.residuals[tap], n);
        let hyp_targets = hypernym_targets(&batch.targets, part);
        let (l, count, mut d_hyp) = softmax_cross_entropy(&hyp_head.logits, &hyp_targets, cfg.support(supports)?)?;
        hypernym = l;
        if count > 0 {
            d_hyp.iter_mut().for_each(|g| *g *= cfg.hypernym_loss_weight);
            let d = model.head_backward(&trunk.residuals[tap], &hyp_head, &d_hyp, n, &mut grads);
            match &mut d_res[tap] {
                Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                slot => *slot = Some(d),
            }
        }
    }
    model.trunk_backward(&trunk, d_res, &mut grads);
    let total = token + cfg.hypernym_loss_weight * hypernym;
    Ok((MultiObjectiveLoss { total, token, hypernym }, grads))
}

/// Two-stage log-probabilities over token ids from one row of tied-embedding
/// scores: a softmax over V_h ∪ V_¬x, then for V_x tokens a softmax over the
/// members of their class. Class ids get `-inf`.
pub fn adaptive_log_probs_into(scores: &[f64], part: &VocabPartition, stage1: &SoftmaxSupport, out: &mut [f64]) {
    masked_log_softmax_into(scores, stage1, out);
    let n_tokens = part.n_tokens();
    for c in 0..part.n_classes() {
        let class = (n_tokens + c) as TokenId;
        let members = part.members(class);
        let max = members.iter().map(|&m| scores[m as usize]).fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + members.iter().map(|&m| (scores[m as usize] - max).exp()).sum::<f64>().ln();
        let lp_class = out[class as usize];
        for &m in members {
            out[m as usize] = lp_class + scores[m as usize] - log_z;
        }
    }
    out[n_tokens..].iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
}

/// Probability of `target` under the two-stage factorization for a final
/// hidden state `x` (after the output layer norm), scored against the tied
/// embedding rows `embeddings` (`vocab × hidden`, row-major).
pub fn adaptive_softmax_prob(x: &[f64], target: TokenId, embeddings: &[f64], part: &VocabPartition) -> Result<f64> {
    if !part.is_token(target) {
        return Err(Error::Validation(format!("adaptive softmax target {target} is not a token id")));
    }
    let c = x.len();
    let scores: Vec<f64> = embeddings.chunks_exact(c).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
    let stage1 = SoftmaxSupport::new(SupportMode::Hcp, part)?;
    let mut out = vec![0.0; scores.len()];
    adaptive_log_probs_into(&scores, part, &stage1, &mut out);
    Ok(out[target as usize].exp())
}

pub fn adaptive_loss_and_grad(
    model: &LanguageModel,
    batch: &Batch,
    part: &VocabPartition,
    supports: &Supports,
    dropout: Option<&Dropout>,
) -> Result<(f64, Vec<f64>)> {
    if batch.kind != StepKind::Token {
        return Err(Error::TrainingData("adaptive softmax training expects token batches".into()));
    }
    let last = model.config.n_layers;
    let v = model.config.vocab_size;
    let trunk = model.trunk_forward(&batch.inputs, batch.batch_size, batch.seq_len, dropout)?;
    let n = trunk.positions();
    let head = model.head_forward(&trunk.residuals[last], n);
    let stage1 = &supports.hcp;
    let inv = 1.0 / n as f64;
    let mut d_logits = vec![0.0; n * v];
    let mut lp = vec![0.0; v];
    let mut total = 0.0;
    for (pos, &t) in batch.targets.iter().enumerate() {
        if !part.is_token(t) {
            return Err(Error::TrainingData(format!("target {t} at position {pos} is not a token id")));
        }
        let scores = &head.logits[pos * v..(pos + 1) * v];
        let d = &mut d_logits[pos * v..(pos + 1) * v];
        masked_log_softmax_into(scores, stage1, &mut lp);
        for (g, l) in d.iter_mut().zip(&lp) {
            *g = l.exp() * inv;
        }
        let first = part.class_of(t).unwrap_or(t);
        d[first as usize] -= inv;
        total -= lp[first as usize];
        if let Some(class) = part.class_of(t) {
            let members = part.members(class);
            let max = members.iter().map(|&m| scores[m as usize]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = members.iter().map(|&m| (scores[m as usize] - max).exp()).sum();
            for &m in members {
                d[m as usize] += (scores[m as usize] - max).exp() / z * inv;
            }
            d[t as usize] -= inv;
            total -= scores[t as usize] - max - z.ln();
        }
    }
    let mut grads = vec![0.0; model.num_params()];
    let mut d_res = vec![None; last + 1];
    d_res[last] = Some(model.head_backward(&trunk.residuals[last], &head, &d_logits, n, &mut grads));
    model.trunk_backward(&trunk, d_res, &mut grads);
    Ok((total * inv, grads))
}

/// Token-mode predictive distribution for any output head: the tied softmax
/// over V_x ∪ V_¬x, or the two-stage factorization for adaptive models.
pub fn token_distribution(
    model: &LanguageModel,
    part: &VocabPartition,
    supports: &Supports,
    inputs: &[TokenId],
    batch_size: usize,
    seq_len: usize,
) -> Result<ForwardOutput> {
    let trunk = model.trunk_forward(inputs, batch_size, seq_len, None)?;
    let last = model.config.n_layers;
    match model.head {
        OutputHead::Softmax => Ok(model.output_from(&trunk, last, &supports.token)),
        OutputHead::Adaptive => {
            let n = trunk.positions();
            let v = model.config.vocab_size;
            let head = model.head_forward(&trunk.residuals[last], n);
            let mut log_probs = vec![0.0; n * v];
            for (row, out) in head.logits.chunks_exact(v).zip(log_probs.chunks_exact_mut(v)) {
                adaptive_log_probs_into(row, part, &supports.hcp, out);
            }
            Ok(ForwardOutput {
                positions: n,
                hidden_size: model.config.hidden_size,
                vocab_size: v,
                mode: SupportMode::Token,
                hidden: head.normed,
                log_probs,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcheck::{gradient_check, tiny_config};
    use crate::model::ModelParams;
    use crate::rng::{self, Domain};
    use crate::vocab::partition_from_pairs;
    use rand::Rng;

    fn toy10() -> VocabPartition {
        // 8 corpus tokens + <unk>, <eos> = 10 token ids; 3 classes
        partition_from_pairs(
            &[("a", 9), ("b", 8), ("c", 7), ("d", 6), ("e", 5), ("f", 4), ("g", 3), ("h", 2)],
            &[("a", "K1"), ("b", "K1"), ("c", "K1"), ("d", "K2"), ("e", "K2"), ("f", "K3")],
        )
        .unwrap()
    }

    fn out_from(probs: &[&[f64]], mode: SupportMode) -> ForwardOutput {
        let v = probs[0].len();
        ForwardOutput {
            positions: probs.len(),
            hidden_size: 0,
            vocab_size: v,
            mode,
            hidden: vec![],
            log_probs: probs.iter().flat_map(|r| r.iter().map(|p| p.ln())).collect(),
        }
    }

    #[test]
    fn weighted_sum_by_hand() {
        // ids: unk=0, eos=1, a=2 (mapped), b=3 (unmapped), class K=4
        let part = partition_from_pairs(&[("a", 5), ("b", 3)], &[("a", "K")]).unwrap();
        let k = part.class_id("K").unwrap();
        assert_eq!(k, 4);
        let tok = out_from(&[&[0.1, 0.1, 0.5, 0.3, 0.0], &[0.1, 0.1, 0.2, 0.6, 0.0]], SupportMode::Token);
        let hyp = out_from(&[&[0.0, 0.0, 0.0, 0.0, 1.0], &[0.0, 0.0, 0.0, 0.0, 1.0]], SupportMode::ClassOnly);
        let mut hyp2 = hyp.clone();
        hyp2.log_probs[4] = 0.4f64.ln();
        let targets = [2, 3];
        let token_loss = -(0.5f64.ln() + 0.6f64.ln()) / 2.0;
        let cfg = |w| MultiObjectiveConfig {
            hypernym_loss_weight: w,
            ..Default::default()
        };
        assert!((multi_objective_loss(&tok, &hyp, &targets, &part, &cfg(0.0)).unwrap() - token_loss).abs() < 1e-15);
        // only position 0 has a V_x target, so the class loss is -ln 0.4
        let want = token_loss + 0.2 * -(0.4f64.ln());
        assert!((multi_objective_loss(&tok, &hyp2, &targets, &part, &cfg(0.2)).unwrap() - want).abs() < 1e-15);
        let l1 = multi_objective_loss(&tok, &hyp2, &targets, &part, &cfg(1.0)).unwrap();
        let l3 = multi_objective_loss(&tok, &hyp2, &targets, &part, &cfg(3.0)).unwrap();
        assert!((l3 - token_loss - 3.0 * (l1 - token_loss)).abs() < 1e-12);
    }

    #[test]
    fn tap_layer_range() {
        let cfg = MultiObjectiveConfig {
            tap_layer: 3,
            ..Default::default()
        };
        assert!(matches!(cfg.resolved_tap(2), Err(Error::Config(_))));
        assert_eq!(MultiObjectiveConfig::default().resolved_tap(2).unwrap(), 2);
    }

    #[test]
    fn mix_vocab_support_is_the_hcp_support() {
        let part = toy10();
        let supports = Supports::new(&part).unwrap();
        let cfg = MultiObjectiveConfig {
            mix_vocab: true,
            ..Default::default()
        };
        assert_eq!(cfg.support(&supports).unwrap(), &supports.hcp);
        let plain = MultiObjectiveConfig::default();
        assert_eq!(plain.support(&supports).unwrap().mode(), SupportMode::ClassOnly);
    }

    fn scores_for(part: &VocabPartition, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, Domain::Init, 9);
        (0..part.vocab_size()).map(|_| r.random_range(-4.0..4.0)).collect()
    }

    #[test]
    fn adaptive_distribution_sums_to_one_by_brute_force() {
        let part = toy10();
        assert_eq!(part.n_tokens(), 10);
        assert_eq!(part.n_classes(), 3);
        let stage1 = SoftmaxSupport::new(SupportMode::Hcp, &part).unwrap();
        for seed in 0..50 {
            let scores = scores_for(&part, seed);
            let mut lp = vec![0.0; scores.len()];
            adaptive_log_probs_into(&scores, &part, &stage1, &mut lp);
            // independent oracle: explicit two-stage products
            let z1: f64 = (0..part.vocab_size()).filter(|&i| stage1.contains(i as TokenId)).map(|i| scores[i].exp()).sum();
            let mut total = 0.0;
            for id in 0..part.n_tokens() as TokenId {
                let p = match part.class_of(id) {
                    None => scores[id as usize].exp() / z1,
                    Some(c) => {
                        let z2: f64 = part.members(c).iter().map(|&m| scores[m as usize].exp()).sum();
                        scores[c as usize].exp() / z1 * scores[id as usize].exp() / z2
                    }
                };
                assert!((p - lp[id as usize].exp()).abs() < 1e-12);
                total += p;
            }
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_and_symmetric_classes() {
        // class K3 has one member (f); K2 has two (d, e)
        let part = toy10();
        let stage1 = SoftmaxSupport::new(SupportMode::Hcp, &part).unwrap();
        let (k2, k3) = (part.class_id("K2").unwrap(), part.class_id("K3").unwrap());
        let mut scores = scores_for(&part, 1);
        let (d, e, f) = (part.token_id("d").unwrap(), part.token_id("e").unwrap(), part.token_id("f").unwrap());
        scores[d as usize] = 0.7;
        scores[e as usize] = 0.7;
        let mut lp = vec![0.0; scores.len()];
        adaptive_log_probs_into(&scores, &part, &stage1, &mut lp);
        let p1 = crate::model::masked_softmax(&scores, &stage1);
        assert!((lp[f as usize].exp() - p1[k3 as usize]).abs() < 1e-15);
        assert!((lp[d as usize].exp() - p1[k2 as usize] / 2.0).abs() < 1e-15);
        assert!((lp[e as usize].exp() - p1[k2 as usize] / 2.0).abs() < 1e-15);
    }

    #[test]
    fn adaptive_prob_from_hidden_state() {
        let part = toy10();
        let c = 3;
        let emb: Vec<f64> = (0..part.vocab_size() * c).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.1).collect();
        let x = [0.3, -0.2, 0.5];
        let total: f64 = (0..part.n_tokens() as TokenId).map(|t| adaptive_softmax_prob(&x, t, &emb, &part).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(adaptive_softmax_prob(&x, part.class_id("K1").unwrap(), &emb, &part).is_err());
    }

    fn batch(part: &VocabPartition, seed: u64) -> Batch {
        let mut r = rng::stream(seed, Domain::Batch, 0);
        let n = part.n_tokens() as TokenId;
        let inputs = (0..8).map(|_| r.random_range(0..n)).collect();
        let targets = (0..8).map(|_| r.random_range(0..n)).collect();
        Batch::new(2, 4, inputs, targets, StepKind::Token).unwrap()
    }

    #[test]
    fn multi_objective_gradients() {
        let part = toy10();
        let supports = Supports::new(&part).unwrap();
        let cfg = tiny_config(part.vocab_size(), 4);
        let m = LanguageModel::new(cfg, ModelParams::init(&cfg, 2, 0.3), OutputHead::Softmax).unwrap();
        let b = batch(&part, 3);
        for (tap, mix) in [(1, false), (2, true), (2, false)] {
            let mo = MultiObjectiveConfig {
                hypernym_loss_weight: 0.2,
                tap_layer: tap,
                mix_vocab: mix,
            };
            let f = |m: &LanguageModel| multi_objective_loss_and_grad(m, &b, &part, &supports, &mo, None).map(|(l, g)| (l.total, g));
            gradient_check("multi", &m, f, 1e-5, Some(600), tap as u64).unwrap().ensure(1e-4).unwrap();
        }
    }

    #[test]
    fn multi_objective_step_agrees_with_forward_outputs() {
        let part = toy10();
        let supports = Supports::new(&part).unwrap();
        let cfg = tiny_config(part.vocab_size(), 4);
        let m = LanguageModel::new(cfg, ModelParams::init(&cfg, 2, 0.3), OutputHead::Softmax).unwrap();
        let b = batch(&part, 4);
        let mo = MultiObjectiveConfig {
            tap_layer: 1,
            ..Default::default()
        };
        let (l, _) = multi_objective_loss_and_grad(&m, &b, &part, &supports, &mo, None).unwrap();
        let tok = m.forward_at_layer(&b, 2, &supports.token).unwrap();
        let hyp = m.forward_at_layer(&b, 1, mo.support(&supports).unwrap()).unwrap();
        let want = multi_objective_loss(&tok, &hyp, &b.targets, &part, &mo).unwrap();
        assert!((l.total - want).abs() < 1e-12);
    }

    #[test]
    fn adaptive_gradients_and_loss() {
        let part = toy10();
        let supports = Supports::new(&part).unwrap();
        let cfg = tiny_config(part.vocab_size(), 4);
        let m = LanguageModel::new(cfg, ModelParams::init(&cfg, 6, 0.3), OutputHead::Adaptive).unwrap();
        let b = batch(&part, 5);
        let f = |m: &LanguageModel| adaptive_loss_and_grad(m, &b, &part, &supports, None);
        gradient_check("adaptive", &m, f, 1e-5, Some(600), 1).unwrap().ensure(1e-4).unwrap();
        let (l, _) = f(&m).unwrap();
        let out = token_distribution(&m, &part, &supports, &b.inputs, 2, 4).unwrap();
        assert!((loss(&out, &b.targets).unwrap() - l).abs() < 1e-12);
    }
}
