//! Perplexity with Rep./NonRep. and frequency-stratified breakdowns, and
//! per-occurrence pairwise comparison of two models.
//!
//! Evaluation always uses the token-mode distribution. Text is cut into
//! non-overlapping windows of the model's context length; a final shorter
//! window scores the remainder, so every target after the first token is
//! scored exactly once whatever the evaluation batch size.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::baselines::token_distribution;
use crate::error::{Error, Result};
use crate::model::{LanguageModel, Supports};
use crate::vocab::{TokenId, VocabPartition};

/// Disjoint training-frequency bands with inclusive upper bounds; a final
/// unbounded band follows the last bound.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strata {
    pub bounds: Vec<u64>,
}

impl Default for Strata {
    fn default() -> Self {
        Strata {
            bounds: vec![20, 50, 100, 300, 500],
        }
    }
}

impl Strata {
    pub fn new(bounds: Vec<u64>) -> Result<Self> {
        if bounds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("strata bounds {bounds:?} must be strictly increasing")));
        }
        Ok(Strata { bounds })
    }

    pub fn len(&self) -> usize {
        self.bounds.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn band(&self, freq: u64) -> usize {
        self.bounds.iter().position(|&b| freq <= b).unwrap_or(self.bounds.len())
    }

    pub fn upper(&self, band: usize) -> Option<u64> {
        self.bounds.get(band).copied()
    }

    pub fn label(&self, band: usize) -> String {
        let lo = if band == 0 { 0 } else { self.bounds[band - 1] };
        match self.upper(band) {
            Some(hi) if band == 0 => format!("<={hi}"),
            Some(hi) => format!("{lo}-{hi}"),
            None => format!(">{lo}"),
        }
    }

    pub fn cumulative_label(&self, band: usize) -> String {
        match self.upper(band) {
            Some(hi) => format!("<={hi}"),
            None => "all".into(),
        }
    }
}

/// NLL total over a group of target occurrences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub label: String,
    pub upper_bound: Option<u64>,
    pub tokens: u64,
    pub nll_sum: f64,
    /// Absent for empty groups.
    pub mean_nll: Option<f64>,
    pub ppl: Option<f64>,
}

impl GroupStat {
    fn new(label: impl Into<String>, upper_bound: Option<u64>) -> Self {
        GroupStat {
            label: label.into(),
            upper_bound,
            tokens: 0,
            nll_sum: 0.0,
            mean_nll: None,
            ppl: None,
        }
    }

    fn add(&mut self, nll: f64) {
        self.tokens += 1;
        self.nll_sum += nll;
    }

    fn absorb(&mut self, other: &GroupStat) {
        self.tokens += other.tokens;
        self.nll_sum += other.nll_sum;
    }

    fn finish(mut self) -> Self {
        if self.tokens > 0 {
            let m = self.nll_sum / self.tokens as f64;
            self.mean_nll = Some(m);
            self.ppl = Some(m.exp());
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: GroupStat,
    /// Targets in V_x.
    pub rep: GroupStat,
    /// Targets in V_¬x (including `<unk>`).
    pub nonrep: GroupStat,
    /// Disjoint frequency bands.
    pub strata: Vec<GroupStat>,
    /// Cumulative views `freq <= bound`.
    pub cumulative: Vec<GroupStat>,
}

impl EvalReport {
    pub fn overall_ppl(&self) -> f64 {
        self.overall.ppl.unwrap_or(f64::NAN)
    }

    pub fn write_csv<W: Write>(&self, mut w: W, header: &[String]) -> Result<()> {
        for h in header {
            writeln!(w, "# {h}")?;
        }
        writeln!(w, "view,group,upper_bound,tokens,mean_nll,ppl")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let rows = std::iter::once(("overall", &self.overall))
            .chain([("split", &self.rep), ("split", &self.nonrep)])
            .chain(self.strata.iter().map(|g| ("band", g)))
            .chain(self.cumulative.iter().map(|g| ("cumulative", g)));
        for (view, g) in rows {
            writeln!(
                w,
                "{view},{},{},{},{},{}",
                g.label,
                g.upper_bound.map(|b| b.to_string()).unwrap_or_else(|| "inf".into()),
                g.tokens,
                opt(g.mean_nll),
                opt(g.ppl)
            )?;
        }
        Ok(())
    }
}

/// Log-probability the model assigned to one target occurrence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredToken {
    pub target: TokenId,
    pub log_prob: f64,
}

/// Scores every next-token target of `ids` in token mode.
pub fn score_stream(
    model: &LanguageModel,
    part: &VocabPartition,
    supports: &Supports,
    ids: &[TokenId],
    batch_size: usize,
    max_windows: Option<usize>,
) -> Result<Vec<ScoredToken>> {
    if model.config.vocab_size != part.vocab_size() {
        return Err(Error::Consistency(format!(
            "model vocabulary {} does not match partition size {}",
            model.config.vocab_size,
            part.vocab_size()
        )));
    }
    if ids.len() < 2 {
        return Ok(Vec::new());
    }
    let t = model.config.seq_len;
    let n_targets = ids.len() - 1;
    let mut windows: Vec<(usize, usize)> = (0..n_targets).step_by(t).map(|s| (s, t.min(n_targets - s))).collect();
    if let Some(k) = max_windows {
        windows.truncate(k);
    }
    let mut out = Vec::with_capacity(windows.len() * t);
    let batch_size = batch_size.max(1);
    let mut i = 0;
    while i < windows.len() {
        let len = windows[i].1;
        let group: Vec<(usize, usize)> = windows[i..].iter().take(batch_size).take_while(|w| w.1 == len).copied().collect();
        i += group.len();
        let inputs: Vec<TokenId> = group.iter().flat_map(|&(s, _)| ids[s..s + len].iter().copied()).collect();
        let dist = token_distribution(model, part, supports, &inputs, group.len(), len)?;
        for (row, &(s, _)) in group.iter().enumerate() {
            for p in 0..len {
                let target = ids[s + p + 1];
                let log_prob = dist.log_probs_at(row * len + p)[target as usize];
                out.push(ScoredToken { target, log_prob });
            }
        }
    }
    Ok(out)
}

/// Groups scored occurrences by V_x membership and training frequency.
pub fn report_from_scores(scores: &[ScoredToken], part: &VocabPartition, strata: &Strata) -> Result<EvalReport> {
    let mut overall = GroupStat::new("overall", None);
    let mut rep = GroupStat::new("rep", None);
    let mut nonrep = GroupStat::new("nonrep", None);
    let mut bands: Vec<GroupStat> = (0..strata.len()).map(|b| GroupStat::new(strata.label(b), strata.upper(b))).collect();
    for s in scores {
        if !part.is_token(s.target) {
            return Err(Error::Validation(format!("evaluation target {} is not a token id", s.target)));
        }
        let nll = -s.log_prob;
        overall.add(nll);
        if part.is_mapped(s.target) {
            rep.add(nll);
        } else {
            nonrep.add(nll);
        }
        bands[strata.band(part.frequency(s.target))].add(nll);
    }
    let mut cumulative = Vec::with_capacity(bands.len());
    let mut acc = GroupStat::new("", None);
    for (b, g) in bands.iter().enumerate() {
        acc.absorb(g);
        let mut c = acc.clone();
        c.label = strata.cumulative_label(b);
        c.upper_bound = strata.upper(b);
        cumulative.push(c.finish());
    }
    Ok(EvalReport {
        overall: overall.finish(),
        rep: rep.finish(),
        nonrep: nonrep.finish(),
        strata: bands.into_iter().map(GroupStat::finish).collect(),
        cumulative,
    })
}

pub fn perplexity(
    model: &LanguageModel,
    part: &VocabPartition,
    supports: &Supports,
    ids: &[TokenId],
    strata: &Strata,
    batch_size: usize,
) -> Result<EvalReport> {
    let scores = score_stream(model, part, supports, ids, batch_size, None)?;
    report_from_scores(&scores, part, strata)
}

/// Default tie tolerance in log space.
pub const TIE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseStratum {
    pub label: String,
    pub upper_bound: Option<u64>,
    pub occurrences: u64,
    pub wins_a: u64,
    pub ties: u64,
    pub wins_b: u64,
    /// Percentages; absent for empty strata.
    pub win_a_pct: Option<f64>,
    pub tie_pct: Option<f64>,
    pub win_b_pct: Option<f64>,
}

impl PairwiseStratum {
    fn new(label: String, upper_bound: Option<u64>) -> Self {
        PairwiseStratum {
            label,
            upper_bound,
            occurrences: 0,
            wins_a: 0,
            ties: 0,
            wins_b: 0,
            win_a_pct: None,
            tie_pct: None,
            win_b_pct: None,
        }
    }

    fn finish(mut self) -> Self {
        if self.occurrences > 0 {
            let pct = |k: u64| 100.0 * k as f64 / self.occurrences as f64;
            self.win_a_pct = Some(pct(self.wins_a));
            self.tie_pct = Some(pct(self.ties));
            self.win_b_pct = Some(pct(self.wins_b));
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReport {
    pub tie_epsilon: f64,
    pub total: PairwiseStratum,
    pub strata: Vec<PairwiseStratum>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    WinA,
    Tie,
    WinB,
}

pub fn outcome(log_p_a: f64, log_p_b: f64, tie_epsilon: f64) -> Outcome {
    if log_p_a == log_p_b || (log_p_a - log_p_b).abs() <= tie_epsilon {
        Outcome::Tie
    } else if log_p_a > log_p_b {
        Outcome::WinA
    } else {
        Outcome::WinB
    }
}

impl fmt::Display for PairwiseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = |v: Option<f64>| v.map(|x| format!("{x:.1}")).unwrap_or_else(|| "-".into());
        for s in std::iter::once(&self.total).chain(&self.strata) {
            writeln!(
                f,
                "{:>10}  n={:<8} A {:>5}%  tie {:>5}%  B {:>5}%",
                s.label,
                s.occurrences,
                p(s.win_a_pct),
                p(s.tie_pct),
                p(s.win_b_pct)
            )?;
        }
        Ok(())
    }
}

impl PairwiseReport {
    pub fn write_csv<W: Write>(&self, mut w: W, header: &[String]) -> Result<()> {
        for h in header {
            writeln!(w, "# {h}")?;
        }
        writeln!(w, "stratum,upper_bound,occurrences,win_a_pct,tie_pct,win_b_pct")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for s in self.strata.iter().chain(std::iter::once(&self.total)) {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                s.label,
                s.upper_bound.map(|b| b.to_string()).unwrap_or_else(|| "inf".into()),
                s.occurrences,
                opt(s.win_a_pct),
                opt(s.tie_pct),
                opt(s.win_b_pct)
            )?;
        }
        Ok(())
    }
}

/// Tallies wins and ties over occurrences of V_x targets, per frequency band.
pub fn compare_scores(
    a: &[ScoredToken],
    b: &[ScoredToken],
    part: &VocabPartition,
    strata: &Strata,
    tie_epsilon: f64,
) -> Result<PairwiseReport> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.target != y.target) {
        return Err(Error::Consistency("score streams cover different targets".into()));
    }
    let mut total = PairwiseStratum::new("all".into(), None);
    let mut bands: Vec<PairwiseStratum> = (0..strata.len()).map(|i| PairwiseStratum::new(strata.label(i), strata.upper(i))).collect();
    for (x, y) in a.iter().zip(b) {
        if !part.is_mapped(x.target) {
            continue;
        }
        let band = &mut bands[strata.band(part.frequency(x.target))];
        for s in [&mut total, band] {
            s.occurrences += 1;
            match outcome(x.log_prob, y.log_prob, tie_epsilon) {
                Outcome::WinA => s.wins_a += 1,
                Outcome::Tie => s.ties += 1,
                Outcome::WinB => s.wins_b += 1,
            }
        }
    }
    Ok(PairwiseReport {
        tie_epsilon,
        total: total.finish(),
        strata: bands.into_iter().map(PairwiseStratum::finish).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn pairwise_compare(
    model_a: &LanguageModel,
    model_b: &LanguageModel,
    part: &VocabPartition,
    supports: &Supports,
    ids: &[TokenId],
    strata: &Strata,
    tie_epsilon: f64,
    batch_size: usize,
) -> Result<PairwiseReport> {
    let a = score_stream(model_a, part, supports, ids, batch_size, None)?;
    let b = score_stream(model_b, part, supports, ids, batch_size, None)?;
    compare_scores(&a, &b, part, strata, tie_epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcheck::tiny_config;
    use crate::model::{ModelParams, OutputHead};
    use crate::vocab::partition_from_pairs;

    fn part() -> VocabPartition {
        // ids: unk 0, eos 1, the 2 (600), iron 3 (40, mapped), desk 4 (10, mapped), zinc 5 (5, mapped)
        partition_from_pairs(
            &[("the", 600), ("iron", 40), ("desk", 10), ("zinc", 5)],
            &[("iron", "metal"), ("desk", "furniture"), ("zinc", "metal")],
        )
        .unwrap()
    }

    fn sc(target: TokenId, p: f64) -> ScoredToken {
        ScoredToken {
            target,
            log_prob: p.ln(),
        }
    }

    #[test]
    fn band_assignment() {
        let s = Strata::default();
        assert_eq!(s.band(0), 0);
        assert_eq!(s.band(20), 0);
        assert_eq!(s.band(21), 1);
        assert_eq!(s.band(500), 4);
        assert_eq!(s.band(501), 5);
        assert_eq!(s.label(5), ">500");
        assert_eq!(s.label(1), "20-50");
        assert!(Strata::new(vec![5, 5]).is_err());
    }

    #[test]
    fn hand_computed_perplexity() {
        let p = part();
        let scores = [sc(2, 0.5), sc(3, 0.25), sc(4, 0.125), sc(2, 0.5)];
        let r = report_from_scores(&scores, &p, &Strata::default()).unwrap();
        let want = (-(0.5f64.ln() * 2.0 + 0.25f64.ln() + 0.125f64.ln()) / 4.0).exp();
        assert!((r.overall_ppl() - want).abs() < 1e-12);
        assert_eq!(r.rep.tokens, 2);
        assert_eq!(r.nonrep.tokens, 2);
        assert!((r.nonrep.ppl.unwrap() - 2.0).abs() < 1e-12);
        assert!((r.rep.ppl.unwrap() - (32f64).sqrt()).abs() < 1e-12);
        // desk (10) in <=20, iron (40) in 20-50, the (600) in >500
        let counts: Vec<u64> = r.strata.iter().map(|g| g.tokens).collect();
        assert_eq!(counts, vec![1, 1, 0, 0, 0, 2]);
        assert_eq!(r.strata[2].ppl, None);
        assert_eq!(r.cumulative.last().unwrap().tokens, 4);
    }

    #[test]
    fn accounting_identity() {
        let p = part();
        let scores: Vec<ScoredToken> = (0..40).map(|i| sc(2 + (i % 4) as TokenId, 0.1 + 0.02 * i as f64)).collect();
        let r = report_from_scores(&scores, &p, &Strata::default()).unwrap();
        let weighted: f64 = r.strata.iter().map(|g| g.nll_sum).sum::<f64>() / r.overall.tokens as f64;
        assert!((weighted - r.overall.mean_nll.unwrap()).abs() < 1e-9);
        assert_eq!(r.rep.tokens + r.nonrep.tokens, r.overall.tokens);
        assert_eq!(r.strata.iter().map(|g| g.tokens).sum::<u64>(), r.overall.tokens);
    }

    #[test]
    fn three_occurrence_tally() {
        let p = part();
        let a = [sc(3, 0.5), sc(3, 0.4), sc(4, 0.1)];
        let b = [sc(3, 0.2), sc(3, 0.3), sc(4, 0.3)];
        let r = compare_scores(&a, &b, &p, &Strata::new(vec![]).unwrap(), TIE_EPSILON).unwrap();
        assert_eq!((r.total.wins_a, r.total.ties, r.total.wins_b), (2, 0, 1));
        assert!((r.total.win_a_pct.unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(r.total.tie_pct, Some(0.0));
        assert!((r.total.win_b_pct.unwrap() - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn unmapped_targets_are_not_compared() {
        let p = part();
        let a = [sc(2, 0.9), sc(3, 0.5)];
        let b = [sc(2, 0.1), sc(3, 0.5)];
        let r = compare_scores(&a, &b, &p, &Strata::default(), TIE_EPSILON).unwrap();
        assert_eq!(r.total.occurrences, 1);
        assert_eq!(r.total.tie_pct, Some(100.0));
        assert!(compare_scores(&a, &b[..1], &p, &Strata::default(), TIE_EPSILON).is_err());
    }

    fn stream(p: &VocabPartition) -> Vec<TokenId> {
        (0..157).map(|i| ((i * 7 + i / 3) % p.n_tokens()) as TokenId).collect()
    }

    #[test]
    fn uniform_model_has_ppl_equal_to_token_support() {
        let p = part();
        let supports = Supports::new(&p).unwrap();
        let cfg = tiny_config(p.vocab_size(), 8);
        let mut m = LanguageModel::new(cfg, ModelParams::init(&cfg, 1, 0.3), OutputHead::Softmax).unwrap();
        let wte = m.params.layout.wte.clone();
        m.params.data[wte].iter_mut().for_each(|v| *v = 0.0);
        let r = perplexity(&m, &p, &supports, &stream(&p), &Strata::default(), 4).unwrap();
        assert!((r.overall_ppl() - p.n_tokens() as f64).abs() < 1e-9);
        assert_eq!(r.overall.tokens, 156);
    }

    #[test]
    fn reports_do_not_depend_on_batch_size() {
        let p = part();
        let supports = Supports::new(&p).unwrap();
        let cfg = tiny_config(p.vocab_size(), 8);
        let m = LanguageModel::new(cfg, ModelParams::init(&cfg, 1, 0.3), OutputHead::Softmax).unwrap();
        let ids = stream(&p);
        let r1 = perplexity(&m, &p, &supports, &ids, &Strata::default(), 1).unwrap();
        let r7 = perplexity(&m, &p, &supports, &ids, &Strata::default(), 7).unwrap();
        assert_eq!(r1.overall.tokens, r7.overall.tokens);
        assert!((r1.overall.nll_sum - r7.overall.nll_sum).abs() < 1e-9);
        let self_cmp = pairwise_compare(&m, &m, &p, &supports, &ids, &Strata::default(), TIE_EPSILON, 3).unwrap();
        for s in self_cmp.strata.iter().filter(|s| s.occurrences > 0) {
            assert_eq!(s.tie_pct, Some(100.0));
        }
    }

    #[test]
    fn partition_mismatch_is_rejected() {
        let p = part();
        let supports = Supports::new(&p).unwrap();
        let cfg = tiny_config(p.vocab_size() + 1, 8);
        let m = LanguageModel::new(cfg, ModelParams::init(&cfg, 1, 0.3), OutputHead::Softmax).unwrap();
        assert!(matches!(
            score_stream(&m, &p, &supports, &stream(&p), 2, None),
            Err(Error::Consistency(_))
        ));
    }
}
