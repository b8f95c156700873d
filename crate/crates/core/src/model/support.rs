use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{StepKind, Subset, TokenId, VocabPartition};

/// Which ids a softmax normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    /// V_x ∪ V_¬x
    Token,
    /// V_h ∪ V_¬x
    Hcp,
    /// V_h alone
    ClassOnly,
}

impl SupportMode {
    pub fn for_step(kind: StepKind) -> Self {
        match kind {
            StepKind::Token => SupportMode::Token,
            StepKind::Hcp => SupportMode::Hcp,
        }
    }

    fn admits(self, subset: Subset) -> bool {
        matches!(
            (self, subset),
            (SupportMode::Token, Subset::Mapped | Subset::Unmapped)
                | (SupportMode::Hcp, Subset::Class | Subset::Unmapped)
                | (SupportMode::ClassOnly, Subset::Class)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoftmaxSupport {
    mode: SupportMode,
    active: Vec<bool>,
    size: usize,
}

impl SoftmaxSupport {
    pub fn new(mode: SupportMode, part: &VocabPartition) -> Result<Self> {
        let active = (0..part.vocab_size())
            .map(|id| mode.admits(part.subset(id as TokenId).expect("id in range")))
            .collect();
        Self::from_mask(mode, active)
    }

    pub fn from_mask(mode: SupportMode, active: Vec<bool>) -> Result<Self> {
        let size = active.iter().filter(|a| **a).count();
        if size == 0 {
            return Err(Error::Config(format!("{mode:?} softmax support is empty")));
        }
        Ok(SoftmaxSupport { mode, active, size })
    }

    pub fn mode(&self) -> SupportMode {
        self.mode
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.active.get(id as usize).copied().unwrap_or(false)
    }

    /// Number of active ids.
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn vocab_size(&self) -> usize {
        self.active.len()
    }

    pub fn mask(&self) -> &[bool] {
        &self.active
    }
}

/// The supports a partition induces. `class_only` is absent when V_h is empty.
#[derive(Debug, Clone)]
pub struct Supports {
    pub token: SoftmaxSupport,
    pub hcp: SoftmaxSupport,
    pub class_only: Option<SoftmaxSupport>,
}

impl Supports {
    pub fn new(part: &VocabPartition) -> Result<Self> {
        Ok(Supports {
            token: SoftmaxSupport::new(SupportMode::Token, part)?,
            hcp: SoftmaxSupport::new(SupportMode::Hcp, part)?,
            class_only: SoftmaxSupport::new(SupportMode::ClassOnly, part).ok(),
        })
    }

    pub fn get(&self, mode: SupportMode) -> Result<&SoftmaxSupport> {
        match mode {
            SupportMode::Token => Ok(&self.token),
            SupportMode::Hcp => Ok(&self.hcp),
            SupportMode::ClassOnly => self
                .class_only
                .as_ref()
                .ok_or_else(|| Error::Config("class-only support needs at least one class".into())),
        }
    }

    pub fn for_step(&self, kind: StepKind) -> &SoftmaxSupport {
        match kind {
            StepKind::Token => &self.token,
            StepKind::Hcp => &self.hcp,
        }
    }
}

/// Writes log-probabilities over the active ids into `out`; inactive ids get
/// `-inf` (probability exactly zero). Stabilized by subtracting the active max.
pub fn masked_log_softmax_into(scores: &[f64], support: &SoftmaxSupport, out: &mut [f64]) {
    assert_eq!(scores.len(), support.vocab_size(), "scores must cover the full vocabulary");
    let mask = support.mask();
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, a)| **a)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scores
        .iter()
        .zip(mask)
        .filter(|(_, a)| **a)
        .map(|(s, _)| (s - max).exp())
        .sum();
    let log_z = max + sum.ln();
    for ((o, s), a) in out.iter_mut().zip(scores).zip(mask) {
        *o = if *a { s - log_z } else { f64::NEG_INFINITY };
    }
}

pub fn masked_softmax(scores: &[f64], support: &SoftmaxSupport) -> Vec<f64> {
    let mut out = vec![0.0; scores.len()];
    masked_log_softmax_into(scores, support, &mut out);
    for v in &mut out {
        *v = v.exp();
    }
    out
}
