//! Pacing functions deciding whether a training step predicts hypernym classes.
//!
//! With cutoff `c = a·N`:
//!
//! * constant: `P(t) = b` for `t < c`, else 0
//! * linear:   `P(t) = b − b·t/c` for `t < c`, else 0
//!
//! Step kinds are Bernoulli draws keyed by `(seed, t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::vocab::StepKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PacingKind {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacingSchedule {
    pub kind: PacingKind,
    pub a: f64,
    pub b: f64,
    pub total_steps: u64,
    pub seed: u64,
}

impl PacingSchedule {
    pub fn new(kind: PacingKind, a: f64, b: f64, total_steps: u64, seed: u64) -> Result<Self> {
        let s = PacingSchedule {
            kind,
            a,
            b,
            total_steps,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    /// A schedule that never produces HCP steps.
    pub fn disabled(total_steps: u64, seed: u64) -> Self {
        PacingSchedule {
            kind: PacingKind::Constant,
            a: 0.0,
            b: 0.0,
            total_steps,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a) {
            return Err(Error::Config(format!("pacing a={} must lie in [0, 1]", self.a)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(Error::Config(format!("pacing b={} must lie in [0, 1]", self.b)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cutoff(&self) -> f64 {
        self.a * self.total_steps as f64
    }

    pub fn hcp_probability(&self, step: u64) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let cutoff = self.cutoff();
        let t = step as f64;
        if t >= cutoff {
            return Ok(0.0);
        }
        Ok(match self.kind {
            PacingKind::Constant => self.b,
            PacingKind::Linear => self.b - self.b * t / cutoff,
        })
    }

    pub fn draw_step_kind(&self, step: u64) -> Result<StepKind> {
        let p = self.hcp_probability(step)?;
        if p <= 0.0 {
            return Ok(StepKind::Token);
        }
        let u = rng::uniform(self.seed, Domain::Pacing, step);
        Ok(if u < p { StepKind::Hcp } else { StepKind::Token })
    }

    pub fn expected_hcp_steps(&self) -> f64 {
        let full = self.a * self.b * self.total_steps as f64;
        match self.kind {
            PacingKind::Constant => full,
            PacingKind::Linear => full / 2.0,
        }
    }

    /// Realized number of HCP steps over the whole run.
    pub fn count_hcp_steps(&self) -> u64 {
        (0..self.total_steps)
            .filter(|&t| matches!(self.draw_step_kind(t), Ok(StepKind::Hcp)))
            .count() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_schedule_values() {
        let s = PacingSchedule::new(PacingKind::Constant, 0.12, 0.8, 100_000, 0).unwrap();
        assert_eq!(s.hcp_probability(0).unwrap(), 0.8);
        assert_eq!(s.hcp_probability(11_999).unwrap(), 0.8);
        assert_eq!(s.hcp_probability(12_000).unwrap(), 0.0);
        assert_eq!(s.hcp_probability(99_999).unwrap(), 0.0);
    }

    #[test]
    fn linear_schedule_values() {
        let s = PacingSchedule::new(PacingKind::Linear, 0.64, 0.64, 100_000, 0).unwrap();
        assert!((s.hcp_probability(32_000).unwrap() - 0.32).abs() < 1e-12);
        assert_eq!(s.hcp_probability(0).unwrap(), 0.64);
        assert_eq!(s.hcp_probability(64_000).unwrap(), 0.0);
    }

    #[test]
    fn step_past_end_is_range_error() {
        let s = PacingSchedule::new(PacingKind::Constant, 0.5, 1.0, 10, 0).unwrap();
        assert!(matches!(
            s.hcp_probability(10),
            Err(Error::StepOutOfRange { step: 10, total: 10 })
        ));
        assert!(s.draw_step_kind(10).is_err());
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(PacingSchedule::new(PacingKind::Constant, 1.5, 0.5, 10, 0).is_err());
        assert!(PacingSchedule::new(PacingKind::Linear, 0.5, -0.1, 10, 0).is_err());
        assert!(PacingSchedule::new(PacingKind::Linear, 0.5, 0.5, 0, 0).is_err());
    }

    #[test]
    fn degenerate_probabilities_are_deterministic() {
        let never = PacingSchedule::new(PacingKind::Constant, 1.0, 0.0, 500, 3).unwrap();
        let always = PacingSchedule::new(PacingKind::Constant, 1.0, 1.0, 500, 3).unwrap();
        for t in 0..500 {
            assert_eq!(never.draw_step_kind(t).unwrap(), StepKind::Token);
            assert_eq!(always.draw_step_kind(t).unwrap(), StepKind::Hcp);
        }
    }

    #[test]
    fn b_one_constant_schedule_is_a_prefix() {
        let s = PacingSchedule::new(PacingKind::Constant, 0.2, 1.0, 100_000, 11).unwrap();
        assert_eq!(s.count_hcp_steps(), 20_000);
        assert_eq!(s.draw_step_kind(19_999).unwrap(), StepKind::Hcp);
        assert_eq!(s.draw_step_kind(20_000).unwrap(), StepKind::Token);
    }

    #[test]
    fn expected_steps() {
        let lin = |a| PacingSchedule::new(PacingKind::Linear, a, a, 100_000, 0).unwrap();
        assert!((lin(0.64).expected_hcp_steps() - 20_480.0).abs() < 1e-6);
        assert!((lin(0.45).expected_hcp_steps() - 10_125.0).abs() < 1e-6);
        let off = PacingSchedule::new(PacingKind::Linear, 0.5, 0.0, 100, 0).unwrap();
        assert_eq!(off.expected_hcp_steps(), 0.0);
    }

    #[test]
    fn draws_are_reproducible() {
        let s = PacingSchedule::new(PacingKind::Linear, 0.5, 0.7, 1000, 99).unwrap();
        let a: Vec<_> = (0..1000).map(|t| s.draw_step_kind(t).unwrap()).collect();
        let b: Vec<_> = (0..1000).rev().map(|t| s.draw_step_kind(t).unwrap()).collect();
        assert!(a.iter().eq(b.iter().rev()));
    }

    proptest! {
        #[test]
        fn probability_is_non_increasing_and_zero_after_cutoff(
            a in 0.0f64..=1.0, b in 0.0f64..=1.0, n in 1u64..5000, linear: bool
        ) {
            let kind = if linear { PacingKind::Linear } else { PacingKind::Constant };
            let s = PacingSchedule::new(kind, a, b, n, 0).unwrap();
            let mut prev = f64::INFINITY;
            for t in 0..n {
                let p = s.hcp_probability(t).unwrap();
                prop_assert!(p <= prev);
                prop_assert!((0.0..=1.0).contains(&p));
                if t as f64 >= a * n as f64 {
                    prop_assert_eq!(p, 0.0);
                }
                prev = p;
            }
        }
    }
}
