//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::{LanguageModel, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::{self, Domain};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn ensure(&self, tolerance: f64) -> Result<()> {
        if self.max_rel_error <= tolerance {
            return Ok(());
        }
        Err(Error::GradientCheck(format!(
            "{}: max relative error {:.3e} > {tolerance:.1e} at {} (analytic {:.6e}, numeric {:.6e})",
            self.label, self.max_rel_error, self.worst_param, self.worst_analytic, self.worst_numeric
        )))
    }
}

/// Two layers, two heads, hidden 16: small enough to difference every parameter.
pub fn tiny_config(vocab_size: usize, seq_len: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        hidden_size: 16,
        ffn_size: 32,
        seq_len,
        dropout: 0.0,
        vocab_size,
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const REL_FLOOR: f64 = 1e-6;

/// Compares `loss_and_grad`'s gradient against central differences with step
/// `eps`. Checks every parameter when `max_params` is `None`, otherwise a
/// seeded sample of that many.
pub fn gradient_check<F>(
    label: &str,
    model: &LanguageModel,
    loss_and_grad: F,
    eps: f64,
    max_params: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&LanguageModel) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = loss_and_grad(model)?;
    let n = model.num_params();
    let indices: Vec<usize> = match max_params {
        Some(k) if k < n => {
            let mut rng = rng::stream(seed, Domain::Init, u64::MAX);
            let mut idx = sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n).collect(),
    };
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        label: label.to_string(),
        checked: indices.len(),
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for &i in &indices {
        let orig = probe.params.data[i];
        probe.params.data[i] = orig + eps;
        let (plus, _) = loss_and_grad(&probe)?;
        probe.params.data[i] = orig - eps;
        let (minus, _) = loss_and_grad(&probe)?;
        probe.params.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric, REL_FLOOR);
        if err > report.max_rel_error || report.worst_param.is_empty() {
            report.max_rel_error = err;
            report.worst_param = model.params.layout.tensor_name(i);
            report.worst_analytic = analytic[i];
            report.worst_numeric = numeric;
        }
    }
    Ok(report)
}
