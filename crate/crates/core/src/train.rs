//! The training loop: per-step curriculum draw, optional hypernym
//! substitution, objective-specific loss and gradient, Adam update, and
//! periodic token-mode validation.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{adaptive_loss_and_grad, multi_objective_loss_and_grad, MultiObjectiveConfig};
use crate::curriculum::PacingSchedule;
use crate::error::{Error, Result};
use crate::eval::score_stream;
use crate::model::optim::{AdamState, OptimizerConfig};
use crate::model::transformer::{standard_loss_and_grad, Dropout};
use crate::model::{LanguageModel, ModelConfig, OutputHead, Supports};
use crate::rng::{self, Domain};
use crate::vocab::{substitute, Batch, StepKind, TokenId, VocabPartition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Baseline,
    #[default]
    Hcp,
    MultiObjective,
    AdaptiveSoftmax,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Baseline => "baseline",
            Objective::Hcp => "hcp",
            Objective::MultiObjective => "multi_objective",
            Objective::AdaptiveSoftmax => "adaptive_softmax",
        }
    }

    pub fn head(self) -> OutputHead {
        match self {
            Objective::AdaptiveSoftmax => OutputHead::Adaptive,
            _ => OutputHead::Softmax,
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricRecord {
    Step { step: u64, kind: StepKind, loss: f64, lr: f64 },
    Valid { step: u64, valid_ppl: f64 },
}

impl MetricRecord {
    /// Number of optimizer steps completed when the record was produced.
    pub fn completed_steps(&self) -> u64 {
        match self {
            MetricRecord::Step { step, .. } => step + 1,
            MetricRecord::Valid { step, .. } => *step,
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

pub fn read_metrics<R: BufRead>(r: R) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub objective: Objective,
    pub schedule: PacingSchedule,
    pub batch_size: usize,
    pub eval_every: u64,
    pub eval_batch_size: usize,
    pub max_eval_windows: Option<usize>,
    pub optimizer: OptimizerConfig,
    pub multi_objective: MultiObjectiveConfig,
    pub seed: u64,
}

impl TrainSettings {
    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.objective == Objective::MultiObjective {
            self.multi_objective.resolved_tap(model.n_layers)?;
        }
        Ok(())
    }

    /// Step kind for step `t`; only the HCP objective consults the schedule.
    pub fn step_kind(&self, t: u64) -> Result<StepKind> {
        match self.objective {
            Objective::Hcp => self.schedule.draw_step_kind(t),
            _ => {
                self.schedule.hcp_probability(t)?;
                Ok(StepKind::Token)
            }
        }
    }
}

/// Borrowed, immutable training inputs.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub part: &'a VocabPartition,
    pub supports: &'a Supports,
    pub train: &'a [TokenId],
    pub valid: &'a [TokenId],
}

/// Model, optimizer state and the number of completed steps.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: LanguageModel,
    pub adam: AdamState,
    pub step: u64,
}

impl TrainState {
    pub fn fresh(mut config: ModelConfig, vocab_size: usize, objective: Objective, seed: u64) -> Result<Self> {
        config.vocab_size = vocab_size;
        let model = LanguageModel::init(config, seed, objective.head())?;
        let adam = AdamState::new(model.num_params());
        Ok(TrainState { model, adam, step: 0 })
    }
}

/// The `t`-th training batch: `batch_size` windows at offsets drawn from the
/// `(seed, t)` stream, targets shifted by one.
pub fn sample_batch(ids: &[TokenId], batch_size: usize, seq_len: usize, seed: u64, step: u64) -> Result<Batch> {
    if ids.len() < seq_len + 1 {
        return Err(Error::TrainingData(format!(
            "training stream has {} tokens; need at least {}",
            ids.len(),
            seq_len + 1
        )));
    }
    let mut rng = rng::stream(seed, Domain::Batch, step);
    let max_start = ids.len() - seq_len - 1;
    let mut inputs = Vec::with_capacity(batch_size * seq_len);
    let mut targets = Vec::with_capacity(batch_size * seq_len);
    for _ in 0..batch_size {
        let s = rng.random_range(0..=max_start);
        inputs.extend_from_slice(&ids[s..s + seq_len]);
        targets.extend_from_slice(&ids[s + 1..s + seq_len + 1]);
    }
    Batch::new(batch_size, seq_len, inputs, targets, StepKind::Token)
}

/// Runs step `state.step` and advances the state.
pub fn train_step(state: &mut TrainState, data: &TrainData<'_>, settings: &TrainSettings) -> Result<MetricRecord> {
    let t = state.step;
    let cfg = state.model.config;
    let kind = settings.step_kind(t)?;
    let mut batch = sample_batch(data.train, settings.batch_size, cfg.seq_len, settings.seed, t)?;
    if kind == StepKind::Hcp {
        batch = substitute(&batch, data.part)?;
    }
    batch.validate(data.part)?;
    let dropout = Dropout {
        p: cfg.dropout,
        seed: settings.seed,
        step: t,
    };
    let drop = (cfg.dropout > 0.0).then_some(&dropout);
    let model = &state.model;
    let (loss, mut grads) = match settings.objective {
        Objective::Baseline | Objective::Hcp => standard_loss_and_grad(model, &batch, data.supports, drop)?,
        Objective::MultiObjective => {
            let (l, g) = multi_objective_loss_and_grad(model, &batch, data.part, data.supports, &settings.multi_objective, drop)?;
            (l.total, g)
        }
        Objective::AdaptiveSoftmax => adaptive_loss_and_grad(model, &batch, data.part, data.supports, drop)?,
    };
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: t,
            kind: kind.to_string(),
            loss,
        });
    }
    let lr = settings.optimizer.learning_rate(t, settings.total_steps());
    state.adam.step(&settings.optimizer, lr, &mut state.model.params.data, &mut grads);
    state.step += 1;
    Ok(MetricRecord::Step { step: t, kind, loss, lr })
}

/// Token-mode validation perplexity.
pub fn validation_ppl(model: &LanguageModel, data: &TrainData<'_>, settings: &TrainSettings) -> Result<f64> {
    let scores = score_stream(model, data.part, data.supports, data.valid, settings.eval_batch_size, settings.max_eval_windows)?;
    if scores.is_empty() {
        return Err(Error::TrainingData("validation stream is empty".into()));
    }
    let nll: f64 = scores.iter().map(|s| -s.log_prob).sum::<f64>() / scores.len() as f64;
    Ok(nll.exp())
}

/// Trains until `stop_at` completed steps (capped at the schedule length),
/// passing every record to `sink`.
pub fn run<F>(state: &mut TrainState, data: &TrainData<'_>, settings: &TrainSettings, stop_at: u64, mut sink: F) -> Result<()>
where
    F: FnMut(&MetricRecord) -> Result<()>,
{
    settings.validate(&state.model.config)?;
    let stop_at = stop_at.min(settings.total_steps());
    while state.step < stop_at {
        let rec = train_step(state, data, settings)?;
        sink(&rec)?;
        let done = state.step;
        if settings.eval_every > 0 && (done % settings.eval_every == 0 || done == settings.total_steps()) {
            let ppl = validation_ppl(&state.model, data, settings)?;
            sink(&MetricRecord::Valid {
                step: done,
                valid_ppl: ppl,
            })?;
        }
    }
    Ok(())
}

/// Writes records as JSON lines.
pub fn write_record<W: Write>(w: &mut W, rec: &MetricRecord) -> Result<()> {
    writeln!(w, "{}", rec.to_json_line()?)?;
    Ok(())
}
