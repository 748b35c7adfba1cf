//! The Stackelberg training loop: the meta-learner leads with a descent step
//! at `θ_t`, then every `u` iterations the distribution adversary ascends at
//! `θ_{t+1}` on the same task batch.

mod risk;

pub use risk::{dr_weights, erm_weights, risk_weights, tail_count, tr_weights, DroState, RiskPrinciple};

use crate::adversary::{gradient_report, AdversaryError, AdversaryOptimizer, AdversaryOptimizerKind};
use crate::autodiff::Tensor;
use crate::flows::{FlowError, FlowStack, StatsMode};
use crate::metalearner::{combine, LearnerOptions, MetaError, MetaLearner, MetaParams};
use crate::optim::{sgd_step, Adam, Direction};
use crate::tasks::{generate_task, BenchmarkSpec, TaskError};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Below this, both update norms flag a fixed point.
pub const STATIONARY_TOL: f64 = 1e-10;

#[derive(Debug, thiserror::Error)]
pub enum GameError {
    #[error("invalid game config: {0}")]
    Config(String),
    #[error("iteration {iteration}: {source}")]
    Meta { iteration: usize, source: MetaError },
    #[error("iteration {iteration}: {source}")]
    Adversary { iteration: usize, source: AdversaryError },
    #[error("iteration {iteration}: {source}")]
    Flow { iteration: usize, source: FlowError },
    #[error("iteration {iteration}: {source}")]
    Task { iteration: usize, source: TaskError },
    #[error("iteration {iteration}: non-finite {what}")]
    NonFinite { iteration: usize, what: &'static str },
    #[error("observer failed: {0}")]
    Observer(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LeaderOptimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GameConfig {
    /// Shift penalty on `−E_{p0}[ln p_φ]`.
    pub lambda: f64,
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub first_order: bool,
    /// Outer MAML rate, or the single CNP rate.
    pub outer_lr: f64,
    pub leader_optimizer: LeaderOptimizer,
    /// Zero freezes the follower.
    pub follower_lr: f64,
    pub follower_optimizer: AdversaryOptimizerKind,
    pub follower_cosine: bool,
    /// Differentiate the follower terms through the batch min-max statistics.
    pub stats_gradient: bool,
    pub batch_size: usize,
    pub update_every: usize,
    pub iterations: usize,
    pub seed: u64,
    pub principle: RiskPrinciple,
    pub dro_step: f64,
    /// Recorded only.
    pub delta: Option<f64>,
    /// Zero disables checkpoints.
    pub checkpoint_every: usize,
    /// Base samples used to freeze min-max statistics after training.
    pub freeze_samples: usize,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            inner_lr: 1e-3,
            inner_steps: 1,
            first_order: false,
            outer_lr: 1e-3,
            leader_optimizer: LeaderOptimizer::Adam,
            follower_lr: 1e-3,
            follower_optimizer: AdversaryOptimizerKind::Adam,
            follower_cosine: true,
            stats_gradient: true,
            batch_size: 16,
            update_every: 1,
            iterations: 2000,
            seed: 0,
            principle: RiskPrinciple::Ar,
            dro_step: 0.01,
            delta: None,
            checkpoint_every: 0,
            freeze_samples: 10_000,
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<(), GameError> {
        let bad = |m: &str| Err(GameError::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.inner_lr > 0.0 && self.outer_lr > 0.0) {
            return bad("leader rates must be positive");
        }
        if !(self.follower_lr >= 0.0 && self.follower_lr.is_finite()) {
            return bad("follower_lr must be finite and >= 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if self.update_every < 1 {
            return bad("update_every must be >= 1");
        }
        if let RiskPrinciple::Dr { alpha } = self.principle {
            if !(0.0..1.0).contains(&alpha) {
                return bad("dr alpha must lie in [0, 1)");
            }
        }
        if !(self.dro_step > 0.0) {
            return bad("dro_step must be positive");
        }
        Ok(())
    }

    pub fn learner_options(&self) -> LearnerOptions {
        LearnerOptions { inner_lr: self.inner_lr, inner_steps: self.inner_steps, first_order: self.first_order }
    }
}

/// One trace line. Follower fields are `None` on iterations without a
/// follower step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Principle-weighted batch loss at `θ_t`.
    pub leader_loss: f64,
    pub mean_loss: f64,
    pub leader_grad_norm: f64,
    pub follower_updated: bool,
    /// Batch mean loss at `θ_{t+1}`.
    pub baseline: Option<f64>,
    /// `baseline + λ·mean ln p_φ(τ⁰)`.
    pub objective: Option<f64>,
    pub score_grad_norm: Option<f64>,
    pub cloning_grad_norm: Option<f64>,
    pub follower_grad_norm: Option<f64>,
    pub cloning_retained: Option<usize>,
    pub theta_update_norm: f64,
    pub phi_update_norm: f64,
    pub stationary: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<IterationRecord>,
}

impl TrainTrace {
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| record_line(r) + "\n").collect()
    }

    pub fn from_jsonl(s: &str) -> serde_json::Result<Self> {
        let records = s.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

pub fn record_line(r: &IterationRecord) -> String {
    serde_json::to_string(r).expect("trace record serializes")
}

/// Receives each trace record as soon as it is produced.
pub trait TrainObserver {
    fn on_iteration(&mut self, _record: &IterationRecord) -> std::io::Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _iteration: usize, _meta: &MetaParams, _stack: &FlowStack) -> std::io::Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub meta: MetaParams,
    pub stack: FlowStack,
    pub trace: TrainTrace,
}

/// Independent random streams derived from the config seed.
pub struct Streams {
    pub tasks: ChaCha8Rng,
    pub data: ChaCha8Rng,
    pub cloning: ChaCha8Rng,
    pub freeze: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let s = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self { tasks: s(1), data: s(2), cloning: s(3), freeze: s(4) }
    }
}

/// Rng stream for parameter initialization under `seed`.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(0);
    r
}

enum LeaderState {
    Sgd,
    Adam(Adam),
}

pub fn train(config: &GameConfig, meta: MetaParams, stack: FlowStack, spec: &BenchmarkSpec) -> Result<TrainOutcome, GameError> {
    train_observed(config, meta, stack, spec, &mut ())
}

pub fn train_observed(
    config: &GameConfig,
    meta: MetaParams,
    mut stack: FlowStack,
    spec: &BenchmarkSpec,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, GameError> {
    config.validate()?;
    if stack.dim() != spec.low.len() {
        return Err(GameError::Config(format!("flow dimension {} does not match the task box {}", stack.dim(), spec.low.len())));
    }
    let k = config.batch_size;
    let adversarial = config.principle.is_adversarial();
    let mut rngs = Streams::new(config.seed);
    let mut learner = MetaLearner::new(meta, config.learner_options());
    let mut leader = match config.leader_optimizer {
        LeaderOptimizer::Sgd => LeaderState::Sgd,
        LeaderOptimizer::Adam => LeaderState::Adam(Adam::new(learner.params.num_params())),
    };
    let follower_steps = config.iterations / config.update_every;
    let mut follower = AdversaryOptimizer::new(
        config.follower_optimizer,
        config.follower_lr,
        config.follower_cosine.then_some(follower_steps.max(1)),
    );
    let mut dro = DroState::new(&spec.low, &spec.high, config.dro_step);
    let mut trace = TrainTrace::default();

    for t in 0..config.iterations {
        let (taus, stats, anchors) = if adversarial {
            let s = stack.sample(&mut rngs.tasks, k, StatsMode::Batch).map_err(|e| GameError::Flow { iteration: t, source: e })?;
            (s.tasks, s.stats, s.base)
        } else {
            let b = stack.base().sample(&mut rngs.tasks, k);
            (b.clone(), Vec::new(), b)
        };
        let tau_rows: Vec<Vec<f64>> = (0..k).map(|r| taus.row_slice(r).to_vec()).collect();
        let batch = tau_rows
            .iter()
            .map(|tau| generate_task(spec, &spec.clamp(tau), rngs.data.next_u64()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| GameError::Task { iteration: t, source: e })?;

        let per = learner.batch_losses_and_grads(&batch).map_err(|e| GameError::Meta { iteration: t, source: e })?;
        let losses: Vec<f64> = per.iter().map(|(r, _)| r.query_loss).collect();
        let w = risk_weights(&config.principle, &losses, &tau_rows, Some(&mut dro));
        let grad = combine(&per, &w);
        let leader_loss: f64 = losses.iter().zip(&w).map(|(l, w)| l * w).sum();
        let theta_before = learner.params.flat();
        let mut theta = theta_before.clone();
        match &mut leader {
            LeaderState::Sgd => sgd_step(&mut theta, &grad, config.outer_lr, Direction::Descent),
            LeaderState::Adam(a) => a.step(&mut theta, &grad, config.outer_lr, Direction::Descent),
        }
        if !theta.is_finite() {
            return Err(GameError::NonFinite { iteration: t, what: "leader parameters" });
        }
        let mut next = learner.params.clone();
        next.set_flat(&theta).map_err(|e| GameError::Meta { iteration: t, source: e })?;
        learner.set_params(next);

        let mut rec = IterationRecord {
            iteration: t,
            leader_loss,
            mean_loss: losses.iter().sum::<f64>() / k as f64,
            leader_grad_norm: grad.norm(),
            follower_updated: false,
            baseline: None,
            objective: None,
            score_grad_norm: None,
            cloning_grad_norm: None,
            follower_grad_norm: None,
            cloning_retained: None,
            theta_update_norm: theta.distance(&theta_before),
            phi_update_norm: 0.0,
            stationary: false,
        };

        if adversarial && (t + 1) % config.update_every == 0 {
            let after = learner.batch_losses(&batch).map_err(|e| GameError::Meta { iteration: t, source: e })?;
            let l_next: Vec<f64> = after.iter().map(|r| r.query_loss).collect();
            let x0 = stack.base().sample(&mut rngs.cloning, k);
            let anchored = (config.stats_gradient && !stats.is_empty()).then_some(&anchors);
            let report = gradient_report(&stack, &stats, anchored, &l_next, &taus, &x0).map_err(|e| GameError::Adversary { iteration: t, source: e })?;
            let phi_before = stack.params();
            follower
                .step(&mut stack, &report, config.lambda)
                .map_err(|e| GameError::Adversary { iteration: t, source: e })?;
            let total = report.total(config.lambda);
            rec.follower_updated = true;
            rec.baseline = Some(report.baseline);
            rec.objective = report.cloning_log_prob.map(|c| report.baseline + config.lambda * c);
            rec.score_grad_norm = Some(report.score.norm());
            rec.cloning_grad_norm = Some(report.cloning.norm());
            rec.follower_grad_norm = Some(total.norm());
            rec.cloning_retained = Some(report.retained);
            rec.phi_update_norm = stack.params().distance(&phi_before);
        }
        rec.stationary = rec.theta_update_norm < STATIONARY_TOL && rec.phi_update_norm < STATIONARY_TOL;
        if !rec.leader_loss.is_finite() {
            return Err(GameError::NonFinite { iteration: t, what: "leader loss" });
        }
        observer.on_iteration(&rec)?;
        trace.records.push(rec);
        if config.checkpoint_every > 0 && (t + 1) % config.checkpoint_every == 0 {
            observer.on_checkpoint(t + 1, &learner.params, &stack)?;
        }
    }

    if stack.num_minmax() > 0 && config.freeze_samples > 0 {
        stack
            .freeze_stats(&mut rngs.freeze, config.freeze_samples)
            .map_err(|e| GameError::Flow { iteration: config.iterations, source: e })?;
    }
    Ok(TrainOutcome { meta: learner.params, stack, trace })
}

/// Rows of `taus` clamped into the task box.
pub fn clamp_rows(spec: &BenchmarkSpec, taus: &Tensor) -> Vec<Vec<f64>> {
    (0..taus.rows()).map(|r| spec.clamp(taus.row_slice(r))).collect()
}

#[cfg(test)]
mod tests;
