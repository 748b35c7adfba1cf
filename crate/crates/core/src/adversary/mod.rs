//! The distribution adversary: score-function ascent on the expected task
//! loss plus the λ-weighted cloning term that pulls `p_φ` towards `p0`.

use crate::autodiff::{ParamVector, Tensor};
use crate::flows::{weighted_log_prob, FlowError, FlowStack, MinMaxStats};
use crate::optim::{cosine_lr, sgd_step, Adam, Direction};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AdversaryError {
    #[error("empty loss batch")]
    EmptyBatch,
    #[error("loss for task {0} is not finite")]
    NonFiniteLoss(usize),
    #[error("losses ({losses}) and tasks ({tasks}) differ in count")]
    Count { losses: usize, tasks: usize },
    #[error("adversary update is not finite")]
    NonFiniteUpdate,
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Arithmetic mean computed as `x₀ + mean(xᵢ − x₀)`, exact when all values
/// are equal.
pub fn baseline(losses: &[f64]) -> f64 {
    let x0 = losses[0];
    x0 + losses.iter().map(|x| x - x0).sum::<f64>() / losses.len() as f64
}

fn check_losses(losses: &[f64], tasks: &Tensor) -> Result<(), AdversaryError> {
    if losses.is_empty() {
        return Err(AdversaryError::EmptyBatch);
    }
    if losses.len() != tasks.rows() {
        return Err(AdversaryError::Count { losses: losses.len(), tasks: tasks.rows() });
    }
    if let Some(k) = losses.iter().position(|l| !l.is_finite()) {
        return Err(AdversaryError::NonFiniteLoss(k));
    }
    Ok(())
}

/// `(1/K) Σ_k (L_k − b) ∇_φ ln p_φ(τ_k)` with the tasks held fixed.
///
/// `b` is the batch mean when `baseline_value` is `None`.
pub fn score_gradient_with(
    stack: &FlowStack,
    stats: &[MinMaxStats],
    losses: &[f64],
    tasks: &Tensor,
    baseline_value: Option<f64>,
) -> Result<ParamVector, AdversaryError> {
    score_terms(stack, stats, None, losses, tasks, baseline_value)
}

fn score_terms(
    stack: &FlowStack,
    stats: &[MinMaxStats],
    anchors: Option<&Tensor>,
    losses: &[f64],
    tasks: &Tensor,
    baseline_value: Option<f64>,
) -> Result<ParamVector, AdversaryError> {
    check_losses(losses, tasks)?;
    let b = baseline_value.unwrap_or_else(|| baseline(losses));
    let k = losses.len() as f64;
    let w: Vec<f64> = losses.iter().map(|l| (l - b) / k).collect();
    Ok(weighted_log_prob(stack, stats, tasks, &w, anchors)?.grad)
}

/// Score term with the batch-mean baseline.
pub fn score_gradient(
    stack: &FlowStack,
    stats: &[MinMaxStats],
    losses: &[f64],
    tasks: &Tensor,
) -> Result<ParamVector, AdversaryError> {
    score_gradient_with(stack, stats, losses, tasks, None)
}

/// `∇_φ (1/K') Σ_j ln p_φ(τ_j⁰)` over the fresh base samples whose inverse
/// image stays inside a bounded base support. Zero when none remain.
pub fn cloning_gradient(
    stack: &FlowStack,
    stats: &[MinMaxStats],
    base_samples: &Tensor,
) -> Result<(ParamVector, usize), AdversaryError> {
    cloning_terms(stack, stats, None, base_samples).map(|(g, k, _)| (g, k))
}

/// Gradient, retained count and mean retained log-density.
fn cloning_terms(
    stack: &FlowStack,
    stats: &[MinMaxStats],
    anchors: Option<&Tensor>,
    base_samples: &Tensor,
) -> Result<(ParamVector, usize, Option<f64>), AdversaryError> {
    let (z, _) = stack.inverse(base_samples, stats)?;
    let keep: Vec<bool> = (0..z.rows()).map(|r| stack.base().contains(z.row_slice(r))).collect();
    let retained = keep.iter().filter(|k| **k).count();
    if retained == 0 {
        return Ok((stack.params().zeros_like(), 0, None));
    }
    let w: Vec<f64> = keep.iter().map(|&k| if k { 1.0 / retained as f64 } else { 0.0 }).collect();
    let out = weighted_log_prob(stack, stats, base_samples, &w, anchors)?;
    let mean = out.log_probs.iter().zip(&keep).filter(|(_, k)| **k).map(|(l, _)| l).sum::<f64>() / retained as f64;
    Ok((out.grad, retained, Some(mean)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryGradientReport {
    pub score: ParamVector,
    pub cloning: ParamVector,
    pub baseline: f64,
    pub retained: usize,
    /// Mean `ln p_φ` over the retained base samples.
    pub cloning_log_prob: Option<f64>,
    pub losses: Vec<f64>,
}

impl AdversaryGradientReport {
    /// `score + λ·cloning`.
    pub fn total(&self, lambda: f64) -> ParamVector {
        let mut t = self.score.clone();
        t.axpy(lambda, &self.cloning);
        t
    }
}

/// Both follower terms. With `anchors`, the base batch that produced
/// `stats`, the min-max statistics are differentiated as functions of the
/// flow parameters; otherwise they are held fixed.
pub fn gradient_report(
    stack: &FlowStack,
    stats: &[MinMaxStats],
    anchors: Option<&Tensor>,
    losses: &[f64],
    tasks: &Tensor,
    base_samples: &Tensor,
) -> Result<AdversaryGradientReport, AdversaryError> {
    let score = score_terms(stack, stats, anchors, losses, tasks, None)?;
    let (cloning, retained, cloning_log_prob) = cloning_terms(stack, stats, anchors, base_samples)?;
    Ok(AdversaryGradientReport {
        score,
        cloning,
        baseline: baseline(losses),
        retained,
        cloning_log_prob,
        losses: losses.to_vec(),
    })
}

/// Plain ascent `φ ← φ + γ₂ (score + λ·cloning)`.
pub fn adversary_step(
    stack: &FlowStack,
    report: &AdversaryGradientReport,
    gamma2: f64,
    lambda: f64,
) -> Result<FlowStack, AdversaryError> {
    let mut p = stack.params();
    sgd_step(&mut p, &report.total(lambda), gamma2, Direction::Ascent);
    if !p.is_finite() {
        return Err(AdversaryError::NonFiniteUpdate);
    }
    let mut out = stack.clone();
    out.set_params(&p)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdversaryOptimizerKind {
    Plain,
    Adam,
}

/// Follower optimizer: plain or adaptive-moment ascent with an optional
/// cosine-decayed step size.
#[derive(Clone, Debug)]
pub struct AdversaryOptimizer {
    pub kind: AdversaryOptimizerKind,
    pub lr: f64,
    /// Total follower steps for the cosine schedule; `None` keeps `lr` fixed.
    pub cosine_total: Option<usize>,
    adam: Option<Adam>,
    t: usize,
}

impl AdversaryOptimizer {
    pub fn new(kind: AdversaryOptimizerKind, lr: f64, cosine_total: Option<usize>) -> Self {
        Self { kind, lr, cosine_total, adam: None, t: 0 }
    }

    pub fn current_lr(&self) -> f64 {
        match self.cosine_total {
            Some(total) => cosine_lr(self.lr, self.t, total),
            None => self.lr,
        }
    }

    pub fn step(&mut self, stack: &mut FlowStack, report: &AdversaryGradientReport, lambda: f64) -> Result<(), AdversaryError> {
        let lr = self.current_lr();
        let grad = report.total(lambda);
        let mut p = stack.params();
        match self.kind {
            AdversaryOptimizerKind::Plain => sgd_step(&mut p, &grad, lr, Direction::Ascent),
            AdversaryOptimizerKind::Adam => {
                let adam = self.adam.get_or_insert_with(|| Adam::new(p.len()));
                adam.step(&mut p, &grad, lr, Direction::Ascent);
            }
        }
        if !p.is_finite() {
            return Err(AdversaryError::NonFiniteUpdate);
        }
        stack.set_params(&p)?;
        self.t += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
