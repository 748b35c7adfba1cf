//! Leader weightings over a task batch for the comparison principles.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RiskPrinciple {
    Erm,
    Tr,
    Dr { alpha: f64 },
    Dro,
    Ar,
}

impl RiskPrinciple {
    /// `erm`, `tr`, `dr:<alpha>`, `dro` or `ar`.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "erm" => Some(Self::Erm),
            "tr" => Some(Self::Tr),
            "dro" => Some(Self::Dro),
            "ar" => Some(Self::Ar),
            other => {
                let a: f64 = other.strip_prefix("dr:")?.parse().ok()?;
                (0.0..1.0).contains(&a).then_some(Self::Dr { alpha: a })
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::Erm => "erm".into(),
            Self::Tr => "tr".into(),
            Self::Dr { alpha } => format!("dr:{alpha}"),
            Self::Dro => "dro".into(),
            Self::Ar => "ar".into(),
        }
    }

    /// Only the adversarial principle samples from `p_φ` and moves the follower.
    pub fn is_adversarial(&self) -> bool {
        matches!(self, Self::Ar)
    }
}

pub fn erm_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Indices sorted by decreasing loss; ties keep the lower index first.
fn worst_first(losses: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    idx
}

pub fn tr_weights(losses: &[f64]) -> Vec<f64> {
    let mut w = vec![0.0; losses.len()];
    w[worst_first(losses)[0]] = 1.0;
    w
}

/// Number of tail tasks `⌈(1−α)n⌉`, at least one.
pub fn tail_count(n: usize, alpha: f64) -> usize {
    (((1.0 - alpha) * n as f64).ceil() as usize).clamp(1, n)
}

pub fn dr_weights(losses: &[f64], alpha: f64) -> Vec<f64> {
    let m = tail_count(losses.len(), alpha);
    let mut w = vec![0.0; losses.len()];
    for &i in &worst_first(losses)[..m] {
        w[i] = 1.0 / m as f64;
    }
    w
}

/// Group weights over the `2^d` orthants of the identifier box split at its
/// midpoint, updated by exponentiated gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroState {
    pub weights: Vec<f64>,
    pub step: f64,
    mid: Vec<f64>,
}

impl DroState {
    pub fn new(low: &[f64], high: &[f64], step: f64) -> Self {
        let d = low.len();
        let g = 1usize << d;
        Self {
            weights: vec![1.0 / g as f64; g],
            step,
            mid: low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect(),
        }
    }

    pub fn num_groups(&self) -> usize {
        self.weights.len()
    }

    /// Bit `i` is set when coordinate `i` lies in the upper half.
    pub fn group_of(&self, tau: &[f64]) -> usize {
        tau.iter().zip(&self.mid).enumerate().fold(0, |g, (i, (t, m))| if t >= m { g | (1 << i) } else { g })
    }

    /// Multiplies each present group's weight by `exp(step · mean group loss)`,
    /// renormalizes, then spreads each group's weight evenly over its tasks.
    pub fn update_and_weights(&mut self, losses: &[f64], taus: &[Vec<f64>]) -> Vec<f64> {
        let groups: Vec<usize> = taus.iter().map(|t| self.group_of(t)).collect();
        let g = self.num_groups();
        let mut count = vec![0usize; g];
        let mut total = vec![0.0; g];
        for (&k, &l) in groups.iter().zip(losses) {
            count[k] += 1;
            total[k] += l;
        }
        for k in 0..g {
            if count[k] > 0 {
                self.weights[k] *= (self.step * total[k] / count[k] as f64).exp();
            }
        }
        let z: f64 = self.weights.iter().sum();
        for q in &mut self.weights {
            *q /= z;
        }
        let present: f64 = (0..g).filter(|&k| count[k] > 0).map(|k| self.weights[k]).sum();
        groups.iter().map(|&k| self.weights[k] / (count[k] as f64 * present)).collect()
    }
}

/// Leader weights for one batch. `dro` must be `Some` for [`RiskPrinciple::Dro`].
pub fn risk_weights(principle: &RiskPrinciple, losses: &[f64], taus: &[Vec<f64>], dro: Option<&mut DroState>) -> Vec<f64> {
    match principle {
        RiskPrinciple::Erm | RiskPrinciple::Ar => erm_weights(losses.len()),
        RiskPrinciple::Tr => tr_weights(losses),
        RiskPrinciple::Dr { alpha } => dr_weights(losses, *alpha),
        RiskPrinciple::Dro => dro.expect("group state required").update_and_weights(losses, taus),
    }
}
