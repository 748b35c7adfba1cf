use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::FlowError;
use crate::autodiff::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Initial task distribution `p0`.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseDistribution {
    Uniform { low: Vec<f64>, high: Vec<f64> },
    Normal { mean: Vec<f64>, std: Vec<f64> },
}

impl BaseDistribution {
    pub fn uniform(low: Vec<f64>, high: Vec<f64>) -> Result<Self, FlowError> {
        if low.len() != high.len() || low.is_empty() {
            return Err(FlowError::InvalidBase("bounds must be non-empty and of equal length".into()));
        }
        if low.iter().zip(&high).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(FlowError::InvalidBase("uniform bounds need low < high".into()));
        }
        Ok(Self::Uniform { low, high })
    }

    pub fn normal(mean: Vec<f64>, std: Vec<f64>) -> Result<Self, FlowError> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(FlowError::InvalidBase("mean and std must be non-empty and of equal length".into()));
        }
        if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(FlowError::InvalidBase("normal std must be positive".into()));
        }
        Ok(Self::Normal { mean, std })
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Uniform { low, .. } => low.len(),
            Self::Normal { mean, .. } => mean.len(),
        }
    }

    pub fn is_bounded(&self) -> bool {
        matches!(self, Self::Uniform { .. })
    }

    /// Inside the support. Always true for the normal base.
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Self::Uniform { low, high } => x
                .iter()
                .zip(low.iter().zip(high))
                .all(|(v, (l, h))| *v >= *l && *v <= *h),
            Self::Normal { .. } => x.iter().all(|v| v.is_finite()),
        }
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        match self {
            Self::Uniform { low, high } => {
                if self.contains(x) {
                    -log_volume(low, high)
                } else {
                    f64::NEG_INFINITY
                }
            }
            Self::Normal { mean, std } => {
                let mut lp = -0.5 * LN_2PI * mean.len() as f64;
                for ((v, m), s) in x.iter().zip(mean).zip(std) {
                    let z = (v - m) / s;
                    lp -= 0.5 * z * z + s.ln();
                }
                lp
            }
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            Self::Uniform { low, high } => log_volume(low, high),
            Self::Normal { std, .. } => {
                0.5 * std.len() as f64 * (1.0 + LN_2PI) + std.iter().map(|s| s.ln()).sum::<f64>()
            }
        }
    }

    /// `n x d` matrix of i.i.d. draws.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Tensor {
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            match self {
                Self::Uniform { low, high } => {
                    for (l, h) in low.iter().zip(high) {
                        let u: f64 = rng.random();
                        data.push(l + (h - l) * u);
                    }
                }
                Self::Normal { mean, std } => {
                    for (m, s) in mean.iter().zip(std) {
                        let z: f64 = StandardNormal.sample(rng);
                        data.push(m + s * z);
                    }
                }
            }
        }
        Tensor::from_vec(n, d, data)
    }
}

fn log_volume(low: &[f64], high: &[f64]) -> f64 {
    low.iter().zip(high).map(|(l, h)| (h - l).ln()).sum()
}
