//! Robustness metrics: mean and CVaR of per-task losses, entropy of the
//! task distribution and log-density grids over the identifier box.

use crate::adversary::baseline;
use crate::autodiff::Tensor;
use crate::flows::{BaseDistribution, FlowError, FlowStack, StatsMode};
use crate::game::tail_count;
use crate::metalearner::{LearnerOptions, MetaError, MetaLearner, MetaParams};
use crate::tasks::{generate_task, BenchmarkSpec, TaskError};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Entropy samples used by [`evaluate`].
pub const EVAL_ENTROPY_SAMPLES: usize = 10_000;
pub const MIN_ENTROPY_SAMPLES: usize = 1000;
pub const DEFAULT_GRID_RESOLUTION: usize = 200;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no losses")]
    EmptyLosses,
    #[error("alpha {0} outside [0, 1)")]
    Alpha(f64),
    #[error("entropy needs at least {MIN_ENTROPY_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("density grids need a 2-dimensional identifier, got {0}")]
    Dim(usize),
    #[error("n_tasks must be positive")]
    NoTasks,
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Meta(#[from] MetaError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// Mean of the `⌈(1−α)n⌉` largest losses, exact when they are all equal.
pub fn cvar(losses: &[f64], alpha: f64) -> Result<f64, EvalError> {
    if losses.is_empty() {
        return Err(EvalError::EmptyLosses);
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(EvalError::Alpha(alpha));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let m = tail_count(sorted.len(), alpha);
    Ok(baseline(&sorted[..m]))
}

/// Order-invariant arithmetic mean.
pub fn mean(losses: &[f64]) -> Result<f64, EvalError> {
    cvar(losses, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub base_entropy: f64,
    pub n_samples: usize,
}

/// `H[p0] + E_{p0}[ln|det ∂f/∂z|]` by Monte Carlo over base samples, using
/// frozen min-max statistics.
pub fn entropy(stack: &FlowStack, n_samples: usize, seed: u64) -> Result<EntropyEstimate, EvalError> {
    if n_samples < MIN_ENTROPY_SAMPLES {
        return Err(EvalError::TooFewSamples(n_samples));
    }
    let base_entropy = stack.base().entropy();
    let z = stack.base().sample(&mut ChaCha8Rng::seed_from_u64(seed), n_samples);
    let ld = stack.forward_and_log_det(&z, StatsMode::Frozen)?.log_det;
    let n = n_samples as f64;
    let m = ld.iter().sum::<f64>() / n;
    let var = ld.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(EntropyEstimate { estimate: base_entropy + m, std_error: (var / n).sqrt(), base_entropy, n_samples })
}

/// Log-densities at cell centers, row-major with `y` varying slowest.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub resolution: usize,
    pub low: [f64; 2],
    pub high: [f64; 2],
    /// `None` marks a cell whose density could not be evaluated.
    pub log_density: Vec<Option<f64>>,
}

impl DensityGrid {
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        let r = self.resolution as f64;
        let x = self.low[0] + (i as f64 + 0.5) * (self.high[0] - self.low[0]) / r;
        let y = self.low[1] + (j as f64 + 0.5) * (self.high[1] - self.low[1]) / r;
        (x, y)
    }

    pub fn cell_area(&self) -> f64 {
        let r = self.resolution as f64;
        (self.high[0] - self.low[0]) * (self.high[1] - self.low[1]) / (r * r)
    }

    /// Riemann sum of the density over valid cells.
    pub fn mass(&self) -> f64 {
        self.log_density.iter().flatten().map(|l| l.exp()).sum::<f64>() * self.cell_area()
    }

    pub fn invalid_cells(&self) -> usize {
        self.log_density.iter().filter(|c| c.is_none()).count()
    }

    pub fn at(&self, i: usize, j: usize) -> Option<f64> {
        self.log_density[j * self.resolution + i]
    }

    /// Total-variation distance between the two gridded densities.
    pub fn total_variation(&self, other: &Self) -> f64 {
        assert_eq!(self.resolution, other.resolution, "grid resolution mismatch");
        let d = |c: &Option<f64>| c.map_or(0.0, f64::exp);
        0.5 * self.log_density.iter().zip(&other.log_density).map(|(a, b)| (d(a) - d(b)).abs()).sum::<f64>() * self.cell_area()
    }

    /// Columns `x,y,log_density`; invalid cells are written as `nan`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,y,log_density")?;
        for j in 0..self.resolution {
            for i in 0..self.resolution {
                let (x, y) = self.cell_center(i, j);
                match self.at(i, j) {
                    Some(l) => writeln!(w, "{x},{y},{l}")?,
                    None => writeln!(w, "{x},{y},nan")?,
                }
            }
        }
        Ok(())
    }
}

pub fn density_grid(stack: &FlowStack, low: [f64; 2], high: [f64; 2], resolution: usize) -> Result<DensityGrid, EvalError> {
    if stack.dim() != 2 {
        return Err(EvalError::Dim(stack.dim()));
    }
    let stats = match stack.num_minmax() {
        0 => Vec::new(),
        _ => stack.frozen_stats().ok_or(FlowError::NoFrozenStats)?.to_vec(),
    };
    let mut grid = DensityGrid { resolution, low, high, log_density: Vec::new() };
    let rows: Vec<Vec<Option<f64>>> = (0..resolution)
        .into_par_iter()
        .map(|j| {
            let pts: Vec<Vec<f64>> = (0..resolution).map(|i| {
                let (x, y) = grid.cell_center(i, j);
                vec![x, y]
            }).collect();
            match stack.log_prob_batch(&Tensor::from_rows(&pts), &stats) {
                Ok(v) => v.into_iter().map(|l| (!l.is_nan()).then_some(l)).collect(),
                Err(_) => vec![None; resolution],
            }
        })
        .collect();
    grid.log_density = rows.into_iter().flatten().collect();
    Ok(grid)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionSource {
    Initial,
    Adversarial,
}

/// Where test identifiers come from.
#[derive(Clone, Copy, Debug)]
pub enum TestDistribution<'a> {
    Initial(&'a BaseDistribution),
    /// Sampled with the stack's frozen statistics.
    Adversarial(&'a FlowStack),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvarEntry {
    pub alpha: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source: DistributionSource,
    pub seed: u64,
    pub n_tasks: usize,
    pub mean: f64,
    pub cvar: Vec<CvarEntry>,
    pub losses: Vec<f64>,
    pub entropy: EntropyEstimate,
}

impl EvalReport {
    pub fn cvar_at(&self, alpha: f64) -> Option<f64> {
        self.cvar.iter().find(|e| e.alpha == alpha).map(|e| e.value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Samples `n_tasks` identifiers, adapts on each support set and reports the
/// query losses.
pub fn evaluate(
    meta: &MetaParams,
    opts: LearnerOptions,
    dist: TestDistribution<'_>,
    spec: &BenchmarkSpec,
    n_tasks: usize,
    alphas: &[f64],
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if n_tasks == 0 {
        return Err(EvalError::NoTasks);
    }
    if let Some(&a) = alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
        return Err(EvalError::Alpha(a));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (source, taus, ent) = match dist {
        TestDistribution::Initial(base) => {
            let h = base.entropy();
            let e = EntropyEstimate { estimate: h, std_error: 0.0, base_entropy: h, n_samples: 0 };
            (DistributionSource::Initial, base.sample(&mut rng, n_tasks), e)
        }
        TestDistribution::Adversarial(stack) => {
            let s = stack.sample(&mut rng, n_tasks, StatsMode::Frozen)?;
            (DistributionSource::Adversarial, s.tasks, entropy(stack, EVAL_ENTROPY_SAMPLES, seed)?)
        }
    };
    let tasks = (0..n_tasks)
        .map(|r| generate_task(spec, &spec.clamp(taus.row_slice(r)), rng.next_u64()))
        .collect::<Result<Vec<_>, _>>()?;
    let learner = MetaLearner::new(meta.clone(), opts);
    let losses: Vec<f64> = learner.batch_losses(&tasks)?.into_iter().map(|r| r.query_loss).collect();
    let cvars = alphas.iter().map(|&alpha| Ok(CvarEntry { alpha, value: cvar(&losses, alpha)? })).collect::<Result<_, EvalError>>()?;
    Ok(EvalReport { source, seed, n_tasks, mean: mean(&losses)?, cvar: cvars, losses, entropy: ent })
}
