//! Benchmark task generators.

pub mod dynamics;

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::flows::{BaseDistribution, FlowError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TaskError {
    #[error("task identifier {tau:?} lies outside the identifier box")]
    OutOfBox { tau: Vec<f64> },
    #[error("task identifier must have {expected} coordinates, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),
    #[error("noise level must be non-negative, got {0}")]
    NegativeNoise(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Benchmark {
    Sinusoid,
    Pendulum,
    Acrobot,
}

impl Benchmark {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sinusoid => "sinusoid",
            Self::Pendulum => "pendulum",
            Self::Acrobot => "acrobot",
        }
    }

    pub fn parse(s: &str) -> Result<Self, TaskError> {
        match s {
            "sinusoid" => Ok(Self::Sinusoid),
            "pendulum" => Ok(Self::Pendulum),
            "acrobot" => Ok(Self::Acrobot),
            other => Err(TaskError::UnknownBenchmark(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitialKind {
    Uniform,
    Normal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub benchmark: Benchmark,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub normal_mean: Vec<f64>,
    pub normal_std: Vec<f64>,
    pub shots: usize,
    pub total_points: usize,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl BenchmarkSpec {
    pub fn sinusoid() -> Self {
        Self {
            benchmark: Benchmark::Sinusoid,
            low: vec![0.1, 0.0],
            high: vec![5.0, PI],
            normal_mean: vec![2.5, 1.5],
            normal_std: vec![0.8, 0.5],
            shots: 5,
            total_points: 10,
            input_dim: 1,
            output_dim: 1,
        }
    }

    pub fn pendulum() -> Self {
        Self {
            benchmark: Benchmark::Pendulum,
            low: vec![0.4, 0.4],
            high: vec![1.6, 1.6],
            normal_mean: vec![1.0, 1.0],
            normal_std: vec![0.2, 0.2],
            shots: 10,
            total_points: 200,
            input_dim: 4,
            output_dim: 3,
        }
    }

    pub fn acrobot() -> Self {
        Self {
            benchmark: Benchmark::Acrobot,
            low: vec![0.4, 0.4],
            high: vec![1.6, 1.6],
            normal_mean: vec![1.0, 1.0],
            normal_std: vec![0.2, 0.2],
            shots: 10,
            total_points: 200,
            input_dim: 7,
            output_dim: 6,
        }
    }

    pub fn for_benchmark(b: Benchmark) -> Self {
        match b {
            Benchmark::Sinusoid => Self::sinusoid(),
            Benchmark::Pendulum => Self::pendulum(),
            Benchmark::Acrobot => Self::acrobot(),
        }
    }

    pub fn query_points(&self) -> usize {
        self.total_points - self.shots
    }

    pub fn initial_distribution(&self, kind: InitialKind) -> Result<BaseDistribution, FlowError> {
        match kind {
            InitialKind::Uniform => BaseDistribution::uniform(self.low.clone(), self.high.clone()),
            InitialKind::Normal => BaseDistribution::normal(self.normal_mean.clone(), self.normal_std.clone()),
        }
    }

    pub fn contains(&self, tau: &[f64]) -> bool {
        tau.len() == self.low.len()
            && tau
                .iter()
                .zip(self.low.iter().zip(&self.high))
                .all(|(t, (l, h))| *t >= *l && *t <= *h)
    }

    /// Projects onto the identifier box.
    pub fn clamp(&self, tau: &[f64]) -> Vec<f64> {
        tau.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(t, (l, h))| t.clamp(*l, *h))
            .collect()
    }
}

/// Support and query examples for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub tau: Vec<f64>,
    pub support_x: Tensor,
    pub support_y: Tensor,
    pub query_x: Tensor,
    pub query_y: Tensor,
}

fn rows_to_tensor(rows: &[Vec<f64>], idx: &[usize]) -> Tensor {
    let sel: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
    Tensor::from_rows(&sel)
}

/// Generates one task. Deterministic in `(spec, tau, seed)`.
pub fn generate_task(spec: &BenchmarkSpec, tau: &[f64], seed: u64) -> Result<TaskDataset, TaskError> {
    if tau.len() != spec.low.len() {
        return Err(TaskError::Dim { expected: spec.low.len(), got: tau.len() });
    }
    if !spec.contains(tau) {
        return Err(TaskError::OutOfBox { tau: tau.to_vec() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.total_points;
    let (xs, ys): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match spec.benchmark {
        Benchmark::Sinusoid => {
            let (a, b) = (tau[0], tau[1]);
            (0..n)
                .map(|_| {
                    let x = rng.random_range(-5.0..=5.0);
                    (vec![x], vec![a * (x - b).sin()])
                })
                .unzip()
        }
        Benchmark::Pendulum => {
            let (m, l) = (tau[0], tau[1]);
            let mut s = [rng.random_range(-PI..=PI), rng.random_range(-1.0..=1.0)];
            let mut xs = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let u = rng.random_range(-dynamics::PENDULUM_MAX_TORQUE..=dynamics::PENDULUM_MAX_TORQUE);
                let obs = dynamics::pendulum_observation(s);
                s = dynamics::pendulum_step(s, u, m, l);
                xs.push(vec![obs[0], obs[1], obs[2], u]);
                ys.push(dynamics::pendulum_observation(s).to_vec());
            }
            (xs, ys)
        }
        Benchmark::Acrobot => {
            let (m1, m2) = (tau[0], tau[1]);
            let mut s = [0.0; 4];
            for v in &mut s {
                *v = rng.random_range(-0.1..=0.1);
            }
            let mut xs = Vec::with_capacity(n);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let u = dynamics::ACROBOT_TORQUES[rng.random_range(0..3)];
                let obs = dynamics::acrobot_observation(s);
                s = dynamics::acrobot_step(s, u, m1, m2);
                let mut x = obs.to_vec();
                x.push(u);
                xs.push(x);
                ys.push(dynamics::acrobot_observation(s).to_vec());
            }
            (xs, ys)
        }
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let (s_idx, q_idx) = idx.split_at(spec.shots);
    Ok(TaskDataset {
        tau: tau.to_vec(),
        support_x: rows_to_tensor(&xs, s_idx),
        support_y: rows_to_tensor(&ys, s_idx),
        query_x: rows_to_tensor(&xs, q_idx),
        query_y: rows_to_tensor(&ys, q_idx),
    })
}

/// Adds i.i.d. `N(0, σ²)` noise to the support outputs only.
pub fn inject_support_noise(task: &TaskDataset, sigma: f64, seed: u64) -> Result<TaskDataset, TaskError> {
    if !(sigma >= 0.0) {
        return Err(TaskError::NegativeNoise(sigma));
    }
    let mut out = task.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is positive and finite");
    for v in out.support_y.data_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(out)
}

/// Writes a batch of tasks as CSV with a header row.
///
/// Columns: `task,split,tau_0..,x_0..,y_0..`; one row per example.
pub fn dump_csv<W: Write>(tasks: &[TaskDataset], mut w: W) -> std::io::Result<()> {
    let Some(first) = tasks.first() else {
        return Ok(());
    };
    let mut header = vec!["task".to_string(), "split".to_string()];
    header.extend((0..first.tau.len()).map(|i| format!("tau_{i}")));
    header.extend((0..first.support_x.cols()).map(|i| format!("x_{i}")));
    header.extend((0..first.support_y.cols()).map(|i| format!("y_{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (k, t) in tasks.iter().enumerate() {
        for (split, x, y) in [("support", &t.support_x, &t.support_y), ("query", &t.query_x, &t.query_y)] {
            for r in 0..x.rows() {
                let mut cells = vec![k.to_string(), split.to_string()];
                cells.extend(t.tau.iter().map(|v| crate::kv::fmt_f64(*v)));
                cells.extend(x.row_slice(r).iter().map(|v| crate::kv::fmt_f64(*v)));
                cells.extend(y.row_slice(r).iter().map(|v| crate::kv::fmt_f64(*v)));
                writeln!(w, "{}", cells.join(","))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
