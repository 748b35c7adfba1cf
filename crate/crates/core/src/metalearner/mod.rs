//! Meta-learners: MAML with a differentiable inner loop, and conditional
//! neural processes.

mod graphs;

use std::sync::{Arc, Mutex};

use rand::Rng;
use rayon::prelude::*;

pub use graphs::adapt;

use crate::autodiff::{AutodiffError, Bindings, Graph, ParamVector, Tensor, Var};
use crate::kv::{KvDoc, KvError};
use crate::tasks::{Benchmark, BenchmarkSpec, TaskDataset};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetaError {
    #[error("conditional neural processes have no inner loop")]
    NoInnerLoop,
    #[error("inner steps must be at least 1")]
    ZeroSteps,
    #[error("task has an empty query set")]
    EmptyQuery,
    #[error("task has an empty support set")]
    EmptySupport,
    #[error("empty task batch")]
    EmptyBatch,
    #[error("dataset shape does not match the architecture: {0}")]
    Shape(String),
    #[error("non-finite loss or gradient for task {task}")]
    NonFinite { task: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

impl From<KvError> for MetaError {
    fn from(e: KvError) -> Self {
        MetaError::Checkpoint(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Maml,
    Cnp,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Self::Maml => "maml",
            Self::Cnp => "cnp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "maml" => Some(Self::Maml),
            "cnp" => Some(Self::Cnp),
            _ => None,
        }
    }
}

/// Maps raw network outputs to observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Identity.
    Raw,
    /// `(θ, θ̇) -> (cos θ, sin θ, θ̇)`.
    Pendulum,
    /// `(θ₁, θ₂, θ̇₁, θ̇₂) -> (cos θ₁, sin θ₁, cos θ₂, sin θ₂, θ̇₁, θ̇₂)`.
    Acrobot,
}

impl Head {
    pub fn for_benchmark(b: Benchmark) -> Self {
        match b {
            Benchmark::Sinusoid => Self::Raw,
            Benchmark::Pendulum => Self::Pendulum,
            Benchmark::Acrobot => Self::Acrobot,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::Pendulum => "pendulum",
            Self::Acrobot => "acrobot",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "raw" => Some(Self::Raw),
            "pendulum" => Some(Self::Pendulum),
            "acrobot" => Some(Self::Acrobot),
            _ => None,
        }
    }

    fn raw_dim(self, output_dim: usize) -> usize {
        match self {
            Self::Raw => output_dim,
            Self::Pendulum => 2,
            Self::Acrobot => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub variant: Variant,
    pub head: Head,
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: usize,
    /// Hidden layers of the MAML network.
    pub depth: usize,
}

impl Architecture {
    /// 3 hidden layers of 128 units.
    pub fn for_benchmark(variant: Variant, spec: &BenchmarkSpec) -> Self {
        Self {
            variant,
            head: Head::for_benchmark(spec.benchmark),
            input_dim: spec.input_dim,
            output_dim: spec.output_dim,
            hidden: 128,
            depth: 3,
        }
    }

    pub(crate) fn cnp_encoder_layers(&self) -> usize {
        3
    }

    /// `(fan_in, fan_out)` of every affine layer in parameter order.
    pub fn layer_sizes(&self) -> Vec<(usize, usize)> {
        let h = self.hidden;
        let out = self.head.raw_dim(self.output_dim);
        match self.variant {
            Variant::Maml => {
                let mut dims = vec![self.input_dim];
                dims.extend(std::iter::repeat_n(h, self.depth));
                dims.push(out);
                dims.windows(2).map(|w| (w[0], w[1])).collect()
            }
            Variant::Cnp => vec![
                (self.input_dim + self.output_dim, h),
                (h, h),
                (h, h),
                (h + self.input_dim, h),
                (h, out),
            ],
        }
    }
}

/// Meta-learner parameters θ.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaParams {
    arch: Architecture,
    tensors: Vec<Tensor>,
}

impl MetaParams {
    /// Weights and biases `~ U(−1/√fan_out, 1/√fan_out)`.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut tensors = Vec::new();
        for (fan_in, fan_out) in arch.layer_sizes() {
            let s = 1.0 / (fan_out as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-s..s)).collect();
            tensors.push(Tensor::from_vec(fan_in, fan_out, w));
            tensors.push(Tensor::row(b));
        }
        Self { arch, tensors }
    }

    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self, MetaError> {
        let want: Vec<(usize, usize)> = arch
            .layer_sizes()
            .iter()
            .flat_map(|&(i, o)| [(i, o), (1, o)])
            .collect();
        let got: Vec<(usize, usize)> = tensors.iter().map(Tensor::shape).collect();
        if want != got {
            return Err(MetaError::Shape(format!("expected tensor shapes {want:?}, got {got:?}")));
        }
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn flat(&self) -> ParamVector {
        ParamVector::from_tensors(&self.tensors)
    }

    pub fn set_flat(&mut self, p: &ParamVector) -> Result<(), MetaError> {
        if p.shapes() != self.flat().shapes() {
            return Err(MetaError::Shape("parameter vector layout mismatch".into()));
        }
        self.tensors = p.to_tensors();
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        let a = &self.arch;
        doc.set("variant", a.variant.name());
        doc.set("head", a.head.name());
        doc.set("input_dim", a.input_dim.to_string());
        doc.set("output_dim", a.output_dim.to_string());
        doc.set("hidden", a.hidden.to_string());
        doc.set("depth", a.depth.to_string());
        for (i, t) in self.tensors.iter().enumerate() {
            doc.set(format!("tensor.{i}.shape"), format!("{} {}", t.rows(), t.cols()));
            doc.set_f64s(format!("tensor.{i}.data"), t.data());
        }
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, MetaError> {
        let variant = Variant::parse(doc.require("variant")?)
            .ok_or_else(|| MetaError::Checkpoint("unknown variant".into()))?;
        let head = Head::parse(doc.require("head")?)
            .ok_or_else(|| MetaError::Checkpoint("unknown head".into()))?;
        let arch = Architecture {
            variant,
            head,
            input_dim: doc.usize("input_dim")?,
            output_dim: doc.usize("output_dim")?,
            hidden: doc.usize("hidden")?,
            depth: doc.usize("depth")?,
        };
        let n = 2 * arch.layer_sizes().len();
        let mut tensors = Vec::with_capacity(n);
        for i in 0..n {
            let shape = doc.require(&format!("tensor.{i}.shape"))?;
            let dims: Vec<usize> = shape
                .split_whitespace()
                .map(|s| s.parse().map_err(|_| MetaError::Checkpoint(format!("bad shape `{shape}`"))))
                .collect::<Result<_, _>>()?;
            if dims.len() != 2 {
                return Err(MetaError::Checkpoint(format!("bad shape `{shape}`")));
            }
            let data = doc.f64s(&format!("tensor.{i}.data"))?;
            if data.len() != dims[0] * dims[1] {
                return Err(MetaError::Checkpoint(format!("tensor {i} has the wrong length")));
            }
            tensors.push(Tensor::from_vec(dims[0], dims[1], data));
        }
        Self::from_tensors(arch, tensors)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearnerOptions {
    pub inner_lr: f64,
    pub inner_steps: usize,
    /// Treat inner gradients as constants in the outer gradient.
    pub first_order: bool,
}

impl Default for LearnerOptions {
    fn default() -> Self {
        Self { inner_lr: 1e-3, inner_steps: 1, first_order: false }
    }
}

/// Per-task losses.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskLossRecord {
    pub tau: Vec<f64>,
    /// Support loss at θ (for CNP, the support set predicted from itself).
    pub support_loss: f64,
    /// Query loss after adaptation.
    pub query_loss: f64,
    /// `‖θᵢ − θ‖`; zero for CNP.
    pub delta_norm: f64,
}

/// Compiled loss graph for one dataset shape.
struct TaskGraph {
    graph: Graph,
    params: Vec<Var>,
    xs: Var,
    ys: Var,
    xq: Var,
    yq: Var,
    support_loss: Var,
    query_loss: Var,
    delta_sq: Var,
    adapted: Vec<Var>,
    grads: Vec<Var>,
}

impl TaskGraph {
    fn build(arch: &Architecture, opts: &LearnerOptions, n_s: usize, n_q: usize) -> Self {
        let mut g = Graph::new();
        let mut params = Vec::new();
        for (i, (fi, fo)) in arch.layer_sizes().into_iter().enumerate() {
            params.push(g.input(format!("w{i}"), fi, fo));
            params.push(g.input(format!("b{i}"), 1, fo));
        }
        let xs = g.input("support_x", n_s, arch.input_dim);
        let ys = g.input("support_y", n_s, arch.output_dim);
        let xq = g.input("query_x", n_q, arch.input_dim);
        let yq = g.input("query_y", n_q, arch.output_dim);
        let pred_s = graphs::predict(&mut g, arch, &params, xs, ys, xs);
        let support_loss = g.mse(pred_s, ys);
        let adapted = match arch.variant {
            Variant::Maml => adapt(&mut g, &params, opts.inner_lr, opts.inner_steps, opts.first_order, |g, p| {
                let pred = graphs::predict(g, arch, p, xs, ys, xs);
                g.mse(pred, ys)
            }),
            Variant::Cnp => params.clone(),
        };
        let pred_q = graphs::predict(&mut g, arch, &adapted, xs, ys, xq);
        let query_loss = g.mse(pred_q, yq);
        let mut delta_sq = g.scalar(0.0);
        for (&a, &p) in adapted.iter().zip(&params) {
            if a != p {
                let d = g.sub(a, p);
                let sq = g.square(d);
                let s = g.sum(sq);
                delta_sq = g.add(delta_sq, s);
            }
        }
        let grads = g.grad(query_loss, &params).expect("query loss is scalar");
        Self { graph: g, params, xs, ys, xq, yq, support_loss, query_loss, delta_sq, adapted, grads }
    }

    fn bindings<'a>(&self, params: &'a [Tensor], task: &'a TaskDataset) -> Bindings<'a> {
        let mut b = Bindings::new();
        b.bind_all(&self.params, params)
            .bind(self.xs, &task.support_x)
            .bind(self.ys, &task.support_y)
            .bind(self.xq, &task.query_x)
            .bind(self.yq, &task.query_y);
        b
    }
}

/// A meta-learner: parameters, adaptation options and cached loss graphs.
pub struct MetaLearner {
    pub params: MetaParams,
    pub opts: LearnerOptions,
    cache: Mutex<Vec<((usize, usize), Arc<TaskGraph>)>>,
}

impl Clone for MetaLearner {
    fn clone(&self) -> Self {
        Self::new(self.params.clone(), self.opts)
    }
}

impl std::fmt::Debug for MetaLearner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetaLearner").field("params", &self.params).field("opts", &self.opts).finish()
    }
}

impl MetaLearner {
    pub fn new(params: MetaParams, opts: LearnerOptions) -> Self {
        Self { params, opts, cache: Mutex::new(Vec::new()) }
    }

    fn check(&self, task: &TaskDataset) -> Result<(), MetaError> {
        let a = self.params.arch();
        if task.query_x.rows() == 0 {
            return Err(MetaError::EmptyQuery);
        }
        if task.support_x.rows() == 0 {
            return Err(MetaError::EmptySupport);
        }
        for (t, c, name) in [
            (&task.support_x, a.input_dim, "support_x"),
            (&task.query_x, a.input_dim, "query_x"),
            (&task.support_y, a.output_dim, "support_y"),
            (&task.query_y, a.output_dim, "query_y"),
        ] {
            if t.cols() != c {
                return Err(MetaError::Shape(format!("{name} has {} columns, expected {c}", t.cols())));
            }
        }
        Ok(())
    }

    fn graph_for(&self, task: &TaskDataset) -> Arc<TaskGraph> {
        let key = (task.support_x.rows(), task.query_x.rows());
        let mut cache = self.cache.lock().expect("graph cache poisoned");
        if let Some((_, g)) = cache.iter().find(|(k, _)| *k == key) {
            return g.clone();
        }
        let g = Arc::new(TaskGraph::build(self.params.arch(), &self.opts, key.0, key.1));
        cache.push((key, g.clone()));
        g
    }

    /// Replaces the parameters, keeping cached graphs.
    pub fn set_params(&mut self, p: MetaParams) {
        assert_eq!(p.arch(), self.params.arch(), "architecture change");
        self.params = p;
    }

    /// `θᵢ` after `steps` inner SGD steps on the support set.
    pub fn inner_adapt(&self, task: &TaskDataset) -> Result<MetaParams, MetaError> {
        if self.params.arch().variant == Variant::Cnp {
            return Err(MetaError::NoInnerLoop);
        }
        if self.opts.inner_steps == 0 {
            return Err(MetaError::ZeroSteps);
        }
        self.check(task)?;
        let tg = self.graph_for(task);
        let vals = tg.graph.evaluate(&tg.bindings(self.params.tensors(), task), &tg.adapted)?;
        MetaParams::from_tensors(self.params.arch().clone(), vals)
    }

    pub fn task_loss(&self, task: &TaskDataset) -> Result<TaskLossRecord, MetaError> {
        Ok(self.run(task, false)?.0)
    }

    /// Loss record and `∇_θ` of the query loss.
    pub fn task_loss_and_grad(&self, task: &TaskDataset) -> Result<(TaskLossRecord, ParamVector), MetaError> {
        let (rec, grad) = self.run(task, true)?;
        Ok((rec, grad.expect("gradient requested")))
    }

    fn run(&self, task: &TaskDataset, with_grad: bool) -> Result<(TaskLossRecord, Option<ParamVector>), MetaError> {
        if self.params.arch().variant == Variant::Maml && self.opts.inner_steps == 0 {
            return Err(MetaError::ZeroSteps);
        }
        self.check(task)?;
        let tg = self.graph_for(task);
        let mut outs = vec![tg.support_loss, tg.query_loss, tg.delta_sq];
        if with_grad {
            outs.extend_from_slice(&tg.grads);
        }
        let vals = tg.graph.evaluate(&tg.bindings(self.params.tensors(), task), &outs)?;
        let rec = TaskLossRecord {
            tau: task.tau.clone(),
            support_loss: vals[0].item(),
            query_loss: vals[1].item(),
            delta_norm: vals[2].item().sqrt(),
        };
        let grad = with_grad.then(|| ParamVector::from_tensors(&vals[3..]));
        Ok((rec, grad))
    }

    /// Per-task records and gradients, in batch order.
    pub fn batch_losses_and_grads(&self, batch: &[TaskDataset]) -> Result<Vec<(TaskLossRecord, ParamVector)>, MetaError> {
        if batch.is_empty() {
            return Err(MetaError::EmptyBatch);
        }
        let out: Vec<_> = batch.par_iter().map(|t| self.task_loss_and_grad(t)).collect();
        out.into_iter()
            .enumerate()
            .map(|(k, r)| {
                let (rec, g) = r?;
                if !rec.query_loss.is_finite() || !g.is_finite() {
                    return Err(MetaError::NonFinite { task: k });
                }
                Ok((rec, g))
            })
            .collect()
    }

    /// Per-task records without gradients, in batch order.
    pub fn batch_losses(&self, batch: &[TaskDataset]) -> Result<Vec<TaskLossRecord>, MetaError> {
        let out: Vec<_> = batch.par_iter().map(|t| self.task_loss(t)).collect();
        out.into_iter().collect()
    }

    /// `(1/K) Σ_k ∇_θ L_k`.
    pub fn meta_gradient(&self, batch: &[TaskDataset]) -> Result<ParamVector, MetaError> {
        let per = self.batch_losses_and_grads(batch)?;
        let w = vec![1.0 / per.len() as f64; per.len()];
        Ok(combine(&per, &w))
    }
}

/// `Σ_k w_k g_k`, reduced in index order.
pub fn combine(per: &[(TaskLossRecord, ParamVector)], weights: &[f64]) -> ParamVector {
    assert_eq!(per.len(), weights.len(), "one weight per task");
    let mut acc = per[0].1.zeros_like();
    for ((_, g), &w) in per.iter().zip(weights) {
        if w != 0.0 {
            acc.axpy(w, g);
        }
    }
    acc
}
