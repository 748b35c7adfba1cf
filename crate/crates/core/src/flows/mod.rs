//! Base task distributions and invertible flow stacks over task identifiers.

mod base;
mod grad;
mod layers;

use rand::Rng;

pub use base::BaseDistribution;
pub use grad::{weighted_log_prob, WeightedLogProb};
pub use layers::{FlowLayer, MinMaxLayer, MinMaxStats, PlanarLayer, LEAKY_SLOPE, MINMAX_EPS};

use crate::autodiff::{ParamVector, Tensor};
use crate::kv::{KvDoc, KvError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FlowError {
    #[error("invalid base distribution: {0}")]
    InvalidBase(String),
    #[error("min-max layer needs a batch of at least 2 points, got {0}")]
    BatchTooSmall(usize),
    #[error("layer {layer} is not invertible at its current parameters")]
    NotInvertible { layer: usize },
    #[error("no frozen min-max statistics; call freeze_stats first")]
    NoFrozenStats,
    #[error("expected {expected} min-max statistics, got {got}")]
    StatsCount { expected: usize, got: usize },
    #[error("anchor batch does not reproduce the given min-max statistics")]
    AnchorStats,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("parameter vector does not match the stack layout")]
    ParamLayout,
    #[error("task identifier has non-finite coordinates")]
    NonFinite,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<KvError> for FlowError {
    fn from(e: KvError) -> Self {
        FlowError::Checkpoint(e.to_string())
    }
}

/// A point in task space.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskIdentifier(Vec<f64>);

impl TaskIdentifier {
    pub fn new(coords: Vec<f64>) -> Result<Self, FlowError> {
        if coords.iter().all(|x| x.is_finite()) {
            Ok(Self(coords))
        } else {
            Err(FlowError::NonFinite)
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }
}

/// Which min-max statistics a forward pass uses.
#[derive(Clone, Copy, Debug)]
pub enum StatsMode<'a> {
    /// Computed from the batch itself.
    Batch,
    /// The statistics frozen on the stack.
    Frozen,
    Given(&'a [MinMaxStats]),
}

#[derive(Clone, Debug)]
pub struct FlowOutput {
    pub points: Tensor,
    /// Per-sample sum of forward log-dets.
    pub log_det: Vec<f64>,
    /// Statistics used by each min-max layer, in layer order.
    pub stats: Vec<MinMaxStats>,
}

#[derive(Clone, Debug)]
pub struct FlowSample {
    pub tasks: Tensor,
    pub base: Tensor,
    pub log_det: Vec<f64>,
    pub stats: Vec<MinMaxStats>,
}

/// `τ = g_M ∘ … ∘ g_1(τ⁰)` with `τ⁰ ~ p0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack {
    base: BaseDistribution,
    layers: Vec<FlowLayer>,
    frozen: Option<Vec<MinMaxStats>>,
}

impl FlowStack {
    pub fn new(base: BaseDistribution, layers: Vec<FlowLayer>) -> Result<Self, FlowError> {
        let d = base.dim();
        for l in &layers {
            if l.dim() != d {
                return Err(FlowError::Dim { expected: d, got: l.dim() });
            }
        }
        Ok(Self { base, layers, frozen: None })
    }

    /// No layers: the distribution is `p0` itself.
    pub fn identity(base: BaseDistribution) -> Self {
        Self { base, layers: Vec::new(), frozen: None }
    }

    /// `n_planar` identity-initialized planar layers followed by a frozen-range
    /// min-max layer onto `[low, high]`.
    pub fn planar_minmax<R: Rng + ?Sized>(
        base: BaseDistribution,
        n_planar: usize,
        low: &[f64],
        high: &[f64],
        rng: &mut R,
    ) -> Result<Self, FlowError> {
        let d = base.dim();
        let mut layers: Vec<FlowLayer> = (0..n_planar)
            .map(|_| FlowLayer::Planar(PlanarLayer::identity_random(rng, d, 1.0)))
            .collect();
        layers.push(FlowLayer::MinMax(MinMaxLayer::onto_box(low, high)));
        Self::new(base, layers)
    }

    pub fn base(&self) -> &BaseDistribution {
        &self.base
    }

    pub fn layers(&self) -> &[FlowLayer] {
        &self.layers
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn num_minmax(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, FlowLayer::MinMax(_)))
            .count()
    }

    pub fn frozen_stats(&self) -> Option<&[MinMaxStats]> {
        self.frozen.as_deref()
    }

    pub fn set_frozen_stats(&mut self, stats: Vec<MinMaxStats>) -> Result<(), FlowError> {
        if stats.len() != self.num_minmax() {
            return Err(FlowError::StatsCount { expected: self.num_minmax(), got: stats.len() });
        }
        self.frozen = Some(stats);
        Ok(())
    }

    /// Freezes min-max statistics from `n` fresh base samples.
    pub fn freeze_stats<R: Rng + ?Sized>(&mut self, rng: &mut R, n: usize) -> Result<(), FlowError> {
        let z = self.base.sample(rng, n);
        let out = self.forward_and_log_det(&z, StatsMode::Batch)?;
        self.frozen = Some(out.stats);
        Ok(())
    }

    fn resolve_stats<'a>(&'a self, mode: StatsMode<'a>) -> Result<Option<&'a [MinMaxStats]>, FlowError> {
        let n = self.num_minmax();
        match mode {
            StatsMode::Batch => Ok(None),
            StatsMode::Frozen if n == 0 => Ok(Some(&[])),
            StatsMode::Frozen => self.frozen.as_deref().map(Some).ok_or(FlowError::NoFrozenStats),
            StatsMode::Given(s) if s.len() == n => Ok(Some(s)),
            StatsMode::Given(s) => Err(FlowError::StatsCount { expected: n, got: s.len() }),
        }
    }

    fn check_invertible(&self) -> Result<(), FlowError> {
        for (i, l) in self.layers.iter().enumerate() {
            if let FlowLayer::Planar(p) = l {
                if !p.is_invertible() {
                    return Err(FlowError::NotInvertible { layer: i });
                }
            }
        }
        Ok(())
    }

    /// Pushes an `n x d` batch through every layer.
    pub fn forward_and_log_det(&self, batch: &Tensor, mode: StatsMode<'_>) -> Result<FlowOutput, FlowError> {
        let d = self.dim();
        if batch.cols() != d {
            return Err(FlowError::Dim { expected: d, got: batch.cols() });
        }
        self.check_invertible()?;
        let given = self.resolve_stats(mode)?;
        let n = batch.rows();
        if given.is_none() && self.num_minmax() > 0 && n < 2 {
            return Err(FlowError::BatchTooSmall(n));
        }
        let mut cur = batch.clone();
        let mut log_det = vec![0.0; n];
        let mut used = Vec::new();
        let mut out = vec![0.0; d];
        for layer in &self.layers {
            match layer {
                FlowLayer::Planar(p) => {
                    for r in 0..n {
                        log_det[r] += p.forward_point(cur.row_slice(r), &mut out);
                        cur.data_mut()[r * d..(r + 1) * d].copy_from_slice(&out);
                    }
                }
                FlowLayer::MinMax(m) => {
                    let stats = match given {
                        Some(s) => s[used.len()].clone(),
                        None => MinMaxStats::from_batch(&cur),
                    };
                    if stats.is_degenerate() {
                        log::warn!("min-max layer saw a degenerate dimension; using the {MINMAX_EPS:e} floor");
                    }
                    let ld = m.log_det(&stats);
                    for r in 0..n {
                        m.forward_point(cur.row_slice(r), &stats, &mut out);
                        cur.data_mut()[r * d..(r + 1) * d].copy_from_slice(&out);
                        log_det[r] += ld;
                    }
                    used.push(stats);
                }
            }
        }
        Ok(FlowOutput { points: cur, log_det, stats: used })
    }

    /// Maps tasks back to base space. Returns the base points and the
    /// per-sample log-det of the inverse map.
    pub fn inverse(&self, tasks: &Tensor, stats: &[MinMaxStats]) -> Result<(Tensor, Vec<f64>), FlowError> {
        let d = self.dim();
        if tasks.cols() != d {
            return Err(FlowError::Dim { expected: d, got: tasks.cols() });
        }
        if stats.len() != self.num_minmax() {
            return Err(FlowError::StatsCount { expected: self.num_minmax(), got: stats.len() });
        }
        self.check_invertible()?;
        let n = tasks.rows();
        let mut cur = tasks.clone();
        let mut log_det = vec![0.0; n];
        let mut out = vec![0.0; d];
        let mut si = stats.len();
        for layer in self.layers.iter().rev() {
            match layer {
                FlowLayer::Planar(p) => {
                    for r in 0..n {
                        log_det[r] += p.inverse_point(cur.row_slice(r), &mut out);
                        cur.data_mut()[r * d..(r + 1) * d].copy_from_slice(&out);
                    }
                }
                FlowLayer::MinMax(m) => {
                    si -= 1;
                    let ld = -m.log_det(&stats[si]);
                    for r in 0..n {
                        m.inverse_point(cur.row_slice(r), &stats[si], &mut out);
                        cur.data_mut()[r * d..(r + 1) * d].copy_from_slice(&out);
                        log_det[r] += ld;
                    }
                }
            }
        }
        Ok((cur, log_det))
    }

    /// `ln p_φ(τ)` per row, via the inverse path. `−∞` outside the support.
    pub fn log_prob_batch(&self, tasks: &Tensor, stats: &[MinMaxStats]) -> Result<Vec<f64>, FlowError> {
        let (z, ld) = self.inverse(tasks, stats)?;
        Ok((0..z.rows())
            .map(|r| self.base.log_prob(z.row_slice(r)) + ld[r])
            .collect())
    }

    /// `ln p_φ(τ)` using the frozen statistics.
    pub fn log_prob(&self, task: &TaskIdentifier) -> Result<f64, FlowError> {
        let stats = self.resolve_stats(StatsMode::Frozen)?.unwrap_or(&[]);
        let t = Tensor::row(task.coords().to_vec());
        Ok(self.log_prob_batch(&t, stats)?[0])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, count: usize, mode: StatsMode<'_>) -> Result<FlowSample, FlowError> {
        let base = self.base.sample(rng, count);
        let out = self.forward_and_log_det(&base, mode)?;
        Ok(FlowSample { tasks: out.points, base, log_det: out.log_det, stats: out.stats })
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.layers.iter().flat_map(FlowLayer::param_tensors).collect()
    }

    /// The adversary's parameters φ.
    pub fn params(&self) -> ParamVector {
        ParamVector::from_tensors(&self.param_tensors())
    }

    pub fn num_params(&self) -> usize {
        self.params().len()
    }

    pub fn set_params(&mut self, p: &ParamVector) -> Result<(), FlowError> {
        let cur = self.params();
        if cur.shapes() != p.shapes() {
            return Err(FlowError::ParamLayout);
        }
        let ts = p.to_tensors();
        let mut offset = 0;
        for layer in &mut self.layers {
            let k = layer.param_tensors().len();
            layer.set_param_tensors(&ts[offset..offset + k]);
            offset += k;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        match &self.base {
            BaseDistribution::Uniform { low, high } => {
                doc.set("base.kind", "uniform");
                doc.set_f64s("base.low", low);
                doc.set_f64s("base.high", high);
            }
            BaseDistribution::Normal { mean, std } => {
                doc.set("base.kind", "normal");
                doc.set_f64s("base.mean", mean);
                doc.set_f64s("base.std", std);
            }
        }
        doc.set("layers", self.layers.len().to_string());
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer.{i}.");
            match l {
                FlowLayer::Planar(pl) => {
                    doc.set(format!("{p}kind"), "planar");
                    doc.set_f64s(format!("{p}w"), &pl.w);
                    doc.set_f64s(format!("{p}u"), &pl.u);
                    doc.set_f64(format!("{p}b"), pl.b);
                }
                FlowLayer::MinMax(m) => {
                    doc.set(format!("{p}kind"), "minmax");
                    doc.set_f64s(format!("{p}log_scale"), &m.log_scale);
                    doc.set_f64s(format!("{p}offset"), &m.offset);
                    doc.set(format!("{p}trainable"), m.trainable.to_string());
                }
            }
        }
        if let Some(stats) = &self.frozen {
            for (i, s) in stats.iter().enumerate() {
                doc.set_f64s(format!("frozen.{i}.min"), &s.min);
                doc.set_f64s(format!("frozen.{i}.max"), &s.max);
            }
        }
        doc
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, FlowError> {
        let base = match doc.require("base.kind")? {
            "uniform" => BaseDistribution::uniform(doc.f64s("base.low")?, doc.f64s("base.high")?)?,
            "normal" => BaseDistribution::normal(doc.f64s("base.mean")?, doc.f64s("base.std")?)?,
            other => return Err(FlowError::Checkpoint(format!("unknown base kind `{other}`"))),
        };
        let n = doc.usize("layers")?;
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let p = format!("layer.{i}.");
            let layer = match doc.require(&format!("{p}kind"))? {
                "planar" => FlowLayer::Planar(PlanarLayer {
                    w: doc.f64s(&format!("{p}w"))?,
                    u: doc.f64s(&format!("{p}u"))?,
                    b: doc.f64(&format!("{p}b"))?,
                }),
                "minmax" => FlowLayer::MinMax(MinMaxLayer {
                    log_scale: doc.f64s(&format!("{p}log_scale"))?,
                    offset: doc.f64s(&format!("{p}offset"))?,
                    trainable: doc.parse_value(&format!("{p}trainable"), "a boolean")?,
                }),
                other => return Err(FlowError::Checkpoint(format!("unknown layer kind `{other}`"))),
            };
            layers.push(layer);
        }
        let mut stack = Self::new(base, layers)?;
        if doc.get("frozen.0.min").is_some() {
            let stats = (0..stack.num_minmax())
                .map(|i| {
                    Ok(MinMaxStats {
                        min: doc.f64s(&format!("frozen.{i}.min"))?,
                        max: doc.f64s(&format!("frozen.{i}.max"))?,
                    })
                })
                .collect::<Result<Vec<_>, FlowError>>()?;
            stack.set_frozen_stats(stats)?;
        }
        Ok(stack)
    }
}
