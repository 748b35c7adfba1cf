//! Python bindings: configs, flows, meta-models, training, evaluation and
//! the theory checks. Structured results come back as plain dicts.

use arml::eval::{self, TestDistribution};
use arml::flows::{FlowStack, StatsMode};
use arml::game::{self, RiskPrinciple};
use arml::kv::KvDoc;
use arml::metalearner::MetaParams;
use arml::tasks::generate_task;
use arml::autodiff::Tensor;
use arml_cli::run::{self, Checkpoint, CliError};
use arml_cli::ExperimentConfig;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

fn runtime(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn cli_err(e: CliError) -> PyErr {
    match e {
        CliError::Config(m) => PyValueError::new_err(m.to_string()),
        CliError::Runtime(m) => PyRuntimeError::new_err(m),
    }
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

/// Experiment configuration in the `key = value` format.
#[pyclass(name = "Config", module = "pyarml", skip_from_py_object)]
#[derive(Clone)]
pub struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::parse(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: run::load_config(&path).map_err(cli_err)? })
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv().render()
    }

    #[getter]
    fn benchmark(&self) -> &'static str {
        self.inner.benchmark.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.game.iterations
    }

    fn __repr__(&self) -> String {
        format!("Config(benchmark={}, seed={})", self.inner.benchmark.name(), self.inner.seed())
    }
}

/// Task distribution: a base distribution pushed through flow layers.
#[pyclass(name = "Flow", module = "pyarml", skip_from_py_object)]
#[derive(Clone)]
pub struct PyFlow {
    inner: FlowStack,
}

#[pymethods]
impl PyFlow {
    /// The configured initial flow (identity layers for non-adversarial runs), with frozen statistics.
    #[staticmethod]
    fn initial(config: &PyConfig) -> PyResult<Self> {
        let cfg = &config.inner;
        let (_, mut inner) = run::initial_state(cfg).map_err(cli_err)?;
        if inner.num_minmax() > 0 {
            inner.freeze_stats(&mut game::init_rng(cfg.seed()), cfg.game.freeze_samples.max(2)).map_err(runtime)?;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_kv(text: &str) -> PyResult<Self> {
        let doc = KvDoc::parse(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner: FlowStack::from_kv(&doc).map_err(|e| PyValueError::new_err(e.to_string()))? })
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv().render()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Draws tasks with the frozen statistics.
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(rows(&self.inner.sample(&mut rng, n, StatsMode::Frozen).map_err(runtime)?.tasks))
    }

    /// Log-densities under the frozen statistics; `-inf` outside the support.
    fn log_prob(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let stats = self.inner.frozen_stats().unwrap_or(&[]).to_vec();
        self.inner.log_prob_batch(&Tensor::from_rows(&points), &stats).map_err(runtime)
    }

    /// Monte Carlo entropy as `(estimate, std_error)`.
    fn entropy(&self, n_samples: usize, seed: u64) -> PyResult<(f64, f64)> {
        let e = eval::entropy(&self.inner, n_samples, seed).map_err(runtime)?;
        Ok((e.estimate, e.std_error))
    }

    /// Log-density on a `resolution`² grid over the benchmark box; rows index the first coordinate.
    fn density(&self, config: &PyConfig, resolution: usize) -> PyResult<Vec<Vec<Option<f64>>>> {
        let spec = config.inner.spec();
        let g = eval::density_grid(&self.inner, [spec.low[0], spec.low[1]], [spec.high[0], spec.high[1]], resolution).map_err(runtime)?;
        Ok((0..resolution).map(|i| (0..resolution).map(|j| g.at(i, j)).collect()).collect())
    }
}

/// Meta-learner initialisation θ.
#[pyclass(name = "Model", module = "pyarml", skip_from_py_object)]
#[derive(Clone)]
pub struct PyModel {
    inner: MetaParams,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn initial(config: &PyConfig) -> PyResult<Self> {
        let (inner, _) = run::initial_state(&config.inner).map_err(cli_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_kv(text: &str) -> PyResult<Self> {
        let doc = KvDoc::parse(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self { inner: MetaParams::from_kv(&doc).map_err(|e| PyValueError::new_err(e.to_string()))? })
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv().render()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Query loss after adapting on the support set of the task `tau`.
    fn task_loss(&self, config: &PyConfig, tau: Vec<f64>, seed: u64) -> PyResult<f64> {
        let task = generate_task(&config.inner.spec(), &tau, seed).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let learner = arml::metalearner::MetaLearner::new(self.inner.clone(), config.inner.game.learner_options());
        Ok(learner.task_loss(&task).map_err(runtime)?.query_loss)
    }
}

/// Runs the configured game; returns `(model, flow, trace)` with the trace as a list of dicts.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<(PyModel, PyFlow, Bound<'py, PyAny>)> {
    let cfg = &config.inner;
    let (meta, stack) = run::initial_state(cfg).map_err(cli_err)?;
    let out = py.detach(|| game::train(&cfg.game, meta, stack, &cfg.spec())).map_err(runtime)?;
    let mut stack = out.stack;
    if stack.num_minmax() > 0 {
        stack.freeze_stats(&mut game::init_rng(cfg.seed()), cfg.game.freeze_samples.max(2)).map_err(runtime)?;
    }
    let records: Vec<String> = out.trace.records.iter().map(game::record_line).collect();
    let trace = json_to_py(py, &format!("[{}]", records.join(",")))?;
    Ok((PyModel { inner: out.meta }, PyFlow { inner: stack }, trace))
}

/// Evaluates on the initial distribution, or on `flow` when given.
#[pyfunction]
#[pyo3(signature = (model, config, flow=None, n_tasks=500, alphas=vec![0.5], seed=0))]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    config: &PyConfig,
    flow: Option<&PyFlow>,
    n_tasks: usize,
    alphas: Vec<f64>,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = &config.inner;
    let spec = cfg.spec();
    let base = spec.initial_distribution(cfg.initial).map_err(runtime)?;
    let dist = match flow {
        Some(f) => TestDistribution::Adversarial(&f.inner),
        None => TestDistribution::Initial(&base),
    };
    let report = eval::evaluate(&model.inner, cfg.game.learner_options(), dist, &spec, n_tasks, &alphas, seed).map_err(|e| match e {
        eval::EvalError::Alpha(_) | eval::EvalError::NoTasks => PyValueError::new_err(e.to_string()),
        other => runtime(other),
    })?;
    json_to_py(py, &report.to_json())
}

/// Mean of the worst `⌈(1 − α)·n⌉` losses.
#[pyfunction]
fn cvar(losses: Vec<f64>, alpha: f64) -> PyResult<f64> {
    eval::cvar(&losses, alpha).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Per-task weights for `erm`, `tr` or `dr:<alpha>`.
#[pyfunction]
fn risk_weights(principle: &str, losses: Vec<f64>) -> PyResult<Vec<f64>> {
    match RiskPrinciple::parse(principle) {
        Some(RiskPrinciple::Erm) => Ok(game::erm_weights(losses.len())),
        Some(RiskPrinciple::Tr) => Ok(game::tr_weights(&losses)),
        Some(RiskPrinciple::Dr { alpha }) => Ok(game::dr_weights(&losses, alpha)),
        _ => Err(PyValueError::new_err(format!("no stateless weights for principle {principle:?}"))),
    }
}

/// Alternating GDA on the configured games, plus the importance-weight check when `flow` is given.
#[pyfunction]
#[pyo3(signature = (config, flow=None, seed=0))]
fn theory<'py>(py: Python<'py>, config: &PyConfig, flow: Option<&PyFlow>, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let out = run::cmd_theory(&config.inner, flow.map(|f| &f.inner), seed).map_err(cli_err)?;
    json_to_py(py, &serde_json::to_string(&out).map_err(runtime)?)
}

#[pyfunction]
fn save_checkpoint(dir: PathBuf, config: &PyConfig, model: &PyModel, flow: &PyFlow) -> PyResult<()> {
    let ck = Checkpoint { config: config.inner.clone(), meta: model.inner.clone(), stack: flow.inner.clone() };
    ck.write(&dir).map_err(cli_err)
}

/// Reads a checkpoint directory written by `arml train` or `save_checkpoint`.
#[pyfunction]
fn load_checkpoint(dir: PathBuf) -> PyResult<(PyConfig, PyModel, PyFlow)> {
    let ck = Checkpoint::read(&dir).map_err(cli_err)?;
    Ok((PyConfig { inner: ck.config }, PyModel { inner: ck.meta }, PyFlow { inner: ck.stack }))
}

#[pymodule]
fn pyarml(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyFlow>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cvar, m)?)?;
    m.add_function(wrap_pyfunction!(risk_weights, m)?)?;
    m.add_function(wrap_pyfunction!(theory, m)?)?;
    m.add_function(wrap_pyfunction!(save_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    Ok(())
}
