use crate::config::{ConfigError, ExperimentConfig, TheoryGame};
use arml::eval::{density_grid, entropy, evaluate, EntropyEstimate, EvalReport, TestDistribution};
use arml::flows::FlowStack;
use arml::game::{init_rng, record_line, train_observed, IterationRecord, TrainObserver, TrainOutcome};
use arml::kv::KvDoc;
use arml::metalearner::{Architecture, MetaParams};
use arml::theory::{importance_weight_bound, run_alt_gda, search_contracting_games, ContractionReport, GameSearch, QuadraticGame, WeightBoundReport};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const MANIFEST: &str = "manifest.kv";
pub const TRACE: &str = "trace.jsonl";
pub const TIMING: &str = "timing.kv";
pub const CHECKPOINTS: &str = "checkpoints";
pub const FINAL: &str = "final";
pub const META_FILE: &str = "meta.kv";
pub const FLOW_FILE: &str = "flow.kv";
pub const CONFIG_FILE: &str = "config.kv";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn rt(context: impl std::fmt::Display) -> impl FnOnce(String) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Invalid {
        field: "--config".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    Ok(ExperimentConfig::parse(&text)?)
}

/// Initial meta-parameters and flow for a config, drawn from the seed's
/// initialization stream.
pub fn initial_state(cfg: &ExperimentConfig) -> Result<(MetaParams, FlowStack), CliError> {
    let spec = cfg.spec();
    let base = spec.initial_distribution(cfg.initial).map_err(|e| rt("initial distribution")(e.to_string()))?;
    let mut rng = init_rng(cfg.seed());
    let meta = MetaParams::init(Architecture::for_benchmark(cfg.variant, &spec), &mut rng);
    let stack = if cfg.game.principle.is_adversarial() {
        FlowStack::planar_minmax(base, cfg.n_planar, &spec.low, &spec.high, &mut rng)
            .map_err(|e| rt("flow")(e.to_string()))?
    } else {
        FlowStack::identity(base)
    };
    Ok((meta, stack))
}

/// A trained model with the config it was trained under.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub meta: MetaParams,
    pub stack: FlowStack,
}

impl Checkpoint {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        write_file(&dir.join(CONFIG_FILE), &self.config.to_kv().render())?;
        write_file(&dir.join(META_FILE), &self.meta.to_kv().render())?;
        write_file(&dir.join(FLOW_FILE), &self.stack.to_kv().render())
    }

    pub fn read(dir: &Path) -> Result<Self, CliError> {
        if !dir.is_dir() {
            return Err(CliError::Runtime(format!("checkpoint {} does not exist", dir.display())));
        }
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(io_err(&p))
        };
        let config = ExperimentConfig::parse(&read(CONFIG_FILE)?)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.join(CONFIG_FILE).display())))?;
        let meta_doc = KvDoc::parse(&read(META_FILE)?).map_err(|e| rt(META_FILE)(e.to_string()))?;
        let meta = MetaParams::from_kv(&meta_doc).map_err(|e| rt(META_FILE)(e.to_string()))?;
        let flow_doc = KvDoc::parse(&read(FLOW_FILE)?).map_err(|e| rt(FLOW_FILE)(e.to_string()))?;
        let stack = FlowStack::from_kv(&flow_doc).map_err(|e| rt(FLOW_FILE)(e.to_string()))?;
        Ok(Self { config, meta, stack })
    }
}

struct RunObserver<'a> {
    trace: BufWriter<fs::File>,
    dir: &'a Path,
    cfg: &'a ExperimentConfig,
}

impl TrainObserver for RunObserver<'_> {
    fn on_iteration(&mut self, record: &IterationRecord) -> std::io::Result<()> {
        writeln!(self.trace, "{}", record_line(record))
    }

    fn on_checkpoint(&mut self, iteration: usize, meta: &MetaParams, stack: &FlowStack) -> std::io::Result<()> {
        let mut stack = stack.clone();
        if stack.num_minmax() > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed());
            rng.set_stream(5 + iteration as u64);
            stack.freeze_stats(&mut rng, self.cfg.game.freeze_samples.max(2)).map_err(std::io::Error::other)?;
        }
        let ck = Checkpoint { config: self.cfg.clone(), meta: meta.clone(), stack };
        let dir = self.dir.join(CHECKPOINTS).join(format!("iter_{iteration:06}"));
        ck.write(&dir).map_err(std::io::Error::other)
    }
}

/// Trains into `dir`: manifest, streamed trace, checkpoints, final model and
/// a timing file kept apart from the deterministic artifacts.
pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path) -> Result<TrainOutcome, CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = String::from("# arml run manifest; rerun with `arml train --config manifest.kv`\n");
    manifest.push_str(&cfg.to_kv().render());
    write_file(&dir.join(MANIFEST), &manifest)?;
    let (meta, stack) = initial_state(cfg)?;
    let trace_path = dir.join(TRACE);
    let file = fs::File::create(&trace_path).map_err(io_err(&trace_path))?;
    let mut obs = RunObserver { trace: BufWriter::new(file), dir, cfg };
    let started = Instant::now();
    let out = train_observed(&cfg.game, meta, stack, &cfg.spec(), &mut obs).map_err(|e| CliError::Runtime(format!("training: {e}")))?;
    obs.trace.flush().map_err(io_err(&trace_path))?;
    let secs = started.elapsed().as_secs_f64();
    Checkpoint { config: cfg.clone(), meta: out.meta.clone(), stack: out.stack.clone() }.write(&dir.join(FINAL))?;
    let mut timing = KvDoc::new();
    timing.set_f64("elapsed_seconds", secs);
    timing.set_f64("iterations_per_second", cfg.game.iterations as f64 / secs.max(1e-12));
    write_file(&dir.join(TIMING), &timing.render())?;
    Ok(out)
}

/// Initial- and adversarial-distribution reports for a checkpoint.
pub fn cmd_eval(ck: &Checkpoint, n_tasks: usize, alphas: &[f64], seed: u64) -> Result<(EvalReport, EvalReport), CliError> {
    let cfg = &ck.config;
    let spec = cfg.spec();
    let base = spec.initial_distribution(cfg.initial).map_err(|e| rt("initial distribution")(e.to_string()))?;
    let opts = cfg.game.learner_options();
    let run = |d, s| evaluate(&ck.meta, opts, d, &spec, n_tasks, alphas, s).map_err(|e| CliError::Runtime(format!("evaluation: {e}")));
    let initial = run(TestDistribution::Initial(&base), seed)?;
    let adversarial = run(TestDistribution::Adversarial(&ck.stack), seed.wrapping_add(1))?;
    Ok((initial, adversarial))
}

pub fn write_eval(dir: &Path, reports: &(EvalReport, EvalReport)) -> Result<(), CliError> {
    write_file(&dir.join("eval_initial.json"), &(reports.0.to_json() + "\n"))?;
    write_file(&dir.join("eval_adversarial.json"), &(reports.1.to_json() + "\n"))
}

/// The flow of a checkpoint, or the identity flow over the configured
/// initial distribution.
pub fn stack_for(cfg: &ExperimentConfig, ck: Option<&Checkpoint>) -> Result<FlowStack, CliError> {
    match ck {
        Some(c) => Ok(c.stack.clone()),
        None => {
            let base = cfg.spec().initial_distribution(cfg.initial).map_err(|e| rt("initial distribution")(e.to_string()))?;
            Ok(FlowStack::identity(base))
        }
    }
}

/// CSV with header `x,y,log_density`.
pub fn cmd_density(cfg: &ExperimentConfig, stack: &FlowStack) -> Result<String, CliError> {
    let spec = cfg.spec();
    if spec.low.len() != 2 {
        return Err(CliError::Runtime("density grids need a two-dimensional identifier".into()));
    }
    let grid = density_grid(stack, [spec.low[0], spec.low[1]], [spec.high[0], spec.high[1]], cfg.density_resolution)
        .map_err(|e| CliError::Runtime(format!("density: {e}")))?;
    let mut buf = Vec::new();
    grid.write_csv(&mut buf).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

pub const ENTROPY_HEADER: &str = "source,estimate,std_error,base_entropy,n_samples";

pub fn entropy_row(source: &str, e: &EntropyEstimate) -> String {
    format!("{source},{:.6},{:.6},{:.6},{}", e.estimate, e.std_error, e.base_entropy, e.n_samples)
}

/// One entropy table row per `(label, stack)`.
pub fn cmd_entropy(cfg: &ExperimentConfig, stacks: &[(String, FlowStack)], seed: u64) -> Result<String, CliError> {
    let mut out = String::from(ENTROPY_HEADER);
    out.push('\n');
    for (label, s) in stacks {
        let e = entropy(s, cfg.entropy_samples, seed).map_err(|e| CliError::Runtime(format!("entropy of {label}: {e}")))?;
        out.push_str(&entropy_row(label, &e));
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct TheoryOutput {
    pub mode: String,
    pub search: Option<GameSearch>,
    pub reports: Vec<ContractionReport>,
    pub theory_violations: usize,
    pub weight_bound: Option<WeightBoundReport>,
}

/// Runs alternating GDA on the configured games, and the importance-weight
/// check when a flow is given.
pub fn cmd_theory(cfg: &ExperimentConfig, stack: Option<&FlowStack>, seed: u64) -> Result<TheoryOutput, CliError> {
    let terr = |e: arml::theory::TheoryError| CliError::Runtime(format!("theory: {e}"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mode, search, runs) = match cfg.theory_game {
        TheoryGame::Decoupled => {
            let g = QuadraticGame::new(DMatrix::identity(1, 1), DMatrix::zeros(1, 1), -DMatrix::identity(1, 1)).map_err(terr)?;
            ("decoupled", None, vec![(g, cfg.theory_gamma1, cfg.theory_gamma2)])
        }
        TheoryGame::Search => {
            let (found, games) = search_contracting_games(seed, cfg.theory_games, cfg.theory_max_attempts, cfg.theory_d1, cfg.theory_d2);
            let runs = games.into_iter().zip(&found.games).map(|(g, &(_, g1, g2, _))| (g, g1, g2)).collect();
            ("search", Some(found), runs)
        }
    };
    let mut reports = Vec::new();
    for (g, g1, g2) in runs {
        let (d1, d2) = g.dims();
        let z0 = DVector::from_fn(d1 + d2, |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        reports.push(run_alt_gda(&g, g1, g2, &z0, cfg.theory_steps).map_err(terr)?);
    }
    let weight_bound = stack.map(|s| importance_weight_bound(s, cfg.weight_pairs, seed)).transpose().map_err(terr)?;
    Ok(TheoryOutput {
        mode: mode.into(),
        search,
        theory_violations: reports.iter().filter(|r| r.theory_violation).count(),
        reports,
        weight_bound,
    })
}

/// `path` when given, otherwise `default`.
pub fn out_path(path: Option<PathBuf>, default: impl FnOnce() -> PathBuf) -> PathBuf {
    path.unwrap_or_else(default)
}
