use arml_cli::run::{self, Checkpoint, CliError};
use arml_cli::{ConfigError, ExperimentConfig};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "arml", version, about = "Adversarially robust meta-learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat `key = value` text).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 keeps runs byte-reproducible.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a meta-learner, writing a run directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the initial and adversarial distributions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CVaR level; repeat for several.
        #[arg(long = "alpha")]
        alpha: Vec<f64>,
        #[arg(long = "n-tasks")]
        n_tasks: Option<usize>,
    },
    /// Log-density grid over the identifier box as CSV.
    Density {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Entropy table; without checkpoints, the initial distribution.
    Entropy {
        #[command(flatten)]
        common: Common,
        /// Repeat for several rows.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Alternating GDA on quadratic games, plus the importance-weight bound
    /// for a checkpoint's flow.
    Theory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn resolve(common: &Common, fallback: Option<&ExperimentConfig>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match (&common.config, fallback) {
        (Some(p), _) => run::load_config(p)?,
        (None, Some(c)) => c.clone(),
        (None, None) => {
            return Err(ConfigError::Invalid { field: "--config".into(), message: "required without --checkpoint".into() }.into())
        }
    };
    if let Some(s) = common.seed {
        cfg.game.seed = s;
    }
    Ok(cfg)
}

fn set_threads(n: usize) -> Result<(), CliError> {
    if n == 0 {
        return Err(ConfigError::Invalid { field: "--threads".into(), message: "must be positive".into() }.into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn emit(out: Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => run::write_file(&p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common } => {
            set_threads(common.threads)?;
            let mut cfg = resolve(&common, None)?;
            if let Some(o) = &common.out {
                cfg.out_dir = o.display().to_string();
            }
            let dir = PathBuf::from(&cfg.out_dir);
            let out = run::cmd_train(&cfg, &dir)?;
            let tail = out.trace.records.last().map_or(f64::NAN, |r| r.mean_loss);
            println!("trained {} iterations into {} (final batch loss {tail:.6})", cfg.game.iterations, dir.display());
        }
        Command::Eval { common, checkpoint, alpha, n_tasks } => {
            set_threads(common.threads)?;
            let mut ck = Checkpoint::read(&checkpoint)?;
            ck.config = resolve(&common, Some(&ck.config))?;
            let alphas = if alpha.is_empty() { ck.config.eval_alphas.clone() } else { alpha };
            if let Some(a) = alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
                return Err(ConfigError::Invalid { field: "--alpha".into(), message: format!("{a} is outside [0, 1)") }.into());
            }
            let n = n_tasks.unwrap_or(ck.config.eval_n_tasks);
            if n == 0 {
                return Err(ConfigError::Invalid { field: "--n-tasks".into(), message: "must be positive".into() }.into());
            }
            let reports = run::cmd_eval(&ck, n, &alphas, ck.config.seed())?;
            let dir = run::out_path(common.out, || checkpoint.join("reports"));
            run::write_eval(&dir, &reports)?;
            for r in [&reports.0, &reports.1] {
                let cv: Vec<String> = r.cvar.iter().map(|c| format!("cvar{}={:.6}", c.alpha, c.value)).collect();
                println!("{:?}: mean={:.6} {}", r.source, r.mean, cv.join(" "));
            }
        }
        Command::Density { common, checkpoint } => {
            set_threads(common.threads)?;
            let ck = checkpoint.as_deref().map(Checkpoint::read).transpose()?;
            let cfg = resolve(&common, ck.as_ref().map(|c| &c.config))?;
            let stack = run::stack_for(&cfg, ck.as_ref())?;
            emit(common.out, &run::cmd_density(&cfg, &stack)?)?;
        }
        Command::Entropy { common, checkpoint } => {
            set_threads(common.threads)?;
            let cks = checkpoint.iter().map(|p| Checkpoint::read(p).map(|c| (p.display().to_string(), c))).collect::<Result<Vec<_>, _>>()?;
            let cfg = resolve(&common, cks.first().map(|(_, c)| &c.config))?;
            let stacks = if cks.is_empty() {
                vec![("initial".to_string(), run::stack_for(&cfg, None)?)]
            } else {
                cks.into_iter().map(|(l, c)| (l, c.stack)).collect()
            };
            emit(common.out, &run::cmd_entropy(&cfg, &stacks, cfg.seed())?)?;
        }
        Command::Theory { common, checkpoint } => {
            set_threads(common.threads)?;
            let ck = checkpoint.as_deref().map(Checkpoint::read).transpose()?;
            let cfg = match (&common.config, &ck) {
                (None, None) => {
                    let mut c = ExperimentConfig::defaults(arml::tasks::Benchmark::Sinusoid);
                    if let Some(s) = common.seed {
                        c.game.seed = s;
                    }
                    c
                }
                _ => resolve(&common, ck.as_ref().map(|c| &c.config))?,
            };
            let out = run::cmd_theory(&cfg, ck.as_ref().map(|c| &c.stack), cfg.seed())?;
            let json = serde_json::to_string_pretty(&out).expect("theory output serializes") + "\n";
            eprintln!("{} game(s), {} theory violation(s)", out.reports.len(), out.theory_violations);
            emit(common.out, &json)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("arml: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
