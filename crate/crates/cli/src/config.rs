//! Experiment configuration as a flat `key = value` document.
//!
//! Every key except `benchmark` has a default; unknown keys are rejected.

use arml::adversary::AdversaryOptimizerKind;
use arml::game::{GameConfig, LeaderOptimizer, RiskPrinciple};
use arml::kv::{fmt_f64, KvDoc, KvError};
use arml::metalearner::Variant;
use arml::tasks::{Benchmark, BenchmarkSpec, InitialKind};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("{0}")]
    Syntax(#[from] KvError),
    #[error("missing required field `{0}`")]
    Missing(&'static str),
    #[error("unknown field `{0}`")]
    Unknown(String),
    #[error("field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), message: message.into() }
}

/// How `theory` picks its quadratic games.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TheoryGame {
    /// Random games filtered to `Δ < ½`.
    Search,
    /// `A = I`, `B = 0`, `C = −I` in one dimension each.
    Decoupled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub initial: InitialKind,
    pub variant: Variant,
    pub game: GameConfig,
    pub n_planar: usize,
    pub eval_n_tasks: usize,
    pub eval_alphas: Vec<f64>,
    pub density_resolution: usize,
    pub entropy_samples: usize,
    pub theory_game: TheoryGame,
    pub theory_games: usize,
    pub theory_steps: usize,
    pub theory_max_attempts: usize,
    pub theory_d1: usize,
    pub theory_d2: usize,
    pub theory_gamma1: f64,
    pub theory_gamma2: f64,
    pub weight_pairs: usize,
    pub out_dir: String,
}

/// Keys in manifest order.
pub const KEYS: &[&str] = &[
    "benchmark",
    "initial",
    "variant",
    "principle",
    "lambda",
    "inner_lr",
    "inner_steps",
    "first_order",
    "outer_lr",
    "leader_optimizer",
    "follower_lr",
    "follower_optimizer",
    "follower_cosine",
    "stats_gradient",
    "batch_size",
    "update_every",
    "iterations",
    "dro_step",
    "delta",
    "checkpoint_every",
    "freeze_samples",
    "n_planar",
    "eval_n_tasks",
    "eval_alphas",
    "density_resolution",
    "entropy_samples",
    "theory_game",
    "theory_games",
    "theory_steps",
    "theory_max_attempts",
    "theory_d1",
    "theory_d2",
    "theory_gamma1",
    "theory_gamma2",
    "weight_pairs",
    "out_dir",
    "seed",
];

impl ExperimentConfig {
    /// All defaults for `benchmark`.
    pub fn defaults(benchmark: Benchmark) -> Self {
        Self {
            benchmark,
            initial: InitialKind::Uniform,
            variant: Variant::Maml,
            // System identification runs 500 meta-iterations; sinusoid uses the desk-scale default.
            game: GameConfig { iterations: if benchmark == Benchmark::Sinusoid { 2000 } else { 500 }, ..GameConfig::default() },
            n_planar: 2,
            eval_n_tasks: 500,
            eval_alphas: vec![0.5],
            density_resolution: arml::eval::DEFAULT_GRID_RESOLUTION,
            entropy_samples: arml::eval::EVAL_ENTROPY_SAMPLES,
            theory_game: TheoryGame::Search,
            theory_games: 50,
            theory_steps: 200,
            theory_max_attempts: 10_000,
            theory_d1: 3,
            theory_d2: 2,
            theory_gamma1: 0.5,
            theory_gamma2: 0.5,
            weight_pairs: 10_000,
            out_dir: "runs/default".to_string(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.game.seed
    }

    pub fn spec(&self) -> BenchmarkSpec {
        BenchmarkSpec::for_benchmark(self.benchmark)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_kv(&KvDoc::parse(text)?)
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self, ConfigError> {
        if let Some(k) = doc.keys().find(|k| !KEYS.contains(k)) {
            return Err(ConfigError::Unknown(k.to_string()));
        }
        let benchmark = doc.get("benchmark").ok_or(ConfigError::Missing("benchmark"))?;
        let benchmark = Benchmark::parse(benchmark).map_err(|e| invalid("benchmark", e.to_string()))?;
        let mut c = Self::defaults(benchmark);
        let p = Parser(doc);

        if let Some(v) = doc.get("initial") {
            c.initial = match v {
                "uniform" => InitialKind::Uniform,
                "normal" => InitialKind::Normal,
                _ => return Err(invalid("initial", "expected `uniform` or `normal`")),
            };
        }
        if let Some(v) = doc.get("variant") {
            c.variant = Variant::parse(v).ok_or_else(|| invalid("variant", "expected `maml` or `cnp`"))?;
        }
        if let Some(v) = doc.get("principle") {
            c.game.principle =
                RiskPrinciple::parse(v).ok_or_else(|| invalid("principle", "expected erm, tr, dr:<alpha>, dro or ar"))?;
        }
        let g = &mut c.game;
        p.f64("lambda", &mut g.lambda)?;
        p.f64("inner_lr", &mut g.inner_lr)?;
        p.usize("inner_steps", &mut g.inner_steps)?;
        p.bool("first_order", &mut g.first_order)?;
        p.f64("outer_lr", &mut g.outer_lr)?;
        if let Some(v) = doc.get("leader_optimizer") {
            g.leader_optimizer = match v {
                "sgd" => LeaderOptimizer::Sgd,
                "adam" => LeaderOptimizer::Adam,
                _ => return Err(invalid("leader_optimizer", "expected `sgd` or `adam`")),
            };
        }
        p.f64("follower_lr", &mut g.follower_lr)?;
        if let Some(v) = doc.get("follower_optimizer") {
            g.follower_optimizer = match v {
                "plain" => AdversaryOptimizerKind::Plain,
                "adam" => AdversaryOptimizerKind::Adam,
                _ => return Err(invalid("follower_optimizer", "expected `plain` or `adam`")),
            };
        }
        p.bool("follower_cosine", &mut g.follower_cosine)?;
        p.bool("stats_gradient", &mut g.stats_gradient)?;
        p.usize("batch_size", &mut g.batch_size)?;
        p.usize("update_every", &mut g.update_every)?;
        p.usize("iterations", &mut g.iterations)?;
        p.f64("dro_step", &mut g.dro_step)?;
        if let Some(v) = doc.get("delta") {
            g.delta = match v {
                "none" => None,
                _ => Some(p.real("delta")?),
            };
        }
        p.usize("checkpoint_every", &mut g.checkpoint_every)?;
        p.usize("freeze_samples", &mut g.freeze_samples)?;
        if let Some(v) = doc.get("seed") {
            g.seed = v.parse().map_err(|_| invalid("seed", "expected a non-negative integer"))?;
        }

        p.usize("n_planar", &mut c.n_planar)?;
        p.usize("eval_n_tasks", &mut c.eval_n_tasks)?;
        if doc.get("eval_alphas").is_some() {
            c.eval_alphas = doc.f64s("eval_alphas")?;
        }
        p.usize("density_resolution", &mut c.density_resolution)?;
        p.usize("entropy_samples", &mut c.entropy_samples)?;
        if let Some(v) = doc.get("theory_game") {
            c.theory_game = match v {
                "search" => TheoryGame::Search,
                "decoupled" => TheoryGame::Decoupled,
                _ => return Err(invalid("theory_game", "expected `search` or `decoupled`")),
            };
        }
        p.usize("theory_games", &mut c.theory_games)?;
        p.usize("theory_steps", &mut c.theory_steps)?;
        p.usize("theory_max_attempts", &mut c.theory_max_attempts)?;
        p.usize("theory_d1", &mut c.theory_d1)?;
        p.usize("theory_d2", &mut c.theory_d2)?;
        p.f64("theory_gamma1", &mut c.theory_gamma1)?;
        p.f64("theory_gamma2", &mut c.theory_gamma2)?;
        p.usize("weight_pairs", &mut c.weight_pairs)?;
        if let Some(v) = doc.get("out_dir") {
            c.out_dir = v.to_string();
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.game.validate().map_err(|e| invalid("game", e.to_string()))?;
        if self.game.principle.is_adversarial() && self.n_planar == 0 {
            return Err(invalid("n_planar", "the adversarial principle needs at least one planar layer"));
        }
        if self.eval_n_tasks == 0 {
            return Err(invalid("eval_n_tasks", "must be positive"));
        }
        if let Some(a) = self.eval_alphas.iter().find(|a| !(0.0..1.0).contains(*a)) {
            return Err(invalid("eval_alphas", format!("{a} is outside [0, 1)")));
        }
        if self.density_resolution == 0 {
            return Err(invalid("density_resolution", "must be positive"));
        }
        if self.entropy_samples < arml::eval::MIN_ENTROPY_SAMPLES {
            return Err(invalid("entropy_samples", format!("must be at least {}", arml::eval::MIN_ENTROPY_SAMPLES)));
        }
        if self.theory_steps == 0 || self.theory_d1 == 0 || self.theory_d2 == 0 {
            return Err(invalid("theory_steps", "theory steps and dimensions must be positive"));
        }
        if self.out_dir.is_empty() {
            return Err(invalid("out_dir", "must not be empty"));
        }
        Ok(())
    }

    /// Resolved document with every key.
    pub fn to_kv(&self) -> KvDoc {
        let g = &self.game;
        let mut d = KvDoc::new();
        d.set("benchmark", self.benchmark.name());
        d.set(
            "initial",
            match self.initial {
                InitialKind::Uniform => "uniform",
                InitialKind::Normal => "normal",
            },
        );
        d.set("variant", self.variant.name());
        d.set("principle", g.principle.name());
        d.set_f64("lambda", g.lambda);
        d.set_f64("inner_lr", g.inner_lr);
        d.set("inner_steps", g.inner_steps.to_string());
        d.set("first_order", g.first_order.to_string());
        d.set_f64("outer_lr", g.outer_lr);
        d.set(
            "leader_optimizer",
            match g.leader_optimizer {
                LeaderOptimizer::Sgd => "sgd",
                LeaderOptimizer::Adam => "adam",
            },
        );
        d.set_f64("follower_lr", g.follower_lr);
        d.set(
            "follower_optimizer",
            match g.follower_optimizer {
                AdversaryOptimizerKind::Plain => "plain",
                AdversaryOptimizerKind::Adam => "adam",
            },
        );
        d.set("follower_cosine", g.follower_cosine.to_string());
        d.set("stats_gradient", g.stats_gradient.to_string());
        d.set("batch_size", g.batch_size.to_string());
        d.set("update_every", g.update_every.to_string());
        d.set("iterations", g.iterations.to_string());
        d.set_f64("dro_step", g.dro_step);
        d.set("delta", g.delta.map_or_else(|| "none".to_string(), fmt_f64));
        d.set("checkpoint_every", g.checkpoint_every.to_string());
        d.set("freeze_samples", g.freeze_samples.to_string());
        d.set("n_planar", self.n_planar.to_string());
        d.set("eval_n_tasks", self.eval_n_tasks.to_string());
        d.set_f64s("eval_alphas", &self.eval_alphas);
        d.set("density_resolution", self.density_resolution.to_string());
        d.set("entropy_samples", self.entropy_samples.to_string());
        d.set(
            "theory_game",
            match self.theory_game {
                TheoryGame::Search => "search",
                TheoryGame::Decoupled => "decoupled",
            },
        );
        d.set("theory_games", self.theory_games.to_string());
        d.set("theory_steps", self.theory_steps.to_string());
        d.set("theory_max_attempts", self.theory_max_attempts.to_string());
        d.set("theory_d1", self.theory_d1.to_string());
        d.set("theory_d2", self.theory_d2.to_string());
        d.set_f64("theory_gamma1", self.theory_gamma1);
        d.set_f64("theory_gamma2", self.theory_gamma2);
        d.set("weight_pairs", self.weight_pairs.to_string());
        d.set("out_dir", self.out_dir.clone());
        d.set("seed", g.seed.to_string());
        d
    }
}

struct Parser<'a>(&'a KvDoc);

impl Parser<'_> {
    fn real(&self, key: &str) -> Result<f64, ConfigError> {
        let x = self.0.f64(key)?;
        if !x.is_finite() {
            return Err(invalid(key, "must be finite"));
        }
        Ok(x)
    }

    fn f64(&self, key: &str, slot: &mut f64) -> Result<(), ConfigError> {
        if self.0.get(key).is_some() {
            *slot = self.real(key)?;
        }
        Ok(())
    }

    fn usize(&self, key: &str, slot: &mut usize) -> Result<(), ConfigError> {
        if self.0.get(key).is_some() {
            *slot = self.0.usize(key)?;
        }
        Ok(())
    }

    fn bool(&self, key: &str, slot: &mut bool) -> Result<(), ConfigError> {
        if let Some(v) = self.0.get(key) {
            *slot = match v {
                "true" => true,
                "false" => false,
                _ => return Err(invalid(key, "expected `true` or `false`")),
            };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_benchmark_is_named() {
        assert_eq!(ExperimentConfig::parse("lambda = 0.1\n"), Err(ConfigError::Missing("benchmark")));
    }

    #[test]
    fn unknown_key_rejected() {
        let e = ExperimentConfig::parse("benchmark = sinusoid\nlamda = 0.1\n").unwrap_err();
        assert_eq!(e, ConfigError::Unknown("lamda".into()));
    }

    #[test]
    fn defaults_follow_game_defaults() {
        let c = ExperimentConfig::parse("benchmark = sinusoid\n").unwrap();
        assert_eq!(c, ExperimentConfig::defaults(Benchmark::Sinusoid));
        assert_eq!(c.game.lambda, 0.2);
        assert_eq!(c.game.batch_size, 16);
    }

    #[test]
    fn resolved_document_round_trips() {
        let text = "benchmark = pendulum\nvariant = cnp\nprinciple = dr:0.7\nlambda = 0.1\ndelta = 0.25\n\
                    eval_alphas = 0.3 0.5 0.7 0.9\nfollower_optimizer = plain\nseed = 42\ntheory_game = decoupled\n";
        let c = ExperimentConfig::parse(text).unwrap();
        let doc = c.to_kv();
        assert_eq!(doc.keys().collect::<Vec<_>>(), KEYS);
        let back = ExperimentConfig::from_kv(&KvDoc::parse(&doc.render()).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_kv().render(), doc.render());
    }

    #[test]
    fn bad_values_name_their_field() {
        let cases = [
            ("benchmark = cartpole\n", "benchmark"),
            ("benchmark = sinusoid\ninitial = beta\n", "initial"),
            ("benchmark = sinusoid\nprinciple = minimax\n", "principle"),
            ("benchmark = sinusoid\nfirst_order = yes\n", "first_order"),
            ("benchmark = sinusoid\neval_alphas = 0.5 1.0\n", "eval_alphas"),
            ("benchmark = sinusoid\nentropy_samples = 10\n", "entropy_samples"),
        ];
        for (text, field) in cases {
            let e = ExperimentConfig::parse(text).unwrap_err().to_string();
            assert!(e.contains(field), "{text:?}: {e}");
        }
        let e = ExperimentConfig::parse("benchmark = sinusoid\nbatch_size = many\n").unwrap_err().to_string();
        assert!(e.contains("batch_size"), "{e}");
    }
}
