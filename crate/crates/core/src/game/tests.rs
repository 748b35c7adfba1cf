use super::*;
use crate::flows::BaseDistribution;
use crate::metalearner::{Architecture, Head, Variant};
use crate::tasks::InitialKind;
use proptest::prelude::{any, prop, prop_assert, proptest};

fn small_meta(variant: Variant, seed: u64) -> MetaParams {
    let arch = Architecture { variant, head: Head::Raw, input_dim: 1, output_dim: 1, hidden: 8, depth: 2 };
    MetaParams::init(arch, &mut init_rng(seed))
}

fn sinusoid_base() -> BaseDistribution {
    BaseDistribution::uniform(vec![0.1, 0.0], vec![5.0, std::f64::consts::PI]).unwrap()
}

fn small_config(principle: RiskPrinciple) -> GameConfig {
    GameConfig {
        inner_lr: 0.01,
        outer_lr: 1e-3,
        follower_lr: 1e-2,
        batch_size: 4,
        iterations: 6,
        seed: 7,
        principle,
        freeze_samples: 2000,
        ..GameConfig::default()
    }
}

/// Follower-free meta-training under `p0` with uniform weights.
fn plain_meta_training(config: &GameConfig, meta: MetaParams, base: &BaseDistribution, spec: &BenchmarkSpec) -> (MetaParams, Vec<f64>) {
    let mut rngs = Streams::new(config.seed);
    let mut learner = MetaLearner::new(meta, config.learner_options());
    let mut adam = Adam::new(learner.params.num_params());
    let mut losses = Vec::new();
    for _ in 0..config.iterations {
        let taus = base.sample(&mut rngs.tasks, config.batch_size);
        let batch: Vec<_> = (0..config.batch_size)
            .map(|r| generate_task(spec, &spec.clamp(taus.row_slice(r)), rngs.data.next_u64()).unwrap())
            .collect();
        let per = learner.batch_losses_and_grads(&batch).unwrap();
        let mut g = per[0].1.zeros_like();
        for (_, gk) in &per {
            g.axpy(1.0 / config.batch_size as f64, gk);
        }
        losses.push(per.iter().map(|(r, _)| r.query_loss).sum::<f64>() / config.batch_size as f64);
        let mut theta = learner.params.flat();
        adam.step(&mut theta, &g, config.outer_lr, Direction::Descent);
        let mut p = learner.params.clone();
        p.set_flat(&theta).unwrap();
        learner.set_params(p);
    }
    (learner.params, losses)
}

#[test]
fn risk_weight_examples() {
    let l = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(erm_weights(4), vec![0.25; 4]);
    assert_eq!(tr_weights(&l), vec![0.0, 0.0, 0.0, 1.0]);
    assert_eq!(dr_weights(&l, 0.5), vec![0.0, 0.0, 0.5, 0.5]);
    assert_eq!(tr_weights(&[2.0, 5.0, 5.0]), vec![0.0, 1.0, 0.0]);
    assert_eq!(tail_count(4, 0.7), 2);
    assert_eq!(tail_count(4, 0.0), 4);
}

#[test]
fn principle_names_round_trip() {
    for p in [RiskPrinciple::Erm, RiskPrinciple::Tr, RiskPrinciple::Dr { alpha: 0.5 }, RiskPrinciple::Dro, RiskPrinciple::Ar] {
        assert_eq!(RiskPrinciple::parse(&p.name()), Some(p));
    }
    assert_eq!(RiskPrinciple::parse("dr:1.0"), None);
    assert_eq!(RiskPrinciple::parse("cvar"), None);
}

#[test]
fn dro_groups_and_update() {
    let mut s = DroState::new(&[0.0, 0.0], &[2.0, 2.0], 0.01);
    assert_eq!(s.group_of(&[0.5, 0.5]), 0);
    assert_eq!(s.group_of(&[1.5, 0.5]), 1);
    assert_eq!(s.group_of(&[0.5, 1.5]), 2);
    assert_eq!(s.group_of(&[1.0, 1.0]), 3);
    let taus = vec![vec![0.5, 0.5], vec![0.5, 0.6], vec![1.5, 1.5]];
    let w = s.update_and_weights(&[1.0, 1.0, 3.0], &taus);
    let q = [0.25 * 0.01f64.exp(), 0.25, 0.25, 0.25 * 0.03f64.exp()];
    let z: f64 = q.iter().sum();
    for (a, b) in s.weights.iter().zip(q) {
        assert!((a - b / z).abs() < 1e-15);
    }
    let present = (q[0] + q[3]) / z;
    assert!((w[0] - q[0] / z / 2.0 / present).abs() < 1e-15);
    assert!((w[2] - q[3] / z / present).abs() < 1e-15);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

proptest! {
    #[test]
    fn weights_are_distributions(
        losses in prop::collection::vec(0.0f64..10.0, 2..32),
        alpha in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let n = losses.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taus: Vec<Vec<f64>> = (0..n).map(|_| vec![(rng.next_u32() % 100) as f64 / 50.0, (rng.next_u32() % 100) as f64 / 50.0]).collect();
        let mut dro = DroState::new(&[0.0, 0.0], &[2.0, 2.0], 0.01);
        for p in [RiskPrinciple::Erm, RiskPrinciple::Tr, RiskPrinciple::Dr { alpha }, RiskPrinciple::Dro] {
            let w = risk_weights(&p, &losses, &taus, Some(&mut dro));
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15 * n as f64);
        }
        prop_assert!((dro.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    }
}

#[test]
fn config_validation() {
    let ok = GameConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        GameConfig { batch_size: 1, ..ok.clone() },
        GameConfig { update_every: 0, ..ok.clone() },
        GameConfig { outer_lr: 0.0, ..ok.clone() },
        GameConfig { lambda: -1.0, ..ok.clone() },
        GameConfig { follower_lr: f64::NAN, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(GameError::Config(_))));
    }
}

#[test]
fn erm_matches_follower_free_training() {
    let spec = BenchmarkSpec::sinusoid();
    let cfg = small_config(RiskPrinciple::Erm);
    let stack = FlowStack::planar_minmax(sinusoid_base(), 2, &spec.low, &spec.high, &mut init_rng(1)).unwrap();
    let out = train(&cfg, small_meta(Variant::Maml, 3), stack.clone(), &spec).unwrap();
    let (plain, losses) = plain_meta_training(&cfg, small_meta(Variant::Maml, 3), &sinusoid_base(), &spec);
    assert_eq!(out.meta, plain);
    let traced: Vec<f64> = out.trace.records.iter().map(|r| r.mean_loss).collect();
    assert_eq!(traced, losses);
    assert_eq!(out.stack.params(), stack.params());
}

#[test]
fn frozen_follower_on_identity_stack_is_vanilla() {
    let spec = BenchmarkSpec::sinusoid();
    let cfg = GameConfig { follower_lr: 0.0, ..small_config(RiskPrinciple::Ar) };
    let out = train(&cfg, small_meta(Variant::Maml, 3), FlowStack::identity(sinusoid_base()), &spec).unwrap();
    let (plain, _) = plain_meta_training(&cfg, small_meta(Variant::Maml, 3), &sinusoid_base(), &spec);
    assert_eq!(out.meta, plain);
    assert_eq!(out.stack.num_params(), 0);

    let stack = FlowStack::planar_minmax(sinusoid_base(), 2, &spec.low, &spec.high, &mut init_rng(1)).unwrap();
    let out = train(&cfg, small_meta(Variant::Maml, 3), stack.clone(), &spec).unwrap();
    assert_eq!(out.stack.params(), stack.params());
    assert!(out.trace.records.iter().all(|r| r.follower_updated && r.phi_update_norm == 0.0));
}

#[test]
fn update_frequency_schedule() {
    let spec = BenchmarkSpec::sinusoid();
    let stack = FlowStack::planar_minmax(sinusoid_base(), 2, &spec.low, &spec.high, &mut init_rng(1)).unwrap();
    let run = |u| {
        let cfg = GameConfig { update_every: u, ..small_config(RiskPrinciple::Ar) };
        train(&cfg, small_meta(Variant::Maml, 3), stack.clone(), &spec).unwrap().trace
    };
    let (a, b) = (run(1), run(5));
    let updated: Vec<usize> = b.records.iter().filter(|r| r.follower_updated).map(|r| r.iteration).collect();
    assert_eq!(updated, vec![4]);
    assert!(a.records.iter().all(|r| r.follower_updated));
    // Leader fields agree until the first follower step changes p_φ.
    let strip = |r: &IterationRecord| (r.leader_loss, r.mean_loss, r.leader_grad_norm, r.theta_update_norm);
    assert_eq!(strip(&a.records[0]), strip(&b.records[0]));
    assert_ne!(a.records[0].phi_update_norm, b.records[0].phi_update_norm);
    assert_ne!(strip(&a.records[1]), strip(&b.records[1]));
}

#[test]
fn training_is_deterministic() {
    let spec = BenchmarkSpec::sinusoid();
    let stack = FlowStack::planar_minmax(sinusoid_base(), 2, &spec.low, &spec.high, &mut init_rng(1)).unwrap();
    let cfg = small_config(RiskPrinciple::Ar);
    let a = train(&cfg, small_meta(Variant::Cnp, 3), stack.clone(), &spec).unwrap();
    let b = train(&cfg, small_meta(Variant::Cnp, 3), stack, &spec).unwrap();
    assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl());
    assert_eq!(a.meta.to_kv().render(), b.meta.to_kv().render());
    assert_eq!(a.stack.to_kv().render(), b.stack.to_kv().render());
    assert!(a.stack.frozen_stats().is_some());
    assert_eq!(TrainTrace::from_jsonl(&a.trace.to_jsonl()).unwrap(), a.trace);
}

#[test]
fn stationarity_flag() {
    let spec = BenchmarkSpec::sinusoid();
    let cfg = GameConfig {
        outer_lr: 1e-300,
        follower_lr: 0.0,
        leader_optimizer: LeaderOptimizer::Sgd,
        ..small_config(RiskPrinciple::Ar)
    };
    let out = train(&cfg, small_meta(Variant::Maml, 3), FlowStack::identity(sinusoid_base()), &spec).unwrap();
    assert!(out.trace.records.iter().all(|r| r.stationary));
    let out = train(&small_config(RiskPrinciple::Ar), small_meta(Variant::Maml, 3), FlowStack::identity(sinusoid_base()), &spec).unwrap();
    assert!(out.trace.records.iter().all(|r| !r.stationary));
}

struct Recorder(Vec<usize>, Vec<usize>);

impl TrainObserver for Recorder {
    fn on_iteration(&mut self, r: &IterationRecord) -> std::io::Result<()> {
        self.0.push(r.iteration);
        Ok(())
    }
    fn on_checkpoint(&mut self, it: usize, _: &MetaParams, _: &FlowStack) -> std::io::Result<()> {
        self.1.push(it);
        Ok(())
    }
}

#[test]
fn divergence_aborts_after_streaming() {
    let spec = BenchmarkSpec::sinusoid();
    let cfg = GameConfig {
        outer_lr: 1e200,
        leader_optimizer: LeaderOptimizer::Sgd,
        checkpoint_every: 1,
        ..small_config(RiskPrinciple::Erm)
    };
    let mut rec = Recorder(Vec::new(), Vec::new());
    let err = train_observed(&cfg, small_meta(Variant::Maml, 3), FlowStack::identity(sinusoid_base()), &spec, &mut rec).unwrap_err();
    assert!(matches!(err, GameError::NonFinite { .. } | GameError::Meta { .. }), "{err}");
    assert!(!rec.0.is_empty());
    assert_eq!(rec.0, rec.1.iter().map(|i| i - 1).collect::<Vec<_>>());
}

#[test]
fn normal_base_samples_are_clamped() {
    let spec = BenchmarkSpec::sinusoid();
    let base = spec.initial_distribution(InitialKind::Normal).unwrap();
    let cfg = GameConfig { batch_size: 16, iterations: 3, ..small_config(RiskPrinciple::Ar) };
    let out = train(&cfg, small_meta(Variant::Maml, 3), FlowStack::identity(base), &spec).unwrap();
    assert_eq!(out.trace.records.len(), 3);
}
