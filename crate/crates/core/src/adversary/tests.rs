use super::*;
use crate::flows::{BaseDistribution, FlowLayer, MinMaxLayer, PlanarLayer, StatsMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

/// `τ = a ⊙ z + b` over a standard normal base: a diagonal Gaussian with
/// parameters `(ln a, b)`.
fn gaussian_stack(a: [f64; 2], b: [f64; 2]) -> (FlowStack, Vec<MinMaxStats>) {
    let base = BaseDistribution::normal(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let layer = MinMaxLayer::new(&a, b.to_vec(), true);
    let mut s = FlowStack::new(base, vec![FlowLayer::MinMax(layer)]).unwrap();
    let stats = vec![MinMaxStats { min: vec![0.0, 0.0], max: vec![1.0, 1.0] }];
    s.set_frozen_stats(stats.clone()).unwrap();
    (s, stats)
}

fn toy_loss(t: &[f64]) -> f64 {
    (t[0] - 1.0).powi(2) + 0.5 * (t[1] + 0.5).powi(2)
}

fn planar_stack(seed: u64) -> (FlowStack, Vec<MinMaxStats>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = BaseDistribution::uniform(vec![0.1, 0.0], vec![5.0, PI]).unwrap();
    let layers = vec![
        FlowLayer::Planar(PlanarLayer::random(&mut rng, 2, 0.7)),
        FlowLayer::Planar(PlanarLayer::random(&mut rng, 2, 0.7)),
        FlowLayer::MinMax(MinMaxLayer::onto_box(&[0.1, 0.0], &[5.0, PI])),
    ];
    let mut s = FlowStack::new(base, layers).unwrap();
    s.freeze_stats(&mut rng, 10_000).unwrap();
    let st = s.frozen_stats().unwrap().to_vec();
    (s, st)
}

#[test]
fn equal_losses_give_zero_score() {
    let (s, stats) = planar_stack(1);
    let smp = s.sample(&mut ChaCha8Rng::seed_from_u64(2), 7, StatsMode::Given(&stats)).unwrap();
    let g = score_gradient(&s, &stats, &[0.1; 7], &smp.tasks).unwrap();
    assert!(g.as_slice().iter().all(|&x| x == 0.0));
    let one = Tensor::from_rows(&[smp.tasks.row_slice(0).to_vec()]);
    let g1 = score_gradient(&s, &stats, &[3.7], &one).unwrap();
    assert!(g1.as_slice().iter().all(|&x| x == 0.0));
}

#[test]
fn score_errors() {
    let (s, stats) = planar_stack(1);
    assert_eq!(score_gradient(&s, &stats, &[], &Tensor::zeros(0, 2)), Err(AdversaryError::EmptyBatch));
    let t = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
    assert_eq!(score_gradient(&s, &stats, &[1.0, f64::NAN], &t), Err(AdversaryError::NonFiniteLoss(1)));
}

#[test]
fn gaussian_score_matches_closed_form() {
    let (a, b) = ([1.5, 0.6], [0.3, -0.2]);
    let (s, stats) = gaussian_stack(a, b);
    let smp = s.sample(&mut ChaCha8Rng::seed_from_u64(3), 12, StatsMode::Given(&stats)).unwrap();
    let losses: Vec<f64> = (0..12).map(|r| toy_loss(smp.tasks.row_slice(r))).collect();
    let g = score_gradient(&s, &stats, &losses, &smp.tasks).unwrap();
    let v = losses.iter().sum::<f64>() / 12.0;
    // d/d ln a = z² − 1, d/d b = z / a with z = (τ − b)/a
    let mut want = [0.0; 4];
    for r in 0..12 {
        let c = (losses[r] - v) / 12.0;
        for i in 0..2 {
            let z = (smp.tasks.get(r, i) - b[i]) / a[i];
            want[i] += c * (z * z - 1.0);
            want[2 + i] += c * z / a[i];
        }
    }
    for (x, w) in g.as_slice().iter().zip(want) {
        assert!((x - w).abs() <= 1e-8, "{x} vs {w}");
    }
}

#[test]
fn cloning_identity_uniform_is_zero() {
    let base = BaseDistribution::uniform(vec![0.1, 0.0], vec![5.0, PI]).unwrap();
    let s = FlowStack::identity(base.clone());
    let x = base.sample(&mut ChaCha8Rng::seed_from_u64(0), 16);
    let (g, kept) = cloning_gradient(&s, &[], &x).unwrap();
    assert_eq!(g.len(), 0);
    assert_eq!(kept, 16);
}

#[test]
fn cloning_matches_finite_differences() {
    let (s, stats) = gaussian_stack([1.3, 0.8], [0.2, -0.4]);
    let x = s.base().sample(&mut ChaCha8Rng::seed_from_u64(4), 32);
    let (g, kept) = cloning_gradient(&s, &stats, &x).unwrap();
    assert_eq!(kept, 32);
    let p0 = s.params();
    let f = |p: &ParamVector| {
        let mut t = s.clone();
        t.set_params(p).unwrap();
        t.log_prob_batch(&x, &stats).unwrap().iter().sum::<f64>() / 32.0
    };
    for i in 0..p0.len() {
        let (mut pp, mut pm) = (p0.clone(), p0.clone());
        pp.as_mut_slice()[i] += 1e-6;
        pm.as_mut_slice()[i] -= 1e-6;
        let fd = (f(&pp) - f(&pm)) / 2e-6;
        let an = g.as_slice()[i];
        assert!((an - fd).abs() <= 1e-4 * an.abs().max(fd.abs()), "{an} vs {fd}");
    }
}

#[test]
fn cloning_filter_all_gives_zero() {
    let base = BaseDistribution::uniform(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let layer = MinMaxLayer::new(&[0.01, 0.01], vec![5.0, 5.0], false);
    let s = FlowStack::new(base.clone(), vec![FlowLayer::MinMax(layer)]).unwrap();
    let stats = vec![MinMaxStats { min: vec![0.0, 0.0], max: vec![1.0, 1.0] }];
    let x = base.sample(&mut ChaCha8Rng::seed_from_u64(5), 16);
    let (g, kept) = cloning_gradient(&s, &stats, &x).unwrap();
    assert_eq!(kept, 0);
    assert!(g.as_slice().iter().all(|&v| v == 0.0));
}

#[test]
fn step_trivial_cases() {
    let (s, stats) = planar_stack(6);
    let smp = s.sample(&mut ChaCha8Rng::seed_from_u64(7), 8, StatsMode::Given(&stats)).unwrap();
    let losses: Vec<f64> = (0..8).map(|r| toy_loss(smp.tasks.row_slice(r))).collect();
    let x = s.base().sample(&mut ChaCha8Rng::seed_from_u64(8), 8);
    let rep = gradient_report(&s, &stats, None, &losses, &smp.tasks, &x).unwrap();
    assert_eq!(adversary_step(&s, &rep, 0.0, 0.2).unwrap(), s);
    let zero = AdversaryGradientReport {
        score: rep.score.zeros_like(),
        cloning: rep.cloning.zeros_like(),
        ..rep.clone()
    };
    assert_eq!(adversary_step(&s, &zero, 0.5, 0.2).unwrap(), s);
    assert!((rep.baseline - losses.iter().sum::<f64>() / 8.0).abs() < 1e-14);
}

#[test]
fn zero_losses_follow_pure_cloning() {
    let (s, stats) = planar_stack(9);
    let smp = s.sample(&mut ChaCha8Rng::seed_from_u64(10), 8, StatsMode::Given(&stats)).unwrap();
    let x = s.base().sample(&mut ChaCha8Rng::seed_from_u64(11), 8);
    let rep = gradient_report(&s, &stats, None, &[0.0; 8], &smp.tasks, &x).unwrap();
    let mut want = rep.cloning.clone();
    want.scale(1e3);
    assert_eq!(rep.total(1e3), want);
}

#[test]
fn ascent_step_raises_expected_loss() {
    let (s, stats) = gaussian_stack([0.8, 0.8], [0.0, 0.0]);
    let loss = |t: &[f64]| t[0] * t[0] + t[1] * t[1];
    let smp = s.sample(&mut ChaCha8Rng::seed_from_u64(12), 64, StatsMode::Given(&stats)).unwrap();
    let losses: Vec<f64> = (0..64).map(|r| loss(smp.tasks.row_slice(r))).collect();
    let x = s.base().sample(&mut ChaCha8Rng::seed_from_u64(13), 64);
    let rep = gradient_report(&s, &stats, None, &losses, &smp.tasks, &x).unwrap();
    let next = adversary_step(&s, &rep, 0.05, 0.0).unwrap();
    let mc = |st: &FlowStack| {
        let smp = st.sample(&mut ChaCha8Rng::seed_from_u64(14), 100_000, StatsMode::Given(&stats)).unwrap();
        (0..100_000).map(|r| loss(smp.tasks.row_slice(r))).sum::<f64>() / 1e5
    };
    assert!(mc(&next) >= mc(&s));
}

/// Statistics of the score estimator over independent batches on the
/// Gaussian toy configuration.
fn score_batches(with_baseline: bool) -> Vec<Vec<f64>> {
    let (s, stats) = gaussian_stack([1.2, 0.7], [0.5, -0.3]);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    (0..200)
        .map(|_| {
            let smp = s.sample(&mut rng, 16, StatsMode::Given(&stats)).unwrap();
            let losses: Vec<f64> = (0..16).map(|r| toy_loss(smp.tasks.row_slice(r))).collect();
            let b = if with_baseline { None } else { Some(0.0) };
            score_gradient_with(&s, &stats, &losses, &smp.tasks, b).unwrap().into_vec()
        })
        .collect()
}

fn mean_var(xs: &[Vec<f64>], i: usize) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().map(|x| x[i]).sum::<f64>() / n;
    let v = xs.iter().map(|x| (x[i] - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[test]
fn baseline_is_unbiased_and_reduces_variance() {
    let with = score_batches(true);
    let without = score_batches(false);
    let mut reduced = 0;
    for i in 0..4 {
        let (m1, v1) = mean_var(&with, i);
        let (m0, v0) = mean_var(&without, i);
        let se = (v1 / 200.0 + v0 / 200.0).sqrt();
        assert!((m1 - m0).abs() <= 3.0 * se, "coord {i}: {m1} vs {m0} (se {se})");
        if v1 <= v0 {
            reduced += 1;
        }
    }
    assert!(reduced as f64 >= 0.9 * 4.0);
}

#[test]
fn optimizer_schedules() {
    let mut opt = AdversaryOptimizer::new(AdversaryOptimizerKind::Adam, 0.1, Some(4));
    let (mut s, stats) = gaussian_stack([1.0, 1.0], [0.0, 0.0]);
    let smp = s.sample(&mut ChaCha8Rng::seed_from_u64(16), 8, StatsMode::Given(&stats)).unwrap();
    let losses: Vec<f64> = (0..8).map(|r| toy_loss(smp.tasks.row_slice(r))).collect();
    let x = s.base().sample(&mut ChaCha8Rng::seed_from_u64(17), 8);
    let rep = gradient_report(&s, &stats, None, &losses, &smp.tasks, &x).unwrap();
    assert_eq!(opt.current_lr(), 0.1);
    opt.step(&mut s, &rep, 0.2).unwrap();
    assert!(opt.current_lr() < 0.1);
}

/// The support filter removes the penalty for mass leaving the box, so the
/// retained average favours shrinking the support.
#[test]
fn filtered_cloning_rewards_contraction() {
    let base = BaseDistribution::uniform(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
    let layer = MinMaxLayer::new(&[1.0, 1.0], vec![0.0, 0.0], true);
    let s = FlowStack::new(base.clone(), vec![FlowLayer::MinMax(layer)]).unwrap();
    let stats = vec![MinMaxStats { min: vec![0.0, 0.0], max: vec![1.0, 1.0] }];
    let x = base.sample(&mut ChaCha8Rng::seed_from_u64(12), 64);
    let (g, kept) = cloning_gradient(&s, &stats, &x).unwrap();
    assert_eq!(kept, 64);
    assert_eq!(g.as_slice(), &[-1.0, -1.0, 0.0, 0.0]);

    let rep = gradient_report(&s, &stats, None, &[0.0; 64], &x, &x).unwrap();
    let shrunk = adversary_step(&s, &rep, 0.1, 1.0).unwrap();
    let (_, kept_after) = cloning_gradient(&shrunk, &stats, &x).unwrap();
    assert!(kept_after < kept);
    let mean_lp = |st: &FlowStack| {
        let lp = st.log_prob_batch(&x, &stats).unwrap();
        let fin: Vec<f64> = lp.into_iter().filter(|l| l.is_finite()).collect();
        fin.iter().sum::<f64>() / fin.len() as f64
    };
    assert!(mean_lp(&shrunk) > mean_lp(&s));
}
