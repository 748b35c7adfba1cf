use super::*;
use proptest::prelude::*;

#[test]
fn sinusoid_anchor() {
    let spec = BenchmarkSpec::sinusoid();
    let t = generate_task(&spec, &[1.0, 0.0], 0).unwrap();
    for r in 0..5 {
        let x = t.support_x.get(r, 0);
        assert_eq!(t.support_y.get(r, 0), x.sin());
    }
    let x = std::f64::consts::FRAC_PI_2;
    assert_eq!(1.0 * (x - 0.0f64).sin(), 1.0);
}

#[test]
fn split_sizes() {
    for spec in [BenchmarkSpec::sinusoid(), BenchmarkSpec::pendulum(), BenchmarkSpec::acrobot()] {
        let t = generate_task(&spec, &spec.normal_mean.clone(), 3).unwrap();
        assert_eq!(t.support_x.shape(), (spec.shots, spec.input_dim));
        assert_eq!(t.query_y.shape(), (spec.query_points(), spec.output_dim));
    }
}

#[test]
fn support_and_query_are_disjoint() {
    let spec = BenchmarkSpec::pendulum();
    let t = generate_task(&spec, &[1.0, 1.0], 5).unwrap();
    for i in 0..t.support_x.rows() {
        for j in 0..t.query_x.rows() {
            assert_ne!(t.support_x.row_slice(i), t.query_x.row_slice(j));
        }
    }
}

#[test]
fn out_of_box_rejected() {
    let spec = BenchmarkSpec::sinusoid();
    assert!(matches!(generate_task(&spec, &[5.5, 0.0], 0), Err(TaskError::OutOfBox { .. })));
}

#[test]
fn pendulum_observation_invariants() {
    let spec = BenchmarkSpec::pendulum();
    let t = generate_task(&spec, &[0.4, 0.4], 11).unwrap();
    for m in [&t.support_x, &t.query_x, &t.support_y, &t.query_y] {
        for r in 0..m.rows() {
            let row = m.row_slice(r);
            assert!((row[0] * row[0] + row[1] * row[1] - 1.0).abs() <= 1e-12);
            assert!(row[2].abs() <= 8.0);
        }
    }
}

#[test]
fn noise_injection() {
    let spec = BenchmarkSpec::sinusoid();
    let t = generate_task(&spec, &[2.0, 1.0], 1).unwrap();
    assert_eq!(inject_support_noise(&t, 0.0, 9).unwrap(), t);
    let noisy = inject_support_noise(&t, 0.1, 9).unwrap();
    assert_eq!(noisy.query_x, t.query_x);
    assert_eq!(noisy.query_y, t.query_y);
    assert!(inject_support_noise(&t, -1.0, 9).is_err());

    let mut diffs = Vec::new();
    let mut seed = 0;
    while diffs.len() < 10_000 {
        let n = inject_support_noise(&t, 0.1, seed).unwrap();
        diffs.extend(n.support_y.data().iter().zip(t.support_y.data()).map(|(a, b)| a - b));
        seed += 1;
    }
    let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let sd = (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (diffs.len() - 1) as f64).sqrt();
    assert!((0.097..=0.103).contains(&sd), "{sd}");
}

#[test]
fn csv_dump_has_header_and_rows() {
    let spec = BenchmarkSpec::sinusoid();
    let tasks: Vec<_> = (0..2).map(|s| generate_task(&spec, &[1.0, 1.0], s).unwrap()).collect();
    let mut buf = Vec::new();
    dump_csv(&tasks, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "task,split,tau_0,tau_1,x_0,y_0");
    assert_eq!(lines.len(), 1 + 20);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 6));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sinusoid_outputs_bounded(a in 0.1f64..=5.0, b in 0.0f64..=std::f64::consts::PI, seed in any::<u64>()) {
        let t = generate_task(&BenchmarkSpec::sinusoid(), &[a, b], seed).unwrap();
        for y in t.support_y.data().iter().chain(t.query_y.data()) {
            prop_assert!(y.abs() <= a);
        }
    }

    #[test]
    fn generation_is_reproducible(seed in any::<u64>(), m1 in 0.4f64..=1.6, m2 in 0.4f64..=1.6) {
        let spec = BenchmarkSpec::acrobot();
        prop_assert_eq!(generate_task(&spec, &[m1, m2], seed).unwrap(), generate_task(&spec, &[m1, m2], seed).unwrap());
    }
}
