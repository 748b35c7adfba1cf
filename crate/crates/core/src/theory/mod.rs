//! Checks of the convergence rate of alternating GDA on local quadratic
//! games and of the importance-weight bound for flow-shifted distributions.

use crate::autodiff::Tensor;
use crate::flows::{FlowError, FlowLayer, FlowStack, MinMaxStats};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Relative tolerance of the spectral-norm power iteration.
pub const POWER_TOL: f64 = 1e-10;
/// Per-step ratio above which a run counts as divergent.
pub const DIVERGENCE_RATIO: f64 = 10.0;
/// Imaginary parts below this are treated as round-off.
pub const COMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TheoryError {
    #[error("block shapes are inconsistent: {0}")]
    Shape(String),
    #[error("steps must be >= 1")]
    NoSteps,
    #[error("the weight bound assumes a uniform base")]
    NotUniform,
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// `J(θ, φ) = ½θᵀAθ + θᵀBφ + ½φᵀCφ` with equilibrium at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticGame {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl QuadraticGame {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self, TheoryError> {
        let (d1, d2) = (a.nrows(), c.nrows());
        if !a.is_square() || !c.is_square() || b.shape() != (d1, d2) {
            return Err(TheoryError::Shape(format!("A {:?}, B {:?}, C {:?}", a.shape(), b.shape(), c.shape())));
        }
        Ok(Self { a, b, c })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.nrows(), self.c.nrows())
    }

    /// Random instance with `A ≻ 0` and `C ⪯ 0`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d1: usize, d2: usize, coupling: f64) -> Self {
        let mut gauss = |r, c| DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let ga = gauss(d1, d1);
        let gc = gauss(d2, d2);
        let b = gauss(d1, d2) * coupling;
        let a = &ga * ga.transpose() / d1 as f64 + DMatrix::identity(d1, d1) * 0.1;
        let c = -(&gc * gc.transpose()) / d2 as f64;
        Self { a, b, c }
    }

    /// One alternating step: leader at `θ_t`, follower at `θ_{t+1}`.
    pub fn step(&self, g1: f64, g2: f64, theta: &DVector<f64>, phi: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let th = theta - (&self.a * theta + &self.b * phi) * g1;
        let ph = phi + (self.b.transpose() * &th + &self.c * phi) * g2;
        (th, ph)
    }
}

/// Largest singular value by power iteration on `MᵀM`.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() || m.iter().all(|x| *x == 0.0) {
        return 0.0;
    }
    let mtm = m.transpose() * m;
    let n = mtm.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let w = &mtm * &v;
        let wn = w.norm();
        if wn == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / wn;
        let done = (next - lambda).abs() <= POWER_TOL * 1e-5 * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    v.dot(&(&mtm * &v)).max(0.0).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaTerms {
    pub delta: f64,
    pub theta_branch: f64,
    pub phi_branch: f64,
    pub sigma_min_a: f64,
    /// Smallest real part among the eigenvalues of `BᵀBC`.
    pub sigma_min_bbc: f64,
    pub l_max: f64,
    /// `BᵀBC` has eigenvalues with non-negligible imaginary part.
    pub complex_spectrum: bool,
}

/// The contraction factor, with the spectral quantities it is built from.
pub fn delta_terms(game: &QuadraticGame, g1: f64, g2: f64) -> DeltaTerms {
    let sigma_min_a = game.a.clone().symmetric_eigenvalues().min();
    let l_max = spectral_norm(&game.a).max(spectral_norm(&game.b)).max(spectral_norm(&game.c));
    let bbc = game.b.transpose() * &game.b * &game.c;
    let eig = bbc.complex_eigenvalues();
    let sigma_min_bbc = eig.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
    let complex_spectrum = eig.iter().any(|z| z.im.abs() > COMPLEX_TOL * (1.0 + z.re.abs()));
    delta_from(sigma_min_a, sigma_min_bbc, l_max, complex_spectrum, g1, g2)
}

/// `Δ` from its scalar inputs.
pub fn delta_from(sigma_min_a: f64, sigma_min_bbc: f64, l_max: f64, complex_spectrum: bool, g1: f64, g2: f64) -> DeltaTerms {
    let l2 = l_max * l_max;
    let theta_branch = (1.0 - g1 * sigma_min_a).powi(2) * (1.0 + g2 * g2 * l2);
    let phi_branch = ((g1 * g1 - 2.0 * g1 * g2 + g1 * g1 * g2 * g2 * l2).abs() * l2 + (1.0 + g2 * l_max).powi(2)
        - 2.0 * g1 * g2 * g2 * sigma_min_bbc)
        .abs();
    DeltaTerms {
        delta: theta_branch.max(phi_branch),
        theta_branch,
        phi_branch,
        sigma_min_a,
        sigma_min_bbc,
        l_max,
        complex_spectrum,
    }
}

pub fn delta(game: &QuadraticGame, g1: f64, g2: f64) -> f64 {
    delta_terms(game, g1, g2).delta
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub gamma1: f64,
    pub gamma2: f64,
    pub terms: DeltaTerms,
    pub sqrt_delta: f64,
    pub delta_below_half: bool,
    pub steps: usize,
    /// `‖ẑ_{t+1}‖ / ‖ẑ_t‖`; zero once the iterate is exactly zero.
    pub ratios: Vec<f64>,
    pub norms: Vec<f64>,
    pub max_ratio: f64,
    /// `(‖ẑ_T‖ / ‖ẑ_0‖)^{1/T}`.
    pub geometric_mean_ratio: f64,
    /// Checked only when `Δ < ½`.
    pub per_step_bound_holds: Option<bool>,
    pub rate_holds: Option<bool>,
    pub diverged: bool,
    pub theory_violation: bool,
}

impl ContractionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Iterates of the linearized alternating dynamics, including `z_0`.
pub fn iterate(game: &QuadraticGame, g1: f64, g2: f64, z0: &DVector<f64>, steps: usize) -> Vec<DVector<f64>> {
    let (d1, d2) = game.dims();
    let mut th = z0.rows(0, d1).into_owned();
    let mut ph = z0.rows(d1, d2).into_owned();
    let mut out = vec![z0.clone()];
    for _ in 0..steps {
        (th, ph) = game.step(g1, g2, &th, &ph);
        out.push(DVector::from_iterator(d1 + d2, th.iter().chain(ph.iter()).copied()));
    }
    out
}

pub fn run_alt_gda(game: &QuadraticGame, g1: f64, g2: f64, z0: &DVector<f64>, steps: usize) -> Result<ContractionReport, TheoryError> {
    if steps == 0 {
        return Err(TheoryError::NoSteps);
    }
    let (d1, d2) = game.dims();
    if z0.len() != d1 + d2 {
        return Err(TheoryError::Shape(format!("z0 has length {}, expected {}", z0.len(), d1 + d2)));
    }
    let terms = delta_terms(game, g1, g2);
    let zs = iterate(game, g1, g2, z0, steps);
    let norms: Vec<f64> = zs.iter().map(|z| z.norm()).collect();
    let ratios: Vec<f64> = norms.windows(2).map(|w| if w[0] == 0.0 { 0.0 } else { w[1] / w[0] }).collect();
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let geometric_mean_ratio = if norms[0] == 0.0 { 0.0 } else { (norms[steps] / norms[0]).powf(1.0 / steps as f64) };
    let sqrt_delta = terms.delta.sqrt();
    let below = terms.delta < 0.5;
    let diverged = max_ratio > DIVERGENCE_RATIO;
    let per_step = below.then(|| max_ratio <= (2.0 * terms.delta).sqrt() + 1e-9);
    let rate = below.then(|| geometric_mean_ratio <= sqrt_delta + 0.05);
    let converges = norms[steps] <= 1e-6 * norms[0].max(f64::MIN_POSITIVE);
    let theory_violation = below && (diverged || per_step == Some(false) || rate == Some(false) || !converges);
    Ok(ContractionReport {
        gamma1: g1,
        gamma2: g2,
        terms,
        sqrt_delta,
        delta_below_half: below,
        steps,
        ratios,
        norms,
        max_ratio,
        geometric_mean_ratio,
        per_step_bound_holds: per_step,
        rate_holds: rate,
        diverged,
        theory_violation,
    })
}

/// Checks `‖z_m − z_n‖ ≤ (1+r) r^n (1 − r^{m−n}) / (1 − r) · ‖z_0‖` for
/// `pairs` random index pairs `n < m`, the tail bound implied by a
/// per-step contraction `r < 1`.
pub fn cauchy_check<R: Rng + ?Sized>(zs: &[DVector<f64>], rate: f64, pairs: usize, rng: &mut R) -> bool {
    let t = zs.len() - 1;
    let z0 = zs[0].norm();
    (0..pairs).all(|_| {
        let n = rng.random_range(0..t);
        let m = rng.random_range(n + 1..=t);
        let bound = (1.0 + rate) * rate.powi(n as i32) * (1.0 - rate.powi((m - n) as i32)) / (1.0 - rate) * z0;
        (&zs[m] - &zs[n]).norm() <= bound * (1.0 + 1e-9) + 1e-300
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameSearch {
    pub attempts: usize,
    pub games: Vec<(usize, f64, f64, f64)>,
}

/// Draws random games and step sizes, keeping those with `Δ < ½`. Each kept
/// entry is `(attempt index, γ₁, γ₂, Δ)`.
pub fn search_contracting_games(seed: u64, wanted: usize, max_attempts: usize, d1: usize, d2: usize) -> (GameSearch, Vec<QuadraticGame>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut found = GameSearch { attempts: 0, games: Vec::new() };
    let mut games = Vec::new();
    while found.games.len() < wanted && found.attempts < max_attempts {
        let coupling = rng.random_range(0.0..1.0);
        let g = QuadraticGame::random(&mut rng, d1, d2, coupling);
        let (g1, g2) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let dl = delta(&g, g1, g2);
        if dl < 0.5 {
            found.games.push((found.attempts, g1, g2, dl));
            games.push(g);
        }
        found.attempts += 1;
    }
    (found, games)
}

/// The importance-weight bound check for a flow over a uniform base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightBoundReport {
    pub n_pairs: usize,
    /// Largest spectral norm of any finite-difference inverse-layer Jacobian.
    pub lipschitz: f64,
    pub exponent: usize,
    pub bound: f64,
    pub max_weight: f64,
    pub mean_weight: f64,
    pub skipped: usize,
    pub holds: bool,
}

fn layer_inverse(layer: &FlowLayer, stats: Option<&MinMaxStats>, y: &[f64], out: &mut [f64]) {
    match layer {
        FlowLayer::Planar(p) => {
            p.inverse_point(y, out);
        }
        FlowLayer::MinMax(m) => m.inverse_point(y, stats.expect("min-max statistics"), out),
    }
}

fn layer_forward(layer: &FlowLayer, stats: Option<&MinMaxStats>, z: &[f64], out: &mut [f64]) {
    match layer {
        FlowLayer::Planar(p) => {
            p.forward_point(z, out);
        }
        FlowLayer::MinMax(m) => m.forward_point(z, stats.expect("min-max statistics"), out),
    }
}

/// Spectral norm of the central-difference Jacobian of a layer inverse at `y`.
fn inverse_expansion(layer: &FlowLayer, stats: Option<&MinMaxStats>, y: &[f64]) -> Option<f64> {
    let d = y.len();
    let mut jac = DMatrix::zeros(d, d);
    let (mut yp, mut ym) = (y.to_vec(), y.to_vec());
    let (mut fp, mut fm) = (vec![0.0; d], vec![0.0; d]);
    for j in 0..d {
        let h = 1e-6 * y[j].abs().max(1.0);
        yp[j] = y[j] + h;
        ym[j] = y[j] - h;
        layer_inverse(layer, stats, &yp, &mut fp);
        layer_inverse(layer, stats, &ym, &mut fm);
        for i in 0..d {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
        yp[j] = y[j];
        ym[j] = y[j];
    }
    jac.iter().all(|x| x.is_finite()).then(|| jac.singular_values().max())
}

/// `ω(τ⁰) = p_φ(τ⁰)/p₀(τ⁰)` at `n_pairs` base samples, against `ℓ̂_a^{Md}`
/// where `ℓ̂_a` is probed along both the forward images of base samples and
/// the inverse chains of the evaluated points.
pub fn importance_weight_bound(stack: &FlowStack, n_pairs: usize, seed: u64) -> Result<WeightBoundReport, TheoryError> {
    let base = stack.base();
    if !base.is_bounded() {
        return Err(TheoryError::NotUniform);
    }
    let stats: Vec<MinMaxStats> = match stack.num_minmax() {
        0 => Vec::new(),
        _ => stack.frozen_stats().ok_or(FlowError::NoFrozenStats)?.to_vec(),
    };
    let d = stack.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = base.sample(&mut rng, n_pairs);
    let tau0 = base.sample(&mut rng, n_pairs);

    let layers = stack.layers();
    let mut layer_stats = Vec::with_capacity(layers.len());
    let mut k = 0;
    for l in layers {
        layer_stats.push(match l {
            FlowLayer::MinMax(_) => {
                k += 1;
                Some(&stats[k - 1])
            }
            FlowLayer::Planar(_) => None,
        });
    }

    let mut lipschitz: f64 = if layers.is_empty() { 1.0 } else { 0.0 };
    let mut skipped = 0;
    let mut note = |e: Option<f64>, lip: &mut f64| match e {
        Some(v) => *lip = lip.max(v),
        None => skipped += 1,
    };
    let mut buf = vec![0.0; d];
    for r in 0..n_pairs {
        let mut y = probe.row_slice(r).to_vec();
        for (l, s) in layers.iter().zip(&layer_stats) {
            layer_forward(l, *s, &y, &mut buf);
            y.copy_from_slice(&buf);
            note(inverse_expansion(l, *s, &y), &mut lipschitz);
        }
        let mut y = tau0.row_slice(r).to_vec();
        for (l, s) in layers.iter().zip(&layer_stats).rev() {
            note(inverse_expansion(l, *s, &y), &mut lipschitz);
            layer_inverse(l, *s, &y, &mut buf);
            y.copy_from_slice(&buf);
        }
    }

    let lp = stack.log_prob_batch(&tau0, &stats)?;
    let weights: Vec<f64> = (0..n_pairs).map(|r| (lp[r] - base.log_prob(tau0.row_slice(r))).exp()).collect();
    let max_weight = weights.iter().copied().fold(0.0, f64::max);
    let mean_weight = weights.iter().sum::<f64>() / n_pairs as f64;
    let exponent = layers.len() * d;
    let bound = lipschitz.powi(exponent as i32);
    Ok(WeightBoundReport {
        n_pairs,
        lipschitz,
        exponent,
        bound,
        max_weight,
        mean_weight,
        skipped,
        holds: max_weight <= bound * 1.01,
    })
}

/// Exact density ratio of the flow against its base at the given points.
pub fn importance_weights(stack: &FlowStack, points: &Tensor) -> Result<Vec<f64>, TheoryError> {
    let lp = match stack.num_minmax() {
        0 => stack.log_prob_batch(points, &[])?,
        _ => {
            let s = stack.frozen_stats().ok_or(FlowError::NoFrozenStats)?.to_vec();
            stack.log_prob_batch(points, &s)?
        }
    };
    Ok((0..points.rows()).map(|r| (lp[r] - stack.base().log_prob(points.row_slice(r))).exp()).collect())
}
