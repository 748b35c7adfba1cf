use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{softplus, Tensor};

/// Negative-side slope of the planar nonlinearity.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Floor on min-max denominators.
pub const MINMAX_EPS: f64 = 1e-6;

/// `f(z) = z + û·h(wᵀz + b)` with `h` leaky-ReLU and `û` reparameterized so
/// that `wᵀû > −1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarLayer {
    pub w: Vec<f64>,
    pub u: Vec<f64>,
    pub b: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl PlanarLayer {
    /// Layer whose `û` vanishes, i.e. the identity map for the given `w`.
    pub fn identity(w: Vec<f64>) -> Self {
        let n2 = dot(&w, &w);
        let k = (std::f64::consts::E - 1.0).ln() / n2;
        let u = w.iter().map(|x| k * x).collect();
        Self { w, u, b: 0.0 }
    }

    /// Identity layer with `w ~ N(0, scale²)`.
    pub fn identity_random<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Self {
        let w = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect::<Vec<f64>>();
        Self::identity(w)
    }

    /// Fully random parameters.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Self {
        let mut draw = || -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        };
        let w = (0..d).map(|_| draw()).collect();
        let u = (0..d).map(|_| draw()).collect();
        let b = draw();
        Self { w, u, b }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn is_invertible(&self) -> bool {
        let n2 = dot(&self.w, &self.w);
        n2 > 1e-300
            && n2.is_finite()
            && self.branch_denominators().0 > 0.0
            && self.u.iter().all(|x| x.is_finite())
            && self.b.is_finite()
    }

    pub fn u_hat(&self) -> Vec<f64> {
        let wu = dot(&self.w, &self.u);
        let k = (softplus(wu) - 1.0 - wu) / dot(&self.w, &self.w);
        self.u.iter().zip(&self.w).map(|(u, w)| u + k * w).collect()
    }

    /// `1 + h'·wᵀû` on the positive and negative branch. Computed as
    /// `softplus(wᵀu)` and `1 − α + α·softplus(wᵀu)` to stay positive.
    pub fn branch_denominators(&self) -> (f64, f64) {
        let sp = softplus(dot(&self.w, &self.u));
        (sp, 1.0 - LEAKY_SLOPE + LEAKY_SLOPE * sp)
    }

    /// Writes `f(z)` into `out` and returns `ln|det ∂f/∂z|`.
    pub fn forward_point(&self, z: &[f64], out: &mut [f64]) -> f64 {
        let uh = self.u_hat();
        let (pos, neg) = self.branch_denominators();
        let s = dot(&self.w, z) + self.b;
        let (slope, denom) = if s > 0.0 { (1.0, pos) } else { (LEAKY_SLOPE, neg) };
        let h = slope * s;
        for ((o, zi), ui) in out.iter_mut().zip(z).zip(&uh) {
            *o = zi + ui * h;
        }
        denom.ln()
    }

    /// Writes `f⁻¹(y)` into `out` and returns `ln|det ∂f⁻¹/∂y|`.
    pub fn inverse_point(&self, y: &[f64], out: &mut [f64]) -> f64 {
        let uh = self.u_hat();
        let (pos, neg) = self.branch_denominators();
        let r = dot(&self.w, y) + self.b;
        let (slope, denom) = if r > 0.0 { (1.0, pos) } else { (LEAKY_SLOPE, neg) };
        let h = slope * (r / denom);
        for ((o, yi), ui) in out.iter_mut().zip(y).zip(&uh) {
            *o = yi - ui * h;
        }
        -denom.ln()
    }
}

/// Per-dimension batch statistics of a min-max layer's input.
#[derive(Clone, Debug, PartialEq)]
pub struct MinMaxStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxStats {
    pub fn from_batch(batch: &Tensor) -> Self {
        let d = batch.cols();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for r in 0..batch.rows() {
            for (j, &v) in batch.row_slice(r).iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }

    /// `max(Mᵢ − mᵢ, ε)` per dimension.
    pub fn denominators(&self) -> Vec<f64> {
        self.min
            .iter()
            .zip(&self.max)
            .map(|(m, mx)| (mx - m).max(MINMAX_EPS))
            .collect()
    }

    pub fn is_degenerate(&self) -> bool {
        self.min.iter().zip(&self.max).any(|(m, mx)| mx - m < MINMAX_EPS)
    }
}

/// `τ = a ⊙ (z − m) / (M − m) + b`. The scale is stored as `ln a`.
#[derive(Clone, Debug, PartialEq)]
pub struct MinMaxLayer {
    pub log_scale: Vec<f64>,
    pub offset: Vec<f64>,
    /// Whether `(ln a, b)` are part of the adversary's parameters.
    pub trainable: bool,
}

impl MinMaxLayer {
    /// Panics unless every scale is positive.
    pub fn new(scale: &[f64], offset: Vec<f64>, trainable: bool) -> Self {
        assert!(scale.iter().all(|a| *a > 0.0), "min-max scale must be positive");
        assert_eq!(scale.len(), offset.len(), "min-max scale/offset length mismatch");
        Self {
            log_scale: scale.iter().map(|a| a.ln()).collect(),
            offset,
            trainable,
        }
    }

    /// Maps batch ranges onto the box `[low, high]`.
    pub fn onto_box(low: &[f64], high: &[f64]) -> Self {
        let scale: Vec<f64> = low.iter().zip(high).map(|(l, h)| h - l).collect();
        Self::new(&scale, low.to_vec(), false)
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn scale(&self) -> Vec<f64> {
        self.log_scale.iter().map(|x| x.exp()).collect()
    }

    /// Per-sample forward log-det, identical for every sample.
    pub fn log_det(&self, stats: &MinMaxStats) -> f64 {
        self.log_scale
            .iter()
            .zip(stats.denominators())
            .map(|(la, den)| la - den.ln())
            .sum()
    }

    pub fn forward_point(&self, z: &[f64], stats: &MinMaxStats, out: &mut [f64]) {
        let den = stats.denominators();
        for j in 0..z.len() {
            out[j] = self.log_scale[j].exp() * (z[j] - stats.min[j]) / den[j] + self.offset[j];
        }
    }

    pub fn inverse_point(&self, y: &[f64], stats: &MinMaxStats, out: &mut [f64]) {
        let den = stats.denominators();
        for j in 0..y.len() {
            out[j] = (y[j] - self.offset[j]) / self.log_scale[j].exp() * den[j] + stats.min[j];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FlowLayer {
    Planar(PlanarLayer),
    MinMax(MinMaxLayer),
}

impl FlowLayer {
    pub fn dim(&self) -> usize {
        match self {
            Self::Planar(p) => p.dim(),
            Self::MinMax(m) => m.dim(),
        }
    }

    /// Parameter tensors in the order used by the adversary.
    pub fn param_tensors(&self) -> Vec<Tensor> {
        match self {
            Self::Planar(p) => vec![
                Tensor::row(p.w.clone()),
                Tensor::row(p.u.clone()),
                Tensor::scalar(p.b),
            ],
            Self::MinMax(m) if m.trainable => {
                vec![Tensor::row(m.log_scale.clone()), Tensor::row(m.offset.clone())]
            }
            Self::MinMax(_) => vec![],
        }
    }

    pub(crate) fn set_param_tensors(&mut self, ts: &[Tensor]) {
        match self {
            Self::Planar(p) => {
                p.w = ts[0].data().to_vec();
                p.u = ts[1].data().to_vec();
                p.b = ts[2].item();
            }
            Self::MinMax(m) if m.trainable => {
                m.log_scale = ts[0].data().to_vec();
                m.offset = ts[1].data().to_vec();
            }
            Self::MinMax(_) => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_layer_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = PlanarLayer::identity_random(&mut rng, 2, 1.0);
        let mut out = [0.0; 2];
        let ld = l.forward_point(&[0.3, -1.2], &mut out);
        assert!((out[0] - 0.3).abs() < 1e-15 && (out[1] + 1.2).abs() < 1e-15);
        assert!(ld.abs() < 1e-15);
    }

    #[test]
    fn reparameterization_keeps_invertibility() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let l = PlanarLayer::random(&mut rng, 2, 3.0);
            let wu = dot(&l.w, &l.u_hat());
            assert!((1.0 + wu - l.branch_denominators().0).abs() < 1e-9);
        }
    }

    #[test]
    fn minmax_log_det_direct_substitution() {
        let l = MinMaxLayer::new(&[2.0, 2.0], vec![0.0, 0.0], false);
        let stats = MinMaxStats { min: vec![0.0, 0.0], max: vec![1.0, 1.0] };
        assert!((l.log_det(&stats) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((l.log_det(&stats) - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn minmax_degenerate_uses_floor() {
        let stats = MinMaxStats { min: vec![1.0], max: vec![1.0] };
        assert!(stats.is_degenerate());
        assert_eq!(stats.denominators(), vec![MINMAX_EPS]);
    }
}
