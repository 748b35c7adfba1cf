//! First-order optimizers over [`ParamVector`]s.

use crate::autodiff::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

impl Direction {
    fn sign(self) -> f64 {
        match self {
            Self::Descent => -1.0,
            Self::Ascent => 1.0,
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64, dir: Direction) {
        assert_eq!(params.len(), self.m.len(), "optimizer state size mismatch");
        self.t += 1;
        let t = self.t as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let s = dir.sign();
        for (((p, g), m), v) in params
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p += s * lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

pub fn sgd_step(params: &mut ParamVector, grad: &ParamVector, lr: f64, dir: Direction) {
    params.axpy(dir.sign() * lr, grad);
}

/// Cosine-decayed step size: `lr · ½(1 + cos(π·t/T))`, constant 0 past `T`.
pub fn cosine_lr(lr: f64, t: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = (t.min(total) as f64) / total as f64;
    lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamVector::new(vec![1.0, -1.0], vec![(1, 2)]);
        let g = ParamVector::new(vec![0.5, -3.0], vec![(1, 2)]);
        let mut opt = Adam::new(2);
        opt.step(&mut p, &g, 0.1, Direction::Descent);
        assert!((p.as_slice()[0] - 0.9).abs() < 1e-6);
        assert!((p.as_slice()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.2, 0, 10), 0.2);
        assert!(cosine_lr(0.2, 10, 10).abs() < 1e-17);
        assert!((cosine_lr(0.2, 5, 10) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_rate_is_noop() {
        let mut p = ParamVector::new(vec![1.0, 2.0], vec![(2, 1)]);
        let before = p.clone();
        sgd_step(&mut p, &before.clone(), 0.0, Direction::Ascent);
        assert_eq!(p, before);
    }
}
