//! Classic-control dynamics used for system identification.

use std::f64::consts::PI;

pub const PENDULUM_G: f64 = 10.0;
pub const PENDULUM_DT: f64 = 0.05;
pub const PENDULUM_MAX_SPEED: f64 = 8.0;
pub const PENDULUM_MAX_TORQUE: f64 = 2.0;

/// State `(θ, θ̇)`; `θ = 0` is upright, `θ = π` hangs down.
pub fn pendulum_step(state: [f64; 2], torque: f64, mass: f64, length: f64) -> [f64; 2] {
    let [th, thdot] = state;
    let u = torque.clamp(-PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE);
    let acc = 3.0 * PENDULUM_G / (2.0 * length) * th.sin() + 3.0 / (mass * length * length) * u;
    let new_thdot = (thdot + acc * PENDULUM_DT).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
    [th + new_thdot * PENDULUM_DT, new_thdot]
}

pub fn pendulum_observation(state: [f64; 2]) -> [f64; 3] {
    [state[0].cos(), state[0].sin(), state[1]]
}

pub const ACROBOT_DT: f64 = 0.2;
pub const ACROBOT_L1: f64 = 1.0;
pub const ACROBOT_LC: f64 = 0.5;
pub const ACROBOT_I: f64 = 1.0;
pub const ACROBOT_G: f64 = 9.8;
pub const ACROBOT_MAX_VEL_1: f64 = 4.0 * PI;
pub const ACROBOT_MAX_VEL_2: f64 = 9.0 * PI;
pub const ACROBOT_TORQUES: [f64; 3] = [-1.0, 0.0, 1.0];

/// State `[θ₁, θ̇₁, θ₂, θ̇₂]`.
pub type AcrobotState = [f64; 4];

fn acrobot_derivs(s: AcrobotState, torque: f64, m1: f64, m2: f64) -> AcrobotState {
    let [t1, dt1, t2, dt2] = s;
    let (l1, lc1, lc2, i1, i2, g) = (ACROBOT_L1, ACROBOT_LC, ACROBOT_LC, ACROBOT_I, ACROBOT_I, ACROBOT_G);
    let d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * t2.cos()) + i1 + i2;
    let d2 = m2 * (lc2 * lc2 + l1 * lc2 * t2.cos()) + i2;
    let phi2 = m2 * lc2 * g * (t1 + t2 - PI / 2.0).cos();
    let phi1 = -m2 * l1 * lc2 * dt2 * dt2 * t2.sin() - 2.0 * m2 * l1 * lc2 * dt2 * dt1 * t2.sin()
        + (m1 * lc1 + m2 * l1) * g * (t1 - PI / 2.0).cos()
        + phi2;
    let ddt2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dt1 * dt1 * t2.sin() - phi2)
        / (m2 * lc2 * lc2 + i2 - d2 * d2 / d1);
    let ddt1 = -(d2 * ddt2 + phi1) / d1;
    [dt1, ddt1, dt2, ddt2]
}

fn wrap(x: f64) -> f64 {
    let w = 2.0 * PI;
    let mut y = x;
    while y > PI {
        y -= w;
    }
    while y < -PI {
        y += w;
    }
    y
}

/// One RK4 step of length `dt` without wrapping or clipping.
pub fn acrobot_rk4(s: AcrobotState, torque: f64, m1: f64, m2: f64, dt: f64) -> AcrobotState {
    let add = |a: AcrobotState, b: AcrobotState, k: f64| -> AcrobotState {
        [a[0] + k * b[0], a[1] + k * b[1], a[2] + k * b[2], a[3] + k * b[3]]
    };
    let k1 = acrobot_derivs(s, torque, m1, m2);
    let k2 = acrobot_derivs(add(s, k1, dt / 2.0), torque, m1, m2);
    let k3 = acrobot_derivs(add(s, k2, dt / 2.0), torque, m1, m2);
    let k4 = acrobot_derivs(add(s, k3, dt), torque, m1, m2);
    let mut out = s;
    for i in 0..4 {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Environment step: RK4, then angle wrapping and velocity clipping.
pub fn acrobot_step(s: AcrobotState, torque: f64, m1: f64, m2: f64) -> AcrobotState {
    let n = acrobot_rk4(s, torque, m1, m2, ACROBOT_DT);
    [
        wrap(n[0]),
        n[1].clamp(-ACROBOT_MAX_VEL_1, ACROBOT_MAX_VEL_1),
        wrap(n[2]),
        n[3].clamp(-ACROBOT_MAX_VEL_2, ACROBOT_MAX_VEL_2),
    ]
}

pub fn acrobot_observation(s: AcrobotState) -> [f64; 6] {
    [s[0].cos(), s[0].sin(), s[2].cos(), s[2].sin(), s[1], s[3]]
}

/// Kinetic plus potential energy, with `θ₁ = 0` hanging down.
pub fn acrobot_energy(s: AcrobotState, m1: f64, m2: f64) -> f64 {
    let [t1, dt1, t2, dt2] = s;
    let (l1, lc1, lc2, i1, i2, g) = (ACROBOT_L1, ACROBOT_LC, ACROBOT_LC, ACROBOT_I, ACROBOT_I, ACROBOT_G);
    let d1 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * t2.cos()) + i1 + i2;
    let d2 = m2 * (lc2 * lc2 + l1 * lc2 * t2.cos()) + i2;
    let d3 = m2 * lc2 * lc2 + i2;
    let kinetic = 0.5 * (d1 * dt1 * dt1 + 2.0 * d2 * dt1 * dt2 + d3 * dt2 * dt2);
    let potential = -m1 * g * lc1 * t1.cos() - m2 * g * (l1 * t1.cos() + lc2 * (t1 + t2).cos());
    kinetic + potential
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pendulum_rest_at_stable_equilibrium() {
        let s = [PI, 0.0];
        let n = pendulum_step(s, 0.0, 1.0, 1.0);
        assert!((n[0] - s[0]).abs() <= 1e-9 && n[1].abs() <= 1e-9);
    }

    #[test]
    fn pendulum_gravity_only_update() {
        let (m, l) = (1.3, 0.7);
        let th = 0.4;
        let n = pendulum_step([th, 0.0], 0.0, m, l);
        let want = 3.0 * PENDULUM_G / (2.0 * l) * th.sin() * PENDULUM_DT;
        assert!((n[1] - want).abs() < 1e-15);
    }

    #[test]
    fn pendulum_speed_clipped() {
        let n = pendulum_step([1.5, 7.9], 2.0, 0.4, 0.4);
        assert_eq!(n[1], PENDULUM_MAX_SPEED);
    }

    #[test]
    fn acrobot_energy_drift_small() {
        let (m1, m2) = (1.0, 1.0);
        for start in [[0.05, 0.0, -0.08, 0.0], [1.0, 0.0, 0.0, 0.0], [0.5, 0.3, -0.4, 0.2]] {
            let e0 = acrobot_energy(start, m1, m2);
            let mut s = start;
            for _ in 0..50 {
                s = acrobot_step(s, 0.0, m1, m2);
            }
            let e1 = acrobot_energy(s, m1, m2);
            assert!((e1 - e0).abs() < 0.01 * e0.abs(), "{e0} -> {e1}");
        }
    }

    #[test]
    fn acrobot_rest_is_equilibrium() {
        let s = acrobot_step([0.0; 4], 0.0, 0.7, 1.3);
        assert!(s.iter().all(|x| x.abs() < 1e-12));
    }
}
