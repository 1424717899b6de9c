//! Adam over a flat parameter vector with per-coordinate learning rates.
//!
//! beta1 = 0.9, beta2 = 0.999, eps = 1e-8 (conventional defaults); first and
//! second moments with bias correction. Fully deterministic given the same
//! sequence of gradients.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Optimizer moments; `t` counts applied updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One descent update of `params` in place. `lr` may be a single shared
    /// rate (slice of length 1) or one rate per coordinate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        assert!(lr.len() == 1 || lr.len() == self.m.len());
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let rate = if lr.len() == 1 { lr[0] } else { lr[i] };
            params[i] -= rate * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut adam = AdamState::new(3);
        let mut p = [1.0, -2.0, 0.5];
        for _ in 0..10 {
            adam.step(&mut p, &[0.0; 3], &[0.1]);
        }
        assert_eq!(p, [1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_gradient_steps_approach_signed_rate() {
        let mut adam = AdamState::new(1);
        let mut p = [0.0f64];
        let lr = 0.05;
        let mut prev = p[0];
        let mut last_delta = 0.0;
        for _ in 0..500 {
            adam.step(&mut p, &[3.7], &[lr]);
            last_delta = p[0] - prev;
            prev = p[0];
        }
        assert!(
            (last_delta + lr).abs() < 1e-6,
            "asymptotic step {last_delta} should be -lr"
        );
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(x) = 1/2 (x - a)^2, closed-form optimum at a. The oscillatory
        // tail of constant-rate Adam needs ~300 steps to settle below 1e-6.
        let a = 0.3;
        let mut adam = AdamState::new(1);
        let mut p = [2.0f64];
        for _ in 0..300 {
            let g = p[0] - a;
            adam.step(&mut p, &[g], &[0.2]);
        }
        assert!(
            (p[0] - a).abs() < 1e-6,
            "ended at {} (distance {:.2e})",
            p[0],
            (p[0] - a).abs()
        );
    }

    #[test]
    fn deterministic_given_same_inputs() {
        let run = || {
            let mut adam = AdamState::new(2);
            let mut p = [1.0, 2.0];
            for i in 0..50 {
                let g = [p[0] * 0.5 + i as f64 * 1e-3, -p[1]];
                adam.step(&mut p, &g, &[0.01, 0.05]);
            }
            (p, adam)
        };
        let (p1, a1) = run();
        let (p2, a2) = run();
        assert_eq!(p1[0].to_bits(), p2[0].to_bits());
        assert_eq!(p1[1].to_bits(), p2[1].to_bits());
        assert_eq!(a1, a2);
    }
}
