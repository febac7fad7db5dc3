//! Adam and a central-difference gradient used as the verification oracle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` with `h = step * max(1, |x_i|)`.
pub fn numeric_gradient<F>(mut f: F, at: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut x = at.to_vec();
    let mut grad = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let h = step * at[i].abs().max(1.0);
        x[i] = at[i] + h;
        let up = f(&x)?;
        x[i] = at[i] - h;
        let down = f(&x)?;
        x[i] = at[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective near parameter {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    debug_assert_eq!(params.len(), grad.len());
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_quadratic_and_linear() {
        let g = numeric_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-4).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let c = [1.5, -2.0, 0.25];
        let g = numeric_gradient(|x| Ok(crate::linalg::dot(&c, x)), &[0.3, 10.0, -4.0], 1e-4).unwrap();
        for (a, b) in g.iter().zip(c) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(numeric_gradient(|_| Ok(f64::NAN), &[0.0], 1e-4).is_err());
    }

    #[test]
    fn zero_grad_keeps_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1, &AdamConfig::default());
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_has_lr_magnitude() {
        let mut p = vec![0.0, 0.0, 0.0];
        let mut st = AdamState::new(3);
        let lr = 0.01;
        adam_step(&mut p, &[3.0, -0.2, 1e-3], &mut st, lr, &AdamConfig::default());
        assert!((p[0] + lr).abs() < 1e-9);
        assert!((p[1] - lr).abs() < 1e-9);
        assert!((p[2] + lr).abs() < 1e-7);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.5, 0.1];
            let mut st = AdamState::new(2);
            adam_step(&mut p, &[0.3, -0.7], &mut st, 0.05, &AdamConfig::default());
            (p, st)
        };
        assert_eq!(run(), run());
    }
}
