//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update on flat slices. `t` is the 1-based step number.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    assert!(
        params.len() == grads.len() && m.len() == params.len() && v.len() == params.len(),
        "adam state shapes do not match"
    );
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Optimizer state shaped like the model parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Params,
    v: Params,
}

impl Adam {
    pub fn new(params: &Params, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Params, grads: &Params) {
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        let grads = grads.slices();
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            adam_step(p, g, m, v, t, &cfg);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.5, -1.0, 3.0];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        for t in 1..=5 {
            adam_step(&mut p, &[0.0; 3], &mut m, &mut v, t, &AdamConfig::default());
        }
        assert_eq!(p, vec![0.5, -1.0, 3.0]);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig::default();
        let g = [0.3, -2.0, 1e-3];
        let mut p = vec![1.0, 1.0, 1.0];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_step(&mut p, &g, &mut m, &mut v, 1, &cfg);
        for i in 0..3 {
            // after bias correction m_hat = g and v_hat = g^2
            let expected = 1.0 - cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((p[i] - expected).abs() < 1e-15, "{i}");
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.1, 0.2];
            let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
            for t in 1..=100 {
                let g = [p[0] - 0.3, 2.0 * (p[1] + 1.0)];
                adam_step(&mut p, &g, &mut m, &mut v, t, &AdamConfig::default());
            }
            p
        };
        assert_eq!(run(), run());
    }
}
