//! Bias-corrected Adam, with per-row step counts for embedding tables.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One Adam step at (1-based) step `t`. Moments are updated in place.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    cfg: &AdamConfig,
) {
    debug_assert!(t >= 1);
    debug_assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let c1 = one - T::lit(cfg.beta1.powf(t as f64));
    let c2 = one - T::lit(cfg.beta2.powf(t as f64));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        param[i] = param[i] - lr * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = [1.5, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &AdamConfig::default());
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        // t=1: m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε).
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        for &g in &[0.3, -4.0, 1e-6] {
            let mut p = [2.0f64];
            let (mut m, mut v) = ([0.0], [0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 1, &cfg);
            let want = 2.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((p[0] - want).abs() < 1e-15, "{} vs {}", p[0], want);
        }
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut p = vec![0.5, -0.25, 1.0];
            let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
            for t in 1..=50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x - 0.1 * t as f64).collect();
                adam_update(&mut p, &g, &mut m, &mut v, t, &AdamConfig::default());
            }
            p
        };
        assert_eq!(run(), run());
    }
}
