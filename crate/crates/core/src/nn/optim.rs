use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Momentum SGD slots with weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdState {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<f64>,
}

impl SgdState {
    pub fn new(len: usize, momentum: f64, weight_decay: f64) -> Self {
        SgdState {
            momentum,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    /// Applies the update to `range` only; everything outside it, including
    /// its momentum slots, is left untouched.
    pub fn step_range(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        range: Range<usize>,
    ) -> Result<()> {
        if params.len() != self.velocity.len()
            || grads.len() != params.len()
            || range.end > params.len()
        {
            return Err(Error::Shape(format!(
                "sgd step over {} params, {} grads, {} slots, range {range:?}",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        ensure_finite(&grads[range.clone()], "sgd gradient")?;
        let (mu, wd) = (self.momentum, self.weight_decay);
        for i in range.clone() {
            let v = mu * self.velocity[i] + grads[i] + wd * params[i];
            self.velocity[i] = v;
            params[i] -= lr * v;
        }
        ensure_finite(&params[range], "sgd update")
    }
}

/// `v <- mu v + g + wd w; w <- w - lr v` over every parameter.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut SgdState,
    lr: f64,
) -> Result<()> {
    let len = params.len();
    state.step_range(params, grads, lr, 0..len)
}

/// Bias-corrected Adam slots. No weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            first: vec![0.0; len],
            second: vec![0.0; len],
            step: 0,
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len()
        || params.len() != state.first.len()
        || params.len() != state.second.len()
    {
        return Err(Error::Shape(format!(
            "adam step over {} params, {} grads, {} slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    ensure_finite(grads, "adam gradient")?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.first[i] = b1 * state.first[i] + (1.0 - b1) * g;
        state.second[i] = b2 * state.second[i] + (1.0 - b2) * g * g;
        let m_hat = state.first[i] / c1;
        let v_hat = state.second[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    ensure_finite(params, "adam update")
}

/// Rescales `grads` so its L2 norm is at most `max_norm`. Returns the norm
/// before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let mut w = vec![1.0, -2.0];
        let mut s = SgdState::new(2, 0.9, 0.0);
        sgd_momentum_step(&mut w, &[0.0, 0.0], &mut s, 0.1).unwrap();
        assert_eq!(w, vec![1.0, -2.0]);
    }

    #[test]
    fn sgd_one_step() {
        let mut w = vec![1.0];
        let mut s = SgdState::new(1, 0.9, 0.0);
        sgd_momentum_step(&mut w, &[1.0], &mut s, 0.1).unwrap();
        assert!((w[0] - 0.9).abs() < 1e-15);
        assert_eq!(s.velocity, vec![1.0]);
    }

    #[test]
    fn sgd_decay_only() {
        let mut w = vec![1.0];
        let mut s = SgdState::new(1, 0.9, 3e-4);
        sgd_momentum_step(&mut w, &[0.0], &mut s, 0.1).unwrap();
        assert!((w[0] - 0.99997).abs() < 1e-15);
    }

    #[test]
    fn sgd_range_leaves_rest_alone() {
        let mut w = vec![1.0, 1.0, 1.0];
        let mut s = SgdState::new(3, 0.9, 3e-4);
        s.step_range(&mut w, &[1.0, 1.0, 1.0], 0.1, 1..2).unwrap();
        assert_eq!(w[0], 1.0);
        assert_eq!(w[2], 1.0);
        assert_eq!(s.velocity[0], 0.0);
        assert!(w[1] < 1.0);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut w = vec![1.0];
        let mut s = SgdState::new(1, 0.9, 0.0);
        assert!(matches!(
            sgd_momentum_step(&mut w, &[f64::NAN], &mut s, 0.1),
            Err(Error::NonFinite(_))
        ));
        assert!(sgd_momentum_step(&mut w, &[f64::MAX], &mut s, f64::MAX).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut w = vec![0.5, -0.25];
        let mut s = AdamState::new(2, 0.9, 0.999, 1e-8);
        for _ in 0..5 {
            adam_step(&mut w, &[0.0, 0.0], &mut s, 1e-3).unwrap();
        }
        assert_eq!(w, vec![0.5, -0.25]);
        assert_eq!(s.step, 5);
    }

    #[test]
    fn adam_first_step_is_lr() {
        let mut w = vec![0.0];
        let mut s = AdamState::new(1, 0.9, 0.999, 1e-8);
        adam_step(&mut w, &[1.0], &mut s, 1e-3).unwrap();
        assert!((w[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_matches_reference() {
        // Straight-line reference: per-parameter recurrences written out with
        // explicit bias-correction powers.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 7;
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 3e-3);

        let mut w = init.clone();
        let mut s = AdamState::new(n, b1, b2, eps);
        for g in &grads {
            adam_step(&mut w, g, &mut s, lr).unwrap();
        }

        for i in 0..n {
            let (mut p, mut m, mut v) = (init[i], 0.0f64, 0.0f64);
            for (t, g) in grads.iter().enumerate() {
                let t = (t + 1) as f64;
                m = b1 * m + (1.0 - b1) * g[i];
                v = b2 * v + (1.0 - b2) * g[i] * g[i];
                let mh = m / (1.0 - b1.powf(t));
                let vh = v / (1.0 - b2.powf(t));
                p -= lr * mh / (vh.sqrt() + eps);
            }
            assert!((p - w[i]).abs() < 1e-12, "param {i}: {p} vs {}", w[i]);
        }
    }

    #[test]
    fn replay_is_bit_identical() {
        let g = [0.3, -0.7, 1.1];
        let run = || {
            let mut w = vec![0.1, 0.2, 0.3];
            let mut s = SgdState::new(3, 0.9, 3e-4);
            let mut a = AdamState::new(3, 0.9, 0.999, 1e-8);
            for _ in 0..4 {
                sgd_momentum_step(&mut w, &g, &mut s, 0.05).unwrap();
                adam_step(&mut w, &g, &mut a, 0.01).unwrap();
            }
            w
        };
        assert_eq!(run(), run());
    }
}
