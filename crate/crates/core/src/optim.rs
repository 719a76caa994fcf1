// SPDX-License-Identifier: MIT OR Apache-2.0

//! Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Optimizer state congruent with a named parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            moments: params
                .iter()
                .map(|p| Moments {
                    m: vec![0.0; p.len()],
                    v: vec![0.0; p.len()],
                })
                .collect(),
        }
    }
}

/// One bias-corrected Adam update applied in place.
///
/// All gradients are checked before any parameter is touched, so a
/// non-finite gradient leaves params and state unchanged.
pub fn adam_step(
    params: &mut [(&str, &mut Tensor)],
    grads: &[&Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.moments.len()],
        });
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::Divergence {
                param: (*name).to_string(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((_, p), g), mom) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        for (((w, &gv), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(mom.m.iter_mut())
            .zip(mom.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gv;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_and_decays_moments() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let g = Tensor::zeros(&[2]);
        let mut state = AdamState::new(&[&p]);
        state.moments[0].m = vec![0.5, 0.5];
        state.moments[0].v = vec![0.25, 0.25];
        let cfg = AdamConfig::default();
        adam_step(&mut [("w", &mut p)], &[&g], &mut state, &cfg).unwrap();
        // Moments decay; the update is driven by the decayed first moment, so
        // only with zero moments does a zero grad leave params fixed.
        assert!((state.moments[0].m[0] - 0.45).abs() < 1e-7);
        assert!((state.moments[0].v[0] - 0.24975).abs() < 1e-7);

        let mut q = Tensor::from_vec(vec![1.0, -2.0]);
        let mut fresh = AdamState::new(&[&q]);
        adam_step(&mut [("w", &mut q)], &[&g], &mut fresh, &cfg).unwrap();
        assert_eq!(q.data(), &[1.0, -2.0]);
        assert_eq!(fresh.moments[0].m, vec![0.0, 0.0]);
    }

    #[test]
    fn single_step_hand_computed() {
        // m = 0.1*g, v = 0.001*g², m̂ = g, v̂ = g², update = lr * g / (|g| + eps)
        let mut p = Tensor::from_vec(vec![0.5]);
        let g = Tensor::from_vec(vec![2.0]);
        let mut state = AdamState::new(&[&p]);
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        adam_step(&mut [("w", &mut p)], &[&g], &mut state, &cfg).unwrap();
        let expected = 0.5 - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-7);
        assert!((state.moments[0].m[0] - 0.2).abs() < 1e-7);
        assert!((state.moments[0].v[0] - 0.004).abs() < 1e-7);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w - 3)², grad = 2(w - 3)
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut state = AdamState::new(&[&p]);
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let loss = |w: f32| (w - 3.0) * (w - 3.0);
        let start = loss(p.data()[0]);
        for _ in 0..500 {
            let g = Tensor::from_vec(vec![2.0 * (p.data()[0] - 3.0)]);
            adam_step(&mut [("w", &mut p)], &[&g], &mut state, &cfg).unwrap();
        }
        assert!(loss(p.data()[0]) < 1e-3 * start);
    }

    #[test]
    fn non_finite_grad_names_param() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let g = Tensor::from_vec(vec![f32::NAN]);
        let mut state = AdamState::new(&[&p]);
        let err = adam_step(&mut [("blocks.0.wq", &mut p)], &[&g], &mut state, &AdamConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { ref param } if param == "blocks.0.wq"));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(state.step, 0);
    }
}
