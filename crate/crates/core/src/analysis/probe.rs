// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fence::AssistantMask;
use crate::model::{HiddenTrace, Site};

/// Minimum examples per class accepted by [`train_probe`].
pub const MIN_PER_CLASS: usize = 20;

/// Mean of the layer output over masked tokens.
pub fn pool_hidden(trace: &HiddenTrace, mask: &AssistantMask, layer: usize) -> Result<Vec<f32>> {
    if layer >= trace.n_layers() {
        return Err(Error::Evaluation(format!(
            "layer {layer} out of range for {} layers",
            trace.n_layers()
        )));
    }
    if mask.len() != trace.n_tokens() {
        return Err(Error::Evaluation(format!(
            "mask covers {} tokens, trace has {}",
            mask.len(),
            trace.n_tokens()
        )));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::DegenerateMask("pool_hidden"));
    }
    let h = trace.get(layer, Site::PostMlp);
    let mut acc = vec![0.0f64; h.last_dim()];
    for (row, _) in mask.0.iter().enumerate().filter(|(_, m)| **m) {
        for (a, &v) in acc.iter_mut().zip(h.row(row)) {
            *a += f64::from(v);
        }
    }
    Ok(acc.into_iter().map(|a| (a / n as f64) as f32).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// L2 penalty on the (standardized) weights.
    pub reg: f64,
    /// Stop when the training loss changes by less than this.
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of examples used for fitting; the rest score accuracy.
    pub train_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            reg: 1e-2,
            tol: 1e-6,
            max_iter: 5000,
            train_fraction: 0.8,
        }
    }
}

/// Logistic-regression probe fitted on standardized inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub train_loss: f64,
}

impl LinearProbe {
    pub fn logit(&self, x: &[f32]) -> f64 {
        self.bias
            + x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((&v, m), s), w)| (f64::from(v) - m) / s * w)
                .sum::<f64>()
    }

    pub fn predict(&self, x: &[f32]) -> bool {
        self.logit(x) >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub probe: LinearProbe,
    /// Held-out accuracy.
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Indices of the held-out examples.
    pub test_indices: Vec<usize>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^z) without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean logistic loss plus `reg/2 · |w|²` and its gradient.
fn loss_and_grad(xs: &[Vec<f64>], ys: &[bool], w: &[f64], b: f64, reg: f64) -> (f64, Vec<f64>, f64) {
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let z = b + x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
        let t = if y { 1.0 } else { 0.0 };
        loss += softplus(z) - t * z;
        let r = sigmoid(z) - t;
        for (g, a) in gw.iter_mut().zip(x) {
            *g += r * a;
        }
        gb += r;
    }
    let l2: f64 = w.iter().map(|v| v * v).sum();
    for (g, wi) in gw.iter_mut().zip(w) {
        *g = *g / n + reg * wi;
    }
    (loss / n + 0.5 * reg * l2, gw, gb / n)
}

/// Fits an L2-regularized logistic probe by gradient descent with
/// backtracking line search on a seeded 80/20 split, and reports held-out
/// accuracy.
pub fn train_probe(xs: &[Vec<f32>], ys: &[bool], cfg: &ProbeConfig, seed: u64) -> Result<ProbeFit> {
    if xs.len() != ys.len() {
        return Err(Error::Evaluation(format!("{} inputs but {} labels", xs.len(), ys.len())));
    }
    let pos = ys.iter().filter(|y| **y).count();
    let neg = ys.len() - pos;
    if pos.min(neg) < MIN_PER_CLASS {
        return Err(Error::DegenerateLabels(format!(
            "{pos} positive and {neg} negative examples; need at least {MIN_PER_CLASS} of each"
        )));
    }
    let dim = xs[0].len();
    if xs.iter().any(|x| x.len() != dim) {
        return Err(Error::Evaluation("probe inputs have differing widths".into()));
    }
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((xs.len() as f64) * cfg.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, xs.len() - 1);
    let (train_idx, test_idx) = order.split_at(n_train);

    let mut mean = vec![0.0f64; dim];
    for &i in train_idx {
        for (m, &v) in mean.iter_mut().zip(&xs[i]) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    let mut scale = vec![0.0f64; dim];
    for &i in train_idx {
        for ((s, &v), m) in scale.iter_mut().zip(&xs[i]).zip(&mean) {
            *s += (f64::from(v) - m).powi(2);
        }
    }
    for s in &mut scale {
        *s = (*s / n_train as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let standardized: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| {
            xs[i]
                .iter()
                .zip(&mean)
                .zip(&scale)
                .map(|((&v, m), s)| (f64::from(v) - m) / s)
                .collect()
        })
        .collect();
    let train_y: Vec<bool> = train_idx.iter().map(|&i| ys[i]).collect();

    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut step = 1.0f64;
    let (mut loss, mut gw, mut gb) = loss_and_grad(&standardized, &train_y, &w, b, cfg.reg);
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let gnorm2: f64 = gw.iter().map(|g| g * g).sum::<f64>() + gb * gb;
        if gnorm2 == 0.0 {
            break;
        }
        // Armijo backtracking
        let mut accepted = None;
        for _ in 0..60 {
            let nw: Vec<f64> = w.iter().zip(&gw).map(|(wi, g)| wi - step * g).collect();
            let nb = b - step * gb;
            let (nl, ngw, ngb) = loss_and_grad(&standardized, &train_y, &nw, nb, cfg.reg);
            if nl <= loss - 0.5 * step * gnorm2 {
                accepted = Some((nw, nb, nl, ngw, ngb));
                break;
            }
            step *= 0.5;
        }
        let Some((nw, nb, nl, ngw, ngb)) = accepted else { break };
        let delta = loss - nl;
        w = nw;
        b = nb;
        loss = nl;
        gw = ngw;
        gb = ngb;
        step *= 2.0;
        if delta < cfg.tol {
            break;
        }
    }
    let probe = LinearProbe {
        mean,
        scale,
        weights: w,
        bias: b,
        iterations,
        train_loss: loss,
    };
    let correct = test_idx.iter().filter(|&&i| probe.predict(&xs[i]) == ys[i]).count();
    Ok(ProbeFit {
        accuracy: correct as f64 / test_idx.len() as f64,
        probe,
        n_train,
        n_test: test_idx.len(),
        test_indices: test_idx.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fence::TokenMask;
    use crate::model::LayerStates;
    use crate::tensor::Tensor;

    #[test]
    fn pooling_rules() {
        let h = Tensor::new(&[3, 2], vec![1.0, 2.0, -1.0, -2.0, 5.0, 7.0]).unwrap();
        let trace = HiddenTrace {
            layers: vec![LayerStates {
                post_attention: Tensor::zeros(&[3, 2]),
                post_mlp: h,
            }],
        };
        assert_eq!(pool_hidden(&trace, &TokenMask(vec![false, false, true]), 0).unwrap(), vec![5.0, 7.0]);
        assert_eq!(pool_hidden(&trace, &TokenMask(vec![true, true, false]), 0).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            pool_hidden(&trace, &TokenMask(vec![false; 3]), 0),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn separable_clusters() {
        let xs: Vec<Vec<f32>> = (0..200).map(|i| vec![if i % 2 == 0 { 3.0 } else { -3.0 }, (i % 7) as f32]).collect();
        let ys: Vec<bool> = (0..200).map(|i| i % 2 == 0).collect();
        let fit = train_probe(&xs, &ys, &ProbeConfig::default(), 1).unwrap();
        assert_eq!(fit.accuracy, 1.0);
        assert_eq!(fit.n_train + fit.n_test, 200);
    }

    #[test]
    fn constant_inputs_give_majority_rate() {
        let xs = vec![vec![1.0f32, 1.0]; 100];
        let ys: Vec<bool> = (0..100).map(|i| i < 70).collect();
        let fit = train_probe(&xs, &ys, &ProbeConfig::default(), 4).unwrap();
        let share = fit.test_indices.iter().filter(|&&i| ys[i]).count() as f64 / fit.n_test as f64;
        assert_eq!(fit.accuracy, share);
        assert!(fit.probe.weights.iter().all(|w| w.abs() < 1e-9));
    }

    #[test]
    fn single_class_rejected() {
        let xs = vec![vec![0.0f32]; 50];
        assert!(matches!(
            train_probe(&xs, &[true; 50], &ProbeConfig::default(), 0),
            Err(Error::DegenerateLabels(_))
        ));
    }
}
