// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite differences against the tape's gradients, 20 random
//! instances per op.

#[macro_use]
#[path = "support/mod.rs"]
mod support;

use fencebench_core::fence::{position_loss, FenceConfig, LabelVector, Normalization, TokenMask};
use fencebench_core::model::{Model, ModelConfig, TraceVars};
use fencebench_core::tensor::{Tape, Tensor, Var};
use fencebench_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const EPS: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = randn(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + 0.1);
    }
    t
}

/// Checks d/dx of `Σ rᵢ·f(x)ᵢ` for a fixed random `r`, over every input.
fn check<F>(name: &str, inputs: &[Tensor], seed: u64, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_with(name, inputs, seed, EPS, f);
}

fn check_with<F>(name: &str, inputs: &[Tensor], seed: u64, eps: f64, f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let probe_out = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        f(&tape, &vars).unwrap().value().as_ref().clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let weights = randn(&mut rng, probe_out.shape());

    let objective = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&tape, &vars).unwrap().value();
        y.data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = f(&tape, &vars).unwrap();
    let root = y.mul(tape.constant(weights.clone())).unwrap().sum_all();
    let grads = tape.backward(root);

    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0f64; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += eps as f32;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= eps as f32;
            *slot = (objective(&plus) - objective(&minus)) / (2.0 * eps);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (f64::from(a) - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.data().iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale < 1e-9 {
            continue;
        }
        let rel = diff / scale;
        assert!(
            rel < TOL,
            "{name} (seed {seed}) input {i}: relative error {rel:.2e}, analytic {:?} numeric {:?}",
            &analytic.data()[..analytic.len().min(6)],
            &numeric[..numeric.len().min(6)]
        );
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..5))
}

fn matmul_2d() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, k, n) = dims(&mut rng);
        let a = randn(&mut rng, &[m, k]);
        let b = randn(&mut rng, &[k, n]);
        check("matmul", &[a, b], s, |_, v| v[0].matmul(v[1]));
    }
}

fn matmul_batched() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, k, n) = dims(&mut rng);
        let b = rng.random_range(1..4);
        let x = randn(&mut rng, &[b, m, k]);
        let y = randn(&mut rng, &[b, k, n]);
        check("matmul batched", &[x, y], s, |_, v| v[0].matmul(v[1]));
    }
}

fn transpose() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, k, b) = dims(&mut rng);
        let x = if s % 2 == 0 {
            randn(&mut rng, &[m, k])
        } else {
            randn(&mut rng, &[b, m, k])
        };
        check("transpose", &[x], s, |_, v| v[0].transpose());
    }
}

fn add_sub_mul_broadcast() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, n, _) = dims(&mut rng);
        let a = randn(&mut rng, &[m, n]);
        let full = randn(&mut rng, &[m, n]);
        let row = randn(&mut rng, &[n]);
        check("add", &[a.clone(), full.clone()], s, |_, v| v[0].add(v[1]));
        check("add broadcast", &[a.clone(), row.clone()], s, |_, v| v[0].add(v[1]));
        check("sub", &[a.clone(), full.clone()], s, |_, v| v[0].sub(v[1]));
        check("sub broadcast", &[a.clone(), row.clone()], s, |_, v| v[0].sub(v[1]));
        check("mul", &[a.clone(), full], s, |_, v| v[0].mul(v[1]));
        check("mul broadcast", &[a, row], s, |_, v| v[0].mul(v[1]));
    }
}

fn scale_and_div_scalar() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, n, _) = dims(&mut rng);
        let a = randn(&mut rng, &[m, n]);
        let c: f32 = rng.random_range(-3.0..3.0);
        let d: f32 = rng.random_range(0.5..4.0);
        check("scale", std::slice::from_ref(&a), s, move |_, v| Ok(v[0].scale(c)));
        check("div_scalar", &[a], s, move |_, v| Ok(v[0].div_scalar(d)));
    }
}

fn activations() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, n, _) = dims(&mut rng);
        let a = away_from_zero(&mut rng, &[m, n]);
        check("relu", std::slice::from_ref(&a), s, |_, v| Ok(v[0].relu()));
        check("gelu", &[a], s, |_, v| Ok(v[0].gelu()));
    }
}

fn softmax() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, n, b) = dims(&mut rng);
        let a = randn(&mut rng, &[b, m, n + 1]);
        check("softmax", &[a], s, |_, v| Ok(v[0].softmax_lastdim()));
    }
}

fn causal_softmax() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = rng.random_range(1..6);
        let h = rng.random_range(1..3);
        let a = randn(&mut rng, &[h, n, n]);
        check("causal_mask", &[a], s, |_, v| Ok(v[0].causal_mask()?.softmax_lastdim()));
    }
}

fn rmsnorm() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, n, _) = dims(&mut rng);
        let x = randn(&mut rng, &[m, n + 1]);
        let g = randn(&mut rng, &[n + 1]);
        check("rmsnorm", &[x, g], s, |_, v| v[0].rmsnorm(v[1], 1e-5));
    }
}

fn embed_lookup() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let vocab = rng.random_range(2..7);
        let d = rng.random_range(1..5);
        let ids: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..vocab)).collect();
        let table = randn(&mut rng, &[vocab, d]);
        check("embed_lookup", &[table], s, move |_, v| v[0].embed_lookup(&ids));
    }
}

fn concat_and_slice() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, n, k) = dims(&mut rng);
        let a = randn(&mut rng, &[m, n]);
        let b = randn(&mut rng, &[m, k]);
        check("concat", &[a.clone(), b], s, |_, v| Var::concat_lastdim(&[v[0], v[1]]));
        let start = rng.random_range(0..n);
        let end = rng.random_range(start + 1..=n);
        check("slice", &[a], s, move |_, v| v[0].slice_lastdim(start, end));
    }
}

fn mean_masked_and_sum_all() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, n, _) = dims(&mut rng);
        let a = randn(&mut rng, &[m, n]);
        let mut mask: Vec<f32> = (0..m).map(|_| f32::from(u8::from(rng.random_bool(0.6)))).collect();
        mask[rng.random_range(0..m)] = 1.0;
        check("mean_masked", std::slice::from_ref(&a), s, move |_, v| v[0].mean_masked(&mask));
        check("sum_all", &[a], s, |_, v| Ok(v[0].sum_all()));
    }
}

fn cross_entropy() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let n = rng.random_range(1..6);
        let vocab = rng.random_range(2..8);
        let logits = randn(&mut rng, &[n, vocab]);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let mut mask: Vec<f32> = (0..n).map(|_| f32::from(u8::from(rng.random_bool(0.7)))).collect();
        mask[0] = 1.0;
        check("cross_entropy", &[logits], s, move |_, v| v[0].cross_entropy(&targets, &mask));
    }
}

fn overwrite_columns() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (m, n, _) = dims(&mut rng);
        let a = randn(&mut rng, &[m, n + 1]);
        let col = rng.random_range(0..=n);
        let val: f32 = rng.random_range(-1.0..1.0);
        check("overwrite_columns", &[a], s, move |_, v| v[0].overwrite_columns(&[(col, val)]));
    }
}

fn position_loss_composed() {
    for s in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let k = rng.random_range(1..4);
        let n = rng.random_range(1..6);
        let d = 6;
        let fence = {
            let mut f = FenceConfig::top_aligned(d, &[("a", 2), ("b", 1)], &["c"]).unwrap();
            f.targets = (0..k).map(|_| rng.random_range(0.2..2.0)).collect();
            f
        };
        let labels = LabelVector((0..3).map(|_| rng.random_bool(0.5)).collect());
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        mask[n - 1] = true;
        let mask = TokenMask(mask);
        let inputs: Vec<Tensor> = (0..2 * k).map(|_| randn(&mut rng, &[n, d])).collect();
        let norm = if s % 2 == 0 {
            Normalization::AppendixSum
        } else {
            Normalization::MainTextMean
        };
        // The objective is a single f32 sum here, so a wider step keeps
        // roundoff below the tolerance; central differences are exact on
        // a quadratic anyway.
        check_with("position_loss", &inputs, s, 5e-3, move |_, v| {
            let trace = TraceVars {
                layers: v.chunks(2).map(|c| [c[0], c[1]]).collect(),
            };
            Ok(position_loss(&trace, &labels, &mask, &fence, norm)?.total)
        });
    }
}

/// Every parameter tensor of a tiny model, through cross-entropy.
fn model_parameters() {
    let cfg = ModelConfig {
        n_layers: 2,
        hidden_dim: 8,
        n_heads: 2,
        vocab_size: 7,
        max_context: 8,
        ff_mult: 2,
        seed: 3,
        ..ModelConfig::default()
    };
    let ids = [1usize, 4, 2, 6, 3];
    let targets = [4usize, 2, 6, 3, 0];
    let mask = [1.0f32, 1.0, 0.0, 1.0, 0.0];
    let loss = |m: &Model| -> f64 {
        let out = m.forward(&ids, None).unwrap();
        let tape = Tape::new();
        let ce = tape.constant(out.logits).cross_entropy(&targets, &mask).unwrap();
        f64::from(ce.value().item())
    };
    for seed in 0..INSTANCES {
        let model = Model::new(ModelConfig { seed, ..cfg.clone() }).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, true);
        let out = bound.forward(&ids, None).unwrap();
        let ce = out.logits.cross_entropy(&targets, &mask).unwrap();
        let grads = tape.backward(ce);
        let analytic: Vec<Tensor> = bound
            .param_vars()
            .iter()
            .zip(model.params())
            .map(|(v, p)| grads.get(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (pi, name) in model.param_names().iter().enumerate() {
            // a few coordinates per tensor keep the run short
            let len = model.params()[pi].len();
            for _ in 0..3 {
                let j = rng.random_range(0..len);
                let shifted = |delta: f32| {
                    let mut m = model.clone();
                    let (_, t) = m.params_mut().nth(pi).unwrap();
                    t.data_mut()[j] += delta;
                    loss(&m)
                };
                let numeric = (shifted(1e-3) - shifted(-1e-3)) / 2e-3;
                let a = f64::from(analytic[pi].data()[j]);
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(5e-2);
                assert!(err < 1e-2, "{name}[{j}] seed {seed}: analytic {a} numeric {numeric}");
            }
        }
    }
}

checks! {
    matmul_2d,
    matmul_batched,
    transpose,
    add_sub_mul_broadcast,
    scale_and_div_scalar,
    activations,
    softmax,
    causal_softmax,
    rmsnorm,
    embed_lookup,
    concat_and_slice,
    mean_masked_and_sum_all,
    cross_entropy,
    overwrite_columns,
    position_loss_composed,
    model_parameters,
}
