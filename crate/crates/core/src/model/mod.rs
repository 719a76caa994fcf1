// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small pre-norm decoder-only transformer.
//!
//! Each layer exposes two residual-stream sites, after the attention
//! residual add and after the MLP residual add. A [`LayerHook`] may replace
//! the state at either site; the replacement is what later layers see and
//! what the [`HiddenTrace`] records.

mod hooks;
mod sampling;

pub use hooks::{ClosureHook, IdentityHook, LayerHook, Site};
pub use sampling::Sampler;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const NORM_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub ff_mult: usize,
    pub seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden_dim: 128,
            n_heads: 4,
            vocab_size: 0,
            max_context: 256,
            ff_mult: 4,
            seed: 0,
            activation: Activation::Gelu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers < 2 {
            return fail(format!("n_layers must be >= 2, got {}", self.n_layers));
        }
        if self.hidden_dim < 8 {
            return fail(format!("hidden_dim must be >= 8, got {}", self.hidden_dim));
        }
        if self.max_context < 8 {
            return fail(format!("max_context must be >= 8, got {}", self.max_context));
        }
        if self.n_heads == 0 || !self.hidden_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            ));
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.ff_mult == 0 {
            return fail("ff_mult must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.ff_mult * self.hidden_dim
    }

    /// Name and shape of every parameter, in checkpoint order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.hidden_dim, self.ff_dim());
        let mut specs = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_context, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            specs.extend([
                (p("attn_norm"), vec![d]),
                (p("wq"), vec![d, d]),
                (p("wk"), vec![d, d]),
                (p("wv"), vec![d, d]),
                (p("wo"), vec![d, d]),
                (p("mlp_norm"), vec![d]),
                (p("w1"), vec![d, f]),
                (p("b1"), vec![f]),
                (p("w2"), vec![f, d]),
                (p("b2"), vec![d]),
            ]);
        }
        specs.push(("final_norm".to_string(), vec![d]));
        specs.push(("unembed".to_string(), vec![d, self.vocab_size]));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

const PARAMS_PER_LAYER: usize = 10;

/// Per-layer residual states captured during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStates {
    /// Post-attention, pre-MLP state, `[N, D]`.
    pub post_attention: Tensor,
    /// Layer output after the MLP residual add, `[N, D]`.
    pub post_mlp: Tensor,
}

impl LayerStates {
    pub fn site(&self, site: Site) -> &Tensor {
        match site {
            Site::PostAttention => &self.post_attention,
            Site::PostMlp => &self.post_mlp,
        }
    }
}

/// Both residual streams for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub layers: Vec<LayerStates>,
}

impl HiddenTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.post_mlp.shape()[0])
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.post_mlp.last_dim())
    }

    pub fn get(&self, layer: usize, site: Site) -> &Tensor {
        self.layers[layer].site(site)
    }
}

/// Trace of graph handles, one pair per layer.
#[derive(Debug, Clone)]
pub struct TraceVars<'t> {
    pub layers: Vec<[Var<'t>; 2]>,
}

impl<'t> TraceVars<'t> {
    pub fn get(&self, layer: usize, site: Site) -> Var<'t> {
        self.layers[layer][site.index()]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Places a recorded trace on `tape` as constants.
    pub fn from_trace(tape: &'t Tape, trace: &HiddenTrace) -> Self {
        Self {
            layers: trace
                .layers
                .iter()
                .map(|l| [tape.constant(l.post_attention.clone()), tape.constant(l.post_mlp.clone())])
                .collect(),
        }
    }

    pub fn to_trace(&self) -> HiddenTrace {
        HiddenTrace {
            layers: self
                .layers
                .iter()
                .map(|[a, m]| LayerStates {
                    post_attention: (*a.value()).clone(),
                    post_mlp: (*m.value()).clone(),
                })
                .collect(),
        }
    }
}

/// Result of an inference forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N, V]`
    pub logits: Tensor,
    pub trace: HiddenTrace,
}

/// Result of a forward pass recorded on a tape.
pub struct GraphOutput<'t> {
    pub logits: Var<'t>,
    pub trace: TraceVars<'t>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Arc<Tensor>>,
}

impl Model {
    /// Fresh model with seeded Gaussian initialisation.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let residual_std = INIT_STD / ((2 * config.n_layers) as f32).sqrt();
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_specs() {
            let t = if name.ends_with("norm") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else if name.ends_with(".wo") || name.ends_with(".w2") {
                Tensor::randn(&shape, residual_std, &mut rng)
            } else {
                Tensor::randn(&shape, INIT_STD, &mut rng)
            };
            names.push(name);
            params.push(Arc::new(t));
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Rebuilds a model from named tensors, which must match the config's
    /// parameter list exactly.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                specs.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for ((want_name, want_shape), (name, t)) in specs.into_iter().zip(named) {
            if want_name != name || want_shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter block `{name}` {:?} does not match expected `{want_name}` {want_shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(Arc::new(t));
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Arc<Tensor>] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Mutable access for the optimizer. Clones a tensor only if a tape
    /// still holds a reference to it.
    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.params.iter_mut().map(Arc::make_mut))
    }

    /// Places parameters on `tape`; `trainable` controls whether they
    /// receive gradients.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundModel<'t, '_> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(Arc::clone(p), trainable))
            .collect();
        BoundModel { model: self, vars }
    }

    /// Inference forward pass.
    pub fn forward(&self, tokens: &[usize], hook: Option<&dyn LayerHook>) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let out = bound.forward(tokens, hook)?;
        Ok(ForwardOutput {
            logits: (*out.logits.value()).clone(),
            trace: out.trace.to_trace(),
        })
    }

    /// Autoregressive sampling without a KV cache. Stops after `max_new`
    /// tokens, after emitting `stop`, or when the context is full.
    pub fn generate(
        &self,
        prompt: &[usize],
        hook: Option<&dyn LayerHook>,
        sampler: &Sampler,
        max_new: usize,
        stop: Option<usize>,
    ) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Config("generation prompt is empty".into()));
        }
        self.check_tokens(prompt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
        let mut tokens = prompt.to_vec();
        for _ in 0..max_new {
            if tokens.len() >= self.config.max_context {
                break;
            }
            let out = self.forward(&tokens, hook)?;
            let last = out.logits.row(tokens.len() - 1);
            let next = sampler.sample(last, &mut rng);
            tokens.push(next);
            if Some(next) == stop {
                break;
            }
        }
        Ok(tokens)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.config.max_context {
            return Err(Error::ContextLength {
                len: tokens.len(),
                max: self.config.max_context,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenRange {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

/// Parameters bound to a tape.
pub struct BoundModel<'t, 'm> {
    model: &'m Model,
    vars: Vec<Var<'t>>,
}

impl<'t> BoundModel<'t, '_> {
    pub fn param_vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn layer_param(&self, layer: usize, offset: usize) -> Var<'t> {
        self.vars[2 + layer * PARAMS_PER_LAYER + offset]
    }

    pub fn forward(&self, tokens: &[usize], hook: Option<&dyn LayerHook>) -> Result<GraphOutput<'t>> {
        let cfg = &self.model.config;
        self.model.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Err(Error::Config("forward on empty token sequence".into()));
        }
        let n = tokens.len();
        let positions: Vec<usize> = (0..n).collect();
        let mut x = self.vars[0].embed_lookup(tokens)?.add(self.vars[1].embed_lookup(&positions)?)?;

        let dh = cfg.head_dim();
        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        let mut trace = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |o| self.layer_param(l, o);
            let h = x.rmsnorm(p(0), NORM_EPS)?;
            let q = h.matmul(p(1))?;
            let k = h.matmul(p(2))?;
            let v = h.matmul(p(3))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let qh = q.slice_lastdim(s, e)?;
                let kh = k.slice_lastdim(s, e)?;
                let vh = v.slice_lastdim(s, e)?;
                let att = qh
                    .matmul(kh.transpose()?)?
                    .scale(inv_sqrt)
                    .causal_mask()?
                    .softmax_lastdim();
                heads.push(att.matmul(vh)?);
            }
            let attn = Var::concat_lastdim(&heads)?.matmul(p(4))?;
            x = x.add(attn)?;
            x = apply_hook(hook, l, Site::PostAttention, x)?;
            let after_attn = x;

            let h2 = x.rmsnorm(p(5), NORM_EPS)?;
            let pre = h2.matmul(p(6))?.add(p(7))?;
            let act = match cfg.activation {
                Activation::Gelu => pre.gelu(),
                Activation::Relu => pre.relu(),
            };
            let mlp = act.matmul(p(8))?.add(p(9))?;
            x = x.add(mlp)?;
            x = apply_hook(hook, l, Site::PostMlp, x)?;
            trace.push([after_attn, x]);
        }
        let last = self.vars.len();
        let logits = x.rmsnorm(self.vars[last - 2], NORM_EPS)?.matmul(self.vars[last - 1])?;
        Ok(GraphOutput {
            logits,
            trace: TraceVars { layers: trace },
        })
    }
}

fn apply_hook<'t>(hook: Option<&dyn LayerHook>, layer: usize, site: Site, state: Var<'t>) -> Result<Var<'t>> {
    let Some(hook) = hook else { return Ok(state) };
    let before = state.shape();
    let after = hook.apply(layer, site, state)?;
    if after.shape() != before {
        return Err(Error::Shape {
            op: "layer hook",
            lhs: before,
            rhs: after.shape(),
        });
    }
    Ok(after)
}
