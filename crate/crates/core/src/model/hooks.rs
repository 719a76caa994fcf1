// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::Var;

/// Residual-stream site within a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// After the attention residual add, before the MLP.
    PostAttention,
    /// After the MLP residual add (the layer output).
    PostMlp,
}

impl Site {
    pub const ALL: [Site; 2] = [Site::PostAttention, Site::PostMlp];

    pub fn index(self) -> usize {
        match self {
            Site::PostAttention => 0,
            Site::PostMlp => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Site::PostAttention => "post_attention",
            Site::PostMlp => "post_mlp",
        }
    }
}

/// Transform applied to the `[N, D]` residual state at each hook site.
///
/// Implementations must return a state of the same shape. Returning the
/// input unchanged leaves the forward pass bit-identical to running without
/// a hook.
pub trait LayerHook: Send + Sync {
    fn apply<'t>(&self, layer: usize, site: Site, state: Var<'t>) -> Result<Var<'t>>;
}

pub struct IdentityHook;

impl LayerHook for IdentityHook {
    fn apply<'t>(&self, _layer: usize, _site: Site, state: Var<'t>) -> Result<Var<'t>> {
        Ok(state)
    }
}

/// Adapter turning a closure into a hook.
pub struct ClosureHook<F>(pub F);

impl<F> LayerHook for ClosureHook<F>
where
    F: for<'t> Fn(usize, Site, Var<'t>) -> Result<Var<'t>> + Send + Sync,
{
    fn apply<'t>(&self, layer: usize, site: Site, state: Var<'t>) -> Result<Var<'t>> {
        (self.0)(layer, site, state)
    }
}
