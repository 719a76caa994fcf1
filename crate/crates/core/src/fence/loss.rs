// SPDX-License-Identifier: MIT OR Apache-2.0

//! Position loss: squared error between fenced dims and their targets
//! (h̄[k] when the feature is active, 0 otherwise), averaged over assistant
//! tokens and summed over layers, both streams, and fenced dims.

use serde::{Deserialize, Serialize};

use super::{AssistantMask, FenceConfig, LabelVector};
use crate::error::{Error, Result};
use crate::model::{HiddenTrace, Site, TraceVars};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Plain sum over layers and fenced dims.
    #[default]
    AppendixSum,
    /// The sum divided by K·D_F.
    MainTextMean,
}

pub struct PositionLoss<'t> {
    pub total: Var<'t>,
    pub per_layer: Vec<Var<'t>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionLossValue {
    pub total: f32,
    pub per_layer: Vec<f32>,
}

pub fn position_loss<'t>(
    trace: &TraceVars<'t>,
    labels: &LabelVector,
    mask: &AssistantMask,
    cfg: &FenceConfig,
    normalization: Normalization,
) -> Result<PositionLoss<'t>> {
    let n_layers = trace.n_layers();
    cfg.require_calibrated(n_layers)?;
    labels.check(cfg)?;
    let first = trace.get(0, Site::PostMlp);
    let tape: &'t Tape = first.tape();
    let n_tokens = first.shape()[0];
    if mask.len() != n_tokens {
        return Err(Error::Shape {
            op: "position_loss mask",
            lhs: vec![n_tokens],
            rhs: vec![mask.len()],
        });
    }
    if mask.count() == 0 {
        log::warn!("position loss on a sequence with no assistant tokens; contributing 0");
        let zero = || tape.constant(Tensor::scalar(0.0));
        return Ok(PositionLoss {
            total: zero(),
            per_layer: (0..n_layers).map(|_| zero()).collect(),
        });
    }

    let weights = mask.as_f32();
    let mut per_layer = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let mut layer_sum: Option<Var<'t>> = None;
        for site in Site::ALL {
            let state = trace.get(k, site);
            for (fi, f) in cfg.features.iter().enumerate() {
                let x = state.slice_lastdim(f.start, f.end)?;
                let diff = if labels.is_active(fi) {
                    x.sub(tape.constant(Tensor::full(&[f.width()], cfg.targets[k])))?
                } else {
                    x
                };
                let term = diff.mul(diff)?.mean_masked(&weights)?.sum_all();
                layer_sum = Some(match layer_sum {
                    None => term,
                    Some(acc) => acc.add(term)?,
                });
            }
        }
        per_layer.push(layer_sum.expect("fence has features"));
    }
    let mut total = per_layer[0];
    for l in &per_layer[1..] {
        total = total.add(*l)?;
    }
    if normalization == Normalization::MainTextMean {
        let denom = (n_layers * cfg.fenced_width()) as f32;
        total = total.div_scalar(denom);
        per_layer = per_layer.into_iter().map(|l| l.div_scalar(denom)).collect();
    }
    Ok(PositionLoss { total, per_layer })
}

/// Position loss of a recorded trace, without gradients.
pub fn position_loss_value(
    trace: &HiddenTrace,
    labels: &LabelVector,
    mask: &AssistantMask,
    cfg: &FenceConfig,
    normalization: Normalization,
) -> Result<PositionLossValue> {
    let tape = Tape::new();
    let vars = TraceVars::from_trace(&tape, trace);
    let loss = position_loss(&vars, labels, mask, cfg, normalization)?;
    Ok(PositionLossValue {
        total: loss.total.value().item(),
        per_layer: loss.per_layer.iter().map(|v| v.value().item()).collect(),
    })
}
