// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fence::FenceConfig;
use crate::model::{HiddenTrace, Site};

/// One feature's column range within the grid's last axis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub feature: String,
    /// Offset into the fenced-dim axis, not the hidden dim.
    pub start: usize,
    pub end: usize,
    pub hidden_start: usize,
    pub hidden_end: usize,
}

/// Fenced-region activations divided by the layer target.
///
/// `values[r][t][j]` is row `r = 2·layer + site` (site 0 post-attention,
/// 1 post-MLP), token `t`, fenced dim `j` in fence order. A forced-on flag
/// reads exactly 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceGrid {
    pub tokens: Vec<String>,
    pub n_layers: usize,
    /// Row labels such as `"L0.post_attention"`.
    pub rows: Vec<String>,
    pub values: Vec<Vec<Vec<f32>>>,
    pub legend: Vec<LegendEntry>,
}

impl TraceGrid {
    /// `[rows, tokens, fenced dims]`
    pub fn shape(&self) -> [usize; 3] {
        [
            self.values.len(),
            self.tokens.len(),
            self.legend.last().map_or(0, |e| e.end),
        ]
    }
}

pub fn trace_grid(trace: &HiddenTrace, fence: &FenceConfig, tokens: Vec<String>) -> Result<TraceGrid> {
    if !fence.is_calibrated() {
        return Err(Error::Calibration("trace grid needs calibrated targets".into()));
    }
    if fence.targets.len() != trace.n_layers() || trace.hidden_dim() != fence.hidden_dim {
        return Err(Error::Config(format!(
            "trace has {} layers of width {}, fence expects {} of width {}",
            trace.n_layers(),
            trace.hidden_dim(),
            fence.targets.len(),
            fence.hidden_dim
        )));
    }
    if tokens.len() != trace.n_tokens() {
        return Err(Error::Config(format!(
            "{} token labels for a trace of {} tokens",
            tokens.len(),
            trace.n_tokens()
        )));
    }
    let dims: Vec<usize> = fence.features.iter().flat_map(|f| f.dims()).collect();
    let mut rows = Vec::with_capacity(2 * trace.n_layers());
    let mut values = Vec::with_capacity(2 * trace.n_layers());
    for layer in 0..trace.n_layers() {
        let target = fence.target(layer);
        for site in Site::ALL {
            let h = trace.get(layer, site);
            rows.push(format!("L{layer}.{}", site.as_str()));
            values.push(
                (0..trace.n_tokens())
                    .map(|t| {
                        let row = h.row(t);
                        dims.iter().map(|&d| row[d] / target).collect()
                    })
                    .collect(),
            );
        }
    }
    let mut offset = 0;
    let legend = fence
        .features
        .iter()
        .map(|f| {
            let e = LegendEntry {
                feature: f.name.clone(),
                start: offset,
                end: offset + f.width(),
                hidden_start: f.start,
                hidden_end: f.end,
            };
            offset += f.width();
            e
        })
        .collect();
    Ok(TraceGrid {
        tokens,
        n_layers: trace.n_layers(),
        rows,
        values,
        legend,
    })
}
