// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::probe::{pool_hidden, train_probe, ProbeConfig};
use crate::corpus::{LabeledExample, Vocab};
use crate::error::{Error, Result};
use crate::fence::FenceConfig;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub feature: String,
    /// Unfenced control feature.
    pub control: bool,
    pub baseline_accuracy: f64,
    pub fenced_accuracy: f64,
    /// `fenced − baseline`.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// 0-based layer whose output was pooled.
    pub layer: usize,
    pub rows: Vec<ProbeRow>,
    pub n_train: usize,
    pub n_test: usize,
    /// Probe input widths: D for the baseline, D − D_F for the fenced model.
    pub baseline_dims: usize,
    pub fenced_dims: usize,
}

impl ProbeReport {
    pub fn fenced_rows(&self) -> impl Iterator<Item = &ProbeRow> {
        self.rows.iter().filter(|r| !r.control)
    }

    pub fn mean_fenced_delta(&self) -> f64 {
        let (sum, n) = self.fenced_rows().fold((0.0, 0usize), |(s, n), r| (s + r.delta, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn mean_control_delta(&self) -> Option<f64> {
        let deltas: Vec<f64> = self.rows.iter().filter(|r| r.control).map(|r| r.delta).collect();
        (!deltas.is_empty()).then(|| deltas.iter().sum::<f64>() / deltas.len() as f64)
    }

    /// Text table: feature, baseline, fenced, Δ in percentage points.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "layer {} | baseline {}d, fenced {}d | {} train / {} test",
            self.layer + 1,
            self.baseline_dims,
            self.fenced_dims,
            self.n_train,
            self.n_test
        );
        let _ = writeln!(out, "{:<22} {:>9} {:>9} {:>8}", "feature", "baseline", "fenced", "delta");
        let line = |out: &mut String, name: &str, b: f64, f: f64, d: f64| {
            let _ = writeln!(out, "{name:<22} {:>9.1} {:>9.1} {:>+8.1}", 100.0 * b, 100.0 * f, 100.0 * d);
        };
        for r in self.fenced_rows() {
            line(&mut out, &r.feature, r.baseline_accuracy, r.fenced_accuracy, r.delta);
        }
        let fenced: Vec<&ProbeRow> = self.fenced_rows().collect();
        if !fenced.is_empty() {
            let n = fenced.len() as f64;
            let b = fenced.iter().map(|r| r.baseline_accuracy).sum::<f64>() / n;
            let f = fenced.iter().map(|r| r.fenced_accuracy).sum::<f64>() / n;
            line(&mut out, "average", b, f, f - b);
        }
        for r in self.rows.iter().filter(|r| r.control) {
            line(&mut out, &format!("control ({})", r.feature), r.baseline_accuracy, r.fenced_accuracy, r.delta);
        }
        out
    }
}

/// Probes every labelled feature twice: on all D dims of the baseline model
/// and on the D − D_F unfenced dims of the fenced model, both pooled over
/// assistant tokens at `layer` (0-based).
#[allow(clippy::too_many_arguments)]
pub fn erosion_experiment(
    baseline: &Model,
    fenced: &Model,
    fence: &FenceConfig,
    examples: &[LabeledExample],
    vocab: &Vocab,
    layer: usize,
    probe: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    if baseline.config().hidden_dim != fenced.config().hidden_dim
        || baseline.config().n_layers != fenced.config().n_layers
        || baseline.config().vocab_size != fenced.config().vocab_size
    {
        return Err(Error::Config(format!(
            "baseline {:?} and fenced {:?} model configs differ",
            baseline.config(),
            fenced.config()
        )));
    }
    if fence.hidden_dim != fenced.config().hidden_dim {
        return Err(Error::Config("fence does not match the fenced model".into()));
    }
    let keep = fence.unfenced_dims();
    let mut base_x = Vec::with_capacity(examples.len());
    let mut fenced_x = Vec::with_capacity(examples.len());
    let mut used = Vec::with_capacity(examples.len());
    for ex in examples {
        let enc = vocab.encode(ex)?;
        if enc.mask.count() == 0 {
            continue;
        }
        let tb = baseline.forward(&enc.ids, None)?.trace;
        let tf = fenced.forward(&enc.ids, None)?.trace;
        base_x.push(pool_hidden(&tb, &enc.mask, layer)?);
        let pooled = pool_hidden(&tf, &enc.mask, layer)?;
        fenced_x.push(keep.iter().map(|&d| pooled[d]).collect::<Vec<f32>>());
        used.push(ex);
    }
    let mut rows = Vec::new();
    let mut split = (0, 0);
    for name in fence.all_feature_names() {
        let ys: Vec<bool> = used.iter().map(|ex| ex.is_active(name)).collect();
        let b = train_probe(&base_x, &ys, probe, seed)?;
        let f = train_probe(&fenced_x, &ys, probe, seed)?;
        split = (b.n_train, b.n_test);
        rows.push(ProbeRow {
            feature: name.to_string(),
            control: fence.feature_index(name).is_none(),
            baseline_accuracy: b.accuracy,
            fenced_accuracy: f.accuracy,
            delta: f.accuracy - b.accuracy,
        });
    }
    Ok(ProbeReport {
        layer,
        rows,
        n_train: split.0,
        n_test: split.1,
        baseline_dims: baseline.config().hidden_dim,
        fenced_dims: keep.len(),
    })
}
