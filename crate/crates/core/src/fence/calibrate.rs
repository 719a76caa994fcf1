// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Error, Result};
use crate::model::{HiddenTrace, Model, Site};

/// Lower bound on any calibrated target.
pub const TARGET_FLOOR: f32 = 1e-3;

/// Anything that can produce a hidden-state trace for a token sequence.
pub trait TraceSource {
    fn n_layers(&self) -> usize;
    fn trace(&self, tokens: &[usize]) -> Result<HiddenTrace>;
}

impl TraceSource for Model {
    fn n_layers(&self) -> usize {
        self.config().n_layers
    }

    fn trace(&self, tokens: &[usize]) -> Result<HiddenTrace> {
        Ok(self.forward(tokens, None)?.trace)
    }
}

/// Per-layer targets: `alpha` times the RMS of every residual entry over
/// the batch, averaged across the two streams and floored at
/// [`TARGET_FLOOR`].
pub fn calibrate_targets<S: TraceSource + ?Sized>(
    source: &S,
    batch: &[Vec<usize>],
    alpha: f32,
) -> Result<Vec<f32>> {
    if batch.is_empty() || batch.iter().all(Vec::is_empty) {
        return Err(Error::Calibration("calibration batch is empty".into()));
    }
    if batch.len() < 64 {
        log::warn!("calibrating on only {} sequences", batch.len());
    }
    let k = source.n_layers();
    // [layer][site] sum of squares and entry counts
    let mut sq = vec![[0.0f64; 2]; k];
    let mut count = vec![[0usize; 2]; k];
    for seq in batch.iter().filter(|s| !s.is_empty()) {
        let trace = source.trace(seq)?;
        if trace.n_layers() != k {
            return Err(Error::Calibration(format!(
                "trace has {} layers, expected {k}",
                trace.n_layers()
            )));
        }
        for (layer, (sq, count)) in sq.iter_mut().zip(count.iter_mut()).enumerate() {
            for site in Site::ALL {
                let t = trace.get(layer, site);
                sq[site.index()] += t.data().iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>();
                count[site.index()] += t.len();
            }
        }
    }
    Ok(sq
        .iter()
        .zip(&count)
        .map(|(s, c)| {
            let rms_r = (s[0] / c[0] as f64).sqrt();
            let rms_h = (s[1] / c[1] as f64).sqrt();
            let t = f64::from(alpha) * (rms_r + rms_h) / 2.0;
            (t as f32).max(TARGET_FLOOR)
        })
        .collect())
}
