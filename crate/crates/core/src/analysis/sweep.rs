// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::perplexity::perplexity;
use crate::corpus::{LabeledExample, Vocab};
use crate::error::{Error, Result};
use crate::fence::{calibrate_targets, FenceConfig, Normalization};
use crate::model::Model;
use crate::training::{encode_corpus, TrainSchedule, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub width: usize,
    pub perplexity: f64,
    /// Perplexity minus the width-0 perplexity.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn get(&self, width: usize) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.width == width)
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<12} {:>11} {:>8}\n", "fenced dims", "perplexity", "delta");
        for r in &self.rows {
            let delta = if r.width == 0 {
                "---".to_string()
            } else {
                format!("{:+.3}", r.delta)
            };
            let _ = writeln!(out, "{:<12} {:>11.3} {:>8}", r.width, r.perplexity, delta);
        }
        out
    }
}

/// Everything one sweep run needs besides its width.
pub struct SweepSetup<'a> {
    /// Starting point of every run.
    pub baseline: &'a Model,
    pub vocab: &'a Vocab,
    pub train: &'a [LabeledExample],
    /// Held-out text for perplexity; also supplies the fixed eval batch.
    pub heldout: &'a [LabeledExample],
    pub features: &'a [&'a str],
    pub control: &'a [&'a str],
    pub schedule: TrainSchedule,
    pub alpha: f32,
    pub normalization: Normalization,
    /// Sequences used to calibrate targets on the baseline.
    pub calibration: &'a [Vec<usize>],
    pub eval_batch: usize,
}

/// Fence layout for `width` dims spread over `features`; `None` for 0.
pub fn sweep_fence(setup: &SweepSetup<'_>, width: usize) -> Result<Option<FenceConfig>> {
    if width == 0 {
        return Ok(None);
    }
    let d = setup.baseline.config().hidden_dim;
    if 2 * width > d {
        return Err(Error::Config(format!("fence width {width} must be <= hidden_dim/2 = {}", d / 2)));
    }
    let mut f = FenceConfig::spread(d, setup.features, width, setup.control)?;
    f.alpha = setup.alpha;
    f.normalization = setup.normalization;
    f.validate_layout()?;
    f.targets = calibrate_targets(setup.baseline, setup.calibration, f.alpha)?;
    Ok(Some(f))
}

/// Trains one model for `width` and returns it with its fence.
pub fn train_width(setup: &SweepSetup<'_>, width: usize) -> Result<(Model, Option<FenceConfig>)> {
    let fence = sweep_fence(setup, width)?;
    let max_len = setup.baseline.config().max_context;
    let train = encode_corpus(setup.train, setup.vocab, fence.as_ref(), max_len)?;
    let eval_n = setup.eval_batch.min(setup.heldout.len());
    let eval = encode_corpus(&setup.heldout[..eval_n], setup.vocab, fence.as_ref(), max_len)?;
    let mut trainer = Trainer::new(
        setup.baseline.clone(),
        fence.clone(),
        setup.schedule.clone(),
        &train,
        &eval,
        setup.vocab.words().to_vec(),
    )?;
    trainer.run()?;
    let (model, _) = trainer.into_parts();
    Ok((model, fence))
}

/// Trains one model per width from the same baseline and schedule and
/// reports held-out perplexity. Widths must be strictly increasing and
/// include 0.
pub fn fence_width_sweep(setup: &SweepSetup<'_>, widths: &[usize]) -> Result<SweepReport> {
    if widths.first() != Some(&0) || widths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "sweep widths {widths:?} must start at 0 and increase strictly"
        )));
    }
    for &w in widths {
        // fail on bad widths before spending any training time
        if w > 0 && 2 * w > setup.baseline.config().hidden_dim {
            return Err(Error::Config(format!(
                "fence width {w} must be <= hidden_dim/2 = {}",
                setup.baseline.config().hidden_dim / 2
            )));
        }
    }
    let heldout: Vec<Vec<usize>> = setup
        .heldout
        .iter()
        .map(|ex| setup.vocab.encode(ex).map(|e| e.ids))
        .collect::<Result<_>>()?;
    let mut rows: Vec<SweepRow> = Vec::with_capacity(widths.len());
    for &w in widths {
        log::info!("sweep: training width {w}");
        let (model, _) = train_width(setup, w)?;
        let ppl = perplexity(&model, &heldout)?;
        let base = rows.first().map_or(ppl, |r| r.perplexity);
        rows.push(SweepRow {
            width: w,
            perplexity: ppl,
            delta: ppl - base,
        });
    }
    Ok(SweepReport { rows })
}
