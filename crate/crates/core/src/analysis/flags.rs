// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledExample, PromptKind, Vocab};
use crate::error::Result;
use crate::fence::{classify, fence_readout, FenceConfig, TokenMask};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlagReport {
    /// 0-based layer read out.
    pub layer: usize,
    /// Accuracy of the assistant-token readout per fenced feature.
    pub per_feature: Vec<(String, f64)>,
    pub n_examples: usize,
    /// Fraction of topic-prompt dialogues whose last user token already
    /// classifies every fenced feature correctly.
    pub user_token_accuracy: f64,
    pub n_user_examples: usize,
}

impl FlagReport {
    pub fn min_accuracy(&self) -> f64 {
        self.per_feature.iter().map(|(_, a)| *a).fold(f64::INFINITY, f64::min)
    }
}

/// Classifies held-out examples from the fence readout at `layer`, with no
/// intervention.
pub fn flag_accuracy(
    model: &Model,
    fence: &FenceConfig,
    examples: &[LabeledExample],
    vocab: &Vocab,
    layer: usize,
) -> Result<FlagReport> {
    let n_f = fence.n_fenced();
    let mut correct = vec![0usize; n_f];
    let mut n = 0usize;
    let mut user_ok = 0usize;
    let mut n_user = 0usize;
    for ex in examples {
        let enc = vocab.encode(ex)?;
        if enc.mask.count() == 0 {
            continue;
        }
        let labels = ex.label_vector(fence)?;
        let trace = model.forward(&enc.ids, None)?.trace;
        let pred = classify(&fence_readout(&trace, fence, layer, &enc.mask)?, fence.threshold);
        for (i, c) in correct.iter_mut().enumerate() {
            if pred[i] == labels.is_active(i) {
                *c += 1;
            }
        }
        n += 1;
        if ex.prompt == PromptKind::Topic && enc.user_len >= 2 {
            let mut m = vec![false; enc.ids.len()];
            m[enc.user_len - 1] = true;
            let up = classify(&fence_readout(&trace, fence, layer, &TokenMask(m))?, fence.threshold);
            if (0..n_f).all(|i| up[i] == labels.is_active(i)) {
                user_ok += 1;
            }
            n_user += 1;
        }
    }
    let denom = n.max(1) as f64;
    Ok(FlagReport {
        layer,
        per_feature: fence
            .feature_names()
            .iter()
            .zip(&correct)
            .map(|(name, &c)| (name.to_string(), c as f64 / denom))
            .collect(),
        n_examples: n,
        user_token_accuracy: user_ok as f64 / n_user.max(1) as f64,
        n_user_examples: n_user,
    })
}
