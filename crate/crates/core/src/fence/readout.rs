// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{AssistantMask, FenceConfig};
use crate::error::{Error, Result};
use crate::model::{HiddenTrace, Site};

/// Per fenced feature: mean of the layer output over masked tokens and the
/// feature's dims, in units of h̄[layer]. `layer` is 0-based.
pub fn fence_readout(trace: &HiddenTrace, cfg: &FenceConfig, layer: usize, mask: &AssistantMask) -> Result<Vec<f32>> {
    cfg.require_calibrated(trace.n_layers())?;
    if layer >= trace.n_layers() {
        return Err(Error::Readout(format!(
            "layer {layer} out of range for {} layers",
            trace.n_layers()
        )));
    }
    if mask.len() != trace.n_tokens() {
        return Err(Error::Readout(format!(
            "mask covers {} tokens, trace has {}",
            mask.len(),
            trace.n_tokens()
        )));
    }
    let n = mask.count();
    if n == 0 {
        return Err(Error::Readout("readout mask selects no tokens".into()));
    }
    let h = trace.get(layer, Site::PostMlp);
    let target = f64::from(cfg.target(layer));
    Ok(cfg
        .features
        .iter()
        .map(|f| {
            let mut sum = 0.0f64;
            for (row, _) in mask.0.iter().enumerate().filter(|(_, m)| **m) {
                sum += h.row(row)[f.dims()].iter().map(|&v| f64::from(v)).sum::<f64>();
            }
            (sum / (n * f.width()) as f64 / target) as f32
        })
        .collect())
}

/// Active iff score ≥ threshold.
pub fn classify(scores: &[f32], threshold: f32) -> Vec<bool> {
    scores.iter().map(|&s| s >= threshold).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fence::TokenMask;
    use crate::model::LayerStates;
    use crate::tensor::Tensor;

    fn trace_with(value: f32) -> HiddenTrace {
        HiddenTrace {
            layers: vec![LayerStates {
                post_attention: Tensor::zeros(&[3, 8]),
                post_mlp: Tensor::full(&[3, 8], value),
            }],
        }
    }

    fn cfg() -> FenceConfig {
        let mut cfg = FenceConfig::top_aligned(8, &[("a", 2), ("b", 1)], &[]).unwrap();
        cfg.targets = vec![2.0];
        cfg
    }

    #[test]
    fn scores_and_threshold() {
        let cfg = cfg();
        let mask = TokenMask(vec![false, true, true]);
        assert_eq!(fence_readout(&trace_with(2.0), &cfg, 0, &mask).unwrap(), vec![1.0, 1.0]);
        assert_eq!(fence_readout(&trace_with(0.0), &cfg, 0, &mask).unwrap(), vec![0.0, 0.0]);
        let half = fence_readout(&trace_with(1.0), &cfg, 0, &mask).unwrap();
        assert_eq!(half, vec![0.5, 0.5]);
        assert_eq!(classify(&half, 0.5), vec![true, true]);
        assert_eq!(classify(&[0.49], 0.5), vec![false]);
    }

    #[test]
    fn empty_mask_and_bad_layer() {
        let cfg = cfg();
        let t = trace_with(1.0);
        assert!(matches!(
            fence_readout(&t, &cfg, 0, &TokenMask(vec![false; 3])),
            Err(Error::Readout(_))
        ));
        assert!(fence_readout(&t, &cfg, 1, &TokenMask::all(3)).is_err());
    }
}
