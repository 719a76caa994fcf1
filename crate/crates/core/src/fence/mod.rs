// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature fences: designated residual dimensions that carry per-feature
//! on/off flags.
//!
//! This module owns the fence layout, per-layer target calibration, the
//! position loss, the training-time injection hook, the inference-time
//! clamp hook, and flag readout.

mod calibrate;
mod hooks;
mod loss;
mod readout;

pub use calibrate::{calibrate_targets, TraceSource, TARGET_FLOOR};
pub use hooks::{make_clamp_hook, make_injection_hook, ClampMode, ClampSpec, FenceHook};
pub use loss::{position_loss, position_loss_value, Normalization, PositionLoss, PositionLossValue};
pub use readout::{classify, fence_readout};

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature names and widths of the default desk layout, in fence order.
pub const DEFAULT_FEATURES: [(&str, usize); 5] =
    [("dogs", 2), ("cats", 2), ("animals", 2), ("food", 1), ("programming", 1)];

/// Labelled but unfenced feature always carried alongside the fence.
pub const DEFAULT_CONTROL: &str = "finance";

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// One fenced feature and its contiguous dimension range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FencedFeature {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

impl FencedFeature {
    pub fn dims(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FenceConfig {
    pub hidden_dim: usize,
    pub features: Vec<FencedFeature>,
    /// Unfenced features that are still labelled (probe controls).
    #[serde(default)]
    pub control_features: Vec<String>,
    /// Per-layer active target h̄[k]; empty until calibrated.
    #[serde(default)]
    pub targets: Vec<f32>,
    #[serde(default = "default_alpha")]
    pub alpha: f32,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
    #[serde(default)]
    pub normalization: Normalization,
}

fn default_alpha() -> f32 {
    1.0
}

fn default_threshold() -> f32 {
    DEFAULT_THRESHOLD
}

impl FenceConfig {
    /// Packs features with the given widths against the top of the hidden
    /// dimension range, in order.
    pub fn top_aligned(hidden_dim: usize, widths: &[(&str, usize)], control: &[&str]) -> Result<Self> {
        let total: usize = widths.iter().map(|(_, w)| w).sum();
        if total > hidden_dim {
            return Err(Error::Config(format!(
                "fence width {total} exceeds hidden_dim {hidden_dim}"
            )));
        }
        let mut start = hidden_dim - total;
        let mut features = Vec::with_capacity(widths.len());
        for (name, w) in widths {
            features.push(FencedFeature {
                name: (*name).to_string(),
                start,
                end: start + w,
            });
            start += w;
        }
        Ok(Self {
            hidden_dim,
            features,
            control_features: control.iter().map(|s| s.to_string()).collect(),
            targets: Vec::new(),
            alpha: 1.0,
            threshold: DEFAULT_THRESHOLD,
            normalization: Normalization::default(),
        })
    }

    /// The default five-feature, eight-dimension layout plus the finance
    /// control.
    pub fn desk_default(hidden_dim: usize) -> Result<Self> {
        let cfg = Self::top_aligned(hidden_dim, &DEFAULT_FEATURES, &[DEFAULT_CONTROL])?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Spreads `total_width` dims over `names` as evenly as possible, extra
    /// dims going to the earliest features.
    pub fn spread(hidden_dim: usize, names: &[&str], total_width: usize, control: &[&str]) -> Result<Self> {
        if names.is_empty() || total_width < names.len() {
            return Err(Error::Config(format!(
                "cannot spread {total_width} dims over {} features",
                names.len()
            )));
        }
        let base = total_width / names.len();
        let extra = total_width % names.len();
        let widths: Vec<(&str, usize)> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (*n, base + usize::from(i < extra)))
            .collect();
        Self::top_aligned(hidden_dim, &widths, control)
    }

    /// Total fenced width D_F.
    pub fn fenced_width(&self) -> usize {
        self.features.iter().map(FencedFeature::width).sum()
    }

    pub fn n_fenced(&self) -> usize {
        self.features.len()
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    /// Fenced features followed by control features: the label order.
    pub fn all_feature_names(&self) -> Vec<&str> {
        self.features
            .iter()
            .map(|f| f.name.as_str())
            .chain(self.control_features.iter().map(String::as_str))
            .collect()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Every fenced dimension, ascending.
    pub fn fenced_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.features.iter().flat_map(FencedFeature::dims).collect();
        dims.sort_unstable();
        dims
    }

    /// Dimensions outside every fence, ascending.
    pub fn unfenced_dims(&self) -> Vec<usize> {
        let fenced = self.fenced_dims();
        (0..self.hidden_dim).filter(|d| fenced.binary_search(d).is_err()).collect()
    }

    pub fn is_calibrated(&self) -> bool {
        !self.targets.is_empty()
    }

    pub fn target(&self, layer: usize) -> f32 {
        self.targets[layer]
    }

    /// Full invariant check, including D_F < D/4.
    pub fn validate(&self) -> Result<()> {
        self.validate_layout()?;
        if 4 * self.fenced_width() >= self.hidden_dim {
            return Err(Error::Config(format!(
                "fenced width {} must be < hidden_dim/4 = {}",
                self.fenced_width(),
                self.hidden_dim as f32 / 4.0
            )));
        }
        Ok(())
    }

    /// Layout invariants without the D/4 budget; wide fences for the cost
    /// sweep are checked with this plus their own D/2 bound.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    pub fn validate_layout(&self) -> Result<()> {
        if self.features.is_empty() {
            return Err(Error::Config("fence has no features".into()));
        }
        let mut ranges: Vec<&FencedFeature> = self.features.iter().collect();
        ranges.sort_by_key(|f| f.start);
        for f in &ranges {
            if f.start >= f.end || f.end > self.hidden_dim {
                return Err(Error::Config(format!(
                    "feature `{}` has invalid range {}..{} for hidden_dim {}",
                    f.name, f.start, f.end, self.hidden_dim
                )));
            }
        }
        for pair in ranges.windows(2) {
            if pair[0].end > pair[1].start {
                return Err(Error::Config(format!(
                    "features `{}` and `{}` overlap",
                    pair[0].name, pair[1].name
                )));
            }
        }
        let mut names: Vec<&str> = self.all_feature_names();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate feature name".into()));
        }
        if let Some(t) = self.targets.iter().find(|t| !(**t > 0.0)) {
            return Err(Error::Config(format!("target {t} is not positive")));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} is not positive", self.alpha)));
        }
        Ok(())
    }

    pub(crate) fn require_calibrated(&self, n_layers: usize) -> Result<()> {
        if self.targets.len() != n_layers {
            return Err(Error::Config(format!(
                "fence has {} targets but the trace has {n_layers} layers (calibrate first)",
                self.targets.len()
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate_layout()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Per-feature activity indicators, fenced features first, then controls.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector(pub Vec<bool>);

impl LabelVector {
    pub fn from_active(cfg: &FenceConfig, active: &[&str]) -> Result<Self> {
        let names = cfg.all_feature_names();
        if let Some(bad) = active.iter().find(|a| !names.contains(a)) {
            return Err(Error::Config(format!("unknown feature `{bad}`")));
        }
        Ok(Self(names.iter().map(|n| active.contains(n)).collect()))
    }

    pub fn is_active(&self, index: usize) -> bool {
        self.0[index]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn check(&self, cfg: &FenceConfig) -> Result<()> {
        let want = cfg.features.len() + cfg.control_features.len();
        if self.0.len() != want {
            return Err(Error::Config(format!(
                "label vector has {} entries, fence expects {want}",
                self.0.len()
            )));
        }
        Ok(())
    }
}

/// Per-token 0/1 flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask(pub Vec<bool>);

/// Marks unmasked assistant tokens.
pub type AssistantMask = TokenMask;

impl TokenMask {
    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_layout() {
        let cfg = FenceConfig::desk_default(128).unwrap();
        assert_eq!(cfg.fenced_width(), 8);
        assert_eq!(cfg.features[0].dims(), 120..122);
        assert_eq!(cfg.features[4].dims(), 127..128);
        assert_eq!(cfg.unfenced_dims().len(), 120);
        assert_eq!(cfg.all_feature_names(), vec!["dogs", "cats", "animals", "food", "programming", "finance"]);
    }

    #[test]
    fn spread_matches_default_at_eight() {
        let names: Vec<&str> = DEFAULT_FEATURES.iter().map(|(n, _)| *n).collect();
        let spread = FenceConfig::spread(128, &names, 8, &[DEFAULT_CONTROL]).unwrap();
        assert_eq!(spread, FenceConfig::desk_default(128).unwrap());
        let wide = FenceConfig::spread(128, &names, 64, &[]).unwrap();
        let widths: Vec<usize> = wide.features.iter().map(FencedFeature::width).collect();
        assert_eq!(widths, vec![13, 13, 13, 13, 12]);
        assert!(wide.validate().is_err());
        assert!(wide.validate_layout().is_ok());
    }

    #[test]
    fn overlap_and_budget_rejected() {
        let mut cfg = FenceConfig::desk_default(128).unwrap();
        cfg.features[1].start = 121;
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("overlap")));
        let cfg = FenceConfig::top_aligned(32, &[("a", 4), ("b", 4)], &[]).unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = FenceConfig::desk_default(128).unwrap();
        cfg.targets = vec![1.0, 0.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn labels_follow_feature_order() {
        let cfg = FenceConfig::desk_default(128).unwrap();
        let l = LabelVector::from_active(&cfg, &["animals", "finance"]).unwrap();
        assert_eq!(l.0, vec![false, false, true, false, false, true]);
        assert!(LabelVector::from_active(&cfg, &["horses"]).is_err());
    }
}
