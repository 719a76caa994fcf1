// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{FenceConfig, LabelVector};
use crate::error::{Error, Result};
use crate::model::{LayerHook, Site};
use crate::tensor::Var;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    #[default]
    Auto,
    ForceOn,
    ForceOff,
}

/// Per-feature clamp modes; unlisted features stay on `auto`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClampSpec {
    #[serde(default)]
    pub modes: BTreeMap<String, ClampMode>,
    /// Raw value written instead of h̄[k] when a feature is forced on.
    #[serde(default)]
    pub overrides: BTreeMap<String, f32>,
}

impl ClampSpec {
    pub fn force_on(mut self, feature: &str) -> Self {
        self.modes.insert(feature.to_string(), ClampMode::ForceOn);
        self
    }

    pub fn force_off(mut self, feature: &str) -> Self {
        self.modes.insert(feature.to_string(), ClampMode::ForceOff);
        self
    }

    pub fn with_override(mut self, feature: &str, value: f32) -> Self {
        self.overrides.insert(feature.to_string(), value);
        self
    }

    pub fn is_all_auto(&self) -> bool {
        self.modes.values().all(|m| *m == ClampMode::Auto)
    }
}

/// Overwrites fixed columns with per-layer constants at both sites.
#[derive(Debug, Clone, PartialEq)]
pub struct FenceHook {
    columns: Vec<Vec<(usize, f32)>>,
}

impl FenceHook {
    /// Column assignments for `layer`.
    pub fn columns(&self, layer: usize) -> &[(usize, f32)] {
        &self.columns[layer]
    }
}

impl LayerHook for FenceHook {
    fn apply<'t>(&self, layer: usize, _site: Site, state: Var<'t>) -> Result<Var<'t>> {
        let cols = self.columns.get(layer).ok_or_else(|| {
            Error::Config(format!(
                "fence hook covers {} layers, got layer {layer}",
                self.columns.len()
            ))
        })?;
        if cols.is_empty() {
            return Ok(state);
        }
        state.overwrite_columns(cols)
    }
}

fn targets(cfg: &FenceConfig) -> Result<&[f32]> {
    if !cfg.is_calibrated() {
        return Err(Error::Config("fence targets are not calibrated".into()));
    }
    Ok(&cfg.targets)
}

/// Stage-1 hook writing h̄[k] on active features' dims and 0 elsewhere in
/// the fence.
pub fn make_injection_hook(labels: &LabelVector, cfg: &FenceConfig) -> Result<FenceHook> {
    labels.check(cfg)?;
    let columns = targets(cfg)?
        .iter()
        .map(|&t| {
            cfg.features
                .iter()
                .enumerate()
                .flat_map(|(i, f)| {
                    let v = if labels.is_active(i) { t } else { 0.0 };
                    f.dims().map(move |d| (d, v))
                })
                .collect()
        })
        .collect();
    Ok(FenceHook { columns })
}

/// Inference hook forcing features on or off; `auto` features are left
/// untouched.
pub fn make_clamp_hook(spec: &ClampSpec, cfg: &FenceConfig) -> Result<FenceHook> {
    for name in spec.modes.keys().chain(spec.overrides.keys()) {
        if cfg.feature_index(name).is_none() {
            return Err(Error::Config(format!("clamp references unknown fenced feature `{name}`")));
        }
    }
    let columns = targets(cfg)?
        .iter()
        .map(|&t| {
            let mut cols = Vec::new();
            for f in &cfg.features {
                let v = match spec.modes.get(&f.name).copied().unwrap_or_default() {
                    ClampMode::Auto => continue,
                    ClampMode::ForceOn => spec.overrides.get(&f.name).copied().unwrap_or(t),
                    ClampMode::ForceOff => 0.0,
                };
                cols.extend(f.dims().map(|d| (d, v)));
            }
            cols
        })
        .collect();
    Ok(FenceHook { columns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn cfg() -> FenceConfig {
        let mut cfg = FenceConfig::top_aligned(8, &[("a", 2), ("b", 1)], &["c"]).unwrap();
        cfg.targets = vec![1.5, 3.0];
        cfg
    }

    #[test]
    fn injection_writes_targets() {
        let cfg = cfg();
        let hook = make_injection_hook(&LabelVector(vec![true, false, true]), &cfg).unwrap();
        assert_eq!(hook.columns(1), &[(5, 3.0), (6, 3.0), (7, 0.0)]);
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 8], 9.0));
        let y = hook.apply(0, Site::PostMlp, x).unwrap();
        assert_eq!(y.value().row(1), &[9.0, 9.0, 9.0, 9.0, 9.0, 1.5, 1.5, 0.0]);
    }

    #[test]
    fn clamp_modes() {
        let cfg = cfg();
        let spec = ClampSpec::default().force_off("a").force_on("b").with_override("b", 7.0);
        let hook = make_clamp_hook(&spec, &cfg).unwrap();
        assert_eq!(hook.columns(0), &[(5, 0.0), (6, 0.0), (7, 7.0)]);
        let auto = make_clamp_hook(&ClampSpec::default(), &cfg).unwrap();
        assert!(auto.columns(0).is_empty());
    }

    #[test]
    fn clamp_rejects_unknown_and_control() {
        let cfg = cfg();
        assert!(make_clamp_hook(&ClampSpec::default().force_on("zebra"), &cfg).is_err());
        assert!(make_clamp_hook(&ClampSpec::default().force_on("c"), &cfg).is_err());
    }

    #[test]
    fn uncalibrated_rejected() {
        let mut cfg = cfg();
        cfg.targets.clear();
        assert!(make_clamp_hook(&ClampSpec::default(), &cfg).is_err());
    }
}
