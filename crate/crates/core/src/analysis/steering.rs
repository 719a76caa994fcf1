// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Lexicon, Vocab, EOT};
use crate::error::{Error, Result};
use crate::fence::{make_clamp_hook, ClampSpec, FenceConfig};
use crate::model::{LayerHook, Model, Sampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    /// Completions per condition.
    pub n_completions: usize,
    pub max_new: usize,
    /// Completion `i` samples with seed `sampler.seed + i`.
    pub sampler: Sampler,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            n_completions: 50,
            max_new: 32,
            sampler: Sampler {
                temperature: 0.8,
                top_k: 0,
                seed: 0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub feature: String,
    /// Fraction of completions with at least one of the feature's words
    /// when forced on.
    pub rate_on: f64,
    pub rate_off: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlShiftReport {
    pub n_completions: usize,
    pub rows: Vec<ShiftRow>,
}

impl ControlShiftReport {
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<14} {:>8} {:>8}   ({} completions per cell)\n",
            "feature", "on", "off", self.n_completions
        );
        for r in &self.rows {
            let _ = writeln!(out, "{:<14} {:>8.2} {:>8.2}", r.feature, r.rate_on, r.rate_off);
        }
        out
    }
}

/// Word rates under one clamp configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClampOutcome {
    pub spec: ClampSpec,
    pub prompts: Vec<String>,
    /// `(feature, rate)` for every lexicon feature, counting marker and
    /// associate words.
    pub rates: Vec<(String, f64)>,
    /// The same with marker words only.
    pub marker_rates: Vec<(String, f64)>,
    pub samples: Vec<String>,
}

impl ClampOutcome {
    pub fn rate(&self, feature: &str) -> f64 {
        lookup(&self.rates, feature)
    }

    pub fn marker_rate(&self, feature: &str) -> f64 {
        lookup(&self.marker_rates, feature)
    }
}

fn lookup(rates: &[(String, f64)], feature: &str) -> f64 {
    rates.iter().find(|(f, _)| f == feature).map_or(0.0, |(_, r)| *r)
}

/// Samples `n` completions of the dialogue `prompt`, cycling through
/// `prompts`, each truncated at `<eot>`.
pub fn sample_completions(
    model: &Model,
    vocab: &Vocab,
    prompts: &[String],
    hook: Option<&dyn LayerHook>,
    cfg: &SteeringConfig,
) -> Result<Vec<String>> {
    if prompts.is_empty() {
        return Err(Error::Config("no prompts given".into()));
    }
    (0..cfg.n_completions)
        .map(|i| {
            let ids = vocab.encode_prompt(&prompts[i % prompts.len()]);
            let sampler = Sampler {
                seed: cfg.sampler.seed.wrapping_add(i as u64),
                ..cfg.sampler
            };
            let out = model.generate(&ids, hook, &sampler, cfg.max_new, Some(EOT))?;
            let tail: Vec<usize> = out[ids.len()..].iter().copied().take_while(|&t| t != EOT).collect();
            Ok(vocab.detokenize(&tail))
        })
        .collect()
}

/// Fraction of samples containing at least one word of each feature, with
/// `markers_only` restricting the word list.
fn rates(lexicon: &Lexicon, samples: &[String], markers_only: bool) -> Vec<(String, f64)> {
    lexicon
        .features
        .iter()
        .map(|f| {
            let words: Vec<&str> = if markers_only {
                f.markers.iter().map(String::as_str).collect()
            } else {
                f.words().collect()
            };
            let hits = samples
                .iter()
                .filter(|s| s.split_whitespace().any(|w| words.contains(&w)))
                .count();
            (f.name.clone(), hits as f64 / samples.len().max(1) as f64)
        })
        .collect()
}

/// Rejects prompts containing any feature word.
pub fn check_neutral(lexicon: &Lexicon, prompts: &[String]) -> Result<()> {
    for p in prompts {
        if let Some((name, _)) = lexicon.hits(p).into_iter().find(|(_, (h, _))| *h > 0) {
            return Err(Error::Config(format!("prompt `{p}` is not neutral: mentions `{name}`")));
        }
    }
    Ok(())
}

/// Generates under `spec` and measures every feature's word rate.
pub fn clamp_outcome(
    model: &Model,
    fence: &FenceConfig,
    vocab: &Vocab,
    lexicon: &Lexicon,
    prompts: &[String],
    spec: &ClampSpec,
    cfg: &SteeringConfig,
) -> Result<ClampOutcome> {
    let hook = make_clamp_hook(spec, fence)?;
    let samples = sample_completions(model, vocab, prompts, Some(&hook), cfg)?;
    Ok(ClampOutcome {
        spec: spec.clone(),
        prompts: prompts.to_vec(),
        rates: rates(lexicon, &samples, false),
        marker_rates: rates(lexicon, &samples, true),
        samples,
    })
}

/// For each fenced feature, word rates under force-on and force-off from
/// feature-neutral prompts.
pub fn control_shift(
    model: &Model,
    fence: &FenceConfig,
    vocab: &Vocab,
    lexicon: &Lexicon,
    prompts: &[String],
    cfg: &SteeringConfig,
) -> Result<ControlShiftReport> {
    check_neutral(lexicon, prompts)?;
    let mut rows = Vec::new();
    for name in fence.feature_names() {
        if lexicon.feature(name).is_none() {
            return Err(Error::Config(format!("feature `{name}` has no lexicon entry")));
        }
        let on = clamp_outcome(model, fence, vocab, lexicon, prompts, &ClampSpec::default().force_on(name), cfg)?;
        let off = clamp_outcome(model, fence, vocab, lexicon, prompts, &ClampSpec::default().force_off(name), cfg)?;
        rows.push(ShiftRow {
            feature: name.to_string(),
            rate_on: on.rate(name),
            rate_off: off.rate(name),
        });
    }
    Ok(ControlShiftReport {
        n_completions: cfg.n_completions,
        rows,
    })
}
