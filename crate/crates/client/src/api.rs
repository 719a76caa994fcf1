// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Per-feature clamp state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clamp {
    #[default]
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    #[serde(default)]
    pub clamps: BTreeMap<String, Clamp>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    /// 0 is greedy.
    #[serde(default)]
    pub temperature: f32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub include_trace: bool,
}

fn default_max_tokens() -> usize {
    32
}

impl GenerateRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            clamps: BTreeMap::new(),
            max_tokens: default_max_tokens(),
            temperature: 0.0,
            seed: 0,
            include_trace: false,
        }
    }

    pub fn clamp(mut self, feature: &str, clamp: Clamp) -> Self {
        self.clamps.insert(feature.to_string(), clamp);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    /// Completion only, without the prompt or the end-of-turn token.
    pub text: String,
    /// Every token of the dialogue, prompt included.
    pub tokens: Vec<String>,
    /// Trace of `tokens` under the same clamps, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRequest {
    /// Read as plain text, with no dialogue markers added.
    pub text: String,
    #[serde(default)]
    pub clamps: BTreeMap<String, Clamp>,
}

/// One feature's block in the last axis of [`TraceResponse::values`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub feature: String,
    pub start: usize,
    pub end: usize,
    /// The block's range in the residual stream.
    pub hidden_start: usize,
    pub hidden_end: usize,
}

/// Fenced-region activations normalized by each layer's target.
///
/// `values[2·layer + site][token][dim]`, site 0 after attention and 1
/// after the MLP; `rows` labels the first axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResponse {
    pub tokens: Vec<String>,
    pub n_layers: usize,
    pub rows: Vec<String>,
    pub values: Vec<Vec<Vec<f32>>>,
    pub legend: Vec<LegendEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FenceInfo {
    pub features: Vec<FeatureRange>,
    pub control_features: Vec<String>,
    pub targets: Vec<f32>,
    pub threshold: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model: ModelSummary,
    pub fence: Option<FenceInfo>,
    /// Clampable features in fence order.
    pub features: Vec<String>,
}

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    /// Offending request field, when one can be named.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clamps_serialize_lowercase() {
        let req = GenerateRequest::new("tell me a story .").clamp("dogs", Clamp::On);
        let json = serde_json::to_string(&req).unwrap();
        assert!(json.contains(r#""clamps":{"dogs":"on"}"#), "{json}");
    }

    #[test]
    fn defaults_fill_missing_fields() {
        let req: GenerateRequest = serde_json::from_str(r#"{"prompt":"hi"}"#).unwrap();
        assert_eq!(req, GenerateRequest::new("hi"));
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = serde_json::from_str::<GenerateRequest>(r#"{"prompt":"hi","temp":1}"#).unwrap_err();
        assert!(err.to_string().contains("temp"));
    }
}
