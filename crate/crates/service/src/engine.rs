// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use fencebench_client::{
    Clamp, FeatureRange, FenceInfo, GenerateRequest, GenerateResponse, LegendEntry, ModelInfo, ModelSummary,
    TraceRequest, TraceResponse,
};
use fencebench_core::analysis::{trace_grid, TraceGrid};
use fencebench_core::checkpoint;
use fencebench_core::corpus::{normalize_text, Vocab, EOT};
use fencebench_core::fence::{make_clamp_hook, ClampSpec, FenceConfig, FenceHook};
use fencebench_core::model::{LayerHook, Model, Sampler};

/// Longest completion a request may ask for.
pub const MAX_TOKENS_LIMIT: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    /// The request is well-formed JSON but names something invalid.
    #[error("{message}")]
    BadRequest { field: Option<String>, message: String },
    /// The request cannot fit the model's context window.
    #[error("{0}")]
    Overflow(String),
    #[error(transparent)]
    Core(#[from] fencebench_core::Error),
}

fn bad(field: &str, message: String) -> EngineError {
    EngineError::BadRequest {
        field: Some(field.to_string()),
        message,
    }
}

/// One loaded checkpoint. All methods are synchronous and CPU-bound.
#[derive(Debug)]
pub struct Engine {
    model: Model,
    fence: Option<FenceConfig>,
    vocab: Vocab,
}

impl Engine {
    pub fn new(model: Model, fence: Option<FenceConfig>, vocab: Vocab) -> Result<Self, EngineError> {
        if vocab.len() != model.config().vocab_size {
            return Err(fencebench_core::Error::Config(format!(
                "vocabulary of {} words for a model with vocab_size {}",
                vocab.len(),
                model.config().vocab_size
            ))
            .into());
        }
        Ok(Self { model, fence, vocab })
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self, EngineError> {
        let ckpt = checkpoint::load(path)?;
        let vocab = Vocab::from_words(ckpt.header.vocab)?;
        Self::new(ckpt.model, ckpt.header.fence, vocab)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn fence(&self) -> Option<&FenceConfig> {
        self.fence.as_ref()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn info(&self) -> ModelInfo {
        let c = self.model.config();
        ModelInfo {
            model: ModelSummary {
                n_layers: c.n_layers,
                hidden_dim: c.hidden_dim,
                n_heads: c.n_heads,
                vocab_size: c.vocab_size,
                max_context: c.max_context,
                parameters: self.model.param_count(),
            },
            fence: self.fence.as_ref().map(|f| FenceInfo {
                features: f
                    .features
                    .iter()
                    .map(|x| FeatureRange {
                        name: x.name.clone(),
                        start: x.start,
                        end: x.end,
                    })
                    .collect(),
                control_features: f.control_features.clone(),
                targets: f.targets.clone(),
                threshold: f.threshold,
            }),
            features: self
                .fence
                .as_ref()
                .map(|f| f.feature_names().iter().map(|s| s.to_string()).collect())
                .unwrap_or_default(),
        }
    }

    /// Clamp hook for `clamps`; `None` when every entry is auto.
    fn hook(&self, clamps: &std::collections::BTreeMap<String, Clamp>) -> Result<Option<FenceHook>, EngineError> {
        if clamps.values().all(|c| *c == Clamp::Auto) {
            return Ok(None);
        }
        let fence = self
            .fence
            .as_ref()
            .ok_or_else(|| bad("clamps", "checkpoint has no fence to clamp".into()))?;
        let mut spec = ClampSpec::default();
        for (name, c) in clamps {
            if fence.feature_index(name).is_none() {
                return Err(bad(
                    &format!("clamps.{name}"),
                    format!("`{name}` is not a fenced feature; expected one of {:?}", fence.feature_names()),
                ));
            }
            spec = match c {
                Clamp::Auto => spec,
                Clamp::On => spec.force_on(name),
                Clamp::Off => spec.force_off(name),
            };
        }
        Ok(Some(make_clamp_hook(&spec, fence)?))
    }

    fn tokenize(&self, text: &str, field: &str) -> Result<Vec<usize>, EngineError> {
        let ids = self.vocab.tokenize(&normalize_text(text));
        if ids.is_empty() {
            return Err(bad(field, format!("`{field}` is empty")));
        }
        Ok(ids)
    }

    pub fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, EngineError> {
        if !(req.temperature >= 0.0 && req.temperature.is_finite()) {
            return Err(bad("temperature", format!("temperature {} must be finite and >= 0", req.temperature)));
        }
        if req.max_tokens > MAX_TOKENS_LIMIT {
            return Err(bad("max_tokens", format!("max_tokens {} exceeds {MAX_TOKENS_LIMIT}", req.max_tokens)));
        }
        let user = self.tokenize(&req.prompt, "prompt")?;
        let prompt = {
            let mut p = self.vocab.encode_prompt("");
            p.splice(1..1, user);
            p
        };
        let max = self.model.config().max_context;
        if prompt.len() + req.max_tokens > max {
            return Err(EngineError::Overflow(format!(
                "prompt of {} tokens plus max_tokens {} exceeds the context window of {max}",
                prompt.len(),
                req.max_tokens
            )));
        }
        let hook = self.hook(&req.clamps)?;
        let sampler = Sampler {
            temperature: req.temperature,
            top_k: 0,
            seed: req.seed,
        };
        let ids = self.model.generate(
            &prompt,
            hook.as_ref().map(|h| h as &dyn LayerHook),
            &sampler,
            req.max_tokens,
            Some(EOT),
        )?;
        let completion: Vec<usize> = ids[prompt.len()..].iter().copied().take_while(|&t| t != EOT).collect();
        let trace = if req.include_trace {
            Some(self.trace_ids(&ids, hook.as_ref())?)
        } else {
            None
        };
        Ok(GenerateResponse {
            text: self.vocab.detokenize(&completion),
            tokens: ids.iter().map(|&i| self.vocab.word(i).to_string()).collect(),
            trace,
        })
    }

    pub fn trace(&self, req: &TraceRequest) -> Result<TraceResponse, EngineError> {
        let ids = self.tokenize(&req.text, "text")?;
        let max = self.model.config().max_context;
        if ids.len() > max {
            return Err(EngineError::Overflow(format!(
                "text of {} tokens exceeds the context window of {max}",
                ids.len()
            )));
        }
        let hook = self.hook(&req.clamps)?;
        self.trace_ids(&ids, hook.as_ref())
    }

    fn trace_ids(&self, ids: &[usize], hook: Option<&FenceHook>) -> Result<TraceResponse, EngineError> {
        let fence = self
            .fence
            .as_ref()
            .ok_or_else(|| bad("include_trace", "checkpoint has no fence to trace".into()))?;
        let out = self.model.forward(ids, hook.map(|h| h as &dyn LayerHook))?;
        let tokens = ids.iter().map(|&i| self.vocab.word(i).to_string()).collect();
        Ok(to_response(trace_grid(&out.trace, fence, tokens)?))
    }
}

fn to_response(g: TraceGrid) -> TraceResponse {
    TraceResponse {
        tokens: g.tokens,
        n_layers: g.n_layers,
        rows: g.rows,
        values: g.values,
        legend: g
            .legend
            .into_iter()
            .map(|e| LegendEntry {
                feature: e.feature,
                start: e.start,
                end: e.end,
                hidden_start: e.hidden_start,
                hidden_end: e.hidden_end,
            })
            .collect(),
    }
}
