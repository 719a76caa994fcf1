// SPDX-License-Identifier: MIT OR Apache-2.0

//! Feature-labelled training text.
//!
//! The procedural generator assembles dialogue and prose from a
//! [`Lexicon`]: every active feature contributes a templated sentence
//! filled with its marker or associate words, inactive features contribute
//! nothing, and neutral sentences pad the rest. Labels therefore hold by
//! construction. [`llm`] offers an optional network-backed generator whose
//! output is screened against the same lexicon.

mod generate;
mod lexicon;
pub mod llm;
mod tokenizer;

pub use generate::{generate_corpus, CorpusConfig};
pub use lexicon::{FeatureLexicon, Lexicon, SLOT};
pub use tokenizer::{
    assistant_mask, normalize_text, Encoded, Vocab, ASSISTANT, EOT, PAD, SPECIALS, UNK, USER,
};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fence::{FenceConfig, LabelVector};

/// How the user turn relates to the labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// No user turn.
    #[default]
    Prose,
    /// User turn mentions nothing feature-related.
    Neutral,
    /// User turn names exactly the active features.
    Topic,
    /// User turn names features other than the active ones.
    Redirect,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    /// `None` for unstructured prose.
    pub user: Option<String>,
    pub assistant: String,
    #[serde(with = "flag_map")]
    pub labels: BTreeMap<String, bool>,
    pub style: String,
    pub implicit: bool,
    #[serde(default)]
    pub prompt: PromptKind,
}

impl LabeledExample {
    pub fn is_prose(&self) -> bool {
        self.user.is_none()
    }

    pub fn active(&self) -> BTreeSet<String> {
        self.labels.iter().filter(|(_, on)| **on).map(|(n, _)| n.clone()).collect()
    }

    pub fn is_active(&self, feature: &str) -> bool {
        self.labels.get(feature).copied().unwrap_or(false)
    }

    /// Labels in fence order (fenced features, then controls).
    pub fn label_vector(&self, cfg: &FenceConfig) -> Result<LabelVector> {
        cfg.all_feature_names()
            .iter()
            .map(|name| {
                self.labels.get(*name).copied().ok_or_else(|| {
                    Error::Config(format!("example carries no label for feature `{name}`"))
                })
            })
            .collect::<Result<Vec<bool>>>()
            .map(LabelVector)
    }
}

/// Serializes labels as `{name: 0|1}`.
mod flag_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<String, bool>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, v)| (k, u8::from(*v))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, bool>, D::Error> {
        let raw = BTreeMap::<String, u8>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| match v {
                0 => Ok((k, false)),
                1 => Ok((k, true)),
                other => Err(serde::de::Error::custom(format!("label `{k}` is {other}, expected 0 or 1"))),
            })
            .collect()
    }
}

pub fn save_jsonl(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<LabeledExample>> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}
