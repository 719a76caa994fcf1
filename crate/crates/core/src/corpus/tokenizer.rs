// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;
use std::path::Path;

use super::LabeledExample;
use crate::error::{Error, Result};
use crate::fence::{AssistantMask, TokenMask};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const USER: usize = 2;
pub const ASSISTANT: usize = 3;
pub const EOT: usize = 4;

/// Special tokens in id order.
pub const SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<user>", "<assistant>", "<eot>"];

/// Lowercases and splits punctuation into separate words.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    for c in text.chars() {
        if c.is_alphanumeric() || c == '\'' {
            out.extend(c.to_lowercase());
        } else if c.is_whitespace() {
            out.push(' ');
        } else {
            out.push(' ');
            out.push(c);
            out.push(' ');
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Word-level vocabulary with fixed special ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

/// Token ids of one example with its assistant mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: AssistantMask,
    /// Number of leading user-turn tokens, `<user>` included; 0 for prose.
    pub user_len: usize,
}

impl Vocab {
    /// Specials first, then words by descending frequency, ties broken
    /// alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for w in t.split_whitespace() {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> =
            counts.into_iter().filter(|(w, _)| !SPECIALS.contains(w)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_words(words).expect("specials placed first")
    }

    pub fn from_corpus(examples: &[LabeledExample]) -> Self {
        Self::build(
            examples
                .iter()
                .flat_map(|e| e.user.as_deref().into_iter().chain(std::iter::once(e.assistant.as_str()))),
        )
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..SPECIALS.len()].iter().zip(SPECIALS).any(|(w, s)| w != s) {
            return Err(Error::Format(format!(
                "vocabulary must start with {}",
                SPECIALS.join(" ")
            )));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary entry {i}: {w:?}")));
            }
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_words(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.words.join("\n");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or("<unk>", String::as_str)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.word(i)).collect::<Vec<_>>().join(" ")
    }

    /// `<user> U <assistant> A <eot>` for dialogue, `A <eot>` for prose.
    pub fn encode(&self, ex: &LabeledExample) -> Result<Encoded> {
        let mut ids = Vec::new();
        let dialogue = ex.user.is_some();
        if let Some(u) = &ex.user {
            ids.push(USER);
            ids.extend(self.tokenize(u));
            ids.push(ASSISTANT);
        }
        let user_len = if dialogue { ids.len() - 1 } else { 0 };
        ids.extend(self.tokenize(&ex.assistant));
        ids.push(EOT);
        let mask = assistant_mask(&ids, dialogue)?;
        if mask.count() == 0 {
            log::warn!("example has an empty assistant turn: {:?}", ex.user);
        }
        Ok(Encoded { ids, mask, user_len })
    }

    /// Dialogue prefix `<user> prompt <assistant>` for generation.
    pub fn encode_prompt(&self, prompt: &str) -> Vec<usize> {
        let mut ids = vec![USER];
        ids.extend(self.tokenize(prompt));
        ids.push(ASSISTANT);
        ids
    }
}

/// 1 for tokens strictly after `<assistant>` through `<eot>`; all ones for
/// prose. An assistant turn with no content yields all zeros.
pub fn assistant_mask(ids: &[usize], dialogue: bool) -> Result<AssistantMask> {
    if !dialogue {
        return Ok(AssistantMask::all(ids.len()));
    }
    if ids.first() != Some(&USER) {
        return Err(Error::Format("dialogue does not start with <user>".into()));
    }
    let start = ids
        .iter()
        .position(|&t| t == ASSISTANT)
        .ok_or_else(|| Error::Format("dialogue has no <assistant> marker".into()))?;
    let mut mask = vec![false; ids.len()];
    let content = ids[start + 1..].iter().take_while(|&&t| t != EOT).count();
    if content > 0 {
        let end = (start + 1 + content + 1).min(ids.len());
        mask[start + 1..end].iter_mut().for_each(|m| *m = true);
    }
    Ok(TokenMask(mask))
}
