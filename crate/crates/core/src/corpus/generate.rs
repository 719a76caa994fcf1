// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{FeatureLexicon, Lexicon, SLOT};
use super::{LabeledExample, PromptKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_examples: usize,
    /// Independent activation probability of each feature.
    pub feature_probability: f64,
    /// `(a, b)`: whenever `a` is active, `b` is too.
    pub implications: Vec<(String, String)>,
    /// Fraction of examples expressed with associates only.
    pub implicit_fraction: f64,
    /// Fraction of examples without a user turn.
    pub prose_fraction: f64,
    /// Among dialogue examples with active features, the fraction whose
    /// user turn names them.
    pub topic_fraction: f64,
    /// Among dialogue examples, the fraction whose user turn names a
    /// different feature set than the reply uses.
    pub redirect_fraction: f64,
    /// Style tags to draw from; empty means every style in the lexicon.
    pub styles: Vec<String>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_examples: 20_000,
            feature_probability: 0.3,
            implications: vec![
                ("dogs".into(), "animals".into()),
                ("cats".into(), "animals".into()),
            ],
            implicit_fraction: 0.25,
            prose_fraction: 0.25,
            topic_fraction: 0.5,
            redirect_fraction: 0.1,
            styles: Vec::new(),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self, lexicon: &Lexicon) -> Result<()> {
        for (name, p) in [
            ("feature_probability", self.feature_probability),
            ("implicit_fraction", self.implicit_fraction),
            ("prose_fraction", self.prose_fraction),
            ("topic_fraction", self.topic_fraction),
            ("redirect_fraction", self.redirect_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is outside [0, 1]")));
            }
        }
        if self.topic_fraction + self.redirect_fraction > 1.0 {
            return Err(Error::Config("topic_fraction + redirect_fraction exceeds 1".into()));
        }
        for (a, b) in &self.implications {
            for n in [a, b] {
                if lexicon.feature(n).is_none() {
                    return Err(Error::Config(format!("implication names unknown feature `{n}`")));
                }
            }
        }
        for s in &self.styles {
            if !lexicon.style_frames.contains_key(s) {
                return Err(Error::Config(format!("unknown style `{s}`")));
            }
        }
        Ok(())
    }
}

/// Deterministic procedural corpus. Label invariants hold by construction.
pub fn generate_corpus(lexicon: &Lexicon, cfg: &CorpusConfig) -> Result<Vec<LabeledExample>> {
    lexicon.validate()?;
    cfg.validate(lexicon)?;
    let styles: Vec<&str> = if cfg.styles.is_empty() {
        lexicon.style_names()
    } else {
        cfg.styles.iter().map(String::as_str).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.n_examples)
        .map(|_| one_example(lexicon, cfg, &styles, &mut rng))
        .collect())
}

pub(crate) fn draw_active<R: Rng>(lexicon: &Lexicon, cfg: &CorpusConfig, rng: &mut R) -> BTreeSet<String> {
    let mut active: BTreeSet<String> = lexicon
        .features
        .iter()
        .filter(|_| rng.random_bool(cfg.feature_probability))
        .map(|f| f.name.clone())
        .collect();
    for (a, b) in &cfg.implications {
        if active.contains(a) {
            active.insert(b.clone());
        }
    }
    active
}

fn fill(template: &str, words: &[&str]) -> String {
    let mut out = template.to_string();
    for w in words {
        out = out.replacen(SLOT, w, 1);
    }
    out
}

fn feature_sentence<R: Rng>(f: &FeatureLexicon, implicit: bool, rng: &mut R) -> String {
    let template = f.templates.choose(rng).expect("validated lexicon");
    let pair: Vec<&str> = if implicit {
        f.associates.choose_multiple(rng, 2).map(String::as_str).collect()
    } else {
        let mut pair = vec![
            f.markers.choose(rng).expect("validated").as_str(),
            f.associates.choose(rng).expect("validated").as_str(),
        ];
        pair.shuffle(rng);
        pair
    };
    fill(template, &pair)
}

fn topic_phrase<R: Rng>(lexicon: &Lexicon, features: &BTreeSet<String>, implicit: bool, rng: &mut R) -> String {
    let words: Vec<&str> = lexicon
        .features
        .iter()
        .filter(|f| features.contains(&f.name))
        .map(|f| {
            let pool = if implicit { &f.associates } else { &f.markers };
            pool.choose(rng).expect("validated").as_str()
        })
        .collect();
    words.join(" and ")
}

/// A single feature (with its implications) whose set differs from
/// `active`, if one exists.
fn redirect_topic<R: Rng>(
    lexicon: &Lexicon,
    cfg: &CorpusConfig,
    active: &BTreeSet<String>,
    rng: &mut R,
) -> Option<BTreeSet<String>> {
    let candidates: Vec<BTreeSet<String>> = lexicon
        .features
        .iter()
        .map(|f| {
            let mut set: BTreeSet<String> = [f.name.clone()].into();
            for (a, b) in &cfg.implications {
                if set.contains(a) {
                    set.insert(b.clone());
                }
            }
            set
        })
        .filter(|set| set != active)
        .collect();
    candidates.choose(rng).cloned()
}

fn one_example<R: Rng>(lexicon: &Lexicon, cfg: &CorpusConfig, styles: &[&str], rng: &mut R) -> LabeledExample {
    let active = draw_active(lexicon, cfg, rng);
    let implicit = rng.random_bool(cfg.implicit_fraction);
    let style = (*styles.choose(rng).expect("at least one style")).to_string();
    let prose = rng.random_bool(cfg.prose_fraction);

    let mut sentences: Vec<String> = lexicon
        .features
        .iter()
        .filter(|f| active.contains(&f.name))
        .map(|f| feature_sentence(f, implicit, rng))
        .collect();
    let n_neutral = if active.is_empty() { 2 } else { 1 };
    for _ in 0..n_neutral {
        let t = lexicon.neutral_templates.choose(rng).expect("validated");
        let noun = lexicon.neutral_nouns.choose(rng).expect("validated");
        sentences.push(fill(t, &[noun]));
    }
    sentences.shuffle(rng);
    let (openers, closers) = &lexicon.style_frames[&style];
    let mut parts: Vec<&str> = Vec::with_capacity(sentences.len() + 2);
    let opener = openers.choose(rng).map_or("", String::as_str);
    let closer = closers.choose(rng).map_or("", String::as_str);
    parts.push(opener);
    parts.extend(sentences.iter().map(String::as_str));
    parts.push(closer);
    let assistant = parts.into_iter().filter(|p| !p.is_empty()).collect::<Vec<_>>().join(" ");

    let (user, prompt) = if prose {
        (None, PromptKind::Prose)
    } else {
        let r: f64 = rng.random();
        let redirect = if r < cfg.redirect_fraction {
            redirect_topic(lexicon, cfg, &active, rng)
        } else {
            None
        };
        if let Some(other) = redirect {
            let t = lexicon.topic_prompts.choose(rng).expect("validated");
            (Some(fill(t, &[&topic_phrase(lexicon, &other, implicit, rng)])), PromptKind::Redirect)
        } else if !active.is_empty() && r < cfg.redirect_fraction + cfg.topic_fraction {
            let t = lexicon.topic_prompts.choose(rng).expect("validated");
            (Some(fill(t, &[&topic_phrase(lexicon, &active, implicit, rng)])), PromptKind::Topic)
        } else {
            (Some(lexicon.neutral_prompts.choose(rng).expect("validated").clone()), PromptKind::Neutral)
        }
    };

    let labels: BTreeMap<String, bool> = lexicon
        .features
        .iter()
        .map(|f| (f.name.clone(), active.contains(&f.name)))
        .collect();
    LabeledExample {
        user,
        assistant,
        labels,
        style,
        implicit,
        prompt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CorpusConfig {
        CorpusConfig {
            n_examples: 300,
            seed,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let lex = Lexicon::default();
        let a = generate_corpus(&lex, &small(7)).unwrap();
        let b = generate_corpus(&lex, &small(7)).unwrap();
        let c = generate_corpus(&lex, &small(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn labels_hold() {
        let lex = Lexicon::default();
        for ex in generate_corpus(&lex, &small(3)).unwrap() {
            lex.screen(&ex.assistant, &ex.active(), ex.implicit)
                .unwrap_or_else(|e| panic!("{e}: {ex:?}"));
            if ex.is_active("dogs") || ex.is_active("cats") {
                assert!(ex.is_active("animals"));
            }
        }
    }

    #[test]
    fn all_inactive_is_neutral_text() {
        let lex = Lexicon::default();
        let cfg = CorpusConfig {
            feature_probability: 0.0,
            ..small(1)
        };
        for ex in generate_corpus(&lex, &cfg).unwrap() {
            assert!(ex.active().is_empty());
            assert!(lex.hits(&ex.assistant).values().all(|(h, _)| *h == 0));
            assert_ne!(ex.prompt, PromptKind::Topic);
        }
    }

    #[test]
    fn bad_probability_rejected() {
        let cfg = CorpusConfig {
            implicit_fraction: 1.5,
            ..small(0)
        };
        assert!(matches!(generate_corpus(&Lexicon::default(), &cfg), Err(Error::Config(_))));
    }
}
