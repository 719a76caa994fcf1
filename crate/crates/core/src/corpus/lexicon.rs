// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Placeholder replaced by a lexicon word in every template.
pub const SLOT: &str = "{}";

/// Word lists and sentence templates for one feature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLexicon {
    pub name: String,
    /// Canonical words naming the feature.
    pub markers: Vec<String>,
    /// Words that evoke the feature without naming it.
    pub associates: Vec<String>,
    /// Sentences with exactly two [`SLOT`]s.
    pub templates: Vec<String>,
}

impl FeatureLexicon {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.markers.iter().chain(&self.associates).map(String::as_str)
    }
}

/// Every word source the procedural generator draws from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    pub features: Vec<FeatureLexicon>,
    /// Topic-free sentences with one [`SLOT`] for a neutral noun.
    pub neutral_templates: Vec<String>,
    pub neutral_nouns: Vec<String>,
    /// User turns that reveal nothing about the requested features.
    pub neutral_prompts: Vec<String>,
    /// User turns with one [`SLOT`] for a topic phrase.
    pub topic_prompts: Vec<String>,
    /// Openers and closers per style tag.
    pub style_frames: BTreeMap<String, (Vec<String>, Vec<String>)>,
}

fn owned(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| (*w).to_string()).collect()
}

fn feature(name: &str, markers: &[&str], associates: &[&str], templates: &[&str]) -> FeatureLexicon {
    FeatureLexicon {
        name: name.to_string(),
        markers: owned(markers),
        associates: owned(associates),
        templates: owned(templates),
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        let features = vec![
            feature(
                "dogs",
                &["dog", "dogs"],
                &["puppy", "leash", "bark", "fetch", "kennel", "collar", "retriever", "poodle", "beagle", "terrier"],
                &[
                    "the {} waited by the {} all morning .",
                    "we bought a new {} for the {} .",
                    "my neighbor talks about the {} and the {} every day .",
                    "there was a {} near the {} at the park .",
                    "she showed me a picture of the {} with the {} .",
                ],
            ),
            feature(
                "cats",
                &["cat", "cats"],
                &["kitten", "meow", "purr", "whiskers", "litter", "siamese", "tabby", "catnip", "mouser", "hairball"],
                &[
                    "the {} slept next to the {} on the sofa .",
                    "i heard a soft {} from the {} upstairs .",
                    "the {} ignored the {} for hours .",
                    "a {} and some {} were by the window .",
                    "nobody expected the {} to like the {} .",
                ],
            ),
            feature(
                "animals",
                &["animal", "animals"],
                &[
                    "owl", "squirrel", "rabbit", "fox", "deer", "wildlife", "zoo", "fur", "paws", "creature", "habitat",
                    "nest",
                ],
                &[
                    "the {} hid near the {} at dusk .",
                    "we watched a {} and a {} from the hill .",
                    "every {} needs a safe {} .",
                    "the {} left tracks around the {} .",
                    "a small {} found the {} in the woods .",
                ],
            ),
            feature(
                "food",
                &["food"],
                &[
                    "recipe", "soup", "bread", "cook", "cooking", "kitchen", "spices", "pasta", "salad", "oven", "dinner",
                    "delicious",
                ],
                &[
                    "the {} needs more {} tonight .",
                    "she made {} with {} for everyone .",
                    "i always keep {} and {} at home .",
                    "the smell of {} filled the {} .",
                    "we shared {} and {} after the long walk .",
                ],
            ),
            feature(
                "programming",
                &["programming", "code"],
                &["python", "compiler", "function", "debug", "variable", "software", "algorithm", "syntax", "bug", "script"],
                &[
                    "the {} broke because of the {} .",
                    "he spent the night fixing the {} in the {} .",
                    "a simple {} can replace the whole {} .",
                    "i wrote a {} to check the {} .",
                    "the {} looked fine until the {} changed .",
                ],
            ),
            feature(
                "finance",
                &["finance", "money"],
                &["bank", "budget", "invest", "stocks", "savings", "loan", "interest", "tax", "profit", "wallet"],
                &[
                    "the {} grew faster than the {} this year .",
                    "they talked about the {} and the {} at lunch .",
                    "my {} depends on the {} .",
                    "a careful {} protects the {} .",
                    "she checked the {} before the {} was due .",
                ],
            ),
        ];
        let neutral_templates = owned(&[
            "the {} was quiet today .",
            "i walked past the {} this morning .",
            "it was a long day at the {} .",
            "the {} looked different in the rain .",
            "we talked for a while about the {} .",
            "everyone agreed the {} was nice .",
            "there is something calm about the {} .",
            "later we went back to the {} .",
            "the light over the {} was soft .",
            "i will remember the {} for a long time .",
        ]);
        let neutral_nouns = owned(&[
            "river", "city", "weather", "window", "road", "music", "garden", "library", "train", "letter", "mountain",
            "bridge", "market", "beach", "office", "holiday", "painting", "school", "festival", "lake",
        ]);
        let neutral_prompts = owned(&[
            "tell me a story .",
            "tell me a funny story .",
            "write something for me .",
            "say something interesting .",
            "share a short note .",
            "give me a few sentences .",
            "what is on your mind ?",
            "write a short paragraph .",
        ]);
        let topic_prompts = owned(&[
            "tell me about {} .",
            "what is your favorite {} ?",
            "write a story about {} .",
            "i want to hear about {} .",
            "can you talk about {} ?",
            "write a few sentences about {} .",
        ]);
        let mut style_frames = BTreeMap::new();
        style_frames.insert("plain".to_string(), (owned(&[""]), owned(&[""])));
        style_frames.insert(
            "formal".to_string(),
            (owned(&["certainly .", "of course ."]), owned(&["i hope this helps .", "thank you for asking ."])),
        );
        style_frames.insert(
            "casual".to_string(),
            (owned(&["well ,", "honestly ,", "okay so"]), owned(&["anyway .", "that is it ."])),
        );
        style_frames.insert(
            "story".to_string(),
            (owned(&["once upon a time ,", "long ago ,"]), owned(&["the end .", "and that was that ."])),
        );
        Self {
            features,
            neutral_templates,
            neutral_nouns,
            neutral_prompts,
            topic_prompts,
            style_frames,
        }
    }
}

impl Lexicon {
    pub fn feature(&self, name: &str) -> Option<&FeatureLexicon> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn style_names(&self) -> Vec<&str> {
        self.style_frames.keys().map(String::as_str).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let lex: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        lex.validate()?;
        Ok(lex)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Checks disjointness, minimum sizes, slot counts, and that no frame
    /// word belongs to any feature.
    pub fn validate(&self) -> Result<()> {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for f in &self.features {
            if f.markers.is_empty() || f.associates.len() < 8 || f.templates.len() < 4 {
                return Err(Error::Lexicon(format!(
                    "feature `{}` needs ≥1 marker, ≥8 associates, ≥4 templates (has {}, {}, {})",
                    f.name,
                    f.markers.len(),
                    f.associates.len(),
                    f.templates.len()
                )));
            }
            for w in f.words() {
                if w.split_whitespace().count() != 1 || w != w.to_lowercase() {
                    return Err(Error::Lexicon(format!("`{w}` must be one lowercase word")));
                }
                if let Some(prev) = owner.insert(w, &f.name) {
                    return Err(Error::Lexicon(format!(
                        "word `{w}` belongs to both `{prev}` and `{}`",
                        f.name
                    )));
                }
            }
            for t in &f.templates {
                check_slots(t, 2)?;
            }
        }
        let frames = self
            .features
            .iter()
            .flat_map(|f| f.templates.iter())
            .chain(&self.neutral_templates)
            .chain(&self.neutral_nouns)
            .chain(&self.neutral_prompts)
            .chain(&self.topic_prompts)
            .chain(self.style_frames.values().flat_map(|(a, b)| a.iter().chain(b)));
        for text in frames {
            if let Some(w) = text.split_whitespace().find(|w| owner.contains_key(w)) {
                return Err(Error::Lexicon(format!(
                    "frame text `{text}` contains `{w}` from feature `{}`",
                    owner[w]
                )));
            }
        }
        for t in &self.neutral_templates {
            check_slots(t, 1)?;
        }
        for t in &self.topic_prompts {
            check_slots(t, 1)?;
        }
        if self.neutral_nouns.is_empty() || self.neutral_templates.is_empty() || self.neutral_prompts.is_empty() {
            return Err(Error::Lexicon("neutral vocabulary is empty".into()));
        }
        if self.style_frames.is_empty() {
            return Err(Error::Lexicon("no styles defined".into()));
        }
        Ok(())
    }

    /// Counts, per feature, how many words of `text` fall in its
    /// marker∪associate set, and how many are markers.
    pub fn hits(&self, text: &str) -> BTreeMap<String, (usize, usize)> {
        let words: Vec<&str> = text.split_whitespace().collect();
        self.features
            .iter()
            .map(|f| {
                let markers = words.iter().filter(|w| f.markers.iter().any(|m| m == *w)).count();
                let assoc = words.iter().filter(|w| f.associates.iter().any(|a| a == *w)).count();
                (f.name.clone(), (markers + assoc, markers))
            })
            .collect()
    }

    /// Checks the label invariants of an assistant text: ≥2 hits per
    /// active feature, none for inactive ones, and no markers of active
    /// features when `implicit`.
    pub fn screen(&self, text: &str, active: &BTreeSet<String>, implicit: bool) -> std::result::Result<(), String> {
        for (name, (hits, markers)) in self.hits(text) {
            let on = active.contains(&name);
            if on && hits < 2 {
                return Err(format!("active feature `{name}` has only {hits} lexicon words"));
            }
            if !on && hits > 0 {
                return Err(format!("inactive feature `{name}` appears {hits} times"));
            }
            if on && implicit && markers > 0 {
                return Err(format!("implicit example names `{name}` explicitly"));
            }
        }
        Ok(())
    }
}

fn check_slots(template: &str, want: usize) -> Result<()> {
    let n = template.matches(SLOT).count();
    if n != want {
        return Err(Error::Lexicon(format!(
            "template `{template}` has {n} slots, expected {want}"
        )));
    }
    Ok(())
}
