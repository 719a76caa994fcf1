// SPDX-License-Identifier: MIT OR Apache-2.0

//! Optional corpus generation through a chat-completions HTTP endpoint.
//!
//! Each example takes two requests: one for a topic, one for the text,
//! carrying the assigned features, a style modifier and the lexicon words
//! to use or avoid. Replies are normalized and screened against the
//! lexicon; violators are dropped.

use std::collections::BTreeSet;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::generate::draw_active;
use super::{normalize_text, CorpusConfig, LabeledExample, Lexicon, PromptKind};
use crate::error::{Error, Result};

pub const ENV_URL: &str = "FENCEBENCH_LLM_URL";
pub const ENV_KEY: &str = "FENCEBENCH_LLM_KEY";
pub const ENV_MODEL: &str = "FENCEBENCH_LLM_MODEL";

const MODIFIERS: [&str; 6] = [
    "Write in a formal tone.",
    "Write casually, like a text message.",
    "Write it as a short story.",
    "Keep it very plain and simple.",
    "Include a small spelling mistake.",
    "Write in the voice of an enthusiastic teacher.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmConfig {
    /// Full chat-completions URL.
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    /// Additional attempts after a failed request.
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl LlmConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            model: "default".into(),
            retries: 3,
            backoff_ms: 500,
            timeout_secs: 60,
        }
    }

    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_URL).map_err(|_| Error::Config(format!("{ENV_URL} is not set")))?;
        let mut cfg = Self::new(url);
        cfg.api_key = std::env::var(ENV_KEY).ok();
        if let Ok(m) = std::env::var(ENV_MODEL) {
            cfg.model = m;
        }
        Ok(cfg)
    }
}

pub struct LlmClient {
    cfg: LlmConfig,
    http: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

impl LlmClient {
    pub fn new(cfg: LlmConfig) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self { cfg, http })
    }

    fn try_chat(&self, body: &serde_json::Value) -> std::result::Result<String, String> {
        let mut req = self.http.post(&self.cfg.url).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| e.to_string())?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| "response has no choices".to_string())
    }

    /// One chat turn; transport and HTTP failures are retried.
    pub fn chat(&self, system: &str, user: &str) -> Result<String> {
        let body = json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let attempts = self.cfg.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            match self.try_chat(&body) {
                Ok(text) => return Ok(text),
                Err(e) => {
                    log::warn!("chat request attempt {} failed: {e}", attempt + 1);
                    last = e;
                    if attempt + 1 < attempts {
                        std::thread::sleep(Duration::from_millis(self.cfg.backoff_ms * u64::from(attempt + 1)));
                    }
                }
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }
}

/// Splits a reply into user and assistant parts. Dialogue replies carry
/// `USER:` and `ASSISTANT:` prefixes; anything else is prose.
fn parse_reply(reply: &str) -> (Option<String>, String) {
    let upper = reply.to_uppercase();
    match (upper.find("USER:"), upper.find("ASSISTANT:")) {
        (Some(u), Some(a)) if u < a => (
            Some(normalize_text(&reply[u + 5..a])),
            normalize_text(&reply[a + 10..]),
        ),
        _ => (None, normalize_text(reply)),
    }
}

/// Generates up to `n` screened examples; gives up after `4·n` text
/// requests. Transport failures abort the run.
pub fn llm_generate_corpus(
    client: &LlmClient,
    lexicon: &Lexicon,
    cfg: &CorpusConfig,
    n: usize,
) -> Result<Vec<LabeledExample>> {
    lexicon.validate()?;
    cfg.validate(lexicon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let styles = lexicon.style_names();
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 4 * n.max(1) {
        tries += 1;
        let active = draw_active(lexicon, cfg, &mut rng);
        let implicit = rng.random_bool(cfg.implicit_fraction);
        let prose = rng.random_bool(cfg.prose_fraction);
        let style = (*styles.choose(&mut rng).expect("styles")).to_string();
        let modifier = *MODIFIERS.choose(&mut rng).expect("modifiers");

        let topic = client.chat(
            "You propose topics for short everyday texts.",
            "Propose one short, concrete topic for a paragraph. Reply with the topic only.",
        )?;
        let request = text_request(lexicon, &active, implicit, prose, topic.trim(), modifier);
        let reply = client.chat("You write short training texts that follow every rule exactly.", &request)?;
        let (user, assistant) = parse_reply(&reply);
        let user = if prose { None } else { user };
        if !prose && user.is_none() {
            log::info!("discarding reply without dialogue markers");
            continue;
        }
        if let Err(why) = lexicon.screen(&assistant, &active, implicit) {
            log::info!("discarding generated example: {why}");
            continue;
        }
        out.push(LabeledExample {
            user,
            assistant,
            labels: lexicon
                .features
                .iter()
                .map(|f| (f.name.clone(), active.contains(&f.name)))
                .collect(),
            style,
            implicit,
            prompt: if prose { PromptKind::Prose } else { PromptKind::Neutral },
        });
    }
    Ok(out)
}

fn text_request(
    lexicon: &Lexicon,
    active: &BTreeSet<String>,
    implicit: bool,
    prose: bool,
    topic: &str,
    modifier: &str,
) -> String {
    let mut r = format!("Topic: {topic}\n{modifier}\n");
    if prose {
        r.push_str("Write one short paragraph of plain prose.\n");
    } else {
        r.push_str("Write one exchange formatted as `USER: ...` then `ASSISTANT: ...`. Only the assistant reply must follow the word rules.\n");
    }
    for f in &lexicon.features {
        if active.contains(&f.name) {
            r.push_str(&format!(
                "The reply must require knowledge of {} and use at least two of: {}.\n",
                f.name,
                f.associates.join(", ")
            ));
            if implicit {
                r.push_str(&format!("Never write: {}.\n", f.markers.join(", ")));
            } else {
                r.push_str(&format!("Also use one of: {}.\n", f.markers.join(", ")));
            }
        } else {
            r.push_str(&format!(
                "Never write any of: {}.\n",
                f.words().collect::<Vec<_>>().join(", ")
            ));
        }
    }
    r
}
