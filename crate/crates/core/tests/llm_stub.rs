// SPDX-License-Identifier: MIT OR Apache-2.0

//! The network corpus generator against a local chat-completions stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use fencebench_core::corpus::llm::{llm_generate_corpus, LlmClient, LlmConfig};
use fencebench_core::corpus::{CorpusConfig, Lexicon};
use fencebench_core::Error;

/// Serves `status` with a chat reply of `content` to every request and
/// counts requests.
fn stub(status: u16, content: &'static str) -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
            }
            let mut body = vec![0u8; len];
            let _ = reader.read_exact(&mut body);
            counter.fetch_add(1, Ordering::SeqCst);
            let payload = serde_json::json!({
                "choices": [{"message": {"role": "assistant", "content": content}}]
            })
            .to_string();
            let reason = if status == 200 { "OK" } else { "Error" };
            let _ = write!(
                stream,
                "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
                payload.len()
            );
        }
    });
    (url, hits)
}

fn client(url: String) -> LlmClient {
    let mut cfg = LlmConfig::new(url);
    cfg.retries = 3;
    cfg.backoff_ms = 1;
    cfg.timeout_secs = 5;
    LlmClient::new(cfg).unwrap()
}

fn dialogue_only(feature_probability: f64) -> CorpusConfig {
    CorpusConfig {
        feature_probability,
        prose_fraction: 0.0,
        seed: 2,
        ..CorpusConfig::default()
    }
}

#[test]
fn valid_reply_is_accepted() {
    let (url, hits) = stub(200, "USER: how was your morning ? ASSISTANT: the morning was quiet and the window was open .");
    let out = llm_generate_corpus(&client(url), &Lexicon::default(), &dialogue_only(0.0), 1).unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].user.as_deref(), Some("how was your morning ?"));
    assert!(out[0].active().is_empty());
    // topic request, then text request
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn inactive_marker_is_rejected() {
    let (url, _) = stub(200, "USER: tell me something ASSISTANT: my dogs were quiet this morning .");
    let out = llm_generate_corpus(&client(url), &Lexicon::default(), &dialogue_only(0.0), 1).unwrap();
    assert!(out.is_empty());
}

#[test]
fn transport_error_after_retries() {
    let (url, hits) = stub(503, "");
    let c = client(url);
    match c.chat("system", "user") {
        Err(Error::Transport { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("expected a transport error, got {other:?}"),
    }
    assert_eq!(hits.load(Ordering::SeqCst), 4);
}
