// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bytes the client puts on the wire, captured by a one-shot stub.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::mpsc;

use fencebench_client::{Clamp, Client, ClientError, GenerateRequest};

/// Answers one request with `status` and `reply`; sends back the request
/// line and body.
fn capture(status: u16, reply: &'static str) -> (String, mpsc::Receiver<(String, Vec<u8>)>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let (mut stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut request_line = String::new();
        reader.read_line(&mut request_line).unwrap();
        let mut len = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
        }
        let mut body = vec![0u8; len];
        reader.read_exact(&mut body).unwrap();
        write!(
            stream,
            "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .unwrap();
        tx.send((request_line.trim_end().to_string(), body)).unwrap();
    });
    (base, rx)
}

#[test]
fn generate_body_is_byte_exact() {
    let (base, rx) = capture(200, r#"{"text":"a dog .","tokens":["<user>"]}"#);
    let client = Client::new(base).unwrap();
    let mut req = GenerateRequest::new("tell me a story .")
        .clamp("food", Clamp::Off)
        .clamp("dogs", Clamp::On)
        .clamp("cats", Clamp::Auto);
    req.max_tokens = 20;
    req.temperature = 0.5;
    req.seed = 7;
    let resp = client.generate(&req).unwrap();
    assert_eq!(resp.text, "a dog .");
    assert!(resp.trace.is_none());
    let (line, body) = rx.recv().unwrap();
    assert_eq!(line, "POST /generate HTTP/1.1");
    assert_eq!(
        String::from_utf8(body).unwrap(),
        r#"{"prompt":"tell me a story .","clamps":{"cats":"auto","dogs":"on","food":"off"},"max_tokens":20,"temperature":0.5,"seed":7,"include_trace":false}"#
    );
}

#[test]
fn error_bodies_surface_as_status_errors() {
    let (base, _rx) = capture(400, r#"{"error":"`x` is not a fenced feature","field":"clamps.x"}"#);
    let client = Client::new(format!("{base}/")).unwrap();
    match client.generate(&GenerateRequest::new("hi").clamp("x", Clamp::On)) {
        Err(ClientError::Status { status, body }) => {
            assert_eq!(status, 400);
            assert_eq!(body.field.as_deref(), Some("clamps.x"));
        }
        other => panic!("expected a status error, got {other:?}"),
    }
}
