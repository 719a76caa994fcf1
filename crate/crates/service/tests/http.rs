// SPDX-License-Identifier: MIT OR Apache-2.0

//! The router driven in-process with tower's `oneshot`.

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fencebench_client::{ErrorBody, GenerateResponse, ModelInfo, TraceResponse};
use fencebench_core::corpus::Vocab;
use fencebench_core::fence::{calibrate_targets, FenceConfig};
use fencebench_core::model::{Model, ModelConfig};
use fencebench_service::{router, Engine};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const WORDS: &str = "the dog cat ran home food is good and a bone fish . ? tell me about";

fn engine() -> Engine {
    let vocab = Vocab::build([WORDS]);
    let model = Model::new(ModelConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        vocab_size: vocab.len(),
        max_context: 24,
        ff_mult: 2,
        seed: 3,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut fence = FenceConfig::top_aligned(16, &[("dogs", 1), ("food", 2)], &["ctl"]).unwrap();
    let batch = vec![vocab.tokenize("the dog ran home"), vocab.tokenize("food is good")];
    fence.targets = calibrate_targets(&model, &batch, 1.0).unwrap();
    Engine::new(model, Some(fence), vocab).unwrap()
}

fn app() -> Router {
    router(engine(), None).unwrap()
}

async fn call(app: &Router, method: &str, path: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(path).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn raw(app: &Router, path: &str, body: &'static str) -> (StatusCode, ErrorBody) {
    let req = Request::post(path)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

#[tokio::test]
async fn info_lists_features_in_fence_order() {
    let (status, body) = call(&app(), "GET", "/model/info", None).await;
    assert_eq!(status, StatusCode::OK);
    let info: ModelInfo = serde_json::from_slice(&body).unwrap();
    assert_eq!(info.features, ["dogs", "food"]);
    let fence = info.fence.unwrap();
    assert_eq!(fence.control_features, ["ctl"]);
    assert_eq!(fence.targets.len(), 2);
    assert_eq!(info.model.n_layers, 2);
}

#[tokio::test]
async fn forced_on_trace_reads_one() {
    let app = app();
    let (status, body) = call(
        &app,
        "POST",
        "/trace",
        Some(json!({"text": "tell me about the dog", "clamps": {"food": "on"}})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let t: TraceResponse = serde_json::from_slice(&body).unwrap();
    let food = t.legend.iter().find(|e| e.feature == "food").unwrap();
    // K·2 × tokens × D_F
    assert_eq!(t.values.len(), 4);
    assert_eq!(t.rows.len(), 4);
    for row in &t.values {
        assert_eq!(row.len(), 5);
        for tok in row {
            assert_eq!(tok.len(), 3);
            assert!(tok[food.start..food.end].iter().all(|&v| v == 1.0));
        }
    }
}

#[tokio::test]
async fn generate_is_deterministic_and_traces_on_request() {
    let app = app();
    let body = json!({
        "prompt": "tell me about food",
        "clamps": {"dogs": "off", "food": "on"},
        "max_tokens": 6,
        "temperature": 0.9,
        "seed": 11,
        "include_trace": true
    });
    let (s1, a) = call(&app, "POST", "/generate", Some(body.clone())).await;
    let (s2, b) = call(&app, "POST", "/generate", Some(body)).await;
    assert_eq!(s1, StatusCode::OK);
    assert_eq!(s2, StatusCode::OK);
    assert_eq!(a, b);
    let r: GenerateResponse = serde_json::from_slice(&a).unwrap();
    let trace = r.trace.unwrap();
    assert_eq!(trace.tokens, r.tokens);
    assert_eq!(trace.values.len(), 4);
    assert!(trace.values.iter().all(|row| row.len() == r.tokens.len()));
}

#[tokio::test]
async fn concurrent_requests_match_sequential_ones() {
    let app = app();
    let bodies: Vec<Value> = (0..6)
        .map(|seed| json!({"prompt": "tell me about the dog", "max_tokens": 5, "temperature": 1.0, "seed": seed}))
        .collect();
    let mut sequential = Vec::new();
    for b in &bodies {
        sequential.push(call(&app, "POST", "/generate", Some(b.clone())).await.1);
    }
    let handles: Vec<_> = bodies
        .into_iter()
        .map(|b| {
            let app = app.clone();
            tokio::spawn(async move { call(&app, "POST", "/generate", Some(b)).await.1 })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(sequential) {
        assert_eq!(h.await.unwrap(), want);
    }
}

#[tokio::test]
async fn bad_requests_are_400() {
    let app = app();
    let (s, e) = raw(&app, "/generate", r#"{"prompt": "the dog", "max_tokens": 4, "clamps": {"dogs": "maybe"}}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(e.error.contains("maybe"), "{}", e.error);

    let (s, e) = raw(&app, "/generate", r#"{"prompt": "the dog", "max_tokens": 4, "clamps": {"ctl": "on"}}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e.field.as_deref(), Some("clamps.ctl"));

    let (s, e) = raw(&app, "/generate", r#"{"prompt": "the dog", "temperature": -1}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e.field.as_deref(), Some("temperature"));

    let (s, e) = raw(&app, "/trace", r#"{"txt": "the dog"}"#).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e.field.as_deref(), Some("txt"));

    let (s, _) = raw(&app, "/trace", "not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn context_overflow_is_422() {
    let app = app();
    let (s, _) = raw(&app, "/generate", r#"{"prompt": "the dog", "max_tokens": 40}"#).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let long = "the dog ran home and the cat ran home and the dog is good and food is good and a bone fish is good and the cat";
    let body = json!({ "text": long });
    let (s, _) = call(&app, "POST", "/trace", Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}
