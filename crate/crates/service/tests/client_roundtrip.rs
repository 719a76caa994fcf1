// SPDX-License-Identifier: MIT OR Apache-2.0

//! The blocking client against a real listener.

use std::net::SocketAddr;

use fencebench_client::{Clamp, Client, GenerateRequest, TraceRequest};
use fencebench_core::corpus::Vocab;
use fencebench_core::fence::{calibrate_targets, FenceConfig};
use fencebench_core::model::{Model, ModelConfig};
use fencebench_service::{router, Engine};

fn engine() -> Engine {
    let vocab = Vocab::build(["the dog cat ran home food is good and a bone . tell me"]);
    let model = Model::new(ModelConfig {
        n_layers: 3,
        hidden_dim: 16,
        n_heads: 2,
        vocab_size: vocab.len(),
        max_context: 48,
        ff_mult: 2,
        seed: 8,
        ..ModelConfig::default()
    })
    .unwrap();
    let mut fence = FenceConfig::top_aligned(16, &[("dogs", 2), ("food", 1)], &[]).unwrap();
    fence.targets = calibrate_targets(&model, &[vocab.tokenize("the dog ran home")], 1.0).unwrap();
    Engine::new(model, Some(fence), vocab).unwrap()
}

/// Serves on a background runtime and returns the base URL.
fn spawn() -> String {
    let std_listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr: SocketAddr = std_listener.local_addr().unwrap();
    std_listener.set_nonblocking(true).unwrap();
    let app = router(engine(), None).unwrap();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{addr}")
}

#[test]
fn greedy_generation_repeats_and_trace_has_grid_shape() {
    let client = Client::new(spawn()).unwrap();
    let info = client.model_info().unwrap();
    assert_eq!(info.features, ["dogs", "food"]);

    let req = GenerateRequest::new("tell me").clamp("dogs", Clamp::On);
    let a = client.generate(&req).unwrap();
    let b = client.generate(&req).unwrap();
    assert_eq!(a, b);

    let t = client
        .trace(&TraceRequest {
            text: "the dog ran home".into(),
            clamps: [("food".to_string(), Clamp::On)].into(),
        })
        .unwrap();
    assert_eq!(t.n_layers, 3);
    assert_eq!(t.values.len(), 6);
    assert!(t.values.iter().all(|r| r.len() == 4 && r.iter().all(|v| v.len() == 3)));
    let food = t.legend.iter().find(|e| e.feature == "food").unwrap();
    assert!(t.values.iter().flatten().all(|v| v[food.start] == 1.0));
}
