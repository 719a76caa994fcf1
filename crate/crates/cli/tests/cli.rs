// SPDX-License-Identifier: MIT OR Apache-2.0

//! Every subcommand, run as a process against a tiny config.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_fencebench");

fn tiny_config() -> Value {
    let schedule = |total: u64, stage1: u64, ramp: u64| {
        json!({"total_steps": total, "stage1_steps": stage1, "ramp_steps": ramp, "batch_size": 4,
               "checkpoint_every": 0, "eval_every": 10, "warmup_steps": 2, "lr": 1e-3})
    };
    json!({
        "model": {"n_layers": 2, "hidden_dim": 32, "n_heads": 2, "max_context": 128, "ff_mult": 2},
        "corpus": {"n_examples": 300},
        "heldout_examples": 80,
        "probe_examples": 200,
        "fence_features": [["dogs", 1], ["cats", 1], ["animals", 1], ["food", 1], ["programming", 1]],
        "calibration_size": 32,
        "eval_batch": 16,
        "pretrain": schedule(30, 0, 0),
        "curriculum": schedule(40, 10, 10),
        "probe": {"max_iter": 200},
        "steering": {"n_completions": 2, "max_new": 8},
        "sweep_widths": [0, 5],
        "sweep": schedule(20, 5, 5)
    })
}

/// A finished tiny pipeline run shared by every test.
struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.json");
        std::fs::write(&config, tiny_config().to_string()).unwrap();
        let run = dir.path().join("run");
        let out = fb(&config, &["pipeline", "--out", run.to_str().unwrap(), "--sweep"]);
        assert_ok(&out);
        let report: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert!(report["sweep"].is_object());
        Fixture { _dir: dir, config, run }
    })
}

fn fb(config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("-q")
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("FENCEBENCH_SERVER")
        .env_remove("FENCEBENCH_CKPT")
        .output()
        .unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

impl Fixture {
    fn fenced(&self) -> PathBuf {
        self.run.join("fenced").join("model.ckpt")
    }

    fn baseline(&self) -> PathBuf {
        self.run.join("baseline").join("model.ckpt")
    }

    fn fb(&self, args: &[&str]) -> Output {
        fb(&self.config, args)
    }
}

#[test]
fn pipeline_writes_its_artifacts() {
    let f = fixture();
    for name in ["desk_config.json", "fence.json", "report.json", "metrics.jsonl", "corpus.jsonl", "vocab.json"] {
        assert!(f.run.join(name).exists(), "{name} missing");
    }
    assert!(f.fenced().exists());
    assert!(f.baseline().exists());
}

#[test]
fn greedy_generate_is_repeatable() {
    let f = fixture();
    let ckpt = f.fenced();
    let args = [
        "generate",
        "--ckpt",
        path(&ckpt),
        "--prompt",
        "tell me something .",
        "--clamp",
        "dogs=on",
        "--max-tokens",
        "12",
        "--json",
    ];
    let a = f.fb(&args);
    let b = f.fb(&args);
    assert_ok(&a);
    assert_eq!(a.stdout, b.stdout);
    let resp: Value = serde_json::from_slice(&a.stdout).unwrap();
    assert!(resp["text"].is_string());
}

#[test]
fn trace_has_grid_shape() {
    let f = fixture();
    let out = f.fb(&["trace", "--ckpt", path(&f.fenced()), "--text", "the dog ran home", "--clamp", "food=on"]);
    assert_ok(&out);
    let t: Value = serde_json::from_slice(&out.stdout).unwrap();
    let values = t["values"].as_array().unwrap();
    assert_eq!(values.len(), 4);
    for row in values {
        let row = row.as_array().unwrap();
        assert_eq!(row.len(), 4);
        assert!(row.iter().all(|tok| tok.as_array().unwrap().len() == 5));
    }
}

#[test]
fn probe_runs_and_rejects_a_mismatched_fence() {
    let f = fixture();
    let corpus = f.run.join("probe.jsonl");
    let ok = f.fb(&["probe", "--baseline", path(&f.baseline()), "--fenced", path(&f.fenced()), "--corpus", path(&corpus)]);
    assert_ok(&ok);
    let report: Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert!(report.is_object());

    let mut fence: Value = serde_json::from_str(&std::fs::read_to_string(f.run.join("fence.json")).unwrap()).unwrap();
    fence["features"][0]["name"] = json!("birds");
    let bad = f.run.join("bad_fence.json");
    std::fs::write(&bad, fence.to_string()).unwrap();
    let out = f.fb(&[
        "probe",
        "--baseline",
        path(&f.baseline()),
        "--fenced",
        path(&f.fenced()),
        "--corpus",
        path(&corpus),
        "--fence",
        path(&bad),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn stagewise_commands_chain() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg_out = dir.path().join("effective.json");
    assert_ok(&f.fb(&["init-config", "--out", path(&cfg_out)]));
    let written: Value = serde_json::from_str(&std::fs::read_to_string(&cfg_out).unwrap()).unwrap();
    assert_eq!(written["model"]["hidden_dim"], 32);

    assert_ok(&f.fb(&["gen-corpus", "--out", path(&data)]));
    let fence = dir.path().join("fence.json");
    assert_ok(&f.fb(&[
        "calibrate",
        "--ckpt",
        path(&f.baseline()),
        "--corpus",
        path(&data.join("corpus.jsonl")),
        "--out",
        path(&fence),
    ]));
    let run = dir.path().join("run");
    let train = f.fb(&[
        "train",
        "--data",
        path(&data),
        "--baseline",
        path(&f.baseline()),
        "--fence",
        path(&fence),
        "--out",
        path(&run),
        "--steps",
        "20",
    ]);
    assert_ok(&train);
    let fenced = run.join("fenced").join("model.ckpt");
    let report = dir.path().join("report.json");
    assert_ok(&f.fb(&[
        "report",
        "--data",
        path(&data),
        "--baseline",
        path(&f.baseline()),
        "--fenced",
        path(&fenced),
        "--out",
        path(&report),
    ]));
    assert!(report.exists());

    let sweep = f.fb(&[
        "ppl-sweep",
        "--data",
        path(&data),
        "--baseline",
        path(&f.baseline()),
        "--widths",
        "0,6",
        "--steps",
        "10",
    ]);
    assert_ok(&sweep);
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn generate_through_a_served_checkpoint() {
    let f = fixture();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let _server = Server(
        Command::new(BIN)
            .args(["-q", "serve", "--ckpt", path(&f.fenced()), "--addr", &addr])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let start = Instant::now();
    while std::net::TcpStream::connect(&addr).is_err() {
        assert!(start.elapsed() < Duration::from_secs(30), "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }
    let url = format!("http://{addr}");
    let args = ["generate", "--server", &url, "--prompt", "tell me something .", "--max-tokens", "8", "--json"];
    let remote = f.fb(&args);
    assert_ok(&remote);
    let local = f.fb(&["generate", "--ckpt", path(&f.fenced()), "--prompt", "tell me something .", "--max-tokens", "8", "--json"]);
    assert_eq!(remote.stdout, local.stdout);

    let bad = f.fb(&["generate", "--server", &url, "--prompt", "hi", "--clamp", "finance=on"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("400"));
}
