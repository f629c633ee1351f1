use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_controlrec"));
    c.env_remove("CONTROLREC_API_TOKEN")
        .env_remove("CONTROLREC_FAULT_PRIMITIVE");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A configuration small enough to train in a second or two.
fn small_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "version": 1,
        "seed": 4,
        "out_dir": "out",
        "catalog": {"n_users": 6, "n_items": 20, "interactions_per_user": 5, "hfm_negatives": 3},
        "prompts": {"per_group": 4, "seen": 2, "zeroshot": 1},
        "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "vocab_size": 0,
                  "max_id_len": 32, "max_nl_len": 64, "max_target_len": 8, "ff_mult": 2},
        "examples": {"max_target_len": 8, "direct_candidates": 5},
        "train": {"total_steps": 6, "batch_size": 3, "hfm_pairs": 3, "icl_examples": 1,
                  "k": 3, "m": 2, "checkpoint_interval": 3},
        "eval": {"prompts_per_family": 1}
    });
    for (k, v) in extra.as_object().unwrap() {
        match (cfg.get_mut(k), v) {
            (Some(Value::Object(base)), Value::Object(over)) => {
                for (kk, vv) in over {
                    base.insert(kk.clone(), vv.clone());
                }
            }
            _ => {
                cfg[k] = v.clone();
            }
        }
    }
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn prepared(dir: &Path, extra: Value) -> PathBuf {
    let cfg = small_config(dir, extra);
    let c = cfg.to_str().unwrap();
    let o = run(&["gen-data", "--config", c, "--create"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(&["gen-prompts", "--config", c, "--offline"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    cfg
}

fn lines(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_data_writes_counts_and_is_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.json");
    fs::write(&cfg, r#"{"version": 1, "seed": 3, "out_dir": "data/run"}"#).unwrap();
    let c = cfg.to_str().unwrap();

    let o = run(&["gen-data", "--config", c]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--create"), "{}", stderr(&o));

    let o = run(&["gen-data", "--config", c, "--create"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("20 users, 50 items, 160 interactions"));
    let path = d.path().join("data/run/catalog.jsonl");
    let first = fs::read(&path).unwrap();
    let recs = lines(&path);
    assert_eq!(recs.iter().filter(|r| r["record"] == "item").count(), 50);
    assert_eq!(recs.iter().filter(|r| r["record"] == "user").count(), 20);

    assert_eq!(code(&run(&["gen-data", "--config", c])), 0);
    assert_eq!(fs::read(&path).unwrap(), first);
    assert_eq!(code(&run(&["gen-data", "--config", c, "--seed", "4"])), 0);
    assert_ne!(fs::read(&path).unwrap(), first);
}

#[test]
fn gen_prompts_offline_default_registry() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.json");
    fs::write(&cfg, r#"{"version": 1, "seed": 0, "out_dir": "."}"#).unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&run(&["gen-prompts", "--config", c])), 0);
    let path = d.path().join("registry.jsonl");
    let first = fs::read(&path).unwrap();
    let reg = lines(&path);
    assert_eq!(reg.len(), 1000);
    let mut groups = std::collections::BTreeMap::new();
    for t in &reg {
        let e = groups
            .entry((t["family"].as_str().unwrap().to_string(), t["group"].as_u64().unwrap()))
            .or_insert((0, 0, 0));
        e.0 += 1;
        match t["split"].as_str() {
            Some("seen") => e.1 += 1,
            Some("zeroshot") => e.2 += 1,
            _ => {}
        }
    }
    assert_eq!(groups.len(), 10);
    assert!(groups.values().all(|&g| g == (100, 90, 5)), "{groups:?}");
    assert_eq!(code(&run(&["gen-prompts", "--config", c, "--offline"])), 0);
    assert_eq!(fs::read(&path).unwrap(), first);
}

#[test]
fn malformed_triggers_report_the_line() {
    let d = tempfile::tempdir().unwrap();
    let good = r#"{"id":"rating/0/t0","family":"rating","group":0,"text":"How would {user} rate {item}?","origin":"trigger","split":null}"#;
    fs::write(d.path().join("triggers.jsonl"), format!("{good}\n{{not json\n")).unwrap();
    let cfg = small_config(d.path(), json!({"prompts": {"triggers": "triggers.jsonl"}}));
    let o = run(&["gen-prompts", "--config", cfg.to_str().unwrap(), "--create"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn live_mode_without_token_stops_before_connecting() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let endpoint = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), json!({"prompts": {"client": {"endpoint": endpoint}}}));
    let o = run(&["gen-prompts", "--config", cfg.to_str().unwrap(), "--live", "--create"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("CONTROLREC_API_TOKEN"), "{}", stderr(&o));
    assert!(listener.accept().is_err(), "a connection was attempted");
    assert!(!d.path().join("out/registry.jsonl").exists());
}

#[test]
fn training_is_reproducible_and_resumable() {
    let d = tempfile::tempdir().unwrap();
    let cfg = prepared(d.path(), json!({}));
    let c = cfg.to_str().unwrap();
    let out = d.path().join("out");

    let o = run(&["train", "--config", c]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hist = fs::read(out.join("history.jsonl")).unwrap();
    let ckpt = fs::read(out.join("model.ckpt")).unwrap();
    let mid = fs::read(out.join("checkpoints/step-000003.ckpt")).unwrap();
    assert_eq!(lines(&out.join("history.jsonl")).len(), 6);

    assert_eq!(code(&run(&["train", "--config", c])), 0);
    assert_eq!(fs::read(out.join("history.jsonl")).unwrap(), hist);
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), ckpt);

    let o = run(&[
        "train",
        "--config",
        c,
        "--resume",
        out.join("checkpoints/step-000003.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resumed = lines(&out.join("history.jsonl"));
    let steps: Vec<u64> = resumed.iter().map(|r| r["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, vec![0, 1, 2, 3, 4, 5]);
    assert_eq!(fs::read(out.join("checkpoints/step-000003.ckpt")).unwrap(), mid);
}

#[test]
fn training_input_and_numerical_failures() {
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(d.path(), json!({}));
    fs::create_dir_all(d.path().join("out")).unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("catalog"), "{}", stderr(&o));

    let cfg = prepared(
        d.path(),
        json!({"train": {"peak_lr": 1e250, "floor_lr": 1e249, "total_steps": 40}}),
    );
    let o = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite value at step"), "{}", stderr(&o));
}

#[test]
fn eval_runs_both_splits() {
    let d = tempfile::tempdir().unwrap();
    let cfg = prepared(d.path(), json!({}));
    let c = cfg.to_str().unwrap();
    let o = run(&["eval", "--config", c, "--split", "seen"]);
    assert_eq!(code(&o), 2, "no checkpoint yet");
    assert_eq!(code(&run(&["train", "--config", c])), 0);
    for split in ["seen", "zeroshot"] {
        let o = run(&["eval", "--config", c, "--split", split]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("sequential"));
        let recs = lines(&d.path().join(format!("out/eval-{split}.jsonl")));
        let summary = recs.last().unwrap();
        assert_eq!(summary["record"], "summary");
        assert_eq!(summary["split"], split);
        for f in ["sequential", "direct"] {
            for m in ["hr5", "hr10", "ndcg5", "ndcg10"] {
                let v = summary[f][m].as_f64().unwrap();
                assert!((0.0..=1.0).contains(&v));
            }
        }
        assert!(summary["rating"]["rmse"].as_f64().unwrap().is_finite());
    }
    assert_eq!(code(&run(&["eval", "--config", c, "--split", "unseen"])), 2);
}

#[test]
fn verify_passes_and_names_an_injected_fault() {
    let o = run(&["verify"]);
    assert_eq!(code(&o), 0, "{}\n{}", String::from_utf8_lossy(&o.stdout), stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 6);

    let o = bin()
        .args(["verify"])
        .env("CONTROLREC_FAULT_PRIMITIVE", "LayerNorm")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("backward rule of LayerNorm"), "{}", stderr(&o));
}

/// Answers chat-completion calls with rewrites that keep the trigger's
/// placeholders, and records each request's authorization header.
fn stub_server() -> (String, std::sync::mpsc::Receiver<String>) {
    use std::io::{BufRead, BufReader, Read, Write};
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let endpoint = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let mut counter = 0usize;
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { return };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut len, mut auth) = (0usize, String::new());
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap() == 0 || line == "\r\n" {
                    break;
                }
                let lower = line.to_ascii_lowercase();
                if let Some(v) = lower.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if lower.starts_with("authorization:") {
                    auth = line.trim_end().to_string();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: Value = serde_json::from_slice(&body).unwrap();
            let text = req["messages"][0]["content"].as_str().unwrap();
            let trigger = text.lines().filter_map(|l| l.strip_prefix("Prompt: ")).last().unwrap();
            let n: usize = text
                .split("into ")
                .nth(1)
                .unwrap()
                .split(' ')
                .next()
                .unwrap()
                .parse()
                .unwrap();
            let rewrites: Vec<String> = (0..n)
                .map(|i| {
                    counter += 1;
                    format!("{}. Variant {counter}: {trigger}", i + 1)
                })
                .collect();
            let reply =
                json!({"choices": [{"message": {"role": "assistant", "content": rewrites.join("\n")}}]}).to_string();
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            );
            let _ = tx.send(auth);
        }
    });
    (endpoint, rx)
}

#[test]
fn live_mode_talks_to_a_local_server() {
    let (endpoint, rx) = stub_server();
    let d = tempfile::tempdir().unwrap();
    let cfg = small_config(
        d.path(),
        json!({"prompts": {"client": {"endpoint": endpoint, "backoff_ms": 1}}}),
    );
    let o = bin()
        .args(["gen-prompts", "--config", cfg.to_str().unwrap(), "--live", "--create"])
        .env("CONTROLREC_API_TOKEN", "stub-token")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let auths: Vec<String> = rx.try_iter().collect();
    assert!(!auths.is_empty());
    assert!(
        auths.iter().all(|a| a == "Authorization: Bearer stub-token"),
        "{auths:?}"
    );
    let reg = lines(&d.path().join("out/registry.jsonl"));
    assert_eq!(reg.len(), 40);
    assert!(reg.iter().any(|t| t["text"].as_str().unwrap().starts_with("Variant ")));
}
