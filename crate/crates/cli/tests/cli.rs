use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn gnnd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gnnd"))
        .args(args)
        .env("GNND_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, edit: impl FnOnce(&mut Value)) -> String {
    let mut v = json!({
        "seed": 1,
        "dataset": {"synthetic": {"task": "categorical", "num_graphs": 24, "min_nodes": 4, "max_nodes": 7}},
        "model": {
            "arch": "mpnn_vn", "num_layers": 2, "latent_dim": 8, "mlp_hidden": 8,
            "node_vocab": 3, "edge_vocab": 3, "graph_out": 2, "node_out": 3
        },
        "train": {
            "task": "graph_classification",
            "schedule": {"warmup_steps": 1, "warmup_start_lr": 1e-4, "max_lr": 1e-3, "cosine_cycle_length": 20},
            "noise": {"kind": "category_flip", "flip_rate": 0.1, "lambda": 0.1}
        },
        "batch": {"max_nodes": 64, "max_edges": 512, "max_graphs": 6},
        "max_steps": 6,
        "eval_interval": 3,
        "probe_graphs": 3
    });
    edit(&mut v);
    let path = dir.join("config.json");
    fs::write(&path, v.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn train_eval_compare_and_profile() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), |_| {});
    let run = tmp.path().join("run");
    let run_s = run.to_string_lossy().into_owned();
    let o = gnnd(&["train", "--config", &cfg, "--out", &run_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("metrics.csv").is_file());

    let o = gnnd(&["eval", &run_s]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("accuracy,"));

    let mad = tmp.path().join("mad.csv");
    let o = gnnd(&["mad-profile", &run_s, "--out", &mad.to_string_lossy()]);
    assert!(o.status.success());
    assert_eq!(fs::read(&mad).unwrap(), fs::read(run.join("mad_profile.csv")).unwrap());

    let o = gnnd(&["compare", &run_s, &run_s]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1 + 2 + 1);
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), |_| {});
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(gnnd(&["train", "--config", &cfg, "--out", &a.to_string_lossy()])
        .status
        .success());
    assert!(
        gnnd(&["train", "--config", &cfg, "--seed", "9", "--out", &b.to_string_lossy()])
            .status
            .success()
    );
    assert_ne!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
    let manifest: Value = serde_json::from_slice(&fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 9);
}

#[test]
fn generate_writes_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), |_| {});
    let out = tmp.path().join("data.jsonl.gz");
    let o = gnnd(&["generate", "--config", &cfg, "--out", &out.to_string_lossy()]);
    assert!(o.status.success());
    let data = gnnd_core::graph::read_dataset(&out).unwrap();
    assert_eq!(data.len(), 24);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = config(tmp.path(), |v| v["model"]["num_layers"] = json!(0));
    let out = tmp.path().join("x").to_string_lossy().into_owned();
    let o = gnnd(&["train", "--config", &bad, "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.num_layers"));

    let o = gnnd(&["train", "--config", "/nonexistent/config.json", "--out", &out]);
    assert_eq!(o.status.code(), Some(4));

    let nan = config(tmp.path(), |v| {
        v["train"]["schedule"]["warmup_start_lr"] = json!(1e250);
        v["train"]["schedule"]["max_lr"] = json!(1e250);
    });
    let o = gnnd(&["train", "--config", &nan, "--out", &out]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&out).join("diagnostics.txt").is_file());

    let cfg = config(tmp.path(), |_| {});
    let o = Command::new(env!("CARGO_BIN_EXE_gnnd"))
        .args(["generate", "--config", &cfg, "--out", &out])
        .env("GNND_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
