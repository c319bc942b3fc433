use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualfuse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn dualfuse")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Small enough that a full train takes well under a second.
fn tiny_config(dir: &Path) -> String {
    let cfg = json!({
        "corpus": {"samples": 120, "history": 2, "episode_len": 4, "test_fraction": 0.3, "missing_rate": 0.3},
        "model": {"d_model": 8, "layers": 1, "task_head_layers": 2, "conv_channels": [4, 4],
                  "visual_hidden": 8, "decoder_channels": 4, "decoder_width": 4},
        "train": {"epochs": 2, "batch_size": 16},
        "sweep": {"noise_rates": [0.0, 0.5, 1.0], "missing_rates": [0.0, 0.5], "missing_modalities": [1]},
        "seed": 3
    });
    let path = dir.join("tiny.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_corpus_fails_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let absent = dir.path().join("nowhere.bin");
    let out = run(&["train", "--config", &cfg, "--corpus", s(&absent), "--out", s(&dir.path().join("run"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&absent)));
}

#[test]
fn bad_config_fails_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "{\"model\": {\"d_model\": \"wide\"}}").unwrap();
    let out = run(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("c.bin"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&cfg)));
}

#[test]
fn training_log_is_reproducible_and_records_ablation() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("corpus.bin");
    ok(&["gen", "--config", &cfg, "--out", s(&corpus)]);
    assert!(dir.path().join("corpus.bin.manifest.json").exists());
    let logs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            ok(&["train", "--config", &cfg, "--corpus", s(&corpus), "--out", s(&out)]);
            assert!(out.join("model.ckpt").exists());
            fs::read(out.join("train_log.csv")).unwrap()
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    let text = String::from_utf8(logs[0].clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# ablation: none"));
    assert_eq!(lines.next(), Some("epoch,cls,modal_1,modal_2,modal_3,cali,recover,total,train_acc,test_acc"));
    assert_eq!(lines.count(), 2);

    let ablated = dir.path().join("ablated");
    ok(&["train", "--config", &cfg, "--corpus", s(&corpus), "--out", s(&ablated), "--ablate", "calibration-off,static-weights"]);
    let head = fs::read_to_string(ablated.join("train_log.csv")).unwrap();
    assert!(head.starts_with("# ablation: calibration-off,static-weights\n"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(ablated.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["ablation"], "calibration-off,static-weights");
    assert_eq!(manifest["inputs"][0][0], "corpus");
}

#[test]
fn unknown_ablation_switch_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&["train", "--config", &cfg, "--out", s(&dir.path().join("r")), "--ablate", "no-such-thing"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-thing"));
}

#[test]
fn ablate_and_eval_write_consistent_tables() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let corpus = dir.path().join("corpus.bin");
    ok(&["gen", "--config", &cfg, "--out", s(&corpus)]);
    let run_dir = dir.path().join("run");
    ok(&["ablate", "--config", &cfg, "--corpus", s(&corpus), "--out", s(&run_dir)]);

    let test_size = {
        let c = dualfuse::cli::load_corpus(&corpus).unwrap();
        c.ids(dualfuse::datasim::Split::Test).len()
    };
    let mut rdr = csv::Reader::from_path(run_dir.join("weights.csv")).unwrap();
    let header = rdr.headers().unwrap().clone();
    let w_cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("w_")).map(|(i, _)| i).collect();
    assert_eq!(w_cols.len(), 3);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), test_size);
    for row in &rows {
        let sum: f64 = w_cols.iter().map(|&i| row[i].parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    let metrics = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("cell,metric,value\n"));
    assert!(metrics.contains(",accuracy,"));

    let eval_dir = dir.path().join("eval");
    let out = ok(&["eval", "--checkpoint", s(&run_dir.join("model.ckpt")), "--corpus", s(&corpus), "--out", s(&eval_dir), "--noise-rate", "1.0"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("noise100"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn sweep_is_complete_resumable_and_order_independent() {
    let dir = TempDir::new().unwrap();
    let cfg = tiny_config(dir.path());
    let first = dir.path().join("first");
    ok(&["sweep", "--config", &cfg, "--out", s(&first)]);
    let table = fs::read(first.join("sweep.csv")).unwrap();
    let text = String::from_utf8(table.clone()).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
    assert_eq!(fs::read_dir(first.join("cells")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "json").count(), 6);

    // A second run with everything finished recomputes nothing.
    let cell = first.join("cells").join("noise050_missing050_m1.json");
    let stamp = fs::metadata(&cell).unwrap().modified().unwrap();
    ok(&["sweep", "--config", &cfg, "--out", s(&first)]);
    assert_eq!(fs::metadata(&cell).unwrap().modified().unwrap(), stamp);

    // Losing one cell reruns just that cell and reproduces the table.
    fs::remove_file(&cell).unwrap();
    ok(&["sweep", "--config", &cfg, "--out", s(&first)]);
    assert_eq!(fs::read(first.join("sweep.csv")).unwrap(), table);

    // Parallel cells land in the same table.
    let second = dir.path().join("second");
    ok(&["sweep", "--config", &cfg, "--out", s(&second), "--jobs", "3"]);
    assert_eq!(fs::read(second.join("sweep.csv")).unwrap(), table);
}

#[test]
fn selftest_passes() {
    let out = ok(&["selftest", "--trials", "2"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PASS grad"));
    assert!(!text.contains("FAIL"));
}
