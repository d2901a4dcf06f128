use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn resadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resadapt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_documents_config_keys() {
    let out = resadapt(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["optimizer.*", "train.stage_epochs", "ablation.no_val", "Exit codes"] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn usage_error_exits_one() {
    assert_eq!(resadapt(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(resadapt(&[]).status.code(), Some(1));
}

#[test]
fn missing_dataset_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = resadapt(&[
        "train",
        "--data",
        path(&dir.path().join("absent")),
        "--out",
        path(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[optimizer]\nlearning_rate = 0.1\n").unwrap();
    let out = resadapt(&["train", "--data", path(dir.path()), "--out", path(dir.path()), "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[loss]\nlambda = -1.0\n[eval]\ntrials = 0\n").unwrap();
    let out = resadapt(&["train", "--data", path(dir.path()), "--out", path(dir.path()), "--config", path(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lambda") && err.contains("trials"), "{err}");
}

#[test]
fn selfcheck_passes() {
    let out = resadapt(&["selfcheck"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert_eq!(String::from_utf8_lossy(&out.stdout).matches("PASS").count(), 2);
}

#[test]
fn synthesize_train_eval_embed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = resadapt(&["synthesize", "--fixture", "--identities", "4", "--images-per-identity", "3", "--out", path(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").exists());
    assert!(data.join("0000_c1s1_000000_00_r4.png").exists());

    let out = resadapt(&["train", "--data", path(&data), "--out", path(&run), "--epochs", "2", "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.json", "config.toml", "train.jsonl", "manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let steps = fs::read_to_string(run.join("train.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(steps.lines().next().unwrap()).unwrap();
    assert!(first["total"].as_f64().unwrap().is_finite());
    let config = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(config.contains("seed = 3"));

    let ckpt = run.join("checkpoint.json");
    let eval_dir = dir.path().join("eval");
    let out = resadapt(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--trials", "2", "--out", path(&eval_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(eval_dir.join("report.tsv")).unwrap();
    assert!(report.contains("rank-1\t"));
    assert_eq!(String::from_utf8_lossy(&out.stdout), report);

    let out = resadapt(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--trials", "1", "--unseen-rate", "5"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("rate=5\tlevel=1\tratio=1/4\tunseen"));

    let tsv = dir.path().join("emb.tsv");
    let out = resadapt(&["embed", "--checkpoint", path(&ckpt), "--data", path(&data), "--out", path(&tsv), "--rate", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&tsv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 12);
    let cols: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(cols[1], "2");
    assert_eq!(cols.len(), 3 + 32);
}

#[test]
fn logs_are_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = resadapt(&["synthesize", "--fixture", "--identities", "2", "--images-per-identity", "2", "--out", path(dir.path())]);
    assert!(out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().next().expect("a log line");
    let v: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["level"], "INFO");
}
