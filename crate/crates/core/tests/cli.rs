use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn osdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_osdn"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn osdn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a small synthetic task and a short run config next to it.
fn setup(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let data = dir.join("data");
    let o = osdn(&["synth", "--k", "3", "--unknown", "1", "--n", "30", "--seed", "5", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.join("run.json");
    fs::write(
        &cfg,
        format!(r#"{{"task": "data/task.json", "output_dir": "out", "hyperparams": {{"epochs": {epochs}, "d_common": 8, "seed": 3}}}}"#),
    )
    .unwrap();
    cfg
}

#[test]
fn synth_is_reproducible_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["a", "b"] {
        let o = osdn(&["synth", "--seed", "11", "--n", "20", "--out", p(&dir.path().join(sub))]);
        assert_eq!(code(&o), 0);
    }
    for f in ["source.csv", "target.csv", "schema.json", "task.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let o = osdn(&["synth", "--k", "1", "--out", p(&dir.path().join("c"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_is_deterministic_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 4);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = osdn(&["train", "--config", p(&cfg), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["history.csv", "checkpoint.json", "metrics.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 5);
    assert!(history.starts_with("epoch,sup_s,sup_u,ss,st,ea,cp,sc,total"));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("metrics.json")).unwrap()).unwrap();
    for mode in ["acc", "ind"] {
        let acc = metrics[mode]["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(a.join("metadata.json").exists());
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["hyperparams"]["epochs"], 4);
    assert_eq!(resolved["task"]["kind"], "csv");
}

#[test]
fn train_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&osdn(&["train", "--config", p(&missing)])), 2);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"task": {"kind": "synth"}, "hyperparams": {"lr": -1.0}}"#).unwrap();
    assert_eq!(code(&osdn(&["train", "--config", p(&bad)])), 2);
    fs::write(&bad, r#"{"hyperparams": {}}"#).unwrap();
    assert_eq!(code(&osdn(&["train", "--config", p(&bad)])), 2);
    assert_eq!(code(&osdn(&["frobnicate"])), 2);
}

#[test]
fn eval_and_diagnose_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2);
    let out = dir.path().join("out");
    assert_eq!(code(&osdn(&["train", "--config", p(&cfg)])), 0);
    let ckpt = out.join("checkpoint.json");
    let task = dir.path().join("data").join("task.json");
    let ev = dir.path().join("eval");

    let o = osdn(&["eval", "--checkpoint", p(&ckpt), "--task", p(&task), "--mode", "IND", "--out", p(&ev)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["mode"], "ind");
    assert_eq!(m["per_category"].as_array().unwrap().len(), 2);
    let preds = fs::read_to_string(ev.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().next().unwrap(), "index,predicted,predicted_name,truth,truth_name");
    assert_eq!(preds.lines().count(), 1 + 4 * 30);
    assert!(ev.join("timing.json").exists());

    assert_eq!(code(&osdn(&["eval", "--checkpoint", p(&ckpt), "--task", p(&task), "--mode", "xyz", "--out", p(&ev)])), 2);

    let diag = dir.path().join("diag.json");
    assert_eq!(code(&osdn(&["diagnose", "--checkpoint", p(&ckpt), "--task", p(&cfg), "--out", p(&diag)])), 0);
    let d: serde_json::Value = serde_json::from_str(&fs::read_to_string(&diag).unwrap()).unwrap();
    assert!(d["sp"].as_f64().unwrap().abs() <= 1.0);
    assert!(d["avg_dmax"].as_f64().unwrap() >= 0.0);

    // a task with other feature dimensions cannot be evaluated with this checkpoint
    let other = dir.path().join("other");
    assert_eq!(code(&osdn(&["synth", "--k", "3", "--n", "10", "--d-source", "7", "--out", p(&other)])), 0);
    let o = osdn(&["eval", "--checkpoint", p(&ckpt), "--task", p(&other.join("task.json")), "--out", p(&ev)]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('7') && err.contains("20"), "{err}");
}

#[test]
fn ablate_writes_a_summary_row_per_group_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), 2);
    let out = dir.path().join("ab");
    let o = osdn(&["ablate", "--config", p(&cfg), "--groups", "full,F", "--seeds", "1,2", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("full,acc,2,"));
    assert!(rows[4].starts_with("F,ind,2,"));
    assert!(out.join("runs").join("F-seed2").join("metrics.json").exists());

    assert_eq!(code(&osdn(&["ablate", "--config", p(&cfg), "--groups", "G", "--out", p(&out)])), 2);
}
