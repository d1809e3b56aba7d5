use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sgfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgfm"))
        .args(args)
        .env_remove("SGFM_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    let cfg = format!(
        r#"{{"epochs": {}, "batch_size": 4, "model": {{"d": 8, "d_t": 4, "d_s": 6, "layers": 1, "kind": "equivariant"}}, "steps": 5}}"#,
        epochs
    );
    fs::write(&path, cfg).unwrap();
    path
}

fn make_data(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let o = sgfm(&["make-data", "--n-per-template", "5", "--seed", "3", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    data
}

#[test]
fn verify_bundled_passes() {
    let o = sgfm(&["verify"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 failed"));
}

#[test]
fn verify_missing_file_is_usage_error() {
    let o = sgfm(&["verify", "--data", "/definitely/not/here.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn verify_corrupted_file_names_group() {
    let dir = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(sgfm::sgdata::bundled_json()).unwrap();
    let groups = doc["groups"].as_array_mut().unwrap();
    let g = groups
        .iter_mut()
        .find(|g| g["dimension"] == 3 && g["number"] == 14)
        .unwrap();
    g["wyckoffs"][0]["maps"][1]["tau"][0] = serde_json::json!([1, 3]);
    let path = dir.path().join("bad.json");
    fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
    let o = sgfm(&["verify", "--data", p(&path)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let text = format!("{}{}", stderr(&o), String::from_utf8_lossy(&o.stdout));
    assert!(text.contains("P2_1/c") || text.contains("14"), "{}", text);
}

#[test]
fn unknown_export_format_is_usage_error() {
    let o = sgfm(&["export", "--format", "xyz", "x.json"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, "{\"epochs\": 1,\n \"learning_rat\": 0.1}").unwrap();
    let o = sgfm(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn zero_epoch_train_then_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_data(dir.path());
    let cfg = small_config(dir.path(), 0);
    let run = dir.path().join("run");
    let o = sgfm(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoint.json", "metrics.csv", "manifest.json"] {
        assert!(run.join(f).exists(), "{}", f);
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().filter(|l| !l.starts_with('#')).count(), 1);

    let out = dir.path().join("samples");
    let ckpt = run.join("checkpoint.json");
    let o = sgfm(&["sample", "--checkpoint", p(&ckpt), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let audit = fs::read_to_string(out.join("audit.csv")).unwrap();
    assert!(audit.lines().count() > 2);
    let files: Vec<_> = fs::read_dir(out.join("structures")).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(!files.is_empty());
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(&files[0]).unwrap()).unwrap();
    assert!(s["manifest_id"].is_string());

    let cif = dir.path().join("one.cif");
    let o = sgfm(&["export", "--format", "cif", "--out", p(&cif), p(&files[0])]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = sgfm(&["export", "--format", "csv", p(&cif)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn zero_count_sample_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_data(dir.path());
    let cfg = small_config(dir.path(), 0);
    let run = dir.path().join("run");
    assert_eq!(code(&sgfm(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&run)])), 0);
    let cond = dir.path().join("cond.jsonl");
    fs::write(&cond, "{\"group\": 221, \"wyckoffs\": [\"1a\", \"3c\"], \"atoms\": [0, 1]}\n").unwrap();
    let out = dir.path().join("s");
    let ckpt = run.join("checkpoint.json");
    let o = sgfm(&["sample", "--checkpoint", p(&ckpt), "--conditioning", p(&cond), "--count", "0", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let audit = fs::read_to_string(out.join("audit.csv")).unwrap();
    assert_eq!(audit.lines().filter(|l| !l.starts_with('#')).count(), 1);
    assert!(!out.join("structures").exists() || fs::read_dir(out.join("structures")).unwrap().count() == 0);
}

#[test]
fn train_and_sample_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_data(dir.path());
    let cfg = small_config(dir.path(), 2);
    let mut outputs = Vec::new();
    for r in 0..2 {
        let run = dir.path().join(format!("run{}", r));
        let o = sgfm(&["train", "--config", p(&cfg), "--data", p(&data), "--seed", "5", "--out", p(&run)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let out = dir.path().join(format!("s{}", r));
        let ckpt = run.join("checkpoint.json");
        let o = sgfm(&["sample", "--checkpoint", p(&ckpt), "--data", p(&data), "--seed", "9", "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let mut files: Vec<_> = fs::read_dir(out.join("structures")).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        let structures: Vec<Vec<u8>> = files.iter().map(|f| fs::read(f).unwrap()).collect();
        outputs.push((fs::read(run.join("checkpoint.json")).unwrap(), structures));
    }
    assert_eq!(outputs[0].0, outputs[1].0);
    assert_eq!(outputs[0].1, outputs[1].1);
}

#[test]
fn audit_flags_broken_structures() {
    let dir = tempfile::tempdir().unwrap();
    let data = make_data(dir.path());
    let mut files: Vec<_> = fs::read_dir(data.join("structures")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let o = sgfm(&["audit", p(&files[0])]);
    assert_eq!(code(&o), 0, "{}{}", stderr(&o), String::from_utf8_lossy(&o.stdout));

    let mut s: serde_json::Value = serde_json::from_str(&fs::read_to_string(&files[0]).unwrap()).unwrap();
    let x = s["frac"][0][0].as_f64().unwrap();
    s["frac"][0][0] = serde_json::json!(x + 0.1);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&s).unwrap()).unwrap();
    let o = sgfm(&["audit", p(&bad)]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bench_ga_reports_every_group() {
    let o = sgfm(&["bench-ga", "--sizes", "4", "--d", "8", "--reps", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 27);
}
