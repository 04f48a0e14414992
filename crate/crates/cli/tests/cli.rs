use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn mixcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixcast"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("MIXCAST_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mixcast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn sha(p: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(p).unwrap()).to_vec()
}

fn small_dataset(dir: &Path) -> PathBuf {
    let out = dir.join("data");
    ok(&[
        "generate", "--nodes", "6", "--sessions", "10", "--steps", "40", "--seed", "7", "--out", s(&out),
    ]);
    out.join("dataset.toml")
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--epochs", "2", "--seed", "3"];
    args.extend_from_slice(extra);
    ok(&args);
}

/// `key = value` lookup inside a report section.
fn report_value(report: &str, section: &str, key: &str) -> String {
    let header = format!("[{section}]");
    report
        .lines()
        .skip_while(|l| *l != header)
        .skip(1)
        .take_while(|l| !l.starts_with('['))
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("{section}.{key} missing"))
        .to_string()
}

#[test]
fn generate_is_deterministic_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&["generate", "--nodes", "50", "--sessions", "30", "--seed", "7", "--out", s(dir)]);
    }
    for f in ["data.csv", "dataset.toml"] {
        assert_eq!(sha(&a.join(f)), sha(&b.join(f)), "{f} differs");
    }
    let run: toml::Table = toml::from_str(&std::fs::read_to_string(a.join("generate-run.toml")).unwrap()).unwrap();
    assert_eq!(run["seed"].as_integer(), Some(7));
    assert_eq!(run["command"].as_str(), Some("generate"));
    let csv = std::fs::read_to_string(a.join("data.csv")).unwrap();
    // header + 30 sessions × 80 steps
    assert_eq!(csv.lines().count(), 1 + 30 * 80);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    assert_eq!(mixcast(&["generate", "--nodes", "0", "--out", out]).status.code(), Some(2));
    assert_eq!(mixcast(&["bogus"]).status.code(), Some(2));
    let missing = tmp.path().join("nope.toml");
    assert_eq!(
        mixcast(&["train", "--data", s(&missing), "--out", out]).status.code(),
        Some(3)
    );
    let data = small_dataset(tmp.path());
    let bad_cfg = tmp.path().join("bad.toml");
    std::fs::write(&bad_cfg, "[model]\nbogus = 1\n").unwrap();
    assert_eq!(
        mixcast(&["--config", s(&bad_cfg), "train", "--data", s(&data), "--out", out])
            .status
            .code(),
        Some(2)
    );
    // Tampered CSV no longer matches the hash in its manifest.
    let csv = data.parent().unwrap().join("data.csv");
    let mut text = std::fs::read_to_string(&csv).unwrap();
    let last = text.lines().next_back().unwrap().to_string();
    text.push_str(&last);
    std::fs::write(&csv, text).unwrap();
    assert_eq!(
        mixcast(&["train", "--data", s(&data), "--out", out]).status.code(),
        Some(3)
    );
}

#[test]
fn train_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());

    let det = tmp.path().join("det");
    train(&data, &det, &["--variant", "det"]);
    let ckpt = std::fs::read_to_string(det.join("checkpoint.txt")).unwrap();
    assert!(ckpt.contains("head.point"));
    assert!(!ckpt.contains("head.logits"));
    let log = std::fs::read_to_string(det.join("train_log.txt")).unwrap();
    assert!(log.contains("loss=mae"));
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch=")).count(), 2);

    let norm = tmp.path().join("norm");
    train(&data, &norm, &["--variant", "norm", "--k", "5"]);
    let ckpt = std::fs::read_to_string(norm.join("checkpoint.txt")).unwrap();
    assert!(ckpt.contains("\ncomponents = 1\n"), "norm checkpoint must hold one component");

    let gmm = tmp.path().join("gmm");
    ok(&[
        "train", "--data", s(&data), "--out", s(&gmm), "--variant", "gmm", "--k", "5", "--epochs", "6", "--seed", "3",
    ]);
    let log = std::fs::read_to_string(gmm.join("train_log.txt")).unwrap();
    assert!(log.contains("loss=nll"));
    let initial: f64 = log
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .find_map(|t| t.strip_prefix("initial_val_loss="))
        .unwrap()
        .parse()
        .unwrap();
    let last: f64 = log
        .lines()
        .rfind(|l| l.starts_with("epoch="))
        .unwrap()
        .split_whitespace()
        .find_map(|t| t.strip_prefix("val_loss="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(last < initial, "val loss {last} did not improve on {initial}");

    // Every path named in the run manifest exists.
    let run: toml::Table = toml::from_str(&std::fs::read_to_string(gmm.join("train-run.toml")).unwrap()).unwrap();
    for p in run["artifacts"].as_array().unwrap() {
        assert!(Path::new(p.as_str().unwrap()).exists());
    }
    assert!(Path::new(run["checkpoint"].as_str().unwrap()).exists());
    assert!(Path::new(run["dataset_manifest"].as_str().unwrap()).exists());
}

#[test]
fn evaluate_point_and_mixture() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());

    let det = tmp.path().join("det");
    train(&data, &det, &["--variant", "det"]);
    ok(&["evaluate", "--checkpoint", s(&det.join("checkpoint.txt")), "--out", s(&det)]);
    let report = std::fs::read_to_string(det.join("report.txt")).unwrap();
    let crps: f64 = report_value(&report, "summary", "crps").parse().unwrap();
    let mae: f64 = report_value(&report, "summary", "mae").parse().unwrap();
    assert!((crps - mae).abs() < 1e-12, "point CRPS {crps} vs MAE {mae}");
    assert_eq!(report_value(&report, "summary", "maw"), "n/a");
    assert_eq!(report_value(&report, "summary", "mcce"), "n/a");
    assert!(!det.join("ridge.csv").exists());

    let gmm = tmp.path().join("gmm");
    train(&data, &gmm, &["--variant", "gmm"]);
    ok(&[
        "evaluate", "--checkpoint", s(&gmm.join("checkpoint.txt")), "--data", s(&data), "--out", s(&gmm),
    ]);
    let report = std::fs::read_to_string(gmm.join("report.txt")).unwrap();
    for key in ["crps", "maw", "mcce", "mae", "mape", "rmse"] {
        let v: f64 = report_value(&report, "summary", key).parse().unwrap();
        assert!(v.is_finite() && v >= 0.0, "{key} = {v}");
    }
    let calib = std::fs::read_to_string(gmm.join("calibration.csv")).unwrap();
    assert_eq!(calib.lines().count(), 1 + 10);
    let horizon = std::fs::read_to_string(gmm.join("horizon.csv")).unwrap();
    assert_eq!(horizon.lines().count(), 1 + 10);
    let ridge = std::fs::read_to_string(gmm.join("ridge.csv")).unwrap();
    assert!(ridge.starts_with("step,x,density,target"));

    let run: toml::Table = toml::from_str(&std::fs::read_to_string(gmm.join("evaluate-run.toml")).unwrap()).unwrap();
    assert!(Path::new(run["report"].as_str().unwrap()).exists());
    for p in run["artifacts"].as_array().unwrap() {
        assert!(Path::new(p.as_str().unwrap()).exists());
    }
}

#[test]
fn pipeline_reports_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let reports: Vec<PathBuf> = ["one", "two"]
        .iter()
        .map(|name| {
            let root = tmp.path().join(name);
            let data = small_dataset(&root);
            let run = root.join("gmm");
            train(&data, &run, &["--variant", "gmm"]);
            ok(&["evaluate", "--checkpoint", s(&run.join("checkpoint.txt")), "--out", s(&run)]);
            run.join("report.txt")
        })
        .collect();
    assert_eq!(
        std::fs::read(&reports[0]).unwrap(),
        std::fs::read(&reports[1]).unwrap()
    );
}

fn crafted_report(dir: &Path, name: &str, variant: &str, crps: f64, dataset: &str) -> PathBuf {
    let maw = if variant == "det" { "n/a".to_string() } else { "3".to_string() };
    let text = format!(
        "# mixcast evaluation report v1\n[meta]\ndataset_sha256 = {dataset}\nunits = raw\nvariant = {variant}\n\
         [summary]\nelements = 100\nhorizon = 1\ncrps = {crps}\nmaw = {maw}\nmcce = {maw}\nmae = {crps}\n\
         mape = 10\nrmse = {crps}\nclipped_grids = 0\n[per_horizon]\nstep,crps,maw,mcce\n1,{crps},{maw},{maw}\n\
         [calibration]\nlevel,coverage,width\n"
    );
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn table_row<'a>(table: &'a str, variant: &str) -> Vec<&'a str> {
    table
        .lines()
        .find(|l| l.split_whitespace().next() == Some(variant))
        .unwrap_or_else(|| panic!("no {variant} row in\n{table}"))
        .split_whitespace()
        .collect()
}

#[test]
fn compare_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let det = crafted_report(dir, "det.txt", "det", 2.0, "aa");
    let gmm = crafted_report(dir, "gmm.txt", "gmm", 1.0, "aa");
    let table_path = dir.join("table.txt");
    let out = ok(&["compare", s(&gmm), s(&det), "--out", s(&table_path)]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert_eq!(std::fs::read_to_string(&table_path).unwrap(), table);
    let det_row = table_row(&table, "det");
    assert_eq!(det_row[2].parse::<f64>().unwrap(), 100.0);
    assert!(table.lines().any(|l| l.starts_with("det") && l.contains("(baseline)")));
    let gmm_row = table_row(&table, "gmm");
    assert_eq!(gmm_row[2].parse::<f64>().unwrap(), 50.0);
    assert_eq!(gmm_row[3].parse::<f64>().unwrap(), 50.0);

    // A report compared with itself shows no improvement.
    let twin = dir.join("twin.txt");
    std::fs::copy(&gmm, &twin).unwrap();
    let out = ok(&["compare", s(&gmm), s(&twin)]);
    let table = String::from_utf8(out.stdout).unwrap();
    for line in table.lines().skip(1) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(cols[3].parse::<f64>().unwrap(), 0.0);
    }

    let other = crafted_report(dir, "other.txt", "gmm", 1.0, "bb");
    assert_eq!(mixcast(&["compare", s(&det), s(&other)]).status.code(), Some(3));
}
