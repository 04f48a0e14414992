use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mixcast::data::{
    degrade_coverage, degrade_resolution, generate, to_csv_string, window, DatasetManifest, Part,
    SeriesDataset,
};
use mixcast::metrics::{EvalConfig, EvaluationReport, Prediction, NOT_APPLICABLE};
use mixcast::nn::{Checkpoint, Graph, Model, ModelConfig, Variant};
use mixcast::training::{evaluate_model, fit, Normalizer, TrainError};

use crate::config::{parse_levels, GraphKind, RunConfig};
use crate::manifest::{absolute, ensure_dir, read_file, sha256_hex, write_file, RunManifest};
use crate::{CliError, CompareArgs, EvaluateArgs, GenerateArgs, TrainArgs};

pub const DATA_CSV: &str = "data.csv";
pub const DATASET_MANIFEST: &str = "dataset.toml";
pub const CHECKPOINT: &str = "checkpoint.txt";
pub const PARTIAL_CHECKPOINT: &str = "checkpoint.partial.txt";
pub const TRAIN_LOG: &str = "train_log.txt";
pub const REPORT: &str = "report.txt";
pub const HORIZON_CSV: &str = "horizon.csv";
pub const CALIBRATION_CSV: &str = "calibration.csv";
pub const RIDGE_CSV: &str = "ridge.csv";

fn version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

pub fn cmd_generate(args: &GenerateArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let spec = &mut cfg.synthetic;
    if let Some(n) = args.nodes {
        spec.nodes = n as usize;
    }
    if let Some(s) = args.sessions {
        spec.sessions = s as usize;
    }
    if let Some(s) = args.steps {
        spec.steps_per_session = s as usize;
    }
    if let Some(s) = args.step_seconds {
        spec.step_seconds = s;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dataset = generate(spec).map_err(|e| CliError::Usage(e.to_string()))?;

    let dir = ensure_dir(&args.out)?;
    let csv = to_csv_string(&dataset);
    let csv_path = dir.join(DATA_CSV);
    write_file(&csv_path, csv.as_bytes())?;
    let manifest = DatasetManifest::describe(&dataset, DATA_CSV, sha256_hex(csv.as_bytes()), Some(spec.clone()));
    let manifest_path = dir.join(DATASET_MANIFEST);
    write_file(&manifest_path, manifest.to_toml().as_bytes())?;
    log::info!(
        "wrote {} nodes × {} sessions to {}",
        dataset.nodes(),
        dataset.sessions.len(),
        csv_path.display()
    );

    RunManifest {
        command: "generate".into(),
        version: version(),
        seed: spec.seed,
        config: cfg.to_toml(),
        dataset_manifest: manifest_path.clone(),
        checkpoint: None,
        report: None,
        artifacts: vec![csv_path, manifest_path],
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    }
    .write(&dir.join("generate-run.toml"))
}

/// Dataset and the degradations recorded alongside a model.
struct Prepared {
    manifest_path: PathBuf,
    csv_sha256: String,
    dataset: SeriesDataset,
}

fn load_dataset(manifest_path: &Path) -> Result<Prepared, CliError> {
    let manifest_path = absolute(manifest_path)?;
    let manifest = DatasetManifest::from_toml(&read_file(&manifest_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", manifest_path.display())))?;
    let dir = manifest_path.parent().expect("file has a parent");
    let csv = read_file(&dir.join(&manifest.csv))?;
    let csv_sha256 = sha256_hex(csv.as_bytes());
    if csv_sha256 != manifest.csv_sha256 {
        return Err(CliError::Data(format!(
            "{} does not match the digest in {}",
            manifest.csv,
            manifest_path.display()
        )));
    }
    let dataset = manifest.load_dataset(dir).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(Prepared {
        manifest_path,
        csv_sha256,
        dataset,
    })
}

fn degrade(
    d: SeriesDataset,
    coverage_fraction: f64,
    coverage_seed: u64,
    resolution_factor: usize,
) -> Result<SeriesDataset, CliError> {
    let usage = |e: mixcast::data::DataError| CliError::Usage(e.to_string());
    let d = if resolution_factor > 1 {
        degrade_resolution(&d, resolution_factor).map_err(usage)?
    } else {
        d
    };
    if coverage_fraction < 1.0 {
        let (masked, mask) = degrade_coverage(&d, coverage_fraction, coverage_seed).map_err(usage)?;
        log::info!("inputs kept for {} of {} nodes", mask.count(), d.nodes());
        Ok(masked)
    } else if coverage_fraction == 1.0 {
        Ok(d)
    } else {
        Err(CliError::Usage(format!("coverage fraction {coverage_fraction} outside (0, 1]")))
    }
}

fn graph_for(kind: GraphKind, nodes: usize) -> Option<Graph> {
    match kind {
        GraphKind::None => None,
        GraphKind::Chain => Some(Graph::chain(nodes)),
    }
}

fn loss_name(v: Variant) -> &'static str {
    if v.is_probabilistic() {
        "nll"
    } else {
        "mae"
    }
}

pub fn cmd_train(args: &TrainArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    if let Some(v) = args.variant {
        cfg.model.variant = v;
    }
    if let Some(k) = args.k {
        cfg.model.k = k as usize;
    }
    if let Some(h) = args.history {
        cfg.model.history = h as usize;
    }
    if let Some(h) = args.horizon {
        cfg.model.horizon = h as usize;
    }
    if let Some(g) = args.graph {
        cfg.model.graph = g;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e as usize;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b as usize;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(f) = args.coverage_fraction {
        cfg.data.coverage_fraction = f;
    }
    if let Some(s) = args.coverage_seed {
        cfg.data.coverage_seed = s;
    }
    if let Some(r) = args.resolution_factor {
        cfg.data.resolution_factor = r as usize;
    }
    cfg.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if cfg.model.variant == Variant::Norm {
        cfg.model.k = 1;
    }

    let prepared = load_dataset(&args.data)?;
    let data = degrade(
        prepared.dataset,
        cfg.data.coverage_fraction,
        cfg.data.coverage_seed,
        cfg.data.resolution_factor,
    )?;
    let normalizer = data.fit_normalizer().map_err(|e| CliError::Data(e.to_string()))?;
    let (h, f) = (cfg.model.history, cfg.model.horizon);
    let windows = |part| window(&data, part, h, f, &normalizer).map_err(|e| CliError::Usage(e.to_string()));
    let (train, val) = (windows(Part::Train)?, windows(Part::Val)?);
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Data(format!(
            "no complete {h}+{f}-step windows in the training or validation sessions"
        )));
    }
    let model_cfg = ModelConfig::new(cfg.model.variant, train.input_dim(), f, cfg.model.k);
    model_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let dir = ensure_dir(&args.out)?;
    let mut meta = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        meta.insert(k.to_string(), v);
    };
    put("variant", cfg.model.variant.to_string());
    put("loss", loss_name(cfg.model.variant).into());
    put("history", h.to_string());
    put("horizon", f.to_string());
    put("normalizer.mean", normalizer.mean.to_string());
    put("normalizer.std", normalizer.std.to_string());
    put("dataset_sha256", prepared.csv_sha256.clone());
    put("coverage_fraction", cfg.data.coverage_fraction.to_string());
    put("coverage_seed", cfg.data.coverage_seed.to_string());
    put("resolution_factor", cfg.data.resolution_factor.to_string());
    put("seed", cfg.train.seed.to_string());
    put("epochs", cfg.train.epochs.to_string());

    log::info!(
        "training {} on {} windows ({} validation), {} parameters",
        cfg.model.variant,
        train.len(),
        val.len(),
        Model::new(model_cfg.clone(), None, 0).map_or(0, |m| m.parameter_count())
    );
    let graph = graph_for(cfg.model.graph, data.nodes());
    let log_path = dir.join(TRAIN_LOG);
    let outcome = match fit(model_cfg, graph, &train, &val, &cfg.train) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            step,
            last_good,
        }) => {
            let partial = dir.join(PARTIAL_CHECKPOINT);
            Checkpoint {
                model: *last_good,
                meta,
            }
            .save(&partial)
            .map_err(|e| CliError::Data(e.to_string()))?;
            return Err(CliError::Training(format!(
                "loss diverged at epoch {epoch} (step {step}); best parameters so far in {}",
                partial.display()
            )));
        }
        Err(TrainError::Config(m)) => return Err(CliError::Usage(m)),
        Err(e) => return Err(CliError::Training(e.to_string())),
    };
    meta.insert("best_epoch".into(), outcome.best_epoch.to_string());
    meta.insert("batch_hash".into(), outcome.batch_hash.clone());

    let mut log_text = String::new();
    let _ = writeln!(
        log_text,
        "# variant={} loss={} initial_val_loss={}",
        cfg.model.variant,
        loss_name(cfg.model.variant),
        outcome.initial_val_loss
    );
    for r in &outcome.log {
        let _ = writeln!(log_text, "{r}");
    }
    let _ = writeln!(log_text, "# best_epoch={} batch_hash={}", outcome.best_epoch, outcome.batch_hash);
    write_file(&log_path, log_text.as_bytes())?;

    let ck_path = dir.join(CHECKPOINT);
    Checkpoint {
        model: outcome.best,
        meta,
    }
    .save(&ck_path)
    .map_err(|e| CliError::Data(e.to_string()))?;

    RunManifest {
        command: "train".into(),
        version: version(),
        seed: cfg.train.seed,
        config: cfg.to_toml(),
        dataset_manifest: prepared.manifest_path,
        checkpoint: Some(ck_path.clone()),
        report: None,
        artifacts: vec![ck_path, log_path],
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    }
    .write(&dir.join("train-run.toml"))
}

fn meta_value<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T, CliError> {
    let raw = meta
        .get(key)
        .ok_or_else(|| CliError::Data(format!("checkpoint lacks `{key}`")))?;
    raw.parse()
        .map_err(|_| CliError::Data(format!("checkpoint `{key}` = `{raw}` is invalid")))
}

pub fn cmd_evaluate(args: &EvaluateArgs, mut cfg: RunConfig) -> Result<(), CliError> {
    let start = Instant::now();
    if let Some(l) = &args.levels {
        cfg.eval.levels = l.clone();
    }
    if let Some(g) = args.grid_points {
        cfg.eval.grid_points = g as usize;
    }
    if let Some(c) = args.crps_points {
        cfg.eval.crps_points = c as usize;
    }
    let levels = parse_levels(&cfg.eval.levels)?;

    let ck_path = absolute(&args.checkpoint)?;
    let ck_text = read_file(&ck_path)?;
    let ck = Checkpoint::from_text(&ck_text).map_err(|e| CliError::Data(format!("{}: {e}", ck_path.display())))?;
    let dataset_manifest = match &args.data {
        Some(p) => p.clone(),
        None => {
            let run = ck_path.with_file_name("train-run.toml");
            RunManifest::read(&run)
                .map_err(|e| CliError::Usage(format!("no --data given and {e}")))?
                .dataset_manifest
        }
    };
    let prepared = load_dataset(&dataset_manifest)?;
    let expected: String = meta_value(&ck.meta, "dataset_sha256")?;
    if expected != prepared.csv_sha256 {
        return Err(CliError::Data("checkpoint was trained on a different dataset".into()));
    }
    let data = degrade(
        prepared.dataset,
        meta_value(&ck.meta, "coverage_fraction")?,
        meta_value(&ck.meta, "coverage_seed")?,
        meta_value(&ck.meta, "resolution_factor")?,
    )?;
    let normalizer = Normalizer::new(
        meta_value(&ck.meta, "normalizer.mean")?,
        meta_value(&ck.meta, "normalizer.std")?,
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    let history: usize = meta_value(&ck.meta, "history")?;
    let horizon = ck.model.horizon();
    let test = window(&data, Part::Test, history, horizon, &normalizer).map_err(|e| CliError::Data(e.to_string()))?;
    if test.is_empty() {
        return Err(CliError::Data("no complete windows in the test sessions".into()));
    }

    let (lo, hi, scale) = if args.normalized {
        (normalizer.transform(0.0), normalizer.transform(data.max_value), None)
    } else {
        (0.0, data.max_value, Some(&normalizer))
    };
    let mut eval_cfg = EvalConfig::with_interval_range(lo, hi);
    eval_cfg.levels = levels;
    eval_cfg.interval_points = cfg.eval.grid_points;
    eval_cfg.crps_points = cfg.eval.crps_points;
    let report = evaluate_model(&ck.model, &test, scale, &eval_cfg).map_err(|e| CliError::Data(e.to_string()))?;

    let variant = ck.model.variant();
    let mut meta = BTreeMap::new();
    meta.insert("variant".to_string(), variant.to_string());
    meta.insert("components".into(), ck.model.config().head.components.to_string());
    meta.insert("units".into(), if args.normalized { "normalized" } else { "raw" }.into());
    meta.insert("dataset_sha256".into(), prepared.csv_sha256.clone());
    meta.insert("checkpoint_sha256".into(), sha256_hex(ck_text.as_bytes()));
    for key in ["coverage_fraction", "resolution_factor", "seed"] {
        meta.insert(key.into(), ck.meta.get(key).cloned().unwrap_or_default());
    }
    meta.insert("grid_points".into(), cfg.eval.grid_points.to_string());
    meta.insert("crps_points".into(), cfg.eval.crps_points.to_string());
    meta.insert("test_windows".into(), test.len().to_string());

    let dir = ensure_dir(&args.out)?;
    let report_path = dir.join(REPORT);
    write_file(&report_path, report.to_text(&meta).as_bytes())?;
    let horizon_path = dir.join(HORIZON_CSV);
    write_file(&horizon_path, horizon_csv(&report).as_bytes())?;
    let calibration_path = dir.join(CALIBRATION_CSV);
    write_file(&calibration_path, calibration_csv(&report).as_bytes())?;
    let mut artifacts = vec![report_path.clone(), horizon_path, calibration_path];

    if variant.is_probabilistic() {
        if args.ridge_window >= test.len() || args.ridge_node >= test.nodes() {
            return Err(CliError::Usage(format!(
                "ridge window {} / node {} outside {} windows × {} nodes",
                args.ridge_window,
                args.ridge_node,
                test.len(),
                test.nodes()
            )));
        }
        let ridge = ridge_csv(&ck.model, &test, args.ridge_window, args.ridge_node, scale, (lo, hi), cfg.eval.grid_points)?;
        let ridge_path = dir.join(RIDGE_CSV);
        write_file(&ridge_path, ridge.as_bytes())?;
        artifacts.push(ridge_path);
    } else {
        log::info!("point forecasts have no density ridge; {RIDGE_CSV} not written");
    }
    println!(
        "{variant}: CRPS {:.4}  mAW {}  mCCE {}  MAE {:.4}  RMSE {:.4}",
        report.crps_mean,
        fmt_opt(report.maw),
        fmt_opt(report.mcce),
        report.mae,
        report.rmse
    );

    RunManifest {
        command: "evaluate".into(),
        version: version(),
        seed: meta_value(&ck.meta, "seed")?,
        config: cfg.to_toml(),
        dataset_manifest: prepared.manifest_path,
        checkpoint: Some(ck_path),
        report: Some(report_path),
        artifacts,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    }
    .write(&dir.join("evaluate-run.toml"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| NOT_APPLICABLE.to_string(), |x| format!("{x:.4}"))
}

fn opt_csv(v: Option<f64>) -> String {
    v.map_or_else(|| NOT_APPLICABLE.to_string(), |x| x.to_string())
}

fn horizon_csv(r: &EvaluationReport) -> String {
    let mut s = String::from("step,crps,maw,mcce\n");
    for h in &r.per_horizon {
        let _ = writeln!(s, "{},{},{},{}", h.step, h.crps, opt_csv(h.maw), opt_csv(h.mcce));
    }
    s
}

fn calibration_csv(r: &EvaluationReport) -> String {
    let mut s = String::from("level,coverage,width\n");
    for p in &r.calibration_curve {
        let _ = writeln!(s, "{},{},{}", p.level, p.coverage, p.width);
    }
    s
}

/// Predicted density of one node over every output step of one test window.
fn ridge_csv(
    model: &Model,
    test: &mixcast::data::WindowSet,
    w: usize,
    node: usize,
    normalizer: Option<&Normalizer>,
    (lo, hi): (f64, f64),
    points: usize,
) -> Result<String, CliError> {
    let inputs = test.inputs.slice(ndarray::s![w..w + 1, .., ..]).to_owned();
    let preds = model.predict(&inputs).map_err(|e| CliError::Data(e.to_string()))?;
    let horizon = test.horizon;
    let dx = (hi - lo) / (points - 1) as f64;
    let mut s = String::from("step,x,density,target\n");
    for t in 0..horizon {
        let p = &preds[node * horizon + t];
        let p = normalizer.map_or_else(|| p.clone(), |n| n.inverse_prediction(p));
        let target = test.targets[[w, node, t]];
        let target = normalizer.map_or(target, |n| n.inverse(target));
        let Prediction::Mixture(m) = p else {
            unreachable!("ridge is only drawn for mixtures")
        };
        for (i, d) in m.density_grid(lo, dx, points).into_iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{}", t + 1, lo + i as f64 * dx, d, target);
        }
    }
    Ok(s)
}

struct Row {
    label: String,
    variant: String,
    report: EvaluationReport,
}

pub fn cmd_compare(args: &CompareArgs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut reference: Option<(String, String, usize)> = None;
    for path in &args.reports {
        let text = read_file(path)?;
        let (meta, report) =
            EvaluationReport::from_text(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let key = (
            meta.get("dataset_sha256").cloned().unwrap_or_default(),
            meta.get("units").cloned().unwrap_or_default(),
            report.elements,
        );
        match &reference {
            None => reference = Some(key),
            Some(r) if *r != key => {
                return Err(CliError::Data(format!(
                    "{} was scored on a different dataset, unit system or test set",
                    path.display()
                )))
            }
            Some(_) => {}
        }
        rows.push(Row {
            label: path.display().to_string(),
            variant: meta.get("variant").cloned().unwrap_or_else(|| "?".into()),
            report,
        });
    }
    let base = rows
        .iter()
        .position(|r| r.variant == Variant::Det.as_str())
        .unwrap_or(0);
    let base_crps = rows[base].report.crps_mean;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<8} {:>10} {:>10} {:>12} {:>10} {:>10} {:>10} {:>10} {:>10}  report",
        "variant", "crps", "rel_crps%", "improvement%", "maw", "mcce", "mae", "mape", "rmse"
    );
    for (i, r) in rows.iter().enumerate() {
        let rel = 100.0 * r.report.crps_mean / base_crps;
        let imp = 100.0 * (base_crps - r.report.crps_mean) / base_crps;
        let _ = writeln!(
            out,
            "{:<8} {:>10.4} {:>10.2} {:>12.2} {:>10} {:>10} {:>10.4} {:>10} {:>10.4}  {}{}",
            r.variant,
            r.report.crps_mean,
            rel,
            imp,
            fmt_opt(r.report.maw),
            fmt_opt(r.report.mcce),
            r.report.mae,
            fmt_opt(r.report.mape),
            r.report.rmse,
            r.label,
            if i == base { " (baseline)" } else { "" }
        );
    }
    print!("{out}");
    if let Some(p) = &args.out {
        write_file(p, out.as_bytes())?;
    }
    Ok(())
}
