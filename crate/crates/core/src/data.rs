//! Datasets: synthetic regime-switching traffic, quality degradation,
//! sliding windows and CSV import/export.

use std::fmt::Write as _;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use ndarray::{s, Array2, Array3};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::training::Normalizer;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Extra per-node input channels after the history window: session phase
/// (sin, cos) and the availability flag.
pub const SIDE_CHANNELS: usize = 3;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: timestamp {timestamp} does not advance")]
    NonMonotone { line: usize, timestamp: String },
    #[error("{} value(s) outside [0, {max}]: {}", offenders.len(), format_offenders(offenders))]
    OutOfRange {
        max: f64,
        offenders: Vec<(usize, String, f64)>,
    },
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

fn format_offenders(o: &[(usize, String, f64)]) -> String {
    o.iter()
        .take(10)
        .map(|(line, col, v)| format!("line {line} column {col} = {v}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// When congestion is likely within a session.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DemandProfile {
    /// Constant propensity 1.
    Flat,
    /// Gaussian bump over the session phase `u ∈ [0, 1)`.
    Peak { center: f64, width: f64 },
}

impl DemandProfile {
    pub fn at(&self, phase: f64) -> f64 {
        match *self {
            DemandProfile::Flat => 1.0,
            DemandProfile::Peak { center, width } => {
                let z = (phase - center) / width;
                (-0.5 * z * z).exp()
            }
        }
    }
}

/// Two-state (free-flow / congested) speed process of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRegime {
    pub free_speed: f64,
    pub congested_speed: f64,
    /// Per-step free→congested probability at full demand.
    pub p_onset: f64,
    /// Per-step congested→free probability at zero demand.
    pub p_clear: f64,
    /// Observation noise standard deviation.
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub nodes: usize,
    pub sessions: usize,
    pub steps_per_session: usize,
    pub step_seconds: u32,
    pub max_speed: f64,
    pub demand: DemandProfile,
    /// How strongly demand suppresses clearing: `P(clear) = p_clear·(1 − hold·d)`.
    pub hold: f64,
    pub seed: u64,
    /// Per-node regimes; generated from `seed` by [`SyntheticSpec::default_regimes`]
    /// when empty.
    #[serde(default)]
    pub regimes: Vec<NodeRegime>,
    /// Share of nodes drawn as congestion-prone by `default_regimes`.
    pub congestion_prone_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            nodes: 50,
            sessions: 30,
            steps_per_session: 80,
            step_seconds: 180,
            max_speed: 14.0,
            demand: DemandProfile::Peak {
                center: 0.5,
                width: 0.18,
            },
            hold: 0.8,
            seed: 7,
            regimes: Vec::new(),
            congestion_prone_fraction: 0.7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.nodes == 0 || self.sessions == 0 || self.steps_per_session == 0 {
            return Err(DataError::Invalid(
                "nodes, sessions and steps per session must be positive".into(),
            ));
        }
        if self.step_seconds == 0 || !(self.max_speed > 0.0) {
            return Err(DataError::Invalid("step size and max speed must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hold) || !(0.0..=1.0).contains(&self.congestion_prone_fraction)
        {
            return Err(DataError::Invalid("hold and prone fraction must lie in [0, 1]".into()));
        }
        if !self.regimes.is_empty() && self.regimes.len() != self.nodes {
            return Err(DataError::Invalid(format!(
                "{} regimes for {} nodes",
                self.regimes.len(),
                self.nodes
            )));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            let in_range = |v: f64| (0.0..=self.max_speed).contains(&v);
            if !in_range(r.free_speed) || !in_range(r.congested_speed) {
                return Err(DataError::Invalid(format!("node {i}: speeds outside [0, max]")));
            }
            if !(0.0..=1.0).contains(&r.p_onset) || !(0.0..=1.0).contains(&r.p_clear) {
                return Err(DataError::Invalid(format!("node {i}: switch probability outside [0, 1]")));
            }
            if !(r.noise >= 0.0) {
                return Err(DataError::Invalid(format!("node {i}: negative noise")));
            }
        }
        Ok(())
    }

    /// Seeded per-node regimes: congestion-prone nodes jam readily at peak
    /// demand, the rest rarely.
    pub fn default_regimes(&self) -> Vec<NodeRegime> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let prone = (self.congestion_prone_fraction * self.nodes as f64).round() as usize;
        let mut prone_set = vec![false; self.nodes];
        for i in sample_indices(&mut rng, self.nodes, prone.min(self.nodes)) {
            prone_set[i] = true;
        }
        let scale = self.max_speed / 14.0;
        (0..self.nodes)
            .map(|i| NodeRegime {
                free_speed: rng.random_range(10.0..12.5) * scale,
                congested_speed: rng.random_range(2.0..4.5) * scale,
                p_onset: if prone_set[i] {
                    rng.random_range(0.06..0.12)
                } else {
                    rng.random_range(0.0..0.01)
                },
                p_clear: rng.random_range(0.08..0.15),
                noise: rng.random_range(0.6..1.0) * scale,
            })
            .collect()
    }

    pub fn regimes(&self) -> Vec<NodeRegime> {
        if self.regimes.is_empty() {
            self.default_regimes()
        } else {
            self.regimes.clone()
        }
    }
}

/// One contiguous recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub start: NaiveDateTime,
    /// `steps × nodes`, raw units.
    pub values: Array2<f64>,
    /// True where no observation exists.
    pub missing: Array2<bool>,
}

impl Session {
    pub fn steps(&self) -> usize {
        self.values.nrows()
    }
}

/// Subset of nodes whose inputs the model may see.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoverageMask {
    pub covered: Vec<bool>,
    pub seed: u64,
}

impl CoverageMask {
    pub fn count(&self) -> usize {
        self.covered.iter().filter(|&&c| c).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Split {
    /// 70/10/20 by contiguous session blocks.
    pub fn standard(sessions: usize) -> Self {
        let train = ((sessions as f64) * 0.7).round() as usize;
        let val = ((sessions as f64) * 0.1).round() as usize;
        let train = train.min(sessions);
        let val = val.min(sessions - train);
        Self {
            train,
            val,
            test: sessions - train - val,
        }
    }

    pub fn range(&self, part: Part) -> std::ops::Range<usize> {
        match part {
            Part::Train => 0..self.train,
            Part::Val => self.train..self.train + self.val,
            Part::Test => self.train + self.val..self.train + self.val + self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    pub node_ids: Vec<String>,
    pub sessions: Vec<Session>,
    pub step_seconds: u32,
    pub max_value: f64,
    pub split: Split,
    /// Set by [`degrade_coverage`]; uncovered nodes are hidden from model
    /// inputs but still scored.
    pub coverage: Option<CoverageMask>,
    pub seed: Option<u64>,
}

impl SeriesDataset {
    pub fn nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Raw observed values of one split, missing cells skipped.
    pub fn observed(&self, part: Part) -> Vec<f64> {
        self.sessions[self.split.range(part)]
            .iter()
            .flat_map(|s| {
                s.values
                    .iter()
                    .zip(s.missing.iter())
                    .filter(|(_, &m)| !m)
                    .map(|(&v, _)| v)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// Normalizer fitted on the training split only.
    pub fn fit_normalizer(&self) -> Result<Normalizer, DataError> {
        Normalizer::fit(&self.observed(Part::Train)).map_err(|e| DataError::Invalid(e.to_string()))
    }

    pub fn timestamp(&self, session: usize, step: usize) -> NaiveDateTime {
        self.sessions[session].start + Duration::seconds(i64::from(self.step_seconds) * step as i64)
    }
}

fn session_start(index: usize) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1)
        .expect("valid date")
        .and_hms_opt(6, 0, 0)
        .expect("valid time")
        + Duration::days(index as i64)
}

/// Seeded synthetic dataset: each node follows a two-state Markov chain whose
/// switching depends on the session's demand profile; observations are the
/// regime speed plus Gaussian noise, clipped to `[0, max_speed]`.
pub fn generate(spec: &SyntheticSpec) -> Result<SeriesDataset, DataError> {
    spec.validate()?;
    let regimes = spec.regimes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let steps = spec.steps_per_session;
    let n = spec.nodes;
    let sessions = (0..spec.sessions)
        .map(|si| {
            let mut values = Array2::zeros((steps, n));
            let mut congested = vec![false; n];
            for t in 0..steps {
                let demand = spec.demand.at(t as f64 / steps as f64);
                for (j, r) in regimes.iter().enumerate() {
                    if t > 0 {
                        let u: f64 = rng.random();
                        congested[j] = if congested[j] {
                            u >= r.p_clear * (1.0 - spec.hold * demand)
                        } else {
                            u < r.p_onset * demand
                        };
                    }
                    let level = if congested[j] { r.congested_speed } else { r.free_speed };
                    let eps: f64 = rng.sample(StandardNormal);
                    values[[t, j]] = (level + r.noise * eps).clamp(0.0, spec.max_speed);
                }
            }
            Session {
                start: session_start(si),
                missing: Array2::from_elem((steps, n), false),
                values,
            }
        })
        .collect();
    Ok(SeriesDataset {
        node_ids: (0..n).map(|i| format!("n{i:03}")).collect(),
        sessions,
        step_seconds: spec.step_seconds,
        max_value: spec.max_speed,
        split: Split::standard(spec.sessions),
        coverage: None,
        seed: Some(spec.seed),
    })
}

/// Keeps model inputs from a seeded random `fraction` of nodes. Targets are
/// untouched.
pub fn degrade_coverage(
    d: &SeriesDataset,
    fraction: f64,
    seed: u64,
) -> Result<(SeriesDataset, CoverageMask), DataError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Invalid(format!("coverage fraction {fraction} outside (0, 1]")));
    }
    let n = d.nodes();
    let count = (fraction * n as f64).round() as usize;
    if count == 0 {
        return Err(DataError::Invalid(format!(
            "coverage fraction {fraction} selects no node out of {n}"
        )));
    }
    let mut covered = vec![false; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample_indices(&mut rng, n, count) {
        covered[i] = true;
    }
    let mask = CoverageMask { covered, seed };
    let mut out = d.clone();
    out.coverage = Some(mask.clone());
    Ok((out, mask))
}

/// Block-mean downsampling along time by `factor`.
pub fn degrade_resolution(d: &SeriesDataset, factor: usize) -> Result<SeriesDataset, DataError> {
    if factor == 0 {
        return Err(DataError::Invalid("resolution factor must be positive".into()));
    }
    if let Some((i, s)) = d.sessions.iter().enumerate().find(|(_, s)| s.steps() % factor != 0) {
        return Err(DataError::Invalid(format!(
            "session {i} has {} steps, not divisible by {factor}",
            s.steps()
        )));
    }
    let step_seconds = d
        .step_seconds
        .checked_mul(factor as u32)
        .ok_or_else(|| DataError::Invalid("step size overflows".into()))?;
    let sessions = d
        .sessions
        .iter()
        .map(|s| {
            let steps = s.steps() / factor;
            let n = s.values.ncols();
            let mut values = Array2::zeros((steps, n));
            let mut missing = Array2::from_elem((steps, n), false);
            for t in 0..steps {
                for j in 0..n {
                    let mut sum = 0.0;
                    let mut cnt = 0usize;
                    for u in t * factor..(t + 1) * factor {
                        if !s.missing[[u, j]] {
                            sum += s.values[[u, j]];
                            cnt += 1;
                        }
                    }
                    if cnt == 0 {
                        missing[[t, j]] = true;
                    } else {
                        values[[t, j]] = sum / cnt as f64;
                    }
                }
            }
            Session {
                start: s.start,
                values,
                missing,
            }
        })
        .collect();
    Ok(SeriesDataset {
        sessions,
        step_seconds,
        ..d.clone()
    })
}

/// Normalized sliding windows of one split.
///
/// Per node, the input features are the `T_h` normalized history values,
/// then sin/cos of the forecast origin's session phase, then an
/// availability flag (0 for nodes hidden by a coverage mask, whose history
/// is replaced by the training mean, i.e. 0).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    /// `W × N × (T_h + 3)`.
    pub inputs: Array3<f64>,
    /// `W × N × T_f`, normalized.
    pub targets: Array3<f64>,
    /// Session index of each window.
    pub session: Vec<usize>,
    /// Step index of the first target.
    pub origin: Vec<usize>,
    pub history: usize,
    pub horizon: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.session.len()
    }

    pub fn is_empty(&self) -> bool {
        self.session.is_empty()
    }

    pub fn nodes(&self) -> usize {
        self.inputs.dim().1
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.dim().2
    }
}

/// Stride-1 windows over the sessions of `part`. Windows never cross
/// session boundaries; sessions shorter than `history + horizon` are
/// skipped, as are windows with a missing target.
pub fn window(
    d: &SeriesDataset,
    part: Part,
    history: usize,
    horizon: usize,
    normalizer: &Normalizer,
) -> Result<WindowSet, DataError> {
    if history == 0 || horizon == 0 {
        return Err(DataError::Invalid("history and horizon must be positive".into()));
    }
    let n = d.nodes();
    let f = history + SIDE_CHANNELS;
    let covered: Vec<bool> = d
        .coverage
        .as_ref()
        .map_or_else(|| vec![true; n], |m| m.covered.clone());
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut session = Vec::new();
    let mut origin = Vec::new();
    for si in d.split.range(part) {
        let s = &d.sessions[si];
        let steps = s.steps();
        if steps < history + horizon {
            log::warn!(
                "session {si} has {steps} steps, fewer than {}; skipped",
                history + horizon
            );
            continue;
        }
        for start in 0..=steps - history - horizon {
            let o = start + history;
            if s.missing.slice(s![o..o + horizon, ..]).iter().any(|&m| m) {
                continue;
            }
            let phase = 2.0 * std::f64::consts::PI * o as f64 / steps as f64;
            for j in 0..n {
                for u in start..o {
                    inputs.push(if covered[j] && !s.missing[[u, j]] {
                        normalizer.transform(s.values[[u, j]])
                    } else {
                        0.0
                    });
                }
                inputs.push(phase.sin());
                inputs.push(phase.cos());
                inputs.push(if covered[j] { 1.0 } else { 0.0 });
                for u in o..o + horizon {
                    targets.push(normalizer.transform(s.values[[u, j]]));
                }
            }
            session.push(si);
            origin.push(o);
        }
    }
    let w = session.len();
    Ok(WindowSet {
        inputs: Array3::from_shape_vec((w, n, f), inputs).expect("sized"),
        targets: Array3::from_shape_vec((w, n, horizon), targets).expect("sized"),
        session,
        origin,
        history,
        horizon,
    })
}

/// Reading options for [`ingest_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub max_value: f64,
    /// Session split; defaults to [`Split::standard`] when `None`.
    pub split: Option<Split>,
}

/// Writes `timestamp,<node ids…>` rows for every session and step. Missing
/// cells are empty.
pub fn export_csv(d: &SeriesDataset, path: &Path) -> Result<(), DataError> {
    std::fs::write(path, to_csv_string(d))?;
    Ok(())
}

pub fn to_csv_string(d: &SeriesDataset) -> String {
    let mut out = String::new();
    out.push_str("timestamp");
    for id in &d.node_ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for (si, s) in d.sessions.iter().enumerate() {
        for t in 0..s.steps() {
            let _ = write!(out, "{}", d.timestamp(si, t).format(TIMESTAMP_FORMAT));
            for j in 0..d.nodes() {
                out.push(',');
                if !s.missing[[t, j]] {
                    let _ = write!(out, "{}", s.values[[t, j]]);
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Parses a CSV with a timestamp column and one column per node. A gap
/// longer than the first step interval starts a new session.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<SeriesDataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: &CsvSchema) -> Result<SeriesDataset, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.len() < 2 {
        return Err(DataError::Malformed {
            line: 1,
            msg: "expected a timestamp column and at least one node column".into(),
        });
    }
    let node_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let n = node_ids.len();

    let mut rows: Vec<(NaiveDateTime, Vec<Option<f64>>)> = Vec::new();
    let mut offenders = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        if rec.len() != n + 1 {
            return Err(DataError::Malformed {
                line,
                msg: format!("expected {} fields, found {}", n + 1, rec.len()),
            });
        }
        let ts = NaiveDateTime::parse_from_str(rec[0].trim(), TIMESTAMP_FORMAT).map_err(|e| {
            DataError::Malformed {
                line,
                msg: format!("bad timestamp `{}`: {e}", &rec[0]),
            }
        })?;
        let mut vals = Vec::with_capacity(n);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                vals.push(None);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| DataError::Malformed {
                line,
                msg: format!("column {}: `{cell}` is not a number", node_ids[j]),
            })?;
            if !(v.is_finite() && (0.0..=schema.max_value).contains(&v)) {
                offenders.push((line, node_ids[j].clone(), v));
            }
            vals.push(Some(v));
        }
        if let Some((prev, _)) = rows.last() {
            if ts <= *prev {
                return Err(DataError::NonMonotone {
                    line,
                    timestamp: rec[0].to_string(),
                });
            }
        }
        rows.push((ts, vals));
    }
    if !offenders.is_empty() {
        return Err(DataError::OutOfRange {
            max: schema.max_value,
            offenders,
        });
    }
    if rows.len() < 2 {
        return Err(DataError::Invalid("need at least two rows to infer the step size".into()));
    }
    let step = rows[1].0 - rows[0].0;
    let step_seconds = u32::try_from(step.num_seconds())
        .map_err(|_| DataError::Invalid("step size out of range".into()))?;

    let mut sessions = Vec::new();
    let mut current: Vec<&(NaiveDateTime, Vec<Option<f64>>)> = Vec::new();
    let flush = |rows: &mut Vec<&(NaiveDateTime, Vec<Option<f64>>)>, out: &mut Vec<Session>| {
        if rows.is_empty() {
            return;
        }
        let steps = rows.len();
        let mut values = Array2::zeros((steps, n));
        let mut missing = Array2::from_elem((steps, n), false);
        for (t, (_, vals)) in rows.iter().enumerate() {
            for (j, v) in vals.iter().enumerate() {
                match v {
                    Some(v) => values[[t, j]] = *v,
                    None => missing[[t, j]] = true,
                }
            }
        }
        out.push(Session {
            start: rows[0].0,
            values,
            missing,
        });
        rows.clear();
    };
    for row in &rows {
        if let Some(last) = current.last() {
            let gap = row.0 - last.0;
            if gap != step {
                if gap < step {
                    return Err(DataError::Invalid(format!(
                        "irregular step at {}: {}s after {}s steps",
                        row.0,
                        gap.num_seconds(),
                        step_seconds
                    )));
                }
                flush(&mut current, &mut sessions);
            }
        }
        current.push(row);
    }
    flush(&mut current, &mut sessions);
    log::info!("ingested {} rows, {} nodes, {} sessions", rows.len(), n, sessions.len());

    let split = schema.split.unwrap_or_else(|| Split::standard(sessions.len()));
    if split.train + split.val + split.test != sessions.len() {
        return Err(DataError::Invalid(format!(
            "split covers {} sessions, file has {}",
            split.train + split.val + split.test,
            sessions.len()
        )));
    }
    Ok(SeriesDataset {
        node_ids,
        sessions,
        step_seconds,
        max_value: schema.max_value,
        split,
        coverage: None,
        seed: None,
    })
}

/// Structured-text description of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub csv: String,
    pub nodes: usize,
    pub sessions: usize,
    pub steps_per_session: Vec<usize>,
    pub step_seconds: u32,
    pub max_value: f64,
    pub split: Split,
    pub seed: Option<u64>,
    /// Hex digest of the CSV contents.
    pub csv_sha256: String,
    /// Generator settings, when synthetic.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

impl DatasetManifest {
    pub fn describe(d: &SeriesDataset, csv: &str, csv_sha256: String, synthetic: Option<SyntheticSpec>) -> Self {
        Self {
            csv: csv.to_string(),
            nodes: d.nodes(),
            sessions: d.sessions.len(),
            steps_per_session: d.sessions.iter().map(Session::steps).collect(),
            step_seconds: d.step_seconds,
            max_value: d.max_value,
            split: d.split,
            seed: d.seed,
            csv_sha256,
            synthetic,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        toml::from_str(text).map_err(|e| DataError::Manifest(e.to_string()))
    }

    /// Loads the CSV next to the manifest and checks it against the manifest.
    pub fn load_dataset(&self, dir: &Path) -> Result<SeriesDataset, DataError> {
        let mut d = ingest_csv(
            &dir.join(&self.csv),
            &CsvSchema {
                max_value: self.max_value,
                split: Some(self.split),
            },
        )?;
        if d.nodes() != self.nodes || d.sessions.len() != self.sessions {
            return Err(DataError::Manifest(format!(
                "csv holds {} nodes / {} sessions, manifest says {} / {}",
                d.nodes(),
                d.sessions.len(),
                self.nodes,
                self.sessions
            )));
        }
        d.seed = self.seed;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            nodes: 4,
            sessions: 10,
            steps_per_session: 30,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn degenerate_chain_stays_free() {
        let mut spec = small_spec();
        spec.regimes = vec![
            NodeRegime {
                free_speed: 11.0,
                congested_speed: 2.0,
                p_onset: 0.0,
                p_clear: 0.0,
                noise: 0.3,
            };
            4
        ];
        let d = generate(&spec).unwrap();
        let obs = d.observed(Part::Train);
        let mean = obs.iter().sum::<f64>() / obs.len() as f64;
        assert_abs_diff_eq!(mean, 11.0, epsilon = 0.05);
        assert!(obs.iter().all(|v| (v - 11.0).abs() < 2.0));
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&small_spec()).unwrap();
        let b = generate(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed += 1;
        assert_ne!(a, generate(&other).unwrap());
    }

    #[test]
    fn values_stay_in_range() {
        let d = generate(&SyntheticSpec::default()).unwrap();
        for s in &d.sessions {
            assert!(s.values.iter().all(|&v| (0.0..=14.0).contains(&v)));
        }
        assert_eq!(d.split, Split { train: 21, val: 3, test: 6 });
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = small_spec();
        spec.nodes = 0;
        assert!(generate(&spec).is_err());
        let mut spec = small_spec();
        spec.regimes = vec![
            NodeRegime {
                free_speed: 11.0,
                congested_speed: 2.0,
                p_onset: 1.5,
                p_clear: 0.0,
                noise: 0.3,
            };
            4
        ];
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn coverage_counts() {
        let d = generate(&small_spec()).unwrap();
        let (same, mask) = degrade_coverage(&d, 1.0, 3).unwrap();
        assert!(mask.covered.iter().all(|&c| c));
        assert_eq!(same.sessions, d.sessions);

        let mut big = d.clone();
        big.node_ids = (0..1570).map(|i| i.to_string()).collect();
        let (_, m) = degrade_coverage(&big, 0.1, 1).unwrap();
        assert_eq!(m.count(), 157);
        let (_, again) = degrade_coverage(&big, 0.1, 1).unwrap();
        assert_eq!(m, again);
        let (_, other) = degrade_coverage(&big, 0.1, 2).unwrap();
        assert_ne!(m.covered, other.covered);

        assert!(degrade_coverage(&d, 0.05, 1).is_err());
        assert!(degrade_coverage(&d, 0.0, 1).is_err());
    }

    #[test]
    fn resolution_block_means() {
        let d = generate(&small_spec()).unwrap();
        assert_eq!(degrade_resolution(&d, 1).unwrap(), d);
        assert!(degrade_resolution(&d, 7).is_err());
        let low = degrade_resolution(&d, 3).unwrap();
        assert_eq!(low.step_seconds, 540);
        assert_eq!(low.sessions[0].steps(), 10);
        let block: f64 = (0..3).map(|u| d.sessions[0].values[[u, 1]]).sum::<f64>() / 3.0;
        assert_abs_diff_eq!(low.sessions[0].values[[0, 1]], block, epsilon = 1e-12);

        let mut flat = d.clone();
        flat.sessions[0].values.fill(5.5);
        let low = degrade_resolution(&flat, 5).unwrap();
        assert!(low.sessions[0].values.iter().all(|&v| v == 5.5));

        let mut fast = d;
        fast.step_seconds = 5;
        let mut s = fast.sessions[0].clone();
        s.values = Array2::zeros((72, 4));
        s.missing = Array2::from_elem((72, 4), false);
        fast.sessions = vec![s];
        assert_eq!(degrade_resolution(&fast, 36).unwrap().step_seconds, 180);
    }

    #[test]
    fn window_counts_and_round_trip() {
        let d = generate(&small_spec()).unwrap();
        let norm = d.fit_normalizer().unwrap();
        let w = window(&d, Part::Train, 10, 10, &norm).unwrap();
        assert_eq!(w.len(), d.split.train * 11);
        assert_eq!(w.input_dim(), 13);
        for (k, (&si, &o)) in w.session.iter().zip(&w.origin).enumerate() {
            for j in 0..4 {
                for h in 0..10 {
                    let raw = d.sessions[si].values[[o + h, j]];
                    assert_abs_diff_eq!(norm.inverse(w.targets[[k, j, h]]), raw, epsilon = 1e-9);
                    let hist = d.sessions[si].values[[o - 10 + h, j]];
                    assert_abs_diff_eq!(norm.inverse(w.inputs[[k, j, h]]), hist, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn normalized_train_split_is_standard() {
        let d = generate(&small_spec()).unwrap();
        let norm = d.fit_normalizer().unwrap();
        let z: Vec<f64> = d.observed(Part::Train).iter().map(|&v| norm.transform(v)).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.len() as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(var.sqrt(), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn short_sessions_are_skipped() {
        let mut spec = small_spec();
        spec.steps_per_session = 15;
        let d = generate(&spec).unwrap();
        let norm = d.fit_normalizer().unwrap();
        assert!(window(&d, Part::Train, 10, 10, &norm).unwrap().is_empty());
    }

    #[test]
    fn masked_nodes_hide_inputs_only() {
        let d = generate(&small_spec()).unwrap();
        let norm = d.fit_normalizer().unwrap();
        let (masked, mask) = degrade_coverage(&d, 0.5, 9).unwrap();
        let full = window(&d, Part::Test, 5, 5, &norm).unwrap();
        let part = window(&masked, Part::Test, 5, 5, &norm).unwrap();
        assert_eq!(full.targets, part.targets);
        for j in 0..4 {
            let flag = part.inputs[[0, j, 7]];
            assert_eq!(flag, if mask.covered[j] { 1.0 } else { 0.0 });
            if !mask.covered[j] {
                assert!((0..5).all(|u| part.inputs[[0, j, u]] == 0.0));
            }
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let d = generate(&small_spec()).unwrap();
        let text = to_csv_string(&d);
        let back = parse_csv(
            &text,
            &CsvSchema {
                max_value: 14.0,
                split: None,
            },
        )
        .unwrap();
        assert_eq!(back.sessions, d.sessions);
        assert_eq!(back.node_ids, d.node_ids);
        assert_eq!(back.step_seconds, 180);
        assert_eq!(back.split, d.split);
    }

    #[test]
    fn csv_small_file_and_errors() {
        let schema = CsvSchema {
            max_value: 30.0,
            split: Some(Split {
                train: 1,
                val: 0,
                test: 0,
            }),
        };
        let good = "timestamp,a,b,c\n\
                    2024-01-01T00:00:00,1,2,3\n\
                    2024-01-01T00:05:00,1,2,3\n\
                    2024-01-01T00:10:00,1,,3\n\
                    2024-01-01T00:15:00,1,2,3\n\
                    2024-01-01T00:20:00,1,2,3\n";
        let d = parse_csv(good, &schema).unwrap();
        assert_eq!(d.sessions[0].values.dim(), (5, 3));
        assert!(d.sessions[0].missing[[2, 1]]);
        assert_eq!(d.step_seconds, 300);

        let negative = good.replace("1,,3", "1,-4,3");
        match parse_csv(&negative, &schema) {
            Err(DataError::OutOfRange { offenders, .. }) => {
                assert_eq!(offenders, vec![(4, "b".to_string(), -4.0)]);
            }
            other => panic!("{other:?}"),
        }
        let backwards = good.replace("00:15:00", "00:05:00");
        assert!(matches!(
            parse_csv(&backwards, &schema),
            Err(DataError::NonMonotone { line: 5, .. })
        ));
        let short = good.replace("1,,3", "1,3");
        assert!(matches!(
            parse_csv(&short, &schema),
            Err(DataError::Malformed { line: 4, .. })
        ));
        let junk = good.replace("1,,3", "1,x,3");
        assert!(matches!(
            parse_csv(&junk, &schema),
            Err(DataError::Malformed { line: 4, .. })
        ));
    }
}
