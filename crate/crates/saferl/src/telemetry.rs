//! Run logging and export: per-episode stats, violation events, and
//! attribution records, written as CSV and JSON.
//!
//! The log is append-only and episode-ordered. Exports are deterministic:
//! writing the same log twice produces byte-identical files (timestamps are
//! recorded when events are created, not when they are exported). Floats are
//! rendered with 17 significant digits, so parsing an export recovers every
//! value bit for bit.
//!
//! ## File schemas
//!
//! * `episodes.csv`: `run_id,episode,steps,total_raw_reward,total_shaped_reward,cvc,epsilon`
//! * `violations.csv`: `run_id,episode,step,constraint,margin,requested_action,executed_action,timestamp`
//! * `attributions.csv`: `run_id,episode,step,method,action,base_value,phi_0..phi_{d-1}`
//! * `heatmap.csv`: feature label column, then one column per episode
//! * `run.json`: the whole [`RunLog`], schema versioned

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::EpisodeStats;
use crate::explain::{AttributionMethod, AttributionRecord, HeatmapMatrix};
use crate::safety::ViolationEvent;

/// Render a float with enough digits to round-trip exactly.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, thiserror::Error)]
pub enum TelemetryError {
    #[error("out-of-order episode: expected {expected}, got {got}")]
    OutOfOrderEpisode { expected: usize, got: usize },
    #[error("nothing to export for {kind}")]
    Empty { kind: &'static str },
    #[error("field {field} contains characters not representable in csv: {value:?}")]
    BadField { field: &'static str, value: String },
    #[error("malformed {kind} at {path}: {message}")]
    Malformed { kind: &'static str, path: String, message: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TelemetryError + '_ {
    move |source| TelemetryError::Io { path: path.display().to_string(), source }
}

fn csv_safe(field: &'static str, value: &str) -> Result<(), TelemetryError> {
    if value.contains(',') || value.contains('\n') || value.contains('\r') {
        return Err(TelemetryError::BadField { field, value: value.to_string() });
    }
    Ok(())
}

/// Complete record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub run_id: String,
    pub config: serde_json::Value,
    pub episode_stats: Vec<EpisodeStats>,
    pub violation_events: Vec<ViolationEvent>,
    pub attribution_records: Vec<AttributionRecord>,
}

impl RunLog {
    pub fn new(run_id: impl Into<String>, config: serde_json::Value) -> Self {
        Self {
            schema_version: 1,
            run_id: run_id.into(),
            config,
            episode_stats: Vec::new(),
            violation_events: Vec::new(),
            attribution_records: Vec::new(),
        }
    }

    /// Append episode stats; episodes must arrive contiguously from 0.
    pub fn record_episode(&mut self, stats: EpisodeStats) -> Result<(), TelemetryError> {
        let expected = self.episode_stats.len();
        if stats.episode != expected {
            return Err(TelemetryError::OutOfOrderEpisode { expected, got: stats.episode });
        }
        self.episode_stats.push(stats);
        Ok(())
    }

    /// Append a violation event; episode indices must be non-decreasing.
    pub fn record_violation(&mut self, event: ViolationEvent) -> Result<(), TelemetryError> {
        if let Some(last) = self.violation_events.last() {
            if event.episode < last.episode {
                return Err(TelemetryError::OutOfOrderEpisode {
                    expected: last.episode,
                    got: event.episode,
                });
            }
        }
        self.violation_events.push(event);
        Ok(())
    }

    /// Append an attribution record; episode indices must be non-decreasing.
    pub fn record_attribution(&mut self, record: AttributionRecord) -> Result<(), TelemetryError> {
        if let Some(last) = self.attribution_records.last() {
            if record.episode < last.episode {
                return Err(TelemetryError::OutOfOrderEpisode {
                    expected: last.episode,
                    got: record.episode,
                });
            }
        }
        self.attribution_records.push(record);
        Ok(())
    }
}

pub fn export_episodes_csv(log: &RunLog, path: &Path) -> Result<(), TelemetryError> {
    if log.episode_stats.is_empty() {
        return Err(TelemetryError::Empty { kind: "episodes" });
    }
    csv_safe("run_id", &log.run_id)?;
    let mut out =
        String::from("run_id,episode,steps,total_raw_reward,total_shaped_reward,cvc,epsilon\n");
    for s in &log.episode_stats {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            log.run_id,
            s.episode,
            s.steps,
            fmt_float(s.total_raw_reward),
            fmt_float(s.total_shaped_reward),
            s.cvc,
            fmt_float(s.epsilon_used),
        );
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn export_violations_csv(log: &RunLog, path: &Path) -> Result<(), TelemetryError> {
    if log.violation_events.is_empty() {
        return Err(TelemetryError::Empty { kind: "violations" });
    }
    csv_safe("run_id", &log.run_id)?;
    let mut out = String::from(
        "run_id,episode,step,constraint,margin,requested_action,executed_action,timestamp\n",
    );
    for v in &log.violation_events {
        csv_safe("constraint", &v.constraint_name)?;
        csv_safe("timestamp", &v.timestamp)?;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            log.run_id,
            v.episode,
            v.step,
            v.constraint_name,
            fmt_float(v.margin),
            v.requested_action,
            v.executed_action,
            v.timestamp,
        );
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn export_attributions_csv(log: &RunLog, path: &Path) -> Result<(), TelemetryError> {
    let Some(first) = log.attribution_records.first() else {
        return Err(TelemetryError::Empty { kind: "attributions" });
    };
    csv_safe("run_id", &log.run_id)?;
    let d = first.phi.len();
    let mut out = String::from("run_id,episode,step,method,action,base_value");
    for j in 0..d {
        let _ = write!(out, ",phi_{j}");
    }
    out.push('\n');
    for r in &log.attribution_records {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            log.run_id,
            r.episode,
            r.step,
            r.method.name(),
            r.action,
            fmt_float(r.base_value),
        );
        for p in &r.phi {
            let _ = write!(out, ",{}", fmt_float(*p));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Write a features-by-episodes matrix with feature-name row labels.
pub fn export_heatmap_csv(
    matrix: &HeatmapMatrix,
    feature_names: &[String],
    path: &Path,
) -> Result<(), TelemetryError> {
    if matrix.rows.is_empty() {
        return Err(TelemetryError::Empty { kind: "heatmap" });
    }
    let mut out = String::from("feature");
    for e in &matrix.episodes {
        let _ = write!(out, ",{e}");
    }
    out.push('\n');
    for (j, row) in matrix.rows.iter().enumerate() {
        let label = feature_names.get(j).map(String::as_str).unwrap_or("feature");
        csv_safe("feature", label)?;
        out.push_str(label);
        for v in row {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Serialize the whole log as a single versioned JSON document.
pub fn export_json(log: &RunLog, path: &Path) -> Result<(), TelemetryError> {
    let mut text = serde_json::to_string_pretty(log).expect("runlog serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn import_json(path: &Path) -> Result<RunLog, TelemetryError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| TelemetryError::Malformed {
        kind: "run.json",
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn malformed(kind: &'static str, path: &Path, message: impl Into<String>) -> TelemetryError {
    TelemetryError::Malformed {
        kind,
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn split_csv(path: &Path, kind: &'static str, text: &str) -> Result<Vec<Vec<String>>, TelemetryError> {
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        rows.push(line.split(',').map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(malformed(kind, path, "no data rows"));
    }
    Ok(rows)
}

/// Parsed `episodes.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodesCsv {
    pub run_id: String,
    pub stats: Vec<EpisodeStats>,
}

pub fn import_episodes_csv(path: &Path) -> Result<EpisodesCsv, TelemetryError> {
    let kind = "episodes.csv";
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let rows = split_csv(path, kind, &text)?;
    let mut stats = Vec::with_capacity(rows.len());
    let mut run_id = String::new();
    for row in rows {
        if row.len() != 7 {
            return Err(malformed(kind, path, format!("expected 7 columns, got {}", row.len())));
        }
        let field = |i: usize| -> &str { row[i].as_str() };
        let parse_err = |col: &str| malformed(kind, path, format!("bad value in column {col}"));
        run_id = field(0).to_string();
        stats.push(EpisodeStats {
            episode: field(1).parse().map_err(|_| parse_err("episode"))?,
            steps: field(2).parse().map_err(|_| parse_err("steps"))?,
            total_raw_reward: field(3).parse().map_err(|_| parse_err("total_raw_reward"))?,
            total_shaped_reward: field(4).parse().map_err(|_| parse_err("total_shaped_reward"))?,
            cvc: field(5).parse().map_err(|_| parse_err("cvc"))?,
            epsilon_used: field(6).parse().map_err(|_| parse_err("epsilon"))?,
        });
    }
    Ok(EpisodesCsv { run_id, stats })
}

/// Parsed `violations.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViolationsCsv {
    pub run_id: String,
    pub events: Vec<ViolationEvent>,
}

pub fn import_violations_csv(path: &Path) -> Result<ViolationsCsv, TelemetryError> {
    let kind = "violations.csv";
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let rows = split_csv(path, kind, &text)?;
    let mut events = Vec::with_capacity(rows.len());
    let mut run_id = String::new();
    for row in rows {
        if row.len() != 8 {
            return Err(malformed(kind, path, format!("expected 8 columns, got {}", row.len())));
        }
        let parse_err = |col: &str| malformed(kind, path, format!("bad value in column {col}"));
        run_id = row[0].clone();
        events.push(ViolationEvent {
            episode: row[1].parse().map_err(|_| parse_err("episode"))?,
            step: row[2].parse().map_err(|_| parse_err("step"))?,
            constraint_name: row[3].clone(),
            margin: row[4].parse().map_err(|_| parse_err("margin"))?,
            requested_action: row[5].parse().map_err(|_| parse_err("requested_action"))?,
            executed_action: row[6].parse().map_err(|_| parse_err("executed_action"))?,
            timestamp: row[7].clone(),
        });
    }
    Ok(ViolationsCsv { run_id, events })
}

/// Parsed `attributions.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionsCsv {
    pub run_id: String,
    pub records: Vec<AttributionRecord>,
}

pub fn import_attributions_csv(path: &Path) -> Result<AttributionsCsv, TelemetryError> {
    let kind = "attributions.csv";
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let rows = split_csv(path, kind, &text)?;
    let mut records = Vec::with_capacity(rows.len());
    let mut run_id = String::new();
    for row in rows {
        if row.len() < 7 {
            return Err(malformed(kind, path, format!("expected >=7 columns, got {}", row.len())));
        }
        let parse_err = |col: &str| malformed(kind, path, format!("bad value in column {col}"));
        run_id = row[0].clone();
        let method = AttributionMethod::parse(&row[3])
            .ok_or_else(|| malformed(kind, path, format!("unknown method {:?}", row[3])))?;
        let phi = row[6..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err("phi")))
            .collect::<Result<Vec<f64>, _>>()?;
        records.push(AttributionRecord {
            episode: row[1].parse().map_err(|_| parse_err("episode"))?,
            step: row[2].parse().map_err(|_| parse_err("step"))?,
            method,
            action: row[4].parse().map_err(|_| parse_err("action"))?,
            base_value: row[5].parse().map_err(|_| parse_err("base_value"))?,
            phi,
        });
    }
    Ok(AttributionsCsv { run_id, records })
}

/// Per-constraint discounted violation metric, compared against the budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReturnSummary {
    pub constraint: String,
    pub mean_discounted_violation: f64,
    pub max_discounted_violation: f64,
}

/// Deterministic aggregation of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub episodes: usize,
    pub mean_cvc: f64,
    pub min_cvc: usize,
    pub max_cvc: usize,
    pub mean_raw_reward: f64,
    pub mean_shaped_reward: f64,
    /// First episode index from which every later episode has zero
    /// violations; absent when the run never settles.
    pub first_all_safe_episode: Option<usize>,
    pub cvc_by_episode: Vec<usize>,
    pub raw_reward_by_episode: Vec<f64>,
    pub shaped_reward_by_episode: Vec<f64>,
    pub constraint_returns: Vec<ConstraintReturnSummary>,
}

/// Summarize a run; `gamma` discounts the per-constraint violation returns.
pub fn summarize(log: &RunLog, gamma: f64) -> Result<RunSummary, TelemetryError> {
    if log.episode_stats.is_empty() {
        return Err(TelemetryError::Empty { kind: "episodes" });
    }
    let n = log.episode_stats.len();
    let cvc_by_episode: Vec<usize> = log.episode_stats.iter().map(|s| s.cvc).collect();
    let raw_reward_by_episode: Vec<f64> =
        log.episode_stats.iter().map(|s| s.total_raw_reward).collect();
    let shaped_reward_by_episode: Vec<f64> =
        log.episode_stats.iter().map(|s| s.total_shaped_reward).collect();

    let mut first_all_safe_episode = None;
    for i in (0..n).rev() {
        if cvc_by_episode[i] != 0 {
            break;
        }
        first_all_safe_episode = Some(i);
    }

    // Discounted violation returns, per constraint per episode. Steps
    // without a violation contribute zero, so the sparse event list is
    // enough to evaluate the discounted sum.
    let mut per_constraint: std::collections::BTreeMap<String, Vec<f64>> =
        std::collections::BTreeMap::new();
    for ev in &log.violation_events {
        let by_episode =
            per_constraint.entry(ev.constraint_name.clone()).or_insert_with(|| vec![0.0; n]);
        if ev.episode < n {
            by_episode[ev.episode] += gamma.powi(ev.step as i32) * ev.margin.max(0.0);
        }
    }
    let constraint_returns = per_constraint
        .into_iter()
        .map(|(constraint, by_episode)| ConstraintReturnSummary {
            constraint,
            mean_discounted_violation: by_episode.iter().sum::<f64>() / n as f64,
            max_discounted_violation: by_episode.iter().cloned().fold(0.0, f64::max),
        })
        .collect();

    Ok(RunSummary {
        episodes: n,
        mean_cvc: cvc_by_episode.iter().sum::<usize>() as f64 / n as f64,
        min_cvc: cvc_by_episode.iter().copied().min().unwrap_or(0),
        max_cvc: cvc_by_episode.iter().copied().max().unwrap_or(0),
        mean_raw_reward: raw_reward_by_episode.iter().sum::<f64>() / n as f64,
        mean_shaped_reward: shaped_reward_by_episode.iter().sum::<f64>() / n as f64,
        first_all_safe_episode,
        cvc_by_episode,
        raw_reward_by_episode,
        shaped_reward_by_episode,
        constraint_returns,
    })
}
