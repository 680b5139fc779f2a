//! JSONL session log: one self-describing record per line, plus the replay
//! check that re-derives every logged decision from the logged features.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::calibration::CalibrationReport;
use crate::engine::{Clock, Decision, Engine, EngineConfig, EngineError, Intervention};
use crate::features::{FeatureConfig, FeatureSequence, Frame, SEQ_LEN};
use crate::lstm::{EpochStats, ModelFile};
use crate::streams::{StreamConfig, TaskEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Static,
    Adaptive,
}

impl Policy {
    pub fn adapts(self) -> bool {
        self == Policy::Adaptive
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Static => "static",
            Policy::Adaptive => "adaptive",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "static" => Ok(Policy::Static),
            "adaptive" => Ok(Policy::Adaptive),
            other => Err(format!("unknown policy {other:?} (expected static|adaptive)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    Virtual,
    Wall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub t: f64,
    pub session_id: String,
    pub clock: ClockKind,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<Policy>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_sha256: Option<String>,
    pub stream: StreamConfig,
    pub features: FeatureConfig,
    pub engine: EngineConfig,
    /// Free-form run parameters (subject profile, simulator settings).
    #[serde(default)]
    pub params: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EegSummaryRecord {
    pub t: f64,
    pub session_id: String,
    pub rows: usize,
    pub dropped_samples: usize,
    pub lossy: bool,
    /// Per-channel RMS over the window, µV.
    pub rms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturesRecord {
    pub t: f64,
    pub session_id: String,
    /// Normalized model input.
    pub frames: [Frame; SEQ_LEN],
    /// Un-normalized features.
    pub raw: [Frame; SEQ_LEN],
    /// Behavioral events the window aggregated.
    pub events: Vec<TaskEvent>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub data_gap: bool,
}

impl FeaturesRecord {
    pub fn sequence(&self) -> FeatureSequence {
        FeatureSequence { frames: self.frames, t_close: self.t }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub session_id: String,
    #[serde(flatten)]
    pub decision: Decision,
    /// Simulator ground-truth latent load at decision time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    pub session_id: String,
    pub event: TaskEvent,
    /// Interventions fired immediately in response to this event.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub issued: Vec<Intervention>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReportRecord {
    pub t: f64,
    pub session_id: String,
    #[serde(flatten)]
    pub report: CalibrationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEpochRecord {
    pub t: f64,
    pub session_id: String,
    #[serde(flatten)]
    pub stats: EpochStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Meta(MetaRecord),
    EegSummary(EegSummaryRecord),
    Features(FeaturesRecord),
    Decision(DecisionRecord),
    Event(EventRecord),
    CalibrationReport(CalibrationReportRecord),
    TrainEpoch(TrainEpochRecord),
}

impl Record {
    pub fn t(&self) -> f64 {
        match self {
            Record::Meta(r) => r.t,
            Record::EegSummary(r) => r.t,
            Record::Features(r) => r.t,
            Record::Decision(r) => r.decision.t,
            Record::Event(r) => r.t,
            Record::CalibrationReport(r) => r.t,
            Record::TrainEpoch(r) => r.t,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Record::Meta(_) => "meta",
            Record::EegSummary(_) => "eeg_summary",
            Record::Features(_) => "features",
            Record::Decision(_) => "decision",
            Record::Event(_) => "event",
            Record::CalibrationReport(_) => "calibration_report",
            Record::TrainEpoch(_) => "train_epoch",
        }
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("log has no meta record")]
    MissingMeta,
    #[error("model file does not match the log: expected sha256 {expected}, found {found}")]
    ModelMismatch { expected: String, found: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Deterministic session identifier derived from the run inputs.
pub fn session_id(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    hex::encode(&h.finalize()[..8])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn to_line(r: &Record) -> String {
    serde_json::to_string(r).expect("log records always serialize")
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[Record]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", to_line(r))?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Record>, LogError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| LogError::Parse { line: i + 1, source })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub t: f64,
    pub what: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub session_id: String,
    pub decisions: usize,
    pub events: usize,
    pub mismatches: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<Mismatch>,
    /// Decisions re-derived during replay, in log order.
    #[serde(skip)]
    pub replayed: Vec<Decision>,
}

/// Re-runs the rule engine over the logged features and events and compares
/// every decision and every immediate intervention with what was logged.
/// `model` must be the file the session ran with (checked via sha256 when
/// `model_bytes` is given).
pub fn replay(records: &[Record], model: &ModelFile, model_bytes: Option<&[u8]>) -> Result<ReplayReport, LogError> {
    let meta = records
        .iter()
        .find_map(|r| if let Record::Meta(m) = r { Some(m) } else { None })
        .ok_or(LogError::MissingMeta)?;
    if let (Some(bytes), Some(expected)) = (model_bytes, &meta.model_sha256) {
        let found = sha256_hex(bytes);
        if &found != expected {
            return Err(LogError::ModelMismatch { expected: expected.clone(), found });
        }
    }
    let adapt = meta.policy.is_some_and(Policy::adapts);
    let mut engine = Engine::new(model.clone(), meta.stream, meta.features, meta.engine, adapt, Clock::Virtual)?;
    let mut report = ReplayReport { session_id: meta.session_id.clone(), decisions: 0, events: 0, mismatches: 0, details: Vec::new(), replayed: Vec::new() };
    let mut pending: Option<Decision> = None;
    let fail = |report: &mut ReplayReport, t: f64, what: String| {
        report.mismatches += 1;
        if report.details.len() < 20 {
            report.details.push(Mismatch { t, what });
        }
    };
    for r in records {
        match r {
            Record::Event(e) => {
                report.events += 1;
                let issued = engine.on_event(&e.event);
                if issued != e.issued {
                    fail(&mut report, e.t, format!("immediate interventions differ: logged {:?}, replayed {:?}", e.issued, issued));
                }
            }
            Record::Features(f) => {
                if let Some(d) = pending.take() {
                    fail(&mut report, d.t, "features without a logged decision".into());
                }
                let d = engine.decide_from_features(&f.sequence(), &f.events, f.data_gap)?;
                pending = Some(d);
            }
            Record::Decision(logged) => {
                report.decisions += 1;
                match pending.take() {
                    Some(d) => {
                        if !d.same_outcome(&logged.decision) {
                            fail(&mut report, logged.decision.t, format!("decision differs: logged {:?}, replayed {:?}", logged.decision, d));
                        }
                        report.replayed.push(d);
                    }
                    None => fail(&mut report, logged.decision.t, "decision without logged features".into()),
                }
            }
            _ => {}
        }
    }
    if let Some(d) = pending {
        fail(&mut report, d.t, "features without a logged decision".into());
    }
    Ok(report)
}
