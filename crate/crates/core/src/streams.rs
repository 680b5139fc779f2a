//! Timestamped EEG / task-event ingestion and window alignment.
//!
//! Two independent streams share one clock. Each stream accepts pushes in
//! (nearly) timestamp order: anything older than `reorder_horizon` behind the
//! newest accepted timestamp is dropped, anything within the horizon is
//! reinserted in order. On each cadence tick the engine calls
//! [`SyncStream::close_window`], which lays the trailing `window_len` seconds
//! of EEG onto a fixed sample grid and aggregates the behavioral events of the
//! span `(t_close - cadence, t_close]`.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of scalp channels carried by every EEG sample.
pub const CHANNELS: usize = 14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EegSample {
    pub t: f64,
    pub channels: Vec<f64>,
}

impl EegSample {
    pub fn new(t: f64, channels: Vec<f64>) -> Self {
        Self { t, channels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    StepStart,
    StepComplete,
    Error,
    ObjectGrab,
    HintShown,
    ChallengeIssued,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::StepStart => "step_start",
            EventKind::StepComplete => "step_complete",
            EventKind::Error => "error",
            EventKind::ObjectGrab => "object_grab",
            EventKind::HintShown => "hint_shown",
            EventKind::ChallengeIssued => "challenge_issued",
        }
    }
}

/// Where / How / Why confusion taxonomy attached to error events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorType {
    Where,
    How,
    Why,
}

impl ErrorType {
    pub const ALL: [ErrorType; 3] = [ErrorType::Where, ErrorType::How, ErrorType::Why];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorType::Where => "where",
            ErrorType::How => "how",
            ErrorType::Why => "why",
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvent {
    pub t: f64,
    pub kind: EventKind,
    pub step_id: u8,
    pub module_id: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_type: Option<ErrorType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_ok: Option<bool>,
    pub difficulty: u8,
}

impl TaskEvent {
    pub fn new(t: f64, kind: EventKind, step_id: u8, module_id: u8, difficulty: u8) -> Self {
        Self { t, kind, step_id, module_id, error_type: None, object_ok: None, difficulty }
    }

    pub fn error(t: f64, step_id: u8, module_id: u8, error_type: ErrorType, difficulty: u8) -> Self {
        Self { error_type: Some(error_type), ..Self::new(t, EventKind::Error, step_id, module_id, difficulty) }
    }

    pub fn grab(t: f64, step_id: u8, module_id: u8, object_ok: bool, difficulty: u8) -> Self {
        Self { object_ok: Some(object_ok), ..Self::new(t, EventKind::ObjectGrab, step_id, module_id, difficulty) }
    }

    /// Checks the schema invariants of a single event.
    pub fn validate(&self) -> Result<(), DropReason> {
        if !self.t.is_finite() {
            return Err(DropReason::NanValue);
        }
        if !(1..=8).contains(&self.step_id) {
            return Err(DropReason::BadStep);
        }
        if !(1..=2).contains(&self.module_id) {
            return Err(DropReason::BadModule);
        }
        if !(1..=5).contains(&self.difficulty) {
            return Err(DropReason::BadDifficulty);
        }
        match self.kind {
            EventKind::Error if self.error_type.is_none() => Err(DropReason::MissingErrorType),
            EventKind::ObjectGrab if self.object_ok.is_none() => Err(DropReason::MissingObjectOk),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    #[error("timestamp older than the reorder horizon")]
    TooOld,
    #[error("non-finite value")]
    NanValue,
    #[error("expected {CHANNELS} channels")]
    BadChannelCount,
    #[error("step_id outside 1..=8")]
    BadStep,
    #[error("module_id outside 1..=2")]
    BadModule,
    #[error("difficulty outside 1..=5")]
    BadDifficulty,
    #[error("error event without error_type")]
    MissingErrorType,
    #[error("object_grab event without object_ok")]
    MissingObjectOk,
}

impl DropReason {
    pub fn code(self) -> &'static str {
        match self {
            DropReason::TooOld => "too_old",
            DropReason::NanValue => "nan_value",
            DropReason::BadChannelCount => "bad_channel_count",
            DropReason::BadStep => "bad_step",
            DropReason::BadModule => "bad_module",
            DropReason::BadDifficulty => "bad_difficulty",
            DropReason::MissingErrorType => "missing_error_type",
            DropReason::MissingObjectOk => "missing_object_ok",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    Dropped(DropReason),
}

impl PushOutcome {
    pub fn is_accepted(self) -> bool {
        matches!(self, PushOutcome::Accepted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub sample_rate: f64,
    pub window_len: f64,
    pub cadence: f64,
    pub reorder_horizon: f64,
    pub skew_tolerance: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { sample_rate: 128.0, window_len: 2.0, cadence: 10.0, reorder_horizon: 0.5, skew_tolerance: 0.05 }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<(), StreamError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.sample_rate) || !ok(self.window_len) || !ok(self.cadence) {
            return Err(StreamError::BadConfig("sample_rate, window_len and cadence must be > 0"));
        }
        if !(self.reorder_horizon >= 0.0) || !(self.skew_tolerance >= 0.0) {
            return Err(StreamError::BadConfig("reorder_horizon and skew_tolerance must be >= 0"));
        }
        Ok(())
    }

    /// Rows in an aligned EEG matrix: `ceil(window_len * sample_rate)`.
    pub fn window_rows(&self) -> usize {
        (self.window_len * self.sample_rate - 1e-9).ceil() as usize
    }

    /// First cadence tick of a session whose clock starts at zero.
    pub fn first_tick(&self) -> f64 {
        self.window_len.max(self.cadence)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StreamError {
    #[error("invalid stream config: {0}")]
    BadConfig(&'static str),
    #[error("t_close {t_close} precedes one full window ({window_len} s)")]
    WindowTooEarly { t_close: f64, window_len: f64 },
    #[error("insufficient data: {missing} of {expected} rows missing")]
    InsufficientData { missing: usize, expected: usize, window: Box<AlignedWindow> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedWindow {
    pub t_close: f64,
    /// Row-major `rows x CHANNELS` microvolts; row `i` sits at
    /// `t_close - window_len + i / sample_rate`.
    pub eeg: Vec<[f64; CHANNELS]>,
    pub events_in_window: Vec<TaskEvent>,
    pub error_count: u32,
    pub step_elapsed: f64,
    pub difficulty: u8,
    pub dropped_samples: usize,
    /// Set when more than a quarter of the grid rows had no sample.
    pub lossy: bool,
}

impl AlignedWindow {
    pub fn rows(&self) -> usize {
        self.eeg.len()
    }

    /// One channel as a contiguous column.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.eeg.iter().map(|row| row[ch]).collect()
    }
}

/// Constant offset to add to event timestamps so they share the EEG clock.
pub fn align_clocks(eeg_t0: f64, event_t0: f64) -> f64 {
    eeg_t0 - event_t0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamCounters {
    pub pushed: u64,
    pub accepted: u64,
    pub dropped: u64,
}

/// Sorted buffer with a reorder horizon, shared by both streams.
#[derive(Debug, Clone)]
struct Reorder<T> {
    items: VecDeque<T>,
    newest: f64,
    counters: StreamCounters,
}

impl<T> Reorder<T> {
    fn new() -> Self {
        Self { items: VecDeque::new(), newest: f64::NEG_INFINITY, counters: StreamCounters::default() }
    }

    fn drop_with(&mut self, reason: DropReason) -> PushOutcome {
        self.counters.dropped += 1;
        PushOutcome::Dropped(reason)
    }

    fn insert(&mut self, t: f64, item: T, horizon: f64, time_of: impl Fn(&T) -> f64) -> PushOutcome {
        if t < self.newest - horizon {
            return self.drop_with(DropReason::TooOld);
        }
        // Stable: equal timestamps keep arrival order.
        let pos = self.items.partition_point(|x| time_of(x) <= t);
        self.items.insert(pos, item);
        self.newest = self.newest.max(t);
        self.counters.accepted += 1;
        PushOutcome::Accepted
    }
}

/// Both input streams of one session plus the behavioral state carried across
/// windows (current step start, latest difficulty).
#[derive(Debug, Clone)]
pub struct SyncStream {
    cfg: StreamConfig,
    eeg: Reorder<EegSample>,
    events: Reorder<TaskEvent>,
    event_offset: f64,
    last_close: Option<f64>,
    /// Consumer-visible watermarks for `drain_ready_*`.
    eeg_delivered: f64,
    events_delivered: f64,
    step_started_at: Option<f64>,
    /// Events up to this time have updated step/difficulty state.
    state_through: f64,
    difficulty: u8,
}

impl SyncStream {
    pub fn new(cfg: StreamConfig) -> Result<Self, StreamError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            eeg: Reorder::new(),
            events: Reorder::new(),
            event_offset: 0.0,
            last_close: None,
            eeg_delivered: f64::NEG_INFINITY,
            events_delivered: f64::NEG_INFINITY,
            step_started_at: None,
            state_through: f64::NEG_INFINITY,
            difficulty: 1,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.cfg
    }

    /// Sets the offset added to every subsequently pushed event timestamp.
    pub fn set_event_offset(&mut self, offset: f64) {
        self.event_offset = offset;
    }

    /// Difficulty assumed until the first event reports one.
    pub fn set_initial_difficulty(&mut self, level: u8) {
        self.difficulty = level.clamp(1, 5);
    }

    pub fn eeg_counters(&self) -> StreamCounters {
        self.eeg.counters
    }

    pub fn event_counters(&self) -> StreamCounters {
        self.events.counters
    }

    pub fn newest_eeg_t(&self) -> Option<f64> {
        self.eeg.newest.is_finite().then_some(self.eeg.newest)
    }

    pub fn push_eeg(&mut self, sample: EegSample) -> PushOutcome {
        self.eeg.counters.pushed += 1;
        if sample.channels.len() != CHANNELS {
            return self.eeg.drop_with(DropReason::BadChannelCount);
        }
        if !sample.t.is_finite() || sample.channels.iter().any(|v| !v.is_finite()) {
            return self.eeg.drop_with(DropReason::NanValue);
        }
        let t = sample.t;
        self.eeg.insert(t, sample, self.cfg.reorder_horizon, |s| s.t)
    }

    pub fn push_event(&mut self, mut event: TaskEvent) -> PushOutcome {
        self.events.counters.pushed += 1;
        if let Err(reason) = event.validate() {
            return self.events.drop_with(reason);
        }
        event.t += self.event_offset;
        if self.last_close.is_some_and(|c| event.t <= c) {
            // Its aggregation span has already been closed.
            return self.events.drop_with(DropReason::TooOld);
        }
        let t = event.t;
        self.events.insert(t, event, self.cfg.reorder_horizon, |e| e.t)
    }

    /// Hands out samples that can no longer be preceded by a later push.
    pub fn drain_ready_eeg(&mut self) -> Vec<EegSample> {
        let cutoff = self.eeg.newest - self.cfg.reorder_horizon;
        let from = self.eeg_delivered;
        let out: Vec<EegSample> =
            self.eeg.items.iter().filter(|s| s.t > from && s.t <= cutoff).cloned().collect();
        if let Some(last) = out.last() {
            self.eeg_delivered = last.t;
        }
        out
    }

    pub fn drain_ready_events(&mut self) -> Vec<TaskEvent> {
        let cutoff = self.events.newest - self.cfg.reorder_horizon;
        let from = self.events_delivered;
        let out: Vec<TaskEvent> =
            self.events.items.iter().filter(|e| e.t > from && e.t <= cutoff).cloned().collect();
        if let Some(last) = out.last() {
            self.events_delivered = last.t;
        }
        out
    }

    /// Closes a window, failing when more than 25% of the grid is missing.
    pub fn close_window(&mut self, t_close: f64) -> Result<AlignedWindow, StreamError> {
        let w = self.close_window_lossy(t_close)?;
        if w.lossy {
            let expected = w.rows();
            return Err(StreamError::InsufficientData { missing: w.dropped_samples, expected, window: Box::new(w) });
        }
        Ok(w)
    }

    /// Closes a window regardless of data loss; `lossy` flags > 25% missing rows.
    pub fn close_window_lossy(&mut self, t_close: f64) -> Result<AlignedWindow, StreamError> {
        let cfg = self.cfg;
        if !(t_close >= cfg.window_len - 1e-9) {
            return Err(StreamError::WindowTooEarly { t_close, window_len: cfg.window_len });
        }
        let rows = cfg.window_rows();
        let start = t_close - cfg.window_len;
        let tol = cfg.skew_tolerance.min(0.5 / cfg.sample_rate);

        // Nearest-sample alignment: each sample competes for its nearest grid row.
        let mut best: Vec<Option<(f64, usize)>> = vec![None; rows];
        for (idx, s) in self.eeg.items.iter().enumerate() {
            let pos = (s.t - start) * cfg.sample_rate;
            let row = pos.round();
            if row < 0.0 || row >= rows as f64 {
                continue;
            }
            let row = row as usize;
            let dt = (s.t - (start + row as f64 / cfg.sample_rate)).abs();
            if dt > tol + 1e-12 {
                continue;
            }
            if best[row].map_or(true, |(d, _)| dt < d) {
                best[row] = Some((dt, idx));
            }
        }
        let mut eeg = Vec::with_capacity(rows);
        let mut missing = 0;
        for slot in &best {
            let mut row = [0.0; CHANNELS];
            match slot {
                Some((_, idx)) => row.copy_from_slice(&self.eeg.items[*idx].channels),
                None => missing += 1,
            }
            eeg.push(row);
        }

        let span_start = t_close - cfg.cadence;
        let events_in_window: Vec<TaskEvent> =
            self.events.items.iter().filter(|e| e.t > span_start && e.t <= t_close).cloned().collect();
        let error_count = events_in_window.iter().filter(|e| e.kind == EventKind::Error).count() as u32;
        for e in self.events.items.iter().filter(|e| e.t > self.state_through && e.t <= t_close) {
            self.difficulty = e.difficulty;
            match e.kind {
                EventKind::StepStart => self.step_started_at = Some(e.t),
                EventKind::StepComplete => self.step_started_at = None,
                _ => {}
            }
        }
        self.state_through = self.state_through.max(t_close);
        while self.events.items.front().is_some_and(|e| e.t <= span_start) {
            self.events.items.pop_front();
        }
        let step_elapsed = self.step_started_at.map_or(0.0, |s| (t_close - s).max(0.0));

        // Keep only samples a later window can still use.
        let keep_from = t_close - cfg.window_len - tol;
        while self.eeg.items.front().is_some_and(|s| s.t < keep_from) {
            self.eeg.items.pop_front();
        }
        self.last_close = Some(t_close);

        Ok(AlignedWindow {
            t_close,
            eeg,
            events_in_window,
            error_count,
            step_elapsed,
            difficulty: self.difficulty,
            dropped_samples: missing,
            lossy: missing * 4 > rows,
        })
    }
}
