//! Real-time loop: window -> features -> LSTM -> load state -> adaptation.
//!
//! Each cadence tick closes a window, scores it, debounces the three-way
//! state and walks the adaptation rule table:
//!
//! 1. wrong object grabbed -> haptic pulse (any state)
//! 2. same (step, error type) repeated `repetition_k` times after a hint -> ghost hand (any state)
//! 3. high load -> confusion-specific cue (where: arrow, how: ghost hand,
//!    why: voice) plus interface simplification and slower progression
//! 4. low load -> one challenge per task step, rotating error injection,
//!    reflective prompt, time pressure
//! 5. optimal load -> nothing
//!
//! Every kind has a cooldown; suppressed firings are reported, not dropped
//! silently.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Thresholds;
use crate::features::{FeatureConfig, FeatureError, FeatureExtractor, FeatureSequence, RawFeatures};
use crate::lstm::{self, LstmError, ModelFile, CLASSES};
use crate::streams::{AlignedWindow, ErrorType, EventKind, PushOutcome, StreamConfig, StreamError, SyncStream, TaskEvent, EegSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadState {
    Low,
    Optimal,
    High,
}

impl LoadState {
    pub const ALL: [LoadState; 3] = [LoadState::Low, LoadState::Optimal, LoadState::High];

    /// low iff `l <= t_low`, high iff `l >= t_high`, optimal otherwise.
    pub fn from_score(l: f64, thr: &Thresholds) -> Self {
        if l <= thr.t_low {
            LoadState::Low
        } else if l >= thr.t_high {
            LoadState::High
        } else {
            LoadState::Optimal
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LoadState::Low => "low",
            LoadState::Optimal => "optimal",
            LoadState::High => "high",
        }
    }
}

impl fmt::Display for LoadState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    ArrowCue,
    GhostHand,
    VoiceExplanation,
    HapticPulse,
    SimplifyInterface,
    SlowProgression,
    ErrorInjection,
    ReflectivePrompt,
    TimePressure,
    None,
}

impl InterventionKind {
    pub const CHALLENGES: [InterventionKind; 3] =
        [InterventionKind::ErrorInjection, InterventionKind::ReflectivePrompt, InterventionKind::TimePressure];

    pub fn as_str(self) -> &'static str {
        match self {
            InterventionKind::ArrowCue => "arrow_cue",
            InterventionKind::GhostHand => "ghost_hand",
            InterventionKind::VoiceExplanation => "voice_explanation",
            InterventionKind::HapticPulse => "haptic_pulse",
            InterventionKind::SimplifyInterface => "simplify_interface",
            InterventionKind::SlowProgression => "slow_progression",
            InterventionKind::ErrorInjection => "error_injection",
            InterventionKind::ReflectivePrompt => "reflective_prompt",
            InterventionKind::TimePressure => "time_pressure",
            InterventionKind::None => "none",
        }
    }

    /// Cue kinds the trainee perceives as a hint.
    pub fn is_hint(self) -> bool {
        matches!(self, InterventionKind::ArrowCue | InterventionKind::GhostHand | InterventionKind::VoiceExplanation)
    }

    pub fn is_challenge(self) -> bool {
        Self::CHALLENGES.contains(&self)
    }

    /// High-load cue for a confusion type.
    pub fn cue_for(confusion: ErrorType) -> Self {
        match confusion {
            ErrorType::Where => InterventionKind::ArrowCue,
            ErrorType::How => InterventionKind::GhostHand,
            ErrorType::Why => InterventionKind::VoiceExplanation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub kind: InterventionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suppressed {
    pub kind: InterventionKind,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub t: f64,
    #[serde(rename = "L")]
    pub l: f64,
    pub probs: [f64; CLASSES],
    pub raw_state: LoadState,
    pub stable_state: LoadState,
    pub interventions: Vec<Intervention>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suppressed: Vec<Suppressed>,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub data_gap: bool,
}

impl Decision {
    /// Equality on everything the rule engine determines (latency excluded).
    pub fn same_outcome(&self, other: &Decision) -> bool {
        self.t.to_bits() == other.t.to_bits()
            && self.l.to_bits() == other.l.to_bits()
            && self.probs.iter().zip(&other.probs).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.raw_state == other.raw_state
            && self.stable_state == other.stable_state
            && self.interventions == other.interventions
            && self.suppressed == other.suppressed
            && self.data_gap == other.data_gap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineConfig {
    pub debounce_n: usize,
    pub cooldown_secs: f64,
    pub repetition_k: usize,
    pub max_one_challenge_per_step: bool,
    pub fallback_thresholds: [f64; 2],
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { debounce_n: 2, cooldown_secs: 30.0, repetition_k: 2, max_one_challenge_per_step: true, fallback_thresholds: [0.33, 0.66] }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.debounce_n < 1 {
            return Err("debounce_n must be >= 1".into());
        }
        if !(self.cooldown_secs >= 0.0) {
            return Err("cooldown_secs must be >= 0".into());
        }
        if self.repetition_k < 1 {
            return Err("repetition_k must be >= 1".into());
        }
        let [lo, hi] = self.fallback_thresholds;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err("fallback_thresholds must satisfy 0 < low < high < 1".into());
        }
        Ok(())
    }
}

/// Debounced state tracker.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Debouncer {
    stable: Option<LoadState>,
    candidate: Option<LoadState>,
    run: usize,
}

impl Debouncer {
    pub fn stable(&self) -> Option<LoadState> {
        self.stable
    }

    pub fn update(&mut self, raw: LoadState, n: usize) -> LoadState {
        let Some(stable) = self.stable else {
            self.stable = Some(raw);
            return raw;
        };
        if raw == stable {
            self.candidate = None;
            self.run = 0;
            return stable;
        }
        if self.candidate == Some(raw) {
            self.run += 1;
        } else {
            self.candidate = Some(raw);
            self.run = 1;
        }
        if self.run >= n {
            self.stable = Some(raw);
            self.candidate = None;
            self.run = 0;
        }
        self.stable.expect("initialized")
    }
}

/// Stable state after feeding `history` into a fresh debouncer.
pub fn debounce(history: &[LoadState], cfg: &EngineConfig) -> Option<LoadState> {
    let mut d = Debouncer::default();
    history.iter().map(|s| d.update(*s, cfg.debounce_n)).last()
}

/// Error type of the most recent error event, if any.
pub fn classify_confusion(events: &[TaskEvent]) -> Option<ErrorType> {
    events
        .iter()
        .filter(|e| e.kind == EventKind::Error)
        .fold(None::<&TaskEvent>, |best, e| match best {
            Some(b) if b.t > e.t => Some(b),
            _ => Some(e),
        })
        .and_then(|e| e.error_type)
}

/// Mutable rule-engine state carried across decisions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleState {
    /// Last firing time per kind.
    pub last_fired: BTreeMap<InterventionKind, f64>,
    /// Next index into the challenge rotation.
    pub rotation: usize,
    pub last_challenge_step: Option<u8>,
    pub current_step: Option<u8>,
    /// Steps that have shown a hint, and errors since that hint.
    hinted: BTreeMap<u8, ()>,
    repeats: BTreeMap<(u8, ErrorType), usize>,
}

impl RuleState {
    pub fn ready(&self, kind: InterventionKind, t: f64, cooldown: f64) -> bool {
        self.last_fired.get(&kind).map_or(true, |last| t >= last + cooldown)
    }

    fn fire(&mut self, kind: InterventionKind, t: f64) {
        self.last_fired.insert(kind, t);
    }

    /// Feeds behavioral events; returns the first (step, error type) pair
    /// whose post-hint repetitions reached `k`.
    fn observe(&mut self, events: &[TaskEvent], k: usize) -> Option<(u8, ErrorType, usize)> {
        let mut hit = None;
        for e in events {
            self.current_step = Some(e.step_id);
            match e.kind {
                EventKind::HintShown => {
                    self.hinted.insert(e.step_id, ());
                    self.repeats.retain(|(s, _), _| *s != e.step_id);
                }
                EventKind::Error if self.hinted.contains_key(&e.step_id) => {
                    if let Some(et) = e.error_type {
                        let n = self.repeats.entry((e.step_id, et)).or_insert(0);
                        *n += 1;
                        if *n >= k && hit.is_none() {
                            hit = Some((e.step_id, et, *n));
                        }
                    }
                }
                _ => {}
            }
        }
        hit
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RuleOutcome {
    pub interventions: Vec<Intervention>,
    pub suppressed: Vec<Suppressed>,
}

impl RuleOutcome {
    pub fn kinds(&self) -> Vec<InterventionKind> {
        self.interventions.iter().map(|i| i.kind).collect()
    }

    fn has(&self, kind: InterventionKind) -> bool {
        self.interventions.iter().any(|i| i.kind == kind)
    }
}

fn try_fire(out: &mut RuleOutcome, rules: &mut RuleState, cfg: &EngineConfig, t: f64, kind: InterventionKind, target: Option<String>, reason: String) {
    if out.has(kind) {
        return;
    }
    if rules.ready(kind, t, cfg.cooldown_secs) {
        rules.fire(kind, t);
        out.interventions.push(Intervention { kind, target, reason });
    } else {
        out.suppressed.push(Suppressed { kind, reason: "cooldown".into() });
    }
}

/// Applies the rule table for one decision point at time `t`.
///
/// `events` are the behavioral events since the previous decision.
pub fn decide(t: f64, stable: LoadState, confusion: Option<ErrorType>, events: &[TaskEvent], rules: &mut RuleState, cfg: &EngineConfig) -> RuleOutcome {
    let mut out = RuleOutcome::default();
    let repetition = rules.observe(events, cfg.repetition_k);

    if let Some(e) = events.iter().find(|e| e.kind == EventKind::ObjectGrab && e.object_ok == Some(false)) {
        let target = Some(format!("step:{}", e.step_id));
        try_fire(&mut out, rules, cfg, t, InterventionKind::HapticPulse, target, "wrong object held".into());
    }
    if let Some((step, et, n)) = repetition {
        let reason = format!("repeated {et} error x{n} after hint");
        try_fire(&mut out, rules, cfg, t, InterventionKind::GhostHand, Some(format!("step:{step}")), reason);
        if out.has(InterventionKind::GhostHand) {
            rules.repeats.remove(&(step, et));
        }
    }

    let step_target = rules.current_step.map(|s| format!("step:{s}"));
    match stable {
        LoadState::High => {
            if let Some(c) = confusion {
                let kind = InterventionKind::cue_for(c);
                try_fire(&mut out, rules, cfg, t, kind, step_target.clone(), format!("high load, {c} confusion"));
            }
            for kind in [InterventionKind::SimplifyInterface, InterventionKind::SlowProgression] {
                try_fire(&mut out, rules, cfg, t, kind, step_target.clone(), "high load".into());
            }
        }
        LoadState::Low => {
            let step = rules.current_step;
            if cfg.max_one_challenge_per_step && step.is_some() && rules.last_challenge_step == step {
                out.suppressed.push(Suppressed { kind: InterventionKind::CHALLENGES[rules.rotation % 3], reason: "challenge already issued this step".into() });
            } else {
                let ready = (0..3).map(|o| (rules.rotation + o) % 3).find(|&i| rules.ready(InterventionKind::CHALLENGES[i], t, cfg.cooldown_secs));
                match ready {
                    Some(i) => {
                        let kind = InterventionKind::CHALLENGES[i];
                        rules.fire(kind, t);
                        rules.rotation = i + 1;
                        rules.last_challenge_step = step;
                        out.interventions.push(Intervention { kind, target: step_target, reason: "low load".into() });
                    }
                    None => out.suppressed.push(Suppressed { kind: InterventionKind::CHALLENGES[rules.rotation % 3], reason: "cooldown".into() }),
                }
            }
        }
        LoadState::Optimal => {}
    }
    out
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] LstmError),
    #[error("invalid engine config: {0}")]
    Config(String),
}

/// How `latency_ms` is stamped on decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Wall-clock time from window close to decision.
    Wall,
    /// Virtual clock: computation takes zero virtual time.
    Virtual,
}

/// Result of one tick, with the intermediates that go into session logs.
#[derive(Debug, Clone)]
pub struct TickOutput {
    pub decision: Decision,
    pub window: AlignedWindow,
    pub raw: RawFeatures,
    pub features: FeatureSequence,
    pub wall_ms: f64,
}

/// Inference for one feature sequence: `(L, probs, raw_state)`.
pub fn infer(seq: &FeatureSequence, model: &ModelFile) -> Result<(f64, [f64; CLASSES], LoadState), LstmError> {
    let probs = lstm::predict(seq, &model.params)?;
    let l = lstm::load_score(&probs);
    Ok((l, probs, LoadState::from_score(l, &model.thresholds)))
}

/// One session's engine: owns the synchronized streams and all rule state.
#[derive(Debug, Clone)]
pub struct Engine {
    stream: SyncStream,
    extractor: FeatureExtractor,
    model: ModelFile,
    cfg: EngineConfig,
    debouncer: Debouncer,
    rules: RuleState,
    adapt: bool,
    clock: Clock,
    next_tick: f64,
}

impl Engine {
    pub fn new(model: ModelFile, stream_cfg: StreamConfig, feature_cfg: FeatureConfig, cfg: EngineConfig, adapt: bool, clock: Clock) -> Result<Self, EngineError> {
        cfg.validate().map_err(EngineError::Config)?;
        model.params.check()?;
        let extractor = FeatureExtractor::new(feature_cfg, stream_cfg.sample_rate, stream_cfg.window_len)?;
        Ok(Self {
            stream: SyncStream::new(stream_cfg)?,
            extractor,
            model,
            cfg,
            debouncer: Debouncer::default(),
            rules: RuleState::default(),
            adapt,
            clock,
            next_tick: stream_cfg.first_tick(),
        })
    }

    pub fn stream(&self) -> &SyncStream {
        &self.stream
    }

    pub fn stream_mut(&mut self) -> &mut SyncStream {
        &mut self.stream
    }

    pub fn model(&self) -> &ModelFile {
        &self.model
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    /// Next scheduled window close.
    pub fn next_tick(&self) -> f64 {
        self.next_tick
    }

    /// Shifts the tick schedule to start relative to `t0`.
    pub fn anchor_ticks(&mut self, t0: f64) {
        self.next_tick = t0 + self.stream.config().first_tick();
    }

    pub fn push_eeg(&mut self, s: EegSample) -> PushOutcome {
        self.stream.push_eeg(s)
    }

    pub fn push_event(&mut self, e: TaskEvent) -> PushOutcome {
        self.stream.push_event(e)
    }

    /// Event-driven rules evaluated as soon as an event arrives (haptic on a
    /// wrong object). The cooldown it sets also covers the next tick.
    pub fn on_event(&mut self, e: &TaskEvent) -> Vec<Intervention> {
        if !self.adapt || e.kind != EventKind::ObjectGrab || e.object_ok != Some(false) {
            return Vec::new();
        }
        let mut out = RuleOutcome::default();
        try_fire(&mut out, &mut self.rules, &self.cfg, e.t, InterventionKind::HapticPulse, Some(format!("step:{}", e.step_id)), "wrong object held".into());
        out.interventions
    }

    /// Closes the window at the scheduled tick time and decides.
    pub fn tick(&mut self) -> Result<TickOutput, EngineError> {
        let t_close = self.next_tick;
        self.next_tick += self.stream.config().cadence;
        self.tick_at(t_close)
    }

    pub fn tick_at(&mut self, t_close: f64) -> Result<TickOutput, EngineError> {
        let started = Instant::now();
        let window = self.stream.close_window_lossy(t_close)?;
        let raw = self.extractor.raw(&window)?;
        let features = self.model.norms.normalize(&raw);
        let mut decision = self.decide_from_features(&features, &window.events_in_window, window.lossy)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        if self.clock == Clock::Wall {
            decision.latency_ms = wall_ms;
        }
        Ok(TickOutput { decision, window, raw, features, wall_ms })
    }

    /// Inference, debounce and rules for an already extracted sequence.
    /// `events` are the behavioral events of the window's span.
    pub fn decide_from_features(&mut self, features: &FeatureSequence, events: &[TaskEvent], data_gap: bool) -> Result<Decision, EngineError> {
        let t = features.t_close;
        let (l, probs, raw_state) = infer(features, &self.model)?;
        let stable_state = if data_gap {
            self.debouncer.stable().unwrap_or(raw_state)
        } else {
            self.debouncer.update(raw_state, self.cfg.debounce_n)
        };
        let outcome = if self.adapt && !data_gap {
            let confusion = classify_confusion(events);
            decide(t, stable_state, confusion, events, &mut self.rules, &self.cfg)
        } else {
            RuleOutcome::default()
        };
        Ok(Decision {
            t,
            l,
            probs,
            raw_state,
            stable_state,
            interventions: outcome.interventions,
            suppressed: outcome.suppressed,
            latency_ms: 0.0,
            data_gap,
        })
    }
}
