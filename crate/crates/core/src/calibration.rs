//! Per-subject calibration: rest / 1-back / 3-back recording, labeled
//! dataset assembly, model training and threshold derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureConfig, FeatureError, FeatureExtractor, FeatureSequence, Frame, NormStats, RawFeatures};
use crate::lstm::{self, EpochStats, Example, LstmError, ModelFile, ModelParams, TrainConfig, CLASSES};
use crate::streams::{StreamConfig, StreamError, SyncStream};
use crate::synthgen::{self, BandMixModel, EegGenerator, LatentParams, NBackLevel, NBackSim, SubjectProfile, TaskParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub t_low: f64,
    pub t_high: f64,
}

impl Thresholds {
    pub fn new(t_low: f64, t_high: f64) -> Option<Self> {
        let t = Self { t_low, t_high };
        t.is_valid().then_some(t)
    }

    /// `0 < t_low < t_high < 1`.
    pub fn is_valid(&self) -> bool {
        0.0 < self.t_low && self.t_low < self.t_high && self.t_high < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationPlan {
    pub rest_secs: f64,
    pub oneback_secs: f64,
    pub threeback_secs: f64,
    /// Length of the mid-load recording that supplies optimal-class windows.
    pub optimal_secs: f64,
    /// Spacing of training windows inside a phase.
    pub train_hop: f64,
}

impl Default for CalibrationPlan {
    fn default() -> Self {
        Self { rest_secs: 60.0, oneback_secs: 120.0, threeback_secs: 120.0, optimal_secs: 120.0, train_hop: 2.0 }
    }
}

impl CalibrationPlan {
    /// Duration of the rest + 1-back + 3-back protocol.
    pub fn protocol_secs(&self) -> f64 {
        self.rest_secs + self.oneback_secs + self.threeback_secs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Rest,
    Oneback,
    Threeback,
    SyntheticOptimal,
}

impl Phase {
    /// Class index (`0` low, `1` optimal, `2` high).
    pub fn label(self) -> usize {
        match self {
            Phase::Rest | Phase::Oneback => 0,
            Phase::SyntheticOptimal => 1,
            Phase::Threeback => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub phase: Phase,
    pub label: usize,
    pub windows: Vec<RawFeatures>,
}

impl LabeledSegment {
    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.windows.iter().flat_map(|w| w.frames.iter())
    }
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("subject degenerate: {0}")]
    SubjectDegenerate(String),
    #[error("segment {0:?} is empty")]
    EmptySegment(Phase),
    #[error("class {class} has {count} windows; both splits need at least one")]
    TooFewSamples { class: usize, count: usize },
    #[error("invalid calibration input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Model(#[from] LstmError),
}

/// Window close times (relative to phase start) for a phase of `phase_secs`:
/// the first close needs one full window, then one every `hop`.
pub fn window_close_times(phase_secs: f64, window_len: f64, hop: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let t = window_len + k as f64 * hop;
        if t > phase_secs + 1e-9 {
            break;
        }
        out.push(t);
        k += 1;
    }
    out
}

/// Everything the synthetic recordings need besides the subject.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimSetup {
    pub stream: StreamConfig,
    pub features: FeatureConfig,
    pub mix: BandMixModel,
    pub latent: LatentParams,
    pub task: TaskParams,
}

/// Continuous synthetic recording that closes windows on request. Latent
/// load, EEG and n-back behavior advance together sample by sample.
pub struct Recorder {
    setup: SimSetup,
    profile: SubjectProfile,
    gen: EegGenerator,
    behavior: NBackSim,
    stream: SyncStream,
    extractor: FeatureExtractor,
    rng: ChaCha8Rng,
    l: f64,
    samples: usize,
    task_active: bool,
}

impl Recorder {
    pub fn new(setup: SimSetup, profile: SubjectProfile, initial_load: f64, seed: u64) -> Result<Self, CalibrationError> {
        profile.validate().map_err(CalibrationError::Invalid)?;
        let sr = setup.stream.sample_rate;
        Ok(Self {
            setup,
            profile,
            gen: EegGenerator::new(profile, setup.mix, sr, seed.wrapping_mul(3).wrapping_add(1)),
            behavior: NBackSim::new(setup.task, 1.0, seed.wrapping_mul(3).wrapping_add(2)),
            stream: SyncStream::new(setup.stream)?,
            extractor: FeatureExtractor::new(setup.features, sr, setup.stream.window_len)?,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_mul(3).wrapping_add(3)),
            l: initial_load,
            samples: 0,
            task_active: true,
        })
    }

    pub fn now(&self) -> f64 {
        self.gen.next_t()
    }

    /// Pauses or resumes the n-back task; rest has no behavior at all.
    pub fn set_task(&mut self, active: bool) {
        if active && !self.task_active {
            self.behavior.resume_at(self.now());
        }
        self.task_active = active;
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Records `secs` seconds with the latent load relaxing toward `target`,
    /// closing a window every `hop` seconds once a full window exists.
    pub fn record(&mut self, target: f64, secs: f64, hop: f64) -> Result<Vec<RawFeatures>, CalibrationError> {
        let start = self.now();
        let sr = self.setup.stream.sample_rate;
        let n = (secs * sr).round() as usize;
        let mut closes = window_close_times(secs, self.setup.stream.window_len, hop).into_iter().map(|c| start + c).peekable();
        let mut out = Vec::new();
        let dt = 1.0 / sr;
        for _ in 0..=n {
            let t = self.now();
            while closes.peek().is_some_and(|c| *c <= t + 1e-9) {
                let c = closes.next().expect("peeked");
                let w = self.stream.close_window_lossy(c)?;
                out.push(self.extractor.raw(&w)?);
            }
            if t >= start + secs - 1e-9 {
                break;
            }
            if self.task_active {
                for e in self.behavior.advance_to(t, self.l) {
                    self.stream.push_event(e);
                }
            }
            let s = self.gen.next_sample(self.l);
            self.stream.push_eeg(s);
            self.samples += 1;
            self.l = synthgen::latent_step(self.l, dt, target, self.profile.tau, self.setup.latent.noise, &mut self.rng);
        }
        Ok(out)
    }
}

/// Labeled segments of one calibration run plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationData {
    pub segments: Vec<LabeledSegment>,
    /// EEG samples recorded during rest + 1-back + 3-back.
    pub protocol_samples: usize,
}

impl CalibrationData {
    pub fn segment(&self, phase: Phase) -> Option<&LabeledSegment> {
        self.segments.iter().find(|s| s.phase == phase)
    }
}

/// Runs the protocol against a simulated subject.
pub fn run_calibration(subject: &SubjectProfile, plan: &CalibrationPlan, setup: &SimSetup, seed: u64) -> Result<CalibrationData, CalibrationError> {
    for (name, v) in [("rest_secs", plan.rest_secs), ("oneback_secs", plan.oneback_secs), ("threeback_secs", plan.threeback_secs), ("optimal_secs", plan.optimal_secs), ("train_hop", plan.train_hop)] {
        if !(v > 0.0) {
            return Err(CalibrationError::Invalid(format!("{name} must be > 0")));
        }
    }
    let rest_target = synthgen::nback_phase(NBackLevel::Rest, subject);
    let mut rec = Recorder::new(*setup, *subject, rest_target, seed)?;
    let mut segments = Vec::new();
    for (phase, level, secs) in [
        (Phase::Rest, NBackLevel::Rest, plan.rest_secs),
        (Phase::Oneback, NBackLevel::One, plan.oneback_secs),
        (Phase::Threeback, NBackLevel::Three, plan.threeback_secs),
    ] {
        rec.set_task(phase != Phase::Rest);
        let windows = rec.record(synthgen::nback_phase(level, subject), secs, plan.train_hop)?;
        segments.push(LabeledSegment { phase, label: phase.label(), windows });
    }
    let protocol_samples = rec.samples();
    // Mid-range load, recorded separately after the protocol.
    let mut opt = Recorder::new(*setup, *subject, 0.5, seed ^ 0x0971_3A1)?;
    let windows = opt.record(0.5, plan.optimal_secs, plan.train_hop)?;
    segments.push(LabeledSegment { phase: Phase::SyntheticOptimal, label: Phase::SyntheticOptimal.label(), windows });

    check_separation(&segments)?;
    Ok(CalibrationData { segments, protocol_samples })
}

/// Rejects recordings whose 1-back and 3-back EEG features are
/// indistinguishable (Welch t on the per-window theta/alpha ratio).
fn check_separation(segments: &[LabeledSegment]) -> Result<(), CalibrationError> {
    let ratio = |p: Phase| -> Vec<f64> {
        segments.iter().filter(|s| s.phase == p).flat_map(|s| s.windows.iter().map(|w| w.frames.iter().map(|f| f[3]).sum::<f64>() / w.frames.len() as f64)).collect()
    };
    let (a, b) = (ratio(Phase::Oneback), ratio(Phase::Threeback));
    if a.len() < 2 || b.len() < 2 {
        return Err(CalibrationError::EmptySegment(if a.len() < 2 { Phase::Oneback } else { Phase::Threeback }));
    }
    let t = welch_t(&a, &b);
    if !(t.abs() >= 3.0) {
        return Err(CalibrationError::SubjectDegenerate(format!("1-back vs 3-back theta/alpha separation t = {t:.2}")));
    }
    Ok(())
}

pub fn welch_t(a: &[f64], b: &[f64]) -> f64 {
    let mv = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0);
        (m, v)
    };
    let ((ma, va), (mb, vb)) = (mv(a), mv(b));
    let se = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
    if se == 0.0 {
        return if ma == mb { 0.0 } else { f64::INFINITY.copysign(mb - ma) };
    }
    (mb - ma) / se
}

/// Z-scoring stats over every frame of the rest windows.
pub fn baseline_stats(rest: &LabeledSegment) -> Result<NormStats, CalibrationError> {
    if rest.windows.is_empty() {
        return Err(CalibrationError::EmptySegment(rest.phase));
    }
    Ok(NormStats::fit(rest.frames()))
}

pub fn normalized(seg: &LabeledSegment, norms: &NormStats) -> Vec<FeatureSequence> {
    seg.windows.iter().map(|w| norms.normalize(w)).collect()
}

/// Stratified, seeded (train, val) split of all segment windows.
pub fn build_dataset(segments: &[LabeledSegment], norms: &NormStats, val_fraction: f64, seed: u64) -> Result<(Vec<Example>, Vec<Example>), CalibrationError> {
    let all: Vec<Example> = segments.iter().flat_map(|s| normalized(s, norms).into_iter().map(move |q| Example::from_sequence(&q, s.label))).collect();
    let labels: Vec<usize> = all.iter().map(|e| e.label).collect();
    let (ti, vi) = lstm::stratified_split(&labels, val_fraction, seed);
    for class in 0..CLASSES {
        let n_t = ti.iter().filter(|&&i| labels[i] == class).count();
        let n_v = vi.iter().filter(|&&i| labels[i] == class).count();
        if n_t == 0 || n_v == 0 {
            return Err(CalibrationError::TooFewSamples { class, count: n_t + n_v });
        }
    }
    Ok((ti.iter().map(|&i| all[i].clone()).collect(), vi.iter().map(|&i| all[i].clone()).collect()))
}

/// Linear-interpolation percentile, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

/// Load scores of every window of `seg` under `params` (eval mode).
pub fn segment_scores(params: &ModelParams, norms: &NormStats, seg: &LabeledSegment) -> Result<Vec<f64>, CalibrationError> {
    normalized(seg, norms).iter().map(|q| Ok(lstm::load_score(&lstm::predict(q, params)?))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdOutcome {
    pub thresholds: Thresholds,
    pub calibration_weak: bool,
    pub median_oneback: f64,
    pub median_threeback: f64,
}

/// Threshold rule from per-window scores: `t_low` = q75 of 1-back scores,
/// `t_high` = q25 of 3-back scores, falling back when the order fails.
pub fn thresholds_from_scores(oneback: &[f64], threeback: &[f64], fallback: [f64; 2]) -> Result<ThresholdOutcome, CalibrationError> {
    if oneback.is_empty() {
        return Err(CalibrationError::EmptySegment(Phase::Oneback));
    }
    if threeback.is_empty() {
        return Err(CalibrationError::EmptySegment(Phase::Threeback));
    }
    let proposed = Thresholds { t_low: percentile(oneback, 75.0), t_high: percentile(threeback, 25.0) };
    let (thresholds, weak) = if proposed.is_valid() { (proposed, false) } else { (Thresholds { t_low: fallback[0], t_high: fallback[1] }, true) };
    Ok(ThresholdOutcome { thresholds, calibration_weak: weak, median_oneback: median(oneback), median_threeback: median(threeback) })
}

pub fn derive_thresholds(params: &ModelParams, norms: &NormStats, data: &CalibrationData, fallback: [f64; 2]) -> Result<ThresholdOutcome, CalibrationError> {
    let seg = |p| data.segment(p).ok_or(CalibrationError::EmptySegment(p));
    let one = segment_scores(params, norms, seg(Phase::Oneback)?)?;
    let three = segment_scores(params, norms, seg(Phase::Threeback)?)?;
    thresholds_from_scores(&one, &three, fallback)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub thresholds: Thresholds,
    pub calibration_weak: bool,
    pub median_oneback: f64,
    pub median_threeback: f64,
    pub windows_per_class: [usize; CLASSES],
    pub protocol_samples: usize,
    pub val_acc: f64,
    pub history: Vec<EpochStats>,
}

/// Full calibration: record, normalize, train, threshold.
pub fn calibrate(subject: &SubjectProfile, plan: &CalibrationPlan, setup: &SimSetup, train_cfg: &TrainConfig, fallback: [f64; 2], seed: u64) -> Result<(ModelFile, CalibrationReport), CalibrationError> {
    let data = run_calibration(subject, plan, setup, seed)?;
    let rest = data.segment(Phase::Rest).ok_or(CalibrationError::EmptySegment(Phase::Rest))?;
    let pooled = NormStats::fit(data.segments.iter().flat_map(|s| s.frames()));
    let norms = baseline_stats(rest)?.widen_floored(&pooled);
    let (train, val) = build_dataset(&data.segments, &norms, train_cfg.val_fraction, seed)?;
    let (params, history) = lstm::train_split(&train, &val, &TrainConfig { seed: train_cfg.seed.wrapping_add(seed), ..*train_cfg })?;
    let outcome = derive_thresholds(&params, &norms, &data, fallback)?;
    let (_, val_acc) = lstm::evaluate(&params, &val)?;
    let mut windows_per_class = [0; CLASSES];
    for s in &data.segments {
        windows_per_class[s.label] += s.windows.len();
    }
    let report = CalibrationReport {
        thresholds: outcome.thresholds,
        calibration_weak: outcome.calibration_weak,
        median_oneback: outcome.median_oneback,
        median_threeback: outcome.median_threeback,
        windows_per_class,
        protocol_samples: data.protocol_samples,
        val_acc,
        history,
    };
    Ok((ModelFile { params, thresholds: outcome.thresholds, norms }, report))
}

/// Class-balanced synthetic dataset at stationary phase loads: low windows
/// alternate rest and 1-back recordings, optimal at 0.5, high at 3-back.
pub fn labeled_dataset(subject: &SubjectProfile, setup: &SimSetup, per_class: usize, hop: f64, seed: u64) -> Result<Vec<(RawFeatures, usize)>, CalibrationError> {
    let secs_for = |n: usize| setup.stream.window_len + (n.max(1) - 1) as f64 * hop;
    let mut out = Vec::with_capacity(3 * per_class);
    let low_rest = per_class / 2;
    let plan: [(f64, usize, usize); 4] = [
        (synthgen::nback_phase(NBackLevel::Rest, subject), low_rest, 0),
        (synthgen::nback_phase(NBackLevel::One, subject), per_class - low_rest, 0),
        (0.5, per_class, 1),
        (synthgen::nback_phase(NBackLevel::Three, subject), per_class, 2),
    ];
    for (i, (target, n, label)) in plan.into_iter().enumerate() {
        if n == 0 {
            continue;
        }
        let mut rec = Recorder::new(*setup, *subject, target, seed.wrapping_add(i as u64 * 7919))?;
        rec.set_task(i != 0);
        let windows = rec.record(target, secs_for(n), hop)?;
        out.extend(windows.into_iter().take(n).map(|w| (w, label)));
    }
    Ok(out)
}
