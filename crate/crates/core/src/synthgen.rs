//! Ground-truth simulator.
//!
//! A latent cognitive load `l` in [0, 1] drives three things: band
//! amplitudes of a synthetic 14-channel EEG (theta up, alpha down), the
//! error rate of a simulated trainee working through the 8-step milling
//! procedure, and the targets of rest / 1-back / 3-back calibration phases.
//! Interventions chosen by the engine shift the latent target, which closes
//! the loop. Everything is a pure function of its seeds.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::InterventionKind;
use crate::streams::{EegSample, ErrorType, EventKind, TaskEvent, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubjectProfile {
    pub skill: f64,
    pub reactivity: f64,
    /// Broadband pink-noise RMS in µV.
    pub noise_level: f64,
    pub tau: f64,
    pub seed: u64,
}

impl Default for SubjectProfile {
    fn default() -> Self {
        Self { skill: 0.3, reactivity: 0.8, noise_level: 3.0, tau: 8.0, seed: 0 }
    }
}

impl SubjectProfile {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.skill) || !unit(self.reactivity) {
            return Err("skill and reactivity must lie in [0, 1]".into());
        }
        if !(self.noise_level >= 0.0) || !(self.tau > 0.0) {
            return Err("noise_level must be >= 0 and tau > 0".into());
        }
        Ok(())
    }
}

/// Band amplitudes and their load couplings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandMixModel {
    /// Theta, alpha, beta, gamma amplitudes at zero load, µV.
    pub base: [f64; 4],
    pub k_theta: f64,
    pub k_alpha: f64,
    /// Relative amplitude jitter per channel and band.
    pub jitter: f64,
}

impl Default for BandMixModel {
    fn default() -> Self {
        Self { base: [6.0, 10.0, 4.0, 2.0], k_theta: 0.8, k_alpha: -0.6, jitter: 0.1 }
    }
}

impl BandMixModel {
    /// Effective `[theta, alpha, beta, gamma]` amplitudes at load `l`.
    pub fn amplitudes(&self, l: f64, reactivity: f64) -> [f64; 4] {
        let l = l.clamp(0.0, 1.0);
        let [th, al, be, ga] = self.base;
        [
            (th * (1.0 + self.k_theta * reactivity * l)).max(0.0),
            (al * (1.0 + self.k_alpha * reactivity * l)).max(0.0),
            be,
            ga,
        ]
    }
}

/// Frequency range each channel's oscillator is drawn from, per band.
const OSC_RANGES: [(f64, f64); 4] = [(4.5, 6.5), (8.5, 12.0), (15.0, 28.0), (32.0, 45.0)];

/// Voss-McCartney pink noise with unit variance.
#[derive(Debug, Clone)]
struct PinkNoise {
    rows: [f64; 16],
    counter: u32,
}

impl PinkNoise {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let n = Normal::new(0.0, 1.0).expect("valid normal");
        Self { rows: std::array::from_fn(|_| n.sample(rng)), counter: 0 }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> f64 {
        let n = Normal::new(0.0, 1.0).expect("valid normal");
        self.counter = self.counter.wrapping_add(1);
        let k = (self.counter.trailing_zeros() as usize).min(15);
        self.rows[k] = n.sample(rng);
        (self.rows.iter().sum::<f64>() + n.sample(rng)) / 17.0_f64.sqrt()
    }
}

/// Synthetic 14-channel EEG. Oscillator frequencies and phases belong to the
/// subject (`profile.seed`); noise belongs to the run (`seed`).
#[derive(Debug, Clone)]
pub struct EegGenerator {
    profile: SubjectProfile,
    mix: BandMixModel,
    sample_rate: f64,
    freqs: [[f64; 4]; CHANNELS],
    phases: [[f64; 4]; CHANNELS],
    gains: [[f64; 4]; CHANNELS],
    pink: Vec<PinkNoise>,
    rng: ChaCha8Rng,
    n: u64,
}

impl EegGenerator {
    pub fn new(profile: SubjectProfile, mix: BandMixModel, sample_rate: f64, seed: u64) -> Self {
        let mut subject = ChaCha8Rng::seed_from_u64(profile.seed ^ 0xEE6_0000);
        let mut freqs = [[0.0; 4]; CHANNELS];
        let mut phases = [[0.0; 4]; CHANNELS];
        let mut gains = [[1.0; 4]; CHANNELS];
        for ch in 0..CHANNELS {
            for b in 0..4 {
                let (lo, hi) = OSC_RANGES[b];
                freqs[ch][b] = subject.gen_range(lo..hi);
                phases[ch][b] = subject.gen_range(0.0..2.0 * PI);
                gains[ch][b] = 1.0 + mix.jitter * subject.gen_range(-1.0..1.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pink = (0..CHANNELS).map(|_| PinkNoise::new(&mut rng)).collect();
        Self { profile, mix, sample_rate, freqs, phases, gains, pink, rng, n: 0 }
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Timestamp of the next sample.
    pub fn next_t(&self) -> f64 {
        self.n as f64 / self.sample_rate
    }

    /// Emits the next sample at load `l`.
    pub fn next_sample(&mut self, l: f64) -> EegSample {
        let t = self.next_t();
        self.n += 1;
        let amps = self.mix.amplitudes(l, self.profile.reactivity);
        let mut channels = Vec::with_capacity(CHANNELS);
        for ch in 0..CHANNELS {
            let mut v = 0.0;
            for b in 0..4 {
                v += self.gains[ch][b] * amps[b] * (2.0 * PI * self.freqs[ch][b] * t + self.phases[ch][b]).sin();
            }
            v += self.profile.noise_level * self.pink[ch].next(&mut self.rng);
            channels.push(v);
        }
        EegSample::new(t, channels)
    }
}

/// Constant-load EEG stream of `secs` seconds at 128 Hz.
pub fn gen_eeg(l: f64, secs: f64, profile: &SubjectProfile, seed: u64) -> Vec<EegSample> {
    let mut g = EegGenerator::new(*profile, BandMixModel::default(), 128.0, seed);
    let n = (secs * 128.0).round() as usize;
    (0..n).map(|_| g.next_sample(l)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatentParams {
    pub scaffold_offset: f64,
    pub challenge_offset: f64,
    pub offset_cap: f64,
    /// Diffusion per sqrt(second).
    pub noise: f64,
}

impl Default for LatentParams {
    fn default() -> Self {
        Self { scaffold_offset: -0.15, challenge_offset: 0.15, offset_cap: 0.3, noise: 0.02 }
    }
}

fn is_challenge(kind: InterventionKind) -> bool {
    matches!(kind, InterventionKind::ErrorInjection | InterventionKind::ReflectivePrompt | InterventionKind::TimePressure)
}

/// Latent target under the given difficulty, skill and active interventions.
pub fn latent_target(difficulty_norm: f64, skill: f64, active: &[InterventionKind], params: &LatentParams) -> f64 {
    let mut down = 0.0;
    let mut up = 0.0;
    for k in active {
        match k {
            InterventionKind::None => {}
            k if is_challenge(*k) => up += params.challenge_offset,
            _ => down += params.scaffold_offset,
        }
    }
    let offset = down.max(-params.offset_cap) + up.min(params.offset_cap);
    (0.5 + 0.5 * (difficulty_norm - skill) + offset).clamp(0.0, 1.0)
}

/// One Euler-Maruyama step of `dl = (target - l) / tau dt + noise dW`, clamped.
pub fn latent_step(l: f64, dt: f64, target: f64, tau: f64, noise: f64, rng: &mut impl Rng) -> f64 {
    let w: f64 = Normal::new(0.0, 1.0).expect("valid normal").sample(rng);
    (l + dt / tau * (target - l) + noise * dt.sqrt() * w).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErrorModel {
    pub p0: f64,
    pub a: f64,
    pub b: f64,
    pub high_knee: f64,
    pub low_knee: f64,
}

impl Default for ErrorModel {
    fn default() -> Self {
        Self { p0: 0.02, a: 0.5, b: 0.08, high_knee: 0.66, low_knee: 0.33 }
    }
}

impl ErrorModel {
    /// Per-action error probability at load `l`.
    pub fn probability(&self, l: f64) -> f64 {
        let lapse = if l < self.low_knee { self.b } else { 0.0 };
        (self.p0 + self.a * (l - self.high_knee).max(0.0) + lapse).clamp(0.0, 1.0)
    }
}

/// Step catalogue of the two-module drilling procedure.
pub const STEPS: [(u8, &str); 8] = [
    (1, "align part"),
    (1, "mount vise parallels"),
    (1, "mount tool"),
    (1, "set zero"),
    (2, "set spindle speed"),
    (2, "position axes"),
    (2, "drill"),
    (2, "deburr and inspect"),
];

/// Ground-truth error-type mix per step: P(where), P(how); remainder is why.
const ERROR_MIX: [(f64, f64); 8] =
    [(0.5, 0.3), (0.2, 0.6), (0.4, 0.4), (0.2, 0.3), (0.2, 0.3), (0.5, 0.3), (0.2, 0.5), (0.3, 0.3)];

pub fn module_of(step_id: u8) -> u8 {
    STEPS[usize::from(step_id.clamp(1, 8)) - 1].0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskParams {
    pub action_secs: f64,
    pub errors: ErrorModel,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self { action_secs: 2.5, errors: ErrorModel::default() }
    }
}

/// Simulated trainee executing the procedure; loops back to step 1 after 8.
#[derive(Debug, Clone)]
pub struct TaskSim {
    params: TaskParams,
    skill: f64,
    pub step_id: u8,
    pub difficulty: u8,
    successes: u32,
    required: u32,
    next_action: f64,
    started: bool,
    rng: ChaCha8Rng,
}

impl TaskSim {
    pub fn new(params: TaskParams, skill: f64, difficulty: u8, start_t: f64, seed: u64) -> Self {
        Self {
            params,
            skill,
            step_id: 1,
            difficulty: difficulty.clamp(1, 5),
            successes: 0,
            required: 0,
            next_action: start_t,
            started: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn required_actions(&mut self, l: f64) -> u32 {
        let mean = 4.0 + 4.0 * (1.0 - self.skill) + 4.0 * l;
        (mean + self.rng.gen_range(-1.0..1.0)).round().max(1.0) as u32
    }

    fn draw_error_type(&mut self) -> ErrorType {
        let (pw, ph) = ERROR_MIX[usize::from(self.step_id) - 1];
        let u: f64 = self.rng.gen();
        if u < pw {
            ErrorType::Where
        } else if u < pw + ph {
            ErrorType::How
        } else {
            ErrorType::Why
        }
    }

    fn ev(&self, t: f64, kind: EventKind) -> TaskEvent {
        TaskEvent::new(t, kind, self.step_id, module_of(self.step_id), self.difficulty)
    }

    /// Runs every action opportunity with time `<= t` at load `l`.
    pub fn advance_to(&mut self, t: f64, l: f64) -> Vec<TaskEvent> {
        let mut out = Vec::new();
        while self.next_action <= t {
            let at = self.next_action;
            if !self.started {
                self.started = true;
                self.required = self.required_actions(l);
                out.push(self.ev(at, EventKind::StepStart));
                self.next_action += self.params.action_secs;
                continue;
            }
            if self.rng.gen::<f64>() < self.params.errors.probability(l) {
                let et = self.draw_error_type();
                if et == ErrorType::Where {
                    out.push(TaskEvent::grab(at, self.step_id, module_of(self.step_id), false, self.difficulty));
                }
                out.push(TaskEvent::error(at, self.step_id, module_of(self.step_id), et, self.difficulty));
            } else {
                out.push(TaskEvent::grab(at, self.step_id, module_of(self.step_id), true, self.difficulty));
                self.successes += 1;
                if self.successes >= self.required {
                    out.push(self.ev(at, EventKind::StepComplete));
                    self.step_id = self.step_id % 8 + 1;
                    self.successes = 0;
                    self.required = self.required_actions(l);
                    out.push(self.ev(at, EventKind::StepStart));
                }
            }
            self.next_action += self.params.action_secs;
        }
        out
    }

    /// Event marking an intervention delivered to the trainee.
    pub fn marker(&self, t: f64, kind: EventKind) -> TaskEvent {
        self.ev(t, kind)
    }
}

/// Events from `dt` seconds of work on `step_id` at constant load `l`.
pub fn task_step(step_id: u8, l: f64, profile: &SubjectProfile, seed: u64, dt: f64) -> Vec<TaskEvent> {
    let mut sim = TaskSim::new(TaskParams::default(), profile.skill, 3, 0.0, seed);
    sim.step_id = step_id.clamp(1, 8);
    sim.advance_to(dt, l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NBackLevel {
    Rest,
    One,
    Three,
}

/// Latent target induced by a calibration phase.
pub fn nback_phase(level: NBackLevel, profile: &SubjectProfile) -> f64 {
    match level {
        NBackLevel::Rest => 0.15,
        NBackLevel::One => 0.30,
        NBackLevel::Three => 0.85 * (1.0 - 0.2 * profile.skill),
    }
}

/// Behavior during n-back phases: one trial per `action_secs` with the
/// load-dependent error model, grouped into blocks of random length and
/// nuisance difficulty so the behavioral columns vary independently of the
/// phase label.
#[derive(Debug, Clone)]
pub struct NBackSim {
    params: TaskParams,
    next_trial: f64,
    block_end: f64,
    step_id: u8,
    difficulty: u8,
    rng: ChaCha8Rng,
}

impl NBackSim {
    pub fn new(params: TaskParams, start_t: f64, seed: u64) -> Self {
        Self { params, next_trial: start_t, block_end: f64::NEG_INFINITY, step_id: 1, difficulty: 1, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Skips to `t` without emitting anything (the task was paused).
    pub fn resume_at(&mut self, t: f64) {
        self.next_trial = self.next_trial.max(t);
        self.block_end = f64::NEG_INFINITY;
    }

    pub fn advance_to(&mut self, t: f64, l: f64) -> Vec<TaskEvent> {
        let mut out = Vec::new();
        while self.next_trial <= t {
            let at = self.next_trial;
            if at >= self.block_end {
                self.block_end = at + self.rng.gen_range(5.0..50.0);
                self.step_id = self.rng.gen_range(1..=8);
                self.difficulty = self.rng.gen_range(1..=5);
                out.push(TaskEvent::new(at, EventKind::StepStart, self.step_id, module_of(self.step_id), self.difficulty));
            } else if self.rng.gen::<f64>() < self.params.errors.probability(l) {
                let et = ErrorType::ALL[self.rng.gen_range(0..3)];
                out.push(TaskEvent::error(at, self.step_id, module_of(self.step_id), et, self.difficulty));
            }
            self.next_trial += self.params.action_secs;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nback_targets() {
        let p = |skill| SubjectProfile { skill, ..SubjectProfile::default() };
        assert_eq!(nback_phase(NBackLevel::One, &p(0.3)), 0.30);
        assert_eq!(nback_phase(NBackLevel::Rest, &p(0.3)), 0.15);
        assert_eq!(nback_phase(NBackLevel::Three, &p(0.0)), 0.85);
        assert!((nback_phase(NBackLevel::Three, &p(1.0)) - 0.68).abs() < 1e-12);
    }

    #[test]
    fn error_probability_examples() {
        let m = ErrorModel::default();
        assert!((m.probability(0.5) - 0.02).abs() < 1e-12);
        assert!((m.probability(1.0) - 0.19).abs() < 1e-12);
        assert!((m.probability(0.2) - 0.10).abs() < 1e-12);
    }

    #[test]
    fn target_offsets_capped() {
        let lp = LatentParams::default();
        assert_eq!(latent_target(0.3, 0.3, &[], &lp), 0.5);
        use InterventionKind::*;
        let t = latent_target(1.0, 0.0, &[ArrowCue, GhostHand, SimplifyInterface], &lp);
        assert!((t - 0.7).abs() < 1e-12);
        let t = latent_target(0.0, 0.0, &[ErrorInjection, TimePressure, ReflectivePrompt], &lp);
        assert!((t - 0.8).abs() < 1e-12);
    }

    #[test]
    fn scaffolding_pulls_load_down() {
        let lp = LatentParams::default();
        let target = latent_target(0.75, 0.3, &[InterventionKind::SimplifyInterface], &lp);
        assert!(target < 0.9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mean: f64 = (0..4000).map(|_| latent_step(0.9, 0.5, target, 8.0, 0.02, &mut rng)).sum::<f64>() / 4000.0;
        assert!(mean < 0.9);
    }

    #[test]
    fn generator_is_seeded() {
        let p = SubjectProfile::default();
        assert_eq!(gen_eeg(0.4, 1.0, &p, 5), gen_eeg(0.4, 1.0, &p, 5));
        assert_ne!(gen_eeg(0.4, 1.0, &p, 5), gen_eeg(0.4, 1.0, &p, 6));
    }

    #[test]
    fn task_sim_walks_steps() {
        let mut sim = TaskSim::new(TaskParams::default(), 0.3, 3, 1.0, 9);
        let ev = sim.advance_to(600.0, 0.5);
        assert_eq!(ev[0].kind, EventKind::StepStart);
        let completes = ev.iter().filter(|e| e.kind == EventKind::StepComplete).count();
        assert!(completes >= 8, "{completes} steps in 600 s");
        for e in &ev {
            e.validate().unwrap();
        }
    }
}
