//! Closed-loop simulation: a synthetic trainee (EEG + task behavior + latent
//! load) streams into the engine, and under the adaptive policy the engine's
//! interventions feed back into the latent dynamics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Clock, Engine, EngineConfig, EngineError, InterventionKind};
use crate::features::FeatureConfig;
use crate::lstm::ModelFile;
use crate::session_log::{self, ClockKind, DecisionRecord, EegSummaryRecord, EventRecord, FeaturesRecord, MetaRecord, Policy, Record};
use crate::streams::{EventKind, PushOutcome, StreamConfig, CHANNELS};
use crate::synthgen::{self, BandMixModel, EegGenerator, LatentParams, SubjectProfile, TaskParams, TaskSim};

/// The simulated trainee and task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub profile: SubjectProfile,
    pub couplings: BandMixModel,
    pub offsets: LatentParams,
    pub task: TaskParams,
    /// Fixed task difficulty, 1..=5.
    pub difficulty: u8,
    /// How long a delivered intervention keeps acting on the latent load.
    pub intervention_secs: f64,
    /// Latent load at session start.
    pub initial_load: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            profile: SubjectProfile::default(),
            couplings: BandMixModel::default(),
            offsets: LatentParams::default(),
            task: TaskParams::default(),
            difficulty: 5,
            intervention_secs: 30.0,
            initial_load: 0.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.profile.validate()?;
        if !(1..=5).contains(&self.difficulty) {
            return Err("sim.difficulty must be in 1..=5".into());
        }
        if !(self.intervention_secs >= 0.0) {
            return Err("sim.intervention_secs must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.initial_load) {
            return Err("sim.initial_load must be in [0, 1]".into());
        }
        if !(self.task.action_secs > 0.0) {
            return Err("sim.task.action_secs must be > 0".into());
        }
        Ok(())
    }

    /// Difficulty mapped onto [0, 1].
    pub fn difficulty_norm(&self) -> f64 {
        f64::from(self.difficulty - 1) / 4.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub policy: Policy,
    pub secs: f64,
    pub seed: u64,
    pub stream: StreamConfig,
    pub features: FeatureConfig,
    pub engine: EngineConfig,
    pub sim: SimConfig,
    /// Label and sha256 of the model file, recorded in the meta record.
    pub model_label: Option<String>,
    pub model_sha256: Option<String>,
}

impl ScenarioSpec {
    pub fn new(policy: Policy, secs: f64, seed: u64) -> Self {
        Self {
            policy,
            secs,
            seed,
            stream: StreamConfig::default(),
            features: FeatureConfig::default(),
            engine: EngineConfig::default(),
            sim: SimConfig::default(),
            model_label: None,
            model_sha256: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub records: Vec<Record>,
    pub decisions: usize,
    pub interventions: usize,
    /// Fraction of simulated samples with latent load in the optimal band.
    pub in_band_fraction: f64,
    pub mean_load: f64,
    /// Window shapes seen by the engine, `(rows, channels)` per decision.
    pub window_shapes: Vec<(usize, usize)>,
}

/// Latent band counted as "optimal" for the closed-loop benefit measure.
pub const OPTIMAL_BAND: (f64, f64) = (0.33, 0.66);

struct Active {
    kind: InterventionKind,
    until: f64,
}

/// Runs one session on a virtual clock. The result is a pure function of
/// `(spec, model)`.
pub fn run_scenario(spec: &ScenarioSpec, model: &ModelFile) -> Result<ScenarioResult, EngineError> {
    spec.sim.validate().map_err(EngineError::Config)?;
    if !(spec.secs >= 0.0 && spec.secs.is_finite()) {
        return Err(EngineError::Config("secs must be >= 0".into()));
    }
    let sim = &spec.sim;
    let sr = spec.stream.sample_rate;
    let dt = 1.0 / sr;
    let adapt = spec.policy.adapts();
    let sid = session_log::session_id(&[
        "run",
        spec.policy.as_str(),
        &spec.seed.to_string(),
        &spec.secs.to_string(),
        spec.model_sha256.as_deref().unwrap_or("-"),
    ]);

    let mut engine = Engine::new(model.clone(), spec.stream, spec.features, spec.engine, adapt, Clock::Virtual)?;
    engine.stream_mut().set_initial_difficulty(sim.difficulty);
    let mut gen = EegGenerator::new(sim.profile, sim.couplings, sr, spec.seed.wrapping_mul(4).wrapping_add(1));
    let mut task = TaskSim::new(sim.task, sim.profile.skill, sim.difficulty, 1.0, spec.seed.wrapping_mul(4).wrapping_add(2));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(4).wrapping_add(3));

    let mut records = vec![Record::Meta(MetaRecord {
        t: 0.0,
        session_id: sid.clone(),
        clock: ClockKind::Virtual,
        kind: "run".into(),
        policy: Some(spec.policy),
        seed: spec.seed,
        secs: Some(spec.secs),
        model: spec.model_label.clone(),
        model_sha256: spec.model_sha256.clone(),
        stream: spec.stream,
        features: spec.features,
        engine: spec.engine,
        params: serde_json::to_value(sim).expect("sim config serializes"),
    })];

    let mut l = sim.initial_load;
    let mut active: Vec<Active> = Vec::new();
    let mut in_band = 0usize;
    let mut load_sum = 0.0;
    let mut steps = 0usize;
    let mut decisions = 0usize;
    let mut interventions = 0usize;
    let mut window_shapes = Vec::new();
    let n_total = (spec.secs * sr).round() as usize;

    for n in 0..=n_total {
        let t = n as f64 / sr;

        // Behavior up to and including `t`.
        for ev in task.advance_to(t, l) {
            if engine.push_event(ev.clone()) != PushOutcome::Accepted {
                continue;
            }
            let issued = engine.on_event(&ev);
            for iv in &issued {
                interventions += 1;
                active.push(Active { kind: iv.kind, until: ev.t + sim.intervention_secs });
            }
            records.push(Record::Event(EventRecord { t: ev.t, session_id: sid.clone(), event: ev, issued }));
        }

        if t >= engine.next_tick() - 1e-9 {
            let out = engine.tick()?;
            let w = &out.window;
            decisions += 1;
            window_shapes.push((w.rows(), w.eeg.first().map_or(0, |r| r.len())));
            records.push(Record::EegSummary(EegSummaryRecord {
                t: w.t_close,
                session_id: sid.clone(),
                rows: w.rows(),
                dropped_samples: w.dropped_samples,
                lossy: w.lossy,
                rms: (0..CHANNELS).map(|c| (w.eeg.iter().map(|r| r[c] * r[c]).sum::<f64>() / w.rows().max(1) as f64).sqrt()).collect(),
            }));
            records.push(Record::Features(FeaturesRecord {
                t: w.t_close,
                session_id: sid.clone(),
                frames: out.features.frames,
                raw: out.raw.frames,
                events: w.events_in_window.clone(),
                data_gap: w.lossy,
            }));
            let marker_t = w.t_close + dt;
            let mut markers = Vec::new();
            for iv in &out.decision.interventions {
                interventions += 1;
                active.push(Active { kind: iv.kind, until: w.t_close + sim.intervention_secs });
                if iv.kind.is_hint() && !markers.contains(&EventKind::HintShown) {
                    markers.push(EventKind::HintShown);
                }
                if iv.kind.is_challenge() && !markers.contains(&EventKind::ChallengeIssued) {
                    markers.push(EventKind::ChallengeIssued);
                }
            }
            records.push(Record::Decision(DecisionRecord { session_id: sid.clone(), decision: out.decision, l: Some(l) }));
            for kind in markers {
                let ev = task.marker(marker_t, kind);
                if engine.push_event(ev.clone()) == PushOutcome::Accepted {
                    let issued = engine.on_event(&ev);
                    records.push(Record::Event(EventRecord { t: ev.t, session_id: sid.clone(), event: ev, issued }));
                }
            }
        }

        if n == n_total {
            break;
        }
        engine.push_eeg(gen.next_sample(l));

        active.retain(|a| a.until > t);
        let kinds: Vec<InterventionKind> = active.iter().map(|a| a.kind).collect();
        let target = synthgen::latent_target(sim.difficulty_norm(), sim.profile.skill, &kinds, &sim.offsets);
        l = synthgen::latent_step(l, dt, target, sim.profile.tau, sim.offsets.noise, &mut rng);
        steps += 1;
        load_sum += l;
        if l > OPTIMAL_BAND.0 && l < OPTIMAL_BAND.1 {
            in_band += 1;
        }
    }

    Ok(ScenarioResult {
        records,
        decisions,
        interventions,
        in_band_fraction: if steps == 0 { 0.0 } else { in_band as f64 / steps as f64 },
        mean_load: if steps == 0 { sim.initial_load } else { load_sum / steps as f64 },
        window_shapes,
    })
}
