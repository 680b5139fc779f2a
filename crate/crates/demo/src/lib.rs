//! Browser demo. Each exported function takes plain numbers/strings and
//! returns a JSON string, so the page needs no bindings beyond
//! `wasm-bindgen`'s generated loader.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use cladvr_core::calibration::Thresholds;
use cladvr_core::engine::{self, EngineConfig, InterventionKind, LoadState, RuleState};
use cladvr_core::features::{self, BandDefs, FeatureConfig};
use cladvr_core::streams::{ErrorType, EventKind, TaskEvent, CHANNELS};
use cladvr_core::synthgen::{self, BandMixModel, EegGenerator, LatentParams, SubjectProfile};

#[derive(Serialize)]
struct Spectrum {
    freqs: Vec<f64>,
    power: Vec<f64>,
    bands: [f64; 4],
    ta_ratio: f64,
    entropy: f64,
    trace: Vec<f64>,
}

/// Channel-averaged spectrum of a 2 s synthetic window at load `load`.
pub fn spectrum_json(load: f64, reactivity: f64, seed: u64) -> Result<String, String> {
    let profile = SubjectProfile { reactivity: reactivity.clamp(0.0, 1.0), seed, ..Default::default() };
    let mut gen = EegGenerator::new(profile, BandMixModel::default(), 128.0, seed);
    let samples: Vec<_> = (0..256).map(|_| gen.next_sample(load.clamp(0.0, 1.0))).collect();
    let mut power = Vec::new();
    let mut freqs = Vec::new();
    for c in 0..CHANNELS {
        let x: Vec<f64> = samples.iter().map(|s| s.channels[c]).collect();
        let p = features::psd(&x, 128.0).map_err(|e| e.to_string())?;
        if power.is_empty() {
            power = vec![0.0; p.power.len()];
            freqs = p.freqs.clone();
        }
        for (acc, v) in power.iter_mut().zip(&p.power) {
            *acc += v / CHANNELS as f64;
        }
    }
    let psd = features::Psd { resolution: freqs.get(1).copied().unwrap_or(0.5), freqs, power };
    let b = BandDefs::default();
    let bp = |band| features::band_power(&psd, band).map_err(|e| e.to_string());
    let bands = [bp(b.theta)?, bp(b.alpha)?, bp(b.beta)?, bp(b.gamma)?];
    let entropy = features::spectral_entropy(&psd, FeatureConfig::default().entropy_range).map_err(|e| e.to_string())?;
    let trace = samples.iter().map(|s| s.channels[0]).collect();
    let out = Spectrum { ta_ratio: features::theta_alpha_ratio(bands[0], bands[1]), bands, entropy, freqs: psd.freqs, power: psd.power, trace };
    Ok(serde_json::to_string(&out).expect("spectrum serializes"))
}

#[derive(Serialize)]
struct RuleResult {
    interventions: Vec<engine::Intervention>,
    suppressed: Vec<engine::Suppressed>,
}

fn parse_state(s: &str) -> Result<LoadState, String> {
    match s {
        "low" => Ok(LoadState::Low),
        "optimal" => Ok(LoadState::Optimal),
        "high" => Ok(LoadState::High),
        other => Err(format!("unknown state {other:?}")),
    }
}

fn parse_confusion(s: &str) -> Result<Option<ErrorType>, String> {
    match s {
        "none" | "" => Ok(None),
        "where" => Ok(Some(ErrorType::Where)),
        "how" => Ok(Some(ErrorType::How)),
        "why" => Ok(Some(ErrorType::Why)),
        other => Err(format!("unknown confusion {other:?}")),
    }
}

/// Rule table for one decision from a fresh rule state.
pub fn rules_json(state: &str, confusion: &str, wrong_object: bool, repeats_after_hint: u32) -> Result<String, String> {
    let stable = parse_state(state)?;
    let conf = parse_confusion(confusion)?;
    let mut events = vec![TaskEvent::new(1.0, EventKind::StepStart, 3, 1, 3)];
    if wrong_object {
        events.push(TaskEvent::grab(2.0, 3, 1, false, 3));
    }
    if repeats_after_hint > 0 {
        events.push(TaskEvent::new(3.0, EventKind::HintShown, 3, 1, 3));
        for i in 0..repeats_after_hint {
            events.push(TaskEvent::error(4.0 + f64::from(i) * 0.1, 3, 1, conf.unwrap_or(ErrorType::How), 3));
        }
    }
    let mut rs = RuleState::default();
    let out = engine::decide(10.0, stable, conf, &events, &mut rs, &EngineConfig::default());
    Ok(serde_json::to_string(&RuleResult { interventions: out.interventions, suppressed: out.suppressed }).expect("rules serialize"))
}

#[derive(Serialize)]
struct Trajectory {
    t: Vec<f64>,
    adaptive: Vec<f64>,
    fixed: Vec<f64>,
    fired: Vec<(f64, InterventionKind)>,
    in_band: [f64; 2],
}

/// Latent-load trajectories with and without adaptation. The adaptive run
/// uses the true load as the state estimate (classifier replaced by the
/// default thresholds), isolating the rule table's effect.
pub fn trajectory_json(difficulty: u8, skill: f64, secs: f64, seed: u64) -> Result<String, String> {
    let difficulty = difficulty.clamp(1, 5);
    let dn = f64::from(difficulty - 1) / 4.0;
    let skill = skill.clamp(0.0, 1.0);
    let secs = secs.clamp(10.0, 1800.0);
    let lp = LatentParams::default();
    let cfg = EngineConfig::default();
    let thr = Thresholds { t_low: 0.33, t_high: 0.66 };
    let dt = 0.1;
    let n = (secs / dt) as usize;
    let mut ra = ChaCha8Rng::seed_from_u64(seed);
    let mut rf = ChaCha8Rng::seed_from_u64(seed);
    let (mut la, mut lf) = (0.5, 0.5);
    let mut rs = RuleState::default();
    let mut deb = engine::Debouncer::default();
    let mut active: Vec<(InterventionKind, f64)> = Vec::new();
    let mut out = Trajectory { t: vec![], adaptive: vec![], fixed: vec![], fired: vec![], in_band: [0.0; 2] };
    let mut step = 1u8;
    for i in 0..n {
        let t = i as f64 * dt;
        if i > 0 && i % 100 == 0 {
            let stable = deb.update(LoadState::from_score(la, &thr), cfg.debounce_n);
            step = step % 8 + 1;
            let ev = [TaskEvent::new(t - 5.0, EventKind::StepStart, step, synthgen::module_of(step), difficulty)];
            for iv in engine::decide(t, stable, None, &ev, &mut rs, &cfg).interventions {
                out.fired.push((t, iv.kind));
                active.push((iv.kind, t + 30.0));
            }
        }
        active.retain(|(_, until)| *until > t);
        let kinds: Vec<_> = active.iter().map(|(k, _)| *k).collect();
        la = synthgen::latent_step(la, dt, synthgen::latent_target(dn, skill, &kinds, &lp), 8.0, lp.noise, &mut ra);
        lf = synthgen::latent_step(lf, dt, synthgen::latent_target(dn, skill, &[], &lp), 8.0, lp.noise, &mut rf);
        for (j, l) in [la, lf].into_iter().enumerate() {
            if l > 0.33 && l < 0.66 {
                out.in_band[j] += 1.0 / n as f64;
            }
        }
        if i % 10 == 0 {
            out.t.push(t);
            out.adaptive.push(la);
            out.fixed.push(lf);
        }
    }
    Ok(serde_json::to_string(&out).expect("trajectory serializes"))
}

#[wasm_bindgen]
pub fn spectrum(load: f64, reactivity: f64, seed: u32) -> Result<String, JsValue> {
    spectrum_json(load, reactivity, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn rules(state: &str, confusion: &str, wrong_object: bool, repeats_after_hint: u32) -> Result<String, JsValue> {
    rules_json(state, confusion, wrong_object, repeats_after_hint).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn trajectory(difficulty: u8, skill: f64, secs: f64, seed: u32) -> Result<String, JsValue> {
    trajectory_json(difficulty, skill, secs, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}
