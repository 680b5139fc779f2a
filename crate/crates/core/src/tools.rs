//! Latency benchmark and EEG CSV export.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::calibration::percentile;
use crate::engine::{Clock, Engine, EngineConfig, EngineError};
use crate::features::FeatureConfig;
use crate::lstm::ModelFile;
use crate::streams::{EegSample, StreamConfig, CHANNELS};
use crate::synthgen::{BandMixModel, EegGenerator, SubjectProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub iters: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
    pub max_ms: f64,
}

impl BenchReport {
    pub fn from_samples(ms: &[f64]) -> Self {
        Self {
            iters: ms.len(),
            p50_ms: percentile(ms, 50.0),
            p95_ms: percentile(ms, 95.0),
            p99_ms: percentile(ms, 99.0),
            mean_ms: ms.iter().sum::<f64>() / ms.len().max(1) as f64,
            max_ms: ms.iter().copied().fold(0.0, f64::max),
        }
    }
}

/// Times `iters` full tick cycles (window close, alignment, features,
/// forward pass, rules) on synthetic EEG streamed at the configured rate.
pub fn bench(model: &ModelFile, stream: StreamConfig, features: FeatureConfig, engine: EngineConfig, iters: usize, seed: u64) -> Result<BenchReport, EngineError> {
    let mut eng = Engine::new(model.clone(), stream, features, engine, true, Clock::Wall)?;
    let mut gen = EegGenerator::new(SubjectProfile { seed, ..Default::default() }, BandMixModel::default(), stream.sample_rate, seed);
    let mut ms = Vec::with_capacity(iters);
    // Load drifts slowly so windows differ from tick to tick.
    let mut k = 0usize;
    while ms.len() < iters {
        let due = eng.next_tick();
        while gen.next_t() < due {
            let l = 0.5 + 0.4 * (k as f64 * 0.01).sin();
            k += 1;
            eng.push_eeg(gen.next_sample(l));
        }
        let out = eng.tick()?;
        ms.push(out.decision.latency_ms);
    }
    Ok(BenchReport::from_samples(&ms))
}

/// Formats with 9 significant digits.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    let decimals = 8 - exp;
    if (0..=12).contains(&decimals) {
        format!("{v:.prec$}", prec = decimals as usize)
    } else {
        format!("{v:.8e}")
    }
}

pub fn csv_header() -> String {
    let mut h = String::from("t");
    for c in 1..=CHANNELS {
        h.push_str(&format!(",ch{c:02}"));
    }
    h
}

pub fn write_eeg_csv<W: Write>(mut w: W, samples: &[EegSample]) -> std::io::Result<()> {
    writeln!(w, "{}", csv_header())?;
    for s in samples {
        let mut line = fmt_sig9(s.t);
        for v in &s.channels {
            line.push(',');
            line.push_str(&fmt_sig9(*v));
        }
        writeln!(w, "{line}")?;
    }
    w.flush()
}

pub fn read_eeg_csv<R: BufRead>(r: R) -> Result<Vec<EegSample>, String> {
    let mut lines = r.lines();
    let header = lines.next().ok_or("empty csv")?.map_err(|e| e.to_string())?;
    if header.trim() != csv_header() {
        return Err(format!("unexpected header {header:?}"));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        let vals: Result<Vec<f64>, _> = line.split(',').map(|x| x.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| format!("row {}: {e}", i + 2))?;
        if vals.len() != CHANNELS + 1 {
            return Err(format!("row {}: {} columns", i + 2, vals.len()));
        }
        out.push(EegSample { t: vals[0], channels: vals[1..].to_vec() });
    }
    Ok(out)
}
