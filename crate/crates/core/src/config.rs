//! Strict JSON run configuration. Every section is optional and defaults to
//! the module defaults; unknown keys anywhere are rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{CalibrationPlan, SimSetup};
use crate::engine::EngineConfig;
use crate::features::FeatureConfig;
use crate::lstm::TrainConfig;
use crate::scenario::SimConfig;
use crate::streams::StreamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub stream: StreamConfig,
    pub features: FeatureConfig,
    pub model: TrainConfig,
    pub engine: EngineConfig,
    pub sim: SimConfig,
    pub calibration: CalibrationPlan,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("config read error: {0}")]
    Io(#[from] std::io::Error),
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let c: Config = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |e: String| ConfigError::Invalid(e);
        self.stream.validate().map_err(|e| bad(e.to_string()))?;
        self.engine.validate().map_err(bad)?;
        self.sim.validate().map_err(bad)?;
        crate::features::FeatureExtractor::new(self.features, self.stream.sample_rate, self.stream.window_len).map_err(|e| bad(e.to_string()))?;
        let m = &self.model;
        if m.layers != 2 {
            return Err(bad("model.layers must be 2".into()));
        }
        if m.hidden == 0 || m.batch == 0 {
            return Err(bad("model.hidden and model.batch must be > 0".into()));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(bad("model.dropout must be in [0, 1)".into()));
        }
        if !(m.lr > 0.0) || !m.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(bad("model.lr must be > 0 and betas in [0, 1)".into()));
        }
        if !(m.val_fraction > 0.0 && m.val_fraction < 1.0) {
            return Err(bad("model.val_fraction must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Simulator setup used for calibration recordings.
    pub fn sim_setup(&self) -> SimSetup {
        SimSetup { stream: self.stream, features: self.features, mix: self.sim.couplings, latent: self.sim.offsets, task: self.sim.task }
    }
}
