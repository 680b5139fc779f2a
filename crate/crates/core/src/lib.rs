//! Cognitive-load-adaptive training pipeline.
//!
//! EEG and task events are synchronized into windows ([`streams`]), turned
//! into spectral/behavioral feature sequences ([`features`]), classified by a
//! two-layer LSTM ([`lstm`]) whose thresholds come from a per-subject
//! protocol ([`calibration`]), and mapped to interventions ([`engine`]).
//! [`synthgen`] and [`scenario`] provide a simulated trainee for closed-loop
//! runs; [`session_log`], [`server`] and [`tools`] are the I/O surface.

pub mod calibration;
pub mod config;
pub mod engine;
pub mod features;
pub mod lstm;
pub mod scenario;
pub mod server;
pub mod session_log;
pub mod streams;
pub mod synthgen;
pub mod tools;
