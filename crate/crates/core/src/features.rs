//! Spectral and behavioral features.
//!
//! A 2 s aligned window is cut into overlapping 1 s sub-frames. Each
//! sub-frame yields channel-averaged theta/alpha/beta power, the
//! theta/alpha ratio and normalized spectral entropy; the window's
//! behavioral triplet (errors, step time, difficulty) is appended to every
//! frame, and all eight columns are z-scored against per-subject stats.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::streams::{AlignedWindow, CHANNELS};

/// Sub-frames per window fed to the sequence model.
pub const SEQ_LEN: usize = 5;
/// Columns per frame.
pub const N_FEATURES: usize = 8;
/// Division guard for the theta/alpha ratio, in µV².
pub const RATIO_EPS: f64 = 1e-9;
/// Floor applied to per-feature standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "theta_p",
    "alpha_p",
    "beta_p",
    "ta_ratio",
    "spec_entropy",
    "error_count",
    "step_time_norm",
    "difficulty_norm",
];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("signal too short: {0} samples (need >= 32)")]
    TooShort(usize),
    #[error("non-finite sample")]
    NonFinite,
    #[error("band [{lo}, {hi}] outside [0, {nyquist}] Hz")]
    BadBand { lo: f64, hi: f64, nyquist: f64 },
    #[error("fewer than two spectral bins in entropy range")]
    TooFewBins,
    #[error("invalid feature config: {0}")]
    BadConfig(String),
}

/// A frequency band with explicit edge inclusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    pub lo_closed: bool,
    pub hi_closed: bool,
}

impl Band {
    pub const fn half_open(lo: f64, hi: f64) -> Self {
        Self { lo, hi, lo_closed: true, hi_closed: false }
    }

    pub fn contains(&self, f: f64) -> bool {
        let above = if self.lo_closed { f >= self.lo } else { f > self.lo };
        let below = if self.hi_closed { f <= self.hi } else { f < self.hi };
        above && below
    }
}

/// Theta [4,7), alpha [8,13), beta [14,30], gamma (30,50]. The shared 30 Hz
/// bin belongs to beta.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandDefs {
    pub theta: Band,
    pub alpha: Band,
    pub beta: Band,
    pub gamma: Band,
}

impl Default for BandDefs {
    fn default() -> Self {
        Self {
            theta: Band::half_open(4.0, 7.0),
            alpha: Band::half_open(8.0, 13.0),
            beta: Band { lo: 14.0, hi: 30.0, lo_closed: true, hi_closed: true },
            gamma: Band { lo: 30.0, hi: 50.0, lo_closed: false, hi_closed: true },
        }
    }
}

impl BandDefs {
    pub fn all(&self) -> [Band; 4] {
        [self.theta, self.alpha, self.beta, self.gamma]
    }
}

/// One-sided power spectrum. `power[k]` is µV² at `freqs[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Psd {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
    pub resolution: f64,
}

impl Psd {
    pub fn total(&self) -> f64 {
        self.power.iter().sum()
    }

    pub fn nyquist(&self) -> f64 {
        *self.freqs.last().unwrap_or(&0.0)
    }
}

/// Hann-windowed periodogram for a fixed input length.
///
/// Scaled by `1 / (N * sum(w^2))` and folded one-sided, so the bins sum to
/// `sum(w^2 x^2) / sum(w^2)`: the window-compensated mean square.
#[derive(Clone)]
pub struct Periodogram {
    len: usize,
    window: Vec<f64>,
    norm: f64,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Periodogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Periodogram").field("len", &self.len).finish()
    }
}

impl Periodogram {
    pub fn new(len: usize) -> Result<Self, FeatureError> {
        if len < 32 {
            return Err(FeatureError::TooShort(len));
        }
        let window: Vec<f64> = (0..len).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()).collect();
        let wss: f64 = window.iter().map(|w| w * w).sum();
        let fft = FftPlanner::new().plan_fft_forward(len);
        Ok(Self { len, window, norm: 1.0 / (len as f64 * wss), fft })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Power per one-sided bin, written into `out` (length `len / 2 + 1`).
    pub fn power_into(&self, samples: &[f64], buf: &mut Vec<Complex<f64>>, out: &mut [f64]) -> Result<(), FeatureError> {
        if samples.len() != self.len {
            return Err(FeatureError::TooShort(samples.len()));
        }
        buf.clear();
        for (x, w) in samples.iter().zip(&self.window) {
            if !x.is_finite() {
                return Err(FeatureError::NonFinite);
            }
            buf.push(Complex::new(x * w, 0.0));
        }
        self.fft.process(buf);
        let n = self.len;
        for (k, slot) in out.iter_mut().enumerate().take(n / 2 + 1) {
            let p = buf[k].norm_sqr() * self.norm;
            let fold = k != 0 && !(n % 2 == 0 && k == n / 2);
            *slot = if fold { 2.0 * p } else { p };
        }
        Ok(())
    }

    pub fn psd(&self, samples: &[f64], sample_rate: f64) -> Result<Psd, FeatureError> {
        let mut buf = Vec::with_capacity(self.len);
        let mut power = vec![0.0; self.len / 2 + 1];
        self.power_into(samples, &mut buf, &mut power)?;
        let resolution = sample_rate / self.len as f64;
        let freqs = (0..power.len()).map(|k| k as f64 * resolution).collect();
        Ok(Psd { freqs, power, resolution })
    }
}

/// Hann periodogram of `samples`; see [`Periodogram`].
pub fn psd(samples: &[f64], sample_rate: f64) -> Result<Psd, FeatureError> {
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(FeatureError::NonFinite);
    }
    Periodogram::new(samples.len())?.psd(samples, sample_rate)
}

pub fn band_power(psd: &Psd, band: Band) -> Result<f64, FeatureError> {
    let nyquist = psd.nyquist();
    if !(band.lo >= 0.0 && band.hi <= nyquist + 1e-9 && band.lo < band.hi) {
        return Err(FeatureError::BadBand { lo: band.lo, hi: band.hi, nyquist });
    }
    Ok(psd.freqs.iter().zip(&psd.power).filter(|(f, _)| band.contains(**f)).map(|(_, p)| p).sum())
}

pub fn theta_alpha_ratio(theta_p: f64, alpha_p: f64) -> f64 {
    theta_p / alpha_p.max(RATIO_EPS)
}

/// Normalized Shannon entropy of the power distribution over bins with
/// `lo <= f <= hi`. A spectrum without power in range yields 1.0.
pub fn spectral_entropy(psd: &Psd, f_range: [f64; 2]) -> Result<f64, FeatureError> {
    entropy_of(psd.freqs.iter().zip(&psd.power).filter(|(f, _)| **f >= f_range[0] && **f <= f_range[1]).map(|(_, p)| *p))
}

fn entropy_of(bins: impl Iterator<Item = f64> + Clone) -> Result<f64, FeatureError> {
    let n = bins.clone().count();
    if n < 2 {
        return Err(FeatureError::TooFewBins);
    }
    let total: f64 = bins.clone().sum();
    if !(total > 0.0) {
        log::debug!("spectral entropy over zero power; returning 1.0");
        return Ok(1.0);
    }
    let h: f64 = bins
        .filter(|p| *p > 0.0)
        .map(|p| {
            let q = p / total;
            -q * q.ln()
        })
        .sum();
    Ok((h / (n as f64).ln()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub bands: BandDefs,
    pub entropy_range: [f64; 2],
    pub subframe_len: f64,
    pub hop: f64,
    pub expected_step_secs: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { bands: BandDefs::default(), entropy_range: [4.0, 50.0], subframe_len: 1.0, hop: 0.25, expected_step_secs: 30.0 }
    }
}

/// Behavioral triplet of a window: (error_count, step_time_norm, difficulty_norm).
pub fn behavioral_features(w: &AlignedWindow, expected_step_secs: f64) -> (f64, f64, f64) {
    let step = if expected_step_secs > 0.0 { (w.step_elapsed / expected_step_secs).clamp(0.0, 4.0) } else { 0.0 };
    let diff = (f64::from(w.difficulty.clamp(1, 5)) - 1.0) / 4.0;
    (f64::from(w.error_count), step, diff)
}

pub type Frame = [f64; N_FEATURES];

/// Model input: `SEQ_LEN` frames of `N_FEATURES` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    pub frames: [Frame; SEQ_LEN],
    pub t_close: f64,
}

impl FeatureSequence {
    pub fn steps(&self) -> &[Frame] {
        &self.frames
    }
}

/// Un-normalized features of one window plus the per-channel detail logged
/// for replay and inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub frames: [Frame; SEQ_LEN],
    pub t_close: f64,
    /// Channel-averaged gamma power per frame; logged, not a model input.
    pub gamma: [f64; SEQ_LEN],
    /// Per-channel theta/alpha/beta/gamma power, averaged over sub-frames.
    pub per_channel: Vec<[f64; 4]>,
}

/// Per-feature z-scoring statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Frame,
    pub std: Frame,
}

impl Default for NormStats {
    fn default() -> Self {
        Self { mean: [0.0; N_FEATURES], std: [1.0; N_FEATURES] }
    }
}

impl NormStats {
    /// Population mean/std over `frames`, std floored at [`STD_FLOOR`].
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; N_FEATURES];
        let mut sq = [0.0; N_FEATURES];
        let frames: Vec<&Frame> = frames.into_iter().collect();
        for f in &frames {
            n += 1;
            for j in 0..N_FEATURES {
                sum[j] += f[j];
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum.map(|s| s / n as f64);
        for f in &frames {
            for j in 0..N_FEATURES {
                sq[j] += (f[j] - mean[j]).powi(2);
            }
        }
        let std = sq.map(|s| (s / n as f64).sqrt().max(STD_FLOOR));
        Self { mean, std }
    }

    /// Replaces floored (constant-at-baseline) columns with `pooled` spread,
    /// so features that never vary at rest stay on a usable scale.
    pub fn widen_floored(&self, pooled: &NormStats) -> Self {
        let std = std::array::from_fn(|j| if self.std[j] <= STD_FLOOR { pooled.std[j].max(STD_FLOOR) } else { self.std[j] });
        Self { mean: self.mean, std }
    }

    pub fn apply(&self, frame: &Frame) -> Frame {
        std::array::from_fn(|j| (frame[j] - self.mean[j]) / self.std[j].max(STD_FLOOR))
    }

    pub fn normalize(&self, raw: &RawFeatures) -> FeatureSequence {
        FeatureSequence { frames: raw.frames.map(|f| self.apply(&f)), t_close: raw.t_close }
    }
}

/// Reusable feature extractor for a fixed sample rate and config.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    sample_rate: f64,
    sub_len: usize,
    hop: usize,
    periodogram: Periodogram,
    freqs: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(cfg: FeatureConfig, sample_rate: f64, window_len: f64) -> Result<Self, FeatureError> {
        let sub_len = (cfg.subframe_len * sample_rate).round() as usize;
        let hop = (cfg.hop * sample_rate).round() as usize;
        let rows = (window_len * sample_rate - 1e-9).ceil() as usize;
        if hop == 0 || sub_len > rows {
            return Err(FeatureError::BadConfig(format!("sub-frame {sub_len} / hop {hop} do not fit {rows} rows")));
        }
        let frames = (rows - sub_len) / hop + 1;
        if frames != SEQ_LEN {
            return Err(FeatureError::BadConfig(format!("window yields {frames} sub-frames, model expects {SEQ_LEN}")));
        }
        let periodogram = Periodogram::new(sub_len)?;
        let res = sample_rate / sub_len as f64;
        let freqs = (0..sub_len / 2 + 1).map(|k| k as f64 * res).collect();
        Ok(Self { cfg, sample_rate, sub_len, hop, periodogram, freqs })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    /// Features of a window before z-scoring.
    pub fn raw(&self, w: &AlignedWindow) -> Result<RawFeatures, FeatureError> {
        let bins = self.sub_len / 2 + 1;
        let bands = self.cfg.bands.all();
        let behavioral = behavioral_features(w, self.cfg.expected_step_secs);
        let mut frames = [[0.0; N_FEATURES]; SEQ_LEN];
        let mut gamma = [0.0; SEQ_LEN];
        let mut per_channel = vec![[0.0; 4]; CHANNELS];
        let mut column = vec![0.0; self.sub_len];
        let mut buf = Vec::with_capacity(self.sub_len);
        let mut power = vec![0.0; bins];
        for (fi, frame) in frames.iter_mut().enumerate() {
            let start = fi * self.hop;
            let mut avg = vec![0.0; bins];
            for ch in 0..CHANNELS {
                for (i, v) in column.iter_mut().enumerate() {
                    *v = w.eeg[start + i][ch];
                }
                self.periodogram.power_into(&column, &mut buf, &mut power)?;
                for (k, p) in power.iter().enumerate() {
                    avg[k] += p / CHANNELS as f64;
                }
                for (b, band) in bands.iter().enumerate() {
                    per_channel[ch][b] += self.sum_band(&power, *band) / SEQ_LEN as f64;
                }
            }
            let theta = self.sum_band(&avg, self.cfg.bands.theta);
            let alpha = self.sum_band(&avg, self.cfg.bands.alpha);
            let beta = self.sum_band(&avg, self.cfg.bands.beta);
            gamma[fi] = self.sum_band(&avg, self.cfg.bands.gamma);
            let [lo, hi] = self.cfg.entropy_range;
            let ent = entropy_of(self.freqs.iter().zip(&avg).filter(|(f, _)| **f >= lo && **f <= hi).map(|(_, p)| *p))?;
            *frame = [theta, alpha, beta, theta_alpha_ratio(theta, alpha), ent, behavioral.0, behavioral.1, behavioral.2];
        }
        Ok(RawFeatures { frames, t_close: w.t_close, gamma, per_channel })
    }

    pub fn sequence(&self, w: &AlignedWindow, norms: &NormStats) -> Result<FeatureSequence, FeatureError> {
        Ok(norms.normalize(&self.raw(w)?))
    }

    fn sum_band(&self, power: &[f64], band: Band) -> f64 {
        self.freqs.iter().zip(power).filter(|(f, _)| band.contains(**f)).map(|(_, p)| p).sum()
    }
}

/// Convenience wrapper using default stream geometry (128 Hz, 2 s windows).
pub fn feature_sequence(w: &AlignedWindow, norms: &NormStats) -> Result<FeatureSequence, FeatureError> {
    let rows = w.rows() as f64;
    FeatureExtractor::new(FeatureConfig::default(), 128.0, rows / 128.0)?.sequence(w, norms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, n: usize, fs: f64) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn zero_signal_has_zero_power() {
        let p = psd(&[0.0; 128], 128.0).unwrap();
        assert!(p.power.iter().all(|&x| x == 0.0));
        for band in BandDefs::default().all() {
            assert_eq!(band_power(&p, band).unwrap(), 0.0);
        }
    }

    #[test]
    fn short_and_nonfinite_rejected() {
        assert_eq!(psd(&[1.0; 31], 128.0), Err(FeatureError::TooShort(31)));
        let mut x = vec![0.0; 64];
        x[5] = f64::INFINITY;
        assert_eq!(psd(&x, 128.0), Err(FeatureError::NonFinite));
    }

    #[test]
    fn band_edges_follow_convention() {
        let b = BandDefs::default();
        assert!(b.theta.contains(4.0) && !b.theta.contains(7.0));
        assert!(b.beta.contains(30.0) && !b.gamma.contains(30.0));
        assert!(b.gamma.contains(50.0));
        let p = psd(&sine(10.0, 1.0, 128, 128.0), 128.0).unwrap();
        assert!(matches!(band_power(&p, Band::half_open(10.0, 80.0)), Err(FeatureError::BadBand { .. })));
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(theta_alpha_ratio(25.0, 25.0), 1.0);
        assert_eq!(theta_alpha_ratio(50.0, 25.0), 2.0);
        let r = theta_alpha_ratio(1.0, 0.0);
        assert!(r.is_finite());
        assert!((r - 1e9).abs() < 1e-3);
    }

    fn flat_psd(power: Vec<f64>) -> Psd {
        let freqs = (0..power.len()).map(|k| k as f64).collect();
        Psd { freqs, power, resolution: 1.0 }
    }

    #[test]
    fn entropy_examples() {
        let mut one = vec![0.0; 65];
        one[10] = 3.0;
        assert_eq!(spectral_entropy(&flat_psd(one), [4.0, 50.0]).unwrap(), 0.0);

        let uniform = vec![2.0; 65];
        assert!((spectral_entropy(&flat_psd(uniform), [4.0, 50.0]).unwrap() - 1.0).abs() < 1e-12);

        let mut two = vec![0.0; 65];
        two[10] = 1.0;
        two[20] = 1.0;
        let n = 47.0_f64; // bins 4..=50
        let want = 2.0_f64.ln() / n.ln();
        assert!((spectral_entropy(&flat_psd(two), [4.0, 50.0]).unwrap() - want).abs() < 1e-12);

        assert_eq!(spectral_entropy(&flat_psd(vec![0.0; 65]), [4.0, 50.0]).unwrap(), 1.0);
        assert_eq!(spectral_entropy(&flat_psd(vec![1.0; 65]), [4.0, 4.5]), Err(FeatureError::TooFewBins));
    }

    fn window_with(step_elapsed: f64, difficulty: u8, errors: u32) -> AlignedWindow {
        AlignedWindow {
            t_close: 10.0,
            eeg: vec![[0.0; CHANNELS]; 256],
            events_in_window: vec![],
            error_count: errors,
            step_elapsed,
            difficulty,
            dropped_samples: 0,
            lossy: false,
        }
    }

    #[test]
    fn behavioral_examples() {
        assert_eq!(behavioral_features(&window_with(30.0, 1, 3), 60.0), (3.0, 0.5, 0.0));
        assert_eq!(behavioral_features(&window_with(500.0, 5, 0), 60.0), (0.0, 4.0, 1.0));
    }

    #[test]
    fn norm_stats_population_convention() {
        let a = [1.0; N_FEATURES];
        let b = [3.0; N_FEATURES];
        let s = NormStats::fit([&a, &b]);
        assert_eq!(s.mean, [2.0; N_FEATURES]);
        assert_eq!(s.std, [1.0; N_FEATURES]);
        let c = NormStats::fit([&a, &a]);
        assert_eq!(c.std, [STD_FLOOR; N_FEATURES]);
        assert_eq!(c.apply(&a), [0.0; N_FEATURES]);
    }

    #[test]
    fn sequence_has_shared_behavioral_columns() {
        let mut w = window_with(12.0, 3, 2);
        for (i, row) in w.eeg.iter_mut().enumerate() {
            for (ch, v) in row.iter_mut().enumerate() {
                *v = 5.0 * (2.0 * PI * (6.0 + ch as f64 * 0.1) * i as f64 / 128.0).sin();
            }
        }
        let ex = FeatureExtractor::new(FeatureConfig::default(), 128.0, 2.0).unwrap();
        let raw = ex.raw(&w).unwrap();
        let stats = NormStats::fit(raw.frames.iter());
        let seq = stats.normalize(&raw);
        for f in &seq.frames {
            assert_eq!(f[5..], seq.frames[0][5..]);
            for v in &f[..5] {
                assert!(v.abs() < 5.0, "z-score {v}");
            }
        }
    }

    #[test]
    fn subframe_geometry_checked() {
        let cfg = FeatureConfig { hop: 0.5, ..FeatureConfig::default() };
        assert!(matches!(FeatureExtractor::new(cfg, 128.0, 2.0), Err(FeatureError::BadConfig(_))));
    }
}
