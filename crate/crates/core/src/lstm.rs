//! Two-layer LSTM sequence classifier with a 3-way softmax head.
//!
//! Gate order in every packed `[4H x ..]` block is input, forget, candidate,
//! output. Each layer's hidden output stream passes through ReLU and
//! inverted dropout before it feeds the next layer; the recurrence itself
//! carries the raw hidden state. Everything is `f64`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::Thresholds;
use crate::features::{FeatureSequence, NormStats, N_FEATURES};

pub const CLASSES: usize = 3;
pub const DEFAULT_HIDDEN: usize = 64;
/// Probability floor inside the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LstmError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("class {0} missing from training split")]
    ClassMissing(usize),
    #[error("class {class} has {count} samples, need at least {min}")]
    TooFewSamples { class: usize, count: usize, min: usize },
    #[error("invalid training config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("bad magic")]
    BadMagic,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("truncated model file")]
    TruncatedFile,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmLayerParams {
    pub input: usize,
    pub hidden: usize,
    /// `[4H x D]` row-major.
    pub w_x: Vec<f64>,
    /// `[4H x H]` row-major.
    pub w_h: Vec<f64>,
    pub b: Vec<f64>,
}

impl LstmLayerParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self { input, hidden, w_x: vec![0.0; 4 * hidden * input], w_h: vec![0.0; 4 * hidden * hidden], b: vec![0.0; 4 * hidden] }
    }

    fn xavier(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Self::zeros(input, hidden);
        let lx = (6.0 / (input + 4 * hidden) as f64).sqrt();
        let lh = (6.0 / (hidden + 4 * hidden) as f64).sqrt();
        p.w_x.iter_mut().for_each(|w| *w = rng.gen_range(-lx..lx));
        p.w_h.iter_mut().for_each(|w| *w = rng.gen_range(-lh..lh));
        p.b[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        p
    }

    fn check(&self) -> Result<(), LstmError> {
        let (d, h) = (self.input, self.hidden);
        if self.w_x.len() != 4 * h * d || self.w_h.len() != 4 * h * h || self.b.len() != 4 * h {
            return Err(LstmError::ShapeMismatch(format!("layer D={d} H={h}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub layer1: LstmLayerParams,
    pub layer2: LstmLayerParams,
    /// `[3 x H]` row-major.
    pub w_out: Vec<f64>,
    pub b_out: Vec<f64>,
    pub dropout_rate: f64,
}

impl ModelParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            layer1: LstmLayerParams::zeros(input, hidden),
            layer2: LstmLayerParams::zeros(hidden, hidden),
            w_out: vec![0.0; CLASSES * hidden],
            b_out: vec![0.0; CLASSES],
            dropout_rate: 0.2,
        }
    }

    /// Xavier-uniform weights, forget-gate bias +1, zero other biases.
    pub fn init(input: usize, hidden: usize, dropout_rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer1 = LstmLayerParams::xavier(input, hidden, &mut rng);
        let layer2 = LstmLayerParams::xavier(hidden, hidden, &mut rng);
        let lo = (6.0 / (hidden + CLASSES) as f64).sqrt();
        let w_out = (0..CLASSES * hidden).map(|_| rng.gen_range(-lo..lo)).collect();
        Self { layer1, layer2, w_out, b_out: vec![0.0; CLASSES], dropout_rate }
    }

    pub fn input_dim(&self) -> usize {
        self.layer1.input
    }

    pub fn hidden(&self) -> usize {
        self.layer1.hidden
    }

    pub fn check(&self) -> Result<(), LstmError> {
        self.layer1.check()?;
        self.layer2.check()?;
        let h = self.layer1.hidden;
        if self.layer2.input != h || self.layer2.hidden != h || self.w_out.len() != CLASSES * h || self.b_out.len() != CLASSES {
            return Err(LstmError::ShapeMismatch("layer2/head dims".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&Vec<f64>; 8] {
        [&self.layer1.w_x, &self.layer1.w_h, &self.layer1.b, &self.layer2.w_x, &self.layer2.w_h, &self.layer2.b, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.layer1.w_x,
            &mut self.layer1.w_h,
            &mut self.layer1.b,
            &mut self.layer2.w_x,
            &mut self.layer2.w_h,
            &mut self.layer2.b,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Zero-valued tensors with this model's shapes.
    pub fn zeros_like(&self) -> Self {
        Self { dropout_rate: self.dropout_rate, ..Self::zeros(self.input_dim(), self.hidden()) }
    }
}

/// Gradients share the parameter layout.
pub type Gradients = ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out += W x` for row-major `W` with `cols` columns.
#[inline]
fn gemv_acc(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (row, o) in w.chunks_exact(cols).zip(out.iter_mut()) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += W^T dz`.
#[inline]
fn gemv_t_acc(w: &[f64], cols: usize, dz: &[f64], out: &mut [f64]) {
    for (row, d) in w.chunks_exact(cols).zip(dz) {
        if *d == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * d;
        }
    }
}

/// `g += dz x^T`.
#[inline]
fn outer_acc(g: &mut [f64], cols: usize, dz: &[f64], x: &[f64]) {
    for (row, d) in g.chunks_exact_mut(cols).zip(dz) {
        if *d == 0.0 {
            continue;
        }
        for (o, a) in row.iter_mut().zip(x) {
            *o += a * d;
        }
    }
}

/// Cached activations of one cell step.
#[derive(Debug, Clone)]
struct CellTrace {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gates `[i | f | g | o]`.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    c: Vec<f64>,
}

fn cell_step(x: &[f64], h: &[f64], c: &[f64], p: &LstmLayerParams) -> CellTrace {
    let hd = p.hidden;
    let mut z = p.b.clone();
    gemv_acc(&p.w_x, p.input, x, &mut z);
    gemv_acc(&p.w_h, hd, h, &mut z);
    for (k, v) in z.iter_mut().enumerate() {
        *v = if (2 * hd..3 * hd).contains(&k) { v.tanh() } else { sigmoid(*v) };
    }
    let mut c_new = vec![0.0; hd];
    let mut tanh_c = vec![0.0; hd];
    let mut h_new = vec![0.0; hd];
    for j in 0..hd {
        let (i, f, g, o) = (z[j], z[hd + j], z[2 * hd + j], z[3 * hd + j]);
        c_new[j] = f * c[j] + i * g;
        tanh_c[j] = c_new[j].tanh();
        h_new[j] = o * tanh_c[j];
    }
    CellTrace { x: x.to_vec(), h_prev: h.to_vec(), c_prev: c.to_vec(), gates: z, tanh_c, h: h_new, c: c_new }
}

/// One LSTM cell update.
pub fn cell_forward(x: &[f64], h: &[f64], c: &[f64], p: &LstmLayerParams) -> Result<(Vec<f64>, Vec<f64>), LstmError> {
    p.check()?;
    if x.len() != p.input || h.len() != p.hidden || c.len() != p.hidden {
        return Err(LstmError::ShapeMismatch(format!("x={} h={} c={} for D={} H={}", x.len(), h.len(), c.len(), p.input, p.hidden)));
    }
    let tr = cell_step(x, h, c, p);
    if tr.h.iter().chain(&tr.c).any(|v| !v.is_finite()) {
        return Err(LstmError::NonFinite("cell state".into()));
    }
    Ok((tr.h, tr.c))
}

/// Per-timestep dropout masks for both layers, already scaled by `1/(1-p)`.
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub layer1: Vec<Vec<f64>>,
    pub layer2: Vec<Vec<f64>>,
}

impl DropoutMasks {
    pub fn ones(steps: usize, hidden: usize) -> Self {
        Self { layer1: vec![vec![1.0; hidden]; steps], layer2: vec![vec![1.0; hidden]; steps] }
    }

    pub fn sample(steps: usize, hidden: usize, rate: f64, seed: u64) -> Self {
        if rate <= 0.0 {
            return Self::ones(steps, hidden);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - rate);
        let mut draw = || (0..hidden).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect::<Vec<f64>>();
        let layer1 = (0..steps).map(|_| draw()).collect();
        let layer2 = (0..steps).map(|_| draw()).collect();
        Self { layer1, layer2 }
    }
}

/// Inverted dropout on a single vector.
pub fn apply_dropout(h: &[f64], mask: &[f64]) -> Vec<f64> {
    h.iter().zip(mask).map(|(a, m)| a * m).collect()
}

#[derive(Debug, Clone)]
struct ForwardTrace {
    l1: Vec<CellTrace>,
    l2: Vec<CellTrace>,
    /// Layer-1 output stream after ReLU and dropout (layer-2 inputs).
    y1: Vec<Vec<f64>>,
    /// Last layer-2 output after ReLU and dropout.
    y2: Vec<f64>,
    probs: [f64; CLASSES],
}

fn softmax(logits: &[f64]) -> [f64; CLASSES] {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    std::array::from_fn(|k| e[k] / s)
}

fn run_forward<S: AsRef<[f64]>>(seq: &[S], p: &ModelParams, masks: &DropoutMasks) -> Result<ForwardTrace, LstmError> {
    let hd = p.hidden();
    if seq.is_empty() {
        return Err(LstmError::ShapeMismatch("empty sequence".into()));
    }
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut l1 = Vec::with_capacity(seq.len());
    let mut y1: Vec<Vec<f64>> = Vec::with_capacity(seq.len());
    for (t, x) in seq.iter().enumerate() {
        let x = x.as_ref();
        if x.len() != p.input_dim() {
            return Err(LstmError::ShapeMismatch(format!("frame {t} has {} values, expected {}", x.len(), p.input_dim())));
        }
        let tr = cell_step(x, &h, &c, &p.layer1);
        h.clone_from(&tr.h);
        c.clone_from(&tr.c);
        y1.push(tr.h.iter().zip(&masks.layer1[t]).map(|(v, m)| v.max(0.0) * m).collect());
        l1.push(tr);
    }
    h.iter_mut().for_each(|v| *v = 0.0);
    c.iter_mut().for_each(|v| *v = 0.0);
    let mut l2 = Vec::with_capacity(seq.len());
    for x in &y1 {
        let tr = cell_step(x, &h, &c, &p.layer2);
        h.clone_from(&tr.h);
        c.clone_from(&tr.c);
        l2.push(tr);
    }
    let last = seq.len() - 1;
    let y2: Vec<f64> = h.iter().zip(&masks.layer2[last]).map(|(v, m)| v.max(0.0) * m).collect();
    let mut logits = p.b_out.clone();
    gemv_acc(&p.w_out, hd, &y2, &mut logits);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(LstmError::NonFinite(format!("logits {logits:?}")));
    }
    let probs = softmax(&logits);
    Ok(ForwardTrace { l1, l2, y1, y2, probs })
}

fn masks_for(steps: usize, p: &ModelParams, mode: Mode, seed: u64) -> DropoutMasks {
    match mode {
        Mode::Eval => DropoutMasks::ones(steps, p.hidden()),
        Mode::Train => DropoutMasks::sample(steps, p.hidden(), p.dropout_rate, seed),
    }
}

/// Class probabilities `[low, optimal, high]` for one sequence.
pub fn forward<S: AsRef<[f64]>>(seq: &[S], p: &ModelParams, mode: Mode, rng_seed: u64) -> Result<[f64; CLASSES], LstmError> {
    p.check()?;
    Ok(run_forward(seq, p, &masks_for(seq.len(), p, mode, rng_seed))?.probs)
}

pub fn forward_with_masks<S: AsRef<[f64]>>(seq: &[S], p: &ModelParams, masks: &DropoutMasks) -> Result<[f64; CLASSES], LstmError> {
    p.check()?;
    Ok(run_forward(seq, p, masks)?.probs)
}

/// Eval-mode probabilities for a feature sequence.
pub fn predict(seq: &FeatureSequence, p: &ModelParams) -> Result<[f64; CLASSES], LstmError> {
    forward(&seq.frames, p, Mode::Eval, 0)
}

/// Categorical cross-entropy with probabilities floored at [`PROB_FLOOR`].
pub fn loss(probs: &[f64; CLASSES], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Expected-severity score: `0 * p_low + 0.5 * p_optimal + 1 * p_high`.
pub fn load_score(probs: &[f64; CLASSES]) -> f64 {
    (0.5 * probs[1] + probs[2]).clamp(0.0, 1.0)
}

/// Mask seed for sample `index` of a batch drawn with `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64).rotate_left(17) ^ 0xD1B5_4A32_D192_ED03
}

fn backprop_layer(p: &LstmLayerParams, trace: &[CellTrace], dh_out: &[Vec<f64>], g: &mut LstmLayerParams, want_dx: bool) -> Vec<Vec<f64>> {
    let hd = p.hidden;
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut dz = vec![0.0; 4 * hd];
    let mut dx = vec![Vec::new(); trace.len()];
    for t in (0..trace.len()).rev() {
        let tr = &trace[t];
        for j in 0..hd {
            let (i, f, gg, o) = (tr.gates[j], tr.gates[hd + j], tr.gates[2 * hd + j], tr.gates[3 * hd + j]);
            let dh = dh_out[t][j] + dh_next[j];
            let tc = tr.tanh_c[j];
            let dc = dh * o * (1.0 - tc * tc) + dc_next[j];
            dz[j] = dc * gg * i * (1.0 - i);
            dz[hd + j] = dc * tr.c_prev[j] * f * (1.0 - f);
            dz[2 * hd + j] = dc * i * (1.0 - gg * gg);
            dz[3 * hd + j] = dh * tc * o * (1.0 - o);
            dc_next[j] = dc * f;
        }
        outer_acc(&mut g.w_x, p.input, &dz, &tr.x);
        outer_acc(&mut g.w_h, hd, &dz, &tr.h_prev);
        g.b.iter_mut().zip(&dz).for_each(|(b, d)| *b += d);
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        gemv_t_acc(&p.w_h, hd, &dz, &mut dh_next);
        if want_dx {
            let mut d = vec![0.0; p.input];
            gemv_t_acc(&p.w_x, p.input, &dz, &mut d);
            dx[t] = d;
        }
    }
    dx
}

/// Adds `scale * d loss / d params` for one sample into `g`; returns the loss.
fn accumulate_sample<S: AsRef<[f64]>>(seq: &[S], label: usize, p: &ModelParams, masks: &DropoutMasks, scale: f64, g: &mut Gradients) -> Result<(f64, [f64; CLASSES]), LstmError> {
    let hd = p.hidden();
    let tr = run_forward(seq, p, masks)?;
    let steps = seq.len();
    let mut dlogits = tr.probs;
    dlogits[label] -= 1.0;
    dlogits.iter_mut().for_each(|d| *d *= scale);
    outer_acc(&mut g.w_out, hd, &dlogits, &tr.y2);
    g.b_out.iter_mut().zip(&dlogits).for_each(|(b, d)| *b += d);
    let mut dy2 = vec![0.0; hd];
    gemv_t_acc(&p.w_out, hd, &dlogits, &mut dy2);

    let last = steps - 1;
    let mut dh2 = vec![vec![0.0; hd]; steps];
    for j in 0..hd {
        if tr.l2[last].h[j] > 0.0 {
            dh2[last][j] = dy2[j] * masks.layer2[last][j];
        }
    }
    let dy1 = backprop_layer(&p.layer2, &tr.l2, &dh2, &mut g.layer2, true);
    let dh1: Vec<Vec<f64>> = (0..steps)
        .map(|t| (0..hd).map(|j| if tr.l1[t].h[j] > 0.0 { dy1[t][j] * masks.layer1[t][j] } else { 0.0 }).collect())
        .collect();
    backprop_layer(&p.layer1, &tr.l1, &dh1, &mut g.layer1, false);
    debug_assert_eq!(tr.y1.len(), steps);
    Ok((loss(&tr.probs, label), tr.probs))
}

/// Gradients of the mean batch loss. Sample `i` uses the dropout masks of
/// `forward(.., Mode::Train, sample_seed(rng_seed, i))`.
pub fn backward<S: AsRef<[f64]>>(batch: &[(&[S], usize)], p: &ModelParams, rng_seed: u64) -> Result<(Gradients, f64), LstmError> {
    p.check()?;
    if batch.is_empty() {
        return Err(LstmError::ShapeMismatch("empty batch".into()));
    }
    let mut g = p.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for (i, (seq, label)) in batch.iter().enumerate() {
        if *label >= CLASSES {
            return Err(LstmError::ShapeMismatch(format!("label {label}")));
        }
        let masks = masks_for(seq.len(), p, Mode::Train, sample_seed(rng_seed, i));
        total += accumulate_sample(seq, *label, p, &masks, scale, &mut g)?.0;
    }
    Ok((g, total * scale))
}

/// Same as [`backward`] with caller-supplied masks per sample.
pub fn backward_with_masks<S: AsRef<[f64]>>(batch: &[(&[S], usize)], p: &ModelParams, masks: &[DropoutMasks]) -> Result<(Gradients, f64), LstmError> {
    p.check()?;
    let mut g = p.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ((seq, label), m) in batch.iter().zip(masks) {
        total += accumulate_sample(seq, *label, p, m, scale, &mut g)?.0;
    }
    Ok((g, total * scale))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(p: &ModelParams) -> Self {
        Self::with_hyper(p, 1e-3, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(p: &ModelParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: p.zeros_like(), v: p.zeros_like(), step: 0, lr, beta1, beta2, eps }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(p: &mut ModelParams, grads: &Gradients, state: &mut AdamState) {
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let (lr, eps) = (state.lr, state.eps);
    for (((w, g), m), v) in p.tensors_mut().into_iter().zip(grads.tensors()).zip(state.m.tensors_mut()).zip(state.v.tensors_mut()) {
        for k in 0..w.len() {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            w[k] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    /// Stacked LSTM layers; the network is fixed at two.
    pub layers: usize,
    pub dropout: f64,
    pub lr: f64,
    pub betas: [f64; 2],
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub patience: usize,
    pub min_per_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN,
            layers: 2,
            dropout: 0.2,
            lr: 1e-3,
            betas: [0.9, 0.999],
            epochs: 60,
            batch: 32,
            seed: 0,
            val_fraction: 0.2,
            patience: 10,
            min_per_class: 30,
        }
    }
}

/// A labeled sequence. `steps` are the frames fed to the LSTM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub steps: Vec<Vec<f64>>,
    pub label: usize,
}

impl Example {
    pub fn from_sequence(seq: &FeatureSequence, label: usize) -> Self {
        Self { steps: seq.frames.iter().map(|f| f.to_vec()).collect(), label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Stratified, seeded split into (train, val) index lists.
pub fn stratified_split(labels: &[usize], val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in 0..CLASSES {
        let mut idx: Vec<usize> = labels.iter().enumerate().filter(|(_, l)| **l == class).map(|(i, _)| i).collect();
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * val_fraction).round() as usize;
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Mean loss and accuracy in eval mode.
pub fn evaluate(p: &ModelParams, data: &[Example]) -> Result<(f64, f64), LstmError> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut l = 0.0;
    let mut correct = 0;
    for ex in data {
        let probs = forward(&ex.steps, p, Mode::Eval, 0)?;
        l += loss(&probs, ex.label);
        if argmax(&probs) == ex.label {
            correct += 1;
        }
    }
    Ok((l / data.len() as f64, correct as f64 / data.len() as f64))
}

pub fn argmax(probs: &[f64; CLASSES]) -> usize {
    (0..CLASSES).fold(0, |best, k| if probs[k] > probs[best] { k } else { best })
}

fn class_counts(data: &[Example]) -> [usize; CLASSES] {
    let mut c = [0; CLASSES];
    data.iter().for_each(|e| c[e.label.min(CLASSES - 1)] += 1);
    c
}

/// Splits `data` with `cfg.val_fraction` and trains.
pub fn train(data: &[Example], cfg: &TrainConfig) -> Result<(ModelParams, Vec<EpochStats>), LstmError> {
    if !(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0) {
        return Err(LstmError::BadConfig("val_fraction must be in (0, 1)"));
    }
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let (ti, vi) = stratified_split(&labels, cfg.val_fraction, cfg.seed);
    let tr: Vec<Example> = ti.iter().map(|&i| data[i].clone()).collect();
    let va: Vec<Example> = vi.iter().map(|&i| data[i].clone()).collect();
    train_split(&tr, &va, cfg)
}

/// Mini-batch Adam with early stopping on validation loss. Returns the
/// best-validation parameters and per-epoch history.
pub fn train_split(train: &[Example], val: &[Example], cfg: &TrainConfig) -> Result<(ModelParams, Vec<EpochStats>), LstmError> {
    let input = train.first().map_or(N_FEATURES, |e| e.steps.first().map_or(N_FEATURES, Vec::len));
    if cfg.layers != 2 {
        return Err(LstmError::BadConfig("layers must be 2"));
    }
    let mut p = ModelParams::init(input, cfg.hidden, cfg.dropout, cfg.seed);
    if cfg.epochs == 0 {
        return Ok((p, Vec::new()));
    }
    if cfg.batch == 0 {
        return Err(LstmError::BadConfig("batch must be > 0"));
    }
    let counts = class_counts(train);
    if let Some(class) = (0..CLASSES).find(|&c| counts[c] == 0) {
        return Err(LstmError::ClassMissing(class));
    }
    let total = class_counts(train).iter().zip(class_counts(val)).map(|(a, b)| a + b).collect::<Vec<_>>();
    if let Some(class) = (0..CLASSES).find(|&c| total[c] < cfg.min_per_class) {
        return Err(LstmError::TooFewSamples { class, count: total[class], min: cfg.min_per_class });
    }

    let mut adam = AdamState::with_hyper(&p, cfg.lr, cfg.betas[0], cfg.betas[1], 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, p.clone());
    let mut since_best = 0;
    let mut batch_no: u64 = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<(&[Vec<f64>], usize)> = chunk.iter().map(|&i| (train[i].steps.as_slice(), train[i].label)).collect();
            let (g, l) = backward(&batch, &p, cfg.seed.wrapping_add(batch_no))?;
            batch_no += 1;
            epoch_loss += l * chunk.len() as f64;
            adam_step(&mut p, &g, &mut adam);
        }
        let (_, train_acc) = evaluate(&p, train)?;
        let (val_loss, val_acc) = if val.is_empty() { (epoch_loss / train.len() as f64, train_acc) } else { evaluate(&p, val)? };
        history.push(EpochStats { epoch, train_loss: epoch_loss / train.len() as f64, train_acc, val_loss, val_acc });
        if val_loss < best.0 {
            best = (val_loss, p.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.1, history))
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

pub const MAGIC: &[u8; 8] = b"CLADVR01";

/// Everything persisted after calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub params: ModelParams,
    pub thresholds: Thresholds,
    pub norms: NormStats,
}

impl ModelFile {
    /// Layout: magic, u32 LE dims (input, hidden, layers=2, classes=3), then
    /// f64 LE arrays: layer1 W_x, W_h, b; layer2 W_x, W_h, b; W_out; b_out;
    /// T_low; T_high; norm mean[8]; norm std[8].
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(24 + 8 * (p.param_count() + 2 + 2 * N_FEATURES));
        out.extend_from_slice(MAGIC);
        for d in [p.input_dim() as u32, p.hidden() as u32, 2, CLASSES as u32] {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for t in p.tensors() {
            t.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for v in [self.thresholds.t_low, self.thresholds.t_high].iter().chain(&self.norms.mean).chain(&self.norms.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], dropout_rate: f64) -> Result<Self, ModelFileError> {
        if bytes.len() < 8 {
            return Err(ModelFileError::TruncatedFile);
        }
        if &bytes[..8] != MAGIC {
            return Err(ModelFileError::BadMagic);
        }
        if bytes.len() < 24 {
            return Err(ModelFileError::TruncatedFile);
        }
        let dim = |k: usize| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().expect("4 bytes")) as usize;
        let (input, hidden, layers, classes) = (dim(0), dim(1), dim(2), dim(3));
        if input != N_FEATURES || layers != 2 || classes != CLASSES || hidden == 0 || hidden > 4096 {
            return Err(ModelFileError::DimMismatch(format!("input={input} hidden={hidden} layers={layers} classes={classes}")));
        }
        let mut params = ModelParams::zeros(input, hidden);
        params.dropout_rate = dropout_rate;
        let n_vals = params.param_count() + 2 + 2 * N_FEATURES;
        let need = 24 + 8 * n_vals;
        if bytes.len() < need {
            return Err(ModelFileError::TruncatedFile);
        }
        if bytes.len() > need {
            return Err(ModelFileError::DimMismatch(format!("{} trailing bytes", bytes.len() - need)));
        }
        let mut vals = bytes[24..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|v| *v = vals.next().expect("length checked"));
        }
        let t_low = vals.next().expect("length checked");
        let t_high = vals.next().expect("length checked");
        let mut norms = NormStats::default();
        norms.mean.iter_mut().for_each(|v| *v = vals.next().expect("length checked"));
        norms.std.iter_mut().for_each(|v| *v = vals.next().expect("length checked"));
        Ok(Self { params, thresholds: Thresholds { t_low, t_high }, norms })
    }
}

pub fn save_model(file: &ModelFile, path: &Path) -> Result<(), ModelFileError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&file.to_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path, dropout_rate: f64) -> Result<ModelFile, ModelFileError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    ModelFile::from_bytes(&bytes, dropout_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(d: usize, t: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..t).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn zero_cell_stays_zero() {
        let p = LstmLayerParams::zeros(3, 4);
        let (h, c) = cell_forward(&[0.0; 3], &[0.0; 4], &[0.0; 4], &p).unwrap();
        assert_eq!(h, vec![0.0; 4]);
        assert_eq!(c, vec![0.0; 4]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut p = LstmLayerParams::zeros(3, 4);
        p.b[4..8].iter_mut().for_each(|b| *b = 20.0);
        let c0 = [0.5, -1.0, 2.0, 0.1];
        let (_, c) = cell_forward(&[0.0; 3], &[0.3; 4], &c0, &p).unwrap();
        for (a, b) in c.iter().zip(c0) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn cell_shape_mismatch() {
        let p = LstmLayerParams::zeros(3, 4);
        assert!(matches!(cell_forward(&[0.0; 2], &[0.0; 4], &[0.0; 4], &p), Err(LstmError::ShapeMismatch(_))));
    }

    #[test]
    fn zero_weights_uniform_probs() {
        let p = ModelParams::zeros(N_FEATURES, 8);
        let probs = forward(&seq(N_FEATURES, 5, 1), &p, Mode::Eval, 0).unwrap();
        for v in probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((load_score(&probs) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eval_deterministic_and_zero_dropout_matches() {
        let mut p = ModelParams::init(N_FEATURES, 16, 0.2, 3);
        let s = seq(N_FEATURES, 5, 2);
        let a = forward(&s, &p, Mode::Eval, 1).unwrap();
        let b = forward(&s, &p, Mode::Eval, 99).unwrap();
        assert_eq!(a, b);
        p.dropout_rate = 0.0;
        assert_eq!(forward(&s, &p, Mode::Train, 5).unwrap(), a);
    }

    #[test]
    fn loss_examples() {
        assert!(loss(&[1.0, 0.0, 0.0], 0).abs() < 1e-15);
        assert!((loss(&[1.0 / 3.0; 3], 2) - 3.0_f64.ln()).abs() < 1e-12);
        assert!((loss(&[0.7, 0.2, 0.1], 1) - 1.6094379124341003).abs() < 1e-12);
        assert!((loss(&[1.0, 0.0, 0.0], 1) - 27.631021115928547).abs() < 1e-9);
    }

    #[test]
    fn load_score_endpoints() {
        assert_eq!(load_score(&[1.0, 0.0, 0.0]), 0.0);
        assert_eq!(load_score(&[0.0, 0.0, 1.0]), 1.0);
    }

    #[test]
    fn duplicated_sample_same_gradient() {
        let mut p = ModelParams::init(3, 4, 0.0, 7);
        p.dropout_rate = 0.0;
        let s = seq(3, 2, 8);
        let (g1, _) = backward(&[(s.as_slice(), 1)], &p, 0).unwrap();
        let (g2, _) = backward(&[(s.as_slice(), 1), (s.as_slice(), 1)], &p, 0).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn adam_zero_grad_is_noop_and_counts() {
        let mut p = ModelParams::init(3, 4, 0.0, 1);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let g = p.zeros_like();
        adam_step(&mut p, &g, &mut st);
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
        adam_step(&mut p, &g, &mut st);
        assert_eq!(st.step, 2);
    }

    #[test]
    fn adam_constant_gradient_step_tends_to_lr() {
        let mut p = ModelParams::init(3, 4, 0.0, 1);
        let mut st = AdamState::new(&p);
        let mut g = p.zeros_like();
        for (k, t) in g.tensors_mut().into_iter().enumerate() {
            t.iter_mut().enumerate().for_each(|(i, v)| *v = if (i + k) % 2 == 0 { 0.3 } else { -2.0 });
        }
        for _ in 0..1000 {
            adam_step(&mut p, &g, &mut st);
        }
        let prev = p.clone();
        adam_step(&mut p, &g, &mut st);
        for ((a, b), gt) in p.tensors().iter().zip(prev.tensors()).zip(g.tensors()) {
            for ((x, y), gv) in a.iter().zip(b.iter()).zip(gt.iter()) {
                let step = x - y;
                assert!((step + 1e-3 * gv.signum()).abs() < 1e-6, "step {step}");
            }
        }
    }

    #[test]
    fn model_file_errors() {
        let mf = ModelFile {
            params: ModelParams::init(N_FEATURES, 4, 0.2, 1),
            thresholds: Thresholds { t_low: 0.2, t_high: 0.8 },
            norms: NormStats::default(),
        };
        let bytes = mf.to_bytes();
        assert_eq!(&bytes[..8], b"CLADVR01");
        assert_eq!(ModelFile::from_bytes(&bytes, 0.2).unwrap(), mf);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelFile::from_bytes(&bad, 0.2), Err(ModelFileError::BadMagic)));
        let cut = &bytes[..bytes.len() * 9 / 10];
        assert!(matches!(ModelFile::from_bytes(cut, 0.2), Err(ModelFileError::TruncatedFile)));
        let mut dims = bytes.clone();
        dims[8] = 7;
        assert!(matches!(ModelFile::from_bytes(&dims, 0.2), Err(ModelFileError::DimMismatch(_))));
    }

    #[test]
    fn epochs_zero_returns_init() {
        let data = vec![Example { steps: seq(3, 2, 1), label: 0 }];
        let cfg = TrainConfig { epochs: 0, hidden: 4, ..TrainConfig::default() };
        let (p, hist) = train_split(&data, &[], &cfg).unwrap();
        assert!(hist.is_empty());
        assert_eq!(p, ModelParams::init(3, 4, cfg.dropout, cfg.seed));
    }

    #[test]
    fn missing_class_rejected() {
        let data: Vec<Example> = (0..40).map(|i| Example { steps: seq(3, 2, i), label: (i % 2) as usize }).collect();
        let cfg = TrainConfig { epochs: 2, hidden: 4, ..TrainConfig::default() };
        assert_eq!(train(&data, &cfg).unwrap_err(), LstmError::ClassMissing(2));
    }

    #[test]
    fn stratified_split_proportions() {
        let labels: Vec<usize> = (0..300).map(|i| i % 3).collect();
        let (tr, va) = stratified_split(&labels, 0.2, 4);
        for c in 0..3 {
            assert_eq!(va.iter().filter(|&&i| labels[i] == c).count(), 20);
            assert_eq!(tr.iter().filter(|&&i| labels[i] == c).count(), 80);
        }
        assert_eq!(stratified_split(&labels, 0.2, 4), (tr, va));
    }
}
