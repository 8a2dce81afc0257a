//! Trainable cost-regression heads on top of the frozen encoder.
//!
//! A head maps each patch feature vector to one cost, which is broadcast to
//! the patch's pixels (nearest-neighbor upsampling). Training minimizes the
//! class-weighted MSE over labeled pixels only:
//!
//! ```text
//! L = Σ_labeled w(c_p) (ŷ_p − y_p)² / Σ_labeled w(c_p)
//! ```
//!
//! Because every pixel in a patch shares one prediction, the pixel sum
//! collapses to per-patch sufficient statistics `(Σw, Σw·y, Σw·y²)`, which
//! makes a training step independent of the pixel count.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncodedFrame;
use crate::error::{Error, Result};
use crate::metrics::{classify, CostClass, CostImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    /// SGD epochs over the training frames per training cycle.
    pub epochs: usize,
    /// Patches per minibatch.
    pub batch_patches: usize,
    /// Hidden units; 0 selects the linear head.
    pub hidden: usize,
    /// Embedding history ring size.
    pub history: usize,
    /// Seconds of validation-loss records kept per head.
    pub loss_window: f64,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            epochs: 50,
            batch_patches: 32,
            hidden: 0,
            history: 32,
            loss_window: 20.0,
            seed: 11,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.epochs > 0
            && self.batch_patches > 0
            && self.history > 0
            && self.loss_window > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid learner config {self:?}")))
        }
    }
}

/// Median-frequency class weights over labeled pixels. Absent classes get
/// weight 0.
pub fn class_weights<'a>(masks: impl IntoIterator<Item = &'a [Option<f32>]>) -> Result<[f64; 3]> {
    let mut counts = [0u64; 3];
    for m in masks {
        for c in m {
            let k = classify(*c);
            if k != CostClass::Unknown {
                counts[k.index()] += 1;
            }
        }
    }
    weights_from_counts(counts)
}

pub fn weights_from_counts(counts: [u64; 3]) -> Result<[f64; 3]> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::NoLabeledPixels);
    }
    let mut freqs: Vec<f64> = counts.iter().filter(|c| **c > 0).map(|c| *c as f64 / total as f64).collect();
    freqs.sort_by(f64::total_cmp);
    let n = freqs.len();
    let median = if n % 2 == 1 {
        freqs[n / 2]
    } else {
        (freqs[n / 2 - 1] + freqs[n / 2]) / 2.0
    };
    Ok(counts.map(|c| if c == 0 { 0.0 } else { median / (c as f64 / total as f64) }))
}

/// Weighted label statistics of one patch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PatchTarget {
    pub w: f64,
    pub wy: f64,
    pub wyy: f64,
}

/// Per-patch targets for a label mask, row-major over the patch grid.
pub fn patch_targets(costs: &[Option<f32>], width: u32, patch: u32, weights: &[f64; 3]) -> Vec<PatchTarget> {
    let height = costs.len() as u32 / width;
    let cols = (width / patch) as usize;
    let rows = (height / patch) as usize;
    let mut out = vec![PatchTarget::default(); cols * rows];
    for (i, c) in costs.iter().enumerate() {
        let Some(y) = c else { continue };
        let k = classify(Some(*y));
        let w = weights[k.index()];
        if w == 0.0 {
            continue;
        }
        let (px, py) = ((i as u32 % width) / patch, (i as u32 / width) / patch);
        let t = &mut out[py as usize * cols + px as usize];
        let y = *y as f64;
        t.w += w;
        t.wy += w * y;
        t.wyy += w * y * y;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Linear,
    Mlp { hidden: usize },
}

/// Head parameters and forward/backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Regressor {
    pub kind: HeadKind,
    pub dim: usize,
    /// Linear: `[w(dim), b]`. MLP: `[W1(hidden × dim), b1(hidden), w2(hidden), b2]`.
    pub params: Vec<f64>,
}

impl Regressor {
    pub fn new(kind: HeadKind, dim: usize, bias: f64, seed: u64) -> Self {
        match kind {
            HeadKind::Linear => {
                let mut params = vec![0.0; dim + 1];
                params[dim] = bias;
                Self { kind, dim, params }
            }
            HeadKind::Mlp { hidden } => {
                use rand_distr::{Distribution, Normal};
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid normal");
                let mut params = Vec::with_capacity(hidden * dim + 2 * hidden + 1);
                params.extend((0..hidden * dim).map(|_| n.sample(&mut rng)));
                params.extend(std::iter::repeat(0.0).take(2 * hidden));
                params.push(bias);
                Self { kind, dim, params }
            }
        }
    }

    /// Raw (unclamped) output.
    pub fn forward(&self, x: &[f32]) -> f64 {
        let d = self.dim;
        match self.kind {
            HeadKind::Linear => self.params[..d].iter().zip(x).map(|(w, v)| w * *v as f64).sum::<f64>() + self.params[d],
            HeadKind::Mlp { hidden } => {
                let (w1, rest) = self.params.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut y = b2[0];
                for h in 0..hidden {
                    let z: f64 = w1[h * d..(h + 1) * d].iter().zip(x).map(|(w, v)| w * *v as f64).sum::<f64>() + b1[h];
                    y += w2[h] * z.tanh();
                }
                y
            }
        }
    }

    /// Adds `g · ∂ŷ/∂θ` to `grad`.
    pub fn backward(&self, x: &[f32], g: f64, grad: &mut [f64]) {
        let d = self.dim;
        match self.kind {
            HeadKind::Linear => {
                for (gi, v) in grad[..d].iter_mut().zip(x) {
                    *gi += g * *v as f64;
                }
                grad[d] += g;
            }
            HeadKind::Mlp { hidden } => {
                let w1 = &self.params[..hidden * d];
                let b1 = &self.params[hidden * d..hidden * d + hidden];
                let w2 = &self.params[hidden * d + hidden..hidden * d + 2 * hidden];
                for h in 0..hidden {
                    let z: f64 = w1[h * d..(h + 1) * d].iter().zip(x).map(|(w, v)| w * *v as f64).sum::<f64>() + b1[h];
                    let a = z.tanh();
                    grad[hidden * d + hidden + h] += g * a;
                    let gz = g * w2[h] * (1.0 - a * a);
                    for (gi, v) in grad[h * d..(h + 1) * d].iter_mut().zip(x) {
                        *gi += gz * *v as f64;
                    }
                    grad[hidden * d + h] += gz;
                }
                grad[hidden * d + 2 * hidden] += g;
            }
        }
    }
}

/// A frame and its per-patch targets.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub frame: &'a EncodedFrame,
    pub targets: &'a [PatchTarget],
}

/// Weighted masked MSE and its gradient over `samples`. Returns `None` when
/// nothing is labeled.
pub fn loss_and_grad(model: &Regressor, samples: &[Sample], mut grad: Option<&mut [f64]>) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut acc = grad.as_ref().map(|g| vec![0.0; g.len()]);
    for s in samples {
        for (i, t) in s.targets.iter().enumerate() {
            if t.w == 0.0 {
                continue;
            }
            let x = s.frame.patch_index(i);
            let y = model.forward(x);
            num += t.w * y * y - 2.0 * y * t.wy + t.wyy;
            den += t.w;
            if let Some(a) = acc.as_mut() {
                model.backward(x, 2.0 * (t.w * y - t.wy), a);
            }
        }
    }
    if den == 0.0 {
        return None;
    }
    if let (Some(g), Some(a)) = (grad.as_mut(), acc) {
        for (gi, ai) in g.iter_mut().zip(a) {
            *gi = ai / den;
        }
    }
    Some((num / den).max(0.0))
}

/// A trainable head plus the state model selection reads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelHead {
    pub id: u32,
    pub model: Regressor,
    /// Embeddings of frames this head trained on, oldest first.
    pub history: VecDeque<Vec<f64>>,
    pub history_capacity: usize,
    pub usable: bool,
    /// `(timestamp, validation loss)`, time-ordered.
    pub losses: VecDeque<(f64, f64)>,
    /// Last time the head was selected for training.
    pub last_used: f64,
    pub cycles: u32,
}

impl ModelHead {
    pub fn new(id: u32, dim: usize, cfg: &LearnerConfig, now: f64) -> Self {
        let kind = if cfg.hidden == 0 {
            HeadKind::Linear
        } else {
            HeadKind::Mlp { hidden: cfg.hidden }
        };
        Self {
            id,
            model: Regressor::new(kind, dim, 5.0, cfg.seed ^ id as u64),
            history: VecDeque::new(),
            history_capacity: cfg.history,
            usable: false,
            losses: VecDeque::new(),
            last_used: now,
            cycles: 0,
        }
    }

    /// A fresh head with copied weights and no history or loss records.
    pub fn spawn_from(&self, id: u32, now: f64) -> Self {
        Self {
            id,
            model: self.model.clone(),
            history: VecDeque::new(),
            history_capacity: self.history_capacity,
            usable: false,
            losses: VecDeque::new(),
            last_used: now,
            cycles: 0,
        }
    }

    pub fn push_history(&mut self, e: &[f64]) {
        if self.history.len() == self.history_capacity {
            self.history.pop_front();
        }
        self.history.push_back(e.to_vec());
    }

    pub fn record_loss(&mut self, t: f64, loss: f64, keep: f64) {
        self.losses.push_back((t, loss));
        while self.losses.front().is_some_and(|(s, _)| *s < t - keep) {
            self.losses.pop_front();
        }
    }

    /// Per-pixel prediction: patch outputs clamped to [0, 10], broadcast
    /// to pixels, top half only.
    pub fn predict(&self, frame: &EncodedFrame, width: u32, height: u32) -> CostImage {
        predict(&self.model, frame, width, height)
    }
}

pub fn predict(model: &Regressor, frame: &EncodedFrame, width: u32, height: u32) -> CostImage {
    let mut out = CostImage::empty(width, height);
    let patch = width / frame.cols as u32;
    let patch_costs: Vec<f32> = (0..frame.cols * frame.rows)
        .map(|i| model.forward(frame.patch_index(i)).clamp(0.0, 10.0) as f32)
        .collect();
    for y in 0..height / 2 {
        for x in 0..width {
            let p = (y / patch) as usize * frame.cols + (x / patch) as usize;
            out.costs[(y * width + x) as usize] = Some(patch_costs[p]);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOutcome {
    pub loss_before: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Runs the SGD budget on `train`, evaluates on `val`, and updates the
/// head's history and loss window. The head is unchanged on error.
pub fn train_head(
    head: &mut ModelHead,
    train: &[Sample],
    val: &[Sample],
    cfg: &LearnerConfig,
    now: f64,
) -> Result<TrainOutcome> {
    let loss_before = loss_and_grad(&head.model, train, None).ok_or(Error::NoLabeledPixels)?;
    let mut items: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(f, s)| s.targets.iter().enumerate().filter(|(_, t)| t.w > 0.0).map(move |(i, _)| (f, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((head.id as u64) << 32) ^ head.cycles as u64);
    let mut grad = vec![0.0; head.model.params.len()];
    for _ in 0..cfg.epochs {
        items.shuffle(&mut rng);
        for batch in items.chunks(cfg.batch_patches) {
            grad.fill(0.0);
            let mut den = 0.0;
            for &(f, i) in batch {
                let t = train[f].targets[i];
                let x = train[f].frame.patch_index(i);
                let y = head.model.forward(x);
                head.model.backward(x, 2.0 * (t.w * y - t.wy), &mut grad);
                den += t.w;
            }
            let step = cfg.learning_rate / den;
            for (p, g) in head.model.params.iter_mut().zip(&grad) {
                *p -= step * g;
            }
        }
    }
    let train_loss = loss_and_grad(&head.model, train, None).unwrap_or(loss_before);
    let val_loss = loss_and_grad(&head.model, val, None).unwrap_or(train_loss);
    for s in train {
        head.push_history(&s.frame.embedding);
    }
    head.record_loss(now, val_loss, cfg.loss_window.max(20.0) * 3.0);
    head.last_used = now;
    head.cycles += 1;
    Ok(TrainOutcome {
        loss_before,
        train_loss,
        val_loss,
    })
}

const HEAD_MAGIC: &[u8; 4] = b"NFHD";
const HEAD_VERSION: u32 = 1;

/// Writes a head checkpoint (little-endian):
///
/// ```text
/// "NFHD" | u32 version | u32 id | u32 kind (0 linear, 1 mlp) | u32 hidden
/// u32 dim | u32 n_params | n_params × f64
/// u8 usable | f64 last_used | u32 cycles | u32 history_capacity
/// u32 n_history | u32 emb_dim | n_history × emb_dim × f64
/// u32 n_losses | n_losses × (f64 t, f64 loss)
/// ```
pub fn write_head(path: &Path, head: &ModelHead) -> Result<()> {
    let mut b: Vec<u8> = Vec::new();
    let u32le = |b: &mut Vec<u8>, v: u32| b.extend_from_slice(&v.to_le_bytes());
    let f64le = |b: &mut Vec<u8>, v: f64| b.extend_from_slice(&v.to_le_bytes());
    b.extend_from_slice(HEAD_MAGIC);
    u32le(&mut b, HEAD_VERSION);
    u32le(&mut b, head.id);
    let (kind, hidden) = match head.model.kind {
        HeadKind::Linear => (0, 0),
        HeadKind::Mlp { hidden } => (1, hidden as u32),
    };
    u32le(&mut b, kind);
    u32le(&mut b, hidden);
    u32le(&mut b, head.model.dim as u32);
    u32le(&mut b, head.model.params.len() as u32);
    for p in &head.model.params {
        f64le(&mut b, *p);
    }
    b.push(head.usable as u8);
    f64le(&mut b, head.last_used);
    u32le(&mut b, head.cycles);
    u32le(&mut b, head.history_capacity as u32);
    u32le(&mut b, head.history.len() as u32);
    u32le(&mut b, head.history.front().map_or(0, |e| e.len()) as u32);
    for e in &head.history {
        for v in e {
            f64le(&mut b, *v);
        }
    }
    u32le(&mut b, head.losses.len() as u32);
    for (t, l) in &head.losses {
        f64le(&mut b, *t);
        f64le(&mut b, *l);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&b).map_err(|e| Error::io(path, e))
}

pub fn read_head(path: &Path) -> Result<ModelHead> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::format("head checkpoint", path, why);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = data.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != HEAD_MAGIC {
        return Err(bad("bad magic"));
    }
    macro_rules! u32v {
        () => {
            u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"))
        };
    }
    macro_rules! f64v {
        () => {
            f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"))
        };
    }
    if u32v!() != HEAD_VERSION {
        return Err(bad("unsupported version"));
    }
    let id = u32v!();
    let kind = match (u32v!(), u32v!()) {
        (0, _) => HeadKind::Linear,
        (1, h) => HeadKind::Mlp { hidden: h as usize },
        _ => return Err(bad("unknown head kind")),
    };
    let dim = u32v!() as usize;
    let n = u32v!() as usize;
    let expected = match kind {
        HeadKind::Linear => dim + 1,
        HeadKind::Mlp { hidden } => hidden * dim + 2 * hidden + 1,
    };
    if n != expected {
        return Err(bad("parameter count does not match head shape"));
    }
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(f64v!());
    }
    let usable = take(1)?[0] != 0;
    let last_used = f64v!();
    let cycles = u32v!();
    let history_capacity = u32v!() as usize;
    let nh = u32v!() as usize;
    let ed = u32v!() as usize;
    let mut history = VecDeque::with_capacity(nh);
    for _ in 0..nh {
        let mut e = Vec::with_capacity(ed);
        for _ in 0..ed {
            e.push(f64v!());
        }
        history.push_back(e);
    }
    let nl = u32v!() as usize;
    let mut losses = VecDeque::with_capacity(nl);
    for _ in 0..nl {
        let t = f64v!();
        let l = f64v!();
        losses.push_back((t, l));
    }
    if pos != data.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(ModelHead {
        id,
        model: Regressor { kind, dim, params },
        history,
        history_capacity,
        usable,
        losses,
        last_used,
        cycles,
    })
}
