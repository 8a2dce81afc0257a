//! Model selection over an ensemble of heads.
//!
//! Training: the incoming buffer's validation frames (mixed with frames
//! from the previous buffer) are compared with each head's training
//! history. The closest head within `cd_new` is trained; otherwise a new
//! head is spawned from the closest one, evicting the least recently
//! trained head when the ensemble is full.
//!
//! Inference: the last few frame embeddings pick the nearest head, which
//! serves predictions only if it is within `cd_lidar` and currently usable.
//! Everything else falls back to LiDAR.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{LearnerConfig, ModelHead};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetDistance {
    /// Mean over queries of the minimum distance to any history embedding.
    MeanMin,
    /// Distance between the normalized mean embeddings.
    MeanToMean,
    /// Largest over queries of the minimum distance to any history
    /// embedding.
    MaxMin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub max_heads: usize,
    /// Set distance above which a buffer gets a new head. The distance
    /// thresholds depend on the encoder; see `nearfar calibrate`.
    pub cd_new: f64,
    /// Set distance above which inference falls back to LiDAR.
    pub cd_lidar: f64,
    /// Mean validation loss below which a head may serve.
    pub l_usable: f64,
    /// Window for the usability mean, seconds.
    pub usable_window: f64,
    /// Frames in the inference window.
    pub recent_frames: usize,
    /// Set distance for training-head selection.
    pub set_distance: SetDistance,
    /// Set distance between the inference window and a head; with
    /// `max-min` a single unfamiliar frame is enough to fall back.
    pub inference_distance: SetDistance,
    /// When false, a single head is always trained and always serves.
    pub model_selection: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            max_heads: 5,
            cd_new: 0.45,
            cd_lidar: 0.75,
            l_usable: 6.0,
            usable_window: 20.0,
            recent_frames: 10,
            set_distance: SetDistance::MeanMin,
            inference_distance: SetDistance::MaxMin,
            model_selection: true,
        }
    }
}

impl EnsembleConfig {
    /// Thresholds fitted to the default encoder on simulator drives.
    pub fn calibrated() -> Self {
        Self {
            cd_new: 0.15,
            cd_lidar: 0.42,
            l_usable: 5.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_heads >= 1
            && (0.0..=2.0).contains(&self.cd_new)
            && (0.0..=2.0).contains(&self.cd_lidar)
            && self.l_usable > 0.0
            && self.usable_window > 0.0
            && self.recent_frames >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid ensemble config {self:?}")))
        }
    }
}

/// `1 − a·b` for unit vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>();
    let nb = b.iter().map(|v| v * v).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroEmbedding);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((1.0 - dot).clamp(0.0, 2.0))
}

fn normalized_mean<'a>(v: impl Iterator<Item = &'a Vec<f64>>) -> Option<Vec<f64>> {
    let mut m: Vec<f64> = Vec::new();
    for e in v {
        if m.is_empty() {
            m = vec![0.0; e.len()];
        }
        for (a, b) in m.iter_mut().zip(e) {
            *a += b;
        }
    }
    let n = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0).then(|| m.iter().map(|x| x / n).collect())
}

/// Set-to-set distance between a head's history and query embeddings.
/// `+∞` for an empty history or no queries.
pub fn head_to_frames_distance(head: &ModelHead, frames: &[Vec<f64>], mode: SetDistance) -> f64 {
    if head.history.is_empty() || frames.is_empty() {
        return f64::INFINITY;
    }
    let nearest = |q: &Vec<f64>| {
        head.history
            .iter()
            .map(|h| cosine_distance(q, h).unwrap_or(2.0))
            .fold(f64::INFINITY, f64::min)
    };
    match mode {
        SetDistance::MeanMin => frames.iter().map(nearest).sum::<f64>() / frames.len() as f64,
        SetDistance::MaxMin => frames.iter().map(nearest).fold(0.0, f64::max),
        SetDistance::MeanToMean => match (normalized_mean(head.history.iter()), normalized_mean(frames.iter())) {
            (Some(a), Some(b)) => cosine_distance(&a, &b).unwrap_or(2.0),
            _ => f64::INFINITY,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reason {
    SimilarAndUsable,
    Dissimilar,
    NotUsable,
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reason::SimilarAndUsable => "similar-and-usable",
            Reason::Dissimilar => "dissimilar",
            Reason::NotUsable => "not-usable",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Head(u32),
    Lidar,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Head(id) => write!(f, "head:{id}"),
            Source::Lidar => f.write_str("lidar"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceDecision {
    pub timestamp: f64,
    pub source: Source,
    /// Nearest head's set distance (`inf` if no head has history).
    pub distance: f64,
    pub nearest: Option<u32>,
    pub reason: Reason,
}

/// Result of training-head selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub head: u32,
    pub spawned: bool,
    pub evicted: Option<u32>,
}

/// Heads plus selection state.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub cfg: EnsembleConfig,
    pub learner: LearnerConfig,
    pub heads: Vec<ModelHead>,
    next_id: u32,
    /// Validation embeddings kept from the previous buffer.
    previous_validation: Vec<Vec<f64>>,
}

impl Ensemble {
    pub fn new(cfg: EnsembleConfig, learner: LearnerConfig, dim: usize, now: f64) -> Result<Self> {
        cfg.validate()?;
        learner.validate()?;
        Ok(Self {
            cfg,
            learner,
            heads: vec![ModelHead::new(0, dim, &learner, now)],
            next_id: 1,
            previous_validation: Vec::new(),
        })
    }

    /// An ensemble seeded with an existing head.
    pub fn with_head(cfg: EnsembleConfig, learner: LearnerConfig, head: ModelHead) -> Result<Self> {
        cfg.validate()?;
        learner.validate()?;
        let next_id = head.id + 1;
        Ok(Self {
            cfg,
            learner,
            heads: vec![head],
            next_id,
            previous_validation: Vec::new(),
        })
    }

    pub fn head(&self, id: u32) -> Option<&ModelHead> {
        self.heads.iter().find(|h| h.id == id)
    }

    pub fn head_mut(&mut self, id: u32) -> Option<&mut ModelHead> {
        self.heads.iter_mut().find(|h| h.id == id)
    }

    /// Validation set: the last two frames kept from the previous buffer
    /// and the last two incoming ones (all incoming when there is no
    /// previous buffer).
    pub fn validation_mix(&self, incoming: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (p, i) = mix_ranges(self.previous_validation.len(), incoming.len());
        let mut v = self.previous_validation[p].to_vec();
        v.extend(incoming[i].iter().cloned());
        v
    }

    /// Picks (or spawns) the head to train on the incoming buffer, whose
    /// validation-frame embeddings are `incoming`.
    pub fn select_training_head(&mut self, incoming: &[Vec<f64>], now: f64) -> Selection {
        if !self.cfg.model_selection {
            let id = self.heads[0].id;
            self.remember_validation(incoming);
            return Selection {
                head: id,
                spawned: false,
                evicted: None,
            };
        }
        let queries = self.validation_mix(incoming);
        self.remember_validation(incoming);
        let never_trained = self.heads.iter().all(|h| h.history.is_empty());
        let (best, dist) = self.nearest(&queries, self.cfg.set_distance);
        if never_trained || dist <= self.cfg.cd_new {
            return Selection {
                head: self.heads[best].id,
                spawned: false,
                evicted: None,
            };
        }
        let parent = self.heads[best].clone();
        let evicted = if self.heads.len() >= self.cfg.max_heads {
            let lru = lru_index(&self.heads);
            Some(self.heads.remove(lru).id)
        } else {
            None
        };
        let id = self.next_id;
        self.next_id += 1;
        self.heads.push(parent.spawn_from(id, now));
        Selection {
            head: id,
            spawned: true,
            evicted,
        }
    }

    /// Forgets the previous buffer's validation frames, so the next
    /// selection looks at incoming frames only.
    pub fn reset_validation(&mut self) {
        self.previous_validation.clear();
    }

    fn remember_validation(&mut self, incoming: &[Vec<f64>]) {
        self.previous_validation = incoming.to_vec();
    }

    /// Index and distance of the head nearest to `queries` (first wins
    /// ties; index 0 with `inf` when no head has history).
    fn nearest(&self, queries: &[Vec<f64>], mode: SetDistance) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, h) in self.heads.iter().enumerate() {
            let d = head_to_frames_distance(h, queries, mode);
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Recomputes a head's usability flag at `now`.
    pub fn update_usability(&mut self, id: u32, now: f64) -> bool {
        let cfg = self.cfg;
        let Some(h) = self.head_mut(id) else {
            return false;
        };
        h.usable = usable(h, now, cfg.usable_window, cfg.l_usable);
        h.usable
    }

    /// Chooses the prediction source for a frame from the recent window.
    pub fn select_inference_source(&self, recent: &[Vec<f64>], now: f64) -> InferenceDecision {
        if !self.cfg.model_selection {
            let h = &self.heads[0];
            let d = head_to_frames_distance(h, recent, self.cfg.inference_distance);
            return InferenceDecision {
                timestamp: now,
                source: Source::Head(h.id),
                distance: d,
                nearest: Some(h.id),
                reason: Reason::SimilarAndUsable,
            };
        }
        let (i, d) = self.nearest(recent, self.cfg.inference_distance);
        let h = &self.heads[i];
        let nearest = d.is_finite().then_some(h.id);
        let (source, reason) = if !(d <= self.cfg.cd_lidar) {
            (Source::Lidar, Reason::Dissimilar)
        } else if !h.usable {
            (Source::Lidar, Reason::NotUsable)
        } else {
            (Source::Head(h.id), Reason::SimilarAndUsable)
        };
        InferenceDecision {
            timestamp: now,
            source,
            distance: d,
            nearest,
            reason,
        }
    }
}

/// Index ranges of the previous and incoming validation frames that make
/// up the validation mix.
pub fn mix_ranges(previous: usize, incoming: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let prev = previous.min(2);
    let take = if prev == 0 { incoming } else { incoming.min(4 - prev) };
    (previous - prev..previous, incoming - take..incoming)
}

/// Mean validation loss over `[now − window, now]` below `threshold`.
pub fn usable(head: &ModelHead, now: f64, window: f64, threshold: f64) -> bool {
    let (sum, n) = head
        .losses
        .iter()
        .filter(|(t, _)| *t >= now - window - 1e-9 && *t <= now + 1e-9)
        .fold((0.0, 0usize), |(s, n), (_, l)| (s + l, n + 1));
    n > 0 && sum / (n as f64) < threshold
}

/// Index of the least recently trained head (lowest id on ties).
pub fn lru_index(heads: &[ModelHead]) -> usize {
    let mut best = 0;
    for (i, h) in heads.iter().enumerate().skip(1) {
        let b = &heads[best];
        if h.last_used < b.last_used || (h.last_used == b.last_used && h.id < b.id) {
            best = i;
        }
    }
    best
}

/// Writes decisions as tab-separated lines:
/// `timestamp  source  distance  reason  nearest`.
pub fn write_decision_log(path: &Path, decisions: &[InferenceDecision]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| Error::io(path, e);
    writeln!(w, "# timestamp\tsource\tdistance\treason\tnearest").map_err(io)?;
    for d in decisions {
        let nearest = d.nearest.map_or("-".to_string(), |n| n.to_string());
        writeln!(w, "{:.6}\t{}\t{:.6}\t{}\t{}", d.timestamp, d.source, d.distance, d.reason, nearest).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_decision_log(path: &Path) -> Result<Vec<InferenceDecision>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format("decision log", path, format!("line {}", n + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad());
        }
        let source = match cols[1] {
            "lidar" => Source::Lidar,
            s => Source::Head(s.strip_prefix("head:").and_then(|v| v.parse().ok()).ok_or_else(bad)?),
        };
        let reason = match cols[3] {
            "similar-and-usable" => Reason::SimilarAndUsable,
            "dissimilar" => Reason::Dissimilar,
            "not-usable" => Reason::NotUsable,
            _ => return Err(bad()),
        };
        out.push(InferenceDecision {
            timestamp: cols[0].parse().map_err(|_| bad())?,
            source,
            distance: cols[2].parse().map_err(|_| bad())?,
            reason,
            nearest: if cols[4] == "-" {
                None
            } else {
                Some(cols[4].parse().map_err(|_| bad())?)
            },
        });
    }
    Ok(out)
}
