//! Simulated-clock orchestration of the whole system.
//!
//! A [`Runner`] consumes sensor ticks and drives, per tick: labeling
//! (delayed near-to-far pairs), buffer assembly at fixed multiples of the
//! buffer period, head selection and training, per-frame inference source
//! decisions, and evaluation of four methods on the same inputs:
//!
//! * `alter`: model selection with LiDAR fallback,
//! * `alter-no-ms`: one head, always trained and always serving,
//! * `non-adaptive`: the initial head, frozen,
//! * `lidar-only`: past scans, labeled and raycast, gaps filled.
//!
//! Everything is a function of the configuration and seeds; wall-clock
//! timings go to a separate file so reports stay byte-identical.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{GrayImage, Luma};
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Scenario};
use crate::encoder::{EncodedFrame, Encoder};
use crate::ensemble::{mix_ranges, write_decision_log, Ensemble, EnsembleConfig, InferenceDecision, Reason, SetDistance, Source};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::labeling::{build_labeled_map, top_half_rows, write_pair, LabelScheduler, TrainingPair};
use crate::learner::{class_weights, patch_targets, train_head, ModelHead, PatchTarget, Sample};
use crate::metrics::{
    classify, confusion, discretize, fill_lidar_gaps, iou_from_confusion, region_masks, ClassMask, CostClass, CostImage,
    IoUReport,
};
use crate::par::Execution;
use crate::raycast::raycast_rows;
use crate::sequence::{read_meta, read_truth, write_truth, Prefetch, ReplaySource, SegmentPlan, SensorSource, SequencePlan, SimSource, Truth};
use crate::sim::Palette;
use crate::voxel::PointCloudScan;

pub const REPORT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Alter,
    AlterNoMs,
    NonAdaptive,
    LidarOnly,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Alter, Method::AlterNoMs, Method::NonAdaptive, Method::LidarOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::Alter => "alter",
            Method::AlterNoMs => "alter-no-ms",
            Method::NonAdaptive => "non-adaptive",
            Method::LidarOnly => "lidar-only",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Named `[start, end)` interval of global time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalWindow {
    pub name: String,
    pub start: f64,
    pub end: f64,
}

impl EvalWindow {
    fn new(name: impl Into<String>, start: f64, end: f64) -> Self {
        Self {
            name: name.into(),
            start,
            end,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

/// Region names used in reports.
pub const REGION_BEYOND: &str = "beyond";
pub const REGION_TOP_HALF: &str = "top-half";
pub const REGION_BAND: &str = "band";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    /// `None` when the region had no ground-truth pixels.
    pub beyond: Option<IoUReport>,
    pub top_half: Option<IoUReport>,
    pub band: Option<IoUReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub window: EvalWindow,
    pub eval_frames: usize,
    pub camera_frames: usize,
    /// Camera frames in the window whose ALTER source was LiDAR.
    pub lidar_frames: usize,
    pub methods: Vec<MethodMetrics>,
}

impl WindowMetrics {
    pub fn method(&self, m: Method) -> &MethodMetrics {
        self.methods.iter().find(|x| x.method == m).expect("all methods reported")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelinePoint {
    pub timestamp: f64,
    pub source: String,
    /// ALTER per-frame mIoU over the beyond region.
    pub alter_miou: Option<f64>,
    pub lidar_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub time: f64,
    pub method: Method,
    pub head: u32,
    pub spawned: bool,
    pub evicted: Option<u32>,
    pub pairs: usize,
    pub newest_label_ready: f64,
    /// When the trained snapshot becomes visible to inference.
    pub published: f64,
    pub loss_before: f64,
    pub val_loss: f64,
    pub usable: bool,
}

/// Checks made while running: pairs are consumed only once their labels
/// are ready, and inference never reads a snapshot published after the
/// decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CausalityAudit {
    pub pairs_consumed: usize,
    pub decisions: usize,
    /// Simulated times at which buffers closed.
    pub boundaries: Vec<f64>,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LabelStats {
    pub pairs: usize,
    pub dropped: u64,
    /// Pairs pending or waiting for a buffer when a segment changed.
    pub discarded_at_segment_change: usize,
    pub max_depth: f64,
    pub mean_depth_of_max: f64,
    pub mean_valid_pixels: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: u32,
    pub crate_version: String,
    pub scenario: Scenario,
    pub seed: u64,
    pub windows: Vec<WindowMetrics>,
    pub timeline: Vec<TimelinePoint>,
    pub cycles: Vec<CycleRecord>,
    pub labels: LabelStats,
    pub audit: CausalityAudit,
    pub final_heads: Vec<u32>,
    pub config: RunConfig,
}

impl MetricsReport {
    pub fn window(&self, name: &str) -> Option<&WindowMetrics> {
        self.windows.iter().find(|w| w.window.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Wall-clock seconds per stage. Kept out of [`MetricsReport`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimings {
    pub sensors: f64,
    pub encode: f64,
    pub labeling: f64,
    pub training: f64,
    pub lidar_only: f64,
    pub inference: f64,
    pub metrics: f64,
    pub output: f64,
}

/// What a run does with its stream.
#[derive(Debug, Clone)]
pub struct Protocol {
    /// Training happens at buffer boundaries `B <= learn_until`.
    pub learn_until: f64,
    pub windows: Vec<EvalWindow>,
    /// Range band for the per-class long-range comparison, meters.
    pub band: (f64, f64),
}

fn opposite(p: Palette) -> Palette {
    match p {
        Palette::Forest => Palette::Hill,
        Palette::Hill => Palette::Forest,
    }
}

fn single_segment_plan(cfg: &RunConfig, palette: Palette, seed: u64, duration: f64, view_drop: Option<(f64, f64)>) -> SequencePlan {
    let length = cfg.start_offset + cfg.speed * duration + 50.0;
    SequencePlan {
        segments: vec![SegmentPlan {
            scene: cfg.scene.params(palette, seed, length),
            start: 0.0,
            duration,
        }],
        view_drop,
        speed: cfg.speed,
        start_offset: cfg.start_offset,
        camera: cfg.camera,
        lidar: cfg.lidar.clone(),
        truth_stride: cfg.eval_stride as u32,
    }
}

/// Sensor plan for one seed of a scenario.
pub fn plan_for(cfg: &RunConfig, scenario: Scenario, seed: u64) -> Result<SequencePlan> {
    match scenario {
        Scenario::AdaptNewEnv => Ok(single_segment_plan(cfg, cfg.palette, seed, cfg.sequence_length, None)),
        Scenario::ViewDrop => Ok(single_segment_plan(
            cfg,
            cfg.palette,
            seed,
            cfg.sequence_length,
            Some((cfg.view_drop.start, cfg.view_drop.end)),
        )),
        Scenario::MultiDomain => {
            let mut start = 0.0;
            let mut segments = Vec::new();
            for s in &cfg.segments {
                let length = cfg.start_offset + cfg.speed * s.duration + 50.0;
                segments.push(SegmentPlan {
                    scene: cfg.scene.params(s.palette, seed.wrapping_add(s.seed_offset), length),
                    start,
                    duration: s.duration,
                });
                start += s.duration;
            }
            Ok(SequencePlan {
                segments,
                view_drop: None,
                speed: cfg.speed,
                start_offset: cfg.start_offset,
                camera: cfg.camera,
                lidar: cfg.lidar.clone(),
                truth_stride: cfg.eval_stride as u32,
            })
        }
        Scenario::Replay => Err(Error::InvalidConfig("replay streams come from disk".into())),
    }
}

/// Learning horizon and evaluation windows of a scenario over `plan`.
pub fn protocol_for(cfg: &RunConfig, scenario: Scenario, plan: &SequencePlan) -> Protocol {
    let band = (40.0, 80.0);
    let total = plan.duration();
    match scenario {
        Scenario::AdaptNewEnv | Scenario::Replay => Protocol {
            learn_until: cfg.train_duration,
            windows: vec![EvalWindow::new("eval", cfg.train_duration, total)],
            band,
        },
        Scenario::ViewDrop => {
            let (a, b) = plan.view_drop.unwrap_or((cfg.view_drop.start, cfg.view_drop.end));
            Protocol {
                learn_until: total,
                windows: vec![
                    EvalWindow::new("all", 0.0, total),
                    EvalWindow::new("before-drop", 0.0, a),
                    EvalWindow::new("dropout", a, b),
                    EvalWindow::new("dropout-settled", (a + cfg.buffer_period).min(b), b),
                    EvalWindow::new("after-drop", b, total),
                ],
                band,
            }
        }
        Scenario::MultiDomain => {
            let mut windows = vec![EvalWindow::new("all", 0.0, total)];
            let mut seen: Vec<Palette> = Vec::new();
            for (i, s) in plan.segments.iter().enumerate() {
                let p = s.scene.palette;
                let tag = match p {
                    Palette::Forest => "forest",
                    Palette::Hill => "hill",
                };
                windows.push(EvalWindow::new(format!("seg{i}-{tag}"), s.start, s.start + s.duration));
                let f = cfg.revisit_window.min(s.duration);
                windows.push(EvalWindow::new(format!("seg{i}-{tag}-f{}", f.round() as i64), s.start, s.start + f));
                if seen.contains(&p) {
                    windows.push(EvalWindow::new("revisit-first", s.start, s.start + f));
                }
                seen.push(p);
            }
            Protocol {
                learn_until: total,
                windows,
                band,
            }
        }
    }
}

/// A labeled frame waiting for the next buffer.
#[derive(Clone)]
struct ReadyPair {
    frame: EncodedFrame,
    costs: Vec<Option<f32>>,
    label_ready: f64,
}

struct Accum {
    /// `[method][region]` confusion counts; regions are beyond, top half, band.
    conf: [[[[u64; 4]; 4]; 3]; 4],
    eval_frames: usize,
    camera_frames: usize,
    lidar_frames: usize,
}

impl Default for Accum {
    fn default() -> Self {
        Self {
            conf: [[[[0; 4]; 4]; 3]; 4],
            eval_frames: 0,
            camera_frames: 0,
            lidar_frames: 0,
        }
    }
}

/// Options for how a runner treats its stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    /// Labels and trains one head; no inference or evaluation.
    Pretrain,
    Evaluate,
}

/// Event-driven pipeline state for one run.
pub struct Runner<'a> {
    cfg: &'a RunConfig,
    protocol: Protocol,
    mode: Mode,
    exec: Execution,
    encoder: Encoder,
    scheduler: LabelScheduler,
    scans: VecDeque<PointCloudScan>,
    pending: FxHashMap<u32, (EncodedFrame, Option<image::RgbImage>)>,
    ready: Vec<ReadyPair>,
    /// Validation frames of the previous buffer.
    previous_val: Vec<ReadyPair>,
    /// Index `k` of the next buffer boundary `k · buffer_period`.
    next_boundary: u64,
    /// Ensembles being trained, and the snapshots inference reads. A cycle
    /// started at boundary `B` publishes at the next boundary.
    alter: Ensemble,
    no_ms: Ensemble,
    alter_live: Ensemble,
    no_ms_live: Ensemble,
    /// Boundary at which the live snapshots were published.
    live_since: f64,
    frozen: ModelHead,
    audit: CausalityAudit,
    recent: VecDeque<Vec<f64>>,
    pub decisions: Vec<InferenceDecision>,
    accum: Vec<Accum>,
    timeline: Vec<TimelinePoint>,
    cycles: Vec<CycleRecord>,
    labels: LabelStats,
    depth_sum: f64,
    valid_sum: f64,
    eval_count: usize,
    out: Option<PathBuf>,
    frames_log: String,
    pub timings: StageTimings,
    pairs_saved: usize,
}

fn stage<T>(r: Result<T>, name: &'static str) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a RunConfig, protocol: Protocol, mode: Mode, initial: Option<ModelHead>, out: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let exec = cfg.execution();
        let encoder = Encoder::new(cfg.encoder)?;
        let dim = cfg.encoder.features;
        let scheduler = LabelScheduler::new(cfg.label, cfg.terrain, cfg.map, cfg.camera.intrinsics, exec)?;
        let head = initial.unwrap_or_else(|| ModelHead::new(0, dim, &cfg.learner, 0.0));
        let alter = Ensemble::with_head(cfg.ensemble, cfg.learner, head.clone())?;
        let no_ms = Ensemble::with_head(
            EnsembleConfig {
                model_selection: false,
                ..cfg.ensemble
            },
            cfg.learner,
            head.clone(),
        )?;
        if let Some(dir) = &out {
            for sub in ["predictions", "truth", "dumps", "pairs", "heads"] {
                std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
            }
            for m in Method::ALL {
                let d = dir.join("predictions").join(m.name());
                std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
            }
        }
        let n_windows = protocol.windows.len();
        let (alter_live, no_ms_live) = (alter.clone(), no_ms.clone());
        Ok(Self {
            cfg,
            protocol,
            mode,
            exec,
            encoder,
            scheduler,
            scans: VecDeque::new(),
            pending: FxHashMap::default(),
            ready: Vec::new(),
            previous_val: Vec::new(),
            next_boundary: 1,
            alter,
            no_ms,
            alter_live,
            no_ms_live,
            live_since: 0.0,
            frozen: head,
            audit: CausalityAudit::default(),
            recent: VecDeque::new(),
            decisions: Vec::new(),
            accum: (0..n_windows).map(|_| Accum::default()).collect(),
            timeline: Vec::new(),
            cycles: Vec::new(),
            labels: LabelStats::default(),
            depth_sum: 0.0,
            valid_sum: 0.0,
            eval_count: 0,
            out,
            frames_log: String::from("# frame\ttimestamp\tsource\twindows\n"),
            timings: StageTimings::default(),
            pairs_saved: 0,
        })
    }

    fn run(&mut self, source: &mut dyn SensorSource) -> Result<()> {
        loop {
            let t0 = Instant::now();
            let tick = stage(source.next_tick(), "sensors")?;
            self.timings.sensors += secs(t0);
            let Some(tick) = tick else { break };
            if let Some(seg) = tick.segment {
                if seg.index > 0 {
                    self.change_segment()?;
                }
            }
            self.scheduler.push_pose(tick.pose);
            if let Some(scan) = tick.scan {
                if self.mode == Mode::Evaluate {
                    self.scans.push_back(scan.clone());
                    while self.scans.front().is_some_and(|s| s.timestamp < tick.time - self.cfg.lidar_window - 1e-9) {
                        self.scans.pop_front();
                    }
                }
                self.scheduler.push_scan(scan);
            }
            self.poll_labels(tick.time)?;
            while tick.time + 1e-9 >= self.next_boundary as f64 * self.cfg.buffer_period {
                self.training_cycle(self.next_boundary as f64 * self.cfg.buffer_period)?;
                self.next_boundary += 1;
            }
            if let Some(frame) = tick.frame {
                self.on_frame(frame, &tick.pose, tick.time)?;
            }
        }
        self.labels.dropped += self.scheduler.dropped();
        Ok(())
    }

    fn change_segment(&mut self) -> Result<()> {
        self.labels.discarded_at_segment_change += self.scheduler.pending() + self.ready.len();
        self.ready.clear();
        self.labels.dropped += self.scheduler.dropped();
        self.scheduler = LabelScheduler::new(self.cfg.label, self.cfg.terrain, self.cfg.map, self.cfg.camera.intrinsics, self.exec)?;
        self.scans.clear();
        self.pending.clear();
        self.previous_val.clear();
        self.alter.reset_validation();
        self.no_ms.reset_validation();
        Ok(())
    }

    fn poll_labels(&mut self, now: f64) -> Result<()> {
        let t0 = Instant::now();
        let pairs = stage(self.scheduler.poll(now), "labeling")?;
        for p in pairs {
            self.accept_pair(p)?;
        }
        self.timings.labeling += secs(t0);
        Ok(())
    }

    fn accept_pair(&mut self, p: TrainingPair) -> Result<()> {
        let Some((frame, image)) = self.pending.remove(&p.frame_id) else {
            return Err(Error::InvalidInput(format!("no encoded frame for pair {}", p.frame_id)).in_stage("labeling"));
        };
        self.labels.pairs += 1;
        self.labels.max_depth = self.labels.max_depth.max(p.mask.max_depth);
        self.depth_sum += p.mask.max_depth;
        self.valid_sum += p.mask.valid_count() as f64;
        if let (Some(dir), Some(img)) = (&self.out, &image) {
            let t0 = Instant::now();
            stage(write_pair(&dir.join("pairs"), &format!("{:06}", p.frame_id), img, &p), "output")?;
            self.pairs_saved += 1;
            self.timings.output += secs(t0);
        }
        self.ready.push(ReadyPair {
            frame,
            costs: p.mask.costs,
            label_ready: p.label_ready,
        });
        Ok(())
    }

    fn training_cycle(&mut self, boundary: f64) -> Result<()> {
        let t0 = Instant::now();
        self.alter_live = self.alter.clone();
        self.no_ms_live = self.no_ms.clone();
        self.live_since = boundary;
        self.audit.boundaries.push(boundary);
        let mut pairs: Vec<ReadyPair> = Vec::new();
        let mut keep = Vec::new();
        for p in self.ready.drain(..) {
            if p.label_ready <= boundary + 1e-9 {
                pairs.push(p);
            } else {
                keep.push(p);
            }
        }
        self.ready = keep;
        let learning = self.cfg.learner_enabled && boundary <= self.protocol.learn_until + 1e-9;
        if !learning || pairs.len() < 2 {
            return Ok(());
        }
        pairs.sort_by(|a, b| a.label_ready.total_cmp(&b.label_ready));
        for p in &pairs {
            self.audit.pairs_consumed += 1;
            if p.label_ready > boundary || p.label_ready < p.frame.timestamp + self.cfg.label.delay - 1e-9 {
                self.audit.violations.push(format!(
                    "pair from {} ready {} consumed at {boundary}",
                    p.frame.timestamp, p.label_ready
                ));
            }
        }
        let n = pairs.len();
        let per = self.cfg.buffer_train + self.cfg.buffer_validation;
        let n_val = ((n * self.cfg.buffer_validation) as f64 / per as f64).round().clamp(1.0, (n - 1) as f64) as usize;
        let val_idx: Vec<usize> = (0..n_val).map(|j| ((2 * j + 1) * n) / (2 * n_val)).collect();
        let (train_pairs, incoming_val): (Vec<&ReadyPair>, Vec<&ReadyPair>) = {
            let (mut t, mut v) = (Vec::new(), Vec::new());
            for (i, p) in pairs.iter().enumerate() {
                if val_idx.contains(&i) {
                    v.push(p);
                } else {
                    t.push(p);
                }
            }
            (t, v)
        };
        let (pr, ir) = mix_ranges(self.previous_val.len(), incoming_val.len());
        let val_pairs: Vec<&ReadyPair> = self.previous_val[pr].iter().chain(incoming_val[ir].iter().copied()).collect();
        let weights = match class_weights(pairs.iter().map(|p| p.costs.as_slice())) {
            Ok(w) => w,
            Err(_) => return Ok(()),
        };
        let width = self.cfg.camera.intrinsics.width;
        let targets = |ps: &[&ReadyPair]| -> Vec<Vec<_>> {
            ps.iter()
                .map(|p| patch_targets(&p.costs, width, self.cfg.encoder.patch, &weights))
                .collect()
        };
        let (train_t, val_t) = (targets(&train_pairs), targets(&val_pairs));
        let train = samples(&train_pairs, &train_t);
        let val = samples(&val_pairs, &val_t);
        let val_emb: Vec<Vec<f64>> = incoming_val.iter().map(|p| p.frame.embedding.clone()).collect();
        let newest = pairs.last().map_or(boundary, |p| p.label_ready);
        let methods: &[Method] = match self.mode {
            Mode::Pretrain => &[Method::AlterNoMs],
            Mode::Evaluate => &[Method::Alter, Method::AlterNoMs],
        };
        for &m in methods {
            let ens = if m == Method::Alter { &mut self.alter } else { &mut self.no_ms };
            let sel = ens.select_training_head(&val_emb, boundary);
            let cfg = ens.learner;
            let head = ens.head_mut(sel.head).expect("selected head exists");
            let outcome = stage(train_head(head, &train, &val, &cfg, boundary), "training")?;
            let usable = ens.update_usability(sel.head, boundary);
            self.cycles.push(CycleRecord {
                time: boundary,
                method: m,
                head: sel.head,
                spawned: sel.spawned,
                evicted: sel.evicted,
                pairs: n,
                newest_label_ready: newest,
                published: boundary + self.cfg.buffer_period,
                loss_before: outcome.loss_before,
                val_loss: outcome.val_loss,
                usable,
            });
        }
        self.previous_val = incoming_val.into_iter().cloned().collect();
        self.timings.training += secs(t0);
        Ok(())
    }

    fn on_frame(&mut self, frame: crate::sequence::FrameEvent, vehicle: &Pose, t: f64) -> Result<()> {
        let t0 = Instant::now();
        let enc = stage(self.encoder.encode_with(&frame.image, t, self.exec), "encoding")?;
        self.timings.encode += secs(t0);
        let selected = self.scheduler.push_image(frame.id, *vehicle, &self.cfg.camera.mount);
        if selected {
            let img = self.cfg.output.save_pairs.then(|| frame.image.clone());
            self.pending.insert(frame.id, (enc.clone(), img));
        }
        if self.mode == Mode::Pretrain {
            return Ok(());
        }
        self.recent.push_back(enc.embedding.clone());
        while self.recent.len() > self.cfg.ensemble.recent_frames {
            self.recent.pop_front();
        }
        let recent: Vec<Vec<f64>> = self.recent.iter().cloned().collect();
        let decision = if self.cfg.learner_enabled {
            self.alter_live.select_inference_source(&recent, t)
        } else {
            InferenceDecision {
                timestamp: t,
                source: Source::Lidar,
                distance: f64::INFINITY,
                nearest: None,
                reason: Reason::NotUsable,
            }
        };
        self.decisions.push(decision);
        self.audit.decisions += 1;
        if self.live_since > t {
            self.audit
                .violations
                .push(format!("decision at {t} reads a snapshot from {}", self.live_since));
        }
        let in_windows: Vec<usize> = (0..self.protocol.windows.len())
            .filter(|&i| self.protocol.windows[i].contains(t))
            .collect();
        for &w in &in_windows {
            self.accum[w].camera_frames += 1;
            if decision.source == Source::Lidar {
                self.accum[w].lidar_frames += 1;
            }
        }
        let eval = !in_windows.is_empty() && frame.id as usize % self.cfg.eval_stride == 0;
        let Some(truth) = frame.truth.filter(|_| eval) else {
            return Ok(());
        };
        self.evaluate(frame.id, &frame.image, &truth, &enc, vehicle, decision, &in_windows)
    }

    fn lidar_only(&self, vehicle: &Pose) -> Result<CostImage> {
        let intr = &self.cfg.camera.intrinsics;
        let mut img = CostImage::empty(intr.width, intr.height);
        if self.scans.is_empty() {
            return Ok(img);
        }
        let scans: Vec<&PointCloudScan> = self.scans.iter().collect();
        let map = build_labeled_map(&scans, vehicle, &self.cfg.map, &self.cfg.terrain, self.exec)?;
        let camera = vehicle.compose(&self.cfg.camera.mount);
        let hits = raycast_rows(&map, &camera, intr, self.cfg.label.max_range, top_half_rows(intr.height), self.exec);
        for (c, h) in img.costs.iter_mut().zip(&hits.hits) {
            *c = h.as_ref().and_then(|h| h.cost);
        }
        Ok(fill_lidar_gaps(&img))
    }

    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &mut self,
        id: u32,
        image: &image::RgbImage,
        truth: &Truth,
        enc: &EncodedFrame,
        vehicle: &Pose,
        decision: InferenceDecision,
        windows: &[usize],
    ) -> Result<()> {
        let t = decision.timestamp;
        let t0 = Instant::now();
        let lidar = stage(self.lidar_only(vehicle), "lidar-only")?;
        self.timings.lidar_only += secs(t0);
        let t0 = Instant::now();
        let (w, h) = (truth.width, truth.height);
        let alter = match decision.source {
            Source::Head(id) => self.alter_live.head(id).expect("decided head exists").predict(enc, w, h),
            Source::Lidar => lidar.clone(),
        };
        let no_ms = self.no_ms_live.heads[0].predict(enc, w, h);
        let frozen = self.frozen.predict(enc, w, h);
        self.timings.inference += secs(t0);
        let t0 = Instant::now();
        let preds = [alter, no_ms, frozen, lidar];
        let classes: Vec<ClassMask> = preds.iter().map(discretize).collect();
        let gt = ClassMask {
            width: w,
            height: h,
            classes: truth.classes.clone(),
        };
        let sky = truth.sky();
        let refs: Vec<&CostImage> = preds.iter().collect();
        let regions = region_masks(w, h, &truth.range, &sky, &refs, self.cfg.near_range);
        let (lo, hi) = self.protocol.band;
        let band: Vec<bool> = regions
            .beyond
            .iter()
            .zip(&truth.range)
            .map(|(b, r)| *b && (*r as f64) >= lo && (*r as f64) < hi)
            .collect();
        let masks = [&regions.beyond, &regions.top_half, &band];
        let mut per_frame = [None, None];
        for (m, pred) in classes.iter().enumerate() {
            for (r, mask) in masks.iter().enumerate() {
                let c = confusion(pred, &gt, mask);
                for &wi in windows {
                    add_conf(&mut self.accum[wi].conf[m][r], &c);
                }
                if r == 0 && (m == Method::Alter.index() || m == Method::LidarOnly.index()) {
                    let slot = if m == Method::Alter.index() { 0 } else { 1 };
                    per_frame[slot] = iou_from_confusion(&c, REGION_BEYOND).ok().map(|x| x.miou);
                }
            }
        }
        for &wi in windows {
            self.accum[wi].eval_frames += 1;
        }
        self.timeline.push(TimelinePoint {
            timestamp: t,
            source: decision.source.to_string(),
            alter_miou: per_frame[0],
            lidar_miou: per_frame[1],
        });
        self.timings.metrics += secs(t0);
        let names: Vec<&str> = windows.iter().map(|&i| self.protocol.windows[i].name.as_str()).collect();
        self.frames_log
            .push_str(&format!("{id}\t{t}\t{}\t{}\n", decision.source, names.join(",")));
        if let Some(dir) = self.out.clone() {
            let t0 = Instant::now();
            let name = format!("{id:06}");
            stage(write_truth(&dir.join("truth").join(format!("{name}.gt")), truth), "output")?;
            for (m, c) in Method::ALL.iter().zip(&classes) {
                let p = dir.join("predictions").join(m.name()).join(format!("{name}.png"));
                stage(write_class_png(&p, c), "output")?;
            }
            let every = self.cfg.output.dump_every;
            if every > 0 && self.eval_count % every == 0 {
                let d = dir.join("dumps");
                stage(image.save(d.join(format!("{name}-image.png"))).map_err(Error::from), "output")?;
                for (m, p) in Method::ALL.iter().zip(&preds) {
                    stage(write_cost_image_png(&d.join(format!("{name}-{}.png", m.name())), p), "output")?;
                }
                let gt_costs = CostImage {
                    width: w,
                    height: h,
                    costs: truth.classes.iter().map(class_center).collect(),
                };
                stage(write_cost_image_png(&d.join(format!("{name}-truth.png")), &gt_costs), "output")?;
            }
            self.timings.output += secs(t0);
        }
        self.eval_count += 1;
        Ok(())
    }

    fn finish(self, scenario: Scenario, seed: u64) -> Result<(MetricsReport, StageTimings, Vec<ModelHead>)> {
        let t0 = Instant::now();
        let windows = self
            .protocol
            .windows
            .iter()
            .zip(&self.accum)
            .map(|(w, a)| window_metrics(w.clone(), a))
            .collect();
        let mut labels = self.labels.clone();
        if labels.pairs > 0 {
            labels.mean_depth_of_max = self.depth_sum / labels.pairs as f64;
            labels.mean_valid_pixels = self.valid_sum / labels.pairs as f64;
        }
        let report = MetricsReport {
            schema: REPORT_SCHEMA,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario,
            seed,
            windows,
            timeline: self.timeline,
            cycles: self.cycles,
            labels,
            audit: self.audit,
            final_heads: self.alter.heads.iter().map(|h| h.id).collect(),
            config: self.cfg.clone(),
        };
        let mut timings = self.timings;
        if let Some(dir) = &self.out {
            let p = dir.join("decisions.tsv");
            stage(write_decision_log(&p, &self.decisions), "output")?;
            write_text(&dir.join("frames.tsv"), &self.frames_log)?;
            write_text(&dir.join("report.json"), &report.to_json()?)?;
            for h in &self.alter.heads {
                stage(crate::learner::write_head(&dir.join("heads").join(format!("alter-{}.nfhd", h.id)), h), "output")?;
            }
            timings.output += secs(t0);
            write_text(&dir.join("timings.json"), &serde_json::to_string_pretty(&timings)?)?;
        }
        let heads = match self.mode {
            Mode::Pretrain => self.no_ms.heads,
            Mode::Evaluate => self.alter.heads,
        };
        Ok((report, timings, heads))
    }
}

fn samples<'a>(pairs: &[&'a ReadyPair], targets: &'a [Vec<PatchTarget>]) -> Vec<Sample<'a>> {
    pairs
        .iter()
        .zip(targets)
        .map(|(p, t)| Sample {
            frame: &p.frame,
            targets: t,
        })
        .collect()
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

fn add_conf(acc: &mut [[u64; 4]; 4], c: &[[u64; 4]; 4]) {
    for g in 0..4 {
        for p in 0..4 {
            acc[g][p] += c[g][p];
        }
    }
}

fn class_center(c: &CostClass) -> Option<f32> {
    match c {
        CostClass::Low => Some(1.0),
        CostClass::Medium => Some(5.0),
        CostClass::High => Some(10.0),
        CostClass::Unknown => None,
    }
}

fn window_metrics(window: EvalWindow, a: &Accum) -> WindowMetrics {
    let methods = Method::ALL
        .iter()
        .map(|&m| {
            let c = &a.conf[m.index()];
            MethodMetrics {
                method: m,
                beyond: iou_from_confusion(&c[0], REGION_BEYOND).ok(),
                top_half: iou_from_confusion(&c[1], REGION_TOP_HALF).ok(),
                band: iou_from_confusion(&c[2], REGION_BAND).ok(),
            }
        })
        .collect();
    WindowMetrics {
        window,
        eval_frames: a.eval_frames,
        camera_frames: a.camera_frames,
        lidar_frames: a.lidar_frames,
        methods,
    }
}

/// Class indices as 8-bit gray (0 low, 1 medium, 2 high, 3 unknown).
pub fn write_class_png(path: &Path, m: &ClassMask) -> Result<()> {
    let img = GrayImage::from_fn(m.width, m.height, |x, y| {
        Luma([m.classes[(y * m.width + x) as usize].index() as u8])
    });
    img.save(path)?;
    Ok(())
}

pub fn read_class_png(path: &Path) -> Result<ClassMask> {
    let img = image::open(path)?.to_luma8();
    let classes = img
        .pixels()
        .map(|p| match p.0[0] {
            0 => Ok(CostClass::Low),
            1 => Ok(CostClass::Medium),
            2 => Ok(CostClass::High),
            3 => Ok(CostClass::Unknown),
            v => Err(Error::format("class image", path, format!("class {v}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassMask {
        width: img.width(),
        height: img.height(),
        classes,
    })
}

/// Cost image as gray: cost × 25, unknown as 255.
pub fn write_cost_image_png(path: &Path, c: &CostImage) -> Result<()> {
    let img = GrayImage::from_fn(c.width, c.height, |x, y| {
        Luma([c.costs[(y * c.width + x) as usize].map_or(255, |v| (v * 25.0).round().clamp(0.0, 250.0) as u8)])
    });
    img.save(path)?;
    Ok(())
}

/// Trains one head on self-labeled drives; no evaluation.
pub fn pretrain_head(cfg: &RunConfig, palette: Palette, seeds: &[u64], duration: f64) -> Result<ModelHead> {
    let mut head: Option<ModelHead> = None;
    for &seed in seeds {
        let plan = single_segment_plan(cfg, palette, seed, duration, None);
        let protocol = Protocol {
            learn_until: duration,
            windows: Vec::new(),
            band: (40.0, 80.0),
        };
        let mut runner = Runner::new(cfg, protocol, Mode::Pretrain, head.take(), None)?;
        let mut src = SimSource::new(plan, cfg.execution())?;
        runner.run(&mut src)?;
        let (_, _, heads) = runner.finish(Scenario::AdaptNewEnv, seed)?;
        head = heads.into_iter().next();
    }
    head.ok_or_else(|| Error::InvalidConfig("no pretraining seeds".into()))
}

/// The initial head for a scenario: pretrained when enabled, else fresh.
pub fn initial_head(cfg: &RunConfig, evaluated: Palette) -> Result<Option<ModelHead>> {
    if !cfg.pretrain.enabled {
        return Ok(None);
    }
    let palette = cfg.pretrain.palette.unwrap_or(opposite(evaluated));
    pretrain_head(cfg, palette, &cfg.pretrain.seeds, cfg.pretrain.duration).map(Some)
}

fn evaluated_palette(cfg: &RunConfig, plan: &SequencePlan) -> Palette {
    match cfg.scenario {
        Scenario::MultiDomain => plan.segments[0].scene.palette,
        _ => plan.segments.last().map_or(cfg.palette, |s| s.scene.palette),
    }
}

/// Runs one seed over an explicit sensor source.
pub fn run_with_source(
    cfg: &RunConfig,
    scenario: Scenario,
    seed: u64,
    source: &mut dyn SensorSource,
    initial: Option<ModelHead>,
    out: Option<PathBuf>,
) -> Result<(MetricsReport, StageTimings)> {
    let protocol = protocol_for(cfg, scenario, source.plan());
    let mut runner = Runner::new(cfg, protocol, Mode::Evaluate, initial, out)?;
    runner.run(source)?;
    let (report, timings, _) = runner.finish(scenario, seed)?;
    Ok((report, timings))
}

const PREFETCH_TICKS: usize = 64;

fn boxed<S: SensorSource + Send + 'static>(source: S, pipelined: bool) -> Box<dyn SensorSource> {
    if pipelined {
        Box::new(Prefetch::spawn(source, PREFETCH_TICKS))
    } else {
        Box::new(source)
    }
}

fn seed_dir(cfg: &RunConfig, seed: u64) -> Option<PathBuf> {
    cfg.output.dir.as_ref().map(|d| d.join(format!("seed-{seed}")))
}

/// Runs one seed of the configured scenario end to end.
pub fn run_sequence(cfg: &RunConfig, seed: u64) -> Result<MetricsReport> {
    run_sequence_with(cfg, seed, None)
}

/// As [`run_sequence`], reusing a precomputed initial head.
pub fn run_sequence_with(cfg: &RunConfig, seed: u64, initial: Option<Option<ModelHead>>) -> Result<MetricsReport> {
    cfg.validate()?;
    let (mut source, scenario): (Box<dyn SensorSource>, Scenario) = match cfg.scenario {
        Scenario::Replay => {
            let dir = cfg.replay_dir.as_ref().expect("validated");
            let meta = read_meta(dir)?;
            let scenario = meta.origin.parse().unwrap_or(Scenario::AdaptNewEnv);
            (boxed(ReplaySource::open(dir)?, cfg.pipelined), scenario)
        }
        s => (boxed(SimSource::new(plan_for(cfg, s, seed)?, cfg.execution())?, cfg.pipelined), s),
    };
    let initial = match initial {
        Some(h) => h,
        None => initial_head(cfg, evaluated_palette(cfg, source.plan()))?,
    };
    let (report, _) = run_with_source(cfg, scenario, seed, source.as_mut(), initial, seed_dir(cfg, seed))?;
    Ok(report)
}

/// Runs every configured seed; the pretrained head is shared across seeds.
pub fn run_baselines(cfg: &RunConfig) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let head = match cfg.scenario {
        Scenario::Replay => None,
        s => {
            let plan = plan_for(cfg, s, cfg.seeds[0])?;
            Some(initial_head(cfg, evaluated_palette(cfg, &plan))?)
        }
    };
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        out.push(run_sequence_with(cfg, seed, head.clone())?);
    }
    if let Some(dir) = &cfg.output.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("config.toml"), &cfg.to_toml_string()?)?;
    }
    Ok(out)
}

/// Recomputes window metrics of a run directory from its persisted
/// per-frame predictions and ground truth.
pub fn recompute_windows(run_dir: &Path) -> Result<Vec<WindowMetrics>> {
    let report_path = run_dir.join("report.json");
    let s = std::fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
    let report: MetricsReport = serde_json::from_str(&s)?;
    let frames_path = run_dir.join("frames.tsv");
    let frames = std::fs::read_to_string(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
    let decisions = crate::ensemble::read_decision_log(&run_dir.join("decisions.tsv"))?;
    let windows: Vec<EvalWindow> = report.windows.iter().map(|w| w.window.clone()).collect();
    let mut accum: Vec<Accum> = windows.iter().map(|_| Accum::default()).collect();
    for d in &decisions {
        for (w, a) in windows.iter().zip(accum.iter_mut()) {
            if w.contains(d.timestamp) {
                a.camera_frames += 1;
                if d.source == Source::Lidar {
                    a.lidar_frames += 1;
                }
            }
        }
    }
    let cfg = &report.config;
    let band = protocol_for(cfg, report.scenario, &dummy_plan(&report)).band;
    for line in frames.lines().filter(|l| !l.starts_with('#') && !l.is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        let bad = || Error::format("frames log", &frames_path, line.to_string());
        if cols.len() != 4 {
            return Err(bad());
        }
        let id: u32 = cols[0].parse().map_err(|_| bad())?;
        let name = format!("{id:06}");
        let truth = read_truth(&run_dir.join("truth").join(format!("{name}.gt")))?;
        let preds = Method::ALL
            .iter()
            .map(|m| read_class_png(&run_dir.join("predictions").join(m.name()).join(format!("{name}.png"))))
            .collect::<Result<Vec<_>>>()?;
        let known: Vec<CostImage> = preds
            .iter()
            .map(|p| CostImage {
                width: p.width,
                height: p.height,
                costs: p.classes.iter().map(class_center).collect(),
            })
            .collect();
        let refs: Vec<&CostImage> = known.iter().collect();
        let sky = truth.sky();
        let regions = region_masks(truth.width, truth.height, &truth.range, &sky, &refs, cfg.near_range);
        let bandm: Vec<bool> = regions
            .beyond
            .iter()
            .zip(&truth.range)
            .map(|(b, r)| *b && (*r as f64) >= band.0 && (*r as f64) < band.1)
            .collect();
        let gt = ClassMask {
            width: truth.width,
            height: truth.height,
            classes: truth.classes.clone(),
        };
        let names: Vec<&str> = cols[3].split(',').filter(|s| !s.is_empty()).collect();
        for (wi, w) in windows.iter().enumerate() {
            if !names.contains(&w.name.as_str()) {
                continue;
            }
            accum[wi].eval_frames += 1;
            for (m, p) in preds.iter().enumerate() {
                for (r, mask) in [&regions.beyond, &regions.top_half, &bandm].iter().enumerate() {
                    add_conf(&mut accum[wi].conf[m][r], &confusion(p, &gt, mask));
                }
            }
        }
    }
    Ok(windows.into_iter().zip(&accum).map(|(w, a)| window_metrics(w, a)).collect())
}

fn dummy_plan(report: &MetricsReport) -> SequencePlan {
    single_segment_plan(&report.config, report.config.palette, report.seed, 1.0, None)
}

/// Embedding-distance and loss statistics behind threshold choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Validation-sized sets under the selection distance.
    pub same_scene: DistanceStats,
    pub cross_scene: DistanceStats,
    /// Inference windows under the inference distance.
    pub cross_scene_window: DistanceStats,
    pub degraded: DistanceStats,
    pub trained_loss: f64,
    pub constant_loss: f64,
    pub cd_new: f64,
    pub cd_lidar: f64,
    pub l_usable: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub n: usize,
    pub min: f64,
    pub p05: f64,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
}

fn stats(mut v: Vec<f64>) -> DistanceStats {
    v.sort_by(f64::total_cmp);
    let q = |p: f64| v[((v.len() - 1) as f64 * p).round() as usize];
    DistanceStats {
        n: v.len(),
        min: v[0],
        p05: q(0.05),
        median: q(0.5),
        p95: q(0.95),
        max: v[v.len() - 1],
    }
}

/// Derives `cd_new`, `cd_lidar` and `l_usable` from simulator drives.
///
/// For each palette a head is trained on the first half of a drive. Query
/// sets of validation size come from the second half of that drive (same
/// scene) and from a drive in the other palette (cross scene); inference
/// windows come from the other palette and from blacked-out frames
/// (degraded). `cd_new` splits same from cross under the selection
/// distance, `cd_lidar` splits cross from degraded under the inference
/// distance, and `l_usable` is the geometric
/// mean of the trained heads' validation loss and the loss of heads
/// trained on degraded frames.
pub fn calibrate(cfg: &RunConfig, seed: u64, duration: f64) -> Result<Calibration> {
    let half = duration / 2.0;
    let mut learn_cfg = cfg.clone();
    learn_cfg.pretrain.enabled = false;
    let encoder = Encoder::new(cfg.encoder)?;
    let exec = cfg.execution();
    let embed_drive = |p: Palette, s: u64, drop: Option<(f64, f64)>| -> Result<Vec<(f64, Vec<f64>)>> {
        let plan = single_segment_plan(cfg, p, s, duration, drop);
        let mut src = SimSource::new(plan, exec)?;
        let mut out = Vec::new();
        while let Some(t) = src.next_tick()? {
            if let Some(f) = t.frame {
                out.push((t.time, encoder.encode_with(&f.image, t.time, exec)?.embedding));
            }
        }
        Ok(out)
    };
    let train = |p: Palette, s: u64, drop: Option<(f64, f64)>| -> Result<(f64, ModelHead)> {
        let protocol = Protocol {
            learn_until: half,
            windows: Vec::new(),
            band: (40.0, 80.0),
        };
        let mut runner = Runner::new(&learn_cfg, protocol, Mode::Pretrain, None, None)?;
        runner.run(&mut SimSource::new(single_segment_plan(cfg, p, s, half, drop), exec)?)?;
        let loss = runner.cycles.last().map_or(f64::NAN, |c| c.val_loss);
        let (_, _, heads) = runner.finish(Scenario::AdaptNewEnv, s)?;
        Ok((loss, heads.into_iter().next().expect("one head")))
    };
    let sets = |head: &ModelHead, v: &[(f64, Vec<f64>)], from: f64, k: usize, mode: SetDistance| -> Vec<f64> {
        let q: Vec<&Vec<f64>> = v.iter().filter(|(t, _)| *t >= from).map(|(_, e)| e).collect();
        q.chunks(k)
            .filter(|c| c.len() == k)
            .map(|c| {
                let c: Vec<Vec<f64>> = c.iter().map(|e| (*e).clone()).collect();
                crate::ensemble::head_to_frames_distance(head, &c, mode)
            })
            .collect()
    };
    let (val, recent) = (cfg.buffer_validation, cfg.ensemble.recent_frames);
    let (select, infer) = (cfg.ensemble.set_distance, cfg.ensemble.inference_distance);
    let palettes = [Palette::Forest, Palette::Hill];
    let drives = palettes
        .iter()
        .map(|&p| embed_drive(p, seed, None))
        .collect::<Result<Vec<_>>>()?;
    let dark = embed_drive(Palette::Hill, seed + 2, Some((0.0, duration)))?;
    let (mut same, mut cross, mut cross_live, mut degraded) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut trained, mut constant) = (Vec::new(), Vec::new());
    for (i, &p) in palettes.iter().enumerate() {
        let (loss, head) = train(p, seed, None)?;
        trained.push(loss);
        same.extend(sets(&head, &drives[i], half, val, select));
        cross.extend(sets(&head, &drives[1 - i], 0.0, val, select));
        cross_live.extend(sets(&head, &drives[1 - i], 0.0, recent, infer));
        degraded.extend(sets(&head, &dark, 0.0, recent, infer));
        constant.push(train(p, seed + 2, Some((0.0, half)))?.0);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (trained_loss, constant_loss) = (mean(&trained), mean(&constant));
    let (same_scene, cross_scene) = (stats(same), stats(cross));
    let (cross_scene_window, degraded) = (stats(cross_live), stats(degraded));
    let cd_new = 0.5 * (same_scene.max + cross_scene.min);
    let cd_lidar = 0.5 * (cross_scene_window.max.max(cd_new) + degraded.min);
    let l_usable = (trained_loss * constant_loss).sqrt();
    Ok(Calibration {
        same_scene,
        cross_scene,
        cross_scene_window,
        degraded,
        trained_loss,
        constant_loss,
        cd_new,
        cd_lidar,
        l_usable,
    })
}

/// Fraction of decisions in `[start, end)` that chose LiDAR.
pub fn lidar_fraction(decisions: &[InferenceDecision], start: f64, end: f64) -> Option<f64> {
    let inside: Vec<_> = decisions.iter().filter(|d| d.timestamp >= start && d.timestamp < end).collect();
    (!inside.is_empty()).then(|| inside.iter().filter(|d| d.source == Source::Lidar).count() as f64 / inside.len() as f64)
}

/// Per-class counts of a label mask, for diagnostics.
pub fn label_histogram(costs: &[Option<f32>]) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for c in costs {
        *m.entry(classify(*c).name()).or_insert(0) += 1;
    }
    m
}
