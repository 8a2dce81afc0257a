//! Run configuration, loaded from TOML.
//!
//! Every section is optional; missing keys take their defaults. See
//! `configs/default.toml` in the repository root for a fully spelled-out file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::ensemble::EnsembleConfig;
use crate::error::{Error, Result};
use crate::labeling::LabelConfig;
use crate::learner::LearnerConfig;
use crate::par::Execution;
use crate::sim::{CameraConfig, LidarConfig, Palette, SceneParams};
use crate::terrain::TerrainConfig;
use crate::voxel::VoxelMapConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Train on the first part of one sequence in a new environment,
    /// evaluate on the rest.
    AdaptNewEnv,
    /// Drive through a scripted list of environments, learning throughout.
    MultiDomain,
    /// One sequence with a camera dropout interval.
    ViewDrop,
    /// Re-run a sequence persisted by `simulate`.
    Replay,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::AdaptNewEnv => "adapt-new-env",
            Scenario::MultiDomain => "multi-domain",
            Scenario::ViewDrop => "view-drop",
            Scenario::Replay => "replay",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adapt-new-env" => Ok(Scenario::AdaptNewEnv),
            "multi-domain" => Ok(Scenario::MultiDomain),
            "view-drop" => Ok(Scenario::ViewDrop),
            "replay" => Ok(Scenario::Replay),
            _ => Err(Error::InvalidConfig(format!("unknown scenario `{s}`"))),
        }
    }
}

/// One leg of a multi-domain drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub palette: Palette,
    /// Added to the run seed to pick the scene.
    pub seed_offset: u64,
    pub duration: f64,
}

/// Scene knobs shared by every generated environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub trail_curvature: f64,
    pub obstacle_density: f64,
    pub grass_height: f64,
    pub trail_width: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let p = SceneParams::default();
        Self {
            trail_curvature: p.trail_curvature,
            obstacle_density: p.obstacle_density,
            grass_height: p.grass_height,
            trail_width: p.trail_width,
        }
    }
}

impl SceneConfig {
    pub fn params(&self, palette: Palette, seed: u64, length: f64) -> SceneParams {
        SceneParams {
            trail_curvature: self.trail_curvature,
            obstacle_density: self.obstacle_density,
            grass_height: self.grass_height,
            trail_width: self.trail_width,
            length,
            ..SceneParams::preset(palette, seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub enabled: bool,
    /// Environment of the pretraining drives; defaults to the palette
    /// opposite the evaluated one.
    pub palette: Option<Palette>,
    pub seeds: Vec<u64>,
    pub duration: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            palette: None,
            seeds: vec![1000],
            duration: 45.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewDropConfig {
    pub start: f64,
    pub end: f64,
}

impl Default for ViewDropConfig {
    fn default() -> Self {
        Self { start: 20.0, end: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct OutputConfig {
    /// Run directory for logs, pairs, predictions, and the report.
    pub dir: Option<PathBuf>,
    /// Dump cost maps and label masks as PNG every N evaluated frames
    /// (0 disables).
    pub dump_every: usize,
    /// Persist every training pair.
    pub save_pairs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub seeds: Vec<u64>,
    /// Environment for adapt-new-env and view-drop.
    pub palette: Palette,
    pub sequence_length: f64,
    pub train_duration: f64,
    pub eval_duration: f64,
    /// Vehicle speed along the trail, m/s.
    pub speed: f64,
    /// Arc length where each drive starts, meters.
    pub start_offset: f64,
    /// Training buffers close at multiples of this period, seconds.
    pub buffer_period: f64,
    /// Training and validation frames per buffer.
    pub buffer_train: usize,
    pub buffer_validation: usize,
    /// Evaluate every N-th camera frame inside evaluation windows.
    pub eval_stride: usize,
    /// Evaluation ignores pixels closer than this in the beyond region.
    pub near_range: f64,
    /// First part of each revisited segment reported separately, seconds.
    pub revisit_window: f64,
    /// LiDAR-only baseline accumulates scans over this past window, seconds.
    pub lidar_window: f64,
    /// When false, the visual heads never train and ALTER always uses LiDAR.
    pub learner_enabled: bool,
    pub parallel: bool,
    /// Produce sensor data on a separate thread while the pipeline runs.
    pub pipelined: bool,
    pub segments: Vec<SegmentConfig>,
    pub view_drop: ViewDropConfig,
    pub pretrain: PretrainConfig,
    /// Sequence directory read by the replay scenario.
    pub replay_dir: Option<PathBuf>,
    pub scene: SceneConfig,
    pub camera: CameraConfig,
    pub lidar: LidarConfig,
    pub map: VoxelMapConfig,
    pub terrain: TerrainConfig,
    pub label: LabelConfig,
    pub encoder: EncoderConfig,
    pub learner: LearnerConfig,
    pub ensemble: EnsembleConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::AdaptNewEnv,
            seeds: vec![1],
            palette: Palette::Hill,
            sequence_length: 75.0,
            train_duration: 45.0,
            eval_duration: 30.0,
            speed: 10.0,
            start_offset: 50.0,
            buffer_period: 10.0,
            buffer_train: 10,
            buffer_validation: 4,
            eval_stride: 7,
            near_range: 10.0,
            revisit_window: 15.0,
            lidar_window: 5.0,
            learner_enabled: true,
            parallel: true,
            pipelined: false,
            segments: vec![
                SegmentConfig {
                    palette: Palette::Forest,
                    seed_offset: 0,
                    duration: 45.0,
                },
                SegmentConfig {
                    palette: Palette::Hill,
                    seed_offset: 100,
                    duration: 45.0,
                },
                SegmentConfig {
                    palette: Palette::Forest,
                    seed_offset: 200,
                    duration: 45.0,
                },
            ],
            view_drop: ViewDropConfig::default(),
            pretrain: PretrainConfig::default(),
            replay_dir: None,
            scene: SceneConfig::default(),
            camera: CameraConfig::default(),
            lidar: LidarConfig::default(),
            map: VoxelMapConfig::default(),
            terrain: TerrainConfig::default(),
            label: LabelConfig::default(),
            encoder: EncoderConfig::default(),
            learner: LearnerConfig::default(),
            ensemble: EnsembleConfig::calibrated(),
            output: OutputConfig::default(),
        }
    }
}

/// Overlays `over` onto `base`, table by table.
fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Camera and LiDAR periods must divide this base clock.
pub const BASE_HZ: f64 = 70.0;

fn divides_base(rate: f64) -> bool {
    let k = BASE_HZ / rate;
    rate > 0.0 && (k - k.round()).abs() < 1e-9 && k.round() >= 1.0
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::InvalidConfig(e.to_string());
        let user: toml::Value = toml::from_str(s).map_err(|e| bad(&e))?;
        let mut merged = toml::Value::try_from(RunConfig::default()).map_err(|e| bad(&e))?;
        merge_toml(&mut merged, user);
        let cfg: RunConfig = merged.try_into().map_err(|e| bad(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.sequence_length > 0.0 && self.train_duration >= 0.0 && self.eval_duration > 0.0) {
            return bad("durations must be positive".into());
        }
        if (self.train_duration + self.eval_duration - self.sequence_length).abs() > 1e-9 {
            return bad(format!(
                "train ({}) + eval ({}) must equal sequence length ({})",
                self.train_duration, self.eval_duration, self.sequence_length
            ));
        }
        if !(self.speed > 0.0 && self.start_offset >= 0.0 && self.buffer_period > 0.0) {
            return bad("speed and buffer period must be positive".into());
        }
        if self.buffer_train == 0 || self.buffer_validation == 0 || self.eval_stride == 0 {
            return bad("buffer sizes and eval stride must be at least 1".into());
        }
        if !(self.near_range >= 0.0 && self.revisit_window > 0.0 && self.lidar_window > 0.0) {
            return bad("near range, revisit window and lidar window must be positive".into());
        }
        if self.scenario == Scenario::MultiDomain && self.segments.is_empty() {
            return bad("multi-domain needs at least one segment".into());
        }
        if self.segments.iter().any(|s| !(s.duration > 0.0)) {
            return bad("segment durations must be positive".into());
        }
        let vd = self.view_drop;
        if !(vd.start >= 0.0 && vd.end >= vd.start) {
            return bad("view drop must satisfy 0 <= start <= end".into());
        }
        if self.scenario == Scenario::Replay && self.replay_dir.is_none() {
            return bad("replay needs replay_dir".into());
        }
        if self.pretrain.enabled && (self.pretrain.seeds.is_empty() || !(self.pretrain.duration > 0.0)) {
            return bad("pretraining needs seeds and a positive duration".into());
        }
        if !divides_base(self.camera.rate_hz) || !divides_base(self.lidar.rate_hz) {
            return bad(format!("camera and lidar rates must divide {BASE_HZ} Hz"));
        }
        if self.encoder.width != self.camera.intrinsics.width || self.encoder.height != self.camera.intrinsics.height {
            return bad("encoder resolution must match the camera".into());
        }
        self.camera.validate()?;
        self.lidar.validate()?;
        self.map.validate()?;
        self.terrain.validate()?;
        self.label.validate()?;
        self.encoder.validate()?;
        self.learner.validate()?;
        self.ensemble.validate()?;
        Ok(())
    }
}
