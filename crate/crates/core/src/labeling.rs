//! Near-to-far self-supervised labels.
//!
//! An image taken at time `t` is labeled from LiDAR accumulated over
//! `[t, t + d]` (extended backwards to a minimum span when `d` is short): the window map is trimmed to voxels that were seen from
//! close by (within `r_near` of some pose on the driven path) and that are
//! not absurdly far from the camera (`r_far`), labeled with the terrain
//! cost, then raycast from the camera pose at `t`. Rays stop at the first
//! voxel, so geometry that the camera could not see is never labeled.

use std::collections::VecDeque;
use std::io::{BufWriter, Write};
use std::path::Path;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mount, Pose};
use crate::par::Execution;
use crate::raycast::raycast_rows;
use crate::terrain::{label_map_with, TerrainConfig};
use crate::voxel::{PointCloudScan, VoxelMap, VoxelMapConfig};

/// Label generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelConfig {
    /// Accumulation delay `d`, seconds.
    pub delay: f64,
    /// Horizontal radius around the driven path where LiDAR is trusted.
    pub r_near: f64,
    /// Horizontal radius around the image pose beyond which voxels are cut.
    pub r_far: f64,
    /// Pairs with fewer labeled pixels are dropped.
    pub min_labeled_pixels: usize,
    /// Raycast range limit, meters.
    pub max_range: f64,
    /// Images selected for labeling per second of stream time.
    pub pairs_per_second: f64,
    /// The scan window always spans at least this long, reaching back
    /// before the image when `delay` is shorter.
    pub min_accumulation: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            delay: 5.0,
            r_near: 30.0,
            r_far: 100.0,
            min_labeled_pixels: 500,
            max_range: 120.0,
            pairs_per_second: 1.4,
            min_accumulation: 5.0,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.delay >= 0.0
            && self.r_near > 0.0
            && self.r_far >= self.r_near
            && self.max_range > 0.0
            && self.pairs_per_second > 0.0
            && self.min_accumulation >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid label config {self:?}")))
        }
    }
}

/// Keeps voxels whose center is within `r_near` (horizontally) of any pose
/// on `path` and within `r_far` of `image_pose`. An empty path keeps nothing.
pub fn admissible_voxels(map: &VoxelMap, path: &[Pose], image_pose: &Pose, cfg: &LabelConfig) -> VoxelMap {
    if path.is_empty() {
        return map.filtered(|_, _| false);
    }
    let near2 = cfg.r_near * cfg.r_near;
    let far2 = cfg.r_far * cfg.r_far;
    let mut by_column: FxHashMap<[i32; 2], bool> = FxHashMap::default();
    map.filtered(|k, _| {
        *by_column.entry([k[0], k[1]]).or_insert_with(|| {
            let c = map.voxel_center(k);
            let d2 = |p: &Pose| (c.x - p.position.x).powi(2) + (c.y - p.position.y).powi(2);
            d2(image_pose) <= far2 && path.iter().any(|p| d2(p) <= near2)
        })
    })
}

/// Per-pixel optional cost, row-major. Only top-half rows carry labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    pub width: u32,
    pub height: u32,
    pub costs: Vec<Option<f32>>,
    pub timestamp: f64,
    pub pose: Pose,
    /// Largest raycast depth among labeled pixels, meters (0 when empty).
    pub max_depth: f64,
}

impl LabelMask {
    pub fn empty(width: u32, height: u32, timestamp: f64, pose: Pose) -> Self {
        Self {
            width,
            height,
            costs: vec![None; width as usize * height as usize],
            timestamp,
            pose,
            max_depth: 0.0,
        }
    }

    pub fn valid_count(&self) -> usize {
        self.costs.iter().filter(|c| c.is_some()).count()
    }

    pub fn get(&self, i: u32, j: u32) -> Option<f32> {
        self.costs[(j * self.width + i) as usize]
    }
}

/// Rows `[0, height / 2)`.
pub fn top_half_rows(height: u32) -> std::ops::Range<u32> {
    0..height / 2
}

/// Raycasts the labeled map from `camera` over admissible voxels.
pub fn generate_label_mask(
    camera: &Pose,
    intrinsics: &CameraIntrinsics,
    labeled: &VoxelMap,
    path: &[Pose],
    image_pose: &Pose,
    cfg: &LabelConfig,
    exec: Execution,
) -> LabelMask {
    let mut mask = LabelMask::empty(intrinsics.width, intrinsics.height, camera.timestamp, *camera);
    let admissible = admissible_voxels(labeled, path, image_pose, cfg);
    if admissible.is_empty() {
        return mask;
    }
    let img = raycast_rows(&admissible, camera, intrinsics, cfg.max_range, top_half_rows(intrinsics.height), exec);
    for (c, h) in mask.costs.iter_mut().zip(&img.hits) {
        if let Some(h) = h {
            if let Some(cost) = h.cost {
                *c = Some(cost);
                mask.max_depth = mask.max_depth.max(h.depth);
            }
        }
    }
    mask
}

/// Accumulates `scans` into a fresh map centered on `center` and labels it.
pub fn build_labeled_map(
    scans: &[&PointCloudScan],
    center: &Pose,
    map_cfg: &VoxelMapConfig,
    terrain: &TerrainConfig,
    exec: Execution,
) -> Result<VoxelMap> {
    let mut map = VoxelMap::new(*map_cfg, center.position)?;
    for s in scans {
        map.integrate_scan(s)?;
    }
    label_map_with(&mut map, terrain, exec);
    Ok(map)
}

/// A self-labeled image, ready at `label_ready = image_timestamp + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub frame_id: u32,
    pub image_timestamp: f64,
    pub label_ready: f64,
    pub mask: LabelMask,
    /// Timestamp of the newest scan used for the label.
    pub newest_scan: f64,
}

#[derive(Debug, Clone)]
struct Pending {
    frame_id: u32,
    vehicle: Pose,
    camera: Pose,
}

/// Streaming near-to-far labeler.
///
/// Feed time-ordered poses, scans, and camera frames; [`poll`] emits pairs
/// whose label-ready time has been reached.
///
/// [`poll`]: LabelScheduler::poll
pub struct LabelScheduler {
    cfg: LabelConfig,
    terrain: TerrainConfig,
    map_cfg: VoxelMapConfig,
    intrinsics: CameraIntrinsics,
    exec: Execution,
    poses: VecDeque<Pose>,
    scans: VecDeque<PointCloudScan>,
    pending: VecDeque<Pending>,
    next_select: Option<f64>,
    selected: u64,
    dropped: u64,
}

impl LabelScheduler {
    pub fn new(
        cfg: LabelConfig,
        terrain: TerrainConfig,
        map_cfg: VoxelMapConfig,
        intrinsics: CameraIntrinsics,
        exec: Execution,
    ) -> Result<Self> {
        cfg.validate()?;
        terrain.validate()?;
        map_cfg.validate()?;
        Ok(Self {
            cfg,
            terrain,
            map_cfg,
            intrinsics,
            exec,
            poses: VecDeque::new(),
            scans: VecDeque::new(),
            pending: VecDeque::new(),
            next_select: None,
            selected: 0,
            dropped: 0,
        })
    }

    pub fn config(&self) -> &LabelConfig {
        &self.cfg
    }

    /// Pairs dropped for having too few labeled pixels.
    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn push_pose(&mut self, pose: Pose) {
        self.poses.push_back(pose);
    }

    pub fn push_scan(&mut self, scan: PointCloudScan) {
        self.scans.push_back(scan);
    }

    /// Offers a camera frame. Returns whether it was selected for labeling.
    pub fn push_image(&mut self, frame_id: u32, vehicle: Pose, mount: &Mount) -> bool {
        let t = vehicle.timestamp;
        let period = 1.0 / self.cfg.pairs_per_second;
        let due = match self.next_select {
            None => true,
            Some(n) => t + 1e-9 >= n,
        };
        if !due {
            return false;
        }
        let base = self.next_select.unwrap_or(t);
        // Skip whole periods if the stream jumped ahead.
        let k = ((t - base) / period + 1e-9).floor().max(0.0);
        self.next_select = Some(base + (k + 1.0) * period);
        self.selected += 1;
        self.pending.push_back(Pending {
            frame_id,
            vehicle,
            camera: vehicle.compose(mount),
        });
        true
    }

    /// Emits every pending pair whose label-ready time is `<= now`.
    pub fn poll(&mut self, now: f64) -> Result<Vec<TrainingPair>> {
        let mut out = Vec::new();
        while let Some(p) = self.pending.front() {
            let t = p.vehicle.timestamp;
            if t + self.cfg.delay > now + 1e-9 {
                break;
            }
            let p = self.pending.pop_front().expect("front");
            if let Some(pair) = self.label(&p)? {
                out.push(pair);
            }
        }
        self.trim();
        Ok(out)
    }

    fn label(&mut self, p: &Pending) -> Result<Option<TrainingPair>> {
        let t0 = p.vehicle.timestamp;
        let t1 = t0 + self.cfg.delay;
        let start = t0.min(t1 - self.cfg.min_accumulation);
        let in_window = |t: f64| t >= start - 1e-9 && t <= t1 + 1e-9;
        let scans: Vec<&PointCloudScan> = self.scans.iter().filter(|s| in_window(s.timestamp)).collect();
        if scans.is_empty() {
            self.dropped += 1;
            return Ok(None);
        }
        let mut path: Vec<Pose> = self.poses.iter().filter(|q| in_window(q.timestamp)).copied().collect();
        if path.is_empty() {
            path.push(p.vehicle);
        }
        let center = path.last().copied().unwrap_or(p.vehicle);
        let map = build_labeled_map(&scans, &center, &self.map_cfg, &self.terrain, self.exec)?;
        let newest_scan = scans.iter().map(|s| s.timestamp).fold(f64::NEG_INFINITY, f64::max);
        let mask = generate_label_mask(&p.camera, &self.intrinsics, &map, &path, &p.vehicle, &self.cfg, self.exec);
        if mask.valid_count() < self.cfg.min_labeled_pixels {
            self.dropped += 1;
            return Ok(None);
        }
        Ok(Some(TrainingPair {
            frame_id: p.frame_id,
            image_timestamp: t0,
            label_ready: t1,
            mask,
            newest_scan,
        }))
    }

    /// Forgets scans and poses no pending or future image can use.
    fn trim(&mut self) {
        let horizon = match self.pending.front() {
            Some(p) => p.vehicle.timestamp,
            None => match self.poses.back() {
                Some(p) => p.timestamp,
                None => return,
            },
        } - (self.cfg.min_accumulation - self.cfg.delay).max(0.0)
            - 1e-9;
        while self.scans.front().is_some_and(|s| s.timestamp < horizon) {
            self.scans.pop_front();
        }
        while self.poses.front().is_some_and(|p| p.timestamp < horizon) {
            self.poses.pop_front();
        }
    }
}

/// Label files store `round(cost * 1000)` as 16-bit gray; this marks
/// unlabeled pixels.
pub const LABEL_SENTINEL: u16 = u16::MAX;

/// Sidecar metadata stored next to a pair's image and label files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetadata {
    pub frame_id: u32,
    pub image_timestamp: f64,
    pub label_ready: f64,
    pub width: u32,
    pub height: u32,
    pub valid_pixels: usize,
    pub max_depth: f64,
    /// Camera pose: x y z qw qx qy qz.
    pub pose: [f64; 7],
}

fn pose_array(p: &Pose) -> [f64; 7] {
    let q = p.orientation.quaternion();
    [p.position.x, p.position.y, p.position.z, q.w, q.i, q.j, q.k]
}

/// Writes `<stem>.png` (image), `<stem>.label.png` and `<stem>.json`.
pub fn write_pair(dir: &Path, stem: &str, image: &image::RgbImage, pair: &TrainingPair) -> Result<()> {
    let m = &pair.mask;
    if image.width() != m.width || image.height() != m.height {
        return Err(Error::WrongResolution {
            expected_width: m.width,
            expected_height: m.height,
            actual_width: image.width(),
            actual_height: image.height(),
        });
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    image.save(dir.join(format!("{stem}.png")))?;
    write_label_png(&dir.join(format!("{stem}.label.png")), m)?;
    let meta = PairMetadata {
        frame_id: pair.frame_id,
        image_timestamp: pair.image_timestamp,
        label_ready: pair.label_ready,
        width: m.width,
        height: m.height,
        valid_pixels: m.valid_count(),
        max_depth: m.max_depth,
        pose: pose_array(&m.pose),
    };
    let path = dir.join(format!("{stem}.json"));
    let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, &meta)?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads a pair written by [`write_pair`].
pub fn read_pair(dir: &Path, stem: &str) -> Result<(image::RgbImage, TrainingPair)> {
    let path = dir.join(format!("{stem}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: PairMetadata = serde_json::from_str(&text)?;
    let image = image::open(dir.join(format!("{stem}.png")))?.to_rgb8();
    let [x, y, z, qw, qx, qy, qz] = meta.pose;
    let pose = Pose::from_wxyz(crate::geometry::Vec3::new(x, y, z), qw, qx, qy, qz, meta.image_timestamp)?;
    let mut mask = read_label_png(&dir.join(format!("{stem}.label.png")), meta.image_timestamp, pose)?;
    mask.max_depth = meta.max_depth;
    Ok((
        image,
        TrainingPair {
            frame_id: meta.frame_id,
            image_timestamp: meta.image_timestamp,
            label_ready: meta.label_ready,
            mask,
            newest_scan: meta.label_ready,
        },
    ))
}

pub fn write_label_png(path: &Path, mask: &LabelMask) -> Result<()> {
    let data: Vec<u16> = mask
        .costs
        .iter()
        .map(|c| c.map_or(LABEL_SENTINEL, |c| (c as f64 * 1000.0).round() as u16))
        .collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(mask.width, mask.height, data)
        .expect("buffer size matches");
    img.save(path)?;
    Ok(())
}

pub fn read_label_png(path: &Path, timestamp: f64, pose: Pose) -> Result<LabelMask> {
    let img = image::open(path)?.to_luma16();
    let mut mask = LabelMask::empty(img.width(), img.height(), timestamp, pose);
    for (c, px) in mask.costs.iter_mut().zip(img.pixels()) {
        let v = px.0[0];
        if v != LABEL_SENTINEL {
            *c = Some(v as f32 / 1000.0);
        }
    }
    Ok(mask)
}
