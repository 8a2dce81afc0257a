//! Time-ordered sensor streams, live from the simulator or replayed from disk.
//!
//! Streams advance on a 70 Hz base clock. Each tick carries the vehicle
//! pose and, on their periods, a LiDAR scan and a camera frame. Tick `k`
//! has timestamp `k / 70` exactly, so live and replayed runs see
//! bit-identical inputs.
//!
//! On-disk layout of a sequence directory:
//!
//! ```text
//! sequence.json         SequenceMeta (plan, rates, mounts, truth stride)
//! poses.txt             pose stream, one record per tick
//! scans/NNNNNN.bin      binary scans (or .txt, the text variant)
//! frames/NNNNNN.png     camera images
//! truth/NNNNNN.gt       ground truth for every truth_stride-th frame
//! ```
//!
//! Ground-truth files are little-endian: `"NFGT" | u32 version | u32 width |
//! u32 height | width·height × u8 class (0 low, 1 medium, 2 high, 3 sky) |
//! width·height × f32 range (meters, +inf for sky)`.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::config::BASE_HZ;
use crate::error::{Error, Result};
use crate::geometry::{read_pose_stream, write_pose_stream, Pose};
use crate::metrics::CostClass;
use crate::par::Execution;
use crate::sim::{corrupt_frame, render_image, simulate_lidar, CameraConfig, LidarConfig, Palette, Scene, SceneParams};
use crate::voxel::{read_scan_binary, read_scan_text, write_scan_binary, write_scan_text, PointCloudScan};

/// One environment leg of a drive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentPlan {
    pub scene: SceneParams,
    /// Global start time, seconds.
    pub start: f64,
    pub duration: f64,
}

/// Everything needed to synthesize a drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePlan {
    pub segments: Vec<SegmentPlan>,
    /// Global `[start, end)` of the camera dropout.
    pub view_drop: Option<(f64, f64)>,
    pub speed: f64,
    pub start_offset: f64,
    pub camera: CameraConfig,
    pub lidar: LidarConfig,
    /// Ground truth is produced for frame ids divisible by this.
    pub truth_stride: u32,
}

impl SequencePlan {
    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn scan_every(&self) -> u64 {
        (BASE_HZ / self.lidar.rate_hz).round() as u64
    }

    pub fn frame_every(&self) -> u64 {
        (BASE_HZ / self.camera.rate_hz).round() as u64
    }

    fn segment_ticks(&self) -> Vec<u64> {
        self.segments.iter().map(|s| (s.duration * BASE_HZ).round() as u64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() || self.truth_stride == 0 || !(self.speed > 0.0) {
            return Err(Error::InvalidConfig("plan needs segments, speed and a truth stride".into()));
        }
        for s in &self.segments {
            s.scene.validate()?;
            if s.duration * self.speed + self.start_offset > s.scene.length {
                return Err(Error::InvalidConfig(format!(
                    "segment drives {} m but the scene is {} m long",
                    s.duration * self.speed + self.start_offset,
                    s.scene.length
                )));
            }
        }
        self.camera.validate()?;
        self.lidar.validate()
    }
}

/// Per-pixel ground truth of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub width: u32,
    pub height: u32,
    pub classes: Vec<CostClass>,
    pub range: Vec<f32>,
}

impl Truth {
    pub fn sky(&self) -> Vec<bool> {
        self.range.iter().map(|r| r.is_infinite()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameEvent {
    pub id: u32,
    pub image: RgbImage,
    pub truth: Option<Truth>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentStart {
    pub index: usize,
    pub palette: Palette,
    pub start: f64,
}

/// Sensor data of one base-clock tick.
#[derive(Debug, Clone, PartialEq)]
pub struct Tick {
    pub time: f64,
    pub segment: Option<SegmentStart>,
    pub pose: Pose,
    pub scan: Option<PointCloudScan>,
    pub frame: Option<FrameEvent>,
}

pub trait SensorSource {
    fn plan(&self) -> &SequencePlan;
    fn next_tick(&mut self) -> Result<Option<Tick>>;
}

/// Runs another source on a producer thread, up to `depth` ticks ahead.
pub struct Prefetch {
    plan: SequencePlan,
    rx: std::sync::mpsc::Receiver<Result<Option<Tick>>>,
    done: bool,
}

impl Prefetch {
    pub fn spawn<S: SensorSource + Send + 'static>(mut source: S, depth: usize) -> Self {
        let plan = source.plan().clone();
        let (tx, rx) = std::sync::mpsc::sync_channel(depth.max(1));
        std::thread::spawn(move || loop {
            let item = source.next_tick();
            let stop = !matches!(item, Ok(Some(_)));
            if tx.send(item).is_err() || stop {
                break;
            }
        });
        Self { plan, rx, done: false }
    }
}

impl SensorSource for Prefetch {
    fn plan(&self) -> &SequencePlan {
        &self.plan
    }

    fn next_tick(&mut self) -> Result<Option<Tick>> {
        if self.done {
            return Ok(None);
        }
        match self.rx.recv() {
            Ok(Ok(Some(t))) => Ok(Some(t)),
            Ok(other) => {
                self.done = true;
                other
            }
            Err(_) => {
                self.done = true;
                Err(Error::InvalidInput("sensor thread stopped".into()))
            }
        }
    }
}

fn tick_time(k: u64) -> f64 {
    k as f64 / BASE_HZ
}

/// Synthesizes ticks on demand.
pub struct SimSource {
    plan: SequencePlan,
    exec: Execution,
    ticks: Vec<u64>,
    scene: Option<Scene>,
    segment: usize,
    local: u64,
    global: u64,
}

impl SimSource {
    pub fn new(plan: SequencePlan, exec: Execution) -> Result<Self> {
        plan.validate()?;
        let ticks = plan.segment_ticks();
        Ok(Self {
            plan,
            exec,
            ticks,
            scene: None,
            segment: 0,
            local: 0,
            global: 0,
        })
    }
}

impl SensorSource for SimSource {
    fn plan(&self) -> &SequencePlan {
        &self.plan
    }

    fn next_tick(&mut self) -> Result<Option<Tick>> {
        while self.segment < self.ticks.len() && self.local >= self.ticks[self.segment] {
            self.segment += 1;
            self.local = 0;
            self.scene = None;
        }
        if self.segment >= self.ticks.len() {
            return Ok(None);
        }
        let seg = self.plan.segments[self.segment];
        let mut started = None;
        if self.scene.is_none() {
            self.scene = Some(Scene::generate(seg.scene)?);
            started = Some(SegmentStart {
                index: self.segment,
                palette: seg.scene.palette,
                start: tick_time(self.global),
            });
        }
        let scene = self.scene.as_ref().expect("scene generated");
        let k = self.global;
        let t = tick_time(k);
        let local_t = tick_time(self.local);
        let pose = scene.vehicle_pose(self.plan.start_offset + self.plan.speed * local_t, t);
        let scan = (k % self.plan.scan_every() == 0)
            .then(|| simulate_lidar(scene, &pose, &self.plan.lidar, (k / self.plan.scan_every()) as u32, self.exec));
        let frame = if k % self.plan.frame_every() == 0 {
            let id = (k / self.plan.frame_every()) as u32;
            let f = render_image(scene, &pose, &self.plan.camera, id as u64, self.exec);
            let mut image = f.image.clone();
            if let Some((a, b)) = self.plan.view_drop {
                if t >= a && t < b {
                    corrupt_frame(&mut image, seg.scene.seed, id as u64);
                }
            }
            let truth = (id % self.plan.truth_stride == 0).then(|| Truth {
                width: f.image.width(),
                height: f.image.height(),
                classes: f.gt_classes(),
                range: f.range,
            });
            Some(FrameEvent { id, image, truth })
        } else {
            None
        };
        self.local += 1;
        self.global += 1;
        Ok(Some(Tick {
            time: t,
            segment: started,
            pose,
            scan,
            frame,
        }))
    }
}

const META_FILE: &str = "sequence.json";
const TRUTH_MAGIC: &[u8; 4] = b"NFGT";
const TRUTH_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub version: u32,
    pub base_hz: f64,
    pub plan: SequencePlan,
    /// Free-form tag of what produced the sequence.
    pub origin: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanFormat {
    Binary,
    Text,
}

fn frame_name(id: u64) -> String {
    format!("{id:06}")
}

pub fn write_truth(path: &Path, truth: &Truth) -> Result<()> {
    let n = truth.width as usize * truth.height as usize;
    let mut b = Vec::with_capacity(16 + 5 * n);
    b.extend_from_slice(TRUTH_MAGIC);
    for v in [TRUTH_VERSION, truth.width, truth.height] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend(truth.classes.iter().map(|c| c.index() as u8));
    for r in &truth.range {
        b.extend_from_slice(&r.to_le_bytes());
    }
    std::fs::write(path, b).map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<Truth> {
    let mut b = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut b))
        .map_err(|e| Error::io(path, e))?;
    let bad = |r: &str| Error::format("truth", path, r.to_string());
    if b.len() < 16 || &b[..4] != TRUTH_MAGIC {
        return Err(bad("missing header"));
    }
    let u = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"));
    if u(4) != TRUTH_VERSION {
        return Err(bad("unsupported version"));
    }
    let (width, height) = (u(8), u(12));
    let n = width as usize * height as usize;
    if b.len() != 16 + 5 * n {
        return Err(bad("length does not match dimensions"));
    }
    let classes = b[16..16 + n]
        .iter()
        .map(|c| match c {
            0 => Ok(CostClass::Low),
            1 => Ok(CostClass::Medium),
            2 => Ok(CostClass::High),
            3 => Ok(CostClass::Unknown),
            _ => Err(bad("class out of range")),
        })
        .collect::<Result<Vec<_>>>()?;
    let range = (0..n)
        .map(|i| {
            let o = 16 + n + 4 * i;
            f32::from_le_bytes(b[o..o + 4].try_into().expect("4 bytes"))
        })
        .collect();
    Ok(Truth {
        width,
        height,
        classes,
        range,
    })
}

/// Drains `source` into a sequence directory. Returns the number of ticks.
pub fn write_sequence(source: &mut dyn SensorSource, dir: &Path, format: ScanFormat, origin: &str) -> Result<u64> {
    for sub in ["scans", "frames", "truth"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let meta = SequenceMeta {
        version: 1,
        base_hz: BASE_HZ,
        plan: source.plan().clone(),
        origin: origin.to_string(),
    };
    let meta_path = dir.join(META_FILE);
    let mut f = std::fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    f.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())
        .map_err(|e| Error::io(&meta_path, e))?;
    let mut poses = Vec::new();
    let mut n = 0;
    while let Some(tick) = source.next_tick()? {
        poses.push(tick.pose);
        if let Some(scan) = &tick.scan {
            let name = frame_name(scan.frame_id as u64);
            match format {
                ScanFormat::Binary => write_scan_binary(&dir.join("scans").join(format!("{name}.bin")), scan)?,
                ScanFormat::Text => write_scan_text(&dir.join("scans").join(format!("{name}.txt")), scan)?,
            }
        }
        if let Some(fr) = &tick.frame {
            let name = frame_name(fr.id as u64);
            let p = dir.join("frames").join(format!("{name}.png"));
            fr.image.save(&p)?;
            if let Some(t) = &fr.truth {
                write_truth(&dir.join("truth").join(format!("{name}.gt")), t)?;
            }
        }
        n += 1;
    }
    write_pose_stream(&dir.join("poses.txt"), &poses)?;
    Ok(n)
}

pub fn read_meta(dir: &Path) -> Result<SequenceMeta> {
    let p = dir.join(META_FILE);
    let s = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let meta: SequenceMeta = serde_json::from_str(&s)?;
    if meta.version != 1 || meta.base_hz != BASE_HZ {
        return Err(Error::format("sequence metadata", p, "unsupported version or clock"));
    }
    meta.plan.validate()?;
    Ok(meta)
}

/// Replays a sequence directory written by [`write_sequence`].
pub struct ReplaySource {
    dir: PathBuf,
    plan: SequencePlan,
    poses: VecDeque<Pose>,
    starts: Vec<u64>,
    k: u64,
}

impl ReplaySource {
    pub fn open(dir: &Path) -> Result<Self> {
        let meta = read_meta(dir)?;
        let poses: VecDeque<Pose> = read_pose_stream(&dir.join("poses.txt"))?.into();
        let ticks = meta.plan.segment_ticks();
        let total: u64 = ticks.iter().sum();
        if poses.len() as u64 != total {
            return Err(Error::format(
                "sequence",
                dir,
                format!("{} poses for {total} ticks", poses.len()),
            ));
        }
        let mut starts = Vec::with_capacity(ticks.len());
        let mut acc = 0;
        for t in ticks {
            starts.push(acc);
            acc += t;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            plan: meta.plan,
            poses,
            starts,
            k: 0,
        })
    }

    fn read_scan(&self, id: u64) -> Result<PointCloudScan> {
        let name = frame_name(id);
        let bin = self.dir.join("scans").join(format!("{name}.bin"));
        if bin.exists() {
            read_scan_binary(&bin)
        } else {
            read_scan_text(&self.dir.join("scans").join(format!("{name}.txt")))
        }
    }
}

impl SensorSource for ReplaySource {
    fn plan(&self) -> &SequencePlan {
        &self.plan
    }

    fn next_tick(&mut self) -> Result<Option<Tick>> {
        let Some(pose) = self.poses.pop_front() else {
            return Ok(None);
        };
        let k = self.k;
        self.k += 1;
        let t = tick_time(k);
        if pose.timestamp != t {
            return Err(Error::format("pose stream", self.dir.join("poses.txt"), format!("tick {k} has time {}", pose.timestamp)));
        }
        let segment = self.starts.iter().position(|s| *s == k).map(|index| SegmentStart {
            index,
            palette: self.plan.segments[index].scene.palette,
            start: t,
        });
        let scan = if k % self.plan.scan_every() == 0 {
            Some(self.read_scan(k / self.plan.scan_every())?)
        } else {
            None
        };
        let frame = if k % self.plan.frame_every() == 0 {
            let id = k / self.plan.frame_every();
            let name = frame_name(id);
            let p = self.dir.join("frames").join(format!("{name}.png"));
            let image = image::open(&p)?.to_rgb8();
            let tp = self.dir.join("truth").join(format!("{name}.gt"));
            let truth = if tp.exists() { Some(read_truth(&tp)?) } else { None };
            Some(FrameEvent {
                id: id as u32,
                image,
                truth,
            })
        } else {
            None
        };
        Ok(Some(Tick {
            time: t,
            segment,
            pose,
            scan,
            frame,
        }))
    }
}
