//! Deterministic synthetic off-road world and sensors.
//!
//! The world is a 2.5D heightfield with a class map (trail, grass,
//! obstacle) laid along a winding trail corridor. The trail's cross-section
//! is flat; grass returns are displaced upward by a fixed per-location
//! jitter (blades), which destroys local planarity; obstacles are boxes.
//!
//! Vehicle poses are level (yaw only), which lets the camera render one
//! image column at a time by marching outwards and filling rows bottom-up.
//! LiDAR rays are marched individually. All randomness comes from the
//! scene seed, the scan index, or the frame index, so every stream is a
//! pure function of its configuration.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Mount, Pose, Vec3};
use crate::metrics::CostClass;
use crate::par::{map_range, Execution};
use crate::voxel::PointCloudScan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum TerrainClass {
    Trail = 0,
    Grass = 1,
    Obstacle = 2,
}

impl TerrainClass {
    pub fn cost_class(self) -> CostClass {
        match self {
            TerrainClass::Trail => CostClass::Low,
            TerrainClass::Grass => CostClass::Medium,
            TerrainClass::Obstacle => CostClass::High,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Palette {
    /// Dark-brown trail, green grass, dark trunks.
    Forest,
    /// Pale trail, dry-yellow grass, gray rocks; steep valley walls.
    Hill,
}

/// Per-class color statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub trail: [f64; 3],
    pub grass: [f64; 3],
    pub obstacle: [f64; 3],
    pub sky: [f64; 3],
    pub haze: [f64; 3],
    /// Texture amplitude per class (trail, grass, obstacle).
    pub texture: [f64; 3],
}

impl Palette {
    pub fn appearance(self) -> Appearance {
        match self {
            Palette::Forest => Appearance {
                trail: [105.0, 80.0, 55.0],
                grass: [55.0, 115.0, 40.0],
                obstacle: [30.0, 45.0, 25.0],
                sky: [150.0, 175.0, 205.0],
                haze: [120.0, 135.0, 140.0],
                texture: [8.0, 30.0, 15.0],
            },
            Palette::Hill => Appearance {
                trail: [200.0, 185.0, 150.0],
                grass: [195.0, 165.0, 75.0],
                obstacle: [105.0, 100.0, 95.0],
                sky: [175.0, 200.0, 230.0],
                haze: [200.0, 200.0, 195.0],
                texture: [8.0, 30.0, 15.0],
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneParams {
    pub palette: Palette,
    pub seed: u64,
    /// Along-track extent, meters.
    pub length: f64,
    /// Lateral half-width, meters.
    pub half_width: f64,
    pub cell: f64,
    pub trail_width: f64,
    /// Lateral amplitude of the trail centerline, meters.
    pub trail_curvature: f64,
    /// Obstacles per square meter.
    pub obstacle_density: f64,
    /// Height of grass blades above ground, meters.
    pub grass_height: f64,
    /// Amplitude of the rolling base relief, meters.
    pub relief: f64,
    /// Grade of the valley walls (0 disables them).
    pub wall_grade: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self::preset(Palette::Forest, 1)
    }
}

impl SceneParams {
    pub fn preset(palette: Palette, seed: u64) -> Self {
        let (relief, wall_grade) = match palette {
            Palette::Forest => (1.5, 0.0),
            Palette::Hill => (2.5, 0.5),
        };
        Self {
            palette,
            seed,
            length: 1000.0,
            half_width: 50.0,
            cell: 0.5,
            trail_width: 6.0,
            trail_curvature: 8.0,
            obstacle_density: 0.004,
            grass_height: 0.95,
            relief,
            wall_grade,
        }
    }

    /// Flat, featureless ground (trail everywhere, no jitter or obstacles).
    pub fn flat(seed: u64) -> Self {
        Self {
            trail_width: 1e6,
            trail_curvature: 0.0,
            obstacle_density: 0.0,
            grass_height: 0.0,
            relief: 0.0,
            wall_grade: 0.0,
            ..Self::preset(Palette::Forest, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.length > 0.0
            && self.half_width > 0.0
            && self.cell > 0.0
            && self.trail_width > 0.0
            && self.trail_curvature >= 0.0
            && self.obstacle_density >= 0.0
            && self.grass_height >= 0.0
            && self.relief >= 0.0
            && self.wall_grade >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("degenerate scene params {self:?}")))
        }
    }
}

/// Along-track margin before and after the drivable length.
const MARGIN: f64 = 150.0;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform [0, 1) from a lattice point.
#[inline]
fn hash01(seed: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x632B_E59B_D9B4_E019) ^ (iy as u64)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth_noise(seed: u64, x: f64, y: f64, wavelength: f64) -> f64 {
    let (u, v) = (x / wavelength, y / wavelength);
    let (ix, iy) = (u.floor(), v.floor());
    let (fx, fy) = (u - ix, v - iy);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (s(fx), s(fy));
    let (ix, iy) = (ix as i64, iy as i64);
    let a = hash01(seed, ix, iy);
    let b = hash01(seed, ix + 1, iy);
    let c = hash01(seed, ix, iy + 1);
    let d = hash01(seed, ix + 1, iy + 1);
    let top = a + (b - a) * sx;
    let bot = c + (d - c) * sx;
    (top + (bot - top) * sy) * 2.0 - 1.0
}

/// Generated world.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub params: SceneParams,
    pub x0: f64,
    pub y0: f64,
    pub nx: usize,
    pub ny: usize,
    /// Ground height per cell corner grid, bilinearly interpolated.
    ground: Vec<f32>,
    /// Obstacle height per cell (0 where none).
    obstacle: Vec<f32>,
    class: Vec<TerrainClass>,
    /// Centerline lateral offset sampled every meter from `x0`.
    centerline: Vec<f64>,
    /// Arc length at each centerline sample.
    arc: Vec<f64>,
    phase: [f64; 2],
}

impl Scene {
    pub fn generate(params: SceneParams) -> Result<Scene> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let phase = [rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU)];
        let x0 = -MARGIN;
        let y0 = -params.half_width;
        let nx = ((params.length + 2.0 * MARGIN) / params.cell).ceil() as usize;
        let ny = (2.0 * params.half_width / params.cell).ceil() as usize;
        let mut scene = Scene {
            params,
            x0,
            y0,
            nx,
            ny,
            ground: Vec::new(),
            obstacle: vec![0.0; nx * ny],
            class: vec![TerrainClass::Grass; nx * ny],
            centerline: Vec::new(),
            arc: Vec::new(),
            phase,
        };
        let n_center = (params.length + 2.0 * MARGIN).ceil() as usize + 2;
        scene.centerline = (0..n_center).map(|i| scene.center_y(x0 + i as f64)).collect();
        let mut s = 0.0;
        scene.arc = Vec::with_capacity(n_center);
        for i in 0..n_center {
            if i > 0 {
                let dy = scene.centerline[i] - scene.centerline[i - 1];
                s += (1.0 + dy * dy).sqrt();
            }
            scene.arc.push(s);
        }

        // Ground on the (nx + 1) × (ny + 1) corner lattice.
        let seed = params.seed;
        let mut ground = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                let (x, y) = (x0 + i as f64 * params.cell, y0 + j as f64 * params.cell);
                ground.push(scene.ground_model(seed, x, y) as f32);
            }
        }
        scene.ground = ground;

        for j in 0..ny {
            for i in 0..nx {
                let (x, y) = scene.cell_center(i, j);
                if (y - scene.center_y(x)).abs() <= params.trail_width / 2.0 {
                    scene.class[j * nx + i] = TerrainClass::Trail;
                }
            }
        }

        let area = (params.length + 2.0 * MARGIN) * 2.0 * params.half_width;
        let count = (area * params.obstacle_density).round() as usize;
        for _ in 0..count {
            let cx = rng.gen_range(x0..x0 + params.length + 2.0 * MARGIN);
            let cy = rng.gen_range(y0..-y0);
            let size = rng.gen_range(1.5..3.0);
            let height = rng.gen_range(1.5..3.5);
            let lateral = (cy - scene.center_y(cx)).abs();
            if lateral < params.trail_width / 2.0 + size / 2.0 + 1.0 {
                continue;
            }
            let (i0, j0) = scene.cell_of(cx - size / 2.0, cy - size / 2.0);
            let (i1, j1) = scene.cell_of(cx + size / 2.0, cy + size / 2.0);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let k = j * nx + i;
                    scene.obstacle[k] = scene.obstacle[k].max(height as f32);
                    scene.class[k] = TerrainClass::Obstacle;
                }
            }
        }
        Ok(scene)
    }

    fn center_y(&self, x: f64) -> f64 {
        let a = self.params.trail_curvature;
        let tau = std::f64::consts::TAU;
        a * (tau * x / 300.0 + self.phase[0]).sin() + 0.5 * a * (tau * x / 130.0 + self.phase[1]).sin()
            - a * self.phase[0].sin()
            - 0.5 * a * self.phase[1].sin()
    }

    fn ground_model(&self, seed: u64, x: f64, y: f64) -> f64 {
        let p = &self.params;
        let relief = |x: f64, y: f64| {
            p.relief * (smooth_noise(seed ^ 0xA1, x, y, 70.0) + 0.4 * smooth_noise(seed ^ 0xB2, x, y, 23.0))
        };
        let c = self.center_y(x);
        let d = (y - c).abs();
        let half = p.trail_width / 2.0;
        let t = ((d - half) / 3.0).clamp(0.0, 1.0);
        let blend = t * t * (3.0 - 2.0 * t);
        let on_trail = relief(x, c);
        let base = on_trail + (relief(x, y) - on_trail) * blend;
        let wall = (p.wall_grade * (d - 12.0).max(0.0)).min(15.0)
            * (0.75 + 0.25 * smooth_noise(seed ^ 0xC3, x, y, 40.0));
        base + wall
    }

    fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.x0 + (i as f64 + 0.5) * self.params.cell,
            self.y0 + (j as f64 + 0.5) * self.params.cell,
        )
    }

    fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let i = ((x - self.x0) / self.params.cell).floor().clamp(0.0, (self.nx - 1) as f64) as usize;
        let j = ((y - self.y0) / self.params.cell).floor().clamp(0.0, (self.ny - 1) as f64) as usize;
        (i, j)
    }

    /// Ground height (without obstacles), bilinear over the corner lattice.
    pub fn ground_height(&self, x: f64, y: f64) -> f64 {
        let c = self.params.cell;
        let u = ((x - self.x0) / c).clamp(0.0, self.nx as f64 - 1e-9);
        let v = ((y - self.y0) / c).clamp(0.0, self.ny as f64 - 1e-9);
        let (i, j) = (u.floor() as usize, v.floor() as usize);
        let (fx, fy) = (u - i as f64, v - j as f64);
        let w = self.nx + 1;
        let g = |i: usize, j: usize| self.ground[j * w + i] as f64;
        let top = g(i, j) + (g(i + 1, j) - g(i, j)) * fx;
        let bot = g(i, j + 1) + (g(i + 1, j + 1) - g(i, j + 1)) * fx;
        top + (bot - top) * fy
    }

    /// Surface height including obstacles.
    pub fn surface_height(&self, x: f64, y: f64) -> f64 {
        let (i, j) = self.cell_of(x, y);
        self.ground_height(x, y) + self.obstacle[j * self.nx + i] as f64
    }

    pub fn class_at(&self, x: f64, y: f64) -> TerrainClass {
        let (i, j) = self.cell_of(x, y);
        self.class[j * self.nx + i]
    }

    /// Per-cell classes (row-major, `nx × ny`).
    pub fn classes(&self) -> &[TerrainClass] {
        &self.class
    }

    /// Grass blade height at a point, in `[0, grass_height)`.
    pub fn grass_jitter(&self, x: f64, y: f64) -> f64 {
        let k = 20.0;
        self.params.grass_height * hash01(self.params.seed ^ 0x6A55, (x * k).floor() as i64, (y * k).floor() as i64)
    }

    /// Trail centerline point at arc length `s` from `x = 0`, with heading.
    pub fn trail_point(&self, s: f64) -> (f64, f64, f64) {
        let s = s + self.arc[MARGIN as usize];
        let i = match self.arc.binary_search_by(|a| a.total_cmp(&s)) {
            Ok(i) => i,
            Err(i) => i.clamp(1, self.arc.len() - 1) - 1,
        }
        .min(self.arc.len() - 2);
        let t = ((s - self.arc[i]) / (self.arc[i + 1] - self.arc[i])).clamp(0.0, 1.0);
        let x = self.x0 + i as f64 + t;
        let y = self.centerline[i] + (self.centerline[i + 1] - self.centerline[i]) * t;
        let yaw = (self.centerline[i + 1] - self.centerline[i]).atan2(1.0);
        (x, y, yaw)
    }

    /// Level vehicle pose on the trail at arc length `s`.
    pub fn vehicle_pose(&self, s: f64, timestamp: f64) -> Pose {
        let (x, y, yaw) = self.trail_point(s);
        Pose::from_xyz_rpy(Vec3::new(x, y, self.ground_height(x, y)), 0.0, 0.0, yaw, timestamp)
    }

    /// First intersection of a ray with the surface, marching in horizontal
    /// distance with steps growing with range and refining by bisection.
    /// `dir_h` is a unit horizontal direction and `slope` the rise per
    /// meter of horizontal travel.
    pub fn march(&self, origin: &Vec3, dir_h: (f64, f64), slope: f64, max_h: f64, min_step: f64) -> Option<(f64, Vec3)> {
        let f = |s: f64| {
            let (x, y) = (origin.x + dir_h.0 * s, origin.y + dir_h.1 * s);
            origin.z + slope * s - self.surface_height(x, y)
        };
        let mut prev = 0.0;
        if f(prev) <= 0.0 {
            return None;
        }
        let mut s = min_step;
        while s <= max_h {
            if f(s) <= 0.0 {
                let (mut lo, mut hi) = (prev, s);
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                    if hi - lo < 1e-9 {
                        break;
                    }
                }
                let p = Vec3::new(origin.x + dir_h.0 * hi, origin.y + dir_h.1 * hi, origin.z + slope * hi);
                return Some((hi, p));
            }
            prev = s;
            s += (0.01 * s).max(min_step);
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LidarConfig {
    /// Beam elevations, degrees.
    pub elevations_deg: Vec<f64>,
    /// Horizontal field of view centered on the sensor x axis, degrees.
    pub azimuth_fov_deg: f64,
    pub azimuth_step_deg: f64,
    pub max_range: f64,
    /// Range noise standard deviation at zero range, meters.
    pub range_sigma: f64,
    /// Per-scan attitude (roll and pitch) error of the registered sensor
    /// pose, degrees; point error grows as r·σ.
    pub attitude_sigma_deg: f64,
    pub rate_hz: f64,
    pub mount: Mount,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            elevations_deg: vec![
                -20.14, -17.45, -15.38, -13.74, -12.41, -11.31, -9.98, -8.93, -7.83, -6.97, -6.28, -5.46, -4.84,
                -4.19, -3.6, -3.0, -2.52, -2.0, -1.5, -1.0, 0.0, 2.0, 5.0,
            ],
            azimuth_fov_deg: 100.0,
            azimuth_step_deg: 0.4,
            max_range: 120.0,
            range_sigma: 0.01,
            attitude_sigma_deg: 0.1,
            rate_hz: 10.0,
            mount: Mount {
                translation: [0.0, 0.0, 2.2],
                rpy_deg: [0.0, 0.0, 0.0],
            },
        }
    }
}

impl LidarConfig {
    /// Effective positional noise at range `r`: σ0 + r·σ_attitude.
    pub fn sigma_at(&self, r: f64) -> f64 {
        self.range_sigma + r * self.attitude_sigma_deg.to_radians()
    }

    pub fn noiseless(mut self) -> Self {
        self.range_sigma = 0.0;
        self.attitude_sigma_deg = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = !self.elevations_deg.is_empty()
            && self.elevations_deg.iter().all(|e| e.abs() < 89.0)
            && self.azimuth_fov_deg > 0.0
            && self.azimuth_step_deg > 0.0
            && self.max_range > 0.0
            && self.range_sigma >= 0.0
            && self.attitude_sigma_deg >= 0.0
            && self.rate_hz > 0.0
            && self.mount.rpy_deg == [0.0; 3];
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("invalid lidar config (mount must be level)".into()))
        }
    }
}

/// Simulates one scan from vehicle pose `vehicle`. Points are in the sensor
/// frame; the scan pose is the sensor's nominal world pose, so the scan's
/// attitude error shows up as a rotation of all its points.
pub fn simulate_lidar(scene: &Scene, vehicle: &Pose, cfg: &LidarConfig, frame_id: u32, exec: Execution) -> PointCloudScan {
    let sensor = vehicle.compose(&cfg.mount);
    let yaw = sensor.yaw();
    let n_az = (cfg.azimuth_fov_deg / cfg.azimuth_step_deg).round() as usize + 1;
    let n_el = cfg.elevations_deg.len();
    let seed = splitmix(scene.params.seed ^ 0x11DA ^ ((frame_id as u64) << 20));
    let attitude = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, cfg.attitude_sigma_deg.to_radians().max(1e-300)).expect("valid normal");
        let (roll, pitch) = if cfg.attitude_sigma_deg > 0.0 {
            (n.sample(&mut rng), n.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        nalgebra::Rotation3::from_euler_angles(roll, pitch, 0.0)
    };
    let rays = map_range(exec, n_az * n_el, |k| {
        let (a, e) = (k / n_el, k % n_el);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ k as u64));
        let az = (-cfg.azimuth_fov_deg / 2.0 + a as f64 * cfg.azimuth_step_deg).to_radians();
        let el = cfg.elevations_deg[e].to_radians();
        let heading = yaw + az;
        let dir_h = (heading.cos(), heading.sin());
        let slope = el.tan();
        let max_h = cfg.max_range * el.cos();
        let (_, mut p) = scene.march(&sensor.position, dir_h, slope, max_h, 0.1)?;
        if scene.class_at(p.x, p.y) == TerrainClass::Grass && scene.surface_height(p.x, p.y) - scene.ground_height(p.x, p.y) < 1e-9 {
            p.z += scene.grass_jitter(p.x, p.y);
        }
        let mut d = p - sensor.position;
        let r = d.norm();
        if cfg.range_sigma > 0.0 {
            let n = Normal::new(0.0, cfg.range_sigma).expect("valid normal");
            d *= (r + n.sample(&mut rng)) / r;
        }
        let r = d.norm();
        if r > cfg.max_range || r < 0.5 {
            return None;
        }
        Some(attitude * sensor.transform_point(&(sensor.position + d)))
    });
    PointCloudScan {
        frame_id,
        timestamp: vehicle.timestamp,
        pose: sensor,
        points: rays.into_iter().flatten().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub intrinsics: CameraIntrinsics,
    pub rate_hz: f64,
    pub mount: Mount,
    pub max_range: f64,
    /// Per-pixel sensor noise standard deviation, gray levels.
    pub noise: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics {
                fx: 256.0,
                fy: 256.0,
                cx: 128.0,
                cy: 48.0,
                width: 256,
                height: 192,
            },
            rate_hz: 7.0,
            mount: Mount {
                translation: [0.5, 0.0, 2.5],
                rpy_deg: [0.0, 0.0, 0.0],
            },
            max_range: 250.0,
            noise: 3.0,
        }
    }
}

impl CameraConfig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.rate_hz > 0.0 && self.max_range > 0.0 && self.noise >= 0.0 && self.mount.rpy_deg == [0.0; 3] {
            Ok(())
        } else {
            Err(Error::InvalidConfig("invalid camera config (mount must be level)".into()))
        }
    }
}

/// Rendered frame plus aligned ground-truth channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: RgbImage,
    /// Scene class of the surface seen by each pixel (`None` for sky).
    pub class: Vec<Option<TerrainClass>>,
    /// Euclidean range to the surface, `inf` for sky.
    pub range: Vec<f32>,
    pub sky: Vec<bool>,
}

impl Frame {
    pub fn gt_classes(&self) -> Vec<CostClass> {
        self.class.iter().map(|c| c.map_or(CostClass::Unknown, TerrainClass::cost_class)).collect()
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Renders the camera view from `vehicle` (frame index seeds sensor noise).
pub fn render_image(scene: &Scene, vehicle: &Pose, cfg: &CameraConfig, frame_index: u64, exec: Execution) -> Frame {
    let k = &cfg.intrinsics;
    let (w, h) = (k.width as usize, k.height as usize);
    let cam = vehicle.compose(&cfg.mount);
    let yaw = cam.yaw();
    let (cy_, sy_) = (yaw.cos(), yaw.sin());
    let app = scene.params.palette.appearance();
    // Column-wise: each column is a vertical plane because the camera is level.
    let columns = map_range(exec, w, |i| {
        let lateral = -((i as f64 + 0.5) - k.cx) / k.fx;
        // Horizontal direction per unit forward distance.
        let (dx, dy) = (cy_ - sy_ * lateral, sy_ + cy_ * lateral);
        let hlen = (1.0 + lateral * lateral).sqrt();
        let ray_z = |j: usize, x: f64| cam.position.z - ((j as f64 + 0.5) - k.cy) / k.fy * x;
        let surf = |x: f64| scene.surface_height(cam.position.x + dx * x, cam.position.y + dy * x);
        let mut hits: Vec<Option<f64>> = vec![None; h];
        let mut top = h;
        let mut prev = 0.0;
        let mut x = 0.2;
        let max_x = cfg.max_range / hlen;
        while top > 0 && x <= max_x {
            let sh = surf(x);
            let row = k.cy + k.fy * (cam.position.z - sh) / x - 0.5;
            let first = row.ceil().max(0.0) as usize;
            if first < top {
                for (j, hit) in hits.iter_mut().enumerate().take(top).skip(first) {
                    // Refine the crossing between the previous and current sample.
                    let (mut lo, mut hi) = (prev, x);
                    for _ in 0..24 {
                        let mid = 0.5 * (lo + hi);
                        if ray_z(j, mid) <= surf(mid) {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    *hit = Some(hi);
                }
                top = first;
            }
            prev = x;
            x += (0.01 * x).max(0.1);
        }
        let mut col = Vec::with_capacity(h);
        for (j, hit) in hits.iter().enumerate() {
            col.push(hit.map(|x| {
                let p = Vec3::new(cam.position.x + dx * x, cam.position.y + dy * x, ray_z(j, x));
                (p, (p - cam.position).norm())
            }));
        }
        col
    });
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(scene.params.seed ^ 0xCA3E ^ frame_index.wrapping_mul(0x9E37)));
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).expect("valid normal");
    let mut frame = Frame {
        image: RgbImage::new(k.width, k.height),
        class: vec![None; w * h],
        range: vec![f32::INFINITY; w * h],
        sky: vec![true; w * h],
    };
    let tex_seed = scene.params.seed ^ 0x7E47;
    for j in 0..h {
        for i in 0..w {
            let idx = j * w + i;
            let n = if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let rgb = match columns[i][j] {
                None => {
                    let t = (j as f64 / k.cy.max(1.0)).min(1.0);
                    [0, 1, 2].map(|c| app.sky[c] * (1.0 - 0.15 * t) + app.haze[c] * 0.15 * t + n)
                }
                Some((p, r)) => {
                    let class = scene.class_at(p.x, p.y);
                    frame.class[idx] = Some(class);
                    frame.range[idx] = r as f32;
                    frame.sky[idx] = false;
                    let (base, amp) = match class {
                        TerrainClass::Trail => (app.trail, app.texture[0]),
                        TerrainClass::Grass => (app.grass, app.texture[1]),
                        TerrainClass::Obstacle => (app.obstacle, app.texture[2]),
                    };
                    let t = hash01(tex_seed, (p.x * 5.0).floor() as i64, (p.y * 5.0 + p.z * 3.0).floor() as i64) * 2.0 - 1.0;
                    let haze = 1.0 - (-r / 400.0).exp();
                    [0, 1, 2].map(|c| (base[c] + amp * t) * (1.0 - haze) + app.haze[c] * haze + n)
                }
            };
            frame.image.put_pixel(i as u32, j as u32, Rgb(rgb.map(clamp_u8)));
        }
    }
    frame
}

/// Replaces an image with a near-black noisy frame.
pub fn corrupt_frame(image: &mut RgbImage, seed: u64, frame_index: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0xD80F ^ frame_index));
    let n = Normal::new(8.0, 3.0).expect("valid normal");
    for p in image.pixels_mut() {
        let v = clamp_u8(n.sample(&mut rng));
        *p = Rgb([v, v, v]);
    }
}

/// Corrupts frames whose timestamps fall in `[start, end)`. Returns how many
/// were replaced.
pub fn inject_view_drop(frames: &mut [(f64, RgbImage)], start: f64, end: f64, seed: u64) -> usize {
    let mut n = 0;
    for (i, (t, img)) in frames.iter_mut().enumerate() {
        if *t >= start && *t < end {
            corrupt_frame(img, seed, i as u64);
            n += 1;
        }
    }
    n
}
