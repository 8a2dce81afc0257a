//! Robot-centered sparse voxel map accumulating registered LiDAR scans.
//!
//! Each occupied voxel keeps sufficient statistics of its points (count,
//! coordinate sum, coordinate second moment, maximum height) instead of the
//! points themselves. Coordinates are quantized relative to the voxel's
//! minimum corner to `resolution / 2^28` (about 1 nm at 0.25 m) and summed
//! in 128-bit integers, so accumulation is exact: integrating scans in any
//! order yields bit-identical statistics, and the covariance numerator
//! `n·Σxxᵀ − ΣxΣxᵀ` is computed without cancellation.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Matrix3;
use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::geometry::{Pose, Vec3};

/// Quantization steps per voxel edge.
const QUANT_BITS: u32 = 28;
const QUANT_STEPS: i64 = 1 << QUANT_BITS;

/// Integer voxel coordinates: `floor(p / resolution)` per axis.
pub type VoxelKey = [i32; 3];

/// Exact integer point moments relative to a voxel-aligned origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Moments {
    pub count: u64,
    /// Σ q, in quantization units.
    pub sum: [i128; 3],
    /// Σ q qᵀ as (xx, xy, xz, yy, yz, zz).
    pub second: [i128; 6],
}

impl Moments {
    fn add_point(&mut self, q: [i64; 3]) {
        let q = q.map(i128::from);
        self.count += 1;
        for a in 0..3 {
            self.sum[a] += q[a];
        }
        self.second[0] += q[0] * q[0];
        self.second[1] += q[0] * q[1];
        self.second[2] += q[0] * q[2];
        self.second[3] += q[1] * q[1];
        self.second[4] += q[1] * q[2];
        self.second[5] += q[2] * q[2];
    }

    /// Adds moments whose origin is `offset` voxels away from this one's.
    pub fn add_shifted(&mut self, other: &Moments, offset: [i32; 3]) {
        let n = other.count as i128;
        let d = offset.map(|o| o as i128 * QUANT_STEPS as i128);
        let s = other.sum;
        // Σ(q + d) = Σq + n d;  Σ(q+d)(q+d)ᵀ = Σqqᵀ + Σq dᵀ + d Σqᵀ + n d dᵀ.
        let pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
        for (k, &(i, j)) in pairs.iter().enumerate() {
            self.second[k] += other.second[k] + s[i] * d[j] + d[i] * s[j] + n * d[i] * d[j];
        }
        for a in 0..3 {
            self.sum[a] += s[a] + n * d[a];
        }
        self.count += other.count;
    }

    /// Point covariance (population, divided by n) in squared meters.
    pub fn covariance(&self, resolution: f64) -> Matrix3<f64> {
        let n = self.count as i128;
        if n == 0 {
            return Matrix3::zeros();
        }
        let s = self.sum;
        let unit = resolution / QUANT_STEPS as f64;
        let scale = unit * unit / (self.count as f64 * self.count as f64);
        let c = |k: usize, i: usize, j: usize| (n * self.second[k] - s[i] * s[j]) as f64 * scale;
        let (xx, xy, xz, yy, yz, zz) = (c(0, 0, 0), c(1, 0, 1), c(2, 0, 2), c(3, 1, 1), c(4, 1, 2), c(5, 2, 2));
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    /// Eigenvalues of the covariance, sorted descending and clamped at zero.
    pub fn eigenvalues(&self, resolution: f64) -> Result<[f64; 3]> {
        if self.count < 3 {
            return Err(Error::InsufficientPoints {
                count: self.count,
                required: 3,
            });
        }
        Ok(sorted_eigenvalues(&self.covariance(resolution)))
    }
}

/// Eigenvalues of a symmetric 3×3 matrix, descending, clamped at zero.
pub fn sorted_eigenvalues(m: &Matrix3<f64>) -> [f64; 3] {
    let ev = m.symmetric_eigenvalues();
    let mut l = [ev[0].max(0.0), ev[1].max(0.0), ev[2].max(0.0)];
    l.sort_by(|a, b| b.total_cmp(a));
    l
}

/// Per-voxel statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelStats {
    pub moments: Moments,
    /// Highest point z, world frame.
    pub max_z: f64,
    /// Traversability cost in [0, 10], assigned by labeling.
    pub cost: Option<f32>,
}

impl VoxelStats {
    pub fn count(&self) -> u64 {
        self.moments.count
    }
}

/// A LiDAR scan in the sensor frame plus its registered sensor pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudScan {
    pub frame_id: u32,
    pub timestamp: f64,
    /// Sensor pose in the world (registration result).
    pub pose: Pose,
    pub points: Vec<Vec3>,
}

/// Geometry of the voxel map.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VoxelMapConfig {
    pub resolution: f64,
    /// Square footprint edge length in meters.
    pub extent_xy: f64,
    /// Vertical extent, centered on the map center height.
    pub extent_z: f64,
}

impl Default for VoxelMapConfig {
    fn default() -> Self {
        Self {
            resolution: 0.25,
            extent_xy: 120.0,
            extent_z: 20.0,
        }
    }
}

impl VoxelMapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution > 0.0 && self.extent_xy >= self.resolution && self.extent_z >= self.resolution {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid voxel map config {self:?}")))
        }
    }
}

/// Sparse, robot-centered voxel grid. Voxels are addressed by world-frame
/// integer keys, so recentering scrolls the window without resampling.
#[derive(Debug, Clone)]
pub struct VoxelMap {
    config: VoxelMapConfig,
    center: Vec3,
    voxels: FxHashMap<VoxelKey, VoxelStats>,
    last_update: Option<f64>,
    dropped_nonfinite: u64,
    dropped_outside: u64,
}

impl VoxelMap {
    pub fn new(config: VoxelMapConfig, center: Vec3) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            center,
            voxels: FxHashMap::default(),
            last_update: None,
            dropped_nonfinite: 0,
            dropped_outside: 0,
        })
    }

    pub fn config(&self) -> &VoxelMapConfig {
        &self.config
    }

    pub fn resolution(&self) -> f64 {
        self.config.resolution
    }

    pub fn center(&self) -> Vec3 {
        self.center
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn last_update(&self) -> Option<f64> {
        self.last_update
    }

    /// Points dropped for non-finite coordinates.
    pub fn dropped_nonfinite(&self) -> u64 {
        self.dropped_nonfinite
    }

    /// Points dropped for falling outside the extent.
    pub fn dropped_outside(&self) -> u64 {
        self.dropped_outside
    }

    /// Upper bound on the number of voxels the extent can hold.
    pub fn capacity_bound(&self) -> u64 {
        let c = &self.config;
        let nxy = (c.extent_xy / c.resolution).ceil() as u64 + 1;
        let nz = (c.extent_z / c.resolution).ceil() as u64 + 1;
        nxy * nxy * nz
    }

    pub fn key_of(&self, p: &Vec3) -> VoxelKey {
        let r = self.config.resolution;
        [
            (p.x / r).floor() as i32,
            (p.y / r).floor() as i32,
            (p.z / r).floor() as i32,
        ]
    }

    pub fn voxel_center(&self, key: &VoxelKey) -> Vec3 {
        let r = self.config.resolution;
        Vec3::new(
            (key[0] as f64 + 0.5) * r,
            (key[1] as f64 + 0.5) * r,
            (key[2] as f64 + 0.5) * r,
        )
    }

    /// Minimum corner of a voxel.
    pub fn voxel_origin(&self, key: &VoxelKey) -> Vec3 {
        let r = self.config.resolution;
        Vec3::new(key[0] as f64 * r, key[1] as f64 * r, key[2] as f64 * r)
    }

    /// Whether a voxel's center lies inside the current window.
    pub fn in_extent(&self, key: &VoxelKey) -> bool {
        let c = self.voxel_center(key);
        let hxy = self.config.extent_xy / 2.0;
        let hz = self.config.extent_z / 2.0;
        let inside = |v: f64, lo: f64, half: f64| v >= lo - half && v < lo + half;
        inside(c.x, self.center.x, hxy) && inside(c.y, self.center.y, hxy) && inside(c.z, self.center.z, hz)
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VoxelStats> {
        self.voxels.get(key)
    }

    pub fn get_mut(&mut self, key: &VoxelKey) -> Option<&mut VoxelStats> {
        self.voxels.get_mut(key)
    }

    /// Iterates occupied voxels in arbitrary (but deterministic) order.
    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &VoxelStats)> {
        self.voxels.iter()
    }

    /// Occupied keys in sorted order.
    pub fn sorted_keys(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self.voxels.keys().copied().collect();
        keys.sort_unstable();
        keys
    }

    fn quantize(&self, key: &VoxelKey, p: &Vec3) -> [i64; 3] {
        let origin = self.voxel_origin(key);
        let scale = QUANT_STEPS as f64 / self.config.resolution;
        let q = |v: f64| ((v * scale).floor() as i64).clamp(0, QUANT_STEPS - 1);
        [q(p.x - origin.x), q(p.y - origin.y), q(p.z - origin.z)]
    }

    /// Folds one world-frame point into the map. Returns `false` if the point
    /// was dropped.
    pub fn insert_point(&mut self, p: &Vec3) -> bool {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            self.dropped_nonfinite += 1;
            return false;
        }
        let key = self.key_of(p);
        if !self.in_extent(&key) {
            self.dropped_outside += 1;
            return false;
        }
        let q = self.quantize(&key, p);
        let entry = self.voxels.entry(key).or_insert(VoxelStats {
            moments: Moments::default(),
            max_z: f64::NEG_INFINITY,
            cost: None,
        });
        entry.moments.add_point(q);
        entry.max_z = entry.max_z.max(p.z);
        true
    }

    /// Transforms a scan into the world frame and accumulates it.
    ///
    /// Non-finite points and points outside the extent are dropped and
    /// counted. A scan older than the last integrated one is rejected.
    pub fn integrate_scan(&mut self, scan: &PointCloudScan) -> Result<()> {
        if let Some(last) = self.last_update {
            if scan.timestamp < last {
                return Err(Error::InvalidInput(format!(
                    "scan at t={} is older than last update t={last}",
                    scan.timestamp
                )));
            }
        }
        for p in &scan.points {
            let w = scan.pose.to_world(p);
            self.insert_point(&w);
        }
        self.last_update = Some(scan.timestamp);
        Ok(())
    }

    /// Moves the window center. Voxels whose centers leave the extent are
    /// discarded; the rest are untouched.
    pub fn recenter(&mut self, new_center: Vec3) {
        self.center = new_center;
        let cfg = self.config;
        let center = self.center;
        let probe = VoxelMap {
            config: cfg,
            center,
            voxels: FxHashMap::default(),
            last_update: None,
            dropped_nonfinite: 0,
            dropped_outside: 0,
        };
        self.voxels.retain(|k, _| probe.in_extent(k));
    }

    /// Eigenvalues (λ1 ≥ λ2 ≥ λ3 ≥ 0) of a voxel's point covariance.
    pub fn voxel_eigenvalues(&self, key: &VoxelKey) -> Result<[f64; 3]> {
        let v = self
            .voxels
            .get(key)
            .ok_or_else(|| Error::InvalidInput(format!("voxel {key:?} is not occupied")))?;
        v.moments.eigenvalues(self.config.resolution)
    }

    /// Mean point position of a voxel.
    pub fn voxel_mean(&self, key: &VoxelKey) -> Option<Vec3> {
        self.voxels.get(key).map(|v| {
            let n = v.moments.count as f64;
            let unit = self.config.resolution / QUANT_STEPS as f64;
            let o = self.voxel_origin(key);
            Vec3::new(
                o.x + v.moments.sum[0] as f64 * unit / n,
                o.y + v.moments.sum[1] as f64 * unit / n,
                o.z + v.moments.sum[2] as f64 * unit / n,
            )
        })
    }

    /// World-frame coordinate sum of a voxel's points (up to quantization).
    pub fn voxel_sum(&self, key: &VoxelKey) -> Option<Vec3> {
        self.voxel_mean(key)
            .zip(self.voxels.get(key))
            .map(|(m, v)| m * v.moments.count as f64)
    }

    /// Clears every voxel's label cost.
    pub fn clear_costs(&mut self) {
        for v in self.voxels.values_mut() {
            v.cost = None;
        }
    }

    /// Removes every voxel, keeping the window and counters.
    pub fn clear(&mut self) {
        self.voxels.clear();
        self.last_update = None;
    }

    /// A copy of the map restricted to voxels accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&VoxelKey, &VoxelStats) -> bool) -> VoxelMap {
        VoxelMap {
            config: self.config,
            center: self.center,
            voxels: self
                .voxels
                .iter()
                .filter(|(k, v)| keep(k, v))
                .map(|(k, v)| (*k, *v))
                .collect(),
            last_update: self.last_update,
            dropped_nonfinite: self.dropped_nonfinite,
            dropped_outside: self.dropped_outside,
        }
    }

    /// A snapshot for concurrent readers.
    pub fn snapshot(&self) -> VoxelMap {
        self.clone()
    }
}

const SCAN_MAGIC: &[u8; 4] = b"NFSC";
const SCAN_VERSION: u32 = 1;

/// Writes a scan in the binary layout (all little-endian):
///
/// ```text
/// offset  size  field
/// 0       4     magic "NFSC"
/// 4       4     u32 version (1)
/// 8       4     u32 frame id
/// 12      8     u64 point count N
/// 20      8     f64 timestamp
/// 28      56    f64 x7 sensor pose: x y z qw qx qy qz
/// 84      24N   f64 x3 per point, sensor frame
/// ```
pub fn write_scan_binary(path: &Path, scan: &PointCloudScan) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut buf = Vec::with_capacity(84 + 24 * scan.points.len());
    buf.extend_from_slice(SCAN_MAGIC);
    buf.extend_from_slice(&SCAN_VERSION.to_le_bytes());
    buf.extend_from_slice(&scan.frame_id.to_le_bytes());
    buf.extend_from_slice(&(scan.points.len() as u64).to_le_bytes());
    buf.extend_from_slice(&scan.timestamp.to_le_bytes());
    for v in pose_fields(&scan.pose) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in &scan.points {
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scan_binary(path: &Path) -> Result<PointCloudScan> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format("binary scan", path, reason.to_string());
    if bytes.len() < 84 || &bytes[0..4] != SCAN_MAGIC {
        return Err(bad("missing header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != SCAN_VERSION {
        return Err(bad("unsupported version"));
    }
    let frame_id = u32_at(8);
    let n = u64_at(12) as usize;
    let timestamp = f64_at(20);
    if bytes.len() != 84 + 24 * n {
        return Err(bad("length does not match point count"));
    }
    let pf: Vec<f64> = (0..7).map(|i| f64_at(28 + 8 * i)).collect();
    let pose = Pose::from_wxyz(Vec3::new(pf[0], pf[1], pf[2]), pf[3], pf[4], pf[5], pf[6], timestamp)?;
    let points = (0..n)
        .map(|i| {
            let o = 84 + 24 * i;
            Vec3::new(f64_at(o), f64_at(o + 8), f64_at(o + 16))
        })
        .collect();
    Ok(PointCloudScan {
        frame_id,
        timestamp,
        pose,
        points,
    })
}

/// Writes a scan as text: a header of `key value...` lines (`count`,
/// `frame_id`, `timestamp`, `pose x y z qw qx qy qz`) followed by one
/// `x y z` line per point.
pub fn write_scan_text(path: &Path, scan: &PointCloudScan) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let p = pose_fields(&scan.pose);
    let mut out = format!(
        "# nearfar scan v1\ncount {}\nframe_id {}\ntimestamp {}\npose {} {} {} {} {} {} {}\n",
        scan.points.len(),
        scan.frame_id,
        scan.timestamp,
        p[0],
        p[1],
        p[2],
        p[3],
        p[4],
        p[5],
        p[6]
    );
    for q in &scan.points {
        out.push_str(&format!("{} {} {}\n", q.x, q.y, q.z));
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scan_text(path: &Path) -> Result<PointCloudScan> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::format("text scan", path, reason);
    let mut count = None;
    let mut frame_id = None;
    let mut timestamp = None;
    let mut pose_vals = None;
    let mut points = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let head = parts.next().unwrap_or_default();
        let parse_all = |it: std::str::SplitWhitespace| -> Result<Vec<f64>> {
            it.map(|s| s.parse::<f64>().map_err(|e| bad(format!("{e} in `{line}`"))))
                .collect()
        };
        match head {
            "count" => count = Some(parse_all(parts)?.first().copied().unwrap_or(-1.0) as i64),
            "frame_id" => frame_id = parse_all(parts)?.first().map(|v| *v as u32),
            "timestamp" => timestamp = parse_all(parts)?.first().copied(),
            "pose" => pose_vals = Some(parse_all(parts)?),
            _ => {
                let mut vals = vec![head.parse::<f64>().map_err(|e| bad(format!("{e} in `{line}`")))?];
                vals.extend(parse_all(parts)?);
                if vals.len() != 3 {
                    return Err(bad(format!("expected 3 coordinates in `{line}`")));
                }
                points.push(Vec3::new(vals[0], vals[1], vals[2]));
            }
        }
    }
    let timestamp = timestamp.ok_or_else(|| bad("missing timestamp".into()))?;
    let pv = pose_vals.ok_or_else(|| bad("missing pose".into()))?;
    if pv.len() != 7 {
        return Err(bad("pose needs 7 values".into()));
    }
    if count != Some(points.len() as i64) {
        return Err(bad(format!("count {count:?} does not match {} points", points.len())));
    }
    Ok(PointCloudScan {
        frame_id: frame_id.unwrap_or(0),
        timestamp,
        pose: Pose::from_wxyz(Vec3::new(pv[0], pv[1], pv[2]), pv[3], pv[4], pv[5], pv[6], timestamp)?,
        points,
    })
}

fn pose_fields(p: &Pose) -> [f64; 7] {
    let q = p.orientation.quaternion();
    [p.position.x, p.position.y, p.position.z, q.w, q.i, q.j, q.k]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map() -> VoxelMap {
        VoxelMap::new(VoxelMapConfig::default(), Vec3::zeros()).unwrap()
    }

    fn scan(points: Vec<Vec3>, t: f64) -> PointCloudScan {
        PointCloudScan {
            frame_id: 0,
            timestamp: t,
            pose: Pose::identity(),
            points,
        }
    }

    #[test]
    fn single_point() {
        let mut m = map();
        m.integrate_scan(&scan(vec![Vec3::new(1.0, 2.0, 0.3)], 0.0)).unwrap();
        assert_eq!(m.len(), 1);
        let (_, v) = m.iter().next().unwrap();
        assert_eq!(v.count(), 1);
    }

    #[test]
    fn two_points_same_voxel() {
        let mut m = map();
        let a = Vec3::new(1.01, 2.02, 0.03);
        let b = Vec3::new(1.2, 2.1, 0.2);
        m.integrate_scan(&scan(vec![a, b], 0.0)).unwrap();
        assert_eq!(m.len(), 1);
        let key = m.key_of(&a);
        assert_eq!(m.get(&key).unwrap().count(), 2);
        let s = m.voxel_sum(&key).unwrap();
        assert!((s - (a + b)).norm() < 1e-8);
        assert_eq!(m.get(&key).unwrap().max_z, 0.2);
    }

    #[test]
    fn non_finite_points_are_counted_not_fatal() {
        let mut m = map();
        m.integrate_scan(&scan(vec![Vec3::new(f64::NAN, 0.0, 0.0), Vec3::new(0.1, 0.1, 0.1)], 0.0))
            .unwrap();
        assert_eq!(m.dropped_nonfinite(), 1);
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn out_of_order_scan_rejected() {
        let mut m = map();
        m.integrate_scan(&scan(vec![Vec3::zeros()], 2.0)).unwrap();
        assert!(m.integrate_scan(&scan(vec![Vec3::zeros()], 1.0)).is_err());
    }

    #[test]
    fn points_outside_extent_ignored() {
        let mut m = map();
        m.integrate_scan(&scan(vec![Vec3::new(61.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 11.0)], 0.0))
            .unwrap();
        assert!(m.is_empty());
        assert_eq!(m.dropped_outside(), 2);
    }

    #[test]
    fn recenter_identity_and_full_scroll() {
        let mut m = map();
        let pts: Vec<Vec3> = (0..100).map(|i| Vec3::new(i as f64 * 0.5 - 25.0, 3.0, 0.1)).collect();
        m.integrate_scan(&scan(pts, 0.0)).unwrap();
        let before = m.sorted_keys();
        m.recenter(Vec3::zeros());
        assert_eq!(m.sorted_keys(), before);
        m.recenter(Vec3::new(120.0, 0.0, 0.0));
        assert!(m.is_empty());
    }

    #[test]
    fn collinear_and_coplanar_degeneracy() {
        let mut m = map();
        let line = [
            Vec3::new(0.01, 0.01, 0.01),
            Vec3::new(0.11, 0.06, 0.03),
            Vec3::new(0.21, 0.11, 0.05),
        ];
        m.integrate_scan(&scan(line.to_vec(), 0.0)).unwrap();
        let l = m.voxel_eigenvalues(&m.key_of(&line[0])).unwrap();
        assert!(l[0] > 0.0 && l[1] < 1e-9 && l[2] < 1e-9, "{l:?}");

        let mut m = map();
        let plane = [
            Vec3::new(0.01, 0.01, 0.1),
            Vec3::new(0.2, 0.02, 0.1),
            Vec3::new(0.03, 0.2, 0.1),
            Vec3::new(0.2, 0.2, 0.1),
        ];
        m.integrate_scan(&scan(plane.to_vec(), 0.0)).unwrap();
        let l = m.voxel_eigenvalues(&m.key_of(&plane[0])).unwrap();
        assert!(l[0] > 0.0 && l[1] > 0.0 && l[2] < 1e-9, "{l:?}");
    }

    #[test]
    fn too_few_points_for_eigen_analysis() {
        let mut m = map();
        m.integrate_scan(&scan(vec![Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.2, 0.1, 0.1)], 0.0))
            .unwrap();
        let key = m.key_of(&Vec3::new(0.1, 0.1, 0.1));
        assert!(matches!(
            m.voxel_eigenvalues(&key),
            Err(Error::InsufficientPoints { count: 2, .. })
        ));
    }

    #[test]
    fn shifted_moments_match_direct_accumulation() {
        // Two points in adjacent voxels merged relative to the lower voxel
        // must equal accumulating both relative to that voxel directly.
        let mut m = map();
        let a = Vec3::new(0.1, 0.1, 0.1);
        let b = Vec3::new(0.1, 0.1, 0.35);
        m.integrate_scan(&scan(vec![a, b], 0.0)).unwrap();
        let ka = m.key_of(&a);
        let kb = m.key_of(&b);
        let mut merged = m.get(&ka).unwrap().moments;
        merged.add_shifted(&m.get(&kb).unwrap().moments, [0, 0, 1]);
        assert_eq!(merged.count, 2);
        let cov = merged.covariance(0.25);
        assert!((cov[(2, 2)] - 0.125f64.powi(2)).abs() < 1e-12);
        assert!(cov[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn scan_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = PointCloudScan {
            frame_id: 7,
            timestamp: 1.25,
            pose: Pose::from_xyz_rpy(Vec3::new(1.0, -2.0, 0.5), 0.0, 0.1, 1.0, 1.25),
            points: vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.25, 1e-7)],
        };
        let bin = dir.path().join("s.bin");
        write_scan_binary(&bin, &s).unwrap();
        let b = read_scan_binary(&bin).unwrap();
        assert_eq!(b.points, s.points);
        assert_eq!(b.frame_id, 7);
        assert_eq!(b.timestamp, 1.25);
        assert_eq!(std::fs::metadata(&bin).unwrap().len(), 84 + 48);

        let txt = dir.path().join("s.txt");
        write_scan_text(&txt, &s).unwrap();
        let t = read_scan_text(&txt).unwrap();
        assert_eq!(t.points, s.points);
        assert!((t.pose.position - s.pose.position).norm() < 1e-12);
    }

    #[test]
    fn corrupt_binary_scan_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"NFSC\x01\x00\x00\x00").unwrap();
        assert!(read_scan_binary(&p).is_err());
    }
}
