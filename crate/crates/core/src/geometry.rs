//! Rigid transforms and the pinhole camera model.
//!
//! Frame conventions:
//!
//! * World and vehicle body frames are x-forward, y-left, z-up.
//! * The camera optical frame is z-forward, x-right, y-down. A camera is
//!   placed in the world with an ordinary body-frame [`Pose`]; the single
//!   conversion between the two is [`optical_from_body`] /
//!   [`body_from_optical`].
//!
//! A pose rotated +90° about z maps the world point (1, 0, 0) to (0, −1, 0)
//! in its own frame.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// A timestamped rigid body pose: body frame to world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
    /// Seconds on the simulated clock.
    pub timestamp: f64,
}

impl Pose {
    pub fn new(position: Vec3, orientation: UnitQuaternion<f64>, timestamp: f64) -> Self {
        Self {
            position,
            orientation: renormalize(orientation),
            timestamp,
        }
    }

    pub fn identity() -> Self {
        Self::new(Vec3::zeros(), UnitQuaternion::identity(), 0.0)
    }

    /// Pose from position and roll/pitch/yaw (radians, applied z-y-x).
    pub fn from_xyz_rpy(position: Vec3, roll: f64, pitch: f64, yaw: f64, timestamp: f64) -> Self {
        Self::new(
            position,
            UnitQuaternion::from_euler_angles(roll, pitch, yaw),
            timestamp,
        )
    }

    /// Pose from a `wxyz` quaternion. Quaternions off unit norm by more
    /// than 1e-12 are normalized; others are taken verbatim so stored poses
    /// read back bit-identical.
    pub fn from_wxyz(position: Vec3, w: f64, x: f64, y: f64, z: f64, timestamp: f64) -> Result<Self> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidInput(format!("degenerate quaternion ({w}, {x}, {y}, {z})")));
        }
        let q = if (n - 1.0).abs() <= 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Self::new(position, q, timestamp))
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.orientation)
    }

    /// `self ∘ local`: places a pose expressed in this pose's frame into the
    /// world. The result carries this pose's timestamp.
    pub fn compose(&self, local: &Mount) -> Pose {
        let iso = self.isometry() * local.isometry();
        Pose::new(iso.translation.vector, iso.rotation, self.timestamp)
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.isometry().inverse();
        Pose::new(inv.translation.vector, inv.rotation, self.timestamp)
    }

    /// Maps a world-frame point into this pose's body frame.
    pub fn transform_point(&self, world: &Vec3) -> Vec3 {
        self.orientation.inverse_transform_vector(&(world - self.position))
    }

    /// Maps a body-frame point into the world frame.
    pub fn to_world(&self, local: &Vec3) -> Vec3 {
        self.orientation.transform_vector(local) + self.position
    }

    /// Heading angle about world z.
    pub fn yaw(&self) -> f64 {
        self.orientation.euler_angles().2
    }

    pub fn horizontal_distance(&self, p: &Vec3) -> f64 {
        let d = p - self.position;
        d.x.hypot(d.y)
    }
}

fn renormalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(q.into_inner())
}

/// Free function form of [`Pose::transform_point`].
pub fn transform_point(pose: &Pose, world: &Vec3) -> Vec3 {
    pose.transform_point(world)
}

/// A fixed sensor mounting: the sensor pose in the vehicle body frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Mount {
    /// Offset in meters, body frame.
    pub translation: [f64; 3],
    /// Roll, pitch, yaw in degrees. Positive pitch tilts the x-axis down.
    pub rpy_deg: [f64; 3],
}

impl Mount {
    pub fn isometry(&self) -> Isometry3<f64> {
        let [r, p, y] = self.rpy_deg.map(f64::to_radians);
        Isometry3::from_parts(
            Translation3::new(self.translation[0], self.translation[1], self.translation[2]),
            UnitQuaternion::from_euler_angles(r, p, y),
        )
    }
}

/// Converts a body-frame (x-fwd, y-left, z-up) vector to the optical frame.
#[inline]
pub fn optical_from_body(v: &Vec3) -> Vec3 {
    Vec3::new(-v.y, -v.z, v.x)
}

/// Converts an optical-frame (x-right, y-down, z-fwd) vector to the body frame.
#[inline]
pub fn body_from_optical(v: &Vec3) -> Vec3 {
    Vec3::new(v.z, -v.x, -v.y)
}

/// Default minimum depth for [`project_pixel`].
pub const DEFAULT_Z_MIN: f64 = 0.1;

/// Pinhole intrinsics. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)` in
/// continuous image coordinates; rays are cast through pixel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image center and the given
    /// horizontal field of view.
    pub fn centered(width: u32, height: u32, hfov_deg: f64) -> Result<Self> {
        let f = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid camera intrinsics {self:?}")))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Unnormalized optical-frame ray through the center of pixel `(i, j)`.
    #[inline]
    pub fn pixel_ray(&self, i: u32, j: u32) -> Vec3 {
        Vec3::new(
            (i as f64 + 0.5 - self.cx) / self.fx,
            (j as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        )
    }

    /// Pixel index containing a continuous image coordinate, if in bounds.
    #[inline]
    pub fn pixel_index(&self, uv: (f64, f64)) -> Option<(u32, u32)> {
        let (u, v) = uv;
        if u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64 {
            Some((u as u32, v as u32))
        } else {
            None
        }
    }
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 256.0,
            cy: 192.0,
            width: 512,
            height: 384,
        }
    }
}

/// Projects an optical-frame point with the pinhole model. Returns `None`
/// for points at or behind `z_min` or outside the image.
pub fn project_pixel(intrinsics: &CameraIntrinsics, camera_point: &Vec3) -> Option<(f64, f64)> {
    project_pixel_with(intrinsics, camera_point, DEFAULT_Z_MIN)
}

pub fn project_pixel_with(intrinsics: &CameraIntrinsics, p: &Vec3, z_min: f64) -> Option<(f64, f64)> {
    if !(p.z > z_min) {
        return None;
    }
    let u = intrinsics.fx * p.x / p.z + intrinsics.cx;
    let v = intrinsics.fy * p.y / p.z + intrinsics.cy;
    intrinsics.pixel_index((u, v)).map(|_| (u, v))
}

/// Projects a world point seen from a camera body pose.
pub fn project_world(intrinsics: &CameraIntrinsics, camera: &Pose, world: &Vec3) -> Option<(f64, f64)> {
    project_pixel(intrinsics, &optical_from_body(&camera.transform_point(world)))
}

/// World-frame unit ray direction through the center of pixel `(i, j)`.
pub fn world_ray(intrinsics: &CameraIntrinsics, camera: &Pose, i: u32, j: u32) -> Vec3 {
    let body = body_from_optical(&intrinsics.pixel_ray(i, j));
    camera.orientation.transform_vector(&body).normalize()
}

pub fn point3(v: &Vec3) -> Point3<f64> {
    Point3::from(*v)
}

/// Writes a pose stream: one `timestamp x y z qw qx qy qz` record per line,
/// whitespace separated, `#` starts a comment line.
pub fn write_pose_stream(path: &Path, poses: &[Pose]) -> Result<()> {
    let mut out = String::from("# timestamp x y z qw qx qy qz\n");
    for p in poses {
        let q = p.orientation.quaternion();
        writeln!(
            out,
            "{} {} {} {} {} {} {} {}",
            p.timestamp, p.position.x, p.position.y, p.position.z, q.w, q.i, q.j, q.k
        )
        .expect("write to string");
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a pose stream written by [`write_pose_stream`]. Timestamps must be
/// non-negative and non-decreasing.
pub fn read_pose_stream(path: &Path) -> Result<Vec<Pose>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut poses: Vec<Pose> = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("pose stream", path, format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 8 {
            return Err(Error::format(
                "pose stream",
                path,
                format!("line {}: expected 8 fields, got {}", lineno + 1, vals.len()),
            ));
        }
        let t = vals[0];
        if !(t >= 0.0) || poses.last().is_some_and(|p| p.timestamp > t) {
            return Err(Error::format(
                "pose stream",
                path,
                format!("line {}: timestamp {t} is negative or decreasing", lineno + 1),
            ));
        }
        poses.push(Pose::from_wxyz(
            Vec3::new(vals[1], vals[2], vals[3]),
            vals[4],
            vals[5],
            vals[6],
            vals[7],
            t,
        )?);
    }
    Ok(poses)
}
