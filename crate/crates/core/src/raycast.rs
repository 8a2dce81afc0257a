//! Per-pixel raycasting through the voxel map.
//!
//! Rays are cast through pixel centers and walked voxel by voxel with the
//! Amanatides–Woo incremental traversal, so each ray costs time proportional
//! to the number of voxels it crosses rather than the number of occupied
//! voxels. The first occupied voxel along the ray is reported; anything
//! behind it is occluded.

use std::ops::Range;

use crate::geometry::{world_ray, CameraIntrinsics, Pose, Vec3};
use crate::par::{map_range, Execution};
use crate::voxel::{VoxelKey, VoxelMap};

/// The first voxel a pixel ray hits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    /// Distance from the camera center to the voxel entry point along the
    /// ray, meters. Always positive.
    pub depth: f64,
    pub key: VoxelKey,
    pub cost: Option<f32>,
}

/// Per-pixel raycast result, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RaycastImage {
    pub width: u32,
    pub height: u32,
    pub hits: Vec<Option<RayHit>>,
}

impl RaycastImage {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            hits: vec![None; width as usize * height as usize],
        }
    }

    pub fn get(&self, i: u32, j: u32) -> Option<&RayHit> {
        self.hits[(j * self.width + i) as usize].as_ref()
    }

    pub fn hit_count(&self) -> usize {
        self.hits.iter().filter(|h| h.is_some()).count()
    }

    /// Per-pixel cost, `None` where there is no hit or the hit is unlabeled.
    pub fn costs(&self) -> Vec<Option<f32>> {
        self.hits.iter().map(|h| h.and_then(|h| h.cost)).collect()
    }
}

/// Column-wise occupancy bounds used to skip empty space quickly.
pub struct RayIndex<'a> {
    map: &'a VoxelMap,
    min: [i32; 3],
    max: [i32; 3],
    nx: usize,
    /// Per (x, y) column: occupied z range, or `(1, 0)` when empty.
    columns: Vec<(i32, i32)>,
}

impl<'a> RayIndex<'a> {
    pub fn new(map: &'a VoxelMap) -> Option<Self> {
        let mut min = [i32::MAX; 3];
        let mut max = [i32::MIN; 3];
        for (k, _) in map.iter() {
            for a in 0..3 {
                min[a] = min[a].min(k[a]);
                max[a] = max[a].max(k[a]);
            }
        }
        if map.is_empty() {
            return None;
        }
        let nx = (max[0] - min[0] + 1) as usize;
        let ny = (max[1] - min[1] + 1) as usize;
        let mut columns = vec![(1, 0); nx * ny];
        for (k, _) in map.iter() {
            let c = &mut columns[(k[1] - min[1]) as usize * nx + (k[0] - min[0]) as usize];
            if c.0 > c.1 {
                *c = (k[2], k[2]);
            } else {
                c.0 = c.0.min(k[2]);
                c.1 = c.1.max(k[2]);
            }
        }
        Some(Self {
            map,
            min,
            max,
            nx,
            columns,
        })
    }

    #[inline]
    fn occupied(&self, k: &VoxelKey) -> bool {
        let (lo, hi) = self.columns[(k[1] - self.min[1]) as usize * self.nx + (k[0] - self.min[0]) as usize];
        k[2] >= lo && k[2] <= hi && self.map.get(k).is_some()
    }

    /// Walks a ray from `origin` along unit `dir` up to `max_range` meters.
    pub fn cast(&self, origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<RayHit> {
        let res = self.map.resolution();
        let o = origin / res;
        let t_limit = max_range / res;

        // Clip to the occupied bounding box (in voxel units).
        let mut t0 = 0.0f64;
        let mut t1 = t_limit;
        for a in 0..3 {
            let lo = self.min[a] as f64;
            let hi = self.max[a] as f64 + 1.0;
            if dir[a].abs() < 1e-15 {
                if o[a] < lo || o[a] >= hi {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[a];
                let (mut ta, mut tb) = ((lo - o[a]) * inv, (hi - o[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        if t0 > t1 {
            return None;
        }

        let start = o + dir * t0;
        let mut key = [0i32; 3];
        let mut step = [0i32; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let mut k = start[a].floor() as i32;
            // Entering through the upper face of the box lands exactly on the
            // boundary; nudge back inside.
            if dir[a] < 0.0 && start[a] == start[a].floor() && t0 > 0.0 {
                k -= 1;
            }
            key[a] = k.clamp(self.min[a], self.max[a]);
            if dir[a] > 0.0 {
                step[a] = 1;
                t_max[a] = t0 + ((key[a] + 1) as f64 - start[a]) / dir[a];
                t_delta[a] = 1.0 / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                t_max[a] = t0 + (key[a] as f64 - start[a]) / dir[a];
                t_delta[a] = -1.0 / dir[a];
            }
        }

        let mut t_enter = t0;
        loop {
            if self.occupied(&key) {
                let v = self.map.get(&key).expect("occupied");
                return Some(RayHit {
                    depth: (t_enter * res).max(f64::MIN_POSITIVE),
                    key,
                    cost: v.cost,
                });
            }
            let a = if t_max[0] < t_max[1] {
                if t_max[0] < t_max[2] {
                    0
                } else {
                    2
                }
            } else if t_max[1] < t_max[2] {
                1
            } else {
                2
            };
            t_enter = t_max[a];
            if t_enter > t1 {
                return None;
            }
            key[a] += step[a];
            if key[a] < self.min[a] || key[a] > self.max[a] {
                return None;
            }
            t_max[a] += t_delta[a];
        }
    }
}

/// Raycasts every pixel of the image.
pub fn raycast(map: &VoxelMap, camera: &Pose, intrinsics: &CameraIntrinsics, max_range: f64) -> RaycastImage {
    raycast_rows(map, camera, intrinsics, max_range, 0..intrinsics.height, Execution::default())
}

/// Raycasts only image rows in `rows`; other pixels are misses.
pub fn raycast_rows(
    map: &VoxelMap,
    camera: &Pose,
    intrinsics: &CameraIntrinsics,
    max_range: f64,
    rows: Range<u32>,
    exec: Execution,
) -> RaycastImage {
    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut out = RaycastImage::empty(w, h);
    let Some(index) = RayIndex::new(map) else {
        return out;
    };
    let rows = rows.start.min(h)..rows.end.min(h);
    let n = (rows.end - rows.start) as usize * w as usize;
    let origin = camera.position;
    let hits = map_range(exec, n, |idx| {
        let i = (idx % w as usize) as u32;
        let j = rows.start + (idx / w as usize) as u32;
        let dir = world_ray(intrinsics, camera, i, j);
        index.cast(&origin, &dir, max_range)
    });
    let offset = rows.start as usize * w as usize;
    out.hits[offset..offset + n].copy_from_slice(&hits);
    out
}
