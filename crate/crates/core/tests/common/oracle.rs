//! Brute-force references the library is checked against.

use std::collections::VecDeque;

use nalgebra::Matrix3;
use nearfar::geometry::{world_ray, CameraIntrinsics, Pose, Vec3};
use nearfar::learner::{loss_and_grad, Regressor, Sample};
use nearfar::metrics::{ClassMask, CostClass};
use nearfar::voxel::{VoxelKey, VoxelMap};

/// Ray parameter interval `[t_in, t_out]` where a ray meets an axis-aligned
/// box, if it does in front of the origin.
pub fn slab(origin: &Vec3, dir: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] >= hi[a] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Nearest occupied voxel along a ray by testing every voxel.
pub fn nearest_voxel(map: &VoxelMap, origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<(f64, VoxelKey)> {
    let r = map.resolution();
    let mut best: Option<(f64, VoxelKey)> = None;
    for (k, _) in map.iter() {
        let lo = map.voxel_origin(k);
        let hi = lo + Vec3::new(r, r, r);
        if let Some((t, _)) = slab(origin, dir, &lo, &hi) {
            if t <= max_range && best.map_or(true, |(b, _)| t < b) {
                best = Some((t, *k));
            }
        }
    }
    best
}

/// Per-pixel z-buffer image by exhaustive voxel testing.
pub fn zbuffer(map: &VoxelMap, camera: &Pose, k: &CameraIntrinsics, max_range: f64) -> Vec<Option<(f64, VoxelKey)>> {
    let mut out = Vec::with_capacity(k.pixel_count());
    for j in 0..k.height {
        for i in 0..k.width {
            let dir = world_ray(k, camera, i, j);
            out.push(nearest_voxel(map, &camera.position, &dir, max_range));
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// descending.
pub fn jacobi_eigenvalues(m: &Matrix3<f64>) -> [f64; 3] {
    let mut a = *m;
    for _ in 0..100 {
        let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        if off < 1e-300 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[(p, q)].abs() < 1e-300 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut r = Matrix3::identity();
            r[(p, p)] = c;
            r[(q, q)] = c;
            r[(p, q)] = s;
            r[(q, p)] = -s;
            a = r.transpose() * a * r;
        }
    }
    let mut l = [a[(0, 0)], a[(1, 1)], a[(2, 2)]];
    l.sort_by(|x, y| y.total_cmp(x));
    l
}

/// Population covariance of points by the two-pass formula.
pub fn covariance(points: &[Vec3]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = p - mean;
        a + d * d.transpose()
    }) / n
}

/// Per-class IoU and mIoU by counting pixels one at a time.
pub fn iou_by_pixels(pairs: &[(&ClassMask, &ClassMask, &[bool])]) -> Option<([Option<f64>; 3], f64)> {
    let mut per_class = [None; 3];
    let (mut sum, mut n) = (0.0, 0);
    let mut any = false;
    for (c, class) in CostClass::KNOWN.iter().enumerate() {
        let (mut inter, mut union, mut gt_count) = (0u64, 0u64, 0u64);
        for (pred, gt, region) in pairs {
            for i in 0..gt.classes.len() {
                if !region[i] || gt.classes[i] == CostClass::Unknown {
                    continue;
                }
                any = true;
                let (g, p) = (gt.classes[i] == *class, pred.classes[i] == *class);
                gt_count += g as u64;
                inter += (g && p) as u64;
                union += (g || p) as u64;
            }
        }
        if gt_count > 0 {
            let iou = inter as f64 / union as f64;
            per_class[c] = Some(iou);
            sum += iou;
            n += 1;
        }
    }
    any.then(|| (per_class, sum / n as f64))
}

/// Least-recently-used bookkeeping by recency order.
#[derive(Debug, Default)]
pub struct ReferenceLru {
    order: VecDeque<u32>,
}

impl ReferenceLru {
    pub fn with(ids: &[u32]) -> Self {
        Self {
            order: ids.iter().copied().collect(),
        }
    }

    pub fn touch(&mut self, id: u32) {
        self.order.retain(|x| *x != id);
        self.order.push_back(id);
    }

    pub fn evict(&mut self) -> Option<u32> {
        self.order.pop_front()
    }

    pub fn ids(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.order.iter().copied().collect();
        v.sort_unstable();
        v
    }
}

/// Largest relative gap between the analytic loss gradient and central
/// finite differences.
pub fn gradient_error(model: &Regressor, samples: &[Sample]) -> f64 {
    let mut analytic = vec![0.0; model.params.len()];
    loss_and_grad(model, samples, Some(&mut analytic)).expect("labeled samples");
    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        let h = 1e-5 * model.params[i].abs().max(1.0);
        let mut plus = model.clone();
        plus.params[i] += h;
        let mut minus = model.clone();
        minus.params[i] -= h;
        let fp = loss_and_grad(&plus, samples, None).unwrap();
        let fm = loss_and_grad(&minus, samples, None).unwrap();
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
