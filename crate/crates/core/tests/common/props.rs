//! Randomized invariant checks shared by the property tests and the
//! acceptance runner. Each check takes a case count and returns the first
//! failure, if any.

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

use nearfar::config::Scenario;
use nearfar::encoder::EncodedFrame;
use nearfar::ensemble::{head_to_frames_distance, Ensemble, EnsembleConfig, Reason, Source};
use nearfar::geometry::{project_world, world_ray, CameraIntrinsics, Mount, Pose, Vec3};
use nearfar::labeling::{generate_label_mask, LabelConfig, LabelScheduler};
use nearfar::learner::{loss_and_grad, patch_targets, train_head, HeadKind, LearnerConfig, ModelHead, PatchTarget, Regressor, Sample};
use nearfar::metrics::{confusion, discretize, iou_from_confusion, miou, ClassMask, CostClass, CostImage};
use nearfar::par::Execution;
use nearfar::pipeline::{plan_for, run_sequence};
use nearfar::raycast::raycast;
use nearfar::sequence::{SensorSource, SimSource};
use nearfar::sim::{render_image, simulate_lidar, CameraConfig, LidarConfig, Palette, Scene, SceneParams, TerrainClass};
use nearfar::terrain::{estimate_ground, planarity, traversability_cost, TerrainConfig};
use nearfar::voxel::{PointCloudScan, VoxelMap, VoxelMapConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle;
use super::tiny_config;

pub type Check = fn(u32) -> Result<(), String>;

/// Every invariant, by module.
pub const ALL: &[(&str, Check)] = &[
    ("geometry: transform then inverse is identity", transform_inverse),
    ("geometry: raycast hit within a pixel of the projected voxel", projection_raycast),
    ("geometry: raycast depth is the minimum over the ray", raycast_minimum),
    ("voxel: accumulation is order independent", accumulation_order),
    ("voxel: covariance is positive semidefinite", covariance_psd),
    ("voxel: occupied count within the extent bound", memory_bound),
    ("terrain: obstacle branch exclusivity", cost_branches),
    ("terrain: cost monotonicity", cost_monotonicity),
    ("terrain: planarity scale invariance", planarity_scale),
    ("terrain: ground relaxation converges", relaxation_converges),
    ("labeling: pairs use scans up to t + d only", label_causality),
    ("labeling: labeled pixels match the projection oracle", label_oracle),
    ("learner: gradient matches finite differences", gradient_check),
    ("learner: training does not increase loss", loss_decreases),
    ("learner: unlabeled pixels never matter", unlabeled_independence),
    ("learner: unit weights give the masked mse", unit_weights),
    ("ensemble: head source implies similar and usable", gate_soundness),
    ("ensemble: no spawn when a head is within cd_new", spawn_monotonicity),
    ("ensemble: revisit reuses the first head", revisit_stability),
    ("ensemble: eviction follows least recent use", eviction_lru),
    ("metrics: iou symmetric and within [0, 1]", iou_symmetry),
    ("metrics: small shifts keep classes", discretize_shift),
    ("metrics: streaming miou equals the pixel oracle", streaming_miou),
    ("sim: identical seeds give identical streams", sim_determinism),
    ("sim: lidar points land on pixels of their class", sim_consistency),
    ("pipeline: deterministic, causal, boundary aligned", pipeline_runs),
];

/// Comparisons against brute-force references.
pub const ORACLES: &[(&str, Check)] = &[
    ("raycast vs z-buffer", raycast_minimum),
    ("eigenvalues vs Jacobi", eigen_oracle),
    ("miou vs pixel counting", streaming_miou),
    ("eviction vs reference lru", eviction_lru),
];

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config {
            cases,
            failure_persistence: None,
            max_shrink_iters: 64,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn check<S: Strategy>(cases: u32, s: S, f: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    runner(cases).run(&s, f).map_err(|e| e.to_string())
}

fn unit(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, dim)
        .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|v| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        })
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn small_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(40.0, 40.0, 32.0, 24.0, 64, 48).unwrap()
}

fn camera_pose() -> impl Strategy<Value = Pose> {
    (-0.4..0.4f64, -0.2..0.2f64, -0.1..0.1f64)
        .prop_map(|(yaw, pitch, roll)| Pose::from_xyz_rpy(Vec3::zeros(), roll, pitch, yaw, 0.0))
}

/// Up to 80 occupied voxels in a 32³ block ahead of the origin.
fn block_map() -> impl Strategy<Value = VoxelMap> {
    prop::collection::vec((16..48i32, -16..16i32, -16..16i32), 1..80).prop_map(|keys| {
        let mut m = VoxelMap::new(VoxelMapConfig::default(), Vec3::zeros()).unwrap();
        for (x, y, z) in keys {
            m.insert_point(&m.voxel_center(&[x, y, z]));
        }
        m
    })
}

fn transform_inverse(cases: u32) -> Result<(), String> {
    let v = || (-1e3..1e3f64, -1e3..1e3f64, -1e3..1e3f64);
    let a = || -std::f64::consts::PI..std::f64::consts::PI;
    check(cases, (v(), a(), a(), a(), v()), |((x, y, z), r, p, w, (u, s, t))| {
        let pose = Pose::from_xyz_rpy(Vec3::new(x, y, z), r, p, w, 0.0);
        let q = Vec3::new(u, s, t);
        let back = pose.to_world(&pose.transform_point(&q));
        prop_assert!((back - q).norm() <= 1e-9, "{}", (back - q).norm());
        let inv = pose.inverse();
        let via = inv.to_world(&pose.to_world(&q));
        prop_assert!((via - q).norm() <= 1e-9);
        Ok(())
    })
}

fn projection_raycast(cases: u32) -> Result<(), String> {
    let k = small_camera();
    check(cases, (camera_pose(), 2..62u32, 2..46u32, 2.0..40.0f64), |(cam, i, j, depth)| {
        let p = cam.position + world_ray(&k, &cam, i, j) * depth;
        let mut m = VoxelMap::new(VoxelMapConfig::default(), p).unwrap();
        m.insert_point(&p);
        let key = m.key_of(&p);
        let Some((u, v)) = project_world(&k, &cam, &m.voxel_center(&key)) else {
            return Err(TestCaseError::reject("center outside the image"));
        };
        let img = raycast(&m, &cam, &k, 100.0);
        let near = (-1i32..=1).any(|di| {
            (-1i32..=1).any(|dj| {
                let (a, b) = (u as i32 + di, v as i32 + dj);
                a >= 0 && b >= 0 && a < 64 && b < 48 && img.get(a as u32, b as u32).is_some_and(|h| h.key == key)
            })
        });
        prop_assert!(near, "no hit near ({u:.2}, {v:.2})");
        Ok(())
    })
}

/// Fraction of pixels where raycast and the z-buffer agree on hit and depth.
pub fn raycast_agreement(map: &VoxelMap, cam: &Pose, k: &CameraIntrinsics) -> f64 {
    let img = raycast(map, cam, k, 100.0);
    let z = oracle::zbuffer(map, cam, k, 100.0);
    let agree = img
        .hits
        .iter()
        .zip(&z)
        .filter(|(h, o)| match (h, o) {
            (None, None) => true,
            (Some(h), Some((d, key))) => h.key == *key || (h.depth - d).abs() <= 1e-6,
            _ => false,
        })
        .count();
    agree as f64 / z.len() as f64
}

fn raycast_minimum(cases: u32) -> Result<(), String> {
    let k = CameraIntrinsics::new(20.0, 20.0, 16.0, 12.0, 32, 24).unwrap();
    check(cases, (block_map(), camera_pose()), |(map, cam)| {
        let a = raycast_agreement(&map, &cam, &k);
        prop_assert!(a >= 0.99, "agreement {a}");
        Ok(())
    })
}

fn scan_of(points: Vec<Vec3>) -> PointCloudScan {
    PointCloudScan {
        frame_id: 0,
        timestamp: 0.0,
        pose: Pose::identity(),
        points,
    }
}

fn accumulation_order(cases: u32) -> Result<(), String> {
    let pts = || prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -3.0..3.0f64), 0..200);
    check(cases, (pts(), pts()), |(a, b)| {
        let to = |v: Vec<(f64, f64, f64)>| scan_of(v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect());
        let (a, b) = (to(a), to(b));
        let mut ab = VoxelMap::new(VoxelMapConfig::default(), Vec3::zeros()).unwrap();
        ab.integrate_scan(&a).unwrap();
        ab.integrate_scan(&b).unwrap();
        let mut ba = VoxelMap::new(VoxelMapConfig::default(), Vec3::zeros()).unwrap();
        ba.integrate_scan(&b).unwrap();
        ba.integrate_scan(&a).unwrap();
        prop_assert_eq!(ab.sorted_keys(), ba.sorted_keys());
        for k in ab.sorted_keys() {
            prop_assert_eq!(ab.get(&k), ba.get(&k));
        }
        Ok(())
    })
}

fn covariance_psd(cases: u32) -> Result<(), String> {
    let cloud = prop_oneof![
        prop::collection::vec((0.0..0.25f64, 0.0..0.25f64, 0.0..0.25f64), 3..60),
        (0.0..0.25f64, 0.0..0.25f64, prop::collection::vec(0.0..0.25f64, 3..60))
            .prop_map(|(y, z, xs)| xs.into_iter().map(|x| (x, y, z)).collect()),
        (0.0..0.25f64, prop::collection::vec((0.0..0.25f64, 0.0..0.25f64), 3..60))
            .prop_map(|(z, xy)| xy.into_iter().map(|(x, y)| (x, y, z)).collect()),
    ];
    check(cases, cloud, |pts| {
        let mut m = VoxelMap::new(VoxelMapConfig::default(), Vec3::zeros()).unwrap();
        for (x, y, z) in pts {
            m.insert_point(&Vec3::new(x.min(0.2499), y.min(0.2499), z.min(0.2499)));
        }
        for (_, v) in m.iter() {
            let ev = v.moments.covariance(m.resolution()).symmetric_eigenvalues();
            prop_assert!(ev.iter().all(|e| *e >= -1e-9), "{ev:?}");
        }
        Ok(())
    })
}

fn eigen_oracle(cases: u32) -> Result<(), String> {
    let cloud = prop::collection::vec((0.0..0.2499f64, 0.0..0.2499f64, 0.0..0.2499f64), 3..60);
    check(cases, cloud, |pts| {
        let pts: Vec<Vec3> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
        let mut m = VoxelMap::new(VoxelMapConfig::default(), Vec3::zeros()).unwrap();
        for p in &pts {
            m.insert_point(p);
        }
        prop_assert_eq!(m.len(), 1);
        let got = m.voxel_eigenvalues(&m.key_of(&pts[0])).unwrap();
        let want = oracle::jacobi_eigenvalues(&oracle::covariance(&pts));
        let scale = want[0].abs().max(1e-12);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-6 * scale, "{got:?} vs {want:?}");
        }
        Ok(())
    })
}

fn memory_bound(cases: u32) -> Result<(), String> {
    let cfg = (1..4u32, 2..12u32, 1..6u32).prop_map(|(r, nxy, nz)| {
        let res = 0.25 * r as f64;
        VoxelMapConfig {
            resolution: res,
            extent_xy: res * nxy as f64,
            extent_z: res * nz as f64,
        }
    });
    let pts = prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64, -5.0..5.0f64), 0..3000);
    check(cases, (cfg, pts), |(cfg, pts)| {
        let mut m = VoxelMap::new(cfg, Vec3::new(0.3, -0.2, 0.1)).unwrap();
        for (x, y, z) in pts {
            m.insert_point(&Vec3::new(x, y, z));
        }
        let nxy = (cfg.extent_xy / cfg.resolution).round() as usize;
        let nz = (cfg.extent_z / cfg.resolution).round() as usize;
        prop_assert!(m.len() <= nxy * nxy * nz, "{} > {}", m.len(), nxy * nxy * nz);
        Ok(())
    })
}

fn maybe(r: std::ops::Range<f64>) -> impl Strategy<Value = Option<f64>> {
    prop_oneof![1 => Just(None), 4 => r.prop_map(Some)]
}

fn cost_branches(cases: u32) -> Result<(), String> {
    let cfg = TerrainConfig::default();
    check(cases, (0.0..3.0f64, maybe(0.0..2.0), maybe(0.0..2.0)), |(h, p, s)| {
        let j = traversability_cost(h, p, s, &cfg);
        prop_assert_eq!(j == Some(10.0), h >= cfg.h_thresh);
        if h < cfg.h_thresh {
            prop_assert!(j.map_or(true, |j| (0.0..=6.0).contains(&j)));
        }
        Ok(())
    })
}

fn cost_monotonicity(cases: u32) -> Result<(), String> {
    let cfg = TerrainConfig::default();
    let args = (0.0..0.99f64, 0.0..2.0f64, 0.0..2.0f64, 0.0..2.0f64, 0.0..2.0f64, 1.0..3.0f64);
    check(cases, args, |(h, p1, p2, s1, s2, tall)| {
        let (pl, ph) = (p1.min(p2), p1.max(p2));
        let (sl, sh) = (s1.min(s2), s1.max(s2));
        let j = |h, p, s| traversability_cost(h, Some(p), Some(s), &cfg).unwrap();
        prop_assert!(j(h, pl, s1) >= j(h, ph, s1));
        prop_assert!(j(h, p1, sl) <= j(h, p1, sh));
        prop_assert!(j(h, p1, s1) <= j(tall, p1, s1));
        Ok(())
    })
}

fn planarity_scale(cases: u32) -> Result<(), String> {
    check(cases, (1e-3..10.0f64, 0.0..1.0f64, 0.0..1.0f64, 1e-3..1e3f64), |(l1, a, b, c)| {
        let (l2, l3) = (l1 * a.max(b), l1 * a.min(b));
        let f = planarity(l1, l2, l3, 1e-12).unwrap();
        let g = planarity(c * l1, c * l2, c * l3, 1e-12).unwrap();
        prop_assert!((f - g).abs() <= 1e-12, "{f} vs {g}");
        Ok(())
    })
}

fn relaxation_converges(cases: u32) -> Result<(), String> {
    let scene = (0.0..0.5f64, 0.2..2.0f64, -0.5..0.5f64, -3.0..3.0f64, -3.0..3.0f64, 0.3..2.0f64, any::<bool>());
    check(cases, scene, |(amp, freq, grade, hx, hy, hr, boxed)| {
        let mut m = VoxelMap::new(VoxelMapConfig::default(), Vec3::zeros()).unwrap();
        for i in 0..80 {
            for j in 0..80 {
                let (x, y) = (-4.0 + 0.1 * i as f64 + 0.013, -4.0 + 0.1 * j as f64 + 0.017);
                if (x - hx).powi(2) + (y - hy).powi(2) < hr * hr {
                    continue;
                }
                let z = amp * (freq * x).sin() + grade * y;
                let lift = if boxed && x.abs() < 1.0 && y.abs() < 1.0 { 2.0 } else { 0.0 };
                m.insert_point(&Vec3::new(x, y, z + lift));
            }
        }
        let g = estimate_ground(&m, &TerrainConfig::default()).unwrap();
        for w in g.sweep_changes.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12, "{:?}", g.sweep_changes);
        }
        Ok(())
    })
}

fn label_causality(cases: u32) -> Result<(), String> {
    let k = CameraIntrinsics::new(32.0, 32.0, 16.0, 6.0, 32, 24).unwrap();
    let args = (0.0..2.0f64, 0.0..2.0f64, prop::collection::vec(any::<bool>(), 30), prop::collection::vec(0.0..5.0f64, 1..4));
    check(cases, args, |(delay, accumulation, has_scan, polls)| {
        let cfg = LabelConfig {
            delay,
            min_accumulation: accumulation,
            min_labeled_pixels: 1,
            pairs_per_second: 1.0,
            ..LabelConfig::default()
        };
        let mut s = LabelScheduler::new(cfg, TerrainConfig::default(), VoxelMapConfig::default(), k, Execution::Sequential).unwrap();
        let lidar = Mount {
            translation: [0.0, 0.0, 2.2],
            rpy_deg: [0.0; 3],
        };
        let ground: Vec<Vec3> = (0..40)
            .flat_map(|i| (0..24).map(move |j| Vec3::new(1.0 + 0.5 * i as f64, -6.0 + 0.5 * j as f64, -2.2)))
            .collect();
        // The whole future stream is available before any poll.
        for (n, scan) in has_scan.iter().enumerate() {
            let t = n as f64 * 0.1;
            let vehicle = Pose::from_xyz_rpy(Vec3::new(5.0 * t, 0.0, 0.0), 0.0, 0.0, 0.0, t);
            s.push_pose(vehicle);
            if *scan {
                s.push_scan(PointCloudScan {
                    frame_id: n as u32,
                    timestamp: t,
                    pose: vehicle.compose(&lidar),
                    points: ground.clone(),
                });
            }
        }
        for f in 0..21 {
            let t = f as f64 / 7.0;
            s.push_image(f, Pose::from_xyz_rpy(Vec3::new(5.0 * t, 0.0, 0.0), 0.0, 0.0, 0.0, t), &Mount::default());
        }
        let mut polls = polls;
        polls.sort_by(f64::total_cmp);
        for now in polls {
            for p in s.poll(now).unwrap() {
                prop_assert!(p.newest_scan <= p.image_timestamp + delay + 1e-9);
                prop_assert!((p.label_ready - (p.image_timestamp + delay)).abs() < 1e-12);
                prop_assert!(p.label_ready <= now + 1e-9);
            }
        }
        Ok(())
    })
}

fn label_oracle(cases: u32) -> Result<(), String> {
    let k = CameraIntrinsics::new(20.0, 20.0, 16.0, 12.0, 32, 24).unwrap();
    let costs = prop::collection::vec(prop_oneof![1 => Just(None), 4 => (0.0..10.0f32).prop_map(Some)], 80);
    check(cases, (block_map(), camera_pose(), costs), |(mut map, cam, costs)| {
        for (key, c) in map.sorted_keys().into_iter().zip(costs.iter().cycle()) {
            map.get_mut(&key).unwrap().cost = *c;
        }
        let cfg = LabelConfig {
            r_near: 1e3,
            r_far: 1e3,
            max_range: 100.0,
            ..LabelConfig::default()
        };
        let mask = generate_label_mask(&cam, &k, &map, &[cam], &cam, &cfg, Execution::Sequential);
        let mut mismatched = 0;
        for j in 0..k.height {
            for i in 0..k.width {
                let got = mask.get(i, j);
                if j >= k.height / 2 {
                    prop_assert!(got.is_none());
                    continue;
                }
                let dir = world_ray(&k, &cam, i, j);
                let want = oracle::nearest_voxel(&map, &cam.position, &dir, 100.0);
                let ok = match want {
                    None => got.is_none(),
                    Some((d, _)) => {
                        // Ties at shared faces may resolve to either voxel.
                        let r = map.resolution();
                        map.iter().any(|(key, v)| {
                            let lo = map.voxel_origin(key);
                            let hit = oracle::slab(&cam.position, &dir, &lo, &(lo + Vec3::new(r, r, r)));
                            hit.is_some_and(|(t, _)| (t - d).abs() <= 1e-9) && v.cost == got
                        })
                    }
                };
                mismatched += !ok as usize;
            }
        }
        prop_assert!(mismatched * 100 <= (k.width * k.height / 2) as usize, "{mismatched} mismatched pixels");
        Ok(())
    })
}

/// Random frames with per-patch targets, at least one patch labeled.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: Regressor,
    pub frames: Vec<EncodedFrame>,
    pub targets: Vec<Vec<PatchTarget>>,
}

impl Instance {
    pub fn samples(&self) -> Vec<Sample<'_>> {
        self.frames
            .iter()
            .zip(&self.targets)
            .map(|(frame, targets)| Sample { frame, targets })
            .collect()
    }
}

fn frame(dim: usize, features: Vec<f32>) -> EncodedFrame {
    EncodedFrame {
        timestamp: 0.0,
        cols: features.len() / dim,
        rows: 1,
        dim,
        features,
        embedding: vec![1.0],
    }
}

pub fn instance() -> impl Strategy<Value = Instance> {
    (2..5usize, prop_oneof![Just(0usize), 1..4usize], 1..3usize, 2..6usize).prop_flat_map(|(dim, hidden, n_frames, n_patches)| {
        let kind = if hidden == 0 { HeadKind::Linear } else { HeadKind::Mlp { hidden } };
        let n_params = Regressor::new(kind, dim, 0.0, 0).params.len();
        let pixel = (0.1..9.0f64, 0.0..10.0f64);
        let target = prop::collection::vec(pixel, 0..4).prop_map(|px| {
            px.iter().fold(PatchTarget::default(), |t, (w, y)| PatchTarget {
                w: t.w + w,
                wy: t.wy + w * y,
                wyy: t.wyy + w * y * y,
            })
        });
        (
            prop::collection::vec(-1.0..1.0f64, n_params),
            prop::collection::vec(prop::collection::vec(-1.0..1.0f32, dim * n_patches), n_frames),
            prop::collection::vec(prop::collection::vec(target, n_patches), n_frames),
        )
            .prop_filter("something labeled", |(_, _, t)| t.iter().flatten().any(|t| t.w > 0.0))
            .prop_map(move |(params, feats, targets)| Instance {
                model: Regressor { kind, dim, params },
                frames: feats.into_iter().map(|f| frame(dim, f)).collect(),
                targets,
            })
    })
}

pub fn gradient_check(cases: u32) -> Result<(), String> {
    check(cases, instance(), |inst| {
        let e = oracle::gradient_error(&inst.model, &inst.samples());
        prop_assert!(e < 1e-4, "relative error {e}");
        Ok(())
    })
}

fn loss_decreases(cases: u32) -> Result<(), String> {
    let args = (2..6usize, prop::collection::vec(-1.0..1.0f64, 6), 3.0..7.0f64, 4..40usize, any::<u64>());
    check(cases, args, |(dim, w, b, n_patches, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features: Vec<f32> = (0..dim * n_patches).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        let f = frame(dim, features);
        let targets: Vec<PatchTarget> = (0..n_patches)
            .map(|p| {
                let y = b + f.patch_index(p).iter().zip(&w).map(|(x, w)| *x as f64 * w).sum::<f64>();
                PatchTarget { w: 1.0, wy: y, wyy: y * y }
            })
            .collect();
        let cfg = LearnerConfig::default();
        let mut head = ModelHead::new(0, dim, &cfg, 0.0);
        let s = [Sample {
            frame: &f,
            targets: &targets,
        }];
        let out = train_head(&mut head, &s, &s, &cfg, 10.0).unwrap();
        prop_assert!(out.train_loss <= out.loss_before + 1e-12, "{out:?}");
        Ok(())
    })
}

fn unlabeled_independence(cases: u32) -> Result<(), String> {
    let junk = prop::collection::vec((-1e3..1e3f64, -1.0..1.0f32), 64);
    check(cases, (instance(), junk), |(inst, junk)| {
        let mut other = inst.clone();
        let mut junk = junk.into_iter().cycle();
        for (f, targets) in other.frames.iter_mut().zip(other.targets.iter_mut()) {
            for (p, t) in targets.iter_mut().enumerate() {
                if t.w == 0.0 {
                    let (a, x) = junk.next().unwrap();
                    t.wy = a;
                    t.wyy = a * a;
                    for v in &mut f.features[p * f.dim..(p + 1) * f.dim] {
                        *v = x;
                    }
                }
            }
        }
        let n = inst.model.params.len();
        let (mut g1, mut g2) = (vec![0.0; n], vec![0.0; n]);
        let l1 = loss_and_grad(&inst.model, &inst.samples(), Some(&mut g1));
        let l2 = loss_and_grad(&other.model, &other.samples(), Some(&mut g2));
        prop_assert_eq!(l1.map(f64::to_bits), l2.map(f64::to_bits));
        prop_assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        Ok(())
    })
}

fn unit_weights(cases: u32) -> Result<(), String> {
    let args = (1..4usize, 1..4usize, 2..4usize, prop::collection::vec(-1.0..1.0f64, 4));
    let args = args.prop_flat_map(|(cols, rows, dim, w)| {
        let n = (cols * 4) * (rows * 4);
        (
            Just((cols, rows, dim, w)),
            prop::collection::vec(prop_oneof![Just(None), (0.0..10.0f32).prop_map(Some)], n),
            prop::collection::vec(-1.0..1.0f32, cols * rows * dim),
        )
    });
    check(cases, args, |((cols, _rows, dim, w), costs, features)| {
        prop_assume!(costs.iter().any(|c| c.is_some()));
        let width = (cols * 4) as u32;
        let targets = patch_targets(&costs, width, 4, &[1.0, 1.0, 1.0]);
        let f = EncodedFrame {
            timestamp: 0.0,
            cols,
            rows: costs.len() / (cols * 16),
            dim,
            features,
            embedding: vec![1.0],
        };
        let mut params = w[..dim].to_vec();
        params.push(w[3] * 5.0);
        let model = Regressor {
            kind: HeadKind::Linear,
            dim,
            params,
        };
        let loss = loss_and_grad(&model, &[Sample { frame: &f, targets: &targets }], None).unwrap();
        let (mut sum, mut n) = (0.0, 0.0);
        for (i, c) in costs.iter().enumerate() {
            let Some(y) = c else { continue };
            let (px, py) = ((i as u32 % width) / 4, (i as u32 / width) / 4);
            let pred = model.forward(f.patch(px as usize, py as usize));
            sum += (pred - *y as f64).powi(2);
            n += 1.0;
        }
        let want = sum / n;
        prop_assert!((loss - want).abs() <= 1e-9 * want.max(1.0), "{loss} vs {want}");
        Ok(())
    })
}

fn random_ensemble(dim: usize) -> impl Strategy<Value = Ensemble> {
    let head = (prop::collection::vec(unit(dim), 0..6), any::<bool>(), 0.0..100.0f64);
    (prop::collection::vec(head, 1..6), 0.0..1.0f64, 0.0..2.0f64).prop_map(move |(heads, cd_new, cd_lidar)| {
        let cfg = EnsembleConfig {
            cd_new,
            cd_lidar,
            max_heads: 6,
            ..EnsembleConfig::default()
        };
        let learner = LearnerConfig::default();
        let mut e = Ensemble::new(cfg, learner, 2, 0.0).unwrap();
        e.heads.clear();
        for (i, (hist, usable, used)) in heads.into_iter().enumerate() {
            let mut h = ModelHead::new(i as u32, 2, &learner, used);
            for v in hist {
                h.push_history(&v);
            }
            h.usable = usable;
            e.heads.push(h);
        }
        e
    })
}

fn gate_soundness(cases: u32) -> Result<(), String> {
    check(cases, (random_ensemble(4), prop::collection::vec(unit(4), 1..10), any::<bool>()), |(e, recent, copy)| {
        let mut recent = recent;
        if copy {
            if let Some(v) = e.heads.iter().flat_map(|h| h.history.iter()).next() {
                recent[0] = v.clone();
            }
        }
        let d = e.select_inference_source(&recent, 50.0);
        let best = e
            .heads
            .iter()
            .map(|h| head_to_frames_distance(h, &recent, e.cfg.inference_distance))
            .fold(f64::INFINITY, f64::min);
        prop_assert_eq!(d.distance.to_bits(), best.to_bits());
        match d.source {
            Source::Head(id) => {
                let h = e.head(id).unwrap();
                prop_assert!(h.usable && d.distance <= e.cfg.cd_lidar);
                prop_assert_eq!(d.reason, Reason::SimilarAndUsable);
            }
            Source::Lidar => prop_assert!(d.reason != Reason::SimilarAndUsable),
        }
        Ok(())
    })
}

fn spawn_monotonicity(cases: u32) -> Result<(), String> {
    let args = (random_ensemble(4), prop::collection::vec(unit(4), 0..4), prop::collection::vec(unit(4), 1..5));
    check(cases, args, |(mut e, previous, incoming)| {
        if !previous.is_empty() {
            e.select_training_head(&previous, 1.0);
        }
        let queries = e.validation_mix(&incoming);
        let dists: Vec<f64> = e.heads.iter().map(|h| head_to_frames_distance(h, &queries, e.cfg.set_distance)).collect();
        let cd_new = e.cfg.cd_new;
        let s = e.select_training_head(&incoming, 2.0);
        if dists.iter().any(|d| *d <= cd_new) {
            prop_assert!(!s.spawned, "{dists:?} vs {cd_new}");
        }
        Ok(())
    })
}

/// Embeddings scattered tightly around `center`.
fn around(center: &[f64], noise: &[f64], n: usize, offset: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let v: Vec<f64> = center
                .iter()
                .enumerate()
                .map(|(d, c)| c + 0.03 * noise[(offset + i * center.len() + d) % noise.len()])
                .collect();
            normalized(&v)
        })
        .collect()
}

fn revisit_stability(cases: u32) -> Result<(), String> {
    let args = (unit(8), unit(8), prop::collection::vec(-1.0..1.0f64, 97), 1..4usize, 1..4usize);
    check(cases, args, |(a, b, noise, na, nb)| {
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        prop_assume!(1.0 - dot > 0.5);
        let mut e = Ensemble::new(EnsembleConfig::calibrated(), LearnerConfig::default(), 8, 0.0).unwrap();
        let mut t = 0.0;
        let mut offset = 0;
        let mut cycle = |e: &mut Ensemble, center: &[f64]| {
            t += 10.0;
            offset += 17;
            let s = e.select_training_head(&around(center, &noise, 4, offset), t);
            let h = e.head_mut(s.head).unwrap();
            for v in around(center, &noise, 10, offset + 5) {
                h.push_history(&v);
            }
            h.last_used = t;
            s
        };
        let mut first = None;
        for _ in 0..na {
            first = Some(cycle(&mut e, &a).head);
        }
        e.reset_validation();
        for _ in 0..nb {
            cycle(&mut e, &b);
        }
        e.reset_validation();
        let s = cycle(&mut e, &a);
        prop_assert!(!s.spawned);
        prop_assert_eq!(Some(s.head), first);
        Ok(())
    })
}

fn eviction_lru(cases: u32) -> Result<(), String> {
    let args = (1..5usize, prop::collection::vec(unit(6), 1..8), prop::collection::vec(0..8usize, 5..30));
    check(cases, args, |(n, centers, script)| {
        let cfg = EnsembleConfig {
            max_heads: n,
            ..EnsembleConfig::calibrated()
        };
        let mut e = Ensemble::new(cfg, LearnerConfig::default(), 6, 0.0).unwrap();
        let mut lru = oracle::ReferenceLru::with(&[0]);
        for (step, c) in script.iter().enumerate() {
            let t = 10.0 * (step + 1) as f64;
            let center = &centers[c % centers.len()];
            let before: Vec<(f64, u32)> = e.heads.iter().map(|h| (h.last_used, h.id)).collect();
            let s = e.select_training_head(&[center.clone()], t);
            if let Some(ev) = s.evicted {
                let oldest = before.iter().min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))).unwrap().1;
                prop_assert_eq!(ev, oldest);
                prop_assert_eq!(lru.evict(), Some(ev));
            }
            lru.touch(s.head);
            prop_assert!(e.heads.len() <= n);
            let h = e.head_mut(s.head).unwrap();
            h.push_history(center);
            h.last_used = t;
            let mut ids: Vec<u32> = e.heads.iter().map(|h| h.id).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, lru.ids());
        }
        Ok(())
    })
}

fn class_of(v: u8) -> CostClass {
    match v {
        0 => CostClass::Low,
        1 => CostClass::Medium,
        2 => CostClass::High,
        _ => CostClass::Unknown,
    }
}

fn masks(max_class: u8) -> impl Strategy<Value = (ClassMask, ClassMask, Vec<bool>)> {
    (1..200usize).prop_flat_map(move |n| {
        (
            prop::collection::vec(0..max_class, n),
            prop::collection::vec(0..max_class, n),
            prop::collection::vec(prop::bool::weighted(0.8), n),
        )
            .prop_map(move |(p, g, r)| {
                let m = |v: Vec<u8>| ClassMask {
                    width: n as u32,
                    height: 1,
                    classes: v.into_iter().map(class_of).collect(),
                };
                (m(p), m(g), r)
            })
    })
}

fn iou_symmetry(cases: u32) -> Result<(), String> {
    check(cases, (masks(3), masks(4)), |((p, g, r), (p4, g4, r4))| {
        if let (Ok(a), Ok(b)) = (miou(&p, &g, &r, "x"), miou(&g, &p, &r, "x")) {
            for c in 0..3 {
                if let (Some(x), Some(y)) = (a.per_class[c], b.per_class[c]) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        if let Ok(a) = miou(&p4, &g4, &r4, "x") {
            prop_assert!((0.0..=1.0).contains(&a.miou));
            prop_assert!(a.per_class.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
        Ok(())
    })
}

fn discretize_shift(cases: u32) -> Result<(), String> {
    let cost = (0..3usize, 0.0..1.0f64).prop_map(|(c, u)| {
        let (lo, hi) = [(0.0, 2.5), (2.5, 7.5), (7.5, 10.0)][c];
        lo + u * (hi - 0.1 - 1e-4 - lo)
    });
    check(cases, (prop::collection::vec(cost, 1..100), 0.0..0.1f64), |(costs, delta)| {
        let img = |shift: f64| CostImage {
            width: costs.len() as u32,
            height: 1,
            costs: costs.iter().map(|c| Some((c + shift) as f32)).collect(),
        };
        prop_assert_eq!(discretize(&img(0.0)), discretize(&img(delta)));
        Ok(())
    })
}

fn streaming_miou(cases: u32) -> Result<(), String> {
    check(cases, prop::collection::vec(masks(4), 1..6), |frames| {
        let mut m = [[0u64; 4]; 4];
        for (p, g, r) in &frames {
            let c = confusion(p, g, r);
            for a in 0..4 {
                for b in 0..4 {
                    m[a][b] += c[a][b];
                }
            }
        }
        let pairs: Vec<(&ClassMask, &ClassMask, &[bool])> = frames.iter().map(|(p, g, r)| (p, g, r.as_slice())).collect();
        match (iou_from_confusion(&m, "x"), oracle::iou_by_pixels(&pairs)) {
            (Ok(a), Some((per_class, mean))) => {
                prop_assert_eq!(a.per_class, per_class);
                prop_assert_eq!(a.miou.to_bits(), mean.to_bits());
            }
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
        Ok(())
    })
}

fn scenario() -> impl Strategy<Value = Scenario> {
    prop_oneof![Just(Scenario::AdaptNewEnv), Just(Scenario::ViewDrop), Just(Scenario::MultiDomain)]
}

fn sim_determinism(cases: u32) -> Result<(), String> {
    check(cases, (scenario(), 0..10_000u64), |(scenario, seed)| {
        let mut cfg = tiny_config(scenario);
        cfg.sequence_length = 0.6;
        cfg.train_duration = 0.3;
        cfg.eval_duration = 0.3;
        for s in &mut cfg.segments {
            s.duration = 0.3;
        }
        let drain = |exec| {
            let mut src = SimSource::new(plan_for(&cfg, scenario, seed).unwrap(), exec).unwrap();
            let mut ticks = Vec::new();
            while let Some(t) = src.next_tick().unwrap() {
                ticks.push(t);
            }
            ticks
        };
        let a = drain(Execution::Sequential);
        let b = drain(Execution::Parallel);
        prop_assert!(!a.is_empty());
        prop_assert!(a == b, "streams differ");
        Ok(())
    })
}

fn sim_consistency(cases: u32) -> Result<(), String> {
    let palette = prop_oneof![Just(Palette::Forest), Just(Palette::Hill)];
    check(cases, (palette, 0..10_000u64, 0.0..80.0f64), |(palette, seed, s)| {
        let scene = Scene::generate(SceneParams {
            length: 100.0,
            ..SceneParams::preset(palette, seed)
        })
        .unwrap();
        let vehicle = scene.vehicle_pose(s, 0.0);
        let lidar = LidarConfig {
            azimuth_step_deg: 1.0,
            ..LidarConfig::default()
        }
        .noiseless();
        let camera = CameraConfig::default();
        let width = camera.intrinsics.width as usize;
        let scan = simulate_lidar(&scene, &vehicle, &lidar, 0, Execution::Sequential);
        let frame = render_image(&scene, &vehicle, &camera, 0, Execution::Sequential);
        let cam = vehicle.compose(&camera.mount);
        let c = scene.params.cell;
        let (mut n, mut ok) = (0usize, 0usize);
        for p in &scan.points {
            let mut w = scan.pose.to_world(p);
            // Grass returns carry blade jitter the renderer does not draw.
            if scene.class_at(w.x, w.y) == TerrainClass::Grass {
                w.z = scene.surface_height(w.x, w.y);
            }
            let Some((u, v)) = project_world(&camera.intrinsics, &cam, &w) else { continue };
            n += 1;
            let Some(seen) = frame.class[v as usize * width + u as usize] else { continue };
            let near = [-c, 0.0, c]
                .iter()
                .any(|dx| [-c, 0.0, c].iter().any(|dy| scene.class_at(w.x + dx, w.y + dy) == seen));
            ok += near as usize;
        }
        prop_assert!(n > 50, "{n} projected points");
        prop_assert!(ok as f64 >= 0.98 * n as f64, "{ok}/{n}");
        Ok(())
    })
}

fn pipeline_runs(cases: u32) -> Result<(), String> {
    check(cases, (scenario(), 0..10_000u64, any::<bool>(), any::<bool>()), |(scenario, seed, parallel, pipelined)| {
        let base = tiny_config(scenario);
        let mut other = base.clone();
        other.parallel = parallel;
        other.pipelined = pipelined;
        let a = run_sequence(&base, seed).unwrap();
        let mut b = run_sequence(&other, seed).unwrap();
        prop_assert_eq!((b.config.parallel, b.config.pipelined), (parallel, pipelined));
        b.config = base.clone();
        prop_assert!(a.to_json().unwrap() == b.to_json().unwrap(), "reports differ");

        let audit = &a.audit;
        prop_assert!(audit.violations.is_empty(), "{:?}", audit.violations);
        prop_assert!(audit.decisions > 0);
        let p = base.buffer_period;
        let total = plan_for(&base, scenario, seed).unwrap().duration();
        let expected: Vec<f64> = (1..).map(|k| k as f64 * p).take_while(|b| *b < total - 1e-9).collect();
        prop_assert_eq!(&audit.boundaries, &expected);
        for c in &a.cycles {
            prop_assert!(expected.contains(&c.time), "cycle at {}", c.time);
            prop_assert_eq!(c.published, c.time + p);
            prop_assert!(c.newest_label_ready <= c.time);
        }
        Ok(())
    })
}
