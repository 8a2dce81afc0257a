use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use nearfar::config::RunConfig;
use nearfar::par::Execution;
use nearfar::raycast::raycast_rows;
use nearfar::sim::{render_image, simulate_lidar, Palette, Scene, SceneParams};
use nearfar::terrain::label_map_with;
use nearfar::voxel::VoxelMap;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn scene() -> Scene {
    Scene::generate(SceneParams {
        length: 200.0,
        ..SceneParams::preset(Palette::Forest, 3)
    })
    .unwrap()
}

fn sensors(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let scene = scene();
    let pose = scene.vehicle_pose(20.0, 0.0);
    let mut g = c.benchmark_group("sensors");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("lidar", name), &exec, |b, e| {
            b.iter(|| simulate_lidar(&scene, &pose, &cfg.lidar, 0, *e))
        });
        g.bench_with_input(BenchmarkId::new("camera", name), &exec, |b, e| {
            b.iter(|| render_image(&scene, &pose, &cfg.camera, 0, *e))
        });
    }
    g.finish();
}

fn mapping(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let scene = scene();
    let mut map = VoxelMap::new(cfg.map, scene.vehicle_pose(20.0, 0.0).position).unwrap();
    for k in 0..20 {
        let pose = scene.vehicle_pose(10.0 + k as f64, k as f64 * 0.1);
        map.integrate_scan(&simulate_lidar(&scene, &pose, &cfg.lidar, k, Execution::Parallel)).unwrap();
    }
    let camera = scene.vehicle_pose(10.0, 0.0).compose(&cfg.camera.mount);
    let k = cfg.camera.intrinsics;
    let mut g = c.benchmark_group("mapping");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::new("terrain", name), &exec, |b, e| {
            b.iter(|| {
                let mut m = map.clone();
                label_map_with(&mut m, &cfg.terrain, *e)
            })
        });
        let mut labeled = map.clone();
        label_map_with(&mut labeled, &cfg.terrain, Execution::Parallel);
        g.bench_with_input(BenchmarkId::new("raycast", name), &exec, |b, e| {
            b.iter(|| raycast_rows(&labeled, &camera, &k, 120.0, 0..k.height / 2, *e))
        });
    }
    g.finish();
}

criterion_group!(benches, sensors, mapping);
criterion_main!(benches);
