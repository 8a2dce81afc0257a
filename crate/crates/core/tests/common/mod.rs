#![allow(dead_code)]

pub mod oracle;
pub mod props;

use nearfar::config::{RunConfig, Scenario};
use nearfar::geometry::CameraIntrinsics;

/// A configuration small enough to run a whole pipeline in a fraction of a
/// second: 32×24 camera, coarse LiDAR, 2 s buffers and 1 s label delay.
pub fn tiny_config(scenario: Scenario) -> RunConfig {
    let mut c = RunConfig::default();
    c.scenario = scenario;
    c.camera.intrinsics = CameraIntrinsics::new(32.0, 32.0, 16.0, 6.0, 32, 24).unwrap();
    c.encoder.width = 32;
    c.encoder.height = 24;
    c.encoder.patch = 4;
    c.lidar.elevations_deg = vec![-15.0, -10.0, -7.0, -5.0, -3.5, -2.5, -1.5, -0.8];
    c.lidar.azimuth_step_deg = 2.0;
    c.lidar.max_range = 40.0;
    c.map.extent_xy = 60.0;
    c.label.delay = 1.0;
    c.label.min_accumulation = 1.0;
    c.label.r_near = 15.0;
    c.label.r_far = 40.0;
    c.label.max_range = 40.0;
    c.label.min_labeled_pixels = 10;
    c.learner.epochs = 3;
    c.pretrain.enabled = false;
    c.sequence_length = 5.0;
    c.train_duration = 3.0;
    c.eval_duration = 2.0;
    c.buffer_period = 2.0;
    c.lidar_window = 1.0;
    c.start_offset = 10.0;
    c.view_drop.start = 2.0;
    c.view_drop.end = 3.5;
    c.revisit_window = 1.0;
    for s in &mut c.segments {
        s.duration = 2.0;
    }
    c.parallel = false;
    c.validate().unwrap();
    c
}
