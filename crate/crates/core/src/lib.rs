pub mod config;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod geometry;
pub mod labeling;
pub mod learner;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod raycast;
pub mod sequence;
pub mod sim;
pub mod terrain;
pub mod voxel;

pub use error::{Error, Result};
