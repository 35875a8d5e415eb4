//! Ultra-wideband teach-and-repeat.
//!
//! A vehicle carrying three UWB tags, an IMU and a height sensor is flown along a
//! taught trajectory while it maps the anchors it meets, then retraces that
//! trajectory autonomously using only the stored estimates.
//!
//! Module map:
//! - [`se_math`]: SO(3) and SE₂(3) operations.
//! - [`world_sim`]: ground truth, sensor simulation and scripted teach trajectories.
//! - [`uwb_protocol`]: the three-tag ranging transaction and its measurement models.
//! - [`sequence_tracker`]: anchor bookkeeping for both passes.
//! - [`nav_ekf`]: the navigation filter shared by both passes.
//! - [`anchor_init`]: batch localization of newly encountered anchors.
//! - [`repeat_init`]: static initialization of the repeat pass.
//! - [`controller`]: LQR tracking on SE₂(3) with feedforward fallback.
//! - [`harness`]: trials, Monte-Carlo campaigns, metrics and artifacts.

pub mod anchor_init;
pub mod config;
pub mod controller;
pub mod harness;
pub mod nav_ekf;
pub mod repeat_init;
pub mod se_math;
pub mod sequence_tracker;
mod sparse;
pub mod uwb_protocol;
pub mod world_sim;

/// Standard gravity (m/s²).
pub const GRAVITY: f64 = 9.80665;

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Gravity resolved in the map frame.
pub fn gravity_vector() -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(0.0, 0.0, -GRAVITY)
}
