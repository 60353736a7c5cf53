//! External force estimation for multirotors from IMU, thrust commands and a
//! monocular camera.
//!
//! The filter is an error-state MSCKF. Gyro and mass-normalized thrust drive
//! propagation; the accelerometer observes thrust plus external force plus
//! bias at every IMU sample; sliding-window camera updates anchor attitude,
//! velocity and position.

pub mod accel;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod propagation;
pub mod sim;
pub mod so3;
pub mod state;
pub mod vision;

pub use error::{Error, Result};
