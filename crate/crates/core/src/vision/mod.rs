//! Camera measurement update over the sliding window of pose clones.
//!
//! Feature tracks are triangulated from the clones that observed them,
//! linearized, and projected onto the left nullspace of the landmark
//! Jacobian so the landmark never enters the state. Optionally, long tracks
//! are promoted into the state as SLAM landmarks.

pub mod camera;
pub mod linearize;
pub mod triangulation;
pub mod update;

pub use camera::{project_pinhole, CameraModel};
pub use linearize::{feature_linearize, nullspace_project, FeatureJacobians, ObsRef};
pub use triangulation::{triangulate, TriangulationFailure, TriangulationParams, View};
pub use update::{CameraFrame, FeatureObservation, FeatureTrack, FrameReport, VisionUpdater};
