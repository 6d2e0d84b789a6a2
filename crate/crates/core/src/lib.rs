//! Calibration and time synchronization of sparse multi-camera rigs from
//! 2D human keypoint detections.
//!
//! The solver runs a five-stage cascade:
//!
//! 1. [`single_view`]: per-camera focal length and ground-plane recovery
//!    from standing people (DLT + RANSAC).
//! 2. [`sync`]: pairwise integer frame offsets from ground-plane distance
//!    signals.
//! 3. [`align::search_rotation`]: brute-force in-plane rotation search.
//! 4. [`align::icp_refine`]: ICP refinement of the in-plane transform.
//! 5. [`bundle`]: joint gradient refinement of all camera parameters.
//!
//! [`sim`] generates synthetic scenes and reproduces the simulation and
//! noise-propagation studies; [`pipeline`] orchestrates the cascade over
//! detection files.

pub mod align;
pub mod bundle;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pose;
pub mod sim;
pub mod single_view;
pub mod sync;

pub use geometry::{
    CamPoint, CameraExtrinsics, CameraIntrinsics, GroundPlaneFrame, ImagePoint, PlanePoint,
    PlanePoint2, RigidTransform2D, WorldPoint,
};
pub use pipeline::{run_pipeline, PipelineConfig, RigSolution};
pub use pose::{CameraSequence, Frame, Joint, JointObs, PoseDetection};
