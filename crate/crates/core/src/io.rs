//! Detection-file loading/validation, solution-file serialization, and
//! diagnostic curve export.
//!
//! Detection files are JSON:
//!
//! ```json
//! {
//!   "version": 1,
//!   "camera_id": "cam0",
//!   "width": 1920.0,
//!   "height": 1080.0,
//!   "frame_rate": 30.0,
//!   "frames": [
//!     { "index": 0, "poses": [
//!       { "person_id": 0, "joints": { "left_ankle": [953.1, 812.4, 0.98] } }
//!     ]}
//!   ]
//! }
//! ```
//!
//! Joint names come from the fixed skeleton enumeration; every pose must
//! carry the eight core joints (both ankles, knees, hips, shoulders).
//! Frame indices must be strictly increasing.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraExtrinsics, CameraIntrinsics, GroundPlaneFrame};
use crate::pipeline::{CameraSolution, PairDiagnostics, RigSolution};
use crate::pose::{CameraSequence, Joint, PoseDetection};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("schema ({context}): {message}")]
    Schema { context: String, message: String },
    #[error("detection file contains no poses")]
    EmptySequence,
}

fn schema_err(context: impl Into<String>, message: impl Into<String>) -> IoError {
    IoError::Schema {
        context: context.into(),
        message: message.into(),
    }
}

/// Validate the invariants the rest of the pipeline relies on.
pub fn validate_sequence(seq: &CameraSequence) -> Result<(), IoError> {
    if seq.version != CameraSequence::SCHEMA_VERSION {
        return Err(schema_err(
            "version",
            format!(
                "unsupported schema version {} (expected {})",
                seq.version,
                CameraSequence::SCHEMA_VERSION
            ),
        ));
    }
    if !(seq.width > 0.0 && seq.height > 0.0 && seq.width.is_finite() && seq.height.is_finite()) {
        return Err(schema_err(
            "dimensions",
            format!("invalid image size {}x{}", seq.width, seq.height),
        ));
    }
    if !(seq.frame_rate > 0.0 && seq.frame_rate.is_finite()) {
        return Err(schema_err(
            "frame_rate",
            format!("invalid frame rate {}", seq.frame_rate),
        ));
    }
    let mut poses_seen = 0usize;
    for (i, window) in seq.frames.windows(2).enumerate() {
        if window[1].index <= window[0].index {
            return Err(schema_err(
                format!("frames[{}]", i + 1),
                format!(
                    "frame indices must be strictly increasing ({} after {})",
                    window[1].index, window[0].index
                ),
            ));
        }
    }
    for frame in &seq.frames {
        for (p, pose) in frame.poses.iter().enumerate() {
            poses_seen += 1;
            let context = || format!("frame {}, pose {}", frame.index, p);
            if !pose.has_core_joints() {
                return Err(schema_err(
                    context(),
                    "missing core joints (both ankles, knees, hips, shoulders required)",
                ));
            }
            for (joint, obs) in &pose.joints {
                if !(obs.point.x.is_finite() && obs.point.y.is_finite()) {
                    return Err(schema_err(
                        context(),
                        format!("non-finite coordinates for {joint}"),
                    ));
                }
                if !(0.0..=1.0).contains(&obs.confidence) {
                    return Err(schema_err(
                        context(),
                        format!("confidence {} for {joint} outside [0, 1]", obs.confidence),
                    ));
                }
            }
        }
    }
    if seq.frames.is_empty() || poses_seen == 0 {
        return Err(IoError::EmptySequence);
    }
    Ok(())
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<CameraSequence, IoError> {
    let text = fs::read_to_string(path)?;
    let seq: CameraSequence = serde_json::from_str(&text)?;
    validate_sequence(&seq)?;
    Ok(seq)
}

/// Canonical pretty-printed form; `save` then `load` then `save` is
/// byte-stable.
pub fn save_detections(seq: &CameraSequence, path: impl AsRef<Path>) -> Result<(), IoError> {
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, seq)?;
    file.write_all(b"\n")?;
    Ok(())
}

const SOLUTION_VERSION: u32 = 1;

/// On-disk form of one camera's solution. `rotation` is the world-to-
/// camera rotation in row-major order and `translation` is `T` in
/// `p_cam = R p_world + T`; `position` is the camera center `-Rᵀ T`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionCamera {
    pub id: String,
    pub f: f64,
    pub o1: f64,
    pub o2: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub position: [f64; 3],
    pub plane_normal: [f64; 3],
    pub plane_rotation: [[f64; 3]; 3],
    pub plane_translation: [f64; 3],
    pub delta_t: i64,
    pub inliers: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub version: u32,
    pub reference: String,
    pub cameras: Vec<SolutionCamera>,
}

fn matrix_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] = m[(r, c)];
        }
    }
    out
}

fn vec3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl From<&RigSolution> for SolutionFile {
    fn from(sol: &RigSolution) -> Self {
        SolutionFile {
            version: SOLUTION_VERSION,
            reference: sol.reference.clone(),
            cameras: sol
                .cameras
                .iter()
                .map(|cam| SolutionCamera {
                    id: cam.camera_id.clone(),
                    f: cam.intrinsics.f,
                    o1: cam.intrinsics.o1,
                    o2: cam.intrinsics.o2,
                    rotation: matrix_rows(cam.extrinsics.rot_world_to_cam.matrix()),
                    translation: vec3(&cam.extrinsics.translation()),
                    position: vec3(&cam.extrinsics.position.coords),
                    plane_normal: vec3(&cam.plane.normal),
                    plane_rotation: matrix_rows(cam.plane.rot_cam_to_plane.matrix()),
                    plane_translation: vec3(&cam.plane.t_plane),
                    delta_t: cam.delta_t,
                    inliers: cam.inliers,
                    pairs: cam.pairs,
                })
                .collect(),
        }
    }
}

fn rotation_from_rows(rows: &[[f64; 3]; 3], context: &str) -> Result<Rotation3<f64>, IoError> {
    let m = Matrix3::from_fn(|r, c| rows[r][c]);
    let residual = (m * m.transpose() - Matrix3::identity()).norm();
    if residual > 1e-6 || (m.determinant() - 1.0).abs() > 1e-6 {
        return Err(schema_err(context, "matrix is not a rotation"));
    }
    Ok(Rotation3::from_matrix_unchecked(m))
}

impl SolutionFile {
    pub fn into_rig_solution(self) -> Result<RigSolution, IoError> {
        let cameras = self
            .cameras
            .into_iter()
            .map(|cam| {
                let context = format!("camera '{}'", cam.id);
                let intrinsics = CameraIntrinsics::new(cam.f, cam.o1, cam.o2)
                    .map_err(|e| schema_err(&context, e.to_string()))?;
                Ok(CameraSolution {
                    camera_id: cam.id,
                    intrinsics,
                    extrinsics: CameraExtrinsics {
                        rot_world_to_cam: rotation_from_rows(&cam.rotation, &context)?,
                        position: Point3::new(cam.position[0], cam.position[1], cam.position[2]),
                    },
                    plane: GroundPlaneFrame {
                        normal: Unit::new_normalize(Vector3::new(
                            cam.plane_normal[0],
                            cam.plane_normal[1],
                            cam.plane_normal[2],
                        )),
                        rot_cam_to_plane: rotation_from_rows(&cam.plane_rotation, &context)?,
                        t_plane: Vector3::new(
                            cam.plane_translation[0],
                            cam.plane_translation[1],
                            cam.plane_translation[2],
                        ),
                    },
                    delta_t: cam.delta_t,
                    inliers: cam.inliers,
                    pairs: cam.pairs,
                })
            })
            .collect::<Result<Vec<_>, IoError>>()?;
        Ok(RigSolution {
            reference: self.reference,
            cameras,
            pair_diagnostics: Vec::new(),
            bundle_history: Vec::new(),
        })
    }
}

pub fn write_solution(sol: &RigSolution, path: impl AsRef<Path>) -> Result<(), IoError> {
    let file = SolutionFile::from(sol);
    let mut out = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut out, &file)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn load_solution(path: impl AsRef<Path>) -> Result<RigSolution, IoError> {
    let text = fs::read_to_string(path)?;
    let file: SolutionFile = serde_json::from_str(&text)?;
    if file.version != SOLUTION_VERSION {
        return Err(schema_err(
            "version",
            format!("unsupported solution version {}", file.version),
        ));
    }
    file.into_rig_solution()
}

/// Write the per-stage diagnostic curves as CSV files into `dir`:
/// `sync_cost_<cam>.csv`, `rotation_cost_<cam>.csv`, `icp_cost_<cam>.csv`,
/// and `bundle_loss.csv`. Header row, one numeric record per line, LF
/// endings.
pub fn write_curves(sol: &RigSolution, dir: impl AsRef<Path>) -> Result<(), IoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for diag in &sol.pair_diagnostics {
        write_pair_curves(diag, dir)?;
    }
    let mut f = fs::File::create(dir.join("bundle_loss.csv"))?;
    writeln!(f, "iteration,loss")?;
    for (i, loss) in sol.bundle_history.iter().enumerate() {
        writeln!(f, "{i},{loss}")?;
    }
    Ok(())
}

fn write_pair_curves(diag: &PairDiagnostics, dir: &Path) -> Result<(), IoError> {
    let mut f = fs::File::create(dir.join(format!("sync_cost_{}.csv", diag.camera_id)))?;
    writeln!(f, "offset,cost")?;
    for (offset, cost) in &diag.sync_costs {
        writeln!(f, "{offset},{cost}")?;
    }

    let mut f = fs::File::create(dir.join(format!("rotation_cost_{}.csv", diag.camera_id)))?;
    writeln!(f, "angle_deg,cost")?;
    for (k, cost) in diag.rotation_costs.iter().enumerate() {
        writeln!(f, "{},{cost}", k as f64 * diag.rotation_step_deg)?;
    }

    let mut f = fs::File::create(dir.join(format!("icp_cost_{}.csv", diag.camera_id)))?;
    writeln!(f, "iteration,cost")?;
    for (i, cost) in diag.icp_history.iter().enumerate() {
        writeln!(f, "{i},{cost}")?;
    }
    Ok(())
}

/// COCO 17-keypoint detection dumps: one record per person per image.
#[derive(Debug, Deserialize)]
pub struct CocoRecord {
    pub image_id: i64,
    #[serde(default)]
    pub track_id: Option<u32>,
    /// 17 x (x, y, score) in COCO keypoint order.
    pub keypoints: Vec<f64>,
}

const COCO_JOINTS: [Option<Joint>; 17] = [
    Some(Joint::Head), // nose stands in for the head
    None,              // left eye
    None,              // right eye
    None,              // left ear
    None,              // right ear
    Some(Joint::LeftShoulder),
    Some(Joint::RightShoulder),
    Some(Joint::LeftElbow),
    Some(Joint::RightElbow),
    Some(Joint::LeftWrist),
    Some(Joint::RightWrist),
    Some(Joint::LeftHip),
    Some(Joint::RightHip),
    Some(Joint::LeftKnee),
    Some(Joint::RightKnee),
    Some(Joint::LeftAnkle),
    Some(Joint::RightAnkle),
];

/// Convert a COCO-skeleton keypoint dump into a detection sequence.
/// Ingestion example: records missing core joints are dropped.
pub fn convert_coco(
    records: &[CocoRecord],
    camera_id: &str,
    width: f64,
    height: f64,
    frame_rate: f64,
) -> Result<CameraSequence, IoError> {
    use std::collections::BTreeMap;
    let mut frames: BTreeMap<i64, Vec<PoseDetection>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        if rec.keypoints.len() != 51 {
            return Err(schema_err(
                format!("record {i}"),
                format!("expected 51 keypoint values, got {}", rec.keypoints.len()),
            ));
        }
        let mut joints = BTreeMap::new();
        for (slot, joint) in COCO_JOINTS.iter().enumerate() {
            let Some(joint) = joint else { continue };
            let (x, y, score) = (
                rec.keypoints[slot * 3],
                rec.keypoints[slot * 3 + 1],
                rec.keypoints[slot * 3 + 2],
            );
            joints.insert(
                *joint,
                crate::pose::JointObs {
                    point: crate::geometry::ImagePoint::new(x, y),
                    confidence: score.clamp(0.0, 1.0),
                },
            );
        }
        let pose = PoseDetection {
            person_id: rec.track_id.unwrap_or(i as u32),
            joints,
        };
        if pose.has_core_joints() {
            frames.entry(rec.image_id).or_default().push(pose);
        }
    }
    let seq = CameraSequence {
        version: CameraSequence::SCHEMA_VERSION,
        camera_id: camera_id.to_string(),
        width,
        height,
        frame_rate,
        frames: frames
            .into_iter()
            .map(|(index, poses)| crate::pose::Frame { index, poses })
            .collect(),
    };
    validate_sequence(&seq)?;
    Ok(seq)
}
