//! End-to-end orchestration of the five-stage cascade over per-camera
//! detection sequences.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{
    compose_extrinsics, compose_world_from_cam, icp_refine, median_frame_displacement,
    search_rotation, timed_cloud, AlignmentResult, IcpConfig, IcpResult,
};
use crate::bundle::{optimize_bundle, BundleCamera, BundleConfig, BundleProblem, Observation};
use crate::geometry::{
    backproject_to_plane, CameraExtrinsics, CameraIntrinsics, GroundPlaneFrame, PlanePoint2,
    RigidTransform2D,
};
use crate::pose::CameraSequence;
use crate::single_view::{ransac_calibrate, RansacConfig, SingleViewSolution};
use crate::sync::{
    center_distance_signal, hungarian_assign, search_time_offset_bidirectional, FrameCost,
    PlaneTrack, SyncResult,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("need at least 2 cameras, got {0}")]
    NeedTwoCameras(usize),
    #[error("duplicate camera id '{0}'")]
    DuplicateCameraId(String),
    #[error("reference camera '{0}' not found")]
    ReferenceNotFound(String),
    #[error("camera '{camera}', stage '{stage}': {message}")]
    Stage {
        camera: String,
        stage: &'static str,
        message: String,
    },
}

fn stage_err(camera: &str, stage: &'static str, err: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage {
        camera: camera.to_string(),
        stage,
        message: err.to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub ransac: RansacConfig,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    /// Offset search range; `None` scans a third of the sync length.
    pub max_offset: Option<usize>,
    pub frame_cost: FrameCost,
    pub rotation_step_deg: f64,
    pub icp: IcpConfig,
    pub bundle: BundleConfig,
    pub bundle_weights: [f64; 4],
    /// Poses kept for the joint refinement; 0 keeps everything.
    pub k_top: usize,
    /// Maximum plane distance for cross-camera person association, meters.
    pub association_max_dist: f64,
    pub skip_bundle: bool,
    /// Reference camera id; lowest id when unset.
    pub reference: Option<String>,
    /// Master seed; per-camera RANSAC seeds derive from it and the camera
    /// id, so per-camera results do not depend on rig composition.
    pub seed: u64,
    /// Time-axis scale for the timed clouds, meters per frame; the median
    /// per-frame displacement of the reference track when unset.
    pub time_scale: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ransac: RansacConfig::default(),
            dbscan_eps: 0.5,
            dbscan_min_pts: 5,
            max_offset: None,
            frame_cost: FrameCost::Mean,
            rotation_step_deg: 1.0,
            icp: IcpConfig::default(),
            bundle: BundleConfig::default(),
            bundle_weights: BundleProblem::DEFAULT_WEIGHTS,
            k_top: 100,
            association_max_dist: 1.0,
            skip_bundle: false,
            reference: None,
            seed: 0,
            time_scale: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CameraSolution {
    pub camera_id: String,
    pub intrinsics: CameraIntrinsics,
    /// Pose in the reference camera's frame (identity for the reference).
    pub extrinsics: CameraExtrinsics,
    /// This camera's own ground-plane frame from Stage I.
    pub plane: GroundPlaneFrame,
    /// Offset such that `t_ref = t_this + delta_t`; 0 for the reference.
    pub delta_t: i64,
    pub inliers: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PairDiagnostics {
    pub camera_id: String,
    pub sync_costs: Vec<(i64, f64)>,
    pub rotation_step_deg: f64,
    pub rotation_costs: Vec<f64>,
    pub icp_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RigSolution {
    pub reference: String,
    pub cameras: Vec<CameraSolution>,
    pub pair_diagnostics: Vec<PairDiagnostics>,
    pub bundle_history: Vec<f64>,
}

/// FNV-1a over the camera id folded into the master seed; stable across
/// platforms so per-camera stages reproduce independently of rig order.
fn camera_seed(master: u64, camera_id: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ master;
    for b in camera_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Backproject every pose's ankle center onto the camera's ground plane,
/// indexed by frame: contiguous track plus per-frame (pose index, point)
/// lists for association.
pub fn plane_points(
    seq: &CameraSequence,
    intrinsics: &CameraIntrinsics,
    plane: &GroundPlaneFrame,
) -> (PlaneTrack, BTreeMap<i64, Vec<(usize, PlanePoint2)>>) {
    let mut by_frame: BTreeMap<i64, Vec<(usize, PlanePoint2)>> = BTreeMap::new();
    for frame in &seq.frames {
        let mut entries = Vec::new();
        for (pose_idx, pose) in frame.poses.iter().enumerate() {
            let Some(ankle) = pose.ankle_center() else {
                continue;
            };
            if let Ok(p) = backproject_to_plane(&ankle, intrinsics, plane) {
                entries.push((pose_idx, PlanePoint2::new(p.x, p.y)));
            }
        }
        by_frame.insert(frame.index, entries);
    }
    let start = by_frame.keys().next().copied().unwrap_or(0);
    let end = by_frame.keys().next_back().copied().unwrap_or(-1);
    let mut frames = Vec::new();
    for index in start..=end {
        frames.push(
            by_frame
                .get(&index)
                .map(|v| v.iter().map(|(_, p)| *p).collect())
                .unwrap_or_default(),
        );
    }
    (PlaneTrack { start, frames }, by_frame)
}

/// Stages II-IV for one camera pair: offset search on the distance
/// signals, then rotation search and ICP on the offset-aligned clouds.
pub struct PairAlignment {
    pub delta_t: i64,
    pub sync: SyncResult,
    pub rotation: AlignmentResult,
    pub icp: IcpResult,
    pub transform: RigidTransform2D,
}

pub fn align_pair(
    ref_track: &PlaneTrack,
    sync_track: &PlaneTrack,
    cfg: &PipelineConfig,
) -> Result<PairAlignment, String> {
    let ref_sig = center_distance_signal(ref_track).map_err(|e| e.to_string())?;
    let sync_sig = center_distance_signal(sync_track).map_err(|e| e.to_string())?;
    let sync =
        search_time_offset_bidirectional(&ref_sig, &sync_sig, cfg.max_offset, cfg.frame_cost)
            .map_err(|e| e.to_string())?;
    let (rotation, icp, delta_t) =
        align_pair_with_dt(ref_track, sync_track, sync.delta_t, cfg).map_err(|e| e.to_string())?;
    Ok(PairAlignment {
        delta_t,
        sync,
        transform: icp.alignment.transform,
        rotation,
        icp,
    })
}

/// Stages III-IV only, with a given time offset.
pub fn align_pair_with_dt(
    ref_track: &PlaneTrack,
    sync_track: &PlaneTrack,
    delta_t: i64,
    cfg: &PipelineConfig,
) -> Result<(AlignmentResult, IcpResult, i64), crate::align::AlignError> {
    let shifted = PlaneTrack {
        start: sync_track.start + delta_t,
        frames: sync_track.frames.clone(),
    };
    let scale = cfg
        .time_scale
        .unwrap_or_else(|| median_frame_displacement(ref_track));
    let ref_cloud = timed_cloud(ref_track, scale);
    let sync_cloud = timed_cloud(&shifted, scale);
    let rotation = search_rotation(&ref_cloud, &sync_cloud, cfg.rotation_step_deg)?;
    let icp = icp_refine(ref_track, &shifted, &rotation.transform, &cfg.icp)?;
    let delta_t = delta_t + icp.dt_adjustment;
    Ok((rotation, icp, delta_t))
}

struct PairOutcome {
    camera_index: usize,
    alignment: PairAlignment,
}

/// Run the five-stage cascade. Cameras are processed in camera-id order;
/// the output lists the reference first.
pub fn run_pipeline(
    sequences: &[CameraSequence],
    cfg: &PipelineConfig,
) -> Result<RigSolution, PipelineError> {
    if sequences.len() < 2 {
        return Err(PipelineError::NeedTwoCameras(sequences.len()));
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.sort_by(|&a, &b| sequences[a].camera_id.cmp(&sequences[b].camera_id));
    for w in order.windows(2) {
        if sequences[w[0]].camera_id == sequences[w[1]].camera_id {
            return Err(PipelineError::DuplicateCameraId(
                sequences[w[0]].camera_id.clone(),
            ));
        }
    }
    let reference_pos = match &cfg.reference {
        Some(id) => order
            .iter()
            .position(|&i| sequences[i].camera_id == *id)
            .ok_or_else(|| PipelineError::ReferenceNotFound(id.clone()))?,
        None => 0,
    };
    order.swap(0, reference_pos);
    let reference_id = sequences[order[0]].camera_id.clone();

    // Stage I, independently per camera.
    let single: Vec<SingleViewSolution> = order
        .par_iter()
        .map(|&i| {
            let seq = &sequences[i];
            let ransac = RansacConfig {
                seed: camera_seed(cfg.seed, &seq.camera_id),
                ..cfg.ransac.clone()
            };
            ransac_calibrate(seq, &ransac).map_err(|e| stage_err(&seq.camera_id, "single-view", e))
        })
        .collect::<Result<_, _>>()?;

    // Ground-plane tracks (DBSCAN-filtered) and per-pose points.
    let mut tracks = Vec::with_capacity(order.len());
    let mut pose_points = Vec::with_capacity(order.len());
    for (slot, &i) in order.iter().enumerate() {
        let seq = &sequences[i];
        let (raw, by_frame) = plane_points(seq, &single[slot].intrinsics, &single[slot].plane);
        let filtered = raw
            .dbscan_filtered(cfg.dbscan_eps, cfg.dbscan_min_pts)
            .map_err(|e| stage_err(&seq.camera_id, "plane-filter", e))?;
        tracks.push(filtered);
        pose_points.push(by_frame);
    }

    // Stages II-IV per non-reference camera.
    let outcomes: Vec<PairOutcome> = (1..order.len())
        .into_par_iter()
        .map(|slot| {
            let seq = &sequences[order[slot]];
            let alignment = align_pair(&tracks[0], &tracks[slot], cfg)
                .map_err(|e| stage_err(&seq.camera_id, "sync-align", e))?;
            Ok(PairOutcome {
                camera_index: slot,
                alignment,
            })
        })
        .collect::<Result<_, PipelineError>>()?;

    let mut transforms: Vec<RigidTransform2D> = vec![RigidTransform2D::identity(); order.len()];
    let mut delta_ts: Vec<i64> = vec![0; order.len()];
    let mut pair_diagnostics = Vec::with_capacity(outcomes.len());
    for outcome in &outcomes {
        let slot = outcome.camera_index;
        transforms[slot] = outcome.alignment.transform;
        delta_ts[slot] = outcome.alignment.delta_t;
        pair_diagnostics.push(PairDiagnostics {
            camera_id: sequences[order[slot]].camera_id.clone(),
            sync_costs: outcome.alignment.sync.per_offset_costs.clone(),
            rotation_step_deg: cfg.rotation_step_deg,
            rotation_costs: outcome.alignment.rotation.history.clone(),
            icp_history: outcome.alignment.icp.alignment.history.clone(),
        });
    }

    // Poses in the reference camera's plane frame (the refinement world).
    let mut world_cameras: Vec<BundleCamera> = (0..order.len())
        .map(|slot| BundleCamera {
            intrinsics: single[slot].intrinsics,
            pose: compose_world_from_cam(&single[slot].plane, &transforms[slot]),
        })
        .collect();

    let mut bundle_history = Vec::new();
    if !cfg.skip_bundle {
        let observations =
            build_observations(sequences, &order, &pose_points, &transforms, &delta_ts, cfg);
        let problem = BundleProblem {
            cameras: world_cameras.clone(),
            observations,
            weights: cfg.bundle_weights,
            k_top: cfg.k_top,
            person_height: cfg.ransac.person_height,
        };
        match optimize_bundle(&problem, &cfg.bundle) {
            Ok(result) => {
                bundle_history = result.loss_history.clone();
                if !result.diverged {
                    world_cameras = result.cameras;
                }
            }
            Err(crate::bundle::BundleError::NoSharedObservations) => {
                // Nothing matched across cameras; keep the Stage IV poses.
            }
            Err(e) => {
                return Err(stage_err(&reference_id, "bundle", e));
            }
        }
    }

    // Express every camera in the reference camera's frame.
    let cameras: Vec<CameraSolution> = (0..order.len())
        .map(|slot| {
            let seq = &sequences[order[slot]];
            let extrinsics = if slot == 0 {
                // The reference camera defines the output frame.
                CameraExtrinsics::identity()
            } else if cfg.skip_bundle {
                compose_extrinsics(&single[0].plane, &single[slot].plane, &transforms[slot])
            } else {
                world_cameras[slot].pose.relative_to(&world_cameras[0].pose)
            };
            CameraSolution {
                camera_id: seq.camera_id.clone(),
                intrinsics: world_cameras[slot].intrinsics,
                extrinsics,
                plane: single[slot].plane.clone(),
                delta_t: delta_ts[slot],
                inliers: single[slot].inlier_count(),
                pairs: single[slot].pairs.len(),
            }
        })
        .collect();

    Ok(RigSolution {
        reference: reference_id,
        cameras,
        pair_diagnostics,
        bundle_history,
    })
}

/// Cross-camera person association: every reference pose becomes one
/// person keyed by its slot in the frame; each other camera's poses match
/// to reference poses per frame through the Hungarian algorithm on
/// in-plane distances under that camera's final transform.
fn build_observations(
    sequences: &[CameraSequence],
    order: &[usize],
    pose_points: &[BTreeMap<i64, Vec<(usize, PlanePoint2)>>],
    transforms: &[RigidTransform2D],
    delta_ts: &[i64],
    cfg: &PipelineConfig,
) -> Vec<Observation> {
    let mut observations = Vec::new();
    let ref_seq = &sequences[order[0]];

    let push_pose = |obs: &mut Vec<Observation>,
                     frame: i64,
                     person: u32,
                     camera: usize,
                     pose: &crate::pose::PoseDetection| {
        for (joint, jo) in &pose.joints {
            obs.push(Observation {
                frame,
                person,
                camera,
                joint: *joint,
                point: jo.point,
                confidence: jo.confidence,
            });
        }
    };

    // Reference camera observations.
    for frame in &ref_seq.frames {
        for (pose_idx, pose) in frame.poses.iter().enumerate() {
            push_pose(&mut observations, frame.index, pose_idx as u32, 0, pose);
        }
    }

    // Other cameras, matched to reference poses frame by frame.
    for slot in 1..order.len() {
        let seq = &sequences[order[slot]];
        let frames_by_index: BTreeMap<i64, &crate::pose::Frame> =
            seq.frames.iter().map(|f| (f.index, f)).collect();
        for (&frame_index, entries) in &pose_points[slot] {
            if entries.is_empty() {
                continue;
            }
            let t_ref = frame_index + delta_ts[slot];
            let Some(ref_entries) = pose_points[0].get(&t_ref) else {
                continue;
            };
            if ref_entries.is_empty() {
                continue;
            }
            let Some(frame) = frames_by_index.get(&frame_index) else {
                continue;
            };
            let moved: Vec<PlanePoint2> = entries
                .iter()
                .map(|(_, p)| transforms[slot].apply(p))
                .collect();
            let cost: Vec<Vec<f64>> = moved
                .iter()
                .map(|m| ref_entries.iter().map(|(_, r)| (m - r).norm()).collect())
                .collect();
            for (r, c) in hungarian_assign(&cost) {
                if cost[r][c] > cfg.association_max_dist {
                    continue;
                }
                let pose = &frame.poses[entries[r].0];
                let ref_person = ref_entries[c].0 as u32;
                push_pose(&mut observations, t_ref, ref_person, slot, pose);
            }
        }
    }
    observations
}
