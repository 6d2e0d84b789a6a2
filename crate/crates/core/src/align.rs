//! Stages III and IV: brute-force in-plane rotation search followed by ICP
//! refinement of the 2D rigid transform between two cameras' ground-plane
//! point clouds.

use nalgebra::{Rotation3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::geometry::{CameraExtrinsics, GroundPlaneFrame, PlanePoint2, RigidTransform2D};
use crate::sync::hungarian::hungarian_assign;
use crate::sync::PlaneTrack;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AlignError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("fewer than 2 correspondences for the rigid fit")]
    TooFewCorrespondences,
}

/// An on-plane detection augmented with its (scaled) time coordinate.
/// `frame` restricts chamfer candidates to co-temporal points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPlanePoint {
    pub x: f64,
    pub y: f64,
    /// Frame index times the time scale, commensurate with meters.
    pub t: f64,
    pub frame: i64,
}

/// Build the timed cloud of a track. `time_scale` converts frames to
/// meters; pick it near the median per-frame displacement so time and
/// space weigh similarly.
pub fn timed_cloud(track: &PlaneTrack, time_scale: f64) -> Vec<TimedPlanePoint> {
    let mut out = Vec::new();
    for (i, frame) in track.frames.iter().enumerate() {
        let index = track.start + i as i64;
        for p in frame {
            out.push(TimedPlanePoint {
                x: p.x,
                y: p.y,
                t: index as f64 * time_scale,
                frame: index,
            });
        }
    }
    out
}

/// Median distance between consecutive positions of the cloud, per frame;
/// the default time scale.
pub fn median_frame_displacement(track: &PlaneTrack) -> f64 {
    let mut steps = Vec::new();
    for w in track.frames.windows(2) {
        for a in &w[0] {
            if let Some(b) = w[1].iter().min_by(|p, q| {
                let dp = (*p - a).norm();
                let dq = (*q - a).norm();
                dp.partial_cmp(&dq).expect("finite")
            }) {
                steps.push((b - a).norm());
            }
        }
    }
    if steps.is_empty() {
        return 1.0;
    }
    steps.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let m = steps[steps.len() / 2];
    if m > 1e-12 {
        m
    } else {
        1.0
    }
}

fn dist3(a: &TimedPlanePoint, b: &TimedPlanePoint) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.t - b.t).powi(2)).sqrt()
}

fn by_frame(points: &[TimedPlanePoint]) -> HashMap<i64, Vec<usize>> {
    let mut map: HashMap<i64, Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        map.entry(p.frame).or_default().push(i);
    }
    map
}

/// Symmetric chamfer distance in (x, y, t): for each point the nearest
/// neighbor among the other cloud's points of the same frame, summed over
/// both directions. Points whose frame is absent from the other cloud
/// contribute nothing.
pub fn timed_chamfer(a: &[TimedPlanePoint], b: &[TimedPlanePoint]) -> Result<f64, AlignError> {
    if a.is_empty() || b.is_empty() {
        return Err(AlignError::EmptyCloud);
    }
    let index_b = by_frame(b);
    let index_a = by_frame(a);
    Ok(directed(a, b, &index_b) + directed(b, a, &index_a))
}

fn directed(
    from: &[TimedPlanePoint],
    to: &[TimedPlanePoint],
    to_index: &HashMap<i64, Vec<usize>>,
) -> f64 {
    let mut total = 0.0;
    for p in from {
        if let Some(candidates) = to_index.get(&p.frame) {
            let best = candidates
                .iter()
                .map(|&j| dist3(p, &to[j]))
                .fold(f64::INFINITY, f64::min);
            total += best;
        }
    }
    total
}

/// Outcome of a rotation scan or an ICP run. `history` holds the cost per
/// candidate angle (rotation search) or per iteration (ICP).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub transform: RigidTransform2D,
    pub cost: f64,
    pub iterations: usize,
    pub history: Vec<f64>,
}

fn centroid2(points: &[TimedPlanePoint]) -> Vector2<f64> {
    let mut c = Vector2::zeros();
    for p in points {
        c += Vector2::new(p.x, p.y);
    }
    c / points.len() as f64
}

/// Scan in-plane rotations in `{0, step, ..., 360 - step}` degrees after
/// shifting the sync centroid onto the reference centroid, scoring each
/// candidate with the timed chamfer distance. Ties go to the smaller
/// angle. No closed form exists because correspondences are unknown.
pub fn search_rotation(
    reference: &[TimedPlanePoint],
    sync: &[TimedPlanePoint],
    step_deg: f64,
) -> Result<AlignmentResult, AlignError> {
    if reference.is_empty() || sync.is_empty() {
        return Err(AlignError::EmptyCloud);
    }
    assert!(
        step_deg > 0.0 && step_deg <= 90.0,
        "rotation step must be in (0, 90] degrees"
    );
    let c_ref = centroid2(reference);
    let c_sync = centroid2(sync);
    let steps = (360.0 / step_deg).round() as usize;

    let costs: Vec<f64> = (0..steps)
        .into_par_iter()
        .map(|k| {
            let angle = (k as f64 * step_deg).to_radians();
            let (s, c) = angle.sin_cos();
            let moved: Vec<TimedPlanePoint> = sync
                .iter()
                .map(|p| {
                    let q = Vector2::new(p.x, p.y) - c_sync;
                    TimedPlanePoint {
                        x: c * q.x - s * q.y + c_ref.x,
                        y: s * q.x + c * q.y + c_ref.y,
                        ..*p
                    }
                })
                .collect();
            timed_chamfer(reference, &moved).expect("clouds are non-empty")
        })
        .collect();

    let (best_k, best_cost) = costs
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| (a.1, a.0).partial_cmp(&(b.1, b.0)).expect("finite"))
        .expect("at least one angle");
    let angle = (best_k as f64 * step_deg).to_radians();
    let (s, c) = angle.sin_cos();
    let rot_c_sync = Vector2::new(c * c_sync.x - s * c_sync.y, s * c_sync.x + c * c_sync.y);
    Ok(AlignmentResult {
        transform: RigidTransform2D::new(angle, c_ref - rot_c_sync),
        cost: best_cost,
        iterations: steps,
        history: costs,
    })
}

/// Closed-form 2D rigid least squares (orthogonal Procrustes) mapping
/// `src` onto `dst`.
fn fit_rigid_2d(pairs: &[(PlanePoint2, PlanePoint2)]) -> Result<RigidTransform2D, AlignError> {
    if pairs.len() < 2 {
        return Err(AlignError::TooFewCorrespondences);
    }
    let n = pairs.len() as f64;
    let mut cs = Vector2::zeros();
    let mut cd = Vector2::zeros();
    for (s, d) in pairs {
        cs += s.coords;
        cd += d.coords;
    }
    cs /= n;
    cd /= n;
    let mut dot = 0.0;
    let mut cross = 0.0;
    for (s, d) in pairs {
        let a = s.coords - cs;
        let b = d.coords - cd;
        dot += a.dot(&b);
        cross += a.x * b.y - a.y * b.x;
    }
    let angle = cross.atan2(dot);
    let (sn, cn) = angle.sin_cos();
    let rot_cs = Vector2::new(cn * cs.x - sn * cs.y, sn * cs.x + cn * cs.y);
    Ok(RigidTransform2D::new(angle, cd - rot_cs))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Stop when the RMS cost improves by less than this, meters.
    pub tol: f64,
    /// Half-width of the optional per-iteration time-offset re-check;
    /// 0 disables it.
    pub dt_window: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-10,
            dt_window: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcpResult {
    pub alignment: AlignmentResult,
    /// Extra integer offset absorbed by the optional time re-check.
    pub dt_adjustment: i64,
}

/// Pairs of (sync original point, reference point) matched per frame with
/// the Hungarian algorithm on squared distances under `transform`, plus
/// the summed squared distance of the matching.
fn associate(
    reference: &PlaneTrack,
    sync: &PlaneTrack,
    dt: i64,
    transform: &RigidTransform2D,
) -> (Vec<(PlanePoint2, PlanePoint2)>, f64) {
    let mut pairs = Vec::new();
    let mut ssq = 0.0;
    for (i, sync_frame) in sync.frames.iter().enumerate() {
        if sync_frame.is_empty() {
            continue;
        }
        let t_ref = sync.start + i as i64 + dt;
        let j = t_ref - reference.start;
        if j < 0 || j >= reference.frames.len() as i64 {
            continue;
        }
        let ref_frame = &reference.frames[j as usize];
        if ref_frame.is_empty() {
            continue;
        }
        let moved: Vec<PlanePoint2> = sync_frame.iter().map(|p| transform.apply(p)).collect();
        let cost: Vec<Vec<f64>> = moved
            .iter()
            .map(|m| ref_frame.iter().map(|r| (m - r).norm_squared()).collect())
            .collect();
        for (r, c) in hungarian_assign(&cost) {
            pairs.push((sync_frame[r], ref_frame[c]));
            ssq += cost[r][c];
        }
    }
    (pairs, ssq)
}

/// Alternate per-frame Hungarian association and the closed-form rigid
/// fit, starting from `init`. The recorded cost (RMS of matched
/// distances) is non-increasing across iterations because both steps
/// minimize the same summed squared objective.
pub fn icp_refine(
    reference: &PlaneTrack,
    sync: &PlaneTrack,
    init: &RigidTransform2D,
    cfg: &IcpConfig,
) -> Result<IcpResult, AlignError> {
    let mut transform = *init;
    let mut dt_adjustment = 0i64;
    let mut history = Vec::new();
    let mut prev_cost = f64::INFINITY;

    for _ in 0..cfg.max_iter {
        if cfg.dt_window > 0 {
            let w = cfg.dt_window as i64;
            let best = (-w..=w)
                .map(|d| {
                    let (_, ssq) = associate(reference, sync, dt_adjustment + d, &transform);
                    (d, ssq)
                })
                .min_by(|a, b| {
                    (a.1, a.0.abs())
                        .partial_cmp(&(b.1, b.0.abs()))
                        .expect("finite")
                })
                .expect("window non-empty");
            dt_adjustment += best.0;
        }

        let (pairs, _) = associate(reference, sync, dt_adjustment, &transform);
        if pairs.len() < 2 {
            return Err(AlignError::TooFewCorrespondences);
        }
        transform = fit_rigid_2d(&pairs)?;
        let ssq: f64 = pairs
            .iter()
            .map(|(s, d)| (transform.apply(s) - d).norm_squared())
            .sum();
        let cost = (ssq / pairs.len() as f64).sqrt();
        history.push(cost);
        if cost <= cfg.tol || prev_cost - cost < cfg.tol {
            break;
        }
        prev_cost = cost;
    }

    let cost = *history.last().expect("max_iter >= 1");
    Ok(IcpResult {
        alignment: AlignmentResult {
            transform,
            cost,
            iterations: history.len(),
            history,
        },
        dt_adjustment,
    })
}

/// Lift an in-plane transform to 3D: rotation about the plane up axis and
/// translation within the plane.
pub fn lift_plane_transform(t2d: &RigidTransform2D) -> (Rotation3<f64>, Vector3<f64>) {
    (
        Rotation3::from_axis_angle(&Vector3::z_axis(), t2d.angle),
        Vector3::new(t2d.translation.x, t2d.translation.y, 0.0),
    )
}

/// Pose of a camera in the reference camera's plane coordinates: its own
/// cam-to-plane frame composed with the in-plane transform aligning its
/// plane coordinates onto the reference's.
pub fn compose_world_from_cam(
    plane: &GroundPlaneFrame,
    t2d: &RigidTransform2D,
) -> CameraExtrinsics {
    let (r3, t3) = lift_plane_transform(t2d);
    // p_world = r3 (R_cp p_cam + t_plane) + t3
    let rot_cam_to_world = r3 * plane.rot_cam_to_plane;
    let position = r3 * plane.t_plane + t3;
    CameraExtrinsics {
        rot_world_to_cam: rot_cam_to_world.inverse(),
        position: position.into(),
    }
}

/// Express the sync camera in the reference camera's own frame given both
/// cameras' plane frames and the in-plane transform mapping sync plane
/// coordinates onto reference plane coordinates.
pub fn compose_extrinsics(
    plane_ref: &GroundPlaneFrame,
    plane_sync: &GroundPlaneFrame,
    t2d: &RigidTransform2D,
) -> CameraExtrinsics {
    let world_from_ref = compose_world_from_cam(plane_ref, &RigidTransform2D::identity());
    let world_from_sync = compose_world_from_cam(plane_sync, t2d);
    world_from_sync.relative_to(&world_from_ref)
}
