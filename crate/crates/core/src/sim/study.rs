//! Stage-to-stage noise propagation: perturb one intermediate quantity of
//! a synthetic two-camera rig (detections, focal length, plane normal,
//! time offset, or rotation) and measure how the downstream stages
//! degrade.

use serde::{Deserialize, Serialize};

use super::rig::{generate_rig_sequence, RigConfig, RigGroundTruth};
use super::{derive_seed, perturb_focal, perturb_normal, perturb_rotation, NoiseTarget};
use crate::bundle::{build_ray, closest_points};
use crate::geometry::{plane_basis_from_normal, CameraExtrinsics, CameraIntrinsics, WorldPoint};
use crate::metrics::{metric_nmpjpe, metric_relpose};
use crate::pipeline::{align_pair, align_pair_with_dt, plane_points, PipelineConfig};
use crate::pose::CameraSequence;
use crate::single_view::{ransac_calibrate, RansacConfig};
use crate::sync::PlaneTrack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseStudyRow {
    pub magnitude: f64,
    /// |estimated offset - true offset| in frames (NaN when unavailable).
    pub sync_err: f64,
    /// Relative-pose errors after the rotation search.
    pub search_deg: f64,
    pub search_m: f64,
    /// Relative-pose errors after ICP.
    pub icp_deg: f64,
    pub icp_m: f64,
}

/// Ground-truth relative pose of the pair for the error metric.
fn gt_extrinsics(gt: &RigGroundTruth) -> Vec<CameraExtrinsics> {
    gt.cameras.iter().map(|c| c.extrinsics.clone()).collect()
}

fn pair_errors(
    gt: &RigGroundTruth,
    plane_ref: &crate::geometry::GroundPlaneFrame,
    plane_sync: &crate::geometry::GroundPlaneFrame,
    transform: &crate::geometry::RigidTransform2D,
) -> (f64, f64) {
    let rel = crate::align::compose_extrinsics(plane_ref, plane_sync, transform);
    let pred = vec![CameraExtrinsics::identity(), rel];
    let errs = metric_relpose(&pred, &gt_extrinsics(gt)).expect("two cameras");
    errs[0]
}

struct StageInputs {
    intrinsics: Vec<CameraIntrinsics>,
    planes: Vec<crate::geometry::GroundPlaneFrame>,
}

fn ground_truth_inputs(gt: &RigGroundTruth) -> StageInputs {
    StageInputs {
        intrinsics: gt.cameras.iter().map(|c| c.intrinsics).collect(),
        planes: gt.cameras.iter().map(|c| c.plane.clone()).collect(),
    }
}

fn tracks_for(
    sequences: &[CameraSequence],
    inputs: &StageInputs,
    cfg: &PipelineConfig,
) -> Option<Vec<PlaneTrack>> {
    let mut tracks = Vec::new();
    for (seq, (k, plane)) in sequences
        .iter()
        .zip(inputs.intrinsics.iter().zip(&inputs.planes))
    {
        let (raw, _) = plane_points(seq, k, plane);
        tracks.push(
            raw.dbscan_filtered(cfg.dbscan_eps, cfg.dbscan_min_pts)
                .ok()?,
        );
    }
    Some(tracks)
}

fn run_downstream(
    sequences: &[CameraSequence],
    gt: &RigGroundTruth,
    inputs: &StageInputs,
    forced_dt: Option<i64>,
    cfg: &PipelineConfig,
) -> Option<NoiseStudyRow> {
    let tracks = tracks_for(sequences, inputs, cfg)?;
    let true_dt = gt.cameras[1].delta_t;

    let (_dt_final, sync_err, rotation, icp) = match forced_dt {
        Some(dt) => {
            let (rotation, icp, dt_final) =
                align_pair_with_dt(&tracks[0], &tracks[1], dt, cfg).ok()?;
            (dt_final, (dt - true_dt).abs() as f64, rotation, icp)
        }
        None => {
            let alignment = align_pair(&tracks[0], &tracks[1], cfg).ok()?;
            (
                alignment.delta_t,
                (alignment.sync.delta_t - true_dt).abs() as f64,
                alignment.rotation,
                alignment.icp,
            )
        }
    };

    let (search_deg, search_m) = pair_errors(
        gt,
        &inputs.planes[0],
        &inputs.planes[1],
        &rotation.transform,
    );
    let (icp_deg, icp_m) = pair_errors(
        gt,
        &inputs.planes[0],
        &inputs.planes[1],
        &icp.alignment.transform,
    );
    Some(NoiseStudyRow {
        magnitude: 0.0,
        sync_err,
        search_deg,
        search_m,
        icp_deg,
        icp_m,
    })
}

/// Run one noise target over a magnitude grid, `runs` seeds each, and
/// report the per-magnitude median of every error column.
pub fn run_noise_study(
    rig: &RigConfig,
    target: NoiseTarget,
    magnitudes: &[f64],
    runs: usize,
    master_seed: u64,
) -> Vec<NoiseStudyRow> {
    let cfg = PipelineConfig::default();
    let mut out = Vec::with_capacity(magnitudes.len());
    for (mi, &magnitude) in magnitudes.iter().enumerate() {
        let mut rows = Vec::new();
        for run in 0..runs {
            let seed = derive_seed(master_seed, (mi * runs + run) as u64);
            let (sequences, gt) = generate_rig_sequence(rig, seed);
            let row = match target {
                NoiseTarget::Detections => {
                    // Full cascade from noisy detections: Stage I per
                    // camera, then sync and alignment.
                    let noisy_cfg = RigConfig {
                        detection_noise: magnitude,
                        ..rig.clone()
                    };
                    let (noisy_seqs, gt) = generate_rig_sequence(&noisy_cfg, seed);
                    let ransac = RansacConfig::default();
                    let solved: Option<Vec<_>> = noisy_seqs
                        .iter()
                        .map(|s| ransac_calibrate(s, &ransac).ok())
                        .collect();
                    solved.and_then(|views| {
                        let inputs = StageInputs {
                            intrinsics: views.iter().map(|v| v.intrinsics).collect(),
                            planes: views.iter().map(|v| v.plane.clone()).collect(),
                        };
                        run_downstream(&noisy_seqs, &gt, &inputs, None, &cfg)
                    })
                }
                NoiseTarget::Focal => {
                    let mut inputs = ground_truth_inputs(&gt);
                    for (i, k) in inputs.intrinsics.iter_mut().enumerate() {
                        let f = perturb_focal(k.f, magnitude, derive_seed(seed, 50 + i as u64));
                        *k = CameraIntrinsics::new(f, k.o1, k.o2).expect("positive focal");
                        // The plane frame origin depends on the intrinsics
                        // only through the image center; keep gt planes.
                    }
                    run_downstream(&sequences, &gt, &inputs, None, &cfg)
                }
                NoiseTarget::Normal => {
                    let mut inputs = ground_truth_inputs(&gt);
                    for (i, plane) in inputs.planes.iter_mut().enumerate() {
                        let n = perturb_normal(
                            &plane.normal,
                            magnitude,
                            derive_seed(seed, 60 + i as u64),
                        );
                        let k = inputs.intrinsics[i];
                        if let Ok(p) = plane_basis_from_normal(&n, &k, plane.camera_height()) {
                            *plane = p;
                        }
                    }
                    run_downstream(&sequences, &gt, &inputs, None, &cfg)
                }
                NoiseTarget::Sync => {
                    let inputs = ground_truth_inputs(&gt);
                    let forced = gt.cameras[1].delta_t + magnitude.round() as i64;
                    run_downstream(&sequences, &gt, &inputs, Some(forced), &cfg)
                }
                NoiseTarget::Rotation => Some(rotation_noise_row(&sequences, &gt, magnitude, seed)),
            };
            if let Some(mut r) = row {
                r.magnitude = magnitude;
                rows.push(r);
            }
        }
        out.push(median_row(magnitude, &mut rows));
    }
    out
}

/// Rotation-noise protocol: perturb the ground-truth relative rotation,
/// triangulate every shared joint with the perturbed pair, and report the
/// NMPJPE against the ground-truth 3D poses in the `icp_m` column
/// (meters; the other columns stay zero).
fn rotation_noise_row(
    sequences: &[CameraSequence],
    gt: &RigGroundTruth,
    magnitude_deg: f64,
    seed: u64,
) -> NoiseStudyRow {
    let cam0 = &gt.cameras[0];
    let cam1 = &gt.cameras[1];
    let perturbed = CameraExtrinsics {
        rot_world_to_cam: perturb_rotation(
            &cam1.extrinsics.rot_world_to_cam,
            magnitude_deg,
            derive_seed(seed, 70),
        ),
        position: cam1.extrinsics.position,
    };

    let mut pred = Vec::new();
    let mut truth = Vec::new();
    // World-time index of each camera-1 frame.
    let by_world: std::collections::BTreeMap<i64, &crate::pose::Frame> = sequences[1]
        .frames
        .iter()
        .map(|f| (f.index + cam1.delta_t, f))
        .collect();
    for f0 in &sequences[0].frames {
        let t0 = (f0.index + cam0.delta_t) as usize;
        let Some(f1) = by_world.get(&(t0 as i64)) else {
            continue;
        };
        for p0 in &f0.poses {
            let Some(p1) = f1.poses.iter().find(|p| p.person_id == p0.person_id) else {
                continue;
            };
            for (joint, o0) in &p0.joints {
                let Some(o1) = p1.joints.get(joint) else {
                    continue;
                };
                let r0 = build_ray(&o0.point, &cam0.intrinsics, &cam0.extrinsics);
                let r1 = build_ray(&o1.point, &cam1.intrinsics, &perturbed);
                let (q0, q1, _, _) = closest_points(&r0, &r1);
                pred.push(WorldPoint::from((q0.coords + q1.coords) / 2.0));
                truth.push(gt.poses[t0][p0.person_id as usize][joint]);
            }
        }
    }
    let nmpjpe = metric_nmpjpe(&pred, &truth).unwrap_or(f64::NAN);
    NoiseStudyRow {
        magnitude: magnitude_deg,
        sync_err: 0.0,
        search_deg: 0.0,
        search_m: 0.0,
        icp_deg: 0.0,
        icp_m: nmpjpe,
    }
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    values[values.len() / 2]
}

fn median_row(magnitude: f64, rows: &mut [NoiseStudyRow]) -> NoiseStudyRow {
    NoiseStudyRow {
        magnitude,
        sync_err: median(&mut rows.iter().map(|r| r.sync_err).collect::<Vec<_>>()),
        search_deg: median(&mut rows.iter().map(|r| r.search_deg).collect::<Vec<_>>()),
        search_m: median(&mut rows.iter().map(|r| r.search_m).collect::<Vec<_>>()),
        icp_deg: median(&mut rows.iter().map(|r| r.icp_deg).collect::<Vec<_>>()),
        icp_m: median(&mut rows.iter().map(|r| r.icp_m).collect::<Vec<_>>()),
    }
}

/// CSV: `magnitude,sync_err,search_deg,search_m,icp_deg,icp_m`.
pub fn write_noise_study<W: std::io::Write>(
    rows: &[NoiseStudyRow],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "magnitude,sync_err,search_deg,search_m,icp_deg,icp_m")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.magnitude, r.sync_err, r.search_deg, r.search_m, r.icp_deg, r.icp_m
        )?;
    }
    Ok(())
}
