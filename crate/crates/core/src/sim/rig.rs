//! Multi-camera synthetic rig: walking people observed by several cameras
//! with per-camera time offsets, emitted as detection sequences plus full
//! ground truth. Feeds the synchronization, alignment, refinement, and
//! end-to-end test suites.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Point3, Rotation3, Unit, Vector2, Vector3};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    plane_basis_from_normal, CameraExtrinsics, CameraIntrinsics, GroundPlaneFrame, ImagePoint,
};
use crate::pose::{CameraSequence, Frame, Joint, JointObs, PoseDetection};

/// How per-camera time offsets are realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OffsetMode {
    /// Cameras cover shifted world windows: frame j shows world j + offset.
    #[default]
    Window,
    /// Cameras cover the same world window under skewed clocks: frame
    /// indices start at -offset, so t_ref = t_sync + offset still holds
    /// while every camera sees the whole trajectory.
    Clock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigConfig {
    pub n_cameras: usize,
    pub n_people: usize,
    /// Frames recorded by every camera.
    pub n_frames: usize,
    /// Shared generator focal length, pixels.
    pub focal: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub frame_rate: f64,
    /// Mean and std of the ankle-to-shoulder height, meters.
    pub height_mean: f64,
    pub height_std: f64,
    /// Gaussian pixel noise applied to every emitted joint.
    pub detection_noise: f64,
    /// Per-camera clock offsets satisfying `t_ref = t_sync + offset`.
    /// The reference (first) entry should be 0.
    pub offsets: Vec<i64>,
    pub offset_mode: OffsetMode,
    /// Side length of the square walking area, meters.
    pub patch: f64,
    /// Camera ring radius range, meters.
    pub cam_radius: (f64, f64),
    /// Camera height range, meters.
    pub cam_height: (f64, f64),
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            n_cameras: 2,
            n_people: 3,
            n_frames: 240,
            focal: 1100.0,
            image_width: 1920.0,
            image_height: 1080.0,
            frame_rate: 30.0,
            height_mean: 1.7,
            height_std: 0.0,
            detection_noise: 0.0,
            offsets: vec![0, 0],
            offset_mode: OffsetMode::Window,
            patch: 6.0,
            cam_radius: (8.0, 11.0),
            cam_height: (3.0, 5.5),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GtCamera {
    pub camera_id: String,
    pub intrinsics: CameraIntrinsics,
    /// Pose in the shared world frame (ground plane coordinates, z up).
    pub extrinsics: CameraExtrinsics,
    /// Ground plane expressed in this camera's own coordinates.
    pub plane: GroundPlaneFrame,
    pub delta_t: i64,
}

/// Joints of one person at one world time, world coordinates.
pub type JointSet = BTreeMap<Joint, Point3<f64>>;

#[derive(Debug, Clone)]
pub struct RigGroundTruth {
    pub cameras: Vec<GtCamera>,
    /// `poses[t][p]` = joints of person p at world time t.
    pub poses: Vec<Vec<JointSet>>,
    pub heights: Vec<f64>,
}

/// Non-periodic bounded velocity random walk on the plane.
fn walk(
    rng: &mut StdRng,
    n_people: usize,
    n_times: usize,
    half: f64,
) -> Vec<Vec<(Vector2<f64>, Vector2<f64>)>> {
    let mut pos: Vec<Vector2<f64>> = (0..n_people)
        .map(|_| Vector2::new(rng.random_range(-half..half), rng.random_range(-half..half)))
        .collect();
    let mut vel: Vec<Vector2<f64>> = (0..n_people)
        .map(|_| Vector2::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)))
        .collect();
    let mut out = Vec::with_capacity(n_times);
    for _ in 0..n_times {
        let mut frame = Vec::with_capacity(n_people);
        for (p, v) in pos.iter_mut().zip(vel.iter_mut()) {
            v.x = (v.x + rng.random_range(-0.015..0.015)).clamp(-0.07, 0.07);
            v.y = (v.y + rng.random_range(-0.015..0.015)).clamp(-0.07, 0.07);
            *p += *v;
            if p.x > half {
                p.x = half;
                v.x = -v.x.abs();
            } else if p.x < -half {
                p.x = -half;
                v.x = v.x.abs();
            }
            if p.y > half {
                p.y = half;
                v.y = -v.y.abs();
            } else if p.y < -half {
                p.y = -half;
                v.y = v.y.abs();
            }
            frame.push((*p, *v));
        }
        out.push(frame);
    }
    out
}

fn person_joints(center: Vector2<f64>, facing: Vector2<f64>, height: f64) -> JointSet {
    let dir = if facing.norm() > 1e-9 {
        facing.normalize()
    } else {
        Vector2::new(1.0, 0.0)
    };
    let lateral = Vector2::new(-dir.y, dir.x) * 0.13;
    let mut joints = BTreeMap::new();
    // Per-side chains are exactly vertical so the standing filter passes.
    for (side, sign) in [("left", 1.0), ("right", -1.0)] {
        let base = center + lateral * sign;
        let column = |z: f64| Point3::new(base.x, base.y, z);
        let (ankle, knee, hip, shoulder, elbow, wrist) = match side {
            "left" => (
                Joint::LeftAnkle,
                Joint::LeftKnee,
                Joint::LeftHip,
                Joint::LeftShoulder,
                Joint::LeftElbow,
                Joint::LeftWrist,
            ),
            _ => (
                Joint::RightAnkle,
                Joint::RightKnee,
                Joint::RightHip,
                Joint::RightShoulder,
                Joint::RightElbow,
                Joint::RightWrist,
            ),
        };
        joints.insert(ankle, column(0.0));
        joints.insert(knee, column(0.30 * height));
        joints.insert(hip, column(0.55 * height));
        joints.insert(shoulder, column(height));
        // Arms hang outward; excluded from refinement anyway.
        let arm = center + lateral * (1.6 * sign);
        joints.insert(elbow, Point3::new(arm.x, arm.y, 0.75 * height));
        joints.insert(wrist, Point3::new(arm.x, arm.y, 0.52 * height));
    }
    joints.insert(Joint::Neck, Point3::new(center.x, center.y, 1.05 * height));
    joints.insert(Joint::Head, Point3::new(center.x, center.y, 1.15 * height));
    joints
}

fn look_at_pose(position: Point3<f64>, target: Point3<f64>) -> CameraExtrinsics {
    let forward = (target - position).normalize();
    let up = Vector3::z();
    // Camera convention: x right, y down, z forward.
    let y_cam = (forward * up.dot(&forward) - up).normalize();
    let x_cam = y_cam.cross(&forward);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_rows(&[
        x_cam.transpose(),
        y_cam.transpose(),
        forward.transpose(),
    ]));
    CameraExtrinsics {
        rot_world_to_cam: rot,
        position,
    }
}

/// Generate the full rig: per-camera detection sequences (subject to
/// per-camera clock offsets and optional pixel noise) plus ground truth.
pub fn generate_rig_sequence(cfg: &RigConfig, seed: u64) -> (Vec<CameraSequence>, RigGroundTruth) {
    assert_eq!(
        cfg.offsets.len(),
        cfg.n_cameras,
        "one clock offset per camera"
    );
    let mut rng = StdRng::seed_from_u64(seed);
    let max_offset = cfg.offsets.iter().copied().max().unwrap_or(0).max(0);
    let n_times = match cfg.offset_mode {
        OffsetMode::Window => cfg.n_frames + max_offset as usize,
        OffsetMode::Clock => cfg.n_frames,
    };

    let height_dist = Normal::new(cfg.height_mean, cfg.height_std).expect("std >= 0");
    let heights: Vec<f64> = (0..cfg.n_people)
        .map(|_| height_dist.sample(&mut rng).max(0.8))
        .collect();
    let trajectory = walk(&mut rng, cfg.n_people, n_times, cfg.patch / 2.0);
    let poses: Vec<Vec<JointSet>> = trajectory
        .iter()
        .map(|frame| {
            frame
                .iter()
                .zip(&heights)
                .map(|((p, v), &h)| person_joints(*p, *v, h))
                .collect()
        })
        .collect();

    let principal = ImagePoint::new(cfg.image_width / 2.0, cfg.image_height / 2.0);
    let intrinsics =
        CameraIntrinsics::new(cfg.focal, principal.x, principal.y).expect("positive focal");

    let mut cameras = Vec::with_capacity(cfg.n_cameras);
    for c in 0..cfg.n_cameras {
        let angle =
            std::f64::consts::TAU * c as f64 / cfg.n_cameras as f64 + rng.random_range(-0.2..0.2);
        let radius = rng.random_range(cfg.cam_radius.0..cfg.cam_radius.1);
        let height = rng.random_range(cfg.cam_height.0..cfg.cam_height.1);
        let position = Point3::new(radius * angle.cos(), radius * angle.sin(), height);
        let target = Point3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            0.0,
        );
        let extrinsics = look_at_pose(position, target);
        // Ground normal (world +z) in this camera's coordinates.
        let n_cam = Unit::new_normalize(extrinsics.rot_world_to_cam * Vector3::z());
        let plane = plane_basis_from_normal(&n_cam, &intrinsics, height)
            .expect("ring cameras look down at the patch");
        cameras.push(GtCamera {
            camera_id: format!("cam{c}"),
            intrinsics,
            extrinsics,
            plane,
            delta_t: cfg.offsets[c],
        });
    }

    let noise = if cfg.detection_noise > 0.0 {
        Some(Normal::new(0.0, cfg.detection_noise).expect("std >= 0"))
    } else {
        None
    };

    let mut sequences = Vec::with_capacity(cfg.n_cameras);
    for cam in &cameras {
        let mut frames = Vec::with_capacity(cfg.n_frames);
        for j in 0..cfg.n_frames {
            let (t, index) = match cfg.offset_mode {
                OffsetMode::Window => ((j as i64 + cam.delta_t) as usize, j as i64),
                OffsetMode::Clock => (j, j as i64 - cam.delta_t),
            };
            let mut detections = Vec::new();
            for (person, joints) in poses[t].iter().enumerate() {
                let mut obs = BTreeMap::new();
                let mut visible = true;
                for (joint, world) in joints {
                    let cam_pt = cam.extrinsics.world_to_cam(world);
                    if cam_pt.z < 0.5 {
                        visible = false;
                        break;
                    }
                    let mut px = ImagePoint::new(
                        cam.intrinsics.f * cam_pt.x / cam_pt.z + cam.intrinsics.o1,
                        cam.intrinsics.f * cam_pt.y / cam_pt.z + cam.intrinsics.o2,
                    );
                    if joint.excluded_from_refinement() {
                        // Arms and head may leave the frame without dropping
                        // the pose; core joints must stay visible.
                    } else if px.x < 0.0
                        || px.x > cfg.image_width
                        || px.y < 0.0
                        || px.y > cfg.image_height
                    {
                        visible = false;
                        break;
                    }
                    if let Some(dist) = &noise {
                        px.x += dist.sample(&mut rng);
                        px.y += dist.sample(&mut rng);
                    }
                    obs.insert(
                        *joint,
                        JointObs {
                            point: px,
                            confidence: rng.random_range(0.6..1.0),
                        },
                    );
                }
                if visible {
                    detections.push(PoseDetection {
                        person_id: person as u32,
                        joints: obs,
                    });
                }
            }
            frames.push(Frame {
                index,
                poses: detections,
            });
        }
        sequences.push(CameraSequence {
            version: CameraSequence::SCHEMA_VERSION,
            camera_id: cam.camera_id.clone(),
            width: cfg.image_width,
            height: cfg.image_height,
            frame_rate: cfg.frame_rate,
            frames,
        });
    }

    (
        sequences,
        RigGroundTruth {
            cameras,
            poses,
            heights,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use crate::single_view::{ransac_calibrate, RansacConfig};

    #[test]
    fn rig_is_deterministic() {
        let cfg = RigConfig::default();
        let (a, _) = generate_rig_sequence(&cfg, 3);
        let (b, _) = generate_rig_sequence(&cfg, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn gt_projections_are_consistent() {
        let cfg = RigConfig {
            n_frames: 30,
            ..RigConfig::default()
        };
        let (seqs, gt) = generate_rig_sequence(&cfg, 5);
        for (seq, cam) in seqs.iter().zip(&gt.cameras) {
            for frame in &seq.frames {
                let t = (frame.index + cam.delta_t) as usize;
                for pose in &frame.poses {
                    let world = &gt.poses[t][pose.person_id as usize];
                    for (joint, obs) in &pose.joints {
                        let px =
                            project(&cam.extrinsics.world_to_cam(&world[joint]), &cam.intrinsics)
                                .unwrap();
                        assert!(px.distance(&obs.point) < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn generated_people_pass_stage_one() {
        let cfg = RigConfig {
            n_frames: 120,
            n_people: 4,
            ..RigConfig::default()
        };
        let (seqs, gt) = generate_rig_sequence(&cfg, 11);
        let sol = ransac_calibrate(
            &seqs[0],
            &RansacConfig {
                iterations: 300,
                ..RansacConfig::default()
            },
        )
        .unwrap();
        let f_err = (sol.intrinsics.f - cfg.focal).abs() / cfg.focal;
        assert!(f_err < 1e-3, "focal error {f_err}");
        let dot = sol.normal.dot(&gt.cameras[0].plane.normal);
        assert!(dot > 1.0 - 1e-6, "normal mismatch {dot}");
    }

    #[test]
    fn world_up_maps_to_plane_up() {
        let (_, gt) = generate_rig_sequence(&RigConfig::default(), 13);
        for cam in &gt.cameras {
            // Camera height above plane equals world z of its position.
            assert!((cam.plane.camera_height() - cam.extrinsics.position.z).abs() < 1e-9);
        }
    }
}
