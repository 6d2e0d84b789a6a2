//! Evaluation metrics: focal/normal/position/reconstruction errors for the
//! single-view stage, relative-pose errors for rigs, and NMPJPE for
//! triangulated poses.

use nalgebra::{Rotation3, Unit, Vector3};

use crate::geometry::{CameraExtrinsics, WorldPoint};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("rigs have different camera counts ({0} vs {1})")]
    MismatchedRigs(usize, usize),
    #[error("pose sets have different joint counts ({0} vs {1})")]
    MismatchedPoses(usize, usize),
}

/// Percent focal error `100 |f_gt - f_pred| / f_gt`.
pub fn metric_focal_pct(pred: f64, gt: f64) -> f64 {
    100.0 * (gt - pred).abs() / gt
}

/// Angle between predicted and ground-truth unit normals, degrees.
pub fn metric_normal_deg(pred: &Unit<Vector3<f64>>, gt: &Unit<Vector3<f64>>) -> f64 {
    pred.dot(gt).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Percent error of the camera-to-plane distance.
pub fn metric_rho_pct(pred: f64, gt: f64) -> f64 {
    100.0 * (pred - gt).abs() / gt
}

/// Reconstruction error: per-point Euclidean error as a percentage of the
/// point's ground-truth distance to the camera (at the origin), averaged.
pub fn metric_x_pct(pred: &[WorldPoint], gt: &[WorldPoint]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(MetricError::MismatchedPoses(pred.len(), gt.len()));
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| 100.0 * (p - g).norm() / g.coords.norm())
        .sum();
    Ok(total / gt.len() as f64)
}

/// Relative-pose error of each non-reference camera: both rigs are reduced
/// to relative transforms from their camera 0, then compared by the
/// absolute difference of rotation angles (degrees) and of translation
/// norms (meters). Gauge-invariant by construction.
pub fn metric_relpose(
    pred: &[CameraExtrinsics],
    gt: &[CameraExtrinsics],
) -> Result<Vec<(f64, f64)>, MetricError> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(MetricError::MismatchedRigs(pred.len(), gt.len()));
    }
    let mut out = Vec::with_capacity(pred.len() - 1);
    for i in 1..pred.len() {
        let rp = pred[i].relative_to(&pred[0]);
        let rg = gt[i].relative_to(&gt[0]);
        let deg = (rotation_angle(&rp.rot_world_to_cam) - rotation_angle(&rg.rot_world_to_cam))
            .abs()
            .to_degrees();
        let m = (rp.position.coords.norm() - rg.position.coords.norm()).abs();
        out.push((deg, m));
    }
    Ok(out)
}

/// Geodesic distance between the relative rotations of each non-reference
/// camera, degrees. Stricter than [`metric_relpose`]'s angle difference;
/// used as an extra diagnostic.
pub fn relpose_geodesic_deg(
    pred: &[CameraExtrinsics],
    gt: &[CameraExtrinsics],
) -> Result<Vec<f64>, MetricError> {
    if pred.len() != gt.len() || pred.len() < 2 {
        return Err(MetricError::MismatchedRigs(pred.len(), gt.len()));
    }
    Ok((1..pred.len())
        .map(|i| {
            let rp = pred[i].relative_to(&pred[0]).rot_world_to_cam;
            let rg = gt[i].relative_to(&gt[0]).rot_world_to_cam;
            rotation_geodesic_deg(&rp, &rg)
        })
        .collect())
}

pub fn rotation_geodesic_deg(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    rotation_angle(&(a * b.inverse())).to_degrees()
}

/// Rotation angle in radians with the acos argument clamped; nalgebra's
/// `angle()` returns NaN when rounding pushes the trace past 3.
pub fn rotation_angle(r: &Rotation3<f64>) -> f64 {
    ((r.matrix().trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Normalized mean per-joint position error: the prediction is scaled by
/// the optimal least-squares factor before averaging joint errors.
pub fn metric_nmpjpe(pred: &[WorldPoint], gt: &[WorldPoint]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(MetricError::MismatchedPoses(pred.len(), gt.len()));
    }
    let dot: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.coords.dot(&g.coords))
        .sum();
    let pp: f64 = pred.iter().map(|p| p.coords.norm_squared()).sum();
    let scale = if pp > 1e-300 { dot / pp } else { 1.0 };
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p.coords * scale - g.coords).norm())
        .sum();
    Ok(total / gt.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Point3;
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};

    fn random_rig(rng: &mut StdRng, n: usize) -> Vec<CameraExtrinsics> {
        (0..n)
            .map(|_| CameraExtrinsics {
                rot_world_to_cam: Rotation3::from_euler_angles(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                position: Point3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                ),
            })
            .collect()
    }

    #[test]
    fn zero_for_identical_inputs() {
        assert_eq!(metric_focal_pct(960.0, 960.0), 0.0);
        let n = Unit::new_normalize(Vector3::new(0.0, -1.0, -0.4));
        assert!(metric_normal_deg(&n, &n) < 1e-5);
        let mut rng = StdRng::seed_from_u64(2);
        let rig = random_rig(&mut rng, 3);
        for (d, m) in metric_relpose(&rig, &rig).unwrap() {
            assert!(d < 1e-9 && m < 1e-9);
        }
    }

    #[test]
    fn ten_percent_focal() {
        assert_relative_eq!(metric_focal_pct(1.1 * 960.0, 960.0), 10.0, epsilon = 1e-9);
    }

    #[test]
    fn relpose_invariant_to_global_rigid_transform() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..50 {
            let gt = random_rig(&mut rng, 4);
            let pred = random_rig(&mut rng, 4);
            let base = metric_relpose(&pred, &gt).unwrap();

            // Apply one global rigid motion to the whole predicted rig.
            let g_rot = Rotation3::from_euler_angles(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let g_t = Vector3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            );
            let moved: Vec<CameraExtrinsics> = pred
                .iter()
                .map(|c| CameraExtrinsics {
                    rot_world_to_cam: c.rot_world_to_cam * g_rot.inverse(),
                    position: g_rot * c.position + g_t,
                })
                .collect();
            let after = metric_relpose(&moved, &gt).unwrap();
            for ((d0, m0), (d1, m1)) in base.iter().zip(&after) {
                assert!((d0 - d1).abs() < 1e-9);
                assert!((m0 - m1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mismatched_rigs_error() {
        let mut rng = StdRng::seed_from_u64(4);
        let a = random_rig(&mut rng, 3);
        let b = random_rig(&mut rng, 2);
        assert!(matches!(
            metric_relpose(&a, &b),
            Err(MetricError::MismatchedRigs(3, 2))
        ));
    }

    #[test]
    fn nmpjpe_zero_for_equal_and_scale_invariant() {
        let mut rng = StdRng::seed_from_u64(5);
        let gt: Vec<WorldPoint> = (0..30)
            .map(|_| {
                Point3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(0.0..2.0),
                )
            })
            .collect();
        assert!(metric_nmpjpe(&gt, &gt).unwrap() < 1e-12);
        // A uniformly scaled prediction is normalized away.
        let scaled: Vec<WorldPoint> = gt.iter().map(|p| Point3::from(p.coords * 1.7)).collect();
        assert!(metric_nmpjpe(&scaled, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn x_pct_formula() {
        let gt = vec![Point3::new(0.0, 0.0, 4.0)];
        let pred = vec![Point3::new(0.0, 0.4, 4.0)];
        assert_relative_eq!(metric_x_pct(&pred, &gt).unwrap(), 10.0, epsilon = 1e-9);
    }
}
