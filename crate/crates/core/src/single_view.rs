//! Stage I: per-camera focal length, ground-plane normal, and ankle depths
//! from standing-person ankle/shoulder detections.
//!
//! Each standing person contributes one ankle/shoulder pixel pair. Assuming
//! a shared metric height `h` and that people stand perpendicular to the
//! ground, three pairs give a homogeneous 6x6 linear system whose null
//! space encodes `(f nx, f ny, nz, z1/h, z2/h, z3/h)` in principal-point
//! centered pixel coordinates. More pairs stack into an overdetermined
//! system with one depth unknown per pair. RANSAC over minimal triples
//! rejects outliers; the final model is refit on the full inlier set.

use nalgebra::{DMatrix, DVector, Unit, Vector3};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    intersect_ray_with_plane, plane_basis_from_normal, project, CameraIntrinsics, GroundPlaneFrame,
    ImagePoint,
};
use crate::pose::{CameraSequence, Joint, PoseDetection};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CalibError {
    #[error("pose is missing ankle/knee/hip/shoulder on both sides")]
    MissingJoints,
    #[error("need at least 3 standing ankle/shoulder pairs, found {0}")]
    InsufficientData(usize),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("focal-length square is not positive (outlier sample)")]
    NegativeFocalSquared,
    #[error("no RANSAC hypothesis reached 3 inliers")]
    CalibrationFailed,
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// Mean ankle and mean shoulder pixel positions of one standing pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnkleShoulderPair {
    pub ankle: ImagePoint,
    pub shoulder: ImagePoint,
    pub frame: i64,
    pub person_id: u32,
}

/// Result of the single-view stage.
#[derive(Debug, Clone)]
pub struct SingleViewSolution {
    pub intrinsics: CameraIntrinsics,
    /// Unit ground normal in camera coordinates, pointing from the ground
    /// toward the camera side.
    pub normal: Unit<Vector3<f64>>,
    /// Ankle depths (meters) for the inlier pairs, in `pairs` order.
    pub depths: Vec<f64>,
    pub plane: GroundPlaneFrame,
    /// Inlier flags aligned with `pairs`.
    pub inlier_mask: Vec<bool>,
    /// All standing pairs the solver scored.
    pub pairs: Vec<AnkleShoulderPair>,
}

impl SingleViewSolution {
    pub fn inlier_count(&self) -> usize {
        self.inlier_mask.iter().filter(|m| **m).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RansacConfig {
    /// Assumed ankle-to-shoulder height of the people, meters.
    pub person_height: f64,
    pub iterations: usize,
    /// Inlier angle threshold, radians.
    pub angle_thresh: f64,
    /// Inlier pixel threshold as a fraction of the person's pixel height.
    pub pixel_thresh: f64,
    /// Standing-pose deviation threshold, radians.
    pub standing_thresh: f64,
    /// Upper bound on the inlier pairs entering the final refit; the
    /// stacked system carries one depth column per pair, so its SVD cost
    /// grows cubically. Inlier lists above the cap are thinned evenly.
    pub max_refit_pairs: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            person_height: 1.7,
            iterations: 1000,
            angle_thresh: 2.86_f64.to_radians(),
            pixel_thresh: 0.05,
            standing_thresh: 0.6,
            max_refit_pairs: 512,
            seed: 0,
        }
    }
}

fn angle_between(a: nalgebra::Vector2<f64>, b: nalgebra::Vector2<f64>) -> Option<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na < 1e-12 || nb < 1e-12 {
        return None;
    }
    Some((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0).acos())
}

/// Total deviation of a body side chain from a straight line: the interior
/// articulation angles at the knee (between ankle-knee and hip-knee) and at
/// the hip (between knee-hip and shoulder-hip) each deviate from pi by zero
/// for a straight chain; their |deviation| sum is minimized over the left
/// and right side. Smaller is straighter.
pub fn standing_deviation(pose: &PoseDetection) -> Result<f64, CalibError> {
    let side = |ankle, knee, hip, shoulder| -> Option<f64> {
        let a = pose.point(ankle)?.coords();
        let k = pose.point(knee)?.coords();
        let h = pose.point(hip)?.coords();
        let s = pose.point(shoulder)?.coords();
        let d1 = angle_between(a - k, h - k)?;
        let d2 = angle_between(k - h, s - h)?;
        Some((d1 - std::f64::consts::PI).abs() + (d2 - std::f64::consts::PI).abs())
    };
    let left = side(
        Joint::LeftAnkle,
        Joint::LeftKnee,
        Joint::LeftHip,
        Joint::LeftShoulder,
    );
    let right = side(
        Joint::RightAnkle,
        Joint::RightKnee,
        Joint::RightHip,
        Joint::RightShoulder,
    );
    match (left, right) {
        (Some(l), Some(r)) => Ok(l.min(r)),
        (Some(l), None) => Ok(l),
        (None, Some(r)) => Ok(r),
        (None, None) => Err(CalibError::MissingJoints),
    }
}

/// True when the pose is standing straight up within `threshold` radians of
/// total limb-chain deviation.
pub fn filter_standing(pose: &PoseDetection, threshold: f64) -> Result<bool, CalibError> {
    Ok(standing_deviation(pose)? <= threshold)
}

/// Stack the homogeneous constraint rows for `pairs` in principal-point
/// centered coordinates and return the right-singular vector of the
/// smallest singular value: `(f nx, f ny, nz, z1/h, ..., zM/h)` up to scale.
pub fn solve_dlt(
    pairs: &[AnkleShoulderPair],
    principal: &ImagePoint,
) -> Result<DVector<f64>, CalibError> {
    let m = pairs.len();
    if m < 3 {
        return Err(CalibError::InsufficientData(m));
    }
    for i in 0..m {
        for j in (i + 1)..m {
            if pairs[i].ankle.distance(&pairs[j].ankle) < 1e-6 {
                return Err(CalibError::DegenerateConfiguration(
                    "coincident ankle detections",
                ));
            }
        }
    }

    let cols = 3 + m;
    let mut d = DMatrix::<f64>::zeros(2 * m, cols);
    for (i, pair) in pairs.iter().enumerate() {
        let us = pair.shoulder.x - principal.x;
        let vs = pair.shoulder.y - principal.y;
        let ua = pair.ankle.x - principal.x;
        let va = pair.ankle.y - principal.y;
        let (du, dv) = (us - ua, vs - va);
        let r = 2 * i;
        d[(r, 1)] = -1.0;
        d[(r, 2)] = vs;
        d[(r, 3 + i)] = dv;
        d[(r + 1, 0)] = 1.0;
        d[(r + 1, 2)] = -us;
        d[(r + 1, 3 + i)] = -du;
    }

    let svd = d.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or(CalibError::DegenerateConfiguration("svd failed"))?;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("singular values are finite"));
    let largest = sv[0];
    let second_smallest = sv[sv.len() - 2];
    if !(largest.is_finite() && largest > 0.0) || second_smallest < 1e-6 * largest {
        return Err(CalibError::DegenerateConfiguration("rank below 5"));
    }
    // Row of v_t matching the smallest singular value.
    let min_idx = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite"))
        .map(|(i, _)| i)
        .expect("non-empty");
    Ok(v_t.row(min_idx).transpose())
}

/// Recover focal length, unit normal, and metric ankle depths from a DLT
/// solution vector. The focal square comes from the constraint that the
/// normal is perpendicular to every ankle-to-ankle vector, solved in least
/// squares over all pairs; the scale is removed by normalizing the normal
/// block and the sign is fixed by requiring positive depths.
#[allow(clippy::type_complexity)]
pub fn extract_focal_and_normal(
    solution: &DVector<f64>,
    pairs: &[AnkleShoulderPair],
    principal: &ImagePoint,
    h: f64,
) -> Result<(f64, Unit<Vector3<f64>>, Vec<f64>), CalibError> {
    let m = pairs.len();
    assert_eq!(solution.len(), 3 + m, "solution length must match pairs");
    let q1 = solution[0];
    let q2 = solution[1];
    let q3 = solution[2];
    let w = |i: usize| solution[3 + i];

    let centered: Vec<(f64, f64)> = pairs
        .iter()
        .map(|p| (p.ankle.x - principal.x, p.ankle.y - principal.y))
        .collect();

    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let (ui, vi) = centered[i];
            let (uj, vj) = centered[j];
            let a = q1 * (ui * w(i) - uj * w(j)) + q2 * (vi * w(i) - vj * w(j));
            let b = q3 * (w(i) - w(j));
            num += a * b;
            den += b * b;
        }
    }
    let scale2 = solution.norm_squared();
    if den <= 1e-24 * scale2 * scale2 {
        return Err(CalibError::DegenerateConfiguration(
            "normal z-block or depth spread vanishes",
        ));
    }
    let f2 = -num / den;
    if !(f2.is_finite() && f2 > 0.0) {
        return Err(CalibError::NegativeFocalSquared);
    }
    let f = f2.sqrt();

    let n_scaled = Vector3::new(q1, q2, f * q3);
    let norm = n_scaled.norm();
    if norm < 1e-15 {
        return Err(CalibError::DegenerateConfiguration("normal block vanishes"));
    }
    let w_sum: f64 = (0..m).map(w).sum();
    let sign = if w_sum >= 0.0 { 1.0 } else { -1.0 };
    let lambda = sign * norm;
    let depths: Vec<f64> = (0..m).map(|i| w(i) * h * f / lambda).collect();
    if depths.iter().any(|z| !(z.is_finite() && *z > 0.0)) {
        return Err(CalibError::DegenerateConfiguration(
            "inconsistent ankle depth signs",
        ));
    }
    let normal = Unit::new_unchecked(n_scaled / lambda);

    // The camera must sit above the recovered plane.
    let mut height = 0.0;
    for (i, &(u, v)) in centered.iter().enumerate() {
        let ankle = Vector3::new(u / f, v / f, 1.0) * depths[i];
        height -= normal.dot(&ankle);
    }
    if height <= 0.0 {
        return Err(CalibError::DegenerateConfiguration("camera below plane"));
    }

    Ok((f, normal, depths))
}

/// Camera height above the plane implied by a recovered model, averaged
/// over the given depths.
pub fn mean_camera_height(
    pairs: &[AnkleShoulderPair],
    principal: &ImagePoint,
    f: f64,
    normal: &Unit<Vector3<f64>>,
    depths: &[f64],
) -> f64 {
    let mut acc = 0.0;
    for (pair, &z) in pairs.iter().zip(depths) {
        let dir = Vector3::new(
            (pair.ankle.x - principal.x) / f,
            (pair.ankle.y - principal.y) / f,
            1.0,
        );
        acc -= normal.dot(&(dir * z));
    }
    acc / depths.len() as f64
}

/// Shoulder-prediction inlier test: backproject the ankle onto the model
/// plane, raise it by `h` along the normal, reproject, and compare against
/// the detected shoulder with a relative pixel threshold and an angle
/// threshold on the ankle-to-shoulder image direction.
pub fn inlier_test(
    pair: &AnkleShoulderPair,
    intrinsics: &CameraIntrinsics,
    normal: &Unit<Vector3<f64>>,
    camera_height: f64,
    h: f64,
    angle_thresh: f64,
    pixel_thresh: f64,
) -> bool {
    inlier_residuals(pair, intrinsics, normal, camera_height, h)
        .map(|(pix, ang)| pix <= pixel_thresh && ang <= angle_thresh)
        .unwrap_or(false)
}

/// The (relative pixel error, angle error) residual pair, or `None` when
/// the backprojection fails or the pose has no pixel extent.
pub fn inlier_residuals(
    pair: &AnkleShoulderPair,
    intrinsics: &CameraIntrinsics,
    normal: &Unit<Vector3<f64>>,
    camera_height: f64,
    h: f64,
) -> Option<(f64, f64)> {
    let ankle_cam =
        intersect_ray_with_plane(&pair.ankle, intrinsics, normal, -camera_height).ok()?;
    let shoulder_cam = ankle_cam + normal.as_ref() * h;
    let predicted = project(&shoulder_cam, intrinsics).ok()?;

    let pixel_height = pair.ankle.distance(&pair.shoulder);
    if pixel_height < 1e-9 {
        return None;
    }
    let pixel_err = predicted.distance(&pair.shoulder) / pixel_height;
    let angle_err = angle_between(
        pair.shoulder.coords() - pair.ankle.coords(),
        predicted.coords() - pair.ankle.coords(),
    )?;
    Some((pixel_err, angle_err))
}

#[derive(Debug, Clone)]
struct Hypothesis {
    f: f64,
    normal: Unit<Vector3<f64>>,
    camera_height: f64,
    inliers: Vec<bool>,
    count: usize,
    mean_pixel_err: f64,
    index: usize,
}

fn score_model(
    pairs: &[AnkleShoulderPair],
    intrinsics: &CameraIntrinsics,
    normal: &Unit<Vector3<f64>>,
    camera_height: f64,
    cfg: &RansacConfig,
) -> (Vec<bool>, usize, f64) {
    let mut inliers = vec![false; pairs.len()];
    let mut count = 0;
    let mut err_sum = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        if let Some((pix, ang)) =
            inlier_residuals(pair, intrinsics, normal, camera_height, cfg.person_height)
        {
            if pix <= cfg.pixel_thresh && ang <= cfg.angle_thresh {
                inliers[i] = true;
                count += 1;
                err_sum += pix;
            }
        }
    }
    let mean = if count > 0 {
        err_sum / count as f64
    } else {
        f64::INFINITY
    };
    (inliers, count, mean)
}

#[allow(clippy::type_complexity)]
fn fit_pairs(
    pairs: &[AnkleShoulderPair],
    principal: &ImagePoint,
    h: f64,
) -> Result<(f64, Unit<Vector3<f64>>, Vec<f64>, f64), CalibError> {
    let sol = solve_dlt(pairs, principal)?;
    let (f, normal, depths) = extract_focal_and_normal(&sol, pairs, principal, h)?;
    let height = mean_camera_height(pairs, principal, f, &normal, &depths);
    Ok((f, normal, depths, height))
}

/// Collect the standing ankle/shoulder pairs of a sequence.
pub fn standing_pairs(seq: &CameraSequence, standing_thresh: f64) -> Vec<AnkleShoulderPair> {
    let mut pairs = Vec::new();
    for frame in &seq.frames {
        for pose in &frame.poses {
            if !pose.has_core_joints() {
                continue;
            }
            match filter_standing(pose, standing_thresh) {
                Ok(true) => {}
                _ => continue,
            }
            let (Some(ankle), Some(shoulder)) = (pose.ankle_center(), pose.shoulder_center())
            else {
                continue;
            };
            pairs.push(AnkleShoulderPair {
                ankle,
                shoulder,
                frame: frame.index,
                person_id: pose.person_id,
            });
        }
    }
    pairs
}

/// RANSAC over minimal triples followed by a least-squares refit on the
/// largest inlier set. Deterministic for a fixed seed; hypothesis scoring
/// runs in parallel with a fixed reduction order.
pub fn ransac_calibrate(
    seq: &CameraSequence,
    cfg: &RansacConfig,
) -> Result<SingleViewSolution, CalibError> {
    let pairs = standing_pairs(seq, cfg.standing_thresh);
    ransac_calibrate_pairs(&pairs, &seq.image_center(), cfg)
}

/// Same as [`ransac_calibrate`] for a pre-extracted pair list.
pub fn ransac_calibrate_pairs(
    pairs: &[AnkleShoulderPair],
    principal: &ImagePoint,
    cfg: &RansacConfig,
) -> Result<SingleViewSolution, CalibError> {
    if pairs.len() < 3 {
        return Err(CalibError::InsufficientData(pairs.len()));
    }

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let samples: Vec<[usize; 3]> = (0..cfg.iterations)
        .map(|_| sample_triple(&mut rng, pairs.len()))
        .collect();

    let best = samples
        .par_iter()
        .enumerate()
        .filter_map(|(index, triple)| {
            let sample = [pairs[triple[0]], pairs[triple[1]], pairs[triple[2]]];
            let (f, normal, _depths, height) =
                fit_pairs(&sample, principal, cfg.person_height).ok()?;
            let intrinsics = CameraIntrinsics::new(f, principal.x, principal.y).ok()?;
            let (inliers, count, mean_pixel_err) =
                score_model(pairs, &intrinsics, &normal, height, cfg);
            Some(Hypothesis {
                f,
                normal,
                camera_height: height,
                inliers,
                count,
                mean_pixel_err,
                index,
            })
        })
        .min_by(|a, b| {
            (b.count, a.mean_pixel_err, a.index)
                .partial_cmp(&(a.count, b.mean_pixel_err, b.index))
                .expect("scores are comparable")
        })
        .ok_or(CalibError::CalibrationFailed)?;

    if best.count < 3 {
        return Err(CalibError::CalibrationFailed);
    }

    // Refit on the full inlier set; keep the hypothesis if the refit loses
    // inliers under the same thresholds.
    let mut inlier_pairs: Vec<AnkleShoulderPair> = pairs
        .iter()
        .zip(&best.inliers)
        .filter(|(_, m)| **m)
        .map(|(p, _)| *p)
        .collect();
    if inlier_pairs.len() > cfg.max_refit_pairs.max(3) {
        let stride = inlier_pairs.len() as f64 / cfg.max_refit_pairs as f64;
        inlier_pairs = (0..cfg.max_refit_pairs)
            .map(|i| inlier_pairs[(i as f64 * stride) as usize])
            .collect();
    }
    let mut f = best.f;
    let mut normal = best.normal;
    let mut camera_height = best.camera_height;
    let mut inlier_mask = best.inliers.clone();
    if let Ok((rf, rnormal, _rdepths, rheight)) =
        fit_pairs(&inlier_pairs, principal, cfg.person_height)
    {
        if let Ok(rk) = CameraIntrinsics::new(rf, principal.x, principal.y) {
            let (mask, count, _) = score_model(pairs, &rk, &rnormal, rheight, cfg);
            if count >= best.count {
                f = rf;
                normal = rnormal;
                camera_height = rheight;
                inlier_mask = mask;
            }
        }
    }

    let intrinsics = CameraIntrinsics::new(f, principal.x, principal.y)
        .map_err(|_| CalibError::CalibrationFailed)?;
    let final_inliers: Vec<AnkleShoulderPair> = pairs
        .iter()
        .zip(&inlier_mask)
        .filter(|(_, m)| **m)
        .map(|(p, _)| *p)
        .collect();
    let depths: Vec<f64> = final_inliers
        .iter()
        .map(|pair| {
            intersect_ray_with_plane(&pair.ankle, &intrinsics, &normal, -camera_height)
                .map(|p| p.z)
                .unwrap_or(f64::NAN)
        })
        .collect();
    let plane = plane_basis_from_normal(&normal, &intrinsics, camera_height)?;

    Ok(SingleViewSolution {
        intrinsics,
        normal,
        depths,
        plane,
        inlier_mask,
        pairs: pairs.to_vec(),
    })
}

fn sample_triple(rng: &mut StdRng, n: usize) -> [usize; 3] {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n);
    while b == a {
        b = rng.random_range(0..n);
    }
    let mut c = rng.random_range(0..n);
    while c == a || c == b {
        c = rng.random_range(0..n);
    }
    [a, b, c]
}
