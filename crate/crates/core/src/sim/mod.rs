//! Synthetic scenes, noise injection, and the simulation trial protocol
//! used to verify the single-view solver; the oracle factory for the rest
//! of the test suite.

pub mod rig;
pub mod study;

use nalgebra::{Point3, Rotation3, Unit, Vector3};
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    backproject_to_depth, plane_basis_from_normal, CameraIntrinsics, GroundPlaneFrame, ImagePoint,
};
use crate::metrics::{metric_focal_pct, metric_normal_deg, metric_rho_pct, metric_x_pct};
use crate::single_view::{
    extract_focal_and_normal, mean_camera_height, solve_dlt, AnkleShoulderPair,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("could not place a person inside the view frustum after {0} attempts")]
    FrustumExhausted(usize),
    #[error("scene needs at least 3 people, got {0}")]
    TooFewPeople(usize),
}

/// Deterministic per-trial seed derivation (SplitMix64 over the master
/// seed and the trial index), so parallel trial order cannot change
/// results.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_people: usize,
    /// Mean ankle-to-shoulder height, meters.
    pub height_mean: f64,
    pub height_std: f64,
    /// Generator focal lengths, pixels. The solver model carries a single
    /// focal; generating with `fy != fx` produces scenes it cannot fit
    /// exactly, so the default keeps them equal and the error metrics
    /// compare against each axis separately.
    pub fx: f64,
    pub fy: f64,
    pub image_width: f64,
    pub image_height: f64,
    /// Camera height above the ground, meters (uniform range).
    pub cam_height: (f64, f64),
    /// Downward tilt, degrees (uniform range).
    pub tilt_deg: (f64, f64),
    /// Maximum roll magnitude, degrees.
    pub roll_max_deg: f64,
    /// People are placed in a square patch of this side length, meters,
    /// centered on the optical-axis ground intersection.
    pub patch: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_people: 3,
            height_mean: 1.7,
            height_std: 0.0,
            fx: 960.0,
            fy: 960.0,
            image_width: 1920.0,
            image_height: 1080.0,
            cam_height: (2.0, 8.0),
            tilt_deg: (5.0, 60.0),
            roll_max_deg: 15.0,
            patch: 14.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonGt {
    /// Ankle center in camera coordinates (on the plane).
    pub ankle: Point3<f64>,
    /// Shoulder center: `ankle + height * normal`.
    pub shoulder: Point3<f64>,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPair {
    pub ankle: ImagePoint,
    pub shoulder: ImagePoint,
}

/// A single-camera scene with full ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub fx: f64,
    pub fy: f64,
    pub principal: ImagePoint,
    pub normal: Unit<Vector3<f64>>,
    pub camera_height: f64,
    pub plane: GroundPlaneFrame,
    pub people: Vec<PersonGt>,
    pub projections: Vec<ProjectedPair>,
}

fn project_xy(p: &Point3<f64>, fx: f64, fy: f64, principal: &ImagePoint) -> ImagePoint {
    ImagePoint::new(fx * p.x / p.z + principal.x, fy * p.y / p.z + principal.y)
}

/// Generate a random ground plane and standing people fully inside the
/// view frustum. Deterministic per seed. Camera draws whose visible
/// ground region is too small to place everyone are rejected and the
/// scene is redrawn from a derived seed.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene, SimError> {
    const SCENE_ATTEMPTS: u64 = 50;
    let mut last = SimError::FrustumExhausted(0);
    for attempt in 0..SCENE_ATTEMPTS {
        match generate_scene_once(cfg, derive_seed(seed, 0xA11CE + attempt)) {
            Ok(scene) => return Ok(scene),
            Err(e @ SimError::FrustumExhausted(_)) => last = e,
            Err(other) => return Err(other),
        }
    }
    Err(last)
}

fn generate_scene_once(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene, SimError> {
    if cfg.n_people < 3 {
        return Err(SimError::TooFewPeople(cfg.n_people));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let principal = ImagePoint::new(cfg.image_width / 2.0, cfg.image_height / 2.0);

    let rho = rng.random_range(cfg.cam_height.0..cfg.cam_height.1);
    let tilt = rng
        .random_range(cfg.tilt_deg.0..cfg.tilt_deg.1)
        .to_radians();
    let roll = rng
        .random_range(-cfg.roll_max_deg..cfg.roll_max_deg)
        .to_radians();
    let normal = Unit::new_normalize(
        Rotation3::from_axis_angle(&Vector3::z_axis(), roll)
            * Vector3::new(0.0, -tilt.cos(), -tilt.sin()),
    );
    // The x-axis construction only needs the principal point and any
    // positive focal; use fx.
    let k_frame = CameraIntrinsics::new(cfg.fx, principal.x, principal.y)
        .expect("generator focal is positive");
    let plane = plane_basis_from_normal(&normal, &k_frame, rho)
        .expect("tilted-down camera always yields a valid plane frame");

    let height_dist =
        Normal::new(cfg.height_mean, cfg.height_std).expect("height std is non-negative");
    let half = cfg.patch / 2.0;
    let mut people = Vec::with_capacity(cfg.n_people);
    let mut projections = Vec::with_capacity(cfg.n_people);
    const MAX_ATTEMPTS: usize = 1000;
    for _ in 0..cfg.n_people {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let target = Point3::new(
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                0.0,
            );
            let ankle = plane.plane_to_cam(&target);
            let height = height_dist.sample(&mut rng).max(0.5);
            let shoulder = ankle + normal.as_ref() * height;
            if ankle.z < 1.0 || shoulder.z < 1.0 {
                continue;
            }
            let pa = project_xy(&ankle, cfg.fx, cfg.fy, &principal);
            let ps = project_xy(&shoulder, cfg.fx, cfg.fy, &principal);
            let inside = |p: &ImagePoint| {
                p.x >= 0.0 && p.x <= cfg.image_width && p.y >= 0.0 && p.y <= cfg.image_height
            };
            if !inside(&pa) || !inside(&ps) {
                continue;
            }
            people.push(PersonGt {
                ankle,
                shoulder,
                height,
            });
            projections.push(ProjectedPair {
                ankle: pa,
                shoulder: ps,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(SimError::FrustumExhausted(MAX_ATTEMPTS));
        }
    }

    Ok(SyntheticScene {
        fx: cfg.fx,
        fy: cfg.fy,
        principal,
        normal,
        camera_height: rho,
        plane,
        people,
        projections,
    })
}

/// Add zero-mean Gaussian pixel noise to detections; `std == 0` returns
/// the input bit-for-bit.
pub fn perturb_detections(pairs: &[ProjectedPair], std: f64, seed: u64) -> Vec<ProjectedPair> {
    if std == 0.0 {
        return pairs.to_vec();
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("std >= 0");
    pairs
        .iter()
        .map(|p| ProjectedPair {
            ankle: ImagePoint::new(
                p.ankle.x + dist.sample(&mut rng),
                p.ankle.y + dist.sample(&mut rng),
            ),
            shoulder: ImagePoint::new(
                p.shoulder.x + dist.sample(&mut rng),
                p.shoulder.y + dist.sample(&mut rng),
            ),
        })
        .collect()
}

/// Gaussian perturbation of a focal length, pixels; clamped positive.
pub fn perturb_focal(f: f64, std: f64, seed: u64) -> f64 {
    if std == 0.0 {
        return f;
    }
    let mut rng = StdRng::seed_from_u64(seed);
    (f + Normal::new(0.0, std).expect("std >= 0").sample(&mut rng)).max(1.0)
}

/// Per-component Gaussian perturbation of a unit normal, renormalized.
pub fn perturb_normal(n: &Unit<Vector3<f64>>, std: f64, seed: u64) -> Unit<Vector3<f64>> {
    if std == 0.0 {
        return *n;
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("std >= 0");
    Unit::new_normalize(Vector3::new(
        n.x + dist.sample(&mut rng),
        n.y + dist.sample(&mut rng),
        n.z + dist.sample(&mut rng),
    ))
}

/// Rotate by a random axis and a Gaussian angle (degrees std).
pub fn perturb_rotation(r: &Rotation3<f64>, std_deg: f64, seed: u64) -> Rotation3<f64> {
    if std_deg == 0.0 {
        return *r;
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let axis = loop {
        let v = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if v.norm() > 1e-3 {
            break Unit::new_normalize(v);
        }
    };
    let angle = Normal::new(0.0, std_deg.to_radians())
        .expect("std >= 0")
        .sample(&mut rng);
    Rotation3::from_axis_angle(&axis, angle) * r
}

/// Noise-injection target of the propagation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    Detections,
    Focal,
    Normal,
    Sync,
    Rotation,
}

impl std::str::FromStr for NoiseTarget {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "detections" => Ok(Self::Detections),
            "focal" => Ok(Self::Focal),
            "normal" => Ok(Self::Normal),
            "sync" => Ok(Self::Sync),
            "rotation" => Ok(Self::Rotation),
            other => Err(format!("unknown noise target '{other}'")),
        }
    }
}

/// Aggregated error metrics of one simulation grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    /// The varied quantity (noise std, height std, or people count).
    pub grid_value: f64,
    pub fx_pct: f64,
    pub fy_pct: f64,
    pub normal_deg: f64,
    pub rho_pct: f64,
    pub x_pct: f64,
    pub fail_pct: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialConfig {
    pub trials: usize,
    pub scene: SceneConfig,
    /// Height the solver assumes, meters.
    pub solve_height: f64,
    /// Pixel noise std added to every detection.
    pub detection_noise: f64,
    pub master_seed: u64,
}

struct TrialOutcome {
    fx_pct: f64,
    fy_pct: f64,
    normal_deg: f64,
    rho_pct: f64,
    x_pct: f64,
}

fn run_one_trial(cfg: &TrialConfig, seed: u64) -> Result<Option<TrialOutcome>, SimError> {
    let scene = generate_scene(&cfg.scene, seed)?;
    let noisy = perturb_detections(
        &scene.projections,
        cfg.detection_noise,
        derive_seed(seed, 1),
    );
    let pairs: Vec<AnkleShoulderPair> = noisy
        .iter()
        .enumerate()
        .map(|(i, p)| AnkleShoulderPair {
            ankle: p.ankle,
            shoulder: p.shoulder,
            frame: i as i64,
            person_id: i as u32,
        })
        .collect();

    let solved = solve_dlt(&pairs, &scene.principal)
        .and_then(|sol| extract_focal_and_normal(&sol, &pairs, &scene.principal, cfg.solve_height));
    let (f, normal, depths) = match solved {
        Ok(v) => v,
        Err(_) => return Ok(None),
    };
    if !f.is_finite() {
        return Ok(None);
    }

    let rho_pred = mean_camera_height(&pairs, &scene.principal, f, &normal, &depths);
    let k_pred = match CameraIntrinsics::new(f, scene.principal.x, scene.principal.y) {
        Ok(k) => k,
        Err(_) => return Ok(None),
    };
    let pred_points: Vec<Point3<f64>> = pairs
        .iter()
        .zip(&depths)
        .map(|(pair, &z)| backproject_to_depth(&pair.ankle, &k_pred, z).expect("z > 0"))
        .collect();
    let gt_points: Vec<Point3<f64>> = scene.people.iter().map(|p| p.ankle).collect();

    Ok(Some(TrialOutcome {
        fx_pct: metric_focal_pct(f, scene.fx),
        fy_pct: metric_focal_pct(f, scene.fy),
        normal_deg: metric_normal_deg(&normal, &scene.normal),
        rho_pct: metric_rho_pct(rho_pred, scene.camera_height),
        x_pct: metric_x_pct(&pred_points, &gt_points).expect("same point count"),
    }))
}

/// Run `cfg.trials` independent scenes and aggregate the five metrics;
/// failed (unsolvable) trials count toward `fail_pct` and are excluded
/// from the error means.
pub fn run_trials(cfg: &TrialConfig, grid_value: f64) -> Result<TrialReport, SimError> {
    let outcomes: Vec<Result<Option<TrialOutcome>, SimError>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_one_trial(cfg, derive_seed(cfg.master_seed, t as u64)))
        .collect();

    let mut ok = Vec::new();
    let mut failures = 0usize;
    for o in outcomes {
        match o? {
            Some(v) => ok.push(v),
            None => failures += 1,
        }
    }
    let n = ok.len().max(1) as f64;
    Ok(TrialReport {
        grid_value,
        fx_pct: ok.iter().map(|o| o.fx_pct).sum::<f64>() / n,
        fy_pct: ok.iter().map(|o| o.fy_pct).sum::<f64>() / n,
        normal_deg: ok.iter().map(|o| o.normal_deg).sum::<f64>() / n,
        rho_pct: ok.iter().map(|o| o.rho_pct).sum::<f64>() / n,
        x_pct: ok.iter().map(|o| o.x_pct).sum::<f64>() / n,
        fail_pct: 100.0 * failures as f64 / cfg.trials as f64,
        trials: cfg.trials,
    })
}

/// Measurement-noise protocol: 3 people of an exact 1.6 m height, noise
/// std varied over the grid.
pub fn run_measurement_noise_trials(
    stds: &[f64],
    trials: usize,
    master_seed: u64,
) -> Result<Vec<TrialReport>, SimError> {
    stds.iter()
        .enumerate()
        .map(|(i, &std)| {
            let cfg = TrialConfig {
                trials,
                scene: SceneConfig {
                    n_people: 3,
                    height_mean: 1.6,
                    height_std: 0.0,
                    ..SceneConfig::default()
                },
                solve_height: 1.6,
                detection_noise: std,
                master_seed: derive_seed(master_seed, 1000 + i as u64),
            };
            run_trials(&cfg, std)
        })
        .collect()
}

/// Height-variation protocol: detection noise 0.5 px, heights drawn from
/// a Gaussian centered at 1.7 m with the grid std, solved at 1.7 m.
pub fn run_height_trials(
    height_stds: &[f64],
    trials: usize,
    master_seed: u64,
) -> Result<Vec<TrialReport>, SimError> {
    height_stds
        .iter()
        .enumerate()
        .map(|(i, &std)| {
            let cfg = TrialConfig {
                trials,
                scene: SceneConfig {
                    n_people: 3,
                    height_mean: 1.7,
                    height_std: std,
                    ..SceneConfig::default()
                },
                solve_height: 1.7,
                detection_noise: 0.5,
                master_seed: derive_seed(master_seed, 2000 + i as u64),
            };
            run_trials(&cfg, std)
        })
        .collect()
}

/// People-count protocol: detection noise 0.5 px, heights N(1.7, 0.1),
/// the person count varied over the grid.
pub fn run_people_trials(
    counts: &[usize],
    trials: usize,
    master_seed: u64,
) -> Result<Vec<TrialReport>, SimError> {
    counts
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let cfg = TrialConfig {
                trials,
                scene: SceneConfig {
                    n_people: count,
                    height_mean: 1.7,
                    height_std: 0.1,
                    ..SceneConfig::default()
                },
                solve_height: 1.7,
                detection_noise: 0.5,
                master_seed: derive_seed(master_seed, 3000 + i as u64),
            };
            run_trials(&cfg, count as f64)
        })
        .collect()
}

/// One CSV row per grid point: `grid,fx_pct,fy_pct,normal_deg,rho_pct,x_pct,fail_pct,trials`.
pub fn write_trial_reports<W: std::io::Write>(
    reports: &[TrialReport],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(
        out,
        "grid,fx_pct,fy_pct,normal_deg,rho_pct,x_pct,fail_pct,trials"
    )?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.grid_value,
            r.fx_pct,
            r.fy_pct,
            r.normal_deg,
            r.rho_pct,
            r.x_pct,
            r.fail_pct,
            r.trials
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;

    #[test]
    fn scenes_are_deterministic_per_seed() {
        let cfg = SceneConfig::default();
        let a = generate_scene(&cfg, 7).unwrap();
        let b = generate_scene(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stored_projections_match_reprojection() {
        let cfg = SceneConfig::default(); // fx == fy
        let scene = generate_scene(&cfg, 3).unwrap();
        let k = CameraIntrinsics::new(scene.fx, scene.principal.x, scene.principal.y).unwrap();
        for (person, proj) in scene.people.iter().zip(&scene.projections) {
            let pa = project(&person.ankle, &k).unwrap();
            let ps = project(&person.shoulder, &k).unwrap();
            assert_eq!((pa.x, pa.y), (proj.ankle.x, proj.ankle.y));
            assert_eq!((ps.x, ps.y), (proj.shoulder.x, proj.shoulder.y));
        }
    }

    #[test]
    fn zero_height_std_gives_equal_heights() {
        let cfg = SceneConfig {
            n_people: 6,
            height_mean: 1.6,
            height_std: 0.0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&cfg, 11).unwrap();
        assert!(scene.people.iter().all(|p| p.height == 1.6));
    }

    #[test]
    fn ankles_lie_on_the_plane() {
        let scene = generate_scene(&SceneConfig::default(), 4).unwrap();
        for p in &scene.people {
            let plane_coord = scene.plane.cam_to_plane(&p.ankle);
            assert!(plane_coord.z.abs() < 1e-12);
            let d = (p.shoulder - p.ankle).norm();
            assert!((d - p.height).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_noise_returns_inputs_unchanged() {
        let scene = generate_scene(&SceneConfig::default(), 5).unwrap();
        let same = perturb_detections(&scene.projections, 0.0, 99);
        assert_eq!(scene.projections, same);
        let n = perturb_normal(&scene.normal, 0.0, 99);
        assert_eq!(scene.normal, n);
        assert_eq!(perturb_focal(960.0, 0.0, 99), 960.0);
    }

    #[test]
    fn perturbed_normal_stays_unit() {
        let scene = generate_scene(&SceneConfig::default(), 6).unwrap();
        for s in 0..50 {
            let n = perturb_normal(&scene.normal, 0.3, s);
            assert!((n.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detection_noise_variance_matches_magnitude() {
        let scene = generate_scene(&SceneConfig::default(), 9).unwrap();
        let std = 3.0;
        let mut samples = Vec::new();
        let mut seed = 0;
        while samples.len() < 100_000 {
            let noisy = perturb_detections(&scene.projections, std, seed);
            for (a, b) in noisy.iter().zip(&scene.projections) {
                samples.push(a.ankle.x - b.ankle.x);
                samples.push(a.ankle.y - b.ankle.y);
                samples.push(a.shoulder.x - b.shoulder.x);
                samples.push(a.shoulder.y - b.shoulder.y);
            }
            seed += 1;
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var =
            samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        assert!(
            (var - std * std).abs() < 0.05 * std * std,
            "sample variance {var} expected {}",
            std * std
        );
    }

    #[test]
    fn zero_noise_trials_are_exact() {
        let cfg = TrialConfig {
            trials: 100,
            scene: SceneConfig {
                height_mean: 1.6,
                ..SceneConfig::default()
            },
            solve_height: 1.6,
            detection_noise: 0.0,
            master_seed: 123,
        };
        let report = run_trials(&cfg, 0.0).unwrap();
        assert_eq!(report.fail_pct, 0.0);
        assert!(report.fx_pct < 1e-6, "fx% {}", report.fx_pct);
        assert!(report.normal_deg < 1e-6);
        assert!(report.rho_pct < 1e-6);
        assert!(report.x_pct < 1e-6);
    }

    #[test]
    fn trial_reports_are_deterministic() {
        let cfg = TrialConfig {
            trials: 200,
            scene: SceneConfig::default(),
            solve_height: 1.7,
            detection_noise: 1.0,
            master_seed: 5,
        };
        let a = run_trials(&cfg, 1.0).unwrap();
        let b = run_trials(&cfg, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_report_shape() {
        let reports = vec![TrialReport {
            grid_value: 0.1,
            fx_pct: 1.0,
            fy_pct: 2.0,
            normal_deg: 0.5,
            rho_pct: 1.5,
            x_pct: 1.1,
            fail_pct: 0.0,
            trials: 10,
        }];
        let mut buf = Vec::new();
        write_trial_reports(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("grid,"));
        assert!(lines[1].starts_with("0.1,1,2,"));
    }
}
