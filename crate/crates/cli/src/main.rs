//! Command-line interface for the multi-camera calibration toolkit.
//!
//! Exit codes: 0 success, 2 input error, 3 calibration failure,
//! 4 internal invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rigcal::io;
use rigcal::pipeline::{run_pipeline, PipelineConfig, PipelineError};
use rigcal::sim::rig::RigConfig;
use rigcal::sim::study::{run_noise_study, write_noise_study};
use rigcal::sim::{
    run_height_trials, run_measurement_noise_trials, run_people_trials, write_trial_reports,
    NoiseTarget,
};
use rigcal::single_view::{ransac_calibrate, RansacConfig};

const EXIT_INPUT: u8 = 2;
const EXIT_CALIBRATION: u8 = 3;
const EXIT_INTERNAL: u8 = 4;

#[derive(Parser)]
#[command(
    name = "rigcal",
    version,
    about = "Calibrate and synchronize sparse multi-camera rigs from 2D human keypoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full five-stage cascade over detection files.
    Calibrate(CalibrateArgs),
    /// Stage I only: focal length and ground plane for one camera.
    SingleView(SingleViewArgs),
    /// Stages I-II: time offset between a reference and a sync camera.
    Sync(SyncArgs),
    /// Synthetic simulation studies of the single-view solver.
    Simulate(SimulateArgs),
    /// Stage-to-stage noise propagation on a synthetic rig.
    NoiseStudy(NoiseStudyArgs),
    /// Convert a COCO 17-keypoint dump into a detection file.
    ConvertCoco(ConvertCocoArgs),
}

#[derive(Args, Clone)]
struct CommonCalib {
    /// Assumed ankle-to-shoulder person height, meters.
    #[arg(long)]
    height: Option<f64>,
    /// RANSAC iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Inlier angle threshold, degrees.
    #[arg(long)]
    angle_thresh_deg: Option<f64>,
    /// Inlier pixel threshold, fraction of the person's pixel height.
    #[arg(long)]
    pixel_thresh: Option<f64>,
    /// Standing-pose deviation threshold, radians.
    #[arg(long)]
    standing_thresh: Option<f64>,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl CommonCalib {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(h) = self.height {
            cfg.ransac.person_height = h;
        }
        if let Some(i) = self.iterations {
            cfg.ransac.iterations = i;
        }
        if let Some(a) = self.angle_thresh_deg {
            cfg.ransac.angle_thresh = a.to_radians();
        }
        if let Some(p) = self.pixel_thresh {
            cfg.ransac.pixel_thresh = p;
        }
        if let Some(s) = self.standing_thresh {
            cfg.ransac.standing_thresh = s;
        }
        cfg.seed = self.seed;
    }
}

#[derive(Args)]
struct CalibrateArgs {
    /// Detection files, one per camera.
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Output solution file.
    #[arg(long, default_value = "solution.json")]
    out: PathBuf,
    /// Directory for diagnostic CSV curves.
    #[arg(long)]
    curves_dir: Option<PathBuf>,
    /// JSON config file; its fields override flags, flags override defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reference camera id (lowest id when omitted).
    #[arg(long)]
    reference: Option<String>,
    /// Skip the final joint refinement stage.
    #[arg(long)]
    skip_bundle: bool,
    /// Rotation search step, degrees.
    #[arg(long)]
    rotation_step_deg: Option<f64>,
    #[command(flatten)]
    common: CommonCalib,
}

#[derive(Args)]
struct SingleViewArgs {
    file: PathBuf,
    #[command(flatten)]
    common: CommonCalib,
}

#[derive(Args)]
struct SyncArgs {
    reference: PathBuf,
    sync: PathBuf,
    /// Write the per-offset cost curve to this CSV path.
    #[arg(long)]
    curve: Option<PathBuf>,
    #[command(flatten)]
    common: CommonCalib,
}

#[derive(Args)]
struct SimulateArgs {
    /// Which protocol to run.
    #[arg(long, value_parser = ["measurement-noise", "height", "people"])]
    study: String,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct NoiseStudyArgs {
    /// detections | focal | normal | sync | rotation
    #[arg(long)]
    target: String,
    #[arg(long, default_value = "noise_study.csv")]
    out: PathBuf,
    /// Runs per magnitude (median reported).
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConvertCocoArgs {
    input: PathBuf,
    #[arg(long)]
    camera_id: String,
    #[arg(long)]
    width: f64,
    #[arg(long)]
    height: f64,
    #[arg(long, default_value_t = 30.0)]
    frame_rate: f64,
    #[arg(long, default_value = "detections.json")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(args) => calibrate(args),
        Command::SingleView(args) => single_view(args),
        Command::Sync(args) => sync(args),
        Command::Simulate(args) => simulate(args),
        Command::NoiseStudy(args) => noise_study(args),
        Command::ConvertCoco(args) => convert_coco(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(code) => ExitCode::from(code),
    }
}

fn fail(code: u8, message: impl std::fmt::Display) -> u8 {
    eprintln!("error: {message}");
    code
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<rigcal::pose::CameraSequence>, u8> {
    paths
        .iter()
        .map(|p| {
            io::load_detections(p).map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", p.display())))
        })
        .collect()
}

/// Defaults, then flags, then config-file fields (the file wins, per the
/// documented precedence).
fn effective_config(args: &CalibrateArgs) -> Result<PipelineConfig, u8> {
    let mut cfg = PipelineConfig::default();
    args.common.apply(&mut cfg);
    if let Some(step) = args.rotation_step_deg {
        cfg.rotation_step_deg = step;
    }
    cfg.reference = args.reference.clone();
    cfg.skip_bundle = args.skip_bundle;

    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", path.display())))?;
        let overrides: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", path.display())))?;
        let mut base = serde_json::to_value(&cfg).expect("config serializes");
        merge(&mut base, overrides);
        cfg = serde_json::from_value(base).map_err(|e| {
            fail(
                EXIT_INPUT,
                format!("{}: invalid config: {e}", path.display()),
            )
        })?;
    }
    Ok(cfg)
}

fn merge(base: &mut serde_json::Value, overrides: serde_json::Value) {
    match (base, overrides) {
        (serde_json::Value::Object(base_map), serde_json::Value::Object(over_map)) => {
            for (k, v) in over_map {
                match base_map.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        base_map.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn map_pipeline_err(e: PipelineError) -> u8 {
    match e {
        PipelineError::NeedTwoCameras(_)
        | PipelineError::DuplicateCameraId(_)
        | PipelineError::ReferenceNotFound(_) => fail(EXIT_INPUT, e),
        PipelineError::Stage { .. } => fail(EXIT_CALIBRATION, e),
    }
}

fn calibrate(args: CalibrateArgs) -> Result<(), u8> {
    let sequences = load_all(&args.files)?;
    let cfg = effective_config(&args)?;
    if sequences.len() == 2 && !cfg.skip_bundle {
        eprintln!(
            "warning: two views give the joint refinement weak constraints; \
             consider --skip-bundle"
        );
    }
    let solution = run_pipeline(&sequences, &cfg).map_err(map_pipeline_err)?;

    // Invariant check before writing: rotations must still be orthonormal.
    for cam in &solution.cameras {
        if rigcal::geometry::orthonormality_residual(&cam.extrinsics.rot_world_to_cam) > 1e-6 {
            return Err(fail(
                EXIT_INTERNAL,
                format!("camera '{}' rotation lost orthonormality", cam.camera_id),
            ));
        }
    }

    io::write_solution(&solution, &args.out)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", args.out.display())))?;
    if let Some(dir) = &args.curves_dir {
        io::write_curves(&solution, dir)
            .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", dir.display())))?;
    }
    for cam in &solution.cameras {
        println!(
            "{}: f={:.2}px delta_t={} inliers={}/{}",
            cam.camera_id, cam.intrinsics.f, cam.delta_t, cam.inliers, cam.pairs
        );
    }
    println!("solution written to {}", args.out.display());
    Ok(())
}

fn ransac_from(common: &CommonCalib) -> RansacConfig {
    let mut cfg = PipelineConfig::default();
    common.apply(&mut cfg);
    RansacConfig {
        seed: common.seed,
        ..cfg.ransac
    }
}

fn single_view(args: SingleViewArgs) -> Result<(), u8> {
    let seq = io::load_detections(&args.file)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", args.file.display())))?;
    let solution = ransac_calibrate(&seq, &ransac_from(&args.common))
        .map_err(|e| fail(EXIT_CALIBRATION, e))?;
    let n = solution.normal;
    println!("camera: {}", seq.camera_id);
    println!("focal: {:.4} px", solution.intrinsics.f);
    println!("normal: [{:.6}, {:.6}, {:.6}]", n.x, n.y, n.z);
    println!("camera height: {:.4} m", solution.plane.camera_height());
    println!(
        "inliers: {}/{}",
        solution.inlier_count(),
        solution.pairs.len()
    );
    Ok(())
}

fn sync(args: SyncArgs) -> Result<(), u8> {
    let ref_seq = io::load_detections(&args.reference)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", args.reference.display())))?;
    let sync_seq = io::load_detections(&args.sync)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", args.sync.display())))?;
    let mut cfg = PipelineConfig::default();
    args.common.apply(&mut cfg);

    let solve = |seq: &rigcal::pose::CameraSequence| {
        let ransac = RansacConfig {
            seed: cfg.seed,
            ..cfg.ransac.clone()
        };
        ransac_calibrate(seq, &ransac)
            .map_err(|e| fail(EXIT_CALIBRATION, format!("camera '{}': {e}", seq.camera_id)))
    };
    let ref_view = solve(&ref_seq)?;
    let sync_view = solve(&sync_seq)?;
    let track = |seq, view: &rigcal::single_view::SingleViewSolution| {
        let (raw, _) = rigcal::pipeline::plane_points(seq, &view.intrinsics, &view.plane);
        raw.dbscan_filtered(cfg.dbscan_eps, cfg.dbscan_min_pts)
            .map_err(|e| fail(EXIT_CALIBRATION, e))
    };
    let ref_track = track(&ref_seq, &ref_view)?;
    let sync_track = track(&sync_seq, &sync_view)?;
    let ref_sig =
        rigcal::sync::center_distance_signal(&ref_track).map_err(|e| fail(EXIT_CALIBRATION, e))?;
    let sync_sig =
        rigcal::sync::center_distance_signal(&sync_track).map_err(|e| fail(EXIT_CALIBRATION, e))?;
    let result = rigcal::sync::search_time_offset_bidirectional(
        &ref_sig,
        &sync_sig,
        cfg.max_offset,
        cfg.frame_cost,
    )
    .map_err(|e| fail(EXIT_CALIBRATION, e))?;
    println!(
        "delta_t = {} frames (t_ref = t_sync + delta_t), cost {:.6}",
        result.delta_t, result.score
    );
    if let Some(path) = &args.curve {
        let mut out = String::from("offset,cost\n");
        for (offset, cost) in &result.per_offset_costs {
            out.push_str(&format!("{offset},{cost}\n"));
        }
        std::fs::write(path, out)
            .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), u8> {
    let reports = match args.study.as_str() {
        "measurement-noise" => {
            run_measurement_noise_trials(&[0.1, 0.2, 0.5, 1.0, 2.0, 5.0], args.trials, args.seed)
        }
        "height" => run_height_trials(&[0.05, 0.1, 0.15, 0.2, 0.25], args.trials, args.seed),
        "people" => run_people_trials(&[5, 10, 20, 50, 100], args.trials, args.seed),
        other => return Err(fail(EXIT_INPUT, format!("unknown study '{other}'"))),
    }
    .map_err(|e| fail(EXIT_CALIBRATION, e))?;
    let file = std::fs::File::create(&args.out)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", args.out.display())))?;
    write_trial_reports(&reports, file)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", args.out.display())))?;
    for r in &reports {
        println!(
            "grid {:>6}: fx% {:.2} fy% {:.2} N° {:.2} rho% {:.2} X% {:.2} fail% {:.2}",
            r.grid_value, r.fx_pct, r.fy_pct, r.normal_deg, r.rho_pct, r.x_pct, r.fail_pct
        );
    }
    println!("report written to {}", args.out.display());
    Ok(())
}

fn noise_study(args: NoiseStudyArgs) -> Result<(), u8> {
    let target: NoiseTarget = args
        .target
        .parse()
        .map_err(|e: String| fail(EXIT_INPUT, e))?;
    let magnitudes: Vec<f64> = match target {
        NoiseTarget::Detections => vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0],
        NoiseTarget::Focal => vec![0.0, 40.0, 80.0, 120.0, 160.0, 200.0],
        NoiseTarget::Normal => vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        NoiseTarget::Sync => vec![-100.0, -50.0, -25.0, 0.0, 25.0, 50.0, 100.0],
        NoiseTarget::Rotation => vec![0.0, 5.0, 10.0, 15.0, 20.0],
    };
    let rig = RigConfig {
        n_frames: 200,
        offsets: vec![0, 9],
        offset_mode: rigcal::sim::rig::OffsetMode::Clock,
        ..RigConfig::default()
    };
    let rows = run_noise_study(&rig, target, &magnitudes, args.runs, args.seed);
    let mut buf = Vec::new();
    write_noise_study(&rows, &mut buf).expect("vec write");
    std::fs::write(&args.out, &buf)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", args.out.display())))?;
    for r in &rows {
        println!(
            "magnitude {:>7}: sync {:.1} search ({:.2} deg, {:.3} m) icp ({:.2} deg, {:.3} m)",
            r.magnitude, r.sync_err, r.search_deg, r.search_m, r.icp_deg, r.icp_m
        );
    }
    println!("study written to {}", args.out.display());
    Ok(())
}

fn convert_coco(args: ConvertCocoArgs) -> Result<(), u8> {
    let text = std::fs::read_to_string(&args.input)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", args.input.display())))?;
    let records: Vec<io::CocoRecord> = serde_json::from_str(&text)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", args.input.display())))?;
    let seq = io::convert_coco(
        &records,
        &args.camera_id,
        args.width,
        args.height,
        args.frame_rate,
    )
    .map_err(|e| fail(EXIT_INPUT, e))?;
    io::save_detections(&seq, &args.out)
        .map_err(|e| fail(EXIT_INPUT, format!("{}: {e}", args.out.display())))?;
    println!(
        "wrote {} frames to {}",
        seq.frames.len(),
        args.out.display()
    );
    Ok(())
}
