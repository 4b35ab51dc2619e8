//! `gaitkit`: synthesize pose data, analyze and refine it, and run latency
//! scenarios.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 schema or
//! reference error, 4 numeric failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::{env, fs};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use gaitkit::gait::{
    classify_trial, compute_metrics, ClassifierWeights, GaitError, GaitMetrics, TrialResult,
    WindowSpec,
};
use gaitkit::latency::{
    bundled, pipeline_time, Golden, GoldenCell, LatencyError, LatencyReport, NetworkLink,
    Placement, ProfileBook, Scenario,
};
use gaitkit::pose_io::{decode, encode, size_reduction, PoseIoError, VideoProfile, MAGIC};
use gaitkit::refine::{mean_joint_error, refine_sequence, trace_csv, RefineConfig, RefineError};
use gaitkit::synth::{
    add_noise, generate_with, project_sequence, CameraRig, GaitParams, GroundTruth,
};
use gaitkit::{CameraModel, Dims, PoseSequence};

const PROFILE_DIR_VAR: &str = "AIGAITOR_PROFILE_DIR";

#[derive(Parser)]
#[command(name = "gaitkit", version, about = "Markerless gait-analysis toolkit")]
struct Cli {
    /// Seed for all random draws; overrides `noise_seed` in synth parameters.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic walking clip with ground truth.
    Synth(SynthArgs),
    /// Classify a pose file and compute gait metrics.
    Analyze(AnalyzeArgs),
    /// Refine a 3D trajectory against 2D observations.
    Refine(RefineArgs),
    /// Compose pipeline latencies from stage profiles.
    Simulate(SimulateArgs),
    /// Convert between .aigk and JSON.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Gait parameters as JSON; missing fields take defaults.
    #[arg(long)]
    params: Option<PathBuf>,
    /// 3D pose file to write. Siblings get `.2d.aigk`, `.truth.json` (or
    /// `.truth.csv`), `.camera.json` and, with noise, `.clean.aigk`.
    #[arg(long)]
    out: PathBuf,
    /// Gaussian noise on the 3D output, meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
}

#[derive(Args)]
struct AnalyzeArgs {
    pose: PathBuf,
    /// Classifier weights JSON; defaults to the bundled weights for the
    /// file's dimensionality.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 90)]
    window: usize,
    #[arg(long, default_value_t = 60)]
    stride: usize,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    pose3d: PathBuf,
    #[arg(long)]
    pose2d: PathBuf,
    #[arg(long)]
    camera: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Objective trace CSV; defaults to a `.trace.csv` sibling of `--out`.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Ground-truth 3D file for reporting joint error before and after.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON; repeatable. Defaults to the bundled scenarios.
    #[arg(long)]
    spec: Vec<PathBuf>,
    /// Profile book JSON. Defaults to `$AIGAITOR_PROFILE_DIR/profiles.json`,
    /// then to the bundled profiles.
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Check against a golden table (bundled if no path is given).
    #[arg(long, num_args = 0..=1)]
    golden: Option<Option<PathBuf>>,
    /// Cloud bandwidth sweep `MIN:MAX:POINTS` in Mbps, log-spaced; writes CSV.
    #[arg(long, value_parser = parse_sweep)]
    sweep: Option<Sweep>,
}

#[derive(Args)]
struct ConvertArgs {
    input: PathBuf,
    output: PathBuf,
    /// Also write a two-column size comparison against the source video.
    #[arg(long)]
    size_csv: Option<PathBuf>,
}

#[derive(Clone, Copy)]
struct Sweep {
    min_mbps: f64,
    max_mbps: f64,
    points: usize,
}

fn parse_sweep(s: &str) -> Result<Sweep, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("expected MIN:MAX:POINTS, got {s:?}");
    let [min, max, points] = parts.as_slice() else {
        return Err(bad());
    };
    let sweep = Sweep {
        min_mbps: min.parse().map_err(|_| bad())?,
        max_mbps: max.parse().map_err(|_| bad())?,
        points: points.parse().map_err(|_| bad())?,
    };
    if !(sweep.min_mbps > 0.0 && sweep.max_mbps > sweep.min_mbps && sweep.points >= 2) {
        return Err(format!(
            "sweep needs 0 < MIN < MAX and POINTS >= 2, got {s:?}"
        ));
    }
    Ok(sweep)
}

#[derive(Debug)]
enum Failure {
    Input(String),
    Schema(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Schema(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Input(m) | Failure::Schema(m) | Failure::Numeric(m) => m,
        }
    }
}

type Outcome<T> = Result<T, Failure>;

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Outcome<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Outcome<()> {
    fs::write(path, bytes).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

/// Writes to `out`, or to stdout when no path is given.
fn emit(out: Option<&Path>, text: &str) -> Outcome<()> {
    match out {
        Some(p) => write_bytes(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// `dir/name.aigk` + `.2d.aigk` -> `dir/name.2d.aigk`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.with_extension("").into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn pose_error(path: &Path, e: PoseIoError) -> Failure {
    Failure::Schema(format!("{}: {e}", path.display()))
}

fn read_pose(path: &Path) -> Outcome<PoseSequence> {
    let bytes = fs::read(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| pose_error(path, e))
}

fn write_pose(path: &Path, seq: &PoseSequence) -> Outcome<()> {
    let bytes = encode(seq).map_err(|e| pose_error(path, e))?;
    write_bytes(path, &bytes)
}

fn truth_csv(truth: &GroundTruth) -> String {
    let mut out = String::from("side,time_s\n");
    for (t, side) in truth.all_strikes() {
        let _ = writeln!(out, "{},{t}", format!("{side:?}").to_lowercase());
    }
    out
}

fn cmd_synth(args: &SynthArgs, seed: Option<u64>, format: Format) -> Outcome<()> {
    let params: GaitParams = match &args.params {
        Some(p) => parse_json(p)?,
        None => GaitParams::default(),
    };
    let rig = CameraRig::default();
    let (clean, truth) = generate_with(&params, &rig).map_err(|e| Failure::Input(e.to_string()))?;
    let observed =
        project_sequence(&clean, &rig.intrinsics).map_err(|e| Failure::Numeric(e.to_string()))?;
    let seed = seed.unwrap_or(params.noise_seed);
    let pose3d = add_noise(&clean, args.noise, seed).map_err(|e| Failure::Input(e.to_string()))?;

    let mut written = vec![args.out.clone()];
    write_pose(&args.out, &pose3d)?;
    let path2d = sibling(&args.out, ".2d.aigk");
    write_pose(&path2d, &observed)?;
    written.push(path2d);
    if args.noise > 0.0 {
        let p = sibling(&args.out, ".clean.aigk");
        write_pose(&p, &clean)?;
        written.push(p);
    }
    let truth_path = match format {
        Format::Json => {
            let p = sibling(&args.out, ".truth.json");
            write_bytes(&p, to_json(&truth).as_bytes())?;
            p
        }
        Format::Csv => {
            let p = sibling(&args.out, ".truth.csv");
            write_bytes(&p, truth_csv(&truth).as_bytes())?;
            p
        }
    };
    written.push(truth_path);
    let camera_path = sibling(&args.out, ".camera.json");
    write_bytes(&camera_path, to_json(&rig.intrinsics).as_bytes())?;
    written.push(camera_path);

    #[derive(Serialize)]
    struct Summary {
        frames: usize,
        fps: f64,
        noise_sigma_m: f64,
        seed: u64,
        files: Vec<String>,
    }
    print!(
        "{}",
        to_json(&Summary {
            frames: clean.len(),
            fps: clean.fps,
            noise_sigma_m: args.noise,
            seed,
            files: written.iter().map(|p| p.display().to_string()).collect(),
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct AnalysisReport {
    frames: usize,
    fps: f64,
    dims: Dims,
    window_spec: WindowSpec,
    n_windows: usize,
    class_names: Vec<String>,
    trial: Option<TrialResult>,
    trial_class_name: Option<String>,
    metrics: Option<GaitMetrics>,
    metrics_error: Option<String>,
}

fn gait_failure(e: GaitError) -> Failure {
    match e {
        GaitError::MissingJoint { .. } | GaitError::Config(_) => Failure::Schema(e.to_string()),
        GaitError::DegenerateScale(_) => Failure::Numeric(e.to_string()),
        _ => Failure::Input(e.to_string()),
    }
}

fn cmd_analyze(args: &AnalyzeArgs, format: Format) -> Outcome<()> {
    let seq = read_pose(&args.pose)?;
    let weights = match &args.weights {
        Some(p) => ClassifierWeights::from_json(&read_text(p)?)
            .map_err(|e| Failure::Input(format!("{}: {e}", p.display())))?,
        None => ClassifierWeights::bundled(seq.dims),
    };
    weights
        .check_input(seq.joint_count(), seq.dims)
        .map_err(|e| Failure::Schema(format!("pose file does not match the weights: {e}")))?;
    let spec = WindowSpec {
        window_frames: args.window,
        stride_frames: args.stride,
    };
    if spec.window_frames == 0 || spec.stride_frames == 0 {
        return Err(Failure::Input("window and stride must be positive".into()));
    }
    let trial = classify_trial(&seq, &spec, &weights).map_err(gait_failure)?;
    let (metrics, metrics_error) = match compute_metrics(&seq) {
        Ok(m) => (Some(m), None),
        Err(e) => (None, Some(e.to_string())),
    };
    match format {
        Format::Json => {
            let report = AnalysisReport {
                frames: seq.len(),
                fps: seq.fps,
                dims: seq.dims,
                window_spec: spec,
                n_windows: spec.count(seq.len()),
                class_names: weights.class_names().to_vec(),
                trial_class_name: trial
                    .as_ref()
                    .map(|t| weights.class_names()[t.trial_class].clone()),
                trial,
                metrics,
                metrics_error,
            };
            emit(args.out.as_deref(), &to_json(&report))
        }
        Format::Csv => {
            let csv = metrics
                .map(|m| m.angles_csv())
                .unwrap_or_else(|| "frame,time_s,left_knee_deg,right_knee_deg\n".into());
            emit(args.out.as_deref(), &csv)
        }
    }
}

fn cmd_refine(args: &RefineArgs) -> Outcome<()> {
    let initial = read_pose(&args.pose3d)?;
    let observed = read_pose(&args.pose2d)?;
    let camera: CameraModel = parse_json(&args.camera)?;
    let cfg: RefineConfig = match &args.config {
        Some(p) => parse_json(p)?,
        None => RefineConfig::default(),
    };
    let reference = args.reference.as_deref().map(read_pose).transpose()?;
    let trace_path = args
        .trace
        .clone()
        .unwrap_or_else(|| sibling(&args.out, ".trace.csv"));

    let result = match refine_sequence(&initial, &observed, &camera, &cfg) {
        Ok(r) => r,
        Err(RefineError::Diverged { trace }) => {
            write_bytes(&trace_path, trace_csv(&trace).as_bytes())?;
            return Err(Failure::Numeric(format!(
                "optimization diverged after {} iterations; trace written to {}",
                trace.len().saturating_sub(1),
                trace_path.display()
            )));
        }
        Err(e @ RefineError::Depth { .. }) => return Err(Failure::Numeric(e.to_string())),
        Err(e) => return Err(Failure::Input(e.to_string())),
    };
    write_pose(&args.out, &result.refined)?;
    write_bytes(&trace_path, result.trace_csv().as_bytes())?;

    #[derive(Serialize)]
    struct Summary {
        converged: bool,
        iterations: usize,
        initial_objective: f64,
        final_objective: f64,
        error_before_m: Option<f64>,
        error_after_m: Option<f64>,
        error_reduction: Option<f64>,
    }
    let errors = match &reference {
        Some(r) if r.len() == initial.len() && r.joint_count() == initial.joint_count() => Some((
            mean_joint_error(&initial, r),
            mean_joint_error(&result.refined, r),
        )),
        Some(_) => {
            return Err(Failure::Input(
                "reference does not match the 3D input shape".into(),
            ))
        }
        None => None,
    };
    let trace = &result.objective_trace;
    print!(
        "{}",
        to_json(&Summary {
            converged: result.converged,
            iterations: result.iterations_run,
            initial_objective: trace[0],
            final_objective: *trace
                .last()
                .expect("trace starts with the initial objective"),
            error_before_m: errors.map(|e| e.0),
            error_after_m: errors.map(|e| e.1),
            error_reduction: errors.map(|(b, a)| if b > 0.0 { 1.0 - a / b } else { 0.0 }),
        })
    );
    Ok(())
}

fn latency_failure(e: LatencyError) -> Failure {
    match e {
        LatencyError::Json(_) | LatencyError::Config(_) => Failure::Input(e.to_string()),
        LatencyError::UnknownStage { .. } | LatencyError::Inconsistent { .. } => {
            Failure::Schema(e.to_string())
        }
        LatencyError::NegativeTotal { .. } | LatencyError::NonPositive { .. } => {
            Failure::Numeric(e.to_string())
        }
    }
}

fn profile_dir() -> Option<PathBuf> {
    env::var_os(PROFILE_DIR_VAR).map(PathBuf::from)
}

fn load_book(path: Option<&Path>) -> Outcome<ProfileBook> {
    let path = path
        .map(Path::to_path_buf)
        .or_else(|| profile_dir().map(|d| d.join("profiles.json")));
    match path {
        Some(p) => ProfileBook::from_json(&read_text(&p)?)
            .map_err(latency_failure)
            .map_err(|f| match f {
                Failure::Input(m) => Failure::Input(format!("{}: {m}", p.display())),
                other => other,
            }),
        None => Ok(bundled::book()),
    }
}

fn load_golden(arg: &Option<PathBuf>) -> Outcome<Golden> {
    let path = arg.clone().or_else(|| {
        profile_dir()
            .map(|d| d.join("table2.json"))
            .filter(|p| p.exists())
    });
    match path {
        Some(p) => Golden::from_json(&read_text(&p)?).map_err(latency_failure),
        None => Ok(bundled::golden()),
    }
}

#[derive(Serialize)]
struct ScenarioRun {
    name: String,
    device: LatencyReport,
    cloud: Vec<LatencyReport>,
}

#[derive(Serialize)]
struct SimulationOutput {
    scenarios: Vec<ScenarioRun>,
    #[serde(skip_serializing_if = "Option::is_none")]
    golden: Option<Vec<GoldenCell>>,
}

fn reports_csv(runs: &[ScenarioRun]) -> String {
    let mut out = String::from(
        "scenario,placement,link,bandwidth_mbps,stage_s,transfer_s,correction_s,total_s,gain\n",
    );
    for run in runs {
        for r in std::iter::once(&run.device).chain(&run.cloud) {
            let (link, mbps) = match &r.link {
                Some(l) => (l.name.clone(), l.bandwidth_mbps.to_string()),
                None => (String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{link},{mbps},{},{},{},{},{}",
                run.name,
                r.placement,
                r.stage_s(),
                r.transfer_s(),
                r.correction_s,
                r.total_s,
                r.ratio.map(|x| x.to_string()).unwrap_or_default()
            );
        }
    }
    out
}

fn sweep_csv(book: &ProfileBook, scenarios: &[Scenario], sweep: Sweep) -> Outcome<String> {
    let cloud = book.resolve(Placement::Cloud).map_err(latency_failure)?;
    let mut out = String::from("scenario,bandwidth_mbps,device_total_s,cloud_total_s,gain\n");
    for s in scenarios {
        let (device, _) = s.run(book, &[]).map_err(latency_failure)?;
        let spec = s.spec(Placement::Cloud, &book.reference);
        let span = (sweep.max_mbps / sweep.min_mbps).ln();
        for i in 0..sweep.points {
            let mbps = if i + 1 == sweep.points {
                sweep.max_mbps
            } else {
                sweep.min_mbps * (span * i as f64 / (sweep.points - 1) as f64).exp()
            };
            let link = NetworkLink::new("sweep", mbps);
            let r = pipeline_time(&spec, &cloud, Some(&link))
                .and_then(|r| r.compared_to(&device))
                .map_err(latency_failure)?;
            let _ = writeln!(
                out,
                "{},{mbps},{},{},{}",
                s.name,
                device.total_s,
                r.total_s,
                r.ratio.expect("set by compared_to")
            );
        }
    }
    Ok(out)
}

fn cmd_simulate(args: &SimulateArgs, format: Format) -> Outcome<()> {
    let book = load_book(args.profiles.as_deref())?;
    let scenarios = if args.spec.is_empty() {
        bundled::scenarios()
    } else {
        args.spec
            .iter()
            .map(|p| {
                Scenario::from_json(&read_text(p)?)
                    .map_err(|e| Failure::Input(format!("{}: {e}", p.display())))
            })
            .collect::<Outcome<Vec<_>>>()?
    };

    if let Some(sweep) = args.sweep {
        return emit(args.out.as_deref(), &sweep_csv(&book, &scenarios, sweep)?);
    }

    let mut runs = Vec::new();
    for s in &scenarios {
        let (device, cloud) = s.run(&book, &book.links).map_err(latency_failure)?;
        runs.push(ScenarioRun {
            name: s.name.clone(),
            device,
            cloud,
        });
    }
    let golden = match &args.golden {
        Some(path) => Some(
            load_golden(path)?
                .check(&book, &scenarios)
                .map_err(latency_failure)?,
        ),
        None => None,
    };
    let text = match format {
        Format::Json => to_json(&SimulationOutput {
            scenarios: runs,
            golden: golden.clone(),
        }),
        Format::Csv => reports_csv(&runs),
    };
    emit(args.out.as_deref(), &text)?;

    if let Some(cells) = golden {
        for c in &cells {
            eprintln!(
                "{} {:<50} published {:>9.4} simulated {:>9.4} ({:+.1}%, {})",
                if c.pass { "ok  " } else { "FAIL" },
                c.label,
                c.published,
                c.simulated,
                c.deviation_pct,
                c.tolerance
            );
        }
        let failed = cells.iter().filter(|c| !c.pass).count();
        if failed > 0 {
            return Err(Failure::Numeric(format!(
                "{failed} golden cell(s) out of tolerance"
            )));
        }
    }
    Ok(())
}

fn size_csv(seq: &PoseSequence) -> String {
    let reference = VideoProfile::reference_4k60();
    let video = VideoProfile {
        duration_s: seq.duration_s(),
        size_bytes: reference.bitrate_bps() / 8.0 * seq.duration_s(),
        ..reference
    };
    let r = size_reduction(&video, seq);
    format!(
        "artifact,bytes\nvideo_4k60,{}\npose_file,{}\n",
        r.video_bytes, r.pose_bytes
    )
}

fn cmd_convert(args: &ConvertArgs) -> Outcome<()> {
    let bytes = fs::read(&args.input)
        .map_err(|e| Failure::Input(format!("{}: {e}", args.input.display())))?;
    let seq = if bytes.starts_with(&MAGIC) {
        let seq = decode(&bytes).map_err(|e| pose_error(&args.input, e))?;
        write_bytes(&args.output, to_json(&seq).as_bytes())?;
        seq
    } else {
        let seq: PoseSequence = serde_json::from_slice(&bytes)
            .map_err(|e| Failure::Input(format!("{}: {e}", args.input.display())))?;
        write_pose(&args.output, &seq)?;
        seq
    };
    if let Some(p) = &args.size_csv {
        write_bytes(p, size_csv(&seq).as_bytes())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli.seed, cli.format),
        Command::Analyze(a) => cmd_analyze(a, cli.format),
        Command::Refine(a) => cmd_refine(a),
        Command::Simulate(a) => cmd_simulate(a, cli.format),
        Command::Convert(a) => cmd_convert(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
