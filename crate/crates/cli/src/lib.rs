//! Command-line front end: simulate sequences, calibrate, and evaluate.
//!
//! Exit status is 0 on success, 2 for usage errors (bad flags, unreadable or invalid
//! input and configuration files) and 1 for runtime failures. Failures print one JSON
//! line `{"error_class": ..., "message": ...}` on stderr.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rcmcal_core::pipeline::{calibrate_sequence, evaluate_sequence};
use rcmcal_core::simdata::SimError;
use rcmcal_core::{
    generate_sequence, CalibrationConfig, CalibrationResult, MetricsReport, PipelineError,
    RigidTransform, ScenarioConfig, Sequence, SCHEMA_VERSION,
};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "rcmcal", version, about = "Markerless hand-eye calibration for RCM instruments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic sequence from a scenario config.
    Simulate(SimulateArgs),
    /// Recover cT_rb from a sequence.
    Calibrate(CalibrateArgs),
    /// Tool-tip error metrics of a calibration result on a sequence.
    Evaluate(EvaluateArgs),
    /// Simulate, calibrate and evaluate from one config.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Output file; stdout when neither this nor --output-dir is given.
    #[arg(long, short, conflicts_with = "output_dir")]
    output: Option<PathBuf>,
    /// Directory receiving the output under its default file name.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scenario config JSON.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Omit ground-truth blocks from the sequence.
    #[arg(long)]
    no_truth: bool,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Sequence JSON.
    #[arg(long, short)]
    input: PathBuf,
    /// Calibration config JSON; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

impl Format {
    fn extension(self) -> &'static str {
        match self {
            Format::Json => "json",
            Format::Csv => "csv",
        }
    }

    fn render(self, report: &MetricsReport) -> String {
        match self {
            Format::Json => report.to_json(),
            Format::Csv => report.to_csv(),
        }
    }
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Sequence JSON with ground-truth tips or stereo tip observations.
    #[arg(long, short)]
    input: PathBuf,
    /// Calibration result JSON.
    #[arg(long, short, required_unless_present = "nominal")]
    result: Option<PathBuf>,
    /// Evaluate the sequence's nominal cT_rb instead of a calibration result.
    #[arg(long, conflicts_with = "result")]
    nominal: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Pipeline config JSON.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving the sequence, result and metrics files.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

/// Config for the `pipeline` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    /// Seed of an independent evaluation sequence; the fitting sequence is evaluated
    /// when absent.
    #[serde(default)]
    pub eval_seed: Option<u64>,
}

/// Summary printed by the `pipeline` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub frames_used: usize,
    pub alignment_rmsd_mm: f64,
    pub rotation_error_rad: Option<f64>,
    pub rotation_error_deg: Option<f64>,
    pub translation_error_mm: Option<f64>,
    pub mean_rcm_distance_phase1_mm: f64,
    pub mean_rcm_distance_phase2_mm: f64,
    pub pre_median_err3d_mm: f64,
    pub post_median_err3d_mm: f64,
    pub post_median_err2d_px: f64,
}

#[derive(Debug)]
struct Failure {
    class: String,
    message: String,
    code: i32,
}

impl Failure {
    fn usage(class: &str, message: impl Into<String>) -> Self {
        Failure {
            class: class.into(),
            message: message.into(),
            code: EXIT_USAGE,
        }
    }

    fn runtime(class: &str, message: impl Into<String>) -> Self {
        Failure {
            class: class.into(),
            message: message.into(),
            code: EXIT_RUNTIME,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match e {
            PipelineError::InvalidInput(_) | PipelineError::Simulation(SimError::InvalidConfig(_)) => {
                EXIT_USAGE
            }
            _ => EXIT_RUNTIME,
        };
        Failure {
            class: e.class().into(),
            message: e.to_string(),
            code,
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        PipelineError::from(e).into()
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .map_err(|e| Failure::usage("missing_input", format!("{}: {e}", path.display())))
}

fn parse_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read(path)?)
        .map_err(|e| Failure::usage("invalid_config", format!("{}: {e}", path.display())))
}

fn load_sequence(path: &Path) -> Result<Sequence, Failure> {
    Sequence::from_json(&read(path)?).map_err(|e| {
        Failure::usage("invalid_input", format!("{}: {e}", path.display()))
    })
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg: ScenarioConfig = parse_config(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    check_version(cfg.schema_version, path)?;
    Ok(cfg)
}

fn check_version(version: u32, path: &Path) -> Result<(), Failure> {
    if version == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Failure::usage(
            "invalid_config",
            format!("{}: unsupported schema_version {version}", path.display()),
        ))
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| Failure::runtime("io_error", format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::runtime("io_error", format!("{}: {e}", path.display())))
}

fn emit(out: &OutputArgs, default_name: &str, text: &str) -> Result<(), Failure> {
    match (&out.output, &out.output_dir) {
        (Some(path), _) => write_file(path, text),
        (None, Some(dir)) => write_file(&dir.join(default_name), text),
        (None, None) => {
            print!("{text}");
            Ok(())
        }
    }
}

fn with_newline(mut s: String) -> String {
    if !s.ends_with('\n') {
        s.push('\n');
    }
    s
}

fn simulate_sequence(cfg: &ScenarioConfig, with_truth: bool) -> Result<Sequence, Failure> {
    let frames = generate_sequence(cfg)?;
    Ok(Sequence::from_synthetic(cfg, &frames, with_truth))
}

fn run_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let cfg = load_scenario(&args.config, args.seed)?;
    let seq = simulate_sequence(&cfg, !args.no_truth)?;
    emit(&args.out, "sequence.json", &with_newline(seq.to_json()))
}

fn run_calibrate(args: CalibrateArgs) -> Result<(), Failure> {
    let config: CalibrationConfig = match &args.config {
        Some(path) => parse_config(path)?,
        None => CalibrationConfig::default(),
    };
    let seq = load_sequence(&args.input)?;
    let result = calibrate_sequence(&seq, &config)?;
    emit(&args.out, "result.json", &with_newline(result.to_json()))
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let seq = load_sequence(&args.input)?;
    let hand_eye = match &args.result {
        Some(path) if !args.nominal => {
            CalibrationResult::from_json(&read(path)?)
                .map_err(|e| Failure::usage("invalid_input", format!("{}: {e}", path.display())))?
                .cam_from_base
        }
        _ => seq.header.nominal_cam_from_base,
    };
    let report = evaluate_sequence(&hand_eye, &seq);
    let name = format!("metrics.{}", args.format.extension());
    emit(&args.out, &name, &with_newline(args.format.render(&report)))
}

fn summarize(
    result: &CalibrationResult,
    truth: Option<&RigidTransform>,
    pre: &MetricsReport,
    post: &MetricsReport,
) -> PipelineSummary {
    let rot = truth.map(|gt| result.cam_from_base.rotation_distance(gt));
    PipelineSummary {
        frames_used: result.frames_used,
        alignment_rmsd_mm: result.alignment_rmsd,
        rotation_error_rad: rot,
        rotation_error_deg: rot.map(f64::to_degrees),
        translation_error_mm: truth.map(|gt| result.cam_from_base.translation_distance(gt)),
        mean_rcm_distance_phase1_mm: result.diagnostics.mean_rcm_distance_phase1,
        mean_rcm_distance_phase2_mm: result.diagnostics.mean_rcm_distance_phase2,
        pre_median_err3d_mm: pre.median.err3d_mm,
        post_median_err3d_mm: post.median.err3d_mm,
        post_median_err2d_px: post.median.err2d_px,
    }
}

fn run_pipeline(args: PipelineArgs) -> Result<(), Failure> {
    let mut config: PipelineConfig = parse_config(&args.config)?;
    check_version(config.schema_version, &args.config)?;
    check_version(config.scenario.schema_version, &args.config)?;
    if let Some(seed) = args.seed {
        config.scenario.seed = seed;
    }
    let seq = simulate_sequence(&config.scenario, true)?;
    let result = calibrate_sequence(&seq, &config.calibration)?;
    let eval_seq = match config.eval_seed {
        Some(seed) => {
            let mut cfg = config.scenario.clone();
            cfg.seed = seed;
            Some(simulate_sequence(&cfg, true)?)
        }
        None => None,
    };
    let target = eval_seq.as_ref().unwrap_or(&seq);
    let pre = evaluate_sequence(&target.header.nominal_cam_from_base, target);
    let post = evaluate_sequence(&result.cam_from_base, target);
    let truth = seq.gt.as_ref().map(|g| &g.cam_from_base);
    let summary = summarize(&result, truth, &pre, &post);

    if let Some(dir) = &args.output_dir {
        let ext = args.format.extension();
        write_file(&dir.join("sequence.json"), &with_newline(seq.to_json()))?;
        if let Some(e) = &eval_seq {
            write_file(&dir.join("eval_sequence.json"), &with_newline(e.to_json()))?;
        }
        write_file(&dir.join("result.json"), &with_newline(result.to_json()))?;
        write_file(&dir.join(format!("metrics.{ext}")), &with_newline(args.format.render(&post)))?;
        write_file(
            &dir.join(format!("baseline_metrics.{ext}")),
            &with_newline(args.format.render(&pre)),
        )?;
    }
    let text = serde_json::to_string_pretty(&summary).expect("summary serialization cannot fail");
    println!("{text}");
    Ok(())
}

fn report_failure(f: &Failure) {
    let line = serde_json::json!({ "error_class": f.class, "message": f.message });
    eprintln!("{line}");
}

/// Runs the command line `argv` (program name first) and returns the exit status.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let message = e.render().to_string();
            report_failure(&Failure::usage("usage", message.trim_end()));
            return EXIT_USAGE;
        }
    };
    let outcome = match cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Calibrate(a) => run_calibrate(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Pipeline(a) => run_pipeline(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(f) => {
            report_failure(&f);
            f.code
        }
    }
}
