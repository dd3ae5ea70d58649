//! `kincast`: generate synthetic motion data, train the sparse-sensor joint
//! predictor, and run closed-loop evaluation or streaming prediction.
//!
//! Exit codes are a stable contract: 0 success, 2 usage error, 3 numeric
//! failure (non-finite loss or state), 4 I/O or data error. Every command
//! writes a `<command>.manifest.json` next to its outputs with the resolved
//! settings, seeds, and paths needed to re-run it exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use kincast_core::model::{parse_model, RigidBodyModel};
use kincast_core::network::NetworkDescriptor;
use kincast_core::runtime::{closed_loop, BufferMode, RuntimeError, StepOptions};
use kincast_core::training::{
    load_checkpoint, loss_log_csv, reference_window, save_checkpoint, split_sequences,
    target_window, train, Checkpoint, TrainConfig, TrainError,
};
use kincast_core::{
    check_imu_counts, compute_metrics, ensure_model_match, generate_motion, read_dataset,
    simulate_imus, write_dataset, AccelConvention, DataError, EvalReference, LossWeights,
    MotionKind, NoiseParams, RecordedSequence, DEFAULT_EVAL_STEPS,
};

const EXIT_USAGE: i32 = 2;
const EXIT_NUMERIC: i32 = 3;
const EXIT_IO: i32 = 4;

struct Failure {
    code: i32,
    error: anyhow::Error,
}

fn fail(code: i32, error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code,
        error: error.into(),
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    fail(EXIT_USAGE, anyhow::anyhow!(msg.into()))
}

type CmdResult = Result<(), Failure>;

trait WithCode<T> {
    fn code(self, code: i32) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: i32) -> Result<T, Failure> {
        self.map_err(|e| fail(code, e))
    }
}

/// Training errors split by what went wrong, not where.
fn train_exit_code(err: &TrainError) -> i32 {
    match err {
        TrainError::NanLoss { .. } => EXIT_NUMERIC,
        TrainError::BadConfig(_) | TrainError::DescriptorMismatch(_) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

fn runtime_exit_code(err: &RuntimeError) -> i32 {
    match err {
        RuntimeError::NonFinite(_) => EXIT_NUMERIC,
        RuntimeError::BadTolerance(_) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

#[derive(Parser)]
#[command(
    name = "kincast",
    version,
    about = "Sparse-sensor whole-body joint kinematics predictor"
)]
struct Cli {
    /// Rigid-body model file (.kcm). Defaults to `model` from the config
    /// file, then $KINCAST_MODEL.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// TOML settings file; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic motion datasets with simulated sensor readings.
    Generate(GenerateArgs),
    /// Train a predictor checkpoint from dataset files.
    Train(TrainArgs),
    /// Run a checkpoint closed-loop over held-out data and write a metrics
    /// report.
    Eval(EvalArgs),
    /// Stream per-step refined predictions for one recorded sequence.
    Predict(PredictArgs),
}

/// Optional file-borne defaults; every key can be overridden by a flag.
#[derive(serde::Deserialize, Default, Clone)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    duration: Option<f64>,
    rate: Option<f64>,
    accel_noise: Option<f64>,
    orient_noise: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr0: Option<f64>,
    lr_step_epochs: Option<usize>,
    lr_gamma: Option<f64>,
    stride: Option<usize>,
    input_steps: Option<usize>,
    horizon: Option<usize>,
    inertial_hidden: Option<usize>,
    buffer_hidden: Option<usize>,
    shared_hidden: Option<usize>,
    branch_hidden: Option<usize>,
    val_fraction: Option<f64>,
    weight_fk: Option<f64>,
    weight_dk: Option<f64>,
    eval_steps: Option<Vec<usize>>,
    epsilon: Option<f64>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Motion kind (repeatable): forward_walk, backward_walk, side_step,
    /// walk_lift_arms, walk_wave_arms, stand.
    #[arg(long, required = true)]
    kind: Vec<String>,
    /// Sequence length in seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Sample rate in Hz.
    #[arg(long)]
    rate: Option<f64>,
    /// Base RNG seed; run r of a kind uses seed + r.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Sequences per kind.
    #[arg(long, default_value_t = 1)]
    runs: u64,
    /// Shorthand noise level: accelerometer std = N m/s^2, orientation std
    /// = N/10 rad. `--noise 0` gives exact readings.
    #[arg(long)]
    noise: Option<f64>,
    /// Accelerometer noise std, m/s^2 (overrides --noise).
    #[arg(long)]
    accel_noise: Option<f64>,
    /// Orientation noise std, rad (overrides --noise).
    #[arg(long)]
    orient_noise: Option<f64>,
    /// How accelerometers treat gravity.
    #[arg(long, value_enum, default_value_t = ConventionArg::Proper)]
    convention: ConventionArg,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    /// Gravity included, as a strapped-down sensor reads.
    Proper,
    /// Gravity already removed.
    GravityFree,
}

impl From<ConventionArg> for AccelConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Proper => AccelConvention::Proper,
            ConventionArg::GravityFree => AccelConvention::GravityFree,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file or directory (repeatable; directories are scanned for
    /// .kcds files).
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss-log CSV path (default: next to the checkpoint).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lr_step_epochs: Option<usize>,
    #[arg(long)]
    lr_gamma: Option<f64>,
    /// Window stride over the training sequences.
    #[arg(long)]
    stride: Option<usize>,
    /// Input window length M.
    #[arg(long)]
    input_steps: Option<usize>,
    /// Prediction horizon K.
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    inertial_hidden: Option<usize>,
    #[arg(long)]
    buffer_hidden: Option<usize>,
    #[arg(long)]
    shared_hidden: Option<usize>,
    #[arg(long)]
    branch_hidden: Option<usize>,
    /// Fraction of sequences held out for validation loss.
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Which kinematic-consistency losses stay on: both, only one, or none.
    #[arg(long, value_enum, default_value_t = Ablate::Fkdk)]
    ablate: Ablate,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Ablate {
    /// Position/velocity data losses only.
    None,
    /// Keep the pose-consistency loss, drop the twist one.
    Fk,
    /// Keep the twist-consistency loss, drop the pose one.
    Dk,
    /// Keep both kinematic losses.
    Fkdk,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint (.kccp).
    #[arg(long, required = true)]
    checkpoint: PathBuf,
    /// Held-out dataset file or directory (repeatable).
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// Report path prefix; writes <out>.json and <out>.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluation steps (1-based, comma separated). Defaults to 1,30,60
    /// clipped to the checkpoint horizon.
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    /// Joints to include in joint-space metrics.
    #[arg(long, value_enum, default_value_t = JointSubset::All)]
    joints: JointSubset,
    /// Feed raw network first steps to the buffer instead of refined ones.
    #[arg(long)]
    no_refine: bool,
    /// Per-link squared twist residual tolerance for refinement.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum JointSubset {
    All,
    Upper,
    Lower,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained checkpoint (.kccp).
    #[arg(long, required = true)]
    checkpoint: PathBuf,
    /// Input sequence (.kcds).
    #[arg(long, required = true)]
    input: PathBuf,
    /// Output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Also emit the predicted joint positions this many steps ahead.
    #[arg(long)]
    horizon_dump: Option<usize>,
    /// Push raw network first steps instead of refined ones.
    #[arg(long)]
    no_refine: bool,
    /// Per-link squared twist residual tolerance for refinement.
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Format {
    Csv,
    Jsonl,
}

fn main() {
    let cli = Cli::parse();
    let config = match load_file_config(cli.config.as_deref()) {
        Ok(c) => c,
        Err(f) => exit_with(f),
    };
    let started = Instant::now();
    let result = match &cli.command {
        Command::Generate(args) => cmd_generate(&cli, &config, args, started),
        Command::Train(args) => cmd_train(&cli, &config, args, started),
        Command::Eval(args) => cmd_eval(&cli, &config, args, started),
        Command::Predict(args) => cmd_predict(&cli, &config, args, started),
    };
    if let Err(f) = result {
        exit_with(f);
    }
}

fn exit_with(f: Failure) -> ! {
    eprintln!("error: {:#}", f.error);
    std::process::exit(f.code);
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).code(EXIT_IO)?;
    toml::from_str(&text).code(EXIT_USAGE)
}

fn load_model(cli: &Cli, config: &FileConfig) -> Result<(RigidBodyModel, PathBuf), Failure> {
    let path = cli
        .model
        .clone()
        .or_else(|| config.model.clone())
        .or_else(|| std::env::var_os("KINCAST_MODEL").map(PathBuf::from));
    let Some(path) = path else {
        return Err(usage(
            "no model file: pass --model, set `model` in the config file, \
             or export KINCAST_MODEL",
        ));
    };
    let text = std::fs::read_to_string(&path).code(EXIT_IO)?;
    let model = parse_model(&text).code(EXIT_IO)?;
    Ok((model, path))
}

fn out_dir(config: &FileConfig, flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

#[derive(Serialize)]
struct RunManifest<S: Serialize> {
    command: &'static str,
    version: String,
    seeds: Vec<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    settings: S,
    started_unix: u64,
    wall_seconds: f64,
}

fn version_string() -> String {
    concat!("v", env!("CARGO_PKG_VERSION")).to_string()
}

fn write_manifest<S: Serialize>(
    dir: &Path,
    command: &'static str,
    seeds: Vec<u64>,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    settings: S,
    started: Instant,
) -> Result<PathBuf, Failure> {
    let manifest = RunManifest {
        command,
        version: version_string(),
        seeds,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        settings,
        started_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let path = dir.join(format!("{command}.manifest.json"));
    let mut bytes = serde_json::to_vec_pretty(&manifest).code(EXIT_IO)?;
    bytes.push(b'\n');
    write_atomic(&path, &bytes).code(EXIT_IO)?;
    Ok(path)
}

/// Expand dataset arguments: files stay, directories contribute their .kcds
/// entries sorted by name.
fn collect_data_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut found = Vec::new();
            for entry in std::fs::read_dir(path).code(EXIT_IO)? {
                let p = entry.code(EXIT_IO)?.path();
                if p.extension().is_some_and(|e| e == "kcds") {
                    found.push(p);
                }
            }
            found.sort();
            if found.is_empty() {
                return Err(fail(
                    EXIT_IO,
                    anyhow::anyhow!("no .kcds files in {}", path.display()),
                ));
            }
            files.extend(found);
        } else {
            files.push(path.clone());
        }
    }
    Ok(files)
}

fn load_sequences(
    model: &RigidBodyModel,
    paths: &[PathBuf],
) -> Result<Vec<RecordedSequence>, Failure> {
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let seq = read_dataset(path)
            .map_err(|e| fail(EXIT_IO, anyhow::Error::from(e).context(path.display().to_string())))?;
        ensure_model_match(&seq, model).code(EXIT_IO)?;
        check_imu_counts(&seq, model.instrumented_links().len()).code(EXIT_IO)?;
        out.push(seq);
    }
    Ok(out)
}

#[derive(Serialize)]
struct GenerateSettings {
    model: String,
    kinds: Vec<String>,
    duration: f64,
    rate: f64,
    runs: u64,
    accel_noise: f64,
    orient_noise: f64,
    convention: &'static str,
}

fn cmd_generate(
    cli: &Cli,
    config: &FileConfig,
    args: &GenerateArgs,
    started: Instant,
) -> CmdResult {
    let (model, model_path) = load_model(cli, config)?;
    let duration = args.duration.or(config.duration).unwrap_or(60.0);
    let rate = args.rate.or(config.rate).unwrap_or(60.0);
    let noise = NoiseParams {
        accel_std: args
            .accel_noise
            .or(args.noise)
            .or(config.accel_noise)
            .unwrap_or(0.1),
        orient_std: args
            .orient_noise
            .or(args.noise.map(|n| n / 10.0))
            .or(config.orient_noise)
            .unwrap_or(0.01),
    };
    if noise.accel_std < 0.0 || noise.orient_std < 0.0 {
        return Err(usage("noise levels must be non-negative"));
    }
    let dir = out_dir(config, args.out.as_deref());
    std::fs::create_dir_all(&dir).code(EXIT_IO)?;

    let kinds = args
        .kind
        .iter()
        .map(|k| MotionKind::parse(k).code(EXIT_USAGE))
        .collect::<Result<Vec<_>, _>>()?;
    let mut seeds = Vec::new();
    let mut outputs = Vec::new();
    for &kind in &kinds {
        for run in 0..args.runs {
            let seed = args.seed + run;
            let mut seq = generate_motion(&model, kind, duration, rate, seed)
                .map_err(|e| match e {
                    DataError::TooShort { .. } => fail(EXIT_USAGE, e),
                    other => fail(EXIT_IO, other),
                })?;
            simulate_imus(&model, &mut seq, noise, args.convention.into(), seed)
                .code(EXIT_NUMERIC)?;
            let path = dir.join(format!("{}_{seed:04}.kcds", kind.as_str()));
            write_dataset(&path, &seq).code(EXIT_IO)?;
            seeds.push(seed);
            outputs.push(path);
        }
    }
    let settings = GenerateSettings {
        model: model_path.display().to_string(),
        kinds: kinds.iter().map(|k| k.as_str().to_string()).collect(),
        duration,
        rate,
        runs: args.runs,
        accel_noise: noise.accel_std,
        orient_noise: noise.orient_std,
        convention: match args.convention {
            ConventionArg::Proper => "proper",
            ConventionArg::GravityFree => "gravity_free",
        },
    };
    write_manifest(&dir, "generate", seeds, &[model_path], &outputs, settings, started)?;
    for path in &outputs {
        println!("{}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSettings {
    model: String,
    data: Vec<String>,
    ablate: Ablate,
    val_fraction: f64,
    epochs: usize,
    batch_size: usize,
    lr0: f64,
    lr_step_epochs: usize,
    lr_gamma: f64,
    stride: usize,
    input_steps: usize,
    horizon: usize,
    hidden: [usize; 4],
    weights: [f64; 4],
    seed: u64,
}

fn cmd_train(cli: &Cli, config: &FileConfig, args: &TrainArgs, started: Instant) -> CmdResult {
    let (model, model_path) = load_model(cli, config)?;
    let files = collect_data_files(&args.data)?;
    let sequences = load_sequences(&model, &files)?;

    let mut weights = LossWeights {
        position: 1.0,
        velocity: 1.0,
        fk: config.weight_fk.unwrap_or(LossWeights::default().fk),
        dk: config.weight_dk.unwrap_or(LossWeights::default().dk),
    };
    match args.ablate {
        Ablate::None => {
            weights.fk = 0.0;
            weights.dk = 0.0;
        }
        Ablate::Fk => weights.dk = 0.0,
        Ablate::Dk => weights.fk = 0.0,
        Ablate::Fkdk => {}
    }

    let defaults = TrainConfig::default();
    let train_config = TrainConfig {
        epochs: args.epochs.or(config.epochs).unwrap_or(defaults.epochs),
        batch_size: args
            .batch_size
            .or(config.batch_size)
            .unwrap_or(defaults.batch_size),
        lr0: args.lr0.or(config.lr0).unwrap_or(defaults.lr0),
        lr_step_epochs: args
            .lr_step_epochs
            .or(config.lr_step_epochs)
            .unwrap_or(defaults.lr_step_epochs),
        lr_gamma: args.lr_gamma.or(config.lr_gamma).unwrap_or(defaults.lr_gamma),
        weights,
        seed: args.seed,
        input_steps: args
            .input_steps
            .or(config.input_steps)
            .unwrap_or(defaults.input_steps),
        horizon: args.horizon.or(config.horizon).unwrap_or(defaults.horizon),
        stride: args.stride.or(config.stride).unwrap_or(defaults.stride),
    };

    let mut descriptor = NetworkDescriptor::for_model(&model);
    descriptor.input_steps = train_config.input_steps;
    descriptor.horizon = train_config.horizon;
    if let Some(w) = args.inertial_hidden.or(config.inertial_hidden) {
        descriptor.inertial_hidden = w;
    }
    if let Some(w) = args.buffer_hidden.or(config.buffer_hidden) {
        descriptor.buffer_hidden = w;
    }
    if let Some(w) = args.shared_hidden.or(config.shared_hidden) {
        descriptor.shared_hidden = w;
    }
    if let Some(w) = args.branch_hidden.or(config.branch_hidden) {
        descriptor.branch_hidden = w;
    }

    let val_fraction = args.val_fraction.or(config.val_fraction).unwrap_or(0.0);
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(usage("--val-fraction must be in [0, 1)"));
    }
    let (train_seqs, val_seqs) = split_sequences(sequences, val_fraction, args.seed);

    let (checkpoint, log) = train(&model, &descriptor, &train_seqs, &val_seqs, &train_config)
        .map_err(|e| fail(train_exit_code(&e), e))?;

    let dir = out_dir(config, None);
    let out = args.out.clone().unwrap_or_else(|| dir.join("checkpoint.kccp"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).code(EXIT_IO)?;
    }
    save_checkpoint(&out, &checkpoint).map_err(|e| fail(EXIT_IO, e))?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| out.with_extension("losses.csv"));
    write_atomic(&log_path, loss_log_csv(&log).as_bytes()).code(EXIT_IO)?;

    let manifest_dir = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let settings = TrainSettings {
        model: model_path.display().to_string(),
        data: files.iter().map(|p| p.display().to_string()).collect(),
        ablate: args.ablate,
        val_fraction,
        epochs: train_config.epochs,
        batch_size: train_config.batch_size,
        lr0: train_config.lr0,
        lr_step_epochs: train_config.lr_step_epochs,
        lr_gamma: train_config.lr_gamma,
        stride: train_config.stride,
        input_steps: train_config.input_steps,
        horizon: train_config.horizon,
        hidden: [
            descriptor.inertial_hidden,
            descriptor.buffer_hidden,
            descriptor.shared_hidden,
            descriptor.branch_hidden,
        ],
        weights: [weights.position, weights.velocity, weights.fk, weights.dk],
        seed: args.seed,
    };
    let mut inputs = vec![model_path];
    inputs.extend(files);
    write_manifest(
        &manifest_dir,
        "train",
        vec![args.seed],
        &inputs,
        &[out.clone(), log_path.clone()],
        settings,
        started,
    )?;
    println!("{}", out.display());
    println!("{}", log_path.display());
    Ok(())
}

fn load_matching_checkpoint(
    path: &Path,
    model: &RigidBodyModel,
) -> Result<Checkpoint, Failure> {
    let checkpoint = load_checkpoint(path).map_err(|e| fail(EXIT_IO, e))?;
    let expected = model.content_hash();
    if checkpoint.model_hash != expected {
        return Err(fail(
            EXIT_IO,
            anyhow::anyhow!(
                "checkpoint was trained against model hash {}, the given model has {}",
                checkpoint.model_hash,
                expected
            ),
        ));
    }
    Ok(checkpoint)
}

fn subset_indices(model: &RigidBodyModel, subset: JointSubset) -> Vec<usize> {
    match subset {
        JointSubset::All => (0..model.dof()).collect(),
        JointSubset::Upper => model.upper_joints().to_vec(),
        JointSubset::Lower => model.lower_joints().to_vec(),
    }
}

fn step_options(no_refine: bool, epsilon: Option<f64>) -> StepOptions {
    let mut options = StepOptions::default();
    if no_refine {
        options.mode = BufferMode::Raw;
    }
    if let Some(eps) = epsilon {
        options.epsilon = eps;
    }
    options
}

#[derive(Serialize)]
struct EvalSettings {
    model: String,
    checkpoint: String,
    data: Vec<String>,
    steps: Vec<usize>,
    joints: JointSubset,
    refined: bool,
    epsilon: f64,
}

fn cmd_eval(cli: &Cli, config: &FileConfig, args: &EvalArgs, started: Instant) -> CmdResult {
    let (model, model_path) = load_model(cli, config)?;
    let checkpoint = load_matching_checkpoint(&args.checkpoint, &model)?;
    let files = collect_data_files(&args.data)?;
    let sequences = load_sequences(&model, &files)?;

    let horizon = checkpoint.params.descriptor.horizon;
    let steps: Vec<usize> = match args.steps.clone().or_else(|| config.eval_steps.clone()) {
        Some(steps) => {
            if let Some(&bad) = steps.iter().find(|&&t| t == 0 || t > horizon) {
                return Err(usage(format!(
                    "evaluation step {bad} outside the checkpoint horizon 1..={horizon}"
                )));
            }
            steps
        }
        None => DEFAULT_EVAL_STEPS
            .iter()
            .copied()
            .filter(|&t| t <= horizon)
            .collect(),
    };
    let subset = subset_indices(&model, args.joints);
    let options = step_options(args.no_refine, args.epsilon.or(config.epsilon));

    let mut predictions = Vec::new();
    let mut references = Vec::new();
    let mut refinement_failures = 0usize;
    for seq in &sequences {
        let records = closed_loop(&model, &checkpoint.params, seq, &options)
            .map_err(|e| fail(runtime_exit_code(&e), e))?;
        for record in records {
            if let Some(report) = &record.report {
                if !report.feasible {
                    refinement_failures += 1;
                }
            }
            // Only windows whose whole horizon has ground truth are scored.
            if record.anchor + horizon <= seq.len() {
                references.push(EvalReference {
                    joints: target_window(seq, record.anchor, horizon),
                    kinematics: reference_window(&model, seq, record.anchor, horizon)
                        .code(EXIT_IO)?,
                });
                predictions.push(record.window);
            }
        }
    }
    let report = compute_metrics(&model, &predictions, &references, &subset, &steps)
        .code(EXIT_USAGE)?;

    let dir = out_dir(config, None);
    let prefix = args.out.clone().unwrap_or_else(|| dir.join("eval_report"));
    if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).code(EXIT_IO)?;
    }
    let json_path = prefix.with_extension("json");
    let csv_path = prefix.with_extension("csv");

    let doc = serde_json::json!({
        "model_hash": checkpoint.model_hash,
        "checkpoint": args.checkpoint.display().to_string(),
        "refined": !args.no_refine,
        "windows": predictions.len(),
        "refinement_failures": refinement_failures,
        "steps": serde_json::to_value(&report.rows).code(EXIT_IO)?,
    });
    let mut bytes = serde_json::to_vec_pretty(&doc).code(EXIT_IO)?;
    bytes.push(b'\n');
    write_atomic(&json_path, &bytes).code(EXIT_IO)?;
    write_atomic(&csv_path, report.to_csv().as_bytes()).code(EXIT_IO)?;

    let manifest_dir = json_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let settings = EvalSettings {
        model: model_path.display().to_string(),
        checkpoint: args.checkpoint.display().to_string(),
        data: files.iter().map(|p| p.display().to_string()).collect(),
        steps: steps.clone(),
        joints: args.joints,
        refined: !args.no_refine,
        epsilon: options.epsilon,
    };
    let mut inputs = vec![model_path, args.checkpoint.clone()];
    inputs.extend(files);
    write_manifest(
        &manifest_dir,
        "eval",
        vec![],
        &inputs,
        &[json_path.clone(), csv_path.clone()],
        settings,
        started,
    )?;
    println!("{}", json_path.display());
    println!("{}", csv_path.display());
    Ok(())
}

#[derive(Serialize)]
struct PredictSettings {
    model: String,
    checkpoint: String,
    input: String,
    format: Format,
    horizon_dump: Option<usize>,
    refined: bool,
    epsilon: f64,
}

fn cmd_predict(cli: &Cli, config: &FileConfig, args: &PredictArgs, started: Instant) -> CmdResult {
    let (model, model_path) = load_model(cli, config)?;
    let checkpoint = load_matching_checkpoint(&args.checkpoint, &model)?;
    let horizon = checkpoint.params.descriptor.horizon;
    if let Some(h) = args.horizon_dump {
        if h == 0 || h > horizon {
            return Err(usage(format!(
                "--horizon-dump {h} outside the checkpoint horizon 1..={horizon}"
            )));
        }
    }
    let seq = read_dataset(&args.input).map_err(|e| fail(EXIT_IO, e))?;

    let mut body = String::new();
    let n = model.dof();
    if args.format == Format::Csv {
        let mut header = String::from("anchor");
        for j in 0..n {
            let _ = write!(header, ",q{j}");
        }
        for j in 0..n {
            let _ = write!(header, ",qd{j}");
        }
        if let Some(h) = args.horizon_dump {
            for j in 0..n {
                let _ = write!(header, ",h{h}_q{j}");
            }
        }
        body.push_str(&header);
        body.push('\n');
    }

    // An empty stream yields zero records; anything shorter than one input
    // window cannot seed the buffer and is rejected below by the pipeline.
    let mut records_out = 0usize;
    if !seq.is_empty() {
        ensure_model_match(&seq, &model).code(EXIT_IO)?;
        check_imu_counts(&seq, model.instrumented_links().len()).code(EXIT_IO)?;
        let options = step_options(args.no_refine, args.epsilon.or(config.epsilon));
        let records = closed_loop(&model, &checkpoint.params, &seq, &options)
            .map_err(|e| fail(runtime_exit_code(&e), e))?;
        for record in &records {
            match args.format {
                Format::Csv => {
                    let _ = write!(body, "{}", record.anchor);
                    for j in 0..n {
                        let _ = write!(body, ",{}", record.window.position(0, j));
                    }
                    for j in 0..n {
                        let _ = write!(body, ",{}", record.window.velocity(0, j));
                    }
                    if let Some(h) = args.horizon_dump {
                        for j in 0..n {
                            let _ = write!(body, ",{}", record.window.position(h - 1, j));
                        }
                    }
                    body.push('\n');
                }
                Format::Jsonl => {
                    let positions: Vec<f64> =
                        (0..n).map(|j| record.window.position(0, j)).collect();
                    let velocities: Vec<f64> =
                        (0..n).map(|j| record.window.velocity(0, j)).collect();
                    let mut obj = serde_json::json!({
                        "anchor": record.anchor,
                        "positions": positions,
                        "velocities": velocities,
                    });
                    if let Some(h) = args.horizon_dump {
                        let ahead: Vec<f64> =
                            (0..n).map(|j| record.window.position(h - 1, j)).collect();
                        obj["horizon_step"] = serde_json::json!(h);
                        obj["horizon_positions"] = serde_json::json!(ahead);
                    }
                    if let Some(report) = &record.report {
                        obj["refined_feasible"] = serde_json::json!(report.feasible);
                    }
                    let _ = writeln!(body, "{obj}");
                }
            }
        }
        records_out = records.len();
    }

    match &args.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).code(EXIT_IO)?;
            }
            write_atomic(path, body.as_bytes()).code(EXIT_IO)?;
        }
        None => print!("{body}"),
    }

    let manifest_dir = args
        .out
        .as_deref()
        .and_then(Path::parent)
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let settings = PredictSettings {
        model: model_path.display().to_string(),
        checkpoint: args.checkpoint.display().to_string(),
        input: args.input.display().to_string(),
        format: args.format,
        horizon_dump: args.horizon_dump,
        refined: !args.no_refine,
        epsilon: args.epsilon.or(config.epsilon).unwrap_or(
            kincast_core::runtime::DEFAULT_EPSILON,
        ),
    };
    let outputs: Vec<PathBuf> = args.out.iter().cloned().collect();
    write_manifest(
        &manifest_dir,
        "predict",
        vec![],
        &[model_path, args.checkpoint.clone(), args.input.clone()],
        &outputs,
        settings,
        started,
    )?;
    eprintln!("{records_out} records");
    Ok(())
}
