//! `trafficdiff` command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trafficdiff::config::{self, Value};

mod commands;

/// Default output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "TRAFFICDIFF_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "trafficdiff", version, about = "Scene diffusion for multi-agent traffic simulation")]
#[command(args_override_self = true)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Key-value config file; `<subcommand> { flag: value }` blocks set
    /// defaults that explicit flags override.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample scenarios from a synthetic world.
    SynthData(SynthArgs),
    /// Train a denoiser checkpoint on a scenario file.
    Train(TrainArgs),
    /// Scene generation, optionally constrained by a config file.
    Generate(GenerateArgs),
    /// Closed-loop rollouts from each scenario's history.
    Rollout(RolloutArgs),
    /// Log perturbation at a fixed noise level.
    Perturb(PerturbArgs),
    /// Realism metrics of samples against logs.
    Evaluate(EvaluateArgs),
    /// SVG figure of a scenario or a sample.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path (default: a fixed name inside $TRAFFICDIFF_OUT_DIR or the
    /// working directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TemplateArg {
    Straight,
    Curve,
    Intersection,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "straight")]
    template: TemplateArg,
    #[arg(long, default_value_t = 100)]
    scenes: usize,
    #[arg(long, default_value_t = 4)]
    agents: usize,
    /// Agent slots per scene (default: --agents).
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long, default_value_t = 11)]
    history: usize,
    #[arg(long, default_value_t = 80)]
    future: usize,
    /// Per-step position noise in meters.
    #[arg(long)]
    position_std: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    S,
    M,
    L,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Scenario file or directory containing scenarios.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "s")]
    preset: PresetArg,
    #[arg(long, default_value_t = 0.25)]
    width_factor: f64,
    #[arg(long, default_value_t = 2)]
    patch: usize,
    /// History steps of a training window (default: the data's).
    #[arg(long)]
    history: Option<usize>,
    /// Future steps of a training window (default: the data's); shorter
    /// windows are cropped at random offsets.
    #[arg(long)]
    future: Option<usize>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value = "sgd")]
    optimizer: OptimizerArg,
    /// Training loss is printed to stderr every this many steps (0: never).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Trained checkpoint.
    #[arg(long, env = "TRAFFICDIFF_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Scenario file or directory containing scenarios.json.
    #[arg(long)]
    scenario: PathBuf,
    /// Denoising steps per reverse pass.
    #[arg(long, default_value_t = 16)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long, value_enum, default_value = "ancestral")]
    sampler: SamplerArg,
    /// Constraint config (control points and hard constraints).
    #[arg(long)]
    constraints: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ancestral,
    Heun,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Scenegen,
    Bp,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "scenegen")]
    task: TaskArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    OneShot,
    FullAr,
    Amortized,
}

#[derive(Debug, Args)]
struct RolloutArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value = "amortized")]
    mode: ModeArg,
    /// Replan rate for full-ar; must divide 10 Hz into whole steps.
    #[arg(long, default_value_t = 10.0)]
    replan_hz: f64,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelArgs,
    /// Noise level t* in [0, 1].
    #[arg(long)]
    level: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalModeArg {
    Wosac,
    Scenegen,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "wosac")]
    mode: EvalModeArg,
    /// Sample file from rollout, generate or perturb.
    #[arg(long)]
    rollouts: PathBuf,
    /// Logged scenarios the samples were produced from.
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value_t = 128)]
    bins: usize,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    scenario: PathBuf,
    /// Scenario id (default: the first).
    #[arg(long)]
    id: Option<String>,
    /// Sample file; renders one of its samples instead of the log.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Pixels per meter.
    #[arg(long, default_value_t = 4.0)]
    scale: f64,
}

/// Failure with its exit status: 2 for bad input, 1 otherwise.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub code: u8,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self {
            kind: "invalid_argument",
            message: message.into(),
            code: 2,
        }
    }
}

impl From<trafficdiff::Error> for CliError {
    fn from(e: trafficdiff::Error) -> Self {
        use trafficdiff::Error as E;
        let (kind, code) = match &e {
            E::InvalidArgument(_) | E::TooManyComponents { .. } => ("invalid_argument", 2),
            E::Parse { .. } => ("parse", 2),
            E::Io(_) => ("io", 1),
            E::Json(_) => ("json", 1),
            _ => ("runtime", 1),
        };
        Self {
            kind,
            message: e.to_string(),
            code,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            kind: "io",
            message: e.to_string(),
            code: 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

const SUBCOMMANDS: [&str; 7] = ["synth-data", "train", "generate", "rollout", "perturb", "evaluate", "render"];

/// Inserts `--key value` pairs from the config file right after the
/// subcommand name, so flags given on the command line win.
fn expand_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let mut config_path = None;
    let mut sub = None;
    let mut i = 1;
    while i < args.len() {
        let a = args[i].to_string_lossy();
        if a == "--config" || a == "--workers" {
            if a == "--config" {
                config_path = args.get(i + 1).map(PathBuf::from);
            }
            i += 2;
            continue;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(PathBuf::from(p));
        } else if sub.is_none() && SUBCOMMANDS.contains(&a.as_ref()) {
            sub = Some(i);
        }
        i += 1;
    }
    let (Some(path), Some(sub)) = (config_path, sub) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::invalid(format!("cannot read config {}: {e}", path.display())))?;
    let entries = config::parse(&text)?;
    let name = args[sub].to_string_lossy().into_owned();
    let mut extra = Vec::new();
    for e in &entries {
        match &e.value {
            Value::Block(body) if e.key == name => {
                for f in body {
                    let v = f.scalar()?;
                    extra.push(OsString::from(format!("--{}", f.key.replace('_', "-"))));
                    extra.push(OsString::from(v));
                }
            }
            Value::Block(_) if SUBCOMMANDS.contains(&e.key.as_str()) => {}
            Value::Scalar(v) if e.key == "workers" => {
                extra.push(OsString::from("--workers"));
                extra.push(OsString::from(v));
            }
            _ => return Err(e.error(format!("unknown config entry '{}'", e.key)).into()),
        }
    }
    let mut out = args[..=sub].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[sub + 1..]);
    Ok(out)
}

/// `--out` if given, else `name` inside the env output directory or the
/// working directory.
fn output_path(out: &Option<PathBuf>, name: &str) -> PathBuf {
    match out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from(name), |d| Path::new(&d).join(name)),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::invalid("--workers must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::invalid(e.to_string()))?;
    }
    match cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Rollout(a) => commands::rollout(a),
        Command::Perturb(a) => commands::perturb(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Render(a) => commands::render(a),
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return fail(e.kind, &e.message, e.code),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return fail("usage", &e.kind().to_string(), 2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind, &e.message, e.code),
    }
}
