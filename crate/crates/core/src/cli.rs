//! The `laffnet` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error,
//! 3 verification failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::blocks::Gate;
use crate::checkpoint::Checkpoint;
use crate::error::LaffError;
use crate::gradcheck::{self, GradcheckConfig, Suite};
use crate::image_io::Image;
use crate::metrics::{self, MetricsConfig};
use crate::model::{FusionVariant, LaffNetModel, ModelConfig};
use crate::synth::{self, CleanSource, DepthMode, PairLayout, SynthConfig};
use crate::trainer::{self, RunOptions, TrainConfig, TrainState, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// `HxW`, or a single number for a square size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Resolution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parse = |p: &str| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| format!("invalid resolution {s:?}, expected HxW such as 256x256"))
        };
        match s.split_once(['x', 'X']) {
            Some((h, w)) => Ok(Self {
                height: parse(h)?,
                width: parse(w)?,
            }),
            None => {
                let n = parse(s)?;
                Ok(Self { height: n, width: n })
            }
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "laffnet", version, about = "Lightweight adaptive-feature-fusion underwater image enhancement")]
#[command(after_help = "Log verbosity follows RUST_LOG; LAFF_THREADS caps the worker pool.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the itemized parameter and FLOP ledger.
    Analyze(AnalyzeArgs),
    /// Generate a paired dataset with the underwater formation model.
    Synth(SynthArgs),
    /// Train a model on a paired dataset.
    Train(TrainArgs),
    /// Enhance an image or every image in a folder.
    Enhance(EnhanceArgs),
    /// Score images with PSNR, SSIM and the UIQM family.
    Eval(EvalArgs),
    /// Run finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    #[arg(long, default_value = "256x256")]
    pub resolution: Resolution,
    #[arg(long, default_value = "sigmoid")]
    pub gate: Gate,
    #[arg(long, default_value = "aff", value_parser = parse_variant)]
    pub variant: FusionVariant,
    /// Emit JSON instead of the text ledger.
    #[arg(long)]
    pub json: bool,
}

fn parse_variant(s: &str) -> Result<FusionVariant, String> {
    match s {
        "aff" => Ok(FusionVariant::Aff),
        "vanilla" => Ok(FusionVariant::Vanilla),
        _ => Err(format!("unknown variant {s:?}, expected aff or vanilla")),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: Option<usize>,
    /// Image size, `HxW` or a single edge length.
    #[arg(long)]
    pub size: Option<Resolution>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Folder of clean images; procedural scenes when omitted.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Depth varies linearly down each image.
    #[arg(long)]
    pub ramp: bool,
    /// TOML or JSON file with synthesis settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `ranges.z=[0.0,0.0]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Output folder for `model.laff` and `train.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from this checkpoint (optimizer state included).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Start from a model checkpoint with fresh optimizer state.
    #[arg(long, conflicts_with = "resume")]
    pub init: Option<PathBuf>,
    /// Validation dataset root; the training set when omitted.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value = "split-dirs", value_parser = parse_layout)]
    pub layout: PairLayout,
    /// Resize on load.
    #[arg(long)]
    pub size: Option<Resolution>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn parse_layout(s: &str) -> Result<PairLayout, String> {
    match s {
        "split-dirs" => Ok(PairLayout::split_dirs()),
        "flat-pairs" => Ok(PairLayout::flat_pairs()),
        _ => Err(format!("unknown layout {s:?}, expected split-dirs or flat-pairs")),
    }
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// An image file or a folder of images.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output file (for a file input) or folder.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("mode").required(true).args(["pairs", "enhanced"])))]
pub struct EvalArgs {
    /// Dataset root in split-dirs layout; scores the degraded side against the clean side.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long, requires = "rmode")]
    pub enhanced: Option<PathBuf>,
    #[arg(long, group = "rmode")]
    pub reference: Option<PathBuf>,
    /// UIQM-family columns only.
    #[arg(long, group = "rmode")]
    pub no_reference: bool,
    /// JSON report path; a `.txt` table is written next to it.
    #[arg(long)]
    pub report: PathBuf,
    /// TOML or JSON file with metric constants.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// ops, aff, residual, losses, network or all.
    #[arg(long, default_value = "all")]
    pub module: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(LaffError),
    Verification(String),
}

impl From<LaffError> for CliError {
    fn from(e: LaffError) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Verification(_) => EXIT_VERIFY,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

type CliResult = Result<(), CliError>;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "laffnet: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> CliResult {
    crate::configure_threads_from_env();
    match cli.command {
        Command::Analyze(a) => cmd_analyze(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Enhance(a) => cmd_enhance(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    }
}

/// Reads a TOML or JSON file (by extension) into a JSON value.
pub fn read_config_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
    if is_json {
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    } else {
        let v: toml::Value = toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::to_value(v).map_err(|e| CliError::Usage(e.to_string()))
    }
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON, falling back to a string.
fn apply_override(target: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not KEY=VALUE")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut patch = value;
    for part in key.split('.').rev() {
        let mut m = serde_json::Map::new();
        m.insert(part.to_string(), patch);
        patch = Value::Object(m);
    }
    merge(target, patch);
    Ok(())
}

/// Default < config file < `--set` overrides. Flags are applied by callers.
fn layered<T>(defaults: &T, file: Option<&Path>, overrides: &[String]) -> Result<T, CliError>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let mut v = serde_json::to_value(defaults).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(p) = file {
        merge(&mut v, read_config_file(p)?);
    }
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))
}

fn cmd_analyze(a: AnalyzeArgs, out: &mut dyn Write) -> CliResult {
    if a.width == 0 {
        return Err(CliError::Usage("--width must be >= 1".into()));
    }
    let cfg = ModelConfig {
        width: a.width,
        gate: a.gate,
        variant: a.variant,
        skip_connections: true,
    };
    let model = LaffNetModel::<f32>::build(cfg, 0)?;
    let report = model.count_flops(a.resolution.height, a.resolution.width);
    if a.json {
        let mut v = serde_json::to_value(&report).map_err(LaffError::from)?;
        let (conv, ratio) = report.nearest_convention();
        v["gmacs"] = report.gmacs().into();
        v["gflops_2x"] = report.gflops_2x().into();
        v["reference_params"] = crate::model::REFERENCE_PARAMS.into();
        v["reference_gflops"] = crate::model::REFERENCE_GFLOPS.into();
        v["param_delta"] = report.param_delta().into();
        v["nearest_convention"] = serde_json::to_value(conv).map_err(LaffError::from)?;
        v["nearest_ratio"] = ratio.into();
        writeln!(out, "{}", serde_json::to_string_pretty(&v).map_err(LaffError::from)?)?;
    } else {
        write!(out, "{}", report.to_text())?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg: SynthConfig = layered(&SynthConfig::default(), a.config.as_deref(), &a.overrides)?;
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(s) = a.size {
        cfg.height = s.height;
        cfg.width = s.width;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.ramp {
        cfg.ranges.depth_mode = DepthMode::VerticalRamp;
    }
    if cfg.n == 0 {
        return Err(CliError::Usage("--n must be >= 1".into()));
    }
    let source = match a.source {
        Some(dir) => CleanSource::Folder(dir),
        None => CleanSource::Procedural,
    };
    log::info!("effective synth config: {}", serde_json::to_string(&cfg).unwrap_or_default());
    let samples = synth::synth_dataset(&cfg, &source, Some(&a.out))?;
    let clamped = samples.iter().filter(|s| s.record.clamp_fraction > 0.0).count();
    writeln!(
        out,
        "wrote {} pairs ({}x{}) to {} ({} with clamping)",
        samples.len(),
        cfg.height,
        cfg.width,
        a.out.display(),
        clamped
    )?;
    Ok(())
}

pub const MODEL_FILE: &str = "model.laff";
pub const LOG_FILE: &str = "train.jsonl";

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    // a resumed run layers the file, overrides and flags over its stored configuration
    let resumed = match &a.resume {
        Some(p) => Some(Checkpoint::read(p)?),
        None => None,
    };
    let base = match &resumed {
        Some(ck) => {
            let state = ck
                .manifest
                .train_state
                .as_ref()
                .ok_or_else(|| LaffError::State(format!("{} holds no training state", a.resume.as_ref().unwrap().display())))?;
            serde_json::from_value::<TrainState>(state.clone()).map_err(LaffError::from)?.config
        }
        None => TrainConfig::default(),
    };
    let mut cfg: TrainConfig = layered(&base, a.config.as_deref(), &a.overrides)?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.initial_lr = v;
    }
    if let Some(v) = a.width {
        cfg.model.width = v;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let size = a.size.map(|r| (r.width, r.height));
    let (train, report) = synth::ingest_pairs(&a.data, &a.layout, size)?;
    if !report.is_clean() {
        writeln!(out, "dataset warnings: {}", serde_json::to_string(&report).map_err(LaffError::from)?)?;
    }
    let val = match &a.val {
        Some(v) => Some(synth::ingest_pairs(v, &a.layout, size)?.0),
        None => None,
    };

    let mut t = match (resumed, &a.init) {
        (Some(ck), _) => Trainer::resume(&ck, Some(cfg))?,
        (None, Some(init)) => Trainer::with_model(LaffNetModel::<f32>::load(init)?, cfg)?,
        (None, None) => Trainer::new(cfg)?,
    };

    std::fs::create_dir_all(&a.out)?;
    let log_path = a.out.join(LOG_FILE);
    {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
        let echo = serde_json::json!({ "config": t.cfg, "resume_step": t.step });
        writeln!(f, "{echo}")?;
    }
    let opts = RunOptions {
        log: Some(log_path.clone()),
        checkpoint: Some(a.out.join(MODEL_FILE)),
    };
    let summary = t.run(&train, val.as_deref(), &opts)?;
    let final_eval = trainer::evaluate(&t.model, val.as_deref().unwrap_or(&train), &MetricsConfig::default())?;
    let last = summary.steps.last();
    writeln!(
        out,
        "trained to step {} ({} steps this run); last loss {}",
        summary.final_step,
        summary.steps.len(),
        last.map_or("n/a".to_string(), |r| format!("{:.5} (charbonnier {:.5})", r.loss_total, r.loss_cha))
    )?;
    for k in ["psnr", "ssim", "uiqm"] {
        if let Some(s) = final_eval.summary.get(k) {
            writeln!(out, "val {k}: {:.4} ± {:.4}", s.mean, s.std)?;
        }
    }
    writeln!(out, "checkpoint: {}", a.out.join(MODEL_FILE).display())?;
    Ok(())
}

fn cmd_enhance(a: EnhanceArgs, out: &mut dyn Write) -> CliResult {
    let model = LaffNetModel::<f32>::load(&a.model)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        if a.out.exists() && !a.out.is_dir() {
            return Err(CliError::Usage(format!("{} is not a folder", a.out.display())));
        }
        metrics::list_images(&a.input)?
            .into_iter()
            .map(|p| {
                let name = p.file_name().unwrap().to_owned();
                (p, a.out.join(name))
            })
            .collect()
    } else if a.input.is_file() {
        let dst = if a.out.is_dir() {
            a.out.join(a.input.file_name().unwrap())
        } else {
            a.out.clone()
        };
        vec![(a.input.clone(), dst)]
    } else {
        return Err(CliError::Runtime(LaffError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", a.input.display()),
        ))));
    };
    let mut written = 0;
    for (src, dst) in &jobs {
        if src == dst {
            return Err(CliError::Usage(format!("refusing to overwrite input {}", src.display())));
        }
        let img = match Image::load(src) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping {}: {e}", src.display());
                continue;
            }
        };
        let enhanced = model.enhance(&img.to_tensor())?;
        Image::from_tensor(&enhanced, 0)?.save(dst)?;
        written += 1;
    }
    writeln!(out, "enhanced {written} of {} images into {}", jobs.len(), a.out.display())?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let cfg: MetricsConfig = layered(&MetricsConfig::default(), a.config.as_deref(), &[])?;
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (report, pairing) = if let Some(root) = &a.pairs {
        metrics::evaluate_folder(&root.join(synth::DEGRADED_DIR), Some(&root.join(synth::CLEAN_DIR)), &cfg)?
    } else {
        let enhanced = a.enhanced.as_ref().expect("clap enforces the mode group");
        let reference = if a.no_reference { None } else { a.reference.as_deref() };
        metrics::evaluate_folder(enhanced, reference, &cfg)?
    };
    if !pairing.is_clean() {
        let list = pairing
            .missing_reference
            .iter()
            .map(|n| format!("no reference for {n}"))
            .chain(pairing.missing_enhanced.iter().map(|n| format!("no enhanced image for {n}")))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(CliError::Runtime(LaffError::Dataset(format!("pair counts differ: {list}"))));
    }
    let text_path = report.write(&a.report)?;
    write!(out, "{}", report.to_text())?;
    writeln!(out, "report: {} and {}", a.report.display(), text_path.display())?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> CliResult {
    let cfg = GradcheckConfig {
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    let report = if a.module == "all" {
        gradcheck::run_all(&cfg)?
    } else {
        let suite: Suite = a.module.parse().map_err(|e: LaffError| CliError::Usage(e.to_string()))?;
        gradcheck::run_suite(suite, &cfg)?
    };
    write!(out, "{}", report.to_text())?;
    if report.all_passed() {
        writeln!(out, "all {} items passed", report.rows.len())?;
        Ok(())
    } else {
        let failed: Vec<String> = report
            .rows
            .iter()
            .filter(|r| !r.passed)
            .map(|r| format!("{}:{} ({:.3e})", r.suite, r.item, r.max_rel_err))
            .collect();
        Err(CliError::Verification(format!("{} items failed: {}", failed.len(), failed.join(", "))))
    }
}
