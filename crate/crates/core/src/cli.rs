//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 on invalid input or usage, 2 when a run
//! fails (I/O, divergence, a gradient check above tolerance).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelmap::LabelMap;
use crate::losses::{max_gradient_error, LossKind};
use crate::manifest::{load_manifest, rare_classes, DEFAULT_RARE_THRESHOLD};
use crate::metrics::{ensemble_mean, iou_report, ConfusionMatrix, ProbMap};
use crate::sampling::{
    adaptive_batch, adaptive_class_probs, build_epoch_plan, AdaptiveConfig, IoUState, RepeatFactorConfig,
    DEFAULT_BATCH_SIZE, DEFAULT_CANDIDATES, DEFAULT_IOU_INIT, DEFAULT_SMOOTHING, DEFAULT_THRESHOLD, ZERO_FREQUENCY_CAP,
};
use crate::synth::{generate_dataset, write_dataset, SynthConfig};
use crate::trainer::{train, Dataset, TrainConfig};

pub const THREADS_ENV: &str = "IMBALANCE_FORGE_THREADS";

const FORMATS: &str = "\
File formats:
  manifest.jsonl   JSON Lines. Line 1 is the header {\"task\", \"classes\": [{\"id\", \"name\", \"group\"}]},
                   each further line one record {\"id\", \"width\", \"height\", \"pixel_counts\": {\"<class>\": n},
                   \"image_path\", \"label_path\"}; paths are relative to the manifest's directory.
  label map .pgm   binary PGM (P5), maxval <= 255, one class id per pixel, 255 = ignore.
  .bin blobs       one JSON header line terminated by '\\n', then raw little-endian f32 values in
                   C order. Features: {\"shape\": [H, W, F]}; probability maps: {\"shape\": [C, H, W]};
                   checkpoints: layer shapes, activation, seeds, config hash, epoch and mIoU.
  plan.jsonl       one {\"epoch\": k, \"record\": \"<id>\"} per line in traversal order.
  trace.jsonl      one adaptive step per line: step, targets, records, probs, ema.
  IoU state .json  {\"ema\": {\"<class>\": v}, \"smoothing\", \"steps\"}.
  report.json      {\"per_class\": {\"<class>\": iou or null}, \"miou\", \"groups\": {\"anatomies\",
                   \"instruments\", \"rare\"}, \"undefined_classes\"}.
  metrics.csv      epoch,lr,train_loss,miou,anat_miou,tool_miou,rare_miou; row 0 is the evaluation
                   before training, empty cells are undefined.
  run.json         provenance written by every subcommand: tool, version, command, arguments,
                   seed and the resolved configuration.

Environment:
  IMBALANCE_FORGE_THREADS  caps the worker threads used for generation, loading and evaluation.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.";

#[derive(Debug, Parser)]
#[command(name = "imbalance-forge", version, about = "Class-imbalance training toolkit for semantic segmentation", after_help = FORMATS)]
struct Cli {
    /// Base seed for every random stream of the subcommand.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory (see each subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic long-tail dataset into --out.
    #[command(after_help = "Reads a SynthConfig JSON file. Writes <out>/manifest.jsonl, <out>/labels/<id>.pgm, \
<out>/features/<id>.bin (header {\"shape\": [H, W, F], \"dtype\": \"f32le\"}) and <out>/run.json. \
--seed replaces the config's seed.")]
    GenSynth(GenSynthArgs),
    /// Write repeat-factor epoch plans as JSON Lines to --out.
    #[command(after_help = "Reads manifest.jsonl. Writes plan.jsonl ({\"epoch\": k, \"record\": \"<id>\"} per line, \
epochs 0..N) and run.json next to it.")]
    PlanEpoch(PlanEpochArgs),
    /// Simulate adaptive batch composition with synthetic IoU feedback.
    #[command(after_help = "Reads manifest.jsonl. Each step composes a batch, then every class present in the batch \
is observed with IoU seen/(seen + kappa), where seen counts sampled images containing the class so far. \
Writes trace.jsonl (step, targets, records, probs before the step, ema after it) to --out, the final IoU state \
JSON to --state-out if given, and run.json next to the trace.")]
    AdaptiveSim(AdaptiveSimArgs),
    /// Compare analytic loss gradients with central finite differences.
    #[command(after_help = "Prints the maximum relative error over random instances (up to 64 pixels, 2-5 classes). \
Exits 2 when it reaches --tol. Writes run.json into --out (default: current directory).")]
    GradCheck(GradCheckArgs),
    /// Evaluate predicted label maps against ground truth.
    #[command(after_help = "For every record of manifest.jsonl reads <gt>/<id>.pgm and <pred>/<id>.pgm, or a \
probability map <pred>/<id>.bin ({\"shape\": [C, H, W]}) reduced by argmax. Writes report.json to --out and \
run.json next to it.")]
    Eval(EvalArgs),
    /// Average probability maps pixelwise.
    #[command(after_help = "Reads probability-map .bin files ({\"shape\": [C, H, W]}, f32le), writes their mean \
to --out in the same format, optionally its argmax as a .pgm label map, and run.json next to it.")]
    Ensemble(EnsembleArgs),
    /// Train the toy per-pixel model and log per-epoch validation metrics.
    #[command(after_help = "Config JSON: {\"data\": {\"manifest\": \"path/manifest.jsonl\"} or {\"synth\": SynthConfig}, \
\"train\": TrainConfig}. Relative manifest paths resolve against the config's directory; a synth block's seed is \
replaced by train.seeds.data. --seed sets all three training seeds. Writes <out>/metrics.csv, <out>/model.bin \
(checkpoint of the best-mIoU epoch), <out>/report.json and <out>/run.json.")]
    TrainToy(TrainToyArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynth(_) => "gen-synth",
            Command::PlanEpoch(_) => "plan-epoch",
            Command::AdaptiveSim(_) => "adaptive-sim",
            Command::GradCheck(_) => "grad-check",
            Command::Eval(_) => "eval",
            Command::Ensemble(_) => "ensemble",
            Command::TrainToy(_) => "train-toy",
        }
    }
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct PlanEpochArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Repeat-factor threshold.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    t: f64,
    /// Number of epochs to plan, starting at epoch 0.
    #[arg(long, default_value_t = 1)]
    epochs: u64,
}

#[derive(Debug, Args, Serialize)]
struct AdaptiveSimArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 100)]
    steps: u64,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_CANDIDATES)]
    candidates: usize,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
    smoothing: f64,
    /// Images after which a class's simulated IoU reaches 0.5.
    #[arg(long, default_value_t = 50.0)]
    kappa: f64,
    #[arg(long)]
    state_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct GradCheckArgs {
    #[arg(long)]
    loss: LossKind,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Instrument classes in fewer than this fraction of records are rare.
    #[arg(long, default_value_t = DEFAULT_RARE_THRESHOLD)]
    rare_threshold: f64,
}

#[derive(Debug, Args, Serialize)]
struct EnsembleArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    labels_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    #[arg(long)]
    config: PathBuf,
}

/// Input file of `train-toy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyRunConfig {
    pub data: DataSource,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Manifest(PathBuf),
    Synth(SynthConfig),
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'a str,
    version: &'a str,
    command: &'a str,
    args: Vec<String>,
    seed: Option<u64>,
    config: serde_json::Value,
}

struct Context {
    seed: Option<u64>,
    out: Option<PathBuf>,
    command: &'static str,
    args: Vec<String>,
}

impl Context {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::validation(format!("{} requires --out", self.command)))
    }

    fn write_run_json(&self, dir: &Path, config: impl Serialize) -> Result<()> {
        let record = RunRecord {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            args: self.args.clone(),
            seed: self.seed,
            config: serde_json::to_value(config)?,
        };
        create_dir(dir)?;
        let path = dir.join("run.json");
        let mut text = serde_json::to_string_pretty(&record)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    if dir.as_os_str().is_empty() {
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parent_dir(file: &Path) -> PathBuf {
    file.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    create_dir(&parent_dir(path))?;
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::validation(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    // the global pool can only be built once per process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .try_init();

    let ctx = Context {
        seed: cli.seed,
        out: cli.out.clone(),
        command: cli.command.name(),
        args: argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
    };
    let result = configure_threads().and_then(|_| dispatch(&ctx, &cli.command));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(ctx: &Context, command: &Command) -> Result<i32> {
    match command {
        Command::GenSynth(a) => gen_synth(ctx, a),
        Command::PlanEpoch(a) => plan_epoch(ctx, a),
        Command::AdaptiveSim(a) => adaptive_sim(ctx, a),
        Command::GradCheck(a) => grad_check(ctx, a),
        Command::Eval(a) => eval(ctx, a),
        Command::Ensemble(a) => ensemble(ctx, a),
        Command::TrainToy(a) => train_toy(ctx, a),
    }
    .map(|()| 0)
    .or_else(|e| match e {
        CommandError::Failed(msg) => {
            eprintln!("{msg}");
            Ok(2)
        }
        CommandError::Lib(e) => Err(e),
    })
}

enum CommandError {
    Lib(Error),
    /// The command ran but its check did not pass.
    Failed(String),
}

impl From<Error> for CommandError {
    fn from(e: Error) -> Self {
        CommandError::Lib(e)
    }
}

impl From<serde_json::Error> for CommandError {
    fn from(e: serde_json::Error) -> Self {
        CommandError::Lib(e.into())
    }
}

type CmdResult = std::result::Result<(), CommandError>;

fn gen_synth(ctx: &Context, args: &GenSynthArgs) -> CmdResult {
    let out = ctx.out()?;
    let mut cfg: SynthConfig = read_json(&args.config)?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let (records, manifest) = generate_dataset(&cfg)?;
    create_dir(out)?;
    write_dataset(out, &records, &manifest)?;
    ctx.write_run_json(out, &cfg)?;
    println!("wrote {} records to {}", manifest.len(), out.display());
    Ok(())
}

fn plan_epoch(ctx: &Context, args: &PlanEpochArgs) -> CmdResult {
    let out = ctx.out()?;
    let rf = RepeatFactorConfig { t: args.t, seed: ctx.seed.unwrap_or(0), zero_frequency_cap: ZERO_FREQUENCY_CAP };
    rf.validate()?;
    let manifest = load_manifest(&args.manifest)?;
    let mut file = create_file(out)?;
    for epoch in 0..args.epochs {
        let plan = build_epoch_plan(&manifest, &rf, epoch)?;
        plan.write_jsonl(&mut file).map_err(|e| Error::io(out, e))?;
        println!("epoch {epoch}: {} entries from {} records", plan.len(), manifest.len());
    }
    file.flush().map_err(|e| Error::io(out, e))?;
    ctx.write_run_json(&parent_dir(out), args)?;
    Ok(())
}

#[derive(Serialize)]
struct TraceLine<'a> {
    step: u64,
    targets: &'a [usize],
    records: Vec<&'a str>,
    probs: Vec<f64>,
    ema: &'a [f64],
}

fn adaptive_sim(ctx: &Context, args: &AdaptiveSimArgs) -> CmdResult {
    let out = ctx.out()?;
    if !(args.kappa > 0.0 && args.kappa.is_finite()) {
        return Err(Error::validation("--kappa must be positive").into());
    }
    if !(args.smoothing > 0.0 && args.smoothing <= 1.0) {
        return Err(Error::validation("--smoothing must be in (0,1]").into());
    }
    let cfg = AdaptiveConfig { batch_size: args.batch_size, candidates_per_slot: args.candidates, seed: ctx.seed.unwrap_or(0) };
    cfg.validate()?;
    let manifest = load_manifest(&args.manifest)?;
    let mut state = IoUState::with_params(manifest.num_classes(), args.smoothing, DEFAULT_IOU_INIT);
    let mut seen = vec![0u64; manifest.num_classes()];
    let mut file = create_file(out)?;
    for step in 0..args.steps {
        let probs = adaptive_class_probs(&state);
        let batch = adaptive_batch(&manifest, &state, &cfg, step)?;
        let mut observed = BTreeMap::new();
        for &r in &batch.records {
            for c in manifest.records[r].present_classes() {
                seen[c] += 1;
                observed.insert(c, 0.0);
            }
        }
        for (&c, v) in observed.iter_mut() {
            *v = seen[c] as f64 / (seen[c] as f64 + args.kappa);
        }
        state.observe(&observed)?;
        let line = TraceLine {
            step,
            targets: &batch.targets,
            records: batch.records.iter().map(|&r| manifest.records[r].record_id.as_str()).collect(),
            probs,
            ema: &state.ema,
        };
        serde_json::to_writer(&mut file, &line)?;
        file.write_all(b"\n").map_err(|e| Error::io(out, e))?;
    }
    file.flush().map_err(|e| Error::io(out, e))?;
    if let Some(path) = &args.state_out {
        create_dir(&parent_dir(path))?;
        std::fs::write(path, state.to_json()?).map_err(|e| Error::io(path, e))?;
    }
    ctx.write_run_json(&parent_dir(out), args)?;
    println!("{} steps; final ema {:?}", args.steps, state.ema);
    Ok(())
}

fn grad_check(ctx: &Context, args: &GradCheckArgs) -> CmdResult {
    let err = max_gradient_error(args.loss, args.trials, args.eps, ctx.seed.unwrap_or(0))?;
    ctx.write_run_json(ctx.out.as_deref().unwrap_or(Path::new(".")), args)?;
    println!("loss {} trials {} eps {:e} max_rel_error {err:e}", args.loss, args.trials, args.eps);
    if err < args.tol {
        Ok(())
    } else {
        Err(CommandError::Failed(format!("max relative error {err:e} reaches tolerance {:e}", args.tol)))
    }
}

fn load_prediction(dir: &Path, id: &str) -> Result<LabelMap> {
    let pgm = dir.join(format!("{id}.pgm"));
    if pgm.exists() {
        return LabelMap::load_pgm(&pgm);
    }
    let bin = dir.join(format!("{id}.bin"));
    if bin.exists() {
        return Ok(ProbMap::load(&bin)?.argmax());
    }
    Err(Error::validation(format!("no prediction {id}.pgm or {id}.bin in {}", dir.display())))
}

fn eval(ctx: &Context, args: &EvalArgs) -> CmdResult {
    let out = ctx.out()?;
    let manifest = load_manifest(&args.manifest)?;
    let rare = rare_classes(&manifest, args.rare_threshold)?;
    let mut cm = ConfusionMatrix::new(manifest.num_classes());
    for record in &manifest.records {
        let gt = LabelMap::load_pgm(&args.gt.join(format!("{}.pgm", record.record_id)))?;
        let pred = load_prediction(&args.pred, &record.record_id)?;
        cm.accumulate(&pred, &gt)?;
    }
    let report = iou_report(&cm, &manifest.task, &rare)?;
    let mut file = create_file(out)?;
    writeln!(file, "{}", report.to_json()?)
        .and_then(|_| file.flush())
        .map_err(|e| Error::io(out, e))?;
    ctx.write_run_json(&parent_dir(out), args)?;
    println!("miou {}", report.miou);
    Ok(())
}

fn ensemble(ctx: &Context, args: &EnsembleArgs) -> CmdResult {
    let out = ctx.out()?;
    let maps = args.inputs.iter().map(|p| ProbMap::load(p)).collect::<Result<Vec<_>>>()?;
    let mean = ensemble_mean(&maps)?;
    create_dir(&parent_dir(out))?;
    mean.save(out)?;
    if let Some(path) = &args.labels_out {
        create_dir(&parent_dir(path))?;
        mean.argmax().save_pgm(path)?;
    }
    ctx.write_run_json(&parent_dir(out), args)?;
    println!("averaged {} maps into {}", maps.len(), out.display());
    Ok(())
}

fn train_toy(ctx: &Context, args: &TrainToyArgs) -> CmdResult {
    let out = ctx.out()?;
    let mut cfg: ToyRunConfig = read_json(&args.config)?;
    if let Some(seed) = ctx.seed {
        cfg.train.seeds.data = seed;
        cfg.train.seeds.model = seed;
        cfg.train.seeds.sampler = seed;
    }
    cfg.train.validate()?;
    let data = match &mut cfg.data {
        DataSource::Synth(synth) => {
            synth.seed = cfg.train.seeds.data;
            let (records, manifest) = generate_dataset(synth)?;
            Dataset::from_synth(records, manifest)?
        }
        DataSource::Manifest(path) => {
            if path.is_relative() {
                *path = parent_dir(&args.config).join(&*path);
            }
            Dataset::load(path)?
        }
    };
    create_dir(out)?;
    let summary = train(&data, &cfg.train, Some(out))?;
    ctx.write_run_json(out, &cfg)?;
    println!(
        "best epoch {} miou {} (rare {})",
        summary.best_epoch,
        summary.best_miou(),
        summary.best_report.groups.rare.map_or("n/a".into(), |v| v.to_string())
    );
    Ok(())
}
