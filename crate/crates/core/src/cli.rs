//! The `tfsep` command line.
//!
//! Every subcommand resolves one JSON configuration from, in order: built-in
//! defaults, `--config <file>`, explicit flags, `--set key=value` overrides
//! and the seed (`--seed`, else `TFSEP_SEED`, else the configured `seed`).
//! Unknown keys are rejected. The resolved configuration is written to
//! `<out>/manifest.json` together with the tool version.
//!
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime
//! failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audio::{load_wav, resample_linear, LogMel, LogMelConfig};
use crate::bundle::Bundle;
use crate::erf::{self, ErfReport, ExportFormat, MassMode};
use crate::error::Error;
use crate::gradcheck::{check_module, GradCheckConfig};
use crate::network::{Ablation, NetConfig, Summary, TfSepNet};
use crate::nn::Mode;
use crate::tensor::{Shape, Tensor};
use crate::train::{
    evaluate, generate_toy_dataset, load_checkpoint, load_wav_folder, save_checkpoint, Dataset, ToyDatasetSpec,
    TrainConfig, Trainer,
};

pub const SEED_ENV: &str = "TFSEP_SEED";

/// Package version plus the `git describe` of the build tree.
pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("TFSEP_GIT_DESCRIBE"));

#[derive(Debug, Parser)]
#[command(name = "tfsep", version = VERSION, about = "Time-frequency separated CNNs for acoustic scene classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Output directory; every file a command writes goes below it
    #[arg(long, global = true, default_value = "tfsep-out")]
    pub out: PathBuf,
    /// Seed for every random component [env: TFSEP_SEED]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file with (part of) the command's configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `train.epochs=5`; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a folder of WAV files to log-mel features.
    Preprocess(PreprocessArgs),
    /// Per-layer shapes, parameters and MACs.
    Summary(SummaryArgs),
    /// Train a network and write a checkpoint and its history.
    Train(TrainArgs),
    /// Accuracy and loss of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Effective receptive field of a network's final feature map.
    Erf(ErfArgs),
    /// Finite-difference check of a whole network's gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory searched recursively for .wav files
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Feature file format
    #[arg(long, value_enum)]
    pub format: Option<FeatureFormat>,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    /// Base channel width
    #[arg(long)]
    pub tau: Option<usize>,
    /// Input shape NxCxFxT
    #[arg(long)]
    pub input: Option<String>,
    /// Comma-separated ablations: no_shuffle, no_freq_path, no_temp_path, no_adaresnorm
    #[arg(long)]
    pub ablate: Option<String>,
    /// Output format
    #[arg(long, value_enum)]
    pub format: Option<SummaryFormat>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Base channel width
    #[arg(long)]
    pub tau: Option<usize>,
    /// `toy` or a directory of class folders with WAV files
    #[arg(long)]
    pub data: Option<String>,
    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Checkpoint file name
    #[arg(long)]
    pub ckpt: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub ckpt: Option<String>,
    /// `toy` or a directory of class folders with WAV files
    #[arg(long)]
    pub data: Option<String>,
}

#[derive(Debug, Args)]
pub struct ErfArgs {
    /// Checkpoint; without it a freshly initialized network is analysed
    #[arg(long)]
    pub ckpt: Option<String>,
    /// Width of the freshly initialized network
    #[arg(long)]
    pub tau: Option<usize>,
    /// `noise`, `toy` or a directory of class folders with WAV files
    #[arg(long)]
    pub data: Option<String>,
    /// Number of inputs the map is averaged over
    #[arg(long)]
    pub samples: Option<usize>,
    /// Comma-separated mass fractions
    #[arg(long)]
    pub thresholds: Option<String>,
    /// Mass of each cell: raw scores or log(1 + score)
    #[arg(long, value_enum)]
    pub mode: Option<MassMode>,
    /// Input shape for `noise` data
    #[arg(long)]
    pub input: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Base channel width
    #[arg(long)]
    pub tau: Option<usize>,
    /// Floating-point precision of the check
    #[arg(long, value_enum)]
    pub precision: Option<Precision>,
    /// Input shape NxCxFxT
    #[arg(long)]
    pub input: Option<String>,
    /// Coordinates checked per parameter tensor and for the input
    #[arg(long)]
    pub samples_per_tensor: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    Bundle,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SummaryFormat {
    Table,
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Double,
}

impl ValueEnum for MassMode {
    fn value_variants<'a>() -> &'a [Self] {
        &[MassMode::Raw, MassMode::Log]
    }
    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            MassMode::Raw => "raw",
            MassMode::Log => "log",
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// `toy`, `noise` (erf only) or a directory.
    pub source: String,
    pub val_fraction: f64,
    pub toy: ToyDatasetSpec,
    pub logmel: LogMelConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: "toy".into(),
            val_fraction: 0.2,
            toy: ToyDatasetSpec::default(),
            logmel: LogMelConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessRun {
    pub seed: u64,
    pub input: String,
    pub format: FeatureFormat,
    pub logmel: LogMelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRun {
    pub seed: u64,
    pub net: NetConfig,
    pub input: String,
    pub format: SummaryFormat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub seed: u64,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub checkpoint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub seed: u64,
    pub checkpoint: String,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErfRun {
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub net: NetConfig,
    pub data: DataConfig,
    pub input: String,
    pub samples: usize,
    pub thresholds: Vec<f64>,
    pub mode: MassMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckRun {
    pub seed: u64,
    pub net: NetConfig,
    pub input: String,
    pub precision: Precision,
    pub samples_per_tensor: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for PreprocessRun {
    fn default() -> Self {
        PreprocessRun {
            seed: 0,
            input: String::new(),
            format: FeatureFormat::Bundle,
            logmel: LogMelConfig::default(),
        }
    }
}

impl Default for SummaryRun {
    fn default() -> Self {
        SummaryRun {
            seed: 0,
            net: NetConfig::new(40),
            input: "1x1x256x64".into(),
            format: SummaryFormat::Table,
        }
    }
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            seed: 0,
            net: NetConfig::new(8),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            checkpoint: "model.tfsb".into(),
        }
    }
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            seed: 0,
            checkpoint: String::new(),
            data: DataConfig::default(),
        }
    }
}

impl Default for ErfRun {
    fn default() -> Self {
        ErfRun {
            seed: 0,
            checkpoint: None,
            net: NetConfig::new(40),
            data: DataConfig {
                source: "noise".into(),
                toy: ToyDatasetSpec {
                    samples_per_class: 4,
                    ..ToyDatasetSpec::default()
                },
                ..DataConfig::default()
            },
            input: "1x1x256x64".into(),
            samples: 32,
            thresholds: erf::DEFAULT_THRESHOLDS.to_vec(),
            mode: MassMode::Raw,
        }
    }
}

impl Default for GradcheckRun {
    fn default() -> Self {
        GradcheckRun {
            seed: 0,
            net: NetConfig::new(8),
            input: "2x1x32x32".into(),
            precision: Precision::Double,
            samples_per_tensor: 4,
            step: GradCheckConfig::default().h,
            tolerance: 1e-5,
        }
    }
}

/// Default configuration of a subcommand, as JSON.
pub fn default_config(command: &str) -> Option<Value> {
    Some(match command {
        "preprocess" => to_value(&PreprocessRun::default()),
        "summary" => to_value(&SummaryRun::default()),
        "train" => to_value(&TrainRun::default()),
        "eval" => to_value(&EvalRun::default()),
        "erf" => to_value(&ErfRun::default()),
        "gradcheck" => to_value(&GradcheckRun::default()),
        _ => return None,
    })
}

/// Dotted paths of every non-object value.
pub fn leaf_keys(v: &Value) -> Vec<String> {
    fn walk(v: &Value, prefix: &str, out: &mut Vec<String>) {
        match v.as_object() {
            Some(o) => {
                for (k, child) in o {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &key, out);
                }
            }
            None => out.push(prefix.to_string()),
        }
    }
    let mut out = Vec::new();
    walk(v, "", &mut out);
    out
}

/// The clap command with each subcommand's configuration keys and
/// defaults appended to its help.
pub fn command() -> clap::Command {
    let mut cmd = <Cli as clap::CommandFactory>::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let defaults = default_config(&name).expect("every subcommand has defaults");
        let mut help = String::from("Configuration keys (--config / --set) and defaults:\n");
        for key in leaf_keys(&defaults) {
            let mut node = &defaults;
            for part in key.split('.') {
                node = &node[part];
            }
            help.push_str(&format!("  {key} = {node}\n"));
        }
        cmd = cmd.mut_subcommand(&name, |s| s.after_help(help));
    }
    cmd
}

/// Failure of one invocation, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flag, key or value: exit 1.
    Usage(String),
    /// Anything that went wrong while running: exit 2.
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Runtime(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let parsed = command()
        .try_get_matches_from(argv)
        .and_then(|m| <Cli as clap::FromArgMatches>::from_arg_matches(&m));
    let cli = match parsed {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.common.verbose);
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

/// Seed from the flag, else the environment, else `None`.
fn cli_seed(flag: Option<u64>) -> CliResult<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Copies `patch` into `base`, refusing keys that `base` does not have.
pub fn merge_strict(base: &mut Value, patch: &Value, path: &str) -> CliResult<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge_strict(slot, v, &key)?,
                    Some(slot) => *slot = v.clone(),
                    None => return Err(usage(format!("unknown configuration key `{key}`"))),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// Sets a dotted key that must already exist. The value is read as JSON
/// and falls back to a plain string.
pub fn set_dotted(root: &mut Value, key: &str, raw: &str) -> CliResult<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| usage(format!("unknown configuration key `{key}`")))?;
    }
    *node = value;
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("configuration serializes")
}

/// Defaults, config file, flags, overrides, seed; then typed parsing.
fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    common: &Common,
    flags: &[(&str, Option<Value>)],
    seed_paths: &[&str],
) -> CliResult<(T, Value)> {
    let mut v = to_value(defaults);
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
        merge_strict(&mut v, &patch, "")?;
    }
    for (key, val) in flags {
        if let Some(val) = val {
            set_dotted(&mut v, key, &val.to_string())?;
        }
    }
    for o in &common.overrides {
        let (k, val) = o
            .split_once('=')
            .ok_or_else(|| usage(format!("--set {o:?}: expected KEY=VALUE")))?;
        set_dotted(&mut v, k.trim(), val.trim())?;
    }
    if let Some(seed) = cli_seed(common.seed)? {
        v["seed"] = json!(seed);
    }
    let seed = v["seed"].clone();
    for p in seed_paths {
        set_dotted(&mut v, p, &seed.to_string())?;
    }
    let typed: T = serde_json::from_value(v).map_err(|e| usage(format!("configuration: {e}")))?;
    let canonical = to_value(&typed);
    Ok((typed, canonical))
}

fn opt<T: Serialize>(v: &Option<T>) -> Option<Value> {
    v.as_ref().map(to_value)
}

fn parse_shape(key: &str, s: &str) -> CliResult<Shape> {
    Shape::parse(s).map_err(|e| usage(format!("{key}: {e}")))
}

fn parse_list(key: &str, s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| usage(format!("{key}: {p:?} is not a number"))))
        .collect()
}

fn runtime<E: Into<Error>>(e: E) -> CliError {
    CliError::Runtime(e.into())
}

fn write_out(out: &Path, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
    let p = out.join(name);
    if let Some(dir) = p.parent() {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    fs::write(&p, bytes).map_err(runtime)?;
    Ok(p)
}

fn write_manifest(out: &Path, command: &str, config: &Value) -> CliResult<()> {
    let m = json!({ "tool": "tfsep", "version": VERSION, "command": command, "config": config });
    let text = serde_json::to_string_pretty(&m).map_err(runtime)? + "\n";
    write_out(out, "manifest.json", text.as_bytes())?;
    Ok(())
}

fn execute(cli: &Cli) -> CliResult<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Preprocess(a) => preprocess(c, a),
        Command::Summary(a) => summary(c, a),
        Command::Train(a) => train(c, a),
        Command::Eval(a) => eval(c, a),
        Command::Erf(a) => erf_cmd(c, a),
        Command::Gradcheck(a) => gradcheck(c, a),
    }
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_wavs(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    Ok(())
}

fn preprocess(c: &Common, a: &PreprocessArgs) -> CliResult<()> {
    let (run, cfg) = resolve(
        &PreprocessRun::default(),
        c,
        &[
            ("input", a.input.as_ref().map(|p| json!(p.display().to_string()))),
            ("format", opt(&a.format)),
        ],
        &[],
    )?;
    if run.input.is_empty() {
        return Err(usage("--in is required"));
    }
    let frontend = LogMel::new(run.logmel)?;
    let root = PathBuf::from(&run.input);
    let mut files = Vec::new();
    collect_wavs(&root, &mut files).map_err(|e| runtime(Error::Invalid(format!("--in {}: {e}", root.display()))))?;
    files.sort();
    if files.is_empty() {
        return Err(runtime(Error::Invalid(format!("no .wav files under {}", root.display()))));
    }
    let mut index = csv::Writer::from_writer(Vec::new());
    index.write_record(["source", "output", "status"]).map_err(|e| runtime(Error::Invalid(e.to_string())))?;
    let mut written = 0;
    for f in &files {
        let rel = f.strip_prefix(&root).unwrap_or(f);
        let ext = match run.format {
            FeatureFormat::Bundle => "tfsb",
            FeatureFormat::Csv => "csv",
        };
        let target = rel.with_extension(ext);
        let result = load_wav(f).and_then(|clip| {
            let clip = if clip.sample_rate == run.logmel.sample_rate {
                clip
            } else {
                resample_linear(&clip, run.logmel.sample_rate)?
            };
            frontend.compute(&clip)
        });
        let status = match result {
            Ok(spec) => {
                let bytes = match run.format {
                    FeatureFormat::Csv => spec.to_csv().into_bytes(),
                    FeatureFormat::Bundle => {
                        let mut b = Bundle::new(json!({
                            "source": rel.display().to_string(),
                            "fingerprint": spec.fingerprint,
                            "logmel": run.logmel,
                        }));
                        b.insert("logmel", &spec.tensor);
                        let mut buf = Vec::new();
                        b.write_to(&mut buf)?;
                        buf
                    }
                };
                write_out(&c.out, &target.display().to_string(), &bytes)?;
                written += 1;
                "ok".to_string()
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", f.display());
                format!("skipped: {e}")
            }
        };
        index
            .write_record([rel.display().to_string(), target.display().to_string(), status])
            .map_err(|e| runtime(Error::Invalid(e.to_string())))?;
    }
    let index = index.into_inner().map_err(|e| runtime(Error::Invalid(e.to_string())))?;
    write_out(&c.out, "index.csv", &index)?;
    write_manifest(&c.out, "preprocess", &cfg)?;
    println!("{written} of {} files written to {}", files.len(), c.out.display());
    Ok(())
}

fn summary(c: &Common, a: &SummaryArgs) -> CliResult<()> {
    let ablation = match &a.ablate {
        Some(s) => Some(Ablation::parse(s).map_err(|e| usage(format!("--ablate: {e}")))?),
        None => None,
    };
    let (run, cfg) = resolve(
        &SummaryRun::default(),
        c,
        &[
            ("net.tau", opt(&a.tau)),
            ("net.ablation", opt(&ablation)),
            ("input", opt(&a.input)),
            ("format", opt(&a.format)),
        ],
        &[],
    )?;
    run.net.validate()?;
    let input = parse_shape("input", &run.input)?;
    let net = TfSepNet::<f32>::new(run.net, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    let s = Summary::of(&net, input)?;
    let (name, text) = match run.format {
        SummaryFormat::Table => ("summary.txt", s.table()),
        SummaryFormat::Csv => ("summary.csv", s.to_csv()?),
        SummaryFormat::Json => ("summary.json", s.to_json()?),
    };
    write_out(&c.out, name, text.as_bytes())?;
    write_manifest(&c.out, "summary", &cfg)?;
    print!("{text}");
    if !text.ends_with('\n') {
        println!();
    }
    Ok(())
}

fn load_dataset(data: &DataConfig) -> CliResult<Dataset> {
    match data.source.as_str() {
        "toy" => Ok(generate_toy_dataset(&data.toy)?),
        "noise" => Err(usage("data.source `noise` is only meaningful for erf")),
        dir => {
            let frontend = LogMel::new(data.logmel)?;
            Ok(load_wav_folder(Path::new(dir), &frontend)?.dataset)
        }
    }
}

fn train(c: &Common, a: &TrainArgs) -> CliResult<()> {
    let (mut run, mut cfg) = resolve(
        &TrainRun::default(),
        c,
        &[
            ("net.tau", opt(&a.tau)),
            ("data.source", opt(&a.data)),
            ("train.epochs", opt(&a.epochs)),
            ("checkpoint", opt(&a.ckpt)),
        ],
        &["train.seed", "data.toy.seed"],
    )?;
    run.net.validate()?;
    run.train.validate()?;
    let data = load_dataset(&run.data)?;
    // The head always matches the data; the manifest records the value used.
    let classes = data.class_names.len();
    if run.net.num_classes != classes {
        log::info!("net.num_classes set to {classes} from the dataset");
        run.net.num_classes = classes;
        cfg["net"]["num_classes"] = json!(classes);
    }
    let (tr, val) = data.split(run.data.val_fraction, run.seed)?;
    let mut model = TfSepNet::<f32>::new(run.net, &mut ChaCha8Rng::seed_from_u64(run.seed))?;
    let mut trainer = Trainer::new(run.train.clone())?;
    let history = trainer.fit(&mut model, &tr, Some(&val))?;
    write_out(&c.out, "history.csv", history.to_csv().as_bytes())?;
    let ckpt = c.out.join(&run.checkpoint);
    if let Some(dir) = ckpt.parent() {
        fs::create_dir_all(dir).map_err(runtime)?;
    }
    save_checkpoint(&ckpt, &model, &trainer, &data.class_names)?;
    write_manifest(&c.out, "train", &cfg)?;
    let last = history.records.last();
    println!(
        "{} epochs, {} steps; final train loss {:.4}; best val acc {}",
        history.records.len(),
        history.steps,
        last.map_or(f64::NAN, |r| r.train_loss),
        history.best_val_acc().map_or("-".into(), |v| format!("{v:.3}"))
    );
    Ok(())
}

fn eval(c: &Common, a: &EvalArgs) -> CliResult<()> {
    let (run, cfg) = resolve(
        &EvalRun::default(),
        c,
        &[("checkpoint", opt(&a.ckpt)), ("data.source", opt(&a.data))],
        &["data.toy.seed"],
    )?;
    if run.checkpoint.is_empty() {
        return Err(usage("--ckpt is required"));
    }
    let ck = load_checkpoint(Path::new(&run.checkpoint))?;
    let data = load_dataset(&run.data)?;
    if data.class_names != ck.meta.class_names {
        return Err(runtime(Error::Invalid(format!(
            "dataset classes {:?} differ from the checkpoint's {:?}",
            data.class_names, ck.meta.class_names
        ))));
    }
    let report = evaluate(&ck.model, &data, 64)?;
    let text = serde_json::to_string_pretty(&report).map_err(runtime)? + "\n";
    write_out(&c.out, "eval.json", text.as_bytes())?;
    write_manifest(&c.out, "eval", &cfg)?;
    println!(
        "accuracy {:.4} ({}/{}), loss {:.4}",
        report.accuracy, report.correct, report.total, report.loss
    );
    Ok(())
}

fn erf_cmd(c: &Common, a: &ErfArgs) -> CliResult<()> {
    let thresholds = match &a.thresholds {
        Some(s) => Some(parse_list("--thresholds", s)?),
        None => None,
    };
    let (run, cfg) = resolve(
        &ErfRun::default(),
        c,
        &[
            ("checkpoint", opt(&a.ckpt)),
            ("net.tau", opt(&a.tau)),
            ("data.source", opt(&a.data)),
            ("samples", opt(&a.samples)),
            ("thresholds", opt(&thresholds)),
            ("mode", opt(&a.mode)),
            ("input", opt(&a.input)),
        ],
        &["data.toy.seed"],
    )?;
    if run.samples == 0 {
        return Err(usage("samples must be positive"));
    }
    if let Some(t) = run.thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(usage(format!("thresholds: {t} not in (0, 1]")));
    }
    let model = match &run.checkpoint {
        Some(p) => load_checkpoint(Path::new(p))?.model,
        None => {
            run.net.validate()?;
            TfSepNet::<f32>::new(run.net, &mut ChaCha8Rng::seed_from_u64(run.seed))?
        }
    };
    let inputs: Vec<Tensor<f32>> = if run.data.source == "noise" {
        let shape = parse_shape("input", &run.input)?;
        erf::noise_inputs(shape, run.samples, run.seed)
    } else {
        let data = load_dataset(&run.data)?;
        data.inputs.into_iter().take(run.samples).collect()
    };
    let map = erf::compute_erf(&model, &inputs)?;
    let report = ErfReport::new(&map, &run.thresholds, run.mode)?;
    fs::create_dir_all(&c.out).map_err(runtime)?;
    erf::export_map(&map, &c.out.join("map.pgm"), ExportFormat::Pgm)?;
    erf::export_map(&map, &c.out.join("map.csv"), ExportFormat::Csv)?;
    let text = serde_json::to_string_pretty(&report).map_err(runtime)? + "\n";
    write_out(&c.out, "report.json", text.as_bytes())?;
    write_manifest(&c.out, "erf", &cfg)?;
    for (t, r) in report.thresholds.iter().zip(&report.ratios) {
        println!("t = {t:.2}: r = {:.2}%", r * 100.0);
    }
    Ok(())
}

fn gradcheck(c: &Common, a: &GradcheckArgs) -> CliResult<()> {
    let (run, cfg) = resolve(
        &GradcheckRun::default(),
        c,
        &[
            ("net.tau", opt(&a.tau)),
            ("precision", opt(&a.precision)),
            ("input", opt(&a.input)),
            ("samples_per_tensor", opt(&a.samples_per_tensor)),
        ],
        &[],
    )?;
    run.net.validate()?;
    let shape = parse_shape("input", &run.input)?;
    run.net.check_input(shape).map_err(|e| usage(format!("input: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut net = TfSepNet::<f64>::new(run.net, &mut rng)?;
    let x = Tensor::<f64>::randn(shape, 1.0, &mut rng);
    let gc = GradCheckConfig {
        h: run.step,
        samples_per_input: Some(run.samples_per_tensor),
        ..GradCheckConfig::default()
    };
    let report = check_module(&mut net, &x, Mode::Train, &gc, &mut rng)?;
    let passed = report.max_rel_error < run.tolerance;
    let out = json!({
        "max_rel_error": report.max_rel_error,
        "checked": report.checked,
        "skipped_kinks": report.skipped_kinks,
        "tolerance": run.tolerance,
        "passed": passed,
    });
    let text = serde_json::to_string_pretty(&out).map_err(runtime)? + "\n";
    write_out(&c.out, "gradcheck.json", text.as_bytes())?;
    write_manifest(&c.out, "gradcheck", &cfg)?;
    println!(
        "max relative error {:.3e} over {} coordinates ({} kinks skipped): {}",
        report.max_rel_error,
        report.checked,
        report.skipped_kinks,
        if passed { "ok" } else { "FAILED" }
    );
    if passed {
        Ok(())
    } else {
        Err(runtime(Error::Invalid(format!(
            "gradient error {:.3e} exceeds tolerance {:.1e}",
            report.max_rel_error, run.tolerance
        ))))
    }
}
