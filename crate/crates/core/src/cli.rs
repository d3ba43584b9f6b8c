//! Command-line front end: `gen-data`, `train`, `eval`, `sweep-k`, `gradcheck`.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_file_name, load_checkpoint, save_checkpoint, Checkpoint};
use crate::data::{generate, load_dataset, save_dataset, split_indices, Dataset, SynthConfig, CLASS_NAMES};
use crate::error::Error;
use crate::metrics::{
    embeddings_csv, evaluate, report_csv, report_table, summarize_weight_trajectory, trace_csv, weight_summary_csv,
    ClassReport, Evaluation,
};
use crate::model::BackboneSpec;
use crate::selfcheck::{autodiff_suite, hypergradient_suite, CaseResult};
use crate::trainer::{
    train, train_ce_baseline, CeStep, EpochEnd, HypergradMode, Method, MosMode, OuterOptimizer, TrainConfig,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CAPACITY: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

pub const RUN_DIR_ENV: &str = "MOW_RUN_DIR";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(Error),
    /// A self-check breached its tolerance.
    Check(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Check(_) => EXIT_NUMERIC,
            CliError::Run(e) => match e {
                Error::Capacity { .. } => EXIT_CAPACITY,
                Error::Format { .. } => EXIT_FORMAT,
                Error::NonFinite(_) | Error::CrossCheck { .. } => EXIT_NUMERIC,
                _ => EXIT_OTHER,
            },
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Check(m) => write!(f, "check failed: {m}"),
            CliError::Run(Error::Capacity {
                class,
                available,
                required,
            }) => write!(
                f,
                "capacity error: class {class} ({}) has {available} eligible samples per target but K = {required}",
                CLASS_NAMES.get(*class).copied().unwrap_or("?")
            ),
            CliError::Run(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mownet", version, about = "Meta ordinal weighting networks on synthetic ordinal data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic ordinal dataset file.
    GenData(GenDataArgs),
    /// Train a backbone (meta-weighted or plain cross-entropy).
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Train over several K values and seeds and report per-K medians.
    SweepK(SweepArgs),
    /// Run the finite-difference and hypergradient self-checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// One count for every class, or three comma-separated counts.
    #[arg(long)]
    pub n_per_class: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub score_noise: Option<f64>,
    #[arg(long)]
    pub feature_noise: Option<f64>,
    #[arg(long)]
    pub overlap: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_hypergrad)]
    pub hypergrad: Option<HypergradMode>,
    #[arg(long, value_parser = parse_outer)]
    pub outer_opt: Option<OuterOptimizer>,
    #[arg(long, value_parser = parse_mos)]
    pub mos: Option<MosMode>,
    /// Comma-separated hidden layer widths of the backbone.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub weightnet_hidden: Option<usize>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub decay_period: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Evaluate both hypergradient forms every iteration and fail on disagreement.
    #[arg(long)]
    pub crosscheck: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Root under which the run directory is created.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long)]
    pub k: Option<usize>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated K values.
    #[arg(long, default_value = "1,5,10")]
    pub k: String,
    /// Number of seeds per K, counting up from `--seed`.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

fn parse_method(s: &str) -> Result<Method, String> {
    match s {
        "mow" => Ok(Method::Mow),
        "ce" => Ok(Method::Ce),
        _ => Err(format!("unknown method {s:?} (expected mow or ce)")),
    }
}

fn parse_hypergrad(s: &str) -> Result<HypergradMode, String> {
    match s {
        "through" => Ok(HypergradMode::Through),
        "decomposed" => Ok(HypergradMode::Decomposed),
        _ => Err(format!("unknown hypergradient mode {s:?} (expected through or decomposed)")),
    }
}

fn parse_outer(s: &str) -> Result<OuterOptimizer, String> {
    match s {
        "sgd" => Ok(OuterOptimizer::Sgd),
        "adam" => Ok(OuterOptimizer::Adam),
        _ => Err(format!("unknown optimizer {s:?} (expected sgd or adam)")),
    }
}

fn parse_mos(s: &str) -> Result<MosMode, String> {
    match s {
        "per-sample" => Ok(MosMode::PerSample),
        "batch" => Ok(MosMode::BatchShared),
        _ => Err(format!("unknown meta-set mode {s:?} (expected per-sample or batch)")),
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

/// Flat `key = value` settings; keys are flag names without the leading dashes.
#[derive(Debug, Default)]
pub struct ConfigFile {
    values: HashMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, allowed: &[&str]) -> CliResult<Self> {
        let mut values = HashMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            let key = k.trim().to_string();
            if !allowed.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("config line {}: unknown key {key:?}", n + 1)));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: Option<&Path>, allowed: &[&str]) -> CliResult<Self> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?;
                ConfigFile::parse(&text, allowed)
            }
        }
    }

    /// Flag value, else file value, else `default`.
    fn pick<T>(&self, flag: Option<T>, key: &str, default: T, parse: impl Fn(&str) -> Result<T, String>) -> CliResult<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(s) => parse(s).map_err(|e| CliError::Usage(format!("config key {key}: {e}"))),
            None => Ok(default),
        }
    }
}

fn from_str<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

const TRAIN_KEYS: &[&str] = &[
    "method",
    "k",
    "alpha",
    "beta",
    "epochs",
    "batch-size",
    "seed",
    "hypergrad",
    "outer-opt",
    "mos",
    "hidden",
    "weightnet-hidden",
    "decay-factor",
    "decay-period",
    "weight-decay",
    "test-fraction",
    "split-seed",
    "crosscheck",
];

const GEN_KEYS: &[&str] = &["seed", "n-per-class", "dim", "score-noise", "feature-noise", "overlap"];

/// Resolve a training configuration: flags over config file over defaults.
pub fn resolve_train_config(method: Option<Method>, k: Option<usize>, flags: &TrainFlags) -> CliResult<TrainConfig> {
    let file = ConfigFile::load(flags.config.as_deref(), TRAIN_KEYS)?;
    let d = TrainConfig::default();
    let hidden = file.pick(
        flags.hidden.as_deref().map(parse_list).transpose().map_err(|e| CliError::Usage(format!("--hidden: {e}")))?,
        "hidden",
        d.hidden_dims.clone(),
        parse_list,
    )?;
    let mut adam = d.adam;
    adam.weight_decay = file.pick(flags.weight_decay, "weight-decay", adam.weight_decay, from_str)?;
    let cfg = TrainConfig {
        method: file.pick(method, "method", d.method, parse_method)?,
        alpha: file.pick(flags.alpha, "alpha", d.alpha, from_str)?,
        beta: file.pick(flags.beta, "beta", d.beta, from_str)?,
        batch_size: file.pick(flags.batch_size, "batch-size", d.batch_size, from_str)?,
        k: file.pick(k, "k", d.k, from_str)?,
        num_classes: d.num_classes,
        epochs: file.pick(flags.epochs, "epochs", d.epochs, from_str)?,
        decay_factor: file.pick(flags.decay_factor, "decay-factor", d.decay_factor, from_str)?,
        decay_period: file.pick(flags.decay_period, "decay-period", d.decay_period, from_str)?,
        adam,
        seed: file.pick(flags.seed, "seed", d.seed, from_str)?,
        mos_mode: file.pick(flags.mos, "mos", d.mos_mode, parse_mos)?,
        hypergrad_mode: file.pick(flags.hypergrad, "hypergrad", d.hypergrad_mode, parse_hypergrad)?,
        outer_optimizer: file.pick(flags.outer_opt, "outer-opt", d.outer_optimizer, parse_outer)?,
        hidden_dims: hidden,
        weightnet_hidden: file.pick(flags.weightnet_hidden, "weightnet-hidden", d.weightnet_hidden, from_str)?,
        test_fraction: file.pick(flags.test_fraction, "test-fraction", d.test_fraction, from_str)?,
        split_seed: file.pick(flags.split_seed, "split-seed", d.split_seed, from_str)?,
        crosscheck: file.pick(flags.crosscheck.then_some(true), "crosscheck", d.crosscheck, from_str)?,
    };
    cfg.validate().map_err(|e| CliError::Usage(format!("invalid training options: {e}")))?;
    if cfg.hidden_dims.contains(&0) {
        return Err(CliError::Usage("--hidden: layer widths must be positive".into()));
    }
    Ok(cfg)
}

pub fn resolve_synth_config(args: &GenDataArgs) -> CliResult<SynthConfig> {
    let file = ConfigFile::load(args.config.as_deref(), GEN_KEYS)?;
    let d = SynthConfig::default();
    let counts = |s: &str| -> Result<Vec<usize>, String> {
        let v: Vec<usize> = parse_list(s)?;
        match v.len() {
            1 => Ok(vec![v[0]; CLASS_NAMES.len()]),
            n if n == CLASS_NAMES.len() => Ok(v),
            n => Err(format!("expected 1 or {} counts, got {n}", CLASS_NAMES.len())),
        }
    };
    let n_per_class = file.pick(
        args.n_per_class
            .as_deref()
            .map(counts)
            .transpose()
            .map_err(|e| CliError::Usage(format!("--n-per-class: {e}")))?,
        "n-per-class",
        d.n_per_class.clone(),
        counts,
    )?;
    if n_per_class.contains(&0) {
        return Err(CliError::Usage("--n-per-class: every class needs at least one sample".into()));
    }
    let cfg = SynthConfig {
        dim: file.pick(args.dim, "dim", d.dim, from_str)?,
        n_per_class,
        centers: d.centers.clone(),
        score_noise: file.pick(args.score_noise, "score-noise", d.score_noise, from_str)?,
        feature_noise: file.pick(args.feature_noise, "feature-noise", d.feature_noise, from_str)?,
        overlap: file.pick(args.overlap, "overlap", d.overlap, from_str)?,
        seed: file.pick(args.seed, "seed", d.seed, from_str)?,
    };
    if cfg.dim == 0 {
        return Err(CliError::Usage("--dim: must be positive".into()));
    }
    for (flag, v) in [
        ("--score-noise", cfg.score_noise),
        ("--feature-noise", cfg.feature_noise),
        ("--overlap", cfg.overlap),
    ] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(CliError::Usage(format!("{flag}: must be positive, got {v}")));
        }
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub mode: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Artifact name to path.
    pub artifacts: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Run(Error::Contract(e.to_string())))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Run(Error::Format {
            offset: 0,
            message: format!("{}: {e}", path.display()),
        }))
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("plain data serializes")
}

fn runs_root(out: Option<&Path>) -> PathBuf {
    match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(RUN_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from),
    }
}

/// Create `root/name`, or `root/name-1`, `root/name-2`, ... if taken.
pub fn create_run_dir(root: &Path, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(root)?;
    for n in 0.. {
        let candidate = if n == 0 {
            root.join(name)
        } else {
            root.join(format!("{name}-{n}"))
        };
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded search")
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Mow => "mow",
        Method::Ce => "ce",
    }
}

fn path_string(p: &Path) -> String {
    p.display().to_string()
}

fn eval_indices(ds: &Dataset, test_fraction: f64, split_seed: u64) -> (Vec<usize>, Vec<usize>) {
    split_indices(ds.len(), test_fraction, split_seed)
}

fn write_reports(dir: &Path, method: &str, eval: &Evaluation, artifacts: &mut BTreeMap<String, String>) -> CliResult<String> {
    let rows = [(method.to_string(), eval.report.clone())];
    let mut text = report_table(&rows, &CLASS_NAMES);
    text.push_str("\nconfusion (rows true, columns predicted)\n");
    for row in eval.confusion.counts() {
        text.push_str(&row.iter().map(|c| format!("{c:>6}")).collect::<String>());
        text.push('\n');
    }
    for (key, name, content) in [
        ("report_txt", "report.txt", text.clone()),
        ("report_csv", "report.csv", report_csv(&rows, &CLASS_NAMES)),
        ("embeddings", "embeddings.csv", embeddings_csv(&eval.embeddings, &eval.labels)?),
    ] {
        let p = dir.join(name);
        fs::write(&p, content)?;
        artifacts.insert(key.to_string(), path_string(&p));
    }
    Ok(text)
}

fn ce_trace_csv(trace: &[CeStep]) -> String {
    let mut s = String::from("iter,epoch,loss\n");
    for t in trace {
        s.push_str(&format!("{},{},{:.17e}\n", t.iteration, t.epoch, t.loss));
    }
    s
}

/// Outcome of one training run kept in memory.
pub struct TrainedRun {
    pub theta: crate::autodiff::ParamSet,
    pub report: ClassReport,
    pub evaluation: Evaluation,
}

/// Train on the training split and evaluate on the held-out split. With
/// `ckpt_dir`, a checkpoint is written after every epoch (and for the
/// initialization as epoch 0).
pub fn train_and_evaluate(
    cfg: &TrainConfig,
    ds: &Dataset,
    ckpt_dir: Option<&Path>,
    traces: Option<&Path>,
) -> CliResult<TrainedRun> {
    let (train_idx, test_idx) = eval_indices(ds, cfg.test_fraction, cfg.split_seed);
    let eval_idx = if test_idx.is_empty() { train_idx.clone() } else { test_idx };
    let mut sink = |e: &EpochEnd<'_>| -> crate::Result<()> {
        if let Some(dir) = ckpt_dir {
            save_checkpoint(
                &dir.join(checkpoint_file_name(e.epoch)),
                &Checkpoint {
                    theta: e.theta.clone(),
                    phi: e.phi.cloned(),
                },
            )?;
        }
        Ok(())
    };
    let theta = match cfg.method {
        Method::Mow => {
            let out = train(cfg, ds, &train_idx, &mut sink)?;
            if let Some(dir) = traces {
                fs::write(dir.join("trace.csv"), trace_csv(&out.trace, cfg.num_classes))?;
                if !out.trace.is_empty() {
                    let summary = summarize_weight_trajectory(&out.trace, 1)?;
                    fs::write(dir.join("weights_by_epoch.csv"), weight_summary_csv(&summary, cfg.num_classes))?;
                }
            }
            out.theta
        }
        Method::Ce => {
            let out = train_ce_baseline(cfg, ds, &train_idx, &mut sink)?;
            if let Some(dir) = traces {
                fs::write(dir.join("trace.csv"), ce_trace_csv(&out.trace))?;
            }
            out.theta
        }
    };
    let spec = cfg.backbone_spec(ds.dim());
    let evaluation = evaluate(&spec, &theta, ds, &eval_idx)?;
    Ok(TrainedRun {
        theta,
        report: evaluation.report.clone(),
        evaluation,
    })
}

fn load_ds(path: &Path) -> CliResult<Dataset> {
    load_dataset(path).map_err(|e| match e {
        Error::Io(io) => CliError::Usage(format!("--dataset {}: {io}", path.display())),
        other => CliError::Run(other.with_context(&path_string(path))),
    })
}

fn cmd_gen_data(args: &GenDataArgs) -> CliResult<()> {
    let started = now_unix();
    let cfg = resolve_synth_config(args)?;
    let ds = generate(&cfg)?;
    save_dataset(&args.out, &ds)?;
    let manifest_path = PathBuf::from(format!("{}.manifest.json", args.out.display()));
    RunManifest {
        command: "gen-data".into(),
        mode: "synthetic".into(),
        seed: cfg.seed,
        config: to_json(&cfg),
        artifacts: BTreeMap::from([("dataset".to_string(), path_string(&args.out))]),
        started_unix: started,
        finished_unix: now_unix(),
    }
    .write(&manifest_path)?;
    println!("wrote {} samples of dimension {} to {}", ds.len(), ds.dim(), args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let started = now_unix();
    let cfg = resolve_train_config(args.method, args.k, &args.flags)?;
    let ds = load_ds(&args.dataset)?;
    let method = method_name(cfg.method);
    let dir = create_run_dir(&runs_root(args.out.as_deref()), &format!("train-{method}-seed{}", cfg.seed))?;
    let run = train_and_evaluate(&cfg, &ds, Some(&dir), Some(&dir))?;
    let mut artifacts = BTreeMap::from([
        ("dataset".to_string(), path_string(&args.dataset)),
        ("trace".to_string(), path_string(&dir.join("trace.csv"))),
        ("final_checkpoint".to_string(), path_string(&dir.join(checkpoint_file_name(cfg.epochs)))),
    ]);
    for e in 0..=cfg.epochs {
        artifacts.insert(format!("checkpoint_{e}"), path_string(&dir.join(checkpoint_file_name(e))));
    }
    if dir.join("weights_by_epoch.csv").exists() {
        artifacts.insert("weights_by_epoch".into(), path_string(&dir.join("weights_by_epoch.csv")));
    }
    let text = write_reports(&dir, method, &run.evaluation, &mut artifacts)?;
    RunManifest {
        command: "train".into(),
        mode: method.into(),
        seed: cfg.seed,
        config: to_json(&cfg),
        artifacts,
        started_unix: started,
        finished_unix: now_unix(),
    }
    .write(&dir.join(MANIFEST_FILE))?;
    print!("{text}");
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let started = now_unix();
    if !(0.0..1.0).contains(&args.test_fraction) {
        return Err(CliError::Usage("--test-fraction: must lie in [0, 1)".into()));
    }
    let ds = load_ds(&args.dataset)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let spec = BackboneSpec::from_params(&ckpt.theta)?;
    if spec.input_dim != ds.dim() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {} features but the dataset has {}",
            spec.input_dim,
            ds.dim()
        )));
    }
    let (train_idx, test_idx) = eval_indices(&ds, args.test_fraction, args.split_seed);
    let eval_idx = if test_idx.is_empty() { train_idx } else { test_idx };
    let evaluation = evaluate(&spec, &ckpt.theta, &ds, &eval_idx)?;
    let method = if ckpt.phi.is_some() { "mow" } else { "ce" };
    let dir = create_run_dir(&runs_root(args.out.as_deref()), &format!("eval-{method}"))?;
    let mut artifacts = BTreeMap::from([
        ("dataset".to_string(), path_string(&args.dataset)),
        ("checkpoint".to_string(), path_string(&args.checkpoint)),
    ]);
    let text = write_reports(&dir, method, &evaluation, &mut artifacts)?;
    RunManifest {
        command: "eval".into(),
        mode: method.into(),
        seed: args.split_seed,
        config: serde_json::json!({
            "test_fraction": args.test_fraction,
            "split_seed": args.split_seed,
            "backbone": to_json(&spec),
        }),
        artifacts,
        started_unix: started,
        finished_unix: now_unix(),
    }
    .write(&dir.join(MANIFEST_FILE))?;
    print!("{text}");
    println!("run directory: {}", dir.display());
    Ok(())
}

/// Median of the defined values, averaging the middle pair for even counts.
pub fn median(values: &[Option<f64>]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().flatten().copied().collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Per-K medians over seeds, in the column layout of `report.csv`.
pub fn sweep_csv(results: &[(usize, Vec<ClassReport>)]) -> String {
    let mut s = String::from("k,runs,accuracy");
    for name in CLASS_NAMES {
        s.push_str(&format!(",{name}_precision,{name}_recall,{name}_f1"));
    }
    s.push('\n');
    let cell = |v: Option<f64>| v.map_or_else(|| crate::metrics::UNDEFINED.to_string(), |x| format!("{x:.17e}"));
    for (k, reports) in results {
        s.push_str(&format!("{k},{}", reports.len()));
        let acc: Vec<_> = reports.iter().map(|r| Some(r.accuracy)).collect();
        s.push_str(&format!(",{}", cell(median(&acc))));
        for c in 0..CLASS_NAMES.len() {
            let col = |f: fn(&crate::metrics::ClassMetrics) -> Option<f64>| {
                median(&reports.iter().map(|r| f(&r.classes[c])).collect::<Vec<_>>())
            };
            s.push_str(&format!(
                ",{},{},{}",
                cell(col(|m| m.precision)),
                cell(col(|m| m.recall)),
                cell(col(|m| m.f1))
            ));
        }
        s.push('\n');
    }
    s
}

fn cmd_sweep_k(args: &SweepArgs) -> CliResult<()> {
    let started = now_unix();
    let ks: Vec<usize> = parse_list(&args.k).map_err(|e| CliError::Usage(format!("--k: {e}")))?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Usage("--k: need one or more positive values".into()));
    }
    if args.seeds == 0 {
        return Err(CliError::Usage("--seeds: must be at least 1".into()));
    }
    let base = resolve_train_config(Some(Method::Mow), None, &args.flags)?;
    let ds = load_ds(&args.dataset)?;
    let dir = create_run_dir(&runs_root(args.out.as_deref()), "sweep-k")?;
    let jobs: Vec<(usize, u64)> = ks
        .iter()
        .flat_map(|&k| (0..args.seeds as u64).map(move |s| (k, base.seed + s)))
        .collect();
    let outcomes: Vec<(usize, u64, CliResult<ClassReport>)> = jobs
        .par_iter()
        .map(|&(k, seed)| {
            let cfg = TrainConfig { k, seed, ..base.clone() };
            let res = (|| {
                let run = train_and_evaluate(&cfg, &ds, None, None)?;
                let sub = dir.join(format!("k{k}-seed{seed}"));
                fs::create_dir(&sub)?;
                fs::write(sub.join("report.csv"), report_csv(&[("mow".into(), run.report.clone())], &CLASS_NAMES))?;
                Ok(run.report)
            })();
            (k, seed, res)
        })
        .collect();

    let mut failures = Vec::new();
    let mut results: Vec<(usize, Vec<ClassReport>)> = ks.iter().map(|&k| (k, Vec::new())).collect();
    for (k, seed, res) in outcomes {
        match res {
            Ok(r) => results.iter_mut().find(|(kk, _)| *kk == k).expect("listed").1.push(r),
            Err(e) => {
                eprintln!("run k={k} seed={seed} failed: {e}");
                failures.push(e);
            }
        }
    }
    let csv = sweep_csv(&results);
    let agg = dir.join("sweep_k.csv");
    fs::write(&agg, &csv)?;
    RunManifest {
        command: "sweep-k".into(),
        mode: "mow".into(),
        seed: base.seed,
        config: serde_json::json!({ "k": ks, "seeds": args.seeds, "train": to_json(&base) }),
        artifacts: BTreeMap::from([
            ("dataset".to_string(), path_string(&args.dataset)),
            ("aggregate".to_string(), path_string(&agg)),
        ]),
        started_unix: started,
        finished_unix: now_unix(),
    }
    .write(&dir.join(MANIFEST_FILE))?;
    print!("{csv}");
    println!("run directory: {}", dir.display());
    match failures.into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CliResult<()> {
    if args.trials == 0 {
        eprintln!("warning: --trials 0, no cases were checked");
        println!("gradcheck: 0 cases, vacuous pass");
        return Ok(());
    }
    let mut cases: Vec<CaseResult> = autodiff_suite(args.trials, args.seed)?;
    cases.extend(hypergradient_suite(args.trials, args.seed.wrapping_add(1), args.inject_sign_flip)?);
    let mut failed = 0;
    for c in &cases {
        if !c.passed() {
            failed += 1;
            println!(
                "FAIL {} case {}: relative error {:.3e} > {:.0e}",
                c.suite, c.case, c.rel_error, c.tolerance
            );
        }
    }
    let mut suites: Vec<&str> = cases.iter().map(|c| c.suite).collect();
    suites.dedup();
    for s in suites {
        let worst = cases
            .iter()
            .filter(|c| c.suite == s)
            .fold(0.0f64, |m, c| m.max(c.rel_error));
        println!("{s}: worst relative error {worst:.3e}");
    }
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} cases exceeded tolerance", cases.len())));
    }
    println!("gradcheck: all {} cases passed", cases.len());
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::SweepK(a) => cmd_sweep_k(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

/// Parse arguments, run, and return the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
