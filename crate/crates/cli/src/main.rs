//! `skood`: generate synthetic skeleton data, train, evaluate, and detect.

mod settings;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::{json, Value};

use skeleton_ood::checkpoint::{load_checkpoint, save_checkpoint};
use skeleton_ood::data::{generate_synthetic, load_dataset, save_dataset, split, Dataset, SkeletonSequence, SplitSpec, SyntheticConfig};
use skeleton_ood::energy::{EnergyConfig, Verdict};
use skeleton_ood::fusion::{AshConfig, AshStrategy};
use skeleton_ood::graph::JointHierarchy;
use skeleton_ood::metrics::{histogram, ScoredSample, DEFAULT_BINS};
use skeleton_ood::model::{InferenceOptions, Model, ScoreKind, EVAL_CHUNK};
use skeleton_ood::training::{self, score_samples, summarize, EvalMode, EvalOptions, LossKind, Preset, TrainConfig};
use skeleton_ood::Error;

use settings::Settings;

#[derive(Parser)]
#[command(name = "skood", version, about = "Skeleton action recognition with out-of-distribution detection")]
struct Cli {
    /// key=value file supplying defaults for any long flag of the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for evaluation; results are bitwise reproducible only at 1.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its four splits.
    Generate(GenerateArgs),
    /// Train a model on a training split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split.
    Eval(EvalArgs),
    /// Per-sample verdicts as JSON lines.
    Detect(DetectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    unseen: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `toy11`, `ntu25`, or a hierarchy file.
    #[arg(long)]
    skeleton: Option<String>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory written by `generate`, or a training split file.
    #[arg(long)]
    data: PathBuf,
    /// Validation split; defaults to `val.skds` beside a generated training split.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// p, b, s, or off.
    #[arg(long)]
    ash: Option<String>,
    #[arg(long)]
    prune_pct: Option<f64>,
    /// on or off.
    #[arg(long)]
    fusion: Option<String>,
    /// energy or ce.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    extra_dims: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    /// desk or full.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    quantile: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: PathBuf,
    /// mix or id_only.
    #[arg(long)]
    mode: Option<String>,
    /// energy or msp.
    #[arg(long)]
    score: Option<String>,
    /// Clamp pooled features at this value before the head.
    #[arg(long)]
    react: Option<f64>,
    #[arg(long)]
    mask_pct: Option<f64>,
    #[arg(long)]
    mask_seed: Option<u64>,
    /// Histogram CSV path; per-sample scores go to `<stem>.scores.csv` beside it.
    #[arg(long)]
    export_hist: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
    /// Directory for `report.json` and the manifest; the report is always printed.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// JSON-lines output file; standard output when absent.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

/// Failure with its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 2,
            Error::Parse(_) | Error::Io(_) | Error::Json(_) => 3,
            _ => 4,
        };
        Self { code, message: e.to_string() }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    if cli.threads > 1 {
        eprintln!("warning: with --threads > 1 outputs are not guaranteed to be bitwise reproducible");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let file = match &cli.config {
        Some(p) => settings::parse_file(p)?,
        None => Default::default(),
    };
    match cli.command {
        Command::Generate(a) => generate(a, Settings::new(file, "generate")?, cli.threads),
        Command::Train(a) => train(a, Settings::new(file, "train")?, cli.threads),
        Command::Eval(a) => eval(a, Settings::new(file, "eval")?, cli.threads),
        Command::Detect(a) => detect(a, Settings::new(file, "detect")?, cli.threads),
    }
}

fn default_seed() -> CliResult<u64> {
    match std::env::var("SKOD_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("SKOD_SEED must be an unsigned integer, got `{s}`"))),
        Err(_) => Ok(0),
    }
}

fn write_manifest(dir: &Path, name: &str, command: &str, config: Value, inputs: Value, outputs: Value, seed: Option<u64>, threads: usize) -> CliResult<()> {
    let manifest = json!({
        "tool": "skood",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "seed": seed,
        "threads": threads,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
    });
    let mut text = serde_json::to_string_pretty(&manifest).map_err(Error::from)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn hierarchy(spec: &str) -> CliResult<JointHierarchy> {
    match spec {
        "toy11" => Ok(JointHierarchy::toy11()),
        "ntu25" => Ok(JointHierarchy::ntu25()),
        path => JointHierarchy::load(Path::new(path)).map_err(|e| Failure { code: 3, message: e.to_string() }),
    }
}

fn generate(a: GenerateArgs, mut s: Settings, threads: usize) -> CliResult<()> {
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        classes: s.get("classes", a.classes, d.classes)?,
        per_class: s.get("per-class", a.per_class, d.per_class)?,
        frames: s.get("frames", a.frames, d.frames)?,
        subjects: s.get("subjects", a.subjects, d.subjects)?,
        sigma: s.get("sigma", a.sigma, d.sigma)?,
        seed: s.get("seed", a.seed, default_seed()?)?,
    };
    let unseen = s.get("unseen", a.unseen, 2usize)?;
    let skeleton: String = s.get("skeleton", a.skeleton, "toy11".to_string())?;
    s.finish()?;
    if unseen >= cfg.classes {
        return Err(Failure::usage(format!(
            "--unseen {unseen} with --classes {} leaves no seen class",
            cfg.classes
        )));
    }
    let h = hierarchy(&skeleton)?;
    let data = generate_synthetic(&cfg, &h)?;
    let spec = SplitSpec::random(cfg.classes, unseen, cfg.seed)?;
    let splits = split(&data, &spec)?;
    fs::create_dir_all(&a.out)?;
    let mut outputs = serde_json::Map::new();
    for (name, ds) in splits.named() {
        let file = format!("{name}.skds");
        save_dataset(ds, &a.out.join(&file))?;
        outputs.insert(name.to_string(), json!(file));
    }
    let config = json!({
        "generator": cfg,
        "unseen": unseen,
        "skeleton": skeleton,
        "split": spec,
    });
    write_manifest(&a.out, "manifest.json", "generate", config, json!({}), Value::Object(outputs), Some(cfg.seed), threads)
}

fn resolve_split(data: &Path) -> (PathBuf, Option<PathBuf>) {
    if data.is_dir() {
        let val = data.join("val.skds");
        (data.join("train.skds"), val.exists().then_some(val))
    } else {
        (data.to_path_buf(), None)
    }
}

fn train(a: TrainArgs, mut s: Settings, threads: usize) -> CliResult<()> {
    let d = TrainConfig::default();
    let preset = match s.get("preset", a.preset, "desk".to_string())?.as_str() {
        "desk" => Preset::Desk,
        "full" => Preset::Full,
        other => return Err(Failure::usage(format!("--preset must be desk or full, got `{other}`"))),
    };
    let base = if preset == Preset::Full { TrainConfig::full_scale() } else { d };
    let ash_kind: String = s.get("ash", a.ash, "p".to_string())?;
    let prune = s.get("prune-pct", a.prune_pct, AshConfig::default().percentile)?;
    let ash = match ash_kind.as_str() {
        "off" => None,
        k => Some(AshConfig {
            strategy: k
                .parse::<AshStrategy>()
                .map_err(|_| Failure::usage(format!("--ash must be p, b, s, or off, got `{k}`")))?,
            percentile: prune,
        }),
    };
    let fusion = match s.get("fusion", a.fusion, "on".to_string())?.as_str() {
        "on" => true,
        "off" => false,
        other => return Err(Failure::usage(format!("--fusion must be on or off, got `{other}`"))),
    };
    let loss = match s.get("loss", a.loss, "energy".to_string())?.as_str() {
        "energy" => LossKind::Energy,
        "ce" => LossKind::Ce,
        other => return Err(Failure::usage(format!("--loss must be energy or ce, got `{other}`"))),
    };
    let e = EnergyConfig::default();
    let config = TrainConfig {
        learning_rate: s.get("lr", a.lr, base.learning_rate)?,
        momentum: s.get("momentum", a.momentum, base.momentum)?,
        weight_decay: s.get("weight-decay", a.weight_decay, base.weight_decay)?,
        batch_size: s.get("batch-size", a.batch_size, base.batch_size)?,
        epochs: s.get("epochs", a.epochs, base.epochs)?,
        warmup_epochs: s.get("warmup", a.warmup, base.warmup_epochs)?,
        seed: s.get("seed", a.seed, default_seed()?)?,
        ash,
        fusion,
        loss,
        extra_dims: s.get("extra-dims", a.extra_dims, base.extra_dims)?,
        dropout: s.get("dropout", a.dropout, base.dropout)?,
        mlp_hidden: s.get("mlp-hidden", a.mlp_hidden, base.mlp_hidden)?,
        preset,
        energy: EnergyConfig {
            alpha: s.get("alpha", a.alpha, e.alpha)?,
            margin: s.get("margin", a.margin, e.margin)?,
            quantile: s.get("quantile", a.quantile, e.quantile)?,
            ..e
        },
    };
    s.finish()?;
    config.validate()?;

    let (train_path, default_val) = resolve_split(&a.data);
    let val_path = a.val.clone().or(default_val);
    let train_data = load_dataset(&train_path)?;
    let val_data = val_path.as_deref().map(load_dataset).transpose()?;
    fs::create_dir_all(&a.out)?;
    let mut log = BufWriter::new(File::create(a.out.join("train_log.jsonl"))?);
    let mut log_err = None;
    let outcome = training::train(&train_data, val_data.as_ref(), &config, |r| {
        let line = serde_json::to_string(r).expect("epoch records serialize");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
        eprintln!("{line}");
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    log.flush()?;
    save_checkpoint(&outcome.model, &a.out.join("model.skod"))?;
    let inputs = json!({
        "train": path_str(&train_path),
        "val": val_path.as_deref().map(path_str),
    });
    let outputs = json!({ "checkpoint": "model.skod", "log": "train_log.jsonl", "tau": outcome.model.detector.tau });
    write_manifest(&a.out, "manifest.json", "train", serde_json::to_value(&config).map_err(Error::from)?, inputs, outputs, Some(config.seed), threads)
}

/// Scores chunks in parallel; the order of the result matches `seqs`.
fn parallel_scores(model: &Model, seqs: &[&SkeletonSequence], options: &EvalOptions) -> CliResult<Vec<ScoredSample>> {
    let chunks: Vec<(usize, &[&SkeletonSequence])> = seqs
        .chunks(EVAL_CHUNK)
        .enumerate()
        .map(|(i, c)| (i * EVAL_CHUNK, c))
        .collect();
    let parts = chunks
        .par_iter()
        .map(|&(offset, chunk)| {
            let opts = EvalOptions {
                mask_seed: options.mask_seed.wrapping_add(offset as u64),
                ..*options
            };
            score_samples(model, chunk, &opts)
        })
        .collect::<Result<Vec<_>, Error>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn eval(a: EvalArgs, mut s: Settings, threads: usize) -> CliResult<()> {
    let mode = match s.get("mode", a.mode, "mix".to_string())?.as_str() {
        "mix" => EvalMode::Mix,
        "id_only" => EvalMode::IdOnly,
        other => return Err(Failure::usage(format!("--mode must be mix or id_only, got `{other}`"))),
    };
    let score = match s.get("score", a.score, "energy".to_string())?.as_str() {
        "energy" => ScoreKind::Energy,
        "msp" => ScoreKind::Msp,
        other => return Err(Failure::usage(format!("--score must be energy or msp, got `{other}`"))),
    };
    let react: Option<f64> = s.get_opt("react", a.react)?;
    let mask_pct: Option<f64> = s.get_opt("mask-pct", a.mask_pct)?;
    let mask_seed = s.get("mask-seed", a.mask_seed, default_seed()?)?;
    let bins = s.get("bins", a.bins, DEFAULT_BINS)?;
    let export: Option<PathBuf> = s.get_opt("export-hist", a.export_hist)?;
    s.finish()?;
    if let Some(p) = mask_pct {
        if !(0.0..100.0).contains(&p) {
            return Err(Failure::usage(format!("--mask-pct must lie in [0, 100), got {p}")));
        }
    }
    if bins == 0 {
        return Err(Failure::usage("--bins must be positive"));
    }
    let options = EvalOptions {
        inference: InferenceOptions { score, react },
        mask_pct,
        mask_seed,
    };

    let model = load_checkpoint(&a.checkpoint)?;
    let tau = model.detector.tau()?;
    let data = load_dataset(&a.split)?;
    if data.is_empty() {
        return Err(Error::Protocol("evaluation split is empty".into()).into());
    }
    let seqs: Vec<&SkeletonSequence> = data.sequences.iter().collect();
    let samples = parallel_scores(&model, &seqs, &options)?;
    if let Some(path) = &export {
        export_histogram(path, &data, &samples, mode, bins)?;
    }
    let evaluation = summarize(samples, mode, tau)?;
    let report = serde_json::to_string_pretty(&evaluation.report).map_err(Error::from)?;
    println!("{report}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), format!("{report}\n"))?;
        let config = json!({
            "mode": mode,
            "options": options,
            "bins": bins,
            "export_hist": export.as_deref().map(path_str),
        });
        let inputs = json!({ "checkpoint": path_str(&a.checkpoint), "split": path_str(&a.split) });
        write_manifest(dir, "manifest.json", "eval", config, inputs, json!({ "report": "report.json" }), Some(mask_seed), threads)?;
    }
    Ok(())
}

fn scores_path(hist: &Path) -> PathBuf {
    let stem = hist.file_stem().map_or("hist".into(), |s| s.to_string_lossy().into_owned());
    hist.with_file_name(format!("{stem}.scores.csv"))
}

fn export_histogram(path: &Path, data: &Dataset, samples: &[ScoredSample], mode: EvalMode, bins: usize) -> CliResult<()> {
    let kept = |s: &ScoredSample| mode == EvalMode::Mix || s.is_id;
    let id: Vec<f64> = samples.iter().filter(|s| s.is_id).map(|s| s.score).collect();
    let ood: Vec<f64> = samples.iter().filter(|s| !s.is_id && kept(s)).map(|s| s.score).collect();
    let hist = histogram(&id, &ood, bins)?;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "bin_lo,bin_hi,id_count,ood_count")?;
    for b in &hist {
        writeln!(out, "{},{},{},{}", b.lo, b.hi, b.id_count, b.ood_count)?;
    }
    out.flush()?;
    let mut out = BufWriter::new(File::create(scores_path(path))?);
    writeln!(out, "id,score,is_id,predicted,truth")?;
    for (seq, s) in data.sequences.iter().zip(samples).filter(|(_, s)| kept(s)) {
        writeln!(out, "{},{},{},{},{}", seq.id, s.score, s.is_id, s.predicted, s.truth)?;
    }
    out.flush()?;
    Ok(())
}

fn detect(a: DetectArgs, s: Settings, threads: usize) -> CliResult<()> {
    s.finish()?;
    let model = load_checkpoint(&a.checkpoint)?;
    let tau = model.detector.tau()?;
    let data = load_dataset(&a.input)?;
    let seqs: Vec<&SkeletonSequence> = data.sequences.iter().collect();
    let detections = seqs
        .par_chunks(EVAL_CHUNK)
        .map(|c| model.detect(c))
        .collect::<Result<Vec<_>, Error>>()?;
    let mut lines = String::new();
    for (seq, d) in seqs.iter().zip(detections.into_iter().flatten()) {
        let label = match d.verdict {
            Verdict::Seen => Some(model.config().seen_class_ids[d.label]),
            Verdict::Unseen => None,
        };
        let rec = json!({ "id": seq.id, "score": d.score, "tau": tau, "verdict": d.verdict, "label": label });
        lines.push_str(&rec.to_string());
        lines.push('\n');
    }
    match &a.out {
        Some(path) => {
            fs::write(path, &lines)?;
            let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let name = path.file_name().map_or("detect".into(), |n| n.to_string_lossy().into_owned());
            let inputs = json!({ "checkpoint": path_str(&a.checkpoint), "input": path_str(&a.input) });
            write_manifest(dir, &format!("{name}.manifest.json"), "detect", json!({}), inputs, json!({ "detections": name }), None, threads)?;
        }
        None => io::stdout().write_all(lines.as_bytes())?,
    }
    Ok(())
}
