//! `qcea` command-line interface.
//!
//! Every command writes a `manifest.json` into its output directory before
//! doing any work, then its artifacts. Failures print a single JSON line on
//! stderr and exit with a code per error class.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use qcea::baselines::SourceInput;
use qcea::data::{generate_synthetic, load_bundle, save_bundle, split_anchors, BundleFiles, DatasetBundle, EmbeddingFormat, Split};
use qcea::eval::{evaluate, predict, seed_ratio_sweep, EvalConfig, Stratum};
use qcea::graph::RetrievalMode;
use qcea::model::{Checkpoint, TuckerRanks};
use qcea::pipeline::{fit_method, FittedModel, Method, MethodConfig};
use qcea::presets::preset;
use qcea::rag::{self, AlignmentSetting};
use qcea::training::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "qcea", version, about = "Query-conditioned entity alignment between two knowledge graphs")]
struct Cli {
    /// Master seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    Gen(GenArgs),
    /// Re-split a bundle's anchor pairs into train/val/test.
    Split(SplitArgs),
    /// Train (or fit) a method and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Write ranked predictions of a checkpoint.
    Predict(PredictArgs),
    /// Run the downstream evidence-retrieval simulation.
    SimulateRag(RagArgs),
    /// Retrain on nested fractions of the training anchors.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long, default_value = "small")]
    preset: String,
    #[arg(long)]
    out: PathBuf,
    /// Write embeddings as text instead of binary.
    #[arg(long)]
    text: bool,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Train, val and test fractions.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    ratios: String,
}

#[derive(Debug, Args, Serialize)]
struct HyperArgs {
    /// Preset supplying defaults for every unset option.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long)]
    lambda_dir: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    positives: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// Tucker ranks as RS,RO,RI.
    #[arg(long)]
    ranks: Option<String>,
    #[arg(long)]
    dim: Option<usize>,
    /// Source input of the mlp and biencoder baselines: query or entity.
    #[arg(long)]
    source_input: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug, Args, Serialize)]
struct EvalOpts {
    /// Retrieval modes: full, type, or both comma-separated.
    #[arg(long, default_value = "full,type")]
    mode: String,
    #[arg(long, default_value = "1,10,100")]
    k_list: String,
    #[arg(long, default_value = "test")]
    split: String,
    /// Remove the source's other known counterparts from its candidates.
    #[arg(long)]
    filtered: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    eval: EvalOpts,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "type")]
    mode: String,
    #[arg(long, default_value = "test")]
    split: String,
    /// Candidates kept per query.
    #[arg(long, default_value_t = 100)]
    top: usize,
}

#[derive(Debug, Args)]
struct RagArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint for the prediction-based settings.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "oracle,predicted,topx=1,topx=3,topx=5,topx=10,dropx=0.25,dropx=0.5,dropx=0.75,noalign")]
    settings: String,
    /// Existing question file; generated when absent.
    #[arg(long)]
    questions: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    per_category: usize,
    /// First-hop candidate cap.
    #[arg(long, default_value_t = rag::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = rag::DEFAULT_DROP_TRIALS)]
    trials: u32,
    #[arg(long, default_value = "type")]
    mode: String,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "0.1,0.2,0.4,0.6,0.8,1.0")]
    ratios: String,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    eval: EvalOpts,
}

/// Errors raised by the CLI layer itself.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("missing input file {0}")]
    MissingFile(PathBuf),
    #[error("conflicting options: {0}")]
    Conflict(String),
    #[error("bad value for --{flag}: {msg}")]
    BadValue { flag: &'static str, msg: String },
}

#[derive(Debug, Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: C,
    inputs: Vec<FileDigest>,
    outputs: Vec<String>,
}

fn digest(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileDigest { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

fn write_manifest<C: Serialize>(out: &Path, command: &str, seed: u64, config: C, inputs: &[&Path], outputs: &[&str]) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = RunManifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
        inputs: inputs.iter().map(|p| digest(p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|o| o.to_string()).collect(),
    };
    write_file(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    let mut f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(contents.as_ref()).with_context(|| format!("writing {}", path.display()))
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(CliError::MissingFile(path.to_path_buf()).into());
    }
    Ok(())
}

fn bundle_inputs(data: &Path) -> Result<BundleFiles> {
    let files = BundleFiles::in_dir(data);
    for p in files.all() {
        require(p)?;
    }
    Ok(files)
}

fn parse_list<T: std::str::FromStr>(flag: &'static str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| CliError::BadValue { flag, msg: format!("cannot parse {p:?}") }.into()))
        .collect()
}

fn parse_modes(s: &str) -> Result<Vec<RetrievalMode>> {
    let mut modes = s
        .split(',')
        .map(|m| RetrievalMode::parse(m.trim()).ok_or_else(|| CliError::BadValue { flag: "mode", msg: format!("unknown mode {m:?}") }.into()))
        .collect::<Result<Vec<_>>>()?;
    modes.sort();
    modes.dedup();
    Ok(modes)
}

fn parse_split(s: &str) -> Result<Split> {
    Ok(Split::parse(s).ok_or_else(|| CliError::BadValue { flag: "split", msg: format!("unknown split {s:?}") })?)
}

fn parse_single_mode(s: &str) -> Result<RetrievalMode> {
    match parse_modes(s)?.as_slice() {
        [m] => Ok(*m),
        _ => Err(CliError::BadValue { flag: "mode", msg: "exactly one mode expected".into() }.into()),
    }
}

impl EvalOpts {
    fn resolve(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            split: parse_split(&self.split)?,
            modes: parse_modes(&self.mode)?,
            k_list: parse_list("k-list", &self.k_list)?,
            filtered: self.filtered,
        })
    }
}

#[derive(Debug, Serialize)]
struct Resolved {
    model: MethodConfig,
    train: TrainConfig,
}

impl HyperArgs {
    fn resolve(&self, seed: u64) -> Result<Resolved> {
        let (mut model, mut train) = match &self.preset {
            Some(name) => {
                let p = preset(name)?;
                (p.model, p.train)
            }
            None => (MethodConfig::default(), TrainConfig::default()),
        };
        if let Some(m) = &self.method {
            model.method = m.parse::<Method>()?;
        }
        if let Some(d) = self.dim {
            model.dim = d;
        }
        if let Some(r) = &self.ranks {
            model.ranks = TuckerRanks::parse(r).ok_or(CliError::BadValue { flag: "ranks", msg: format!("expected RS,RO,RI, got {r:?}") })?;
        }
        if let Some(s) = &self.source_input {
            if matches!(model.method, Method::Qcea | Method::Procrustes) {
                return Err(CliError::Conflict(format!("--source-input does not apply to {}", model.method)).into());
            }
            model.source_input = match s.as_str() {
                "query" => SourceInput::Query,
                "entity" => SourceInput::Entity,
                _ => return Err(CliError::BadValue { flag: "source-input", msg: format!("expected query or entity, got {s:?}") }.into()),
            };
        }
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {$(
                if let Some(v) = self.$field { train.$target = v; }
            )*};
        }
        set!(epochs => epochs, lr => lr, temp => temperature, lambda_dir => lambda_dir, lambda_reg => lambda_reg,
             negatives => negatives, positives => positives, batch_size => batch_size, patience => patience);
        train.seed = seed;
        train.validate()?;
        Ok(Resolved { model, train })
    }
}

fn load_model(path: &Path, bundle: &DatasetBundle) -> Result<FittedModel> {
    require(path)?;
    let model = FittedModel::from_checkpoint(&Checkpoint::load(path)?)?;
    model.check_bundle(bundle)?;
    Ok(model)
}

fn cmd_gen(args: &GenArgs, seed: u64) -> Result<()> {
    let p = preset(&args.preset)?;
    write_manifest(&args.out, "gen", seed, &p.synthetic, &[], &["tcm.graph.txt", "wm.graph.txt", "anchors.tsv", "compat.tsv", "queries.tsv", "splits.tsv", "query.emb", "tcm.emb", "wm.emb"])?;
    let bundle = generate_synthetic(&p.synthetic, seed)?;
    let format = if args.text { EmbeddingFormat::Text } else { EmbeddingFormat::Binary };
    save_bundle(&bundle, &args.out, format)?;
    Ok(())
}

fn cmd_split(args: &SplitArgs, seed: u64) -> Result<()> {
    let ratios: Vec<f64> = parse_list("ratios", &args.ratios)?;
    let ratios: [f64; 3] = ratios
        .try_into()
        .map_err(|_| CliError::BadValue { flag: "ratios", msg: "expected three fractions".into() })?;
    if args.out == args.data {
        return Err(CliError::Conflict("--out must differ from --data; inputs are never modified".into()).into());
    }
    let files = bundle_inputs(&args.data)?;
    write_manifest(&args.out, "split", seed, ratios, &files.all(), &["splits.tsv"])?;
    let bundle = load_bundle(&files)?;
    let resplit = bundle.with_splits(split_anchors(bundle.anchors(), ratios, seed)?)?;
    let format = if files.query_emb.extension().is_some_and(|e| e == "emb") { EmbeddingFormat::Binary } else { EmbeddingFormat::Text };
    save_bundle(&resplit, &args.out, format)?;
    Ok(())
}

fn cmd_train(args: &TrainArgs, seed: u64) -> Result<()> {
    let resolved = args.hyper.resolve(seed)?;
    let files = bundle_inputs(&args.data)?;
    write_manifest(&args.out, "train", seed, &resolved, &files.all(), &["model.ckpt", "train_log.jsonl", "config.json"])?;
    write_file(&args.out.join("config.json"), serde_json::to_string_pretty(&resolved)? + "\n")?;
    let bundle = load_bundle(&files)?;
    let result = match fit_method(&bundle, &resolved.model, &resolved.train, None) {
        Err(qcea::Error::Diverged { epoch, reason, params }) => {
            let ckpt = Checkpoint { method: resolved.model.method.to_string(), config_json: "{}".into(), params: *params.clone(), adam: None };
            ckpt.save(&args.out.join("diverged.ckpt"))?;
            return Err(qcea::Error::Diverged { epoch, reason, params }.into());
        }
        other => other?,
    };
    let adam = result.outcome.as_ref().map(|o| o.adam.clone());
    result.model.to_checkpoint(adam).save(&args.out.join("model.ckpt"))?;
    let log = result.outcome.as_ref().map(|o| o.log_jsonl()).unwrap_or_default();
    write_file(&args.out.join("train_log.jsonl"), log)?;
    if let Some(o) = &result.outcome {
        eprintln!(
            "trained {} for {} epochs; best val Hit@10 {:.4} MRR {:.4} at epoch {}",
            resolved.model.method, o.epochs_run, o.best.hit10, o.best.mrr, o.best_epoch
        );
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, seed: u64) -> Result<()> {
    let cfg = args.eval.resolve()?;
    let files = bundle_inputs(&args.data)?;
    require(&args.model)?;
    let mut inputs = files.all();
    inputs.push(&args.model);
    write_manifest(&args.out, "eval", seed, &cfg, &inputs, &["metrics.tsv", "metrics.jsonl"])?;
    let bundle = load_bundle(&files)?;
    let model = load_model(&args.model, &bundle)?;
    let report = evaluate(&model, &bundle, &cfg)?;
    let tsv = report.to_tsv();
    write_file(&args.out.join("metrics.tsv"), &tsv)?;
    write_file(&args.out.join("metrics.jsonl"), report.to_jsonl())?;
    print!("{tsv}");
    print!("{}", report.to_jsonl());
    Ok(())
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    query: u32,
    direction: &'a str,
    candidates: Vec<u32>,
    scores: Vec<f64>,
    ground_truth: Vec<u32>,
}

fn cmd_predict(args: &PredictArgs, seed: u64) -> Result<()> {
    let mode = parse_single_mode(&args.mode)?;
    let split = parse_split(&args.split)?;
    let files = bundle_inputs(&args.data)?;
    require(&args.model)?;
    let mut inputs = files.all();
    inputs.push(&args.model);
    let config = serde_json::json!({"mode": mode.as_str(), "split": split.as_str(), "top": args.top});
    write_manifest(&args.out, "predict", seed, config, &inputs, &["predictions.jsonl"])?;
    let bundle = load_bundle(&files)?;
    let model = load_model(&args.model, &bundle)?;
    let preds = predict(&model, &bundle, split, &[mode], false)?;
    let mut out = String::new();
    for p in &preds[&mode] {
        let top: Vec<_> = p.candidates.iter().take(args.top).collect();
        let line = PredictionLine {
            query: p.query.0,
            direction: p.direction.as_str(),
            candidates: top.iter().map(|c| c.0 .0).collect(),
            scores: top.iter().map(|c| c.1).collect(),
            ground_truth: p.ground_truth.iter().map(|g| g.0).collect(),
        };
        out += &(serde_json::to_string(&line)? + "\n");
    }
    write_file(&args.out.join("predictions.jsonl"), out)
}

fn cmd_simulate_rag(args: &RagArgs, seed: u64) -> Result<()> {
    let settings = AlignmentSetting::parse_list(&args.settings)?;
    let mode = parse_single_mode(&args.mode)?;
    let split = parse_split(&args.split)?;
    let needs_model = settings.iter().any(|s| !matches!(s, AlignmentSetting::Oracle | AlignmentSetting::NoAlign));
    if needs_model && args.model.is_none() {
        return Err(CliError::Conflict("prediction-based settings need --model".into()).into());
    }
    let files = bundle_inputs(&args.data)?;
    let mut inputs = files.all();
    for p in args.model.iter().chain(&args.questions) {
        require(p)?;
        inputs.push(p);
    }
    let config = serde_json::json!({
        "settings": settings.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "per_category": args.per_category, "k": args.k, "trials": args.trials,
        "mode": mode.as_str(), "split": split.as_str(),
    });
    write_manifest(&args.out, "simulate-rag", seed, config, &inputs, &["questions.jsonl", "rag.tsv", "rag.jsonl", "traces.jsonl"])?;
    let bundle = load_bundle(&files)?;
    let questions = match &args.questions {
        Some(p) => rag::read_questions(BufReader::new(fs::File::open(p).with_context(|| format!("opening {}", p.display()))?))?,
        None => rag::generate_questions(&bundle, args.per_category, split, seed)?,
    };
    let mut qbuf = Vec::new();
    rag::write_questions(&questions, &mut qbuf)?;
    write_file(&args.out.join("questions.jsonl"), qbuf)?;

    let predictions = match &args.model {
        Some(path) => {
            let model = load_model(path, &bundle)?;
            let preds = predict(&model, &bundle, split, &[mode], false)?;
            rag::predictions_from(&preds[&mode])
        }
        None => rag::Predictions::new(),
    };
    let mut traces = String::new();
    let mut rows = Vec::new();
    for &s in &settings {
        let t = rag::run_setting(&questions, s, &bundle, &predictions, args.k, seed, args.trials)?;
        for tr in &t {
            traces += &(serde_json::to_string(tr)? + "\n");
        }
        rows.extend(rag::rag_metrics(&t)?);
    }
    let report = rag::RagReport { k: args.k, rows };
    write_file(&args.out.join("traces.jsonl"), traces)?;
    write_file(&args.out.join("rag.tsv"), report.to_tsv())?;
    write_file(&args.out.join("rag.jsonl"), report.to_jsonl())?;
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs, seed: u64) -> Result<()> {
    let resolved = args.hyper.resolve(seed)?;
    let eval = args.eval.resolve()?;
    let ratios: Vec<f64> = parse_list("ratios", &args.ratios)?;
    let files = bundle_inputs(&args.data)?;
    let config = serde_json::json!({"resolved": &resolved, "eval": &eval, "ratios": &ratios});
    write_manifest(&args.out, "sweep", seed, config, &files.all(), &["sweep.tsv", "sweep.jsonl"])?;
    let bundle = load_bundle(&files)?;
    let results = seed_ratio_sweep(&bundle, &ratios, seed, &eval, |pairs| {
        Ok(fit_method(&bundle, &resolved.model, &resolved.train, Some(pairs))?.model)
    })?;
    let mut tsv = String::from("ratio\ttrain_pairs\tmode");
    for k in &eval.k_list {
        tsv += &format!("\tHit@{k}");
    }
    tsv += "\tMRR\n";
    let mut jsonl = String::new();
    for r in &results {
        for &mode in &eval.modes {
            let row = r.report.get(mode, Stratum::Overall).context("overall row")?;
            tsv += &format!("{}\t{}\t{}", r.ratio, r.train_pairs, mode);
            for k in &eval.k_list {
                tsv += &format!("\t{:.4}", row.hit(*k).unwrap_or(0.0));
            }
            tsv += &format!("\t{:.4}\n", row.mrr);
        }
        jsonl += &(serde_json::to_string(r)? + "\n");
    }
    write_file(&args.out.join("sweep.tsv"), &tsv)?;
    write_file(&args.out.join("sweep.jsonl"), jsonl)?;
    print!("{tsv}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, cli.seed),
        Command::Split(a) => cmd_split(a, cli.seed),
        Command::Train(a) => cmd_train(a, cli.seed),
        Command::Eval(a) => cmd_eval(a, cli.seed),
        Command::Predict(a) => cmd_predict(a, cli.seed),
        Command::SimulateRag(a) => cmd_simulate_rag(a, cli.seed),
        Command::Sweep(a) => cmd_sweep(a, cli.seed),
    }
}

/// Error class and exit code.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    if let Some(e) = err.downcast_ref::<CliError>() {
        return match e {
            CliError::MissingFile(_) => ("missing_file", 3),
            CliError::Conflict(_) => ("config_conflict", 4),
            CliError::BadValue { .. } => ("bad_value", 2),
        };
    }
    if let Some(e) = err.downcast_ref::<qcea::Error>() {
        use qcea::Error as E;
        return match e {
            E::Io { .. } => ("io", 3),
            E::InvalidArgument(_) | E::Shape(_) => ("invalid_argument", 4),
            E::Checkpoint(_) => ("checkpoint", 5),
            E::Diverged { .. } | E::NonFinite { .. } | E::DegenerateNorm(_) => ("diverged", 6),
            E::InsufficientData(_) | E::InfeasibleSpec(_) => ("insufficient_data", 7),
            E::TooLarge { .. } => ("too_large", 4),
            _ => ("invalid_data", 7),
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return ("io", 3);
    }
    ("error", 1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            eprintln!("{}", serde_json::json!({"error": kind, "message": format!("{e:#}")}));
            ExitCode::from(code)
        }
    }
}
