//! Command-line front end. Every subcommand is a thin wrapper over a
//! `cmd_*` function that can also be called in-process.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::error::{Error, Result};
use crate::experiment::{
    build_base, dataset_paths, evaluate_protocols, generate_suite, run_experiment,
    write_checkpoint_artifact, write_dataset_artifacts, write_outputs, ArtifactMeta, BaseKind,
    ExperimentConfig, ExperimentOutcome,
};
use crate::merging::{merge_with_lambda, ManifestInput, MergeManifest, MergeMethod, MergeSpec};
use crate::models::checkpoint::file_digest;
use crate::models::{load_checkpoint, MlpEncoder, ModelParams, TaskModel, ENCODER_PREFIX};
use crate::protocols::{write_embeddings, EvalReport, Protocol, ReportRow};
use crate::synthdata::{load_dataset, Split, TaskDataset};
use crate::training::{finetune, train_mtl};

#[derive(Debug, Parser)]
#[command(
    name = "mergelab",
    version,
    about = "Merge fine-tuned encoders and evaluate them under several protocols"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct GlobalArgs {
    /// Root seed (defaults to the first seed of the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON experiment config; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to one per core).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Classifier heads without a bias term.
    #[arg(long, global = true)]
    pub no_bias: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic task suite.
    GenData,
    /// Build the base encoder from a generated suite.
    Pretrain(PretrainArgs),
    /// Fine-tune the base encoder on one task.
    Finetune(FinetuneArgs),
    /// Train the multi-task baseline on every task.
    Mtl(MtlArgs),
    /// Merge fine-tuned checkpoints.
    Merge(MergeArgs),
    /// Evaluate an encoder and append rows to a report.
    Eval(EvalArgs),
    /// Write per-sample embeddings of one dataset split.
    DumpEmbeddings(DumpArgs),
    /// Run the whole pipeline from a config.
    Run,
}

#[derive(Clone, Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides `model.base` from the config.
    #[arg(long, value_parser = parse_base_kind)]
    pub base: Option<BaseKind>,
}

#[derive(Clone, Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub task: usize,
}

#[derive(Clone, Debug, Args)]
pub struct MtlArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct MergeArgs {
    #[arg(long, value_parser = parse_method)]
    pub method: MergeMethod,
    /// Scaling coefficient; required for ta and ties.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Ties keep fraction.
    #[arg(long, default_value_t = crate::merging::DEFAULT_KEEP_FRACTION)]
    pub keep: f64,
    /// Base checkpoint; required for ta and ties.
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Output checkpoint (defaults to `<out>/merged_<method>.ckpt`).
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Fine-tuned checkpoints.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint whose encoder is evaluated.
    #[arg(long)]
    pub encoder: PathBuf,
    /// Fine-tuned checkpoints, one per task, in task order.
    #[arg(long, num_args = 1.., required = true)]
    pub finetuned: Vec<PathBuf>,
    /// Directory with `task<t>.csv` and `task<t>.splits.csv`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Protocol,
    /// Few-shot k (defaults to `knn.k` for knn and `k` otherwise).
    #[arg(long)]
    pub k: Option<usize>,
    /// Sample fraction for ft-classifier instead of k per class.
    #[arg(long, conflicts_with = "k")]
    pub fraction: Option<f64>,
    /// Only this task (all tasks by default).
    #[arg(long)]
    pub task: Option<usize>,
    /// Report model tag (inferred from the encoder's metadata).
    #[arg(long)]
    pub model: Option<String>,
    /// Report method tag (inferred from the encoder's metadata).
    #[arg(long)]
    pub method: Option<String>,
    /// Report file (defaults to `<out>/report.csv`).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub task: usize,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub output: PathBuf,
}

fn parse_base_kind(s: &str) -> std::result::Result<BaseKind, String> {
    match s {
        "pretext" => Ok(BaseKind::Pretext),
        "random" => Ok(BaseKind::Random),
        _ => Err(format!(
            "unknown base kind `{s}` (expected pretext or random)"
        )),
    }
}

fn parse_method(s: &str) -> std::result::Result<MergeMethod, String> {
    MergeMethod::parse(s).map_err(|e| e.to_string())
}

fn parse_protocol(s: &str) -> std::result::Result<Protocol, String> {
    Protocol::parse(s).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

/// Config plus global overrides, shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Context {
    pub fn new(global: &GlobalArgs) -> Result<Self> {
        let mut config = match &global.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if global.no_bias {
            config.model.use_bias = false;
        }
        if let Some(s) = global.seed {
            config.seeds = vec![s];
        }
        config.validate()?;
        let seed = config.seeds[0];
        let out = global
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self { config, seed, out })
    }

    pub fn digest(&self) -> String {
        self.config.digest()
    }

    fn ensure_out(&self) -> Result<()> {
        crate::experiment::create_dir(&self.out)
    }
}

/// Reject an artifact whose sidecar names a different config digest.
pub fn check_digest(path: &Path, expected: &str) -> Result<Option<ArtifactMeta>> {
    let meta = ArtifactMeta::read_for(path)?;
    if let Some(m) = &meta {
        if m.config_digest != expected {
            return Err(Error::Data(format!(
                "{} was produced under config digest {}, but this run uses {expected}",
                path.display(),
                m.config_digest
            )));
        }
    }
    Ok(meta)
}

fn load_checked(path: &Path, digest: &str) -> Result<(ModelParams, Option<ArtifactMeta>)> {
    let meta = check_digest(path, digest)?;
    Ok((load_checkpoint(path)?, meta))
}

/// Load task `t` from a data directory written by `gen-data`.
pub fn load_task(dir: &Path, task: usize, seed: u64, digest: &str) -> Result<TaskDataset> {
    let (data, splits) = dataset_paths(dir, task);
    check_digest(&data, digest)?;
    if !data.exists() {
        return Err(Error::io(
            &data,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let splits = splits.exists().then_some(splits);
    if let Some(s) = &splits {
        check_digest(s, digest)?;
    }
    load_dataset(task, &data, splits.as_deref(), seed)
}

pub fn load_suite(ctx: &Context, dir: &Path) -> Result<Vec<TaskDataset>> {
    let digest = ctx.digest();
    (0..ctx.config.suite.class_counts.len())
        .map(|t| load_task(dir, t, ctx.seed, &digest))
        .collect()
}

pub fn cmd_gen_data(ctx: &Context) -> Result<PathBuf> {
    let dir = ctx.out.join("data");
    let digest = ctx.digest();
    for ds in generate_suite(&ctx.config, ctx.seed)? {
        write_dataset_artifacts(&dir, &ds, &digest, ctx.seed)?;
    }
    info!("wrote datasets to {}", dir.display());
    Ok(dir)
}

pub fn cmd_pretrain(ctx: &Context, args: &PretrainArgs) -> Result<PathBuf> {
    let mut cfg = ctx.config.clone();
    if let Some(b) = args.base {
        cfg.model.base = b;
    }
    let datasets = load_suite(ctx, &args.data)?;
    let (base, log) = build_base(&cfg, &datasets, ctx.seed)?;
    ctx.ensure_out()?;
    let path = ctx.out.join("base.ckpt");
    write_checkpoint_artifact(
        &path,
        base.params(),
        &ctx.digest(),
        "encoder",
        Some(ctx.seed),
        None,
        None,
    )?;
    write_log(&ctx.out.join("pretrain.log.csv"), &log)?;
    Ok(path)
}

fn write_log(path: &Path, log: &crate::training::TrainLog) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    log.write_csv(std::io::BufWriter::new(f))
        .map_err(|e| Error::io(path, e))
}

fn load_base(path: &Path, digest: &str) -> Result<MlpEncoder> {
    let (params, _) = load_checked(path, digest)?;
    MlpEncoder::from_params(&params)
}

pub fn cmd_finetune(ctx: &Context, args: &FinetuneArgs) -> Result<PathBuf> {
    let digest = ctx.digest();
    let base = load_base(&args.base, &digest)?;
    let ds = load_task(&args.data, args.task, ctx.seed, &digest)?;
    let mut cfg = ctx.config.finetune.clone();
    cfg.seed = ctx.seed;
    let (model, log) = finetune(&base, &ds, ctx.config.model.use_bias, &cfg)?;
    ctx.ensure_out()?;
    let path = ctx.out.join(format!("ft_task{}.ckpt", args.task));
    write_checkpoint_artifact(
        &path,
        &model.to_params(),
        &digest,
        "task-model",
        Some(ctx.seed),
        Some(args.task),
        None,
    )?;
    write_log(&ctx.out.join(format!("ft_task{}.log.csv", args.task)), &log)?;
    Ok(path)
}

pub fn cmd_mtl(ctx: &Context, args: &MtlArgs) -> Result<PathBuf> {
    let digest = ctx.digest();
    let base = load_base(&args.base, &digest)?;
    let datasets = load_suite(ctx, &args.data)?;
    let mut cfg = ctx.config.mtl.clone();
    cfg.seed = ctx.seed;
    let model = train_mtl(&base, &datasets, ctx.config.model.use_bias, &cfg)?;
    ctx.ensure_out()?;
    let path = ctx.out.join("mtl.ckpt");
    write_checkpoint_artifact(
        &path,
        &model.to_params(),
        &digest,
        "mtl",
        Some(ctx.seed),
        None,
        None,
    )?;
    write_log(&ctx.out.join("mtl.log.csv"), &model.log)?;
    Ok(path)
}

/// Merge the `enc.*` layers of the inputs; writes the checkpoint, its
/// sidecar and `<output stem>.manifest.json`.
pub fn cmd_merge(ctx: &Context, args: &MergeArgs) -> Result<PathBuf> {
    let digest = ctx.digest();
    let spec = MergeSpec::new(args.method).with_keep_fraction(args.keep);
    spec.validate()?;
    let lambda = match (args.method.uses_lambda(), args.lambda) {
        (true, None) => {
            return Err(Error::Config(format!(
                "--lambda is required for {}",
                args.method.tag()
            )));
        }
        (_, l) => l,
    };
    if let Some(l) = lambda {
        if !l.is_finite() {
            return Err(Error::Config(format!("--lambda must be finite, got {l}")));
        }
    }
    let encoders: Vec<ModelParams> = args
        .inputs
        .iter()
        .map(|p| Ok(load_checked(p, &digest)?.0.filter_prefix(ENCODER_PREFIX)))
        .collect::<Result<_>>()?;
    let base = match (&args.base, args.method.uses_lambda()) {
        (Some(p), _) => Some(load_checked(p, &digest)?.0.filter_prefix(ENCODER_PREFIX)),
        (None, true) => {
            return Err(Error::Config(format!(
                "--base is required for {}",
                args.method.tag()
            )))
        }
        (None, false) => None,
    };
    // WA never reads the base; any homologous stand-in will do.
    let theta_b = base.clone().unwrap_or_else(|| encoders[0].clone());
    let merged = merge_with_lambda(&theta_b, &encoders, &spec, lambda.unwrap_or(1.0))?;
    if !merged.all_finite() {
        return Err(Error::Numeric(
            "merged parameters contain non-finite values".into(),
        ));
    }
    let output = args
        .output
        .clone()
        .unwrap_or_else(|| ctx.out.join(format!("merged_{}.ckpt", args.method.tag())));
    let out_meta = write_checkpoint_artifact(
        &output,
        &merged,
        &digest,
        "merged",
        Some(ctx.seed),
        None,
        Some(args.method.tag().into()),
    )?;
    let input = |p: &PathBuf| -> Result<ManifestInput> {
        Ok(ManifestInput {
            path: p.clone(),
            sha256: file_digest(p)?,
        })
    };
    let manifest = MergeManifest {
        method: args.method,
        lambda,
        keep_fraction: (args.method == MergeMethod::Ties).then_some(args.keep),
        base: args.base.as_ref().map(input).transpose()?,
        inputs: args.inputs.iter().map(input).collect::<Result<_>>()?,
        output: ManifestInput {
            path: output.clone(),
            sha256: out_meta.sha256,
        },
        config_digest: Some(digest),
    };
    manifest.save(output.with_extension("manifest.json"))?;
    Ok(output)
}

/// Evaluate with the same seed derivations as the full pipeline; returns
/// the rows that were appended to the report.
pub fn cmd_eval(ctx: &Context, args: &EvalArgs) -> Result<Vec<ReportRow>> {
    let digest = ctx.digest();
    let (enc_params, enc_meta) = load_checked(&args.encoder, &digest)?;
    let encoder = MlpEncoder::from_params(&enc_params)?;
    let (model_tag, method_tag) = match (&args.model, &args.method) {
        (Some(m), Some(x)) => (m.clone(), x.clone()),
        (m, x) => {
            let (dm, dx) = default_tags(enc_meta.as_ref());
            (m.clone().unwrap_or(dm), x.clone().unwrap_or(dx))
        }
    };

    let mut cfg = ctx.config.clone();
    cfg.protocols = vec![args.protocol];
    match args.protocol {
        Protocol::Knn => cfg.knn.k = args.k.unwrap_or(cfg.knn.k),
        _ => {
            cfg.k = args.k.unwrap_or(cfg.k);
            cfg.k_sweep = Vec::new();
            cfg.fraction_sweep = Vec::new();
        }
    }
    if let Some(f) = args.fraction {
        if args.protocol != Protocol::FtClassifier {
            return Err(Error::Config(
                "--fraction only applies to ft-classifier".into(),
            ));
        }
        cfg.fraction_sweep = vec![f];
        cfg.k_sweep = Vec::new();
    }
    cfg.validate()?;

    let tasks: Vec<usize> = match args.task {
        Some(t) => vec![t],
        None => (0..args.finetuned.len()).collect(),
    };
    let mut report = EvalReport::new(digest.clone());
    for t in tasks {
        let path = args
            .finetuned
            .get(t)
            .ok_or_else(|| Error::Config(format!("no fine-tuned checkpoint given for task {t}")))?;
        let (params, _) = load_checked(path, &digest)?;
        let teacher = TaskModel::from_params(t, &params)?;
        let ds = load_task(&args.data, t, ctx.seed, &digest)?;
        let (mut rows, _) = evaluate_protocols(
            &cfg,
            ctx.seed,
            &model_tag,
            &method_tag,
            &encoder,
            &teacher,
            &ds,
        )?;
        if args.fraction.is_some() {
            rows.retain(|r| r.k_or_fraction.contains('.'));
        }
        for r in rows {
            report.push(r);
        }
    }
    let path = args
        .report
        .clone()
        .unwrap_or_else(|| ctx.out.join("report.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        crate::experiment::create_dir(parent)?;
    }
    report.append_csv(&path)?;
    Ok(report.rows)
}

fn default_tags(meta: Option<&ArtifactMeta>) -> (String, String) {
    let (m, x) = match meta.map(|m| (m.kind.as_str(), m.method.as_deref())) {
        Some(("merged", Some(method))) => ("merged", method),
        Some(("task-model", _)) => ("finetuned", "ft"),
        Some(("mtl", _)) => ("mtl", "mtl"),
        Some(("encoder", _)) => ("base", "base"),
        _ => ("custom", "custom"),
    };
    (m.to_string(), x.to_string())
}

pub fn cmd_dump_embeddings(ctx: &Context, args: &DumpArgs) -> Result<PathBuf> {
    let digest = ctx.digest();
    let (params, _) = load_checked(&args.ckpt, &digest)?;
    let encoder = MlpEncoder::from_params(&params)?;
    let ds = load_task(&args.data, args.task, ctx.seed, &digest)?;
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        crate::experiment::create_dir(parent)?;
    }
    let file = std::fs::File::create(&args.output).map_err(|e| Error::io(&args.output, e))?;
    write_embeddings(&encoder, &ds, args.split, std::io::BufWriter::new(file))?;
    ArtifactMeta::write_for(
        &args.output,
        &digest,
        "embeddings",
        Some(ctx.seed),
        Some(args.task),
        None,
    )?;
    Ok(args.output.clone())
}

pub fn cmd_run(ctx: &Context) -> Result<ExperimentOutcome> {
    info!(
        "running {} seed(s), config digest {}",
        ctx.config.seeds.len(),
        ctx.digest()
    );
    let outcome = run_experiment(&ctx.config)?;
    write_outputs(&ctx.config, &outcome, &ctx.out)?;
    info!("wrote reports to {}", ctx.out.display());
    Ok(outcome)
}

/// Dispatch a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("--threads: {e}")))?;
    }
    let ctx = Context::new(&cli.global)?;
    match &cli.command {
        Command::GenData => print_path(cmd_gen_data(&ctx)?),
        Command::Pretrain(a) => print_path(cmd_pretrain(&ctx, a)?),
        Command::Finetune(a) => print_path(cmd_finetune(&ctx, a)?),
        Command::Mtl(a) => print_path(cmd_mtl(&ctx, a)?),
        Command::Merge(a) => print_path(cmd_merge(&ctx, a)?),
        Command::Eval(a) => {
            for r in cmd_eval(&ctx, a)? {
                println!(
                    "{} {} {} task={} k={} acc={:.4}",
                    r.model, r.method, r.protocol, r.task, r.k_or_fraction, r.accuracy
                );
            }
        }
        Command::DumpEmbeddings(a) => print_path(cmd_dump_embeddings(&ctx, a)?),
        Command::Run => {
            let outcome = cmd_run(&ctx)?;
            for s in &outcome.summary {
                println!(
                    "{:<9} {:<5} {:<13} {:>5}  {:.4} ± {:.4}",
                    s.model, s.method, s.protocol, s.k_or_fraction, s.mean, s.std
                );
            }
        }
    }
    Ok(())
}

fn print_path(p: PathBuf) {
    println!("{}", p.display());
}

/// Parse `args`, run, and map the outcome to a process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
