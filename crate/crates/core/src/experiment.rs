//! Config-driven pipeline: generate the task suite, build the base encoder,
//! fine-tune per task, train the multi-task baseline, merge, evaluate every
//! model under every protocol and write reports and artifacts.

use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::merging::{
    default_lambda_grid, merge_with_lambda, select_lambda, MergeMethod, MergeSpec,
};
use crate::models::checkpoint::file_digest;
use crate::models::{save_checkpoint, Architecture, MlpEncoder, ModelParams, TaskModel};
use crate::numkit::derive_seed;
use crate::protocols::{
    aligned_m_eval, current_eval, ft_classifier_eval, knn_eval, AlignVariant, AlignmentConfig,
    DataSource, EvalReport, Protocol, ReportRow,
};
use crate::synthdata::{gen_task, sample_few_shot, save_dataset, Split, SuiteConfig, TaskDataset};
use crate::training::{finetune, pretrain_base, train_mtl, MtlModel, TrainConfig, TrainLog};

/// How the shared base encoder is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseKind {
    /// Trained on the pooled class-parity pretext task.
    #[default]
    Pretext,
    /// Left at its seeded initialization.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default = "yes")]
    pub use_bias: bool,
    #[serde(default)]
    pub base: BaseKind,
}

fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        Self {
            hidden_dims: arch.hidden_dims,
            embed_dim: arch.embed_dim,
            use_bias: true,
            base: BaseKind::Pretext,
        }
    }
}

/// Shared settings of the alignment-based protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSettings {
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Split the unlabeled alignment samples come from.
    pub split: Split,
}

impl Default for AlignmentSettings {
    fn default() -> Self {
        Self {
            alpha: crate::protocols::DEFAULT_ALPHA,
            epochs: 200,
            learning_rate: 1e-2,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnnSettings {
    pub k: usize,
    pub split: Split,
}

impl Default for KnnSettings {
    fn default() -> Self {
        Self {
            k: 5,
            split: Split::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "pretrain_default")]
    pub pretrain: TrainConfig,
    #[serde(default = "finetune_default")]
    pub finetune: TrainConfig,
    #[serde(default = "finetune_default")]
    pub mtl: TrainConfig,
    #[serde(default = "default_merges")]
    pub merges: Vec<MergeSpec>,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_protocols")]
    pub protocols: Vec<Protocol>,
    #[serde(default)]
    pub alignment: AlignmentSettings,
    #[serde(default)]
    pub knn: KnnSettings,
    /// Few-shot k per class for the alignment protocols.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Extra k values evaluated with the FT-Classifier protocol.
    #[serde(default)]
    pub k_sweep: Vec<usize>,
    /// Sample fractions evaluated with the FT-Classifier protocol.
    #[serde(default)]
    pub fraction_sweep: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Where `run` writes its outputs; not part of the config digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Also write datasets, checkpoints and training logs.
    #[serde(default = "yes")]
    pub save_artifacts: bool,
}

fn pretrain_default() -> TrainConfig {
    TrainConfig::pretrain_default(0)
}
fn finetune_default() -> TrainConfig {
    TrainConfig::finetune_default(0)
}
fn default_merges() -> Vec<MergeSpec> {
    MergeMethod::ALL.into_iter().map(MergeSpec::new).collect()
}
fn default_protocols() -> Vec<Protocol> {
    Protocol::ALL.to_vec()
}
fn default_k() -> usize {
    5
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            suite: SuiteConfig::default(),
            model: ModelConfig::default(),
            pretrain: pretrain_default(),
            finetune: finetune_default(),
            mtl: finetune_default(),
            merges: default_merges(),
            lambda_grid: default_lambda_grid(),
            protocols: default_protocols(),
            alignment: AlignmentSettings::default(),
            knn: KnnSettings::default(),
            k: 5,
            k_sweep: vec![1, 5, 10, 20],
            fraction_sweep: Vec::new(),
            seeds: (0..5).collect(),
            output_dir: None,
            save_artifacts: true,
        }
    }
}

impl ExperimentConfig {
    /// Parse JSON; errors name the offending field path.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{origin}: field `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.suite.input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            embed_dim: self.model.embed_dim,
        }
    }

    /// Hex SHA-256 of the canonical JSON with the output directory removed.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let text = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if self.suite.class_counts.is_empty() {
            return Err(Error::Config(
                "suite.class_counts: at least one task is required".into(),
            ));
        }
        self.architecture().validate()?;
        if self.lambda_grid.is_empty() {
            return Err(Error::Config("lambda_grid must not be empty".into()));
        }
        for m in &self.merges {
            m.validate()?;
        }
        if self.k == 0 || self.knn.k == 0 || self.k_sweep.contains(&0) {
            return Err(Error::Config("few-shot k values must be at least 1".into()));
        }
        if let Some(f) = self
            .fraction_sweep
            .iter()
            .find(|f| !(**f > 0.0 && **f <= 1.0))
        {
            return Err(Error::Config(format!(
                "fraction_sweep: {f} is outside (0, 1]"
            )));
        }
        self.alignment_config(
            AlignVariant::ClassifierW,
            DataSource::Full {
                split: self.alignment.split,
            },
            0,
        )
        .validate()
    }

    fn alignment_config(
        &self,
        variant: AlignVariant,
        source: DataSource,
        seed: u64,
    ) -> AlignmentConfig {
        AlignmentConfig {
            variant,
            alpha: self.alignment.alpha,
            epochs: self.alignment.epochs,
            learning_rate: self.alignment.learning_rate,
            source,
            seed,
        }
    }

    /// Few-shot k values used by the FT-Classifier protocol, ascending.
    pub fn classifier_ks(&self) -> Vec<usize> {
        let mut ks = self.k_sweep.clone();
        ks.push(self.k);
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

/// Seed for an alignment run: `align:<task>:<protocol>` under the root.
pub fn alignment_seed(root: u64, task: usize, protocol: Protocol) -> u64 {
    derive_seed(root, &format!("align:{task}:{}", protocol.name()))
}

/// λ picked (or fixed) for one merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub seed: u64,
    pub method: MergeMethod,
    pub lambda: Option<f64>,
    /// Mean validation accuracy of the merged encoder under the current
    /// protocol.
    pub val_accuracy: f64,
    /// `(λ, accuracy)` sweep when λ was selected.
    pub sweep: Vec<(f64, f64)>,
}

/// Convergence facts from one alignment run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub seed: u64,
    pub model: String,
    pub method: String,
    pub protocol: Protocol,
    pub task: usize,
    pub k_or_fraction: String,
    pub kl_first: f64,
    pub kl_last: f64,
    /// `‖MᵀM − I‖₁ / d²` for mapping variants.
    pub orth_penalty: Option<f64>,
}

/// Per-epoch train losses of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub seed: u64,
    pub stage: String,
    pub task: Option<usize>,
    pub train_losses: Vec<f64>,
}

/// Everything produced for one seed, kept in memory.
#[derive(Clone, Debug)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub datasets: Vec<TaskDataset>,
    pub base: MlpEncoder,
    pub pretrain_log: TrainLog,
    pub finetuned: Vec<TaskModel>,
    pub finetune_logs: Vec<TrainLog>,
    pub mtl: MtlModel,
    pub merged: Vec<(MergeSpec, Option<f64>, MlpEncoder)>,
}

#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    pub merges: Vec<MergeRecord>,
    pub alignment: Vec<AlignmentRecord>,
    pub training: Vec<TrainingRecord>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub summary: Vec<SummaryRow>,
    pub diagnostics: Diagnostics,
    pub seeds: Vec<SeedArtifacts>,
}

/// Datasets for one seed.
pub fn generate_suite(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TaskDataset>> {
    cfg.suite
        .task_specs(seed)
        .par_iter()
        .map(gen_task)
        .collect()
}

/// Base encoder for one seed and its pretext log (empty for a random base).
pub fn build_base(
    cfg: &ExperimentConfig,
    datasets: &[TaskDataset],
    seed: u64,
) -> Result<(MlpEncoder, TrainLog)> {
    let mut pre = cfg.pretrain.clone();
    pre.seed = seed;
    if cfg.model.base == BaseKind::Random {
        pre.epochs = 0;
    }
    let out = pretrain_base(datasets, &cfg.architecture(), cfg.model.use_bias, &pre)?;
    Ok((out.encoder, out.log))
}

/// Train every model for one seed: base, per-task fine-tunes, MTL, merges.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(SeedArtifacts, Vec<MergeRecord>)> {
    let datasets = generate_suite(cfg, seed)?;
    info!("seed {seed}: building base encoder");
    let (base, pretrain_log) =
        build_base(cfg, &datasets, seed).map_err(|e| stage("pretrain", e))?;

    info!("seed {seed}: fine-tuning {} tasks", datasets.len());
    let mut ft_cfg = cfg.finetune.clone();
    ft_cfg.seed = seed;
    let tuned: Vec<(TaskModel, TrainLog)> = datasets
        .par_iter()
        .map(|ds| finetune(&base, ds, cfg.model.use_bias, &ft_cfg))
        .collect::<Result<_>>()
        .map_err(|e| stage("finetune", e))?;
    let (finetuned, finetune_logs): (Vec<_>, Vec<_>) = tuned.into_iter().unzip();

    let mut mtl_cfg = cfg.mtl.clone();
    mtl_cfg.seed = seed;
    let mtl =
        train_mtl(&base, &datasets, cfg.model.use_bias, &mtl_cfg).map_err(|e| stage("mtl", e))?;

    info!("seed {seed}: merging");
    let val: Vec<_> = datasets.iter().map(|d| d.batch(Split::Val)).collect();
    let encoders: Vec<ModelParams> = finetuned
        .iter()
        .map(|m| m.encoder.params().clone())
        .collect();
    let mut merged = Vec::new();
    let mut records = Vec::new();
    for spec in &cfg.merges {
        let (lambda, sweep) = match (spec.method.uses_lambda(), spec.lambda) {
            (false, _) => (None, Vec::new()),
            (true, Some(l)) => (Some(l), Vec::new()),
            (true, None) => {
                let choice = select_lambda(base.params(), &finetuned, &val, spec, &cfg.lambda_grid)
                    .map_err(|e| stage("merge", e))?;
                (Some(choice.lambda), choice.sweep)
            }
        };
        let params = merge_with_lambda(base.params(), &encoders, spec, lambda.unwrap_or(1.0))
            .map_err(|e| stage("merge", e))?;
        let encoder = MlpEncoder::from_params(&params)?;
        let val_accuracy = crate::merging::mean_head_accuracy(&encoder, &finetuned, &val)?;
        records.push(MergeRecord {
            seed,
            method: spec.method,
            lambda,
            val_accuracy,
            sweep,
        });
        merged.push((spec.clone(), lambda, encoder));
    }
    Ok((
        SeedArtifacts {
            seed,
            datasets,
            base,
            pretrain_log,
            finetuned,
            finetune_logs,
            mtl,
            merged,
        },
        records,
    ))
}

fn stage(name: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{name} stage: {m}")),
        Error::Data(m) => Error::Data(format!("{name} stage: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("{name} stage: {m}")),
        Error::Shape(m) => Error::Shape(format!("{name} stage: {m}")),
        Error::Structure(m) => Error::Structure(format!("{name} stage: {m}")),
        other => other,
    }
}

/// One model to be evaluated on one task.
struct EvalJob<'a> {
    model: &'static str,
    method: String,
    encoder: &'a MlpEncoder,
    teacher: TaskModel,
    ds: &'a TaskDataset,
}

/// Every configured protocol for one (model, task).
pub fn evaluate_protocols(
    cfg: &ExperimentConfig,
    seed: u64,
    model: &str,
    method: &str,
    encoder: &MlpEncoder,
    teacher: &TaskModel,
    ds: &TaskDataset,
) -> Result<(Vec<ReportRow>, Vec<AlignmentRecord>)> {
    let test = ds.batch(Split::Test);
    let task = ds.task_id;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    let mut record = |protocol: Protocol, tag: &str, out: &crate::protocols::AlignedEval| {
        records.push(AlignmentRecord {
            seed,
            model: model.to_string(),
            method: method.to_string(),
            protocol,
            task,
            k_or_fraction: tag.to_string(),
            kl_first: out.model.kl_history.first().copied().unwrap_or(f64::NAN),
            kl_last: out.model.kl_history.last().copied().unwrap_or(f64::NAN),
            orth_penalty: out.model.normalized_orth_penalty(),
        });
    };
    for &protocol in &cfg.protocols {
        match protocol {
            Protocol::Current => {
                let acc = current_eval(encoder, &teacher.head, &test)?;
                rows.push(ReportRow::new(
                    model, method, protocol, task, "-", seed, acc,
                ));
            }
            Protocol::Knn => {
                let anchors = sample_few_shot(
                    ds,
                    cfg.knn.k,
                    cfg.knn.split,
                    alignment_seed(seed, task, protocol),
                )?;
                let acc = knn_eval(encoder, &anchors.features(ds), &test)?;
                rows.push(ReportRow::new(
                    model,
                    method,
                    protocol,
                    task,
                    cfg.knn.k.to_string(),
                    seed,
                    acc,
                ));
            }
            Protocol::FtClassifier => {
                let split = cfg.alignment.split;
                let sources = cfg
                    .classifier_ks()
                    .into_iter()
                    .map(|k| DataSource::FewShot { k, split })
                    .chain(
                        cfg.fraction_sweep
                            .iter()
                            .map(|&fraction| DataSource::Fraction { fraction, split }),
                    );
                for source in sources {
                    let tag = source.tag();
                    let acfg = cfg.alignment_config(
                        AlignVariant::ClassifierW,
                        source,
                        alignment_seed(seed, task, protocol),
                    );
                    let out = ft_classifier_eval(encoder, teacher, ds, &test, &acfg)?;
                    record(protocol, &tag, &out);
                    rows.push(ReportRow::new(
                        model,
                        method,
                        protocol,
                        task,
                        tag,
                        seed,
                        out.accuracy,
                    ));
                }
            }
            Protocol::AlignedM | Protocol::OrthM => {
                let source = DataSource::FewShot {
                    k: cfg.k,
                    split: cfg.alignment.split,
                };
                let tag = source.tag();
                let variant = protocol.variant().expect("mapping protocol");
                let acfg =
                    cfg.alignment_config(variant, source, alignment_seed(seed, task, protocol));
                let out = aligned_m_eval(encoder, teacher, ds, &test, &acfg)?;
                record(protocol, &tag, &out);
                rows.push(ReportRow::new(
                    model,
                    method,
                    protocol,
                    task,
                    tag,
                    seed,
                    out.accuracy,
                ));
            }
        }
    }
    Ok((rows, records))
}

/// Evaluate every model of one seed.
pub fn evaluate_seed(
    cfg: &ExperimentConfig,
    art: &SeedArtifacts,
) -> Result<(Vec<ReportRow>, Vec<AlignmentRecord>)> {
    let mut jobs = Vec::new();
    for (ft, ds) in art.finetuned.iter().zip(&art.datasets) {
        jobs.push(EvalJob {
            model: "finetuned",
            method: "ft".into(),
            encoder: &ft.encoder,
            teacher: ft.clone(),
            ds,
        });
    }
    for (t, ds) in art.datasets.iter().enumerate() {
        jobs.push(EvalJob {
            model: "mtl",
            method: "mtl".into(),
            encoder: &art.mtl.encoder,
            teacher: art.mtl.task_model(t)?,
            ds,
        });
    }
    for (ft, ds) in art.finetuned.iter().zip(&art.datasets) {
        jobs.push(EvalJob {
            model: "base",
            method: "base".into(),
            encoder: &art.base,
            teacher: ft.clone(),
            ds,
        });
    }
    for (spec, _, encoder) in &art.merged {
        for (ft, ds) in art.finetuned.iter().zip(&art.datasets) {
            jobs.push(EvalJob {
                model: "merged",
                method: spec.method.tag().to_string(),
                encoder,
                teacher: ft.clone(),
                ds,
            });
        }
    }
    let results: Vec<(Vec<ReportRow>, Vec<AlignmentRecord>)> = jobs
        .par_iter()
        .map(|j| {
            evaluate_protocols(
                cfg, art.seed, j.model, &j.method, j.encoder, &j.teacher, j.ds,
            )
        })
        .collect::<Result<_>>()
        .map_err(|e| stage("evaluate", e))?;
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (r, a) in results {
        rows.extend(r);
        records.extend(a);
    }
    Ok((rows, records))
}

/// Mean and spread across seeds of the task-mean accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub method: String,
    pub protocol: Protocol,
    pub k_or_fraction: String,
    pub seeds: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

pub const SUMMARY_HEADER: &str = "model,method,protocol,k_or_fraction,seeds,mean,std";

pub fn summarize(report: &EvalReport) -> Vec<SummaryRow> {
    let mut groups: Vec<(String, String, Protocol, String, Vec<f64>)> = Vec::new();
    for avg in EvalReport::compute_averages(&report.rows) {
        let k = &avg.key;
        match groups.iter_mut().find(|g| {
            g.0 == k.model && g.1 == k.method && g.2 == k.protocol && g.3 == k.k_or_fraction
        }) {
            Some(g) => g.4.push(avg.accuracy),
            None => groups.push((
                k.model.clone(),
                k.method.clone(),
                k.protocol,
                k.k_or_fraction.clone(),
                vec![avg.accuracy],
            )),
        }
    }
    groups
        .into_iter()
        .map(|(model, method, protocol, k_or_fraction, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                model,
                method,
                protocol,
                k_or_fraction,
                seeds: v.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn write_summary_csv<W: std::io::Write>(
    rows: &[SummaryRow],
    digest: &str,
    mut out: W,
) -> Result<()> {
    let io = |e| Error::io("<summary>", e);
    writeln!(out, "# config_digest: {digest}").map_err(io)?;
    writeln!(out, "{SUMMARY_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.model, r.method, r.protocol, r.k_or_fraction, r.seeds, r.mean, r.std
        )
        .map_err(io)?;
    }
    Ok(())
}

type SeedOutput = (
    SeedArtifacts,
    Vec<MergeRecord>,
    Vec<ReportRow>,
    Vec<AlignmentRecord>,
);

/// Train and evaluate every seed (in parallel, results in seed order).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let digest = cfg.digest();
    let per_seed: Vec<SeedOutput> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let (art, merges) = train_seed(cfg, seed)?;
            let (rows, align) = evaluate_seed(cfg, &art)?;
            Ok((art, merges, rows, align))
        })
        .collect::<Result<_>>()?;

    let mut report = EvalReport::new(digest);
    let mut diagnostics = Diagnostics::default();
    let mut seeds = Vec::new();
    for (art, merges, rows, align) in per_seed {
        report.rows.extend(rows);
        diagnostics.merges.extend(merges);
        diagnostics.alignment.extend(align);
        diagnostics.training.push(TrainingRecord {
            seed: art.seed,
            stage: "pretrain".into(),
            task: None,
            train_losses: art.pretrain_log.train_losses(),
        });
        for (ft, log) in art.finetuned.iter().zip(&art.finetune_logs) {
            diagnostics.training.push(TrainingRecord {
                seed: art.seed,
                stage: "finetune".into(),
                task: Some(ft.task_id),
                train_losses: log.train_losses(),
            });
        }
        diagnostics.training.push(TrainingRecord {
            seed: art.seed,
            stage: "mtl".into(),
            task: None,
            train_losses: art.mtl.log.train_losses(),
        });
        seeds.push(art);
    }
    report.finalize();
    report.check_consistency()?;
    let summary = summarize(&report);
    Ok(ExperimentOutcome {
        report,
        summary,
        diagnostics,
        seeds,
    })
}

/// Sidecar metadata written next to every artifact as `<file>.meta.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_digest: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub sha256: String,
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".meta.json");
    path.with_file_name(name)
}

impl ArtifactMeta {
    /// Describe an already written file and save the sidecar.
    pub fn write_for(
        path: &Path,
        config_digest: &str,
        kind: &str,
        seed: Option<u64>,
        task: Option<usize>,
        method: Option<String>,
    ) -> Result<Self> {
        let meta = Self {
            config_digest: config_digest.to_string(),
            kind: kind.to_string(),
            seed,
            task,
            method,
            sha256: file_digest(path)?,
        };
        let sidecar = meta_path(path);
        let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
        std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
        Ok(meta)
    }

    /// Sidecar of `path`, if one exists.
    pub fn read_for(path: &Path) -> Result<Option<Self>> {
        let sidecar = meta_path(path);
        if !sidecar.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Error::Data(format!("{}: {e}", sidecar.display())))
    }
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn dataset_paths(dir: &Path, task: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("task{task}.csv")),
        dir.join(format!("task{task}.splits.csv")),
    )
}

/// Dataset CSV, split file and their sidecars.
pub fn write_dataset_artifacts(
    dir: &Path,
    ds: &TaskDataset,
    digest: &str,
    seed: u64,
) -> Result<()> {
    create_dir(dir)?;
    let (data, splits) = dataset_paths(dir, ds.task_id);
    save_dataset(ds, &data, &splits)?;
    ArtifactMeta::write_for(&data, digest, "dataset", Some(seed), Some(ds.task_id), None)?;
    ArtifactMeta::write_for(
        &splits,
        digest,
        "splits",
        Some(seed),
        Some(ds.task_id),
        None,
    )?;
    Ok(())
}

pub fn write_checkpoint_artifact(
    path: &Path,
    params: &ModelParams,
    digest: &str,
    kind: &str,
    seed: Option<u64>,
    task: Option<usize>,
    method: Option<String>,
) -> Result<ArtifactMeta> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    save_checkpoint(params, path)?;
    ArtifactMeta::write_for(path, digest, kind, seed, task, method)
}

fn write_log(
    path: &Path,
    log: &TrainLog,
    digest: &str,
    seed: u64,
    task: Option<usize>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    log.write_csv(std::io::BufWriter::new(file))
        .map_err(|e| Error::io(path, e))?;
    ArtifactMeta::write_for(path, digest, "train-log", Some(seed), task, None)?;
    Ok(())
}

fn write_seed_artifacts(dir: &Path, art: &SeedArtifacts, digest: &str) -> Result<()> {
    let seed = art.seed;
    let data_dir = dir.join("data");
    for ds in &art.datasets {
        write_dataset_artifacts(&data_dir, ds, digest, seed)?;
    }
    let ckpt = dir.join("checkpoints");
    let logs = dir.join("logs");
    create_dir(&logs)?;
    write_checkpoint_artifact(
        &ckpt.join("base.ckpt"),
        art.base.params(),
        digest,
        "encoder",
        Some(seed),
        None,
        None,
    )?;
    write_log(
        &logs.join("pretrain.csv"),
        &art.pretrain_log,
        digest,
        seed,
        None,
    )?;
    for (ft, log) in art.finetuned.iter().zip(&art.finetune_logs) {
        let t = ft.task_id;
        write_checkpoint_artifact(
            &ckpt.join(format!("ft_task{t}.ckpt")),
            &ft.to_params(),
            digest,
            "task-model",
            Some(seed),
            Some(t),
            None,
        )?;
        write_log(
            &logs.join(format!("ft_task{t}.csv")),
            log,
            digest,
            seed,
            Some(t),
        )?;
    }
    write_checkpoint_artifact(
        &ckpt.join("mtl.ckpt"),
        &art.mtl.to_params(),
        digest,
        "mtl",
        Some(seed),
        None,
        None,
    )?;
    write_log(&logs.join("mtl.csv"), &art.mtl.log, digest, seed, None)?;
    for (spec, lambda, enc) in &art.merged {
        let tag = spec.method.tag();
        let path = ckpt.join(format!("merged_{tag}.ckpt"));
        let out = write_checkpoint_artifact(
            &path,
            enc.params(),
            digest,
            "merged",
            Some(seed),
            None,
            Some(tag.into()),
        )?;
        let input = |p: PathBuf| -> Result<crate::merging::ManifestInput> {
            Ok(crate::merging::ManifestInput {
                sha256: file_digest(&p)?,
                path: p,
            })
        };
        let manifest = crate::merging::MergeManifest {
            method: spec.method,
            lambda: *lambda,
            keep_fraction: (spec.method == MergeMethod::Ties).then_some(spec.keep_fraction),
            base: spec
                .method
                .uses_lambda()
                .then(|| input(ckpt.join("base.ckpt")))
                .transpose()?,
            inputs: art
                .finetuned
                .iter()
                .map(|ft| input(ckpt.join(format!("ft_task{}.ckpt", ft.task_id))))
                .collect::<Result<_>>()?,
            output: crate::merging::ManifestInput {
                path: path.clone(),
                sha256: out.sha256,
            },
            config_digest: Some(digest.to_string()),
        };
        manifest.save(ckpt.join(format!("merged_{tag}.manifest.json")))?;
    }
    Ok(())
}

/// Write reports (and artifacts when enabled) under `dir`.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    outcome: &ExperimentOutcome,
    dir: &Path,
) -> Result<()> {
    create_dir(dir)?;
    let digest = &outcome.report.config_digest;
    outcome.report.save_csv(dir.join("report.csv"))?;
    let json = dir.join("report.json");
    std::fs::write(&json, outcome.report.to_json() + "\n").map_err(|e| Error::io(&json, e))?;
    let summary = dir.join("summary.csv");
    let file = std::fs::File::create(&summary).map_err(|e| Error::io(&summary, e))?;
    write_summary_csv(&outcome.summary, digest, std::io::BufWriter::new(file))?;

    #[derive(Serialize)]
    struct DiagnosticsFile<'a> {
        config_digest: &'a str,
        merges: &'a [MergeRecord],
        alignment: &'a [AlignmentRecord],
        training: &'a [TrainingRecord],
    }
    let diag = DiagnosticsFile {
        config_digest: digest,
        merges: &outcome.diagnostics.merges,
        alignment: &outcome.diagnostics.alignment,
        training: &outcome.diagnostics.training,
    };
    let path = dir.join("diagnostics.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&diag).expect("serializes") + "\n",
    )
    .map_err(|e| Error::io(&path, e))?;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json() + "\n").map_err(|e| Error::io(&path, e))?;

    if cfg.save_artifacts {
        for art in &outcome.seeds {
            write_seed_artifacts(&dir.join(format!("seed_{}", art.seed)), art, digest)?;
        }
    }
    Ok(())
}
