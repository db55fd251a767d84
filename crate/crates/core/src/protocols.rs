//! Evaluation protocols for merged encoders: the current protocol (merged
//! encoder with each task's own head), nearest-anchor KNN, and the aligned
//! protocols that learn either a new classifier or a d×d mapping `M` against
//! the fine-tuned model's soft outputs on unlabeled samples.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{predictions, ClassifierHead, Layer, MlpEncoder, ModelParams, TaskModel};
use crate::numkit::{
    argmin, euclidean_distance, orth_penalty, orth_penalty_subgradient, softmax_rows, Matrix,
};
use crate::synthdata::{sample_few_shot, sample_fraction, LabeledBatch, Split, TaskDataset};
use crate::training::{adam_step, AdamConfig, AdamState};

/// `correct / total`, kept as counts so the ratio is exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn from_predictions(pred: &[usize], labels: &[usize]) -> Self {
        Self {
            correct: pred.iter().zip(labels).filter(|(p, y)| p == y).count(),
            total: labels.len(),
        }
    }

    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Merged encoder followed by a task's own head.
pub fn current_eval(
    encoder: &MlpEncoder,
    head: &ClassifierHead,
    test: &LabeledBatch,
) -> Result<Accuracy> {
    let logits = head.logits(&encoder.encode(&test.x)?)?;
    Ok(Accuracy::from_predictions(
        &predictions(&logits),
        &test.labels,
    ))
}

/// Class minimizing the mean Euclidean distance to its anchors; ties go to
/// the lowest class index.
pub fn knn_predict(class_anchors: &[Matrix], emb: &Matrix) -> Result<Vec<usize>> {
    if class_anchors.is_empty() {
        return Err(Error::Config("KNN needs at least one class".into()));
    }
    if let Some(c) = class_anchors.iter().position(|a| a.rows() == 0) {
        return Err(Error::Config(format!("class {c} has no anchors")));
    }
    emb.row_iter()
        .map(|e| {
            let means = class_anchors
                .iter()
                .map(|anchors| {
                    let total = anchors
                        .row_iter()
                        .map(|a| euclidean_distance(e, a))
                        .sum::<Result<f64>>()?;
                    Ok(total / anchors.rows() as f64)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(argmin(&means))
        })
        .collect()
}

/// KNN with raw anchor samples embedded by the same encoder as the test set.
pub fn knn_eval(
    encoder: &MlpEncoder,
    anchor_inputs: &[Matrix],
    test: &LabeledBatch,
) -> Result<Accuracy> {
    let anchors = anchor_inputs
        .iter()
        .map(|x| encoder.encode(x))
        .collect::<Result<Vec<_>>>()?;
    let pred = knn_predict(&anchors, &encoder.encode(&test.x)?)?;
    Ok(Accuracy::from_predictions(&pred, &test.labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AlignVariant {
    /// New head initialized from the task head, weight and bias trainable.
    #[serde(rename = "classifier-w")]
    ClassifierW,
    /// Square mapping inserted before the frozen head.
    #[serde(rename = "mapping-m")]
    MappingM,
    /// Mapping with an ℓ₁ orthogonality penalty.
    #[serde(rename = "orth-mapping-m")]
    OrthMappingM,
}

/// Samples the aligner is trained on; labels are never used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    FewShot { k: usize, split: Split },
    Fraction { fraction: f64, split: Split },
    Full { split: Split },
}

impl DataSource {
    /// Value for the `k_or_fraction` report column.
    pub fn tag(&self) -> String {
        match self {
            Self::FewShot { k, .. } => k.to_string(),
            Self::Fraction { fraction, .. } => format!("{fraction:?}"),
            Self::Full { .. } => "all".to_string(),
        }
    }

    /// Draw the alignment inputs from `ds`.
    pub fn inputs(&self, ds: &TaskDataset, seed: u64) -> Result<Matrix> {
        match *self {
            Self::FewShot { k, split } => {
                let anchors = sample_few_shot(ds, k, split, seed)?;
                Ok(anchors.batch(ds).x)
            }
            Self::Fraction { fraction, split } => {
                let idx = sample_fraction(ds, fraction, split, seed)?;
                Ok(ds.rows(&idx).x)
            }
            Self::Full { split } => Ok(ds.batch(split).x),
        }
    }
}

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentConfig {
    pub variant: AlignVariant,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_align_epochs")]
    pub epochs: usize,
    #[serde(default = "default_align_lr")]
    pub learning_rate: f64,
    pub source: DataSource,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}
fn default_align_epochs() -> usize {
    200
}
fn default_align_lr() -> f64 {
    1e-2
}

impl AlignmentConfig {
    /// Few-shot defaults: k per class from the test split, Adam lr 1e-2,
    /// 200 full-batch epochs.
    pub fn few_shot(variant: AlignVariant, k: usize, seed: u64) -> Self {
        Self {
            variant,
            alpha: DEFAULT_ALPHA,
            epochs: default_align_epochs(),
            learning_rate: default_align_lr(),
            source: DataSource::FewShot {
                k,
                split: Split::Test,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "alignment learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        match self.source {
            DataSource::FewShot { k: 0, .. } => {
                Err(Error::Config("few-shot k must be at least 1".into()))
            }
            DataSource::Fraction { fraction, .. } if !(fraction > 0.0 && fraction <= 1.0) => {
                Err(Error::Config(format!(
                    "sample fraction must lie in (0, 1], got {fraction}"
                )))
            }
            _ => Ok(()),
        }
    }
}

const MAP_NAME: &str = "align.m";
const WEIGHT_NAME: &str = "align.weight";
const BIAS_NAME: &str = "align.bias";

/// KL(teacher ‖ student) averaged per sample, optionally plus the
/// orthogonality penalty on `M`, as a function of the trainable tensors.
#[derive(Clone, Debug)]
pub struct AlignmentObjective {
    variant: AlignVariant,
    alpha: f64,
    emb: Matrix,
    targets: Matrix,
    head: ClassifierHead,
}

/// Loss value split into its terms, with the gradient of their sum.
#[derive(Clone, Debug)]
pub struct AlignmentLoss {
    pub kl: f64,
    pub penalty: f64,
    pub total: f64,
    pub grad: ModelParams,
}

impl AlignmentObjective {
    /// `emb`: frozen student embeddings; `targets`: teacher distributions;
    /// `head`: the task's fine-tuned head.
    pub fn new(
        variant: AlignVariant,
        alpha: f64,
        emb: Matrix,
        targets: Matrix,
        head: ClassifierHead,
    ) -> Result<Self> {
        if emb.rows() == 0 {
            return Err(Error::Config("alignment needs at least one sample".into()));
        }
        if emb.rows() != targets.rows() || targets.cols() != head.num_classes() {
            return Err(Error::Shape(format!(
                "{} embeddings, {}x{} targets, head with {} classes",
                emb.rows(),
                targets.rows(),
                targets.cols(),
                head.num_classes()
            )));
        }
        if emb.cols() != head.embed_dim() {
            return Err(Error::Shape(format!(
                "student embeddings have dimension {}, head expects {}",
                emb.cols(),
                head.embed_dim()
            )));
        }
        Ok(Self {
            variant,
            alpha,
            emb,
            targets,
            head,
        })
    }

    /// Trainable tensors at their initial values: the head's weight and
    /// bias, or the identity mapping.
    pub fn initial_params(&self) -> ModelParams {
        let layers = match self.variant {
            AlignVariant::ClassifierW => {
                let mut l = vec![Layer::from_matrix(WEIGHT_NAME, self.head.weight())];
                if let Some(b) = self.head.bias() {
                    l.push(Layer::from_vector(BIAS_NAME, b));
                }
                l
            }
            AlignVariant::MappingM | AlignVariant::OrthMappingM => {
                vec![Layer::from_matrix(
                    MAP_NAME,
                    &Matrix::identity(self.head.embed_dim()),
                )]
            }
        };
        ModelParams::from_layers(layers).expect("distinct names")
    }

    fn uses_penalty(&self) -> bool {
        self.variant == AlignVariant::OrthMappingM
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<AlignmentLoss> {
        self.initial_params().check_homologous(params)?;
        let (logits, mapped, map) = match self.variant {
            AlignVariant::ClassifierW => {
                let head = aligned_head(params)?;
                (head.logits(&self.emb)?, None, None)
            }
            _ => {
                let m = params.require(MAP_NAME)?.to_matrix()?;
                let mapped = self.emb.matmul(&m)?;
                (self.head.logits(&mapped)?, Some(mapped), Some(m))
            }
        };
        let n = self.emb.rows() as f64;
        let q = softmax_rows(&logits)?;
        let mut kl = 0.0;
        let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
        for i in 0..logits.rows() {
            let z = logits.row(i);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, (&p, &zj)) in self.targets.row(i).iter().zip(z).enumerate() {
                if p > 0.0 {
                    kl += p * (p.ln() - (zj - lse));
                }
                d_logits.set(i, j, (q.get(i, j) - p) / n);
            }
        }
        kl /= n;

        let (penalty, grad) = match (mapped, map) {
            (None, _) => {
                let mut l = vec![Layer::from_matrix(
                    WEIGHT_NAME,
                    &self.emb.transpose().matmul(&d_logits)?,
                )];
                if self.head.has_bias() {
                    l.push(Layer::from_vector(BIAS_NAME, &d_logits.column_sums()));
                }
                (0.0, ModelParams::from_layers(l)?)
            }
            (Some(_), Some(m)) => {
                // z = (E·M)·W + b  ⇒  ∂L/∂M = Eᵀ·(∂L/∂z)·Wᵀ
                let mut g = self
                    .emb
                    .transpose()
                    .matmul(&d_logits.matmul(&self.head.weight().transpose())?)?;
                let mut penalty = 0.0;
                if self.uses_penalty() {
                    penalty = self.alpha * orth_penalty(&m)?;
                    g = g.add(&orth_penalty_subgradient(&m)?.scale(self.alpha))?;
                }
                (
                    penalty,
                    ModelParams::from_layers(vec![Layer::from_matrix(MAP_NAME, &g)])?,
                )
            }
            (Some(_), None) => unreachable!("mapping variants always carry M"),
        };
        Ok(AlignmentLoss {
            kl,
            penalty,
            total: kl + penalty,
            grad,
        })
    }
}

fn aligned_head(params: &ModelParams) -> Result<ClassifierHead> {
    let w = params.require(WEIGHT_NAME)?.to_matrix()?;
    let b = params.get(BIAS_NAME).map(|l| l.values().to_vec());
    ClassifierHead::new(w, b)
}

/// Outcome of alignment training.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedModel {
    pub variant: AlignVariant,
    /// Trained `M` for the mapping variants.
    pub mapping: Option<Matrix>,
    /// Trained head for `ClassifierW`, otherwise the frozen task head.
    pub head: ClassifierHead,
    /// KL term before every update plus the value after the last one.
    pub kl_history: Vec<f64>,
}

impl AlignedModel {
    pub fn logits(&self, emb: &Matrix) -> Result<Matrix> {
        match &self.mapping {
            Some(m) => self.head.logits(&emb.matmul(m)?),
            None => self.head.logits(emb),
        }
    }

    /// `‖MᵀM − I‖₁ / d²`, for mapping variants.
    pub fn normalized_orth_penalty(&self) -> Option<f64> {
        self.mapping.as_ref().map(|m| {
            let d = m.rows() as f64;
            orth_penalty(m).expect("square mapping") / (d * d)
        })
    }

    pub fn evaluate(&self, encoder: &MlpEncoder, test: &LabeledBatch) -> Result<Accuracy> {
        let logits = self.logits(&encoder.encode(&test.x)?)?;
        Ok(Accuracy::from_predictions(
            &predictions(&logits),
            &test.labels,
        ))
    }
}

/// Fit the variant's trainable tensors so the merged pipeline reproduces the
/// frozen fine-tuned model's output distribution on `inputs`, with
/// full-batch Adam.
pub fn train_alignment(
    merged: &MlpEncoder,
    finetuned: &TaskModel,
    inputs: &Matrix,
    cfg: &AlignmentConfig,
) -> Result<AlignedModel> {
    cfg.validate()?;
    if inputs.rows() == 0 {
        return Err(Error::Config("alignment data is empty".into()));
    }
    if merged.embed_dim() != finetuned.encoder.embed_dim() {
        return Err(Error::Shape(format!(
            "merged encoder embeds into {} dimensions, fine-tuned into {}",
            merged.embed_dim(),
            finetuned.encoder.embed_dim()
        )));
    }
    let targets = softmax_rows(&finetuned.logits(inputs)?)?;
    let objective = AlignmentObjective::new(
        cfg.variant,
        cfg.alpha,
        merged.encode(inputs)?,
        targets,
        finetuned.head.clone(),
    )?;
    let mut params = objective.initial_params();
    let mut state = AdamState::new(&params);
    let adam = AdamConfig::with_learning_rate(cfg.learning_rate);
    let mut kl_history = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..cfg.epochs {
        let loss = objective.evaluate(&params)?;
        if !loss.total.is_finite() {
            return Err(Error::Numeric(format!(
                "alignment loss became non-finite at epoch {epoch}"
            )));
        }
        kl_history.push(loss.kl);
        adam_step(&mut params, &loss.grad, &mut state, &adam)?;
    }
    kl_history.push(objective.evaluate(&params)?.kl);

    let (mapping, head) = match cfg.variant {
        AlignVariant::ClassifierW => (None, aligned_head(&params)?),
        _ => (
            Some(params.require(MAP_NAME)?.to_matrix()?),
            finetuned.head.clone(),
        ),
    };
    Ok(AlignedModel {
        variant: cfg.variant,
        mapping,
        head,
        kl_history,
    })
}

/// Accuracy together with the aligner that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedEval {
    pub accuracy: Accuracy,
    pub model: AlignedModel,
}

/// Train a new classifier on unlabeled samples from `ds` against the
/// fine-tuned teacher, then score it on `test`.
pub fn ft_classifier_eval(
    merged: &MlpEncoder,
    finetuned: &TaskModel,
    ds: &TaskDataset,
    test: &LabeledBatch,
    cfg: &AlignmentConfig,
) -> Result<AlignedEval> {
    if cfg.variant != AlignVariant::ClassifierW {
        return Err(Error::Config(format!(
            "FT-Classifier evaluation needs the classifier-w variant, got {:?}",
            cfg.variant
        )));
    }
    aligned_eval(merged, finetuned, ds, test, cfg)
}

/// Train `M` (optionally orthogonality-regularized) and score `emb·M·W + b`.
pub fn aligned_m_eval(
    merged: &MlpEncoder,
    finetuned: &TaskModel,
    ds: &TaskDataset,
    test: &LabeledBatch,
    cfg: &AlignmentConfig,
) -> Result<AlignedEval> {
    if cfg.variant == AlignVariant::ClassifierW {
        return Err(Error::Config(
            "aligned-M evaluation needs a mapping variant".into(),
        ));
    }
    aligned_eval(merged, finetuned, ds, test, cfg)
}

fn aligned_eval(
    merged: &MlpEncoder,
    finetuned: &TaskModel,
    ds: &TaskDataset,
    test: &LabeledBatch,
    cfg: &AlignmentConfig,
) -> Result<AlignedEval> {
    let inputs = cfg.source.inputs(ds, cfg.seed)?;
    let model = train_alignment(merged, finetuned, &inputs, cfg)?;
    Ok(AlignedEval {
        accuracy: model.evaluate(merged, test)?,
        model,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "current")]
    Current,
    #[serde(rename = "knn")]
    Knn,
    #[serde(rename = "ft-classifier")]
    FtClassifier,
    #[serde(rename = "aligned-m")]
    AlignedM,
    #[serde(rename = "orth-m")]
    OrthM,
}

impl Protocol {
    pub const ALL: [Protocol; 5] = [
        Self::Current,
        Self::Knn,
        Self::FtClassifier,
        Self::AlignedM,
        Self::OrthM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Current => "current",
            Self::Knn => "knn",
            Self::FtClassifier => "ft-classifier",
            Self::AlignedM => "aligned-m",
            Self::OrthM => "orth-m",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown protocol {s:?} (expected one of current, knn, ft-classifier, aligned-m, orth-m)"
                ))
            })
    }

    /// Alignment variant trained by this protocol, if any.
    pub fn variant(self) -> Option<AlignVariant> {
        match self {
            Self::FtClassifier => Some(AlignVariant::ClassifierW),
            Self::AlignedM => Some(AlignVariant::MappingM),
            Self::OrthM => Some(AlignVariant::OrthMappingM),
            _ => None,
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Base encoder in place of the merged one, under the current and
/// FT-Classifier protocols. `cfg_for(task)` supplies each task's
/// FT-Classifier configuration.
pub fn base_model_eval(
    base: &MlpEncoder,
    finetuned: &[TaskModel],
    datasets: &[TaskDataset],
    seed: u64,
    cfg_for: impl Fn(usize) -> AlignmentConfig,
) -> Result<Vec<ReportRow>> {
    if finetuned.len() != datasets.len() {
        return Err(Error::Config(format!(
            "{} fine-tuned models for {} datasets",
            finetuned.len(),
            datasets.len()
        )));
    }
    let mut rows = Vec::new();
    for (model, ds) in finetuned.iter().zip(datasets) {
        let test = ds.batch(Split::Test);
        let acc = current_eval(base, &model.head, &test)?;
        rows.push(ReportRow::new(
            "base",
            "base",
            Protocol::Current,
            ds.task_id,
            "-",
            seed,
            acc,
        ));
        let cfg = cfg_for(ds.task_id);
        let tag = cfg.source.tag();
        let out = ft_classifier_eval(base, model, ds, &test, &cfg)?;
        rows.push(ReportRow::new(
            "base",
            "base",
            Protocol::FtClassifier,
            ds.task_id,
            tag,
            seed,
            out.accuracy,
        ));
    }
    Ok(rows)
}

/// One accuracy measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `finetuned`, `mtl`, `base` or `merged`.
    pub model: String,
    /// `ft`, `mtl`, `base`, or the merge method tag.
    pub method: String,
    pub protocol: Protocol,
    pub task: usize,
    /// Few-shot k, sample fraction, `all`, or `-` when no data is drawn.
    pub k_or_fraction: String,
    pub seed: u64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

impl ReportRow {
    pub fn new(
        model: &str,
        method: &str,
        protocol: Protocol,
        task: usize,
        k_or_fraction: impl Into<String>,
        seed: u64,
        acc: Accuracy,
    ) -> Self {
        Self {
            model: model.to_string(),
            method: method.to_string(),
            protocol,
            task,
            k_or_fraction: k_or_fraction.into(),
            seed,
            accuracy: acc.value(),
            correct: acc.correct,
            total: acc.total,
        }
    }

    /// Everything identifying the measurement except the task.
    pub fn group_key(&self) -> GroupKey {
        GroupKey {
            model: self.model.clone(),
            method: self.method.clone(),
            protocol: self.protocol,
            k_or_fraction: self.k_or_fraction.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub model: String,
    pub method: String,
    pub protocol: Protocol,
    pub k_or_fraction: String,
    pub seed: u64,
}

/// Task-mean accuracy of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    #[serde(flatten)]
    pub key: GroupKey,
    pub tasks: usize,
    pub accuracy: f64,
}

pub const REPORT_HEADER: &str = "model,method,protocol,task,k_or_fraction,seed,accuracy";
const DIGEST_PREFIX: &str = "# config_digest: ";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub rows: Vec<ReportRow>,
    pub averages: Vec<AverageRow>,
}

impl EvalReport {
    pub fn new(config_digest: impl Into<String>) -> Self {
        Self {
            config_digest: config_digest.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    /// Recompute the task-mean rows from `rows`.
    pub fn compute_averages(rows: &[ReportRow]) -> Vec<AverageRow> {
        let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
        for r in rows {
            groups.entry(r.group_key()).or_default().push(r.accuracy);
        }
        groups
            .into_iter()
            .map(|(key, accs)| AverageRow {
                key,
                tasks: accs.len(),
                accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
            })
            .collect()
    }

    pub fn finalize(&mut self) {
        self.averages = Self::compute_averages(&self.rows);
    }

    /// Stored averages must match the rows they summarize.
    pub fn check_consistency(&self) -> Result<()> {
        for r in &self.rows {
            if !(0.0..=1.0).contains(&r.accuracy)
                || (r.total > 0 && r.accuracy != r.correct as f64 / r.total as f64)
            {
                return Err(Error::Data(format!(
                    "row {}/{}/{} task {} has accuracy {} for {}/{}",
                    r.model, r.method, r.protocol, r.task, r.accuracy, r.correct, r.total
                )));
            }
        }
        let fresh = Self::compute_averages(&self.rows);
        if fresh.len() != self.averages.len() {
            return Err(Error::Data(
                "stored averages do not cover the report rows".into(),
            ));
        }
        for (a, b) in fresh.iter().zip(&self.averages) {
            if a.key != b.key || a.tasks != b.tasks || (a.accuracy - b.accuracy).abs() > 1e-12 {
                return Err(Error::Data(format!(
                    "stored average for {:?} does not match its rows",
                    b.key
                )));
            }
        }
        Ok(())
    }

    /// Task-mean accuracy for one group, if present.
    pub fn mean(
        &self,
        model: &str,
        method: &str,
        protocol: Protocol,
        k_or_fraction: &str,
        seed: u64,
    ) -> Option<f64> {
        let rows: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| {
                r.model == model
                    && r.method == method
                    && r.protocol == protocol
                    && r.k_or_fraction == k_or_fraction
                    && r.seed == seed
            })
            .map(|r| r.accuracy)
            .collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }

    /// Digest line, header, then one line per row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut out = std::io::BufWriter::new(out);
        let io = |e| Error::io("<report>", e);
        writeln!(out, "{DIGEST_PREFIX}{}", self.config_digest).map_err(io)?;
        writeln!(out, "{REPORT_HEADER}").map_err(io)?;
        self.write_csv_rows(&mut out)?;
        out.flush().map_err(io)
    }

    fn write_csv_rows<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        for r in &self.rows {
            w.write_record([
                r.model.as_str(),
                r.method.as_str(),
                r.protocol.name(),
                &r.task.to_string(),
                &r.k_or_fraction,
                &r.seed.to_string(),
                &r.accuracy.to_string(),
            ])
            .map_err(|e| Error::Data(format!("writing report row: {e}")))?;
        }
        w.flush().map_err(|e| Error::io("<report>", e))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }

    /// Parse a report CSV. Correct/total counts are not part of the CSV and
    /// come back as zero.
    pub fn read_csv<R: BufRead>(mut input: R, origin: &str) -> Result<Self> {
        let mut first = String::new();
        input
            .read_line(&mut first)
            .map_err(|e| Error::io(origin, e))?;
        let digest = first
            .trim_end()
            .strip_prefix(DIGEST_PREFIX)
            .ok_or_else(|| Error::Data(format!("{origin}: missing config digest line")))?
            .to_string();
        let mut rdr = csv::ReaderBuilder::new().from_reader(input);
        let header = rdr
            .headers()
            .map_err(|e| Error::Data(format!("{origin}: {e}")))?;
        if header.iter().collect::<Vec<_>>().join(",") != REPORT_HEADER {
            return Err(Error::Data(format!("{origin}: unexpected report header")));
        }
        let mut report = Self::new(digest);
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("{origin}: {e}")))?;
            let bad = |what: &str| Error::Data(format!("{origin}: row {}: bad {what}", i + 1));
            report.rows.push(ReportRow {
                model: rec[0].to_string(),
                method: rec[1].to_string(),
                protocol: Protocol::parse(&rec[2]).map_err(|_| bad("protocol"))?,
                task: rec[3].parse().map_err(|_| bad("task"))?,
                k_or_fraction: rec[4].to_string(),
                seed: rec[5].parse().map_err(|_| bad("seed"))?,
                accuracy: rec[6].parse().map_err(|_| bad("accuracy"))?,
                correct: 0,
                total: 0,
            });
        }
        report.finalize();
        Ok(report)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), &path.display().to_string())
    }

    /// Append rows to an existing report CSV (creating it if absent),
    /// refusing to mix config digests.
    pub fn append_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if !path.exists() {
            return self.save_csv(path);
        }
        let existing = Self::load_csv(path)?;
        if existing.config_digest != self.config_digest {
            return Err(Error::Config(format!(
                "{} was produced under config digest {}, refusing to append rows from {}",
                path.display(),
                existing.config_digest,
                self.config_digest
            )));
        }
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        self.write_csv_rows(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("report JSON: {e}")))?;
        r.check_consistency()?;
        Ok(r)
    }
}

/// `task,split,label,e0..e{d−1}` rows for one dataset split.
pub fn write_embeddings<W: Write>(
    encoder: &MlpEncoder,
    ds: &TaskDataset,
    split: Split,
    out: W,
) -> Result<()> {
    let batch = ds.batch(split);
    let emb = encoder.encode(&batch.x)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["task".to_string(), "split".to_string(), "label".to_string()];
    header.extend((0..emb.cols()).map(|i| format!("e{i}")));
    let err = |e: csv::Error| Error::Data(format!("writing embeddings: {e}"));
    w.write_record(&header).map_err(err)?;
    for (row, label) in emb.row_iter().zip(&batch.labels) {
        let mut rec = vec![ds.task_id.to_string(), split.to_string(), label.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<embeddings>", e))
}

/// Mean of task-level `ModelParams`-free accuracies, for convenience.
pub fn mean_accuracy(accs: &[Accuracy]) -> f64 {
    if accs.is_empty() {
        return 0.0;
    }
    accs.iter().map(Accuracy::value).sum::<f64>() / accs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, HEAD_PREFIX};
    use crate::numkit::{random_orthogonal, Rng};
    use crate::synthdata::{gen_task, TaskSpec};
    use crate::training::{finetune, grad_check_fn, TrainConfig};

    fn linear_encoder(w: &Matrix) -> MlpEncoder {
        let p = ModelParams::from_layers(vec![
            Layer::from_matrix("enc.0.weight", w),
            Layer::from_vector("enc.0.bias", &vec![0.0; w.cols()]),
        ])
        .unwrap();
        MlpEncoder::from_params(&p).unwrap()
    }

    fn batch(rows: &[[f64; 2]], labels: &[usize]) -> LabeledBatch {
        LabeledBatch {
            x: Matrix::from_rows(rows).unwrap(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn zero_head_predicts_class_zero() {
        let enc = linear_encoder(&Matrix::identity(2));
        let head = ClassifierHead::new(Matrix::zeros(2, 3), Some(vec![0.0; 3])).unwrap();
        let test = batch(
            &[[1.0, 2.0], [3.0, 1.0], [0.0, 0.0], [5.0, 5.0]],
            &[0, 2, 0, 1],
        );
        assert_eq!(
            current_eval(&enc, &head, &test).unwrap(),
            Accuracy {
                correct: 2,
                total: 4
            }
        );
    }

    #[test]
    fn knn_hand_example() {
        let anchors = vec![
            Matrix::from_rows(&[[0.0, 0.0], [0.0, 2.0]]).unwrap(),
            Matrix::from_rows(&[[4.0, 0.0], [4.0, 2.0]]).unwrap(),
        ];
        let test = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        assert_eq!(knn_predict(&anchors, &test).unwrap(), vec![0]);
    }

    #[test]
    fn knn_exact_anchor_hit() {
        let anchors = vec![
            Matrix::from_rows(&[[0.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[[10.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[[0.0, 10.0]]).unwrap(),
        ];
        assert_eq!(
            knn_predict(&anchors, &Matrix::from_rows(&[[0.0, 10.0]]).unwrap()).unwrap(),
            vec![2]
        );
    }

    #[test]
    fn knn_empty_class_is_a_config_error() {
        let anchors = vec![
            Matrix::from_rows(&[[0.0, 0.0]]).unwrap(),
            Matrix::zeros(0, 2),
        ];
        assert!(matches!(
            knn_predict(&anchors, &Matrix::zeros(1, 2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn knn_is_rotation_invariant() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let d = 6;
            let anchors: Vec<Matrix> = (0..3)
                .map(|_| {
                    Matrix::new(4, d, (0..4 * d).map(|_| 3.0 * rng.normal()).collect()).unwrap()
                })
                .collect();
            let test =
                Matrix::new(30, d, (0..30 * d).map(|_| 3.0 * rng.normal()).collect()).unwrap();
            let r = random_orthogonal(d, &mut rng);
            let rotated: Vec<Matrix> = anchors.iter().map(|a| a.matmul(&r).unwrap()).collect();
            assert_eq!(
                knn_predict(&anchors, &test).unwrap(),
                knn_predict(&rotated, &test.matmul(&r).unwrap()).unwrap()
            );
        }
    }

    fn trained_task() -> (TaskDataset, TaskModel) {
        let ds = gen_task(&TaskSpec {
            task_id: 0,
            num_classes: 3,
            samples_per_class: 60,
            input_dim: 6,
            spread: 1.0,
            modes_per_class: 1,
            domain: None,
            seed: 7,
        })
        .unwrap();
        let arch = Architecture {
            input_dim: 6,
            hidden_dims: vec![12],
            embed_dim: 8,
        };
        let base = MlpEncoder::init(&arch, &mut Rng::new(3)).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-2,
            ..TrainConfig::finetune_default(1)
        };
        let (model, _) = finetune(&base, &ds, true, &cfg).unwrap();
        (ds, model)
    }

    #[test]
    fn aligning_a_model_with_itself_changes_nothing() {
        let (ds, model) = trained_task();
        let test = ds.batch(Split::Test);
        let own = current_eval(&model.encoder, &model.head, &test).unwrap();
        for variant in [AlignVariant::ClassifierW, AlignVariant::MappingM] {
            let cfg = AlignmentConfig::few_shot(variant, 5, 0);
            let out = aligned_eval(&model.encoder, &model, &ds, &test, &cfg).unwrap();
            assert!(out.model.kl_history[0].abs() < 1e-12);
            assert_eq!(out.accuracy, own, "{variant:?}");
            if let Some(m) = &out.model.mapping {
                assert!(m.sub(&Matrix::identity(8)).unwrap().frobenius_norm() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_epoch_alignment_is_the_current_protocol() {
        let (ds, model) = trained_task();
        let other = MlpEncoder::init(model.encoder.arch(), &mut Rng::new(99)).unwrap();
        let test = ds.batch(Split::Test);
        let current = current_eval(&other, &model.head, &test).unwrap();
        for variant in [
            AlignVariant::ClassifierW,
            AlignVariant::MappingM,
            AlignVariant::OrthMappingM,
        ] {
            let cfg = AlignmentConfig {
                epochs: 0,
                ..AlignmentConfig::few_shot(variant, 5, 0)
            };
            let out = aligned_eval(&other, &model, &ds, &test, &cfg).unwrap();
            assert_eq!(out.accuracy, current);
            if variant == AlignVariant::ClassifierW {
                assert_eq!(out.model.head, model.head);
            }
        }
    }

    #[test]
    fn wrong_variant_for_protocol_is_rejected() {
        let (ds, model) = trained_task();
        let test = ds.batch(Split::Test);
        let cfg = AlignmentConfig::few_shot(AlignVariant::MappingM, 5, 0);
        assert!(matches!(
            ft_classifier_eval(&model.encoder, &model, &ds, &test, &cfg),
            Err(Error::Config(_))
        ));
        let cfg = AlignmentConfig::few_shot(AlignVariant::ClassifierW, 5, 0);
        assert!(matches!(
            aligned_m_eval(&model.encoder, &model, &ds, &test, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn alignment_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let (n, d, c) = (10, 5, 3);
        let emb = Matrix::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
        let teacher = Matrix::new(n, c, (0..n * c).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let targets = softmax_rows(&teacher).unwrap();
        let head = ClassifierHead::init(d, c, true, &mut rng);
        let head =
            ClassifierHead::from_params(&head.to_params(HEAD_PREFIX).map(|v| v + 0.1), HEAD_PREFIX)
                .unwrap();
        for variant in [
            AlignVariant::ClassifierW,
            AlignVariant::MappingM,
            AlignVariant::OrthMappingM,
        ] {
            let obj =
                AlignmentObjective::new(variant, 0.1, emb.clone(), targets.clone(), head.clone())
                    .unwrap();
            // Move off the identity so the ℓ₁ term is differentiable.
            let p = obj.initial_params().map(|v| v + 0.2 * rng.normal());
            let analytic = obj.evaluate(&p).unwrap().grad;
            let report =
                grad_check_fn(&p, &analytic, |q| Ok(obj.evaluate(q)?.total), 1e-5, 1e-4, 0)
                    .unwrap();
            assert!(report.passed(), "{variant:?}: {report}");
        }
    }

    #[test]
    fn planted_rotation_is_recovered() {
        let (ds, model) = trained_task();
        let d = model.encoder.embed_dim();
        let r = random_orthogonal(d, &mut Rng::new(8));
        // Student = teacher encoder followed by R: append R to the last layer.
        let mut p = model.encoder.params().clone();
        let last = model.encoder.arch().layer_dims().len() - 1;
        let w = p
            .get(&format!("enc.{last}.weight"))
            .unwrap()
            .to_matrix()
            .unwrap();
        let b = p
            .get(&format!("enc.{last}.bias"))
            .unwrap()
            .values()
            .to_vec();
        let b_rot = crate::numkit::mat_vec(&r.transpose(), &b).unwrap();
        *p.get_mut(&format!("enc.{last}.weight")).unwrap() =
            Layer::from_matrix(format!("enc.{last}.weight"), &w.matmul(&r).unwrap());
        *p.get_mut(&format!("enc.{last}.bias")).unwrap() =
            Layer::from_vector(format!("enc.{last}.bias"), &b_rot);
        let student = model.encoder.with_params(p).unwrap();

        let test = ds.batch(Split::Test);
        let teacher_acc = current_eval(&model.encoder, &model.head, &test)
            .unwrap()
            .value();
        let cfg = AlignmentConfig {
            epochs: 500,
            ..AlignmentConfig::few_shot(AlignVariant::MappingM, 10, 0)
        };
        let out = aligned_m_eval(&student, &model, &ds, &test, &cfg).unwrap();
        assert!(
            *out.model.kl_history.last().unwrap() < 1e-3,
            "{:?}",
            out.model.kl_history.last()
        );
        assert!((out.accuracy.value() - teacher_acc).abs() <= 0.01);
    }

    fn sample_report() -> EvalReport {
        let mut r = EvalReport::new("abc123");
        let acc = |c, t| Accuracy {
            correct: c,
            total: t,
        };
        r.push(ReportRow::new(
            "merged",
            "wa",
            Protocol::Current,
            0,
            "-",
            0,
            acc(3, 4),
        ));
        r.push(ReportRow::new(
            "merged",
            "wa",
            Protocol::Current,
            1,
            "-",
            0,
            acc(1, 3),
        ));
        r.push(ReportRow::new(
            "merged",
            "wa",
            Protocol::FtClassifier,
            0,
            "5",
            0,
            acc(4, 4),
        ));
        r.finalize();
        r
    }

    #[test]
    fn report_csv_round_trip() {
        let r = sample_report();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "# config_digest: abc123\nmodel,method,protocol,task,k_or_fraction,seed,accuracy\n"
        ));
        let back = EvalReport::read_csv(&buf[..], "mem").unwrap();
        assert_eq!(back.config_digest, "abc123");
        assert_eq!(back.rows.len(), 3);
        for (a, b) in back.rows.iter().zip(&r.rows) {
            assert_eq!(
                (a.protocol, a.task, a.accuracy.to_bits()),
                (b.protocol, b.task, b.accuracy.to_bits())
            );
        }
        assert_eq!(back.averages, r.averages);
    }

    #[test]
    fn report_json_checks_averages() {
        let r = sample_report();
        let back = EvalReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let mut bad = r.clone();
        bad.averages[0].accuracy += 0.01;
        assert!(matches!(
            EvalReport::from_json(&bad.to_json()),
            Err(Error::Data(_))
        ));
        let wa = r.mean("merged", "wa", Protocol::Current, "-", 0).unwrap();
        assert!((wa - (0.75 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn append_refuses_a_foreign_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let r = sample_report();
        r.append_csv(&path).unwrap();
        r.append_csv(&path).unwrap();
        assert_eq!(EvalReport::load_csv(&path).unwrap().rows.len(), 6);
        let other = EvalReport::new("ffff");
        assert!(matches!(other.append_csv(&path), Err(Error::Config(_))));
    }

    #[test]
    fn protocol_names_parse_back() {
        for p in Protocol::ALL {
            assert_eq!(Protocol::parse(p.name()).unwrap(), p);
            assert_eq!(
                serde_json::to_string(&p).unwrap(),
                format!("\"{}\"", p.name())
            );
        }
        assert!(Protocol::parse("nearest").is_err());
    }

    #[test]
    fn embedding_dump_shape() {
        let (ds, model) = trained_task();
        let mut buf = Vec::new();
        write_embeddings(&model.encoder, &ds, Split::Val, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + ds.indices(Split::Val).len());
        assert_eq!(lines[0].split(',').count(), 8 + 3);
        assert!(lines[1].starts_with("0,val,"));
    }
}
