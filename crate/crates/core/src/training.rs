//! From-scratch optimization: softmax cross-entropy with manual
//! backpropagation, Adam, base pretraining, per-task fine-tuning, the joint
//! multi-task baseline and a finite-difference gradient checker.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    predictions, Architecture, ClassifierHead, Layer, MlpEncoder, ModelParams, TaskModel,
    HEAD_PREFIX,
};
use crate::numkit::{softmax_unchecked, Matrix, Rng};
use crate::synthdata::{LabeledBatch, Split, TaskDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    #[serde(default)]
    pub weight_decay: f64,
    /// Root seed; experiment runs overwrite it with the run's seed.
    #[serde(default)]
    pub seed: u64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn finetune_default(seed: u64) -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed,
        }
    }

    pub fn pretrain_default(seed: u64) -> Self {
        Self {
            epochs: 10,
            ..Self::finetune_default(seed)
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Positivity checks; `learning_rate` and `epochs` may be zero.
    pub fn validate(&self, smallest_train_split: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.batch_size > smallest_train_split {
            return Err(Error::Config(format!(
                "batch_size {} exceeds the train split size {smallest_train_split}",
                self.batch_size
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and eps be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, homologous with the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: ModelParams,
    v: ModelParams,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    params.check_homologous(grads)?;
    params.check_homologous(&state.m)?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let layers = params
        .layers_mut()
        .iter_mut()
        .zip(grads.layers())
        .zip(state.m.layers_mut().iter_mut().zip(state.v.layers_mut()));
    for ((p, g), (m, v)) in layers {
        let (m, v) = (m.values_mut(), v.values_mut());
        for (i, (p, &g)) in p.values_mut().iter_mut().zip(g.values()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *p -= cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *p);
        }
    }
    Ok(())
}

/// Gradients homologous with the differentiated parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub grads: ModelParams,
}

/// Mean cross-entropy and its gradient w.r.t. logits, `(p − onehot) / n`.
fn ce_from_logits(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = labels.len();
    let c = logits.cols();
    let mut d = Matrix::zeros(n, c);
    let mut loss = 0.0;
    for (i, (row, &y)) in logits.row_iter().zip(labels).enumerate() {
        if y >= c {
            return Err(Error::Data(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        loss += log_z - row[y];
        let p = softmax_unchecked(row);
        let d_row = d.row_mut(i);
        for (j, pj) in p.into_iter().enumerate() {
            d_row[j] = (pj - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, d))
}

/// Encoder and head gradients for one task batch.
fn task_gradients(
    encoder: &MlpEncoder,
    head: &ClassifierHead,
    batch: &LabeledBatch,
) -> Result<(f64, ModelParams, ModelParams, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::Data("cannot backpropagate an empty batch".into()));
    }
    let cache = encoder.forward_cached(&batch.x)?;
    let logits = head.logits(&cache.output)?;
    let (loss, d_logits) = ce_from_logits(&logits, &batch.labels)?;
    let d_w = cache.output.transpose().matmul(&d_logits)?;
    let mut head_grads = vec![Layer::from_matrix(format!("{HEAD_PREFIX}weight"), &d_w)];
    if head.has_bias() {
        head_grads.push(Layer::from_vector(
            format!("{HEAD_PREFIX}bias"),
            &d_logits.column_sums(),
        ));
    }
    let d_emb = d_logits.matmul(&head.weight().transpose())?;
    let enc_grads = encoder.backward(&cache, &d_emb)?;
    Ok((
        loss,
        enc_grads,
        ModelParams::from_layers(head_grads)?,
        predictions(&logits),
    ))
}

/// Mean softmax cross-entropy over the batch and the gradient of every
/// trainable tensor, laid out like [`TaskModel::to_params`].
pub fn backprop_ce(model: &TaskModel, batch: &LabeledBatch) -> Result<(f64, GradientBundle)> {
    let (loss, enc, head, _) = task_gradients(&model.encoder, &model.head, batch)?;
    Ok((
        loss,
        GradientBundle {
            grads: enc.concat(&head)?,
        },
    ))
}

/// Mean cross-entropy only.
pub fn cross_entropy(model: &TaskModel, batch: &LabeledBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("cannot evaluate an empty batch".into()));
    }
    Ok(ce_from_logits(&model.logits(&batch.x)?, &batch.labels)?.0)
}

/// Result of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_layer: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates_checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max relative error {:.3e} (tol {:.0e}) over {} coordinates; worst {}[{}]: analytic {:.6e} vs numeric {:.6e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tolerance,
            self.coordinates_checked,
            self.worst_layer,
            self.worst_index,
            self.analytic,
            self.numeric
        )
    }
}

/// Coordinates above this count are subsampled.
pub const GRAD_CHECK_MAX_COORDS: usize = 10_000;
/// Gradient magnitudes below this are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Relative error `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compare `analytic` against central differences of `loss` around
/// `params`.
pub fn grad_check_fn(
    params: &ModelParams,
    analytic: &ModelParams,
    loss: impl Fn(&ModelParams) -> Result<f64>,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    params.check_homologous(analytic)?;
    let flat = params.flat_values();
    let grads = analytic.flat_values();
    let mut coords: Vec<usize> = (0..flat.len()).collect();
    if coords.len() > GRAD_CHECK_MAX_COORDS {
        Rng::new(seed).shuffle(&mut coords);
        coords.truncate(GRAD_CHECK_MAX_COORDS);
        coords.sort_unstable();
    }
    // Map flat index back to (layer, offset).
    let mut bounds = Vec::with_capacity(params.layers().len());
    let mut acc = 0;
    for l in params.layers() {
        acc += l.values().len();
        bounds.push(acc);
    }
    let locate = |i: usize| {
        let li = bounds.partition_point(|&b| b <= i);
        let start = if li == 0 { 0 } else { bounds[li - 1] };
        (params.layers()[li].name().to_string(), i - start)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_layer: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates_checked: coords.len(),
        tolerance: tol,
    };
    let mut probe = flat.clone();
    for &i in &coords {
        probe[i] = flat[i] + h;
        let plus = loss(&params.with_flat_values(&probe)?)?;
        probe[i] = flat[i] - h;
        let minus = loss(&params.with_flat_values(&probe)?)?;
        probe[i] = flat[i];
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error(grads[i], numeric);
        if err > report.max_rel_error || report.worst_layer.is_empty() {
            let (layer, offset) = locate(i);
            report.max_rel_error = err;
            report.worst_layer = layer;
            report.worst_index = offset;
            report.analytic = grads[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Finite-difference check of [`backprop_ce`] on every coordinate of the
/// model (subsampled with `seed` above [`GRAD_CHECK_MAX_COORDS`]).
pub fn grad_check(
    model: &TaskModel,
    batch: &LabeledBatch,
    h: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, bundle) = backprop_ce(model, batch)?;
    let params = model.to_params();
    grad_check_fn(
        &params,
        &bundle.grads,
        |p| cross_entropy(&TaskModel::from_params(model.task_id, p)?, batch),
        h,
        tol,
        seed,
    )
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Train-split losses in epoch order.
    pub fn train_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.loss)
            .collect()
    }

    /// `epoch,split,loss,accuracy`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "epoch,split,loss,accuracy")?;
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.epoch, r.split, r.loss, r.accuracy)?;
        }
        Ok(())
    }
}

/// Sequential mini-batches over a task's train split with per-pass
/// Fisher–Yates reshuffling.
struct BatchStream {
    data: LabeledBatch,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchStream {
    fn new(data: LabeledBatch, rng: Rng) -> Self {
        let n = data.len();
        Self {
            data,
            order: (0..n).collect(),
            cursor: n,
            rng,
        }
    }

    fn batches_per_pass(&self, batch_size: usize) -> usize {
        self.data.len().div_ceil(batch_size)
    }

    fn next(&mut self, batch_size: usize) -> LabeledBatch {
        if self.cursor >= self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = self.data.select(&self.order[self.cursor..end]);
        self.cursor = end;
        batch
    }
}

/// Shared encoder with one head per task, trained on summed task losses.
struct JointTrainer {
    encoder: MlpEncoder,
    heads: Vec<ClassifierHead>,
    streams: Vec<BatchStream>,
    enc_state: AdamState,
    head_states: Vec<AdamState>,
    val: Vec<LabeledBatch>,
}

struct TaskTrainData {
    num_classes: usize,
    train: LabeledBatch,
    val: LabeledBatch,
    rng: Rng,
}

fn train_joint(
    base: &MlpEncoder,
    tasks: Vec<TaskTrainData>,
    use_bias: bool,
    cfg: &TrainConfig,
) -> Result<(MlpEncoder, Vec<ClassifierHead>, TrainLog)> {
    let smallest = tasks.iter().map(|t| t.train.len()).min().unwrap_or(0);
    cfg.validate(smallest)?;
    let mut heads = Vec::with_capacity(tasks.len());
    let mut streams = Vec::with_capacity(tasks.len());
    let mut val = Vec::with_capacity(tasks.len());
    for mut t in tasks {
        heads.push(ClassifierHead::init(
            base.embed_dim(),
            t.num_classes,
            use_bias,
            &mut t.rng,
        ));
        streams.push(BatchStream::new(t.train, t.rng));
        val.push(t.val);
    }
    let mut tr = JointTrainer {
        enc_state: AdamState::new(base.params()),
        head_states: heads
            .iter()
            .map(|h| AdamState::new(&h.to_params(HEAD_PREFIX)))
            .collect(),
        encoder: base.clone(),
        heads,
        streams,
        val,
    };
    let adam = cfg.adam();
    let mut log = TrainLog::default();
    let steps = tr
        .streams
        .iter()
        .map(|s| s.batches_per_pass(cfg.batch_size))
        .max()
        .unwrap_or(0);

    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for _ in 0..steps {
            let mut enc_grad: Option<ModelParams> = None;
            let mut step_loss = 0.0;
            for t in 0..tr.heads.len() {
                let batch = tr.streams[t].next(cfg.batch_size);
                let (loss, g_enc, g_head, pred) =
                    task_gradients(&tr.encoder, &tr.heads[t], &batch)?;
                step_loss += loss;
                correct += pred
                    .iter()
                    .zip(&batch.labels)
                    .filter(|(p, y)| p == y)
                    .count();
                seen += batch.len();
                enc_grad = Some(match enc_grad {
                    None => g_enc,
                    Some(acc) => acc.add(&g_enc)?,
                });
                let mut hp = tr.heads[t].to_params(HEAD_PREFIX);
                adam_step(&mut hp, &g_head, &mut tr.head_states[t], &adam)?;
                tr.heads[t] = ClassifierHead::from_params(&hp, HEAD_PREFIX)?;
            }
            let enc_grad = enc_grad.expect("at least one task");
            adam_step(tr.encoder.params_mut(), &enc_grad, &mut tr.enc_state, &adam)?;
            if !step_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            loss_sum += step_loss;
        }
        log.records.push(EpochRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / steps as f64,
            accuracy: correct as f64 / seen.max(1) as f64,
        });
        let (mut vloss, mut vcorrect, mut vseen) = (0.0, 0usize, 0usize);
        for (head, v) in tr.heads.iter().zip(&tr.val) {
            if v.is_empty() {
                continue;
            }
            let logits = head.logits(&tr.encoder.encode(&v.x)?)?;
            vloss += ce_from_logits(&logits, &v.labels)?.0;
            vcorrect += predictions(&logits)
                .iter()
                .zip(&v.labels)
                .filter(|(p, y)| p == y)
                .count();
            vseen += v.len();
        }
        if vseen > 0 {
            log.records.push(EpochRecord {
                epoch,
                split: Split::Val,
                loss: vloss,
                accuracy: vcorrect as f64 / vseen as f64,
            });
        }
    }
    if !tr.encoder.params().all_finite() {
        return Err(Error::Numeric(
            "training produced non-finite parameters".into(),
        ));
    }
    Ok((tr.encoder, tr.heads, log))
}

fn task_rng(cfg: &TrainConfig, task_id: usize) -> Rng {
    Rng::child(cfg.seed, &format!("task:{task_id}"))
}

fn task_data(ds: &TaskDataset, cfg: &TrainConfig) -> TaskTrainData {
    TaskTrainData {
        num_classes: ds.num_classes,
        train: ds.batch(Split::Train),
        val: ds.batch(Split::Val),
        rng: task_rng(cfg, ds.task_id),
    }
}

/// Base encoder plus the discarded pretext head.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub encoder: MlpEncoder,
    pub pretext_head: ClassifierHead,
    pub log: TrainLog,
}

/// Pretext label: parity of the class index.
fn parity_batch(tasks: &[TaskDataset], split: Split) -> LabeledBatch {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for ds in tasks {
        let b = ds.batch(split);
        rows.extend_from_slice(b.x.as_slice());
        labels.extend(b.labels.iter().map(|y| y % 2));
    }
    let dim = tasks[0].input_dim();
    LabeledBatch {
        x: Matrix::from_raw(labels.len(), dim, rows),
        labels,
    }
}

/// Pooled held-out pretext batch (test splits, parity labels).
pub fn pretext_batch(tasks: &[TaskDataset], split: Split) -> Result<LabeledBatch> {
    if tasks.is_empty() {
        return Err(Error::Config("pretraining needs at least one task".into()));
    }
    Ok(parity_batch(tasks, split))
}

/// Shared base encoder: seeded initialization, then `cfg.epochs` of
/// training on pooled train splits labelled by class-index parity.
pub fn pretrain_base(
    tasks: &[TaskDataset],
    arch: &Architecture,
    use_bias: bool,
    cfg: &TrainConfig,
) -> Result<Pretrained> {
    if tasks.is_empty() {
        return Err(Error::Config("pretraining needs at least one task".into()));
    }
    if let Some(ds) = tasks.iter().find(|d| d.input_dim() != arch.input_dim) {
        return Err(Error::Config(format!(
            "task {} has {} features, architecture expects {}",
            ds.task_id,
            ds.input_dim(),
            arch.input_dim
        )));
    }
    let mut init_rng = Rng::child(cfg.seed, "pretrain:init");
    let init = MlpEncoder::init(arch, &mut init_rng)?;
    let data = TaskTrainData {
        num_classes: 2,
        train: parity_batch(tasks, Split::Train),
        val: parity_batch(tasks, Split::Val),
        rng: Rng::child(cfg.seed, "pretrain"),
    };
    let (encoder, mut heads, log) = train_joint(&init, vec![data], use_bias, cfg)?;
    Ok(Pretrained {
        encoder,
        pretext_head: heads.pop().expect("one head"),
        log,
    })
}

/// Fine-tune the full encoder plus a fresh head on one task.
pub fn finetune(
    base: &MlpEncoder,
    ds: &TaskDataset,
    use_bias: bool,
    cfg: &TrainConfig,
) -> Result<(TaskModel, TrainLog)> {
    if ds.input_dim() != base.input_dim() {
        return Err(Error::Shape(format!(
            "task {} has {} features, encoder expects {}",
            ds.task_id,
            ds.input_dim(),
            base.input_dim()
        )));
    }
    let (encoder, mut heads, log) = train_joint(base, vec![task_data(ds, cfg)], use_bias, cfg)?;
    let model = TaskModel::new(ds.task_id, encoder, heads.pop().expect("one head"))?;
    Ok((model, log))
}

/// Jointly trained multi-task baseline.
#[derive(Clone, Debug)]
pub struct MtlModel {
    pub encoder: MlpEncoder,
    /// One head per task, in the order the tasks were given.
    pub heads: Vec<ClassifierHead>,
    pub log: TrainLog,
}

impl MtlModel {
    /// Encoder layers followed by `head.<t>.*` for every task.
    pub fn to_params(&self) -> ModelParams {
        let mut p = self.encoder.params().clone();
        for (t, h) in self.heads.iter().enumerate() {
            p = p
                .concat(&h.to_params(&format!("{HEAD_PREFIX}{t}.")))
                .expect("distinct head names");
        }
        p
    }

    pub fn task_model(&self, task: usize) -> Result<TaskModel> {
        let head = self
            .heads
            .get(task)
            .ok_or_else(|| Error::Config(format!("MTL model has no head for task {task}")))?;
        TaskModel::new(task, self.encoder.clone(), head.clone())
    }
}

/// One encoder and per-task heads trained on round-robin task batches with
/// summed cross-entropy. Each step draws one batch from every task; an
/// epoch is as many steps as the largest task needs, smaller tasks wrap.
pub fn train_mtl(
    base: &MlpEncoder,
    tasks: &[TaskDataset],
    use_bias: bool,
    cfg: &TrainConfig,
) -> Result<MtlModel> {
    if tasks.is_empty() {
        return Err(Error::Config(
            "multi-task training needs at least one task".into(),
        ));
    }
    let data = tasks.iter().map(|ds| task_data(ds, cfg)).collect();
    let (encoder, heads, log) = train_joint(base, data, use_bias, cfg)?;
    Ok(MtlModel {
        encoder,
        heads,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_task, TaskSpec};

    fn tiny_arch(input: usize, hidden: Vec<usize>, embed: usize) -> Architecture {
        Architecture {
            input_dim: input,
            hidden_dims: hidden,
            embed_dim: embed,
        }
    }

    fn random_model(arch: &Architecture, classes: usize, seed: u64) -> TaskModel {
        let mut rng = Rng::new(seed);
        let enc = MlpEncoder::init(arch, &mut rng).unwrap();
        let mut head = ClassifierHead::init(arch.embed_dim, classes, true, &mut rng);
        // Non-zero biases so their gradients are exercised too.
        let hp = head.to_params(HEAD_PREFIX).map(|v| v + 0.1 * rng.normal());
        head = ClassifierHead::from_params(&hp, HEAD_PREFIX).unwrap();
        let enc = enc
            .with_params(enc.params().map(|v| v + 0.05 * rng.normal()))
            .unwrap();
        TaskModel::new(0, enc, head).unwrap()
    }

    fn random_batch(n: usize, dim: usize, classes: usize, seed: u64) -> LabeledBatch {
        let mut rng = Rng::new(seed);
        LabeledBatch {
            x: Matrix::new(n, dim, (0..n * dim).map(|_| rng.normal()).collect()).unwrap(),
            labels: (0..n).map(|_| rng.below(classes)).collect(),
        }
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let arch = tiny_arch(4, vec![3], 3);
        let mut m = random_model(&arch, 5, 1);
        m.head = ClassifierHead::new(Matrix::zeros(3, 5), Some(vec![0.0; 5])).unwrap();
        let (loss, _) = backprop_ce(&m, &random_batch(7, 4, 5, 2)).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_prediction_has_vanishing_gradient() {
        // Identity linear encoder and a head that puts margin 20 on the label.
        let arch = tiny_arch(2, vec![], 2);
        let mut params = ModelParams::new();
        params
            .push(Layer::from_matrix("enc.0.weight", &Matrix::identity(2)))
            .unwrap();
        params
            .push(Layer::from_vector("enc.0.bias", &[0.0, 0.0]))
            .unwrap();
        let enc = MlpEncoder::from_params(&params).unwrap();
        assert_eq!(enc.arch(), &arch);
        let head =
            ClassifierHead::new(Matrix::identity(2).scale(20.0), Some(vec![0.0, 0.0])).unwrap();
        let m = TaskModel::new(0, enc, head).unwrap();
        let batch = LabeledBatch {
            x: Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap(),
            labels: vec![0, 1],
        };
        let (_, g) = backprop_ce(&m, &batch).unwrap();
        assert!(g.grads.l2_norm() < 1e-6, "{}", g.grads.l2_norm());
    }

    #[test]
    fn out_of_range_label_is_a_data_error() {
        let arch = tiny_arch(3, vec![], 2);
        let m = random_model(&arch, 2, 0);
        let mut b = random_batch(3, 3, 2, 0);
        b.labels[1] = 2;
        assert!(matches!(backprop_ce(&m, &b), Err(Error::Data(_))));
    }

    #[test]
    fn gradients_match_finite_differences_on_8_8_4() {
        let arch = tiny_arch(8, vec![8], 8);
        let m = random_model(&arch, 4, 3);
        let report = grad_check(&m, &random_batch(16, 8, 4, 4), 1e-5, 1e-4, 0).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.coordinates_checked, m.to_params().num_values());
    }

    #[test]
    fn linear_model_gradient_is_tight() {
        let arch = tiny_arch(5, vec![], 3);
        let m = random_model(&arch, 3, 9);
        let report = grad_check(&m, &random_batch(12, 5, 3, 10), 1e-5, 1e-6, 0).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn default_mlp_gradient_check() {
        let arch = Architecture::default();
        let m = random_model(&arch, 4, 21);
        let report = grad_check(&m, &random_batch(8, 16, 4, 22), 1e-5, 1e-4, 5).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_gradient_fails_and_names_the_coordinate() {
        let arch = tiny_arch(4, vec![3], 2);
        let m = random_model(&arch, 3, 5);
        let batch = random_batch(6, 4, 3, 6);
        let (_, bundle) = backprop_ce(&m, &batch).unwrap();
        let mut bad = bundle.grads.clone();
        bad.get_mut("enc.1.weight").unwrap().values_mut()[3] += 0.5;
        let report = grad_check_fn(
            &m.to_params(),
            &bad,
            |p| cross_entropy(&TaskModel::from_params(0, p)?, &batch),
            1e-5,
            1e-4,
            0,
        )
        .unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst_layer, "enc.1.weight");
        assert_eq!(report.worst_index, 3);
        assert!(report.to_string().starts_with("FAIL"));
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = ModelParams::from_layers(vec![Layer::from_vector("w", &[1.0, -2.0])]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(
            &mut p,
            &before.zeros_like(),
            &mut st,
            &AdamConfig::with_learning_rate(0.1),
        )
        .unwrap();
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m̂ = g = 1, v̂ = g² = 1 after bias correction: Δ = −lr · 1/(1 + ε).
        let mut p = ModelParams::from_layers(vec![Layer::from_vector("w", &[0.0])]).unwrap();
        let g = ModelParams::from_layers(vec![Layer::from_vector("w", &[1.0])]).unwrap();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &AdamConfig::with_learning_rate(0.1)).unwrap();
        let want = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.flat_values()[0] - want).abs() < 1e-15);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_rejects_non_homologous_gradients() {
        let mut p = ModelParams::from_layers(vec![Layer::from_vector("w", &[0.0])]).unwrap();
        let g = ModelParams::from_layers(vec![Layer::from_vector("v", &[1.0])]).unwrap();
        let mut st = AdamState::new(&p);
        assert!(matches!(
            adam_step(&mut p, &g, &mut st, &AdamConfig::with_learning_rate(0.1)),
            Err(Error::Structure(_))
        ));
    }

    fn small_task(task_id: usize, classes: usize, spread: f64, seed: u64) -> TaskDataset {
        gen_task(&TaskSpec {
            task_id,
            num_classes: classes,
            samples_per_class: 60,
            input_dim: 6,
            spread,
            modes_per_class: 1,
            domain: None,
            seed,
        })
        .unwrap()
    }

    fn small_cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: lr,
            ..TrainConfig::finetune_default(3)
        }
    }

    fn small_arch() -> Architecture {
        tiny_arch(6, vec![12], 8)
    }

    #[test]
    fn zero_epoch_pretraining_returns_the_initialization() {
        let tasks = vec![small_task(0, 3, 1.0, 1)];
        let cfg = small_cfg(0, 1e-3);
        let p = pretrain_base(&tasks, &small_arch(), true, &cfg).unwrap();
        let init =
            MlpEncoder::init(&small_arch(), &mut Rng::child(cfg.seed, "pretrain:init")).unwrap();
        assert!(p.encoder.params().bitwise_eq(init.params()));
        assert!(p.log.records.is_empty());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let tasks = vec![small_task(0, 3, 1.0, 1), small_task(1, 4, 1.0, 2)];
        let a = pretrain_base(&tasks, &small_arch(), true, &small_cfg(2, 1e-3)).unwrap();
        let b = pretrain_base(&tasks, &small_arch(), true, &small_cfg(2, 1e-3)).unwrap();
        assert!(a.encoder.params().bitwise_eq(b.encoder.params()));
        assert!(matches!(
            pretrain_base(&[], &small_arch(), true, &small_cfg(1, 1e-3)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let ds = small_task(0, 3, 1.0, 4);
        let base = MlpEncoder::init(&small_arch(), &mut Rng::new(1)).unwrap();
        let cfg = small_cfg(2, 0.0);
        let (m, _) = finetune(&base, &ds, true, &cfg).unwrap();
        assert!(m.encoder.params().bitwise_eq(base.params()));
        let head0 = ClassifierHead::init(8, 3, true, &mut task_rng(&cfg, 0));
        assert!(m
            .head
            .to_params(HEAD_PREFIX)
            .bitwise_eq(&head0.to_params(HEAD_PREFIX)));

        let mtl = train_mtl(&base, &[ds.clone(), small_task(1, 4, 1.0, 5)], true, &cfg).unwrap();
        assert!(mtl.encoder.params().bitwise_eq(base.params()));
    }

    #[test]
    fn finetune_never_mutates_its_base() {
        let ds = small_task(0, 3, 1.0, 4);
        let base = MlpEncoder::init(&small_arch(), &mut Rng::new(1)).unwrap();
        let copy = base.clone();
        finetune(&base, &ds, true, &small_cfg(2, 1e-2)).unwrap();
        assert_eq!(base, copy);
    }

    #[test]
    fn separable_task_is_learned_perfectly() {
        let ds = small_task(0, 4, 0.0, 6);
        let base = MlpEncoder::init(&small_arch(), &mut Rng::new(2)).unwrap();
        let (m, _) = finetune(&base, &ds, true, &small_cfg(30, 1e-2)).unwrap();
        let test = ds.batch(Split::Test);
        assert_eq!(m.predict(&test.x).unwrap(), test.labels);
    }

    #[test]
    fn single_task_mtl_is_finetuning() {
        let ds = small_task(0, 3, 1.0, 4);
        let base = MlpEncoder::init(&small_arch(), &mut Rng::new(1)).unwrap();
        let cfg = small_cfg(3, 1e-2);
        let (m, log) = finetune(&base, &ds, true, &cfg).unwrap();
        let mtl = train_mtl(&base, std::slice::from_ref(&ds), true, &cfg).unwrap();
        assert_eq!(log, mtl.log);
        assert!(mtl.encoder.params().bitwise_eq(m.encoder.params()));
    }

    #[test]
    fn batch_size_larger_than_train_split_is_rejected() {
        let ds = small_task(0, 3, 1.0, 4);
        let base = MlpEncoder::init(&small_arch(), &mut Rng::new(1)).unwrap();
        let cfg = TrainConfig {
            batch_size: 10_000,
            ..small_cfg(1, 1e-3)
        };
        assert!(matches!(
            finetune(&base, &ds, true, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn log_csv_has_the_documented_header() {
        let ds = small_task(0, 3, 1.0, 4);
        let base = MlpEncoder::init(&small_arch(), &mut Rng::new(1)).unwrap();
        let (_, log) = finetune(&base, &ds, true, &small_cfg(2, 1e-3)).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,split,loss,accuracy\n0,train,"));
        assert_eq!(text.lines().count(), 1 + 2 * 2);
    }
}
