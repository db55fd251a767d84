//! Weight averaging, task arithmetic and Ties merging of encoder parameters,
//! plus validation-based selection of the scaling coefficient λ.
//!
//! Merges are evaluated in combination form, e.g. task arithmetic as
//! `(1 − λT)·Θ_b + λ·ΣΘ_t` rather than `Θ_b + λ·Σ(Θ_t − Θ_b)`. The two are
//! algebraically equal; the former skips zero coefficients, so λ = 0 returns
//! Θ_b and a single task with λ = 1 returns Θ_t bit for bit.

use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{predictions, MlpEncoder, ModelParams, TaskModel, TaskVector};
use crate::synthdata::LabeledBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MergeMethod {
    #[serde(rename = "wa", alias = "WeightAveraging")]
    WeightAveraging,
    #[serde(rename = "ta", alias = "TaskArithmetic")]
    TaskArithmetic,
    #[serde(rename = "ties", alias = "Ties")]
    Ties,
}

impl MergeMethod {
    pub const ALL: [MergeMethod; 3] = [Self::WeightAveraging, Self::TaskArithmetic, Self::Ties];

    /// Short tag used in reports and file names.
    pub fn tag(self) -> &'static str {
        match self {
            Self::WeightAveraging => "wa",
            Self::TaskArithmetic => "ta",
            Self::Ties => "ties",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wa" | "weight-averaging" | "weightaveraging" => Ok(Self::WeightAveraging),
            "ta" | "task-arithmetic" | "taskarithmetic" => Ok(Self::TaskArithmetic),
            "ties" => Ok(Self::Ties),
            other => Err(Error::Config(format!(
                "unknown merge method {other:?} (expected wa, ta or ties)"
            ))),
        }
    }

    pub fn uses_lambda(self) -> bool {
        self != Self::WeightAveraging
    }
}

impl std::fmt::Display for MergeMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

pub const DEFAULT_KEEP_FRACTION: f64 = 0.2;

/// `{0.1, 0.2, …, 1.0}`.
pub fn default_lambda_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSpec {
    pub method: MergeMethod,
    /// Fixed λ; `None` selects it on validation data. Ignored by WA.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
}

fn default_keep() -> f64 {
    DEFAULT_KEEP_FRACTION
}

impl MergeSpec {
    pub fn new(method: MergeMethod) -> Self {
        Self {
            method,
            lambda: None,
            keep_fraction: DEFAULT_KEEP_FRACTION,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_keep_fraction(mut self, keep: f64) -> Self {
        self.keep_fraction = keep;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            check_lambda(l, LambdaPolicy::Strict)?;
        }
        check_keep(self.keep_fraction)
    }
}

/// How out-of-range λ is treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LambdaPolicy {
    #[default]
    Strict,
    WarnOnly,
}

fn check_lambda(lambda: f64, policy: LambdaPolicy) -> Result<()> {
    if !lambda.is_finite() {
        return Err(Error::Config(format!(
            "lambda must be finite, got {lambda}"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        let msg = format!("lambda {lambda} lies outside [0, 1]");
        match policy {
            LambdaPolicy::Strict => return Err(Error::Config(msg)),
            LambdaPolicy::WarnOnly => warn!("{msg}"),
        }
    }
    Ok(())
}

fn check_keep(keep: f64) -> Result<()> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::Config(format!(
            "keep_fraction must lie in (0, 1], got {keep}"
        )));
    }
    Ok(())
}

fn check_all_homologous(first: &ModelParams, rest: &[ModelParams]) -> Result<()> {
    rest.iter().try_for_each(|m| first.check_homologous(m))
}

/// Elementwise mean, accumulated as a running mean in input order.
pub fn weight_average(models: &[ModelParams]) -> Result<ModelParams> {
    let (first, rest) = models
        .split_first()
        .ok_or_else(|| Error::Config("weight averaging needs at least one model".into()))?;
    check_all_homologous(first, rest)?;
    let mut mean = first.clone();
    for (i, m) in rest.iter().enumerate() {
        let k = (i + 2) as f64;
        mean = mean.zip_map(m, |acc, x| acc + (x - acc) / k)?;
    }
    Ok(mean)
}

/// `Θ_b + λ·Σ_t (Θ_t − Θ_b)`, rejecting λ outside [0, 1].
pub fn task_arithmetic(
    theta_b: &ModelParams,
    models: &[ModelParams],
    lambda: f64,
) -> Result<ModelParams> {
    task_arithmetic_with(theta_b, models, lambda, LambdaPolicy::Strict)
}

pub fn task_arithmetic_with(
    theta_b: &ModelParams,
    models: &[ModelParams],
    lambda: f64,
    policy: LambdaPolicy,
) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(Error::Config(
            "task arithmetic needs at least one fine-tuned model".into(),
        ));
    }
    check_lambda(lambda, policy)?;
    check_all_homologous(theta_b, models)?;
    let base_coef = 1.0 - lambda * models.len() as f64;
    if lambda == 0.0 {
        return Ok(theta_b.clone());
    }
    let mut sum = models[0].clone();
    for m in &models[1..] {
        sum = sum.add(m)?;
    }
    let scaled = sum.scale(lambda);
    if base_coef == 0.0 {
        Ok(scaled)
    } else {
        theta_b.scale(base_coef).add(&scaled)
    }
}

/// Number of entries kept by a trim of `n` values at `keep`.
fn kept_count(n: usize, keep: f64) -> usize {
    // Guard against products like 0.3 · 10 landing just above an integer.
    let raw = keep * n as f64;
    let m = (raw - raw.abs() * 1e-12).ceil() as usize;
    m.clamp(n.min(1), n)
}

/// Keep the `⌈keep·n⌉` largest-magnitude entries of the flattened vector,
/// zeroing the rest; equal magnitudes favor the lower flat index.
pub fn ties_trim(delta: &TaskVector, keep_fraction: f64) -> Result<TaskVector> {
    check_keep(keep_fraction)?;
    let flat = delta.delta.flat_values();
    let m = kept_count(flat.len(), keep_fraction);
    if m == flat.len() {
        return Ok(delta.clone());
    }
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; flat.len()];
    for &i in &order[..m] {
        out[i] = flat[i];
    }
    Ok(TaskVector {
        delta: delta.delta.with_flat_values(&out)?,
    })
}

/// Ties merging: trim each task vector, elect a sign per coordinate from the
/// sum of trimmed deltas (an exact zero elects +), average the agreeing
/// non-zero deltas and add `λ` times that to `Θ_b`.
pub fn ties_merge(
    theta_b: &ModelParams,
    models: &[ModelParams],
    lambda: f64,
    keep_fraction: f64,
) -> Result<ModelParams> {
    ties_merge_with(theta_b, models, lambda, keep_fraction, LambdaPolicy::Strict)
}

pub fn ties_merge_with(
    theta_b: &ModelParams,
    models: &[ModelParams],
    lambda: f64,
    keep_fraction: f64,
    policy: LambdaPolicy,
) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(Error::Config(
            "Ties merging needs at least one fine-tuned model".into(),
        ));
    }
    check_lambda(lambda, policy)?;
    check_keep(keep_fraction)?;
    check_all_homologous(theta_b, models)?;

    let base = theta_b.flat_values();
    let flats: Vec<Vec<f64>> = models.iter().map(|m| m.flat_values()).collect();
    let trimmed: Vec<Vec<f64>> = models
        .iter()
        .map(|m| {
            let tv = crate::models::task_vector(m, theta_b)?;
            Ok(ties_trim(&tv, keep_fraction)?.delta.flat_values())
        })
        .collect::<Result<_>>()?;

    let mut out = base.clone();
    if lambda != 0.0 {
        for j in 0..base.len() {
            let total: f64 = trimmed.iter().map(|d| d[j]).sum();
            let positive = total >= 0.0;
            let (mut sum, mut count) = (0.0, 0usize);
            for (d, theta) in trimmed.iter().zip(&flats) {
                let v = d[j];
                if v != 0.0 && (v > 0.0) == positive {
                    sum += theta[j];
                    count += 1;
                }
            }
            if count == 0 {
                continue;
            }
            let mean_theta = sum / count as f64;
            out[j] = if lambda == 1.0 {
                mean_theta
            } else {
                (1.0 - lambda) * base[j] + lambda * mean_theta
            };
        }
    }
    theta_b.with_flat_values(&out)
}

/// Apply `spec` with an explicit λ (ignored by WA).
pub fn merge_with_lambda(
    theta_b: &ModelParams,
    models: &[ModelParams],
    spec: &MergeSpec,
    lambda: f64,
) -> Result<ModelParams> {
    match spec.method {
        MergeMethod::WeightAveraging => weight_average(models),
        MergeMethod::TaskArithmetic => task_arithmetic(theta_b, models, lambda),
        MergeMethod::Ties => ties_merge(theta_b, models, lambda, spec.keep_fraction),
    }
}

/// Order-independent entry point: inputs are sorted by task id first.
pub fn merge_tasks(
    theta_b: &ModelParams,
    models: &[(usize, ModelParams)],
    spec: &MergeSpec,
    lambda: f64,
) -> Result<ModelParams> {
    let mut sorted: Vec<&(usize, ModelParams)> = models.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Config("duplicate task id among merge inputs".into()));
    }
    let ordered: Vec<ModelParams> = sorted.into_iter().map(|(_, p)| p.clone()).collect();
    merge_with_lambda(theta_b, &ordered, spec, lambda)
}

/// Outcome of a λ sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaChoice {
    pub lambda: f64,
    pub score: f64,
    /// `(λ, score)` for every grid value, in grid order.
    pub sweep: Vec<(f64, f64)>,
}

/// Grid value with the highest score; equal scores favor the smaller λ.
pub fn select_lambda_by(
    grid: &[f64],
    score: impl Fn(f64) -> Result<f64> + Sync,
) -> Result<LambdaChoice> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    let sweep: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|&l| Ok((l, score(l)?)))
        .collect::<Result<_>>()?;
    let (lambda, best) = sweep
        .iter()
        .copied()
        .reduce(|best, cur| {
            if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                cur
            } else {
                best
            }
        })
        .expect("non-empty grid");
    Ok(LambdaChoice {
        lambda,
        score: best,
        sweep,
    })
}

/// Mean accuracy of each task's head on the merged encoder.
pub fn mean_head_accuracy(
    encoder: &MlpEncoder,
    models: &[TaskModel],
    val: &[LabeledBatch],
) -> Result<f64> {
    if models.len() != val.len() || models.is_empty() {
        return Err(Error::Config(format!(
            "{} models but {} validation sets",
            models.len(),
            val.len()
        )));
    }
    let mut total = 0.0;
    for (m, v) in models.iter().zip(val) {
        let pred = predictions(&m.head.logits(&encoder.encode(&v.x)?)?);
        let correct = pred.iter().zip(&v.labels).filter(|(p, y)| p == y).count();
        total += correct as f64 / v.len().max(1) as f64;
    }
    Ok(total / models.len() as f64)
}

/// λ maximizing the mean current-protocol validation accuracy of the
/// fine-tuned heads on the merged encoder.
pub fn select_lambda(
    theta_b: &ModelParams,
    models: &[TaskModel],
    val: &[LabeledBatch],
    spec: &MergeSpec,
    grid: &[f64],
) -> Result<LambdaChoice> {
    let encoders: Vec<ModelParams> = models.iter().map(|m| m.encoder.params().clone()).collect();
    select_lambda_by(grid, |lambda| {
        let merged = merge_with_lambda(theta_b, &encoders, spec, lambda)?;
        mean_head_accuracy(&MlpEncoder::from_params(&merged)?, models, val)
    })
}

/// One merge input recorded in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInput {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance of a merged checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeManifest {
    pub method: MergeMethod,
    pub lambda: Option<f64>,
    pub keep_fraction: Option<f64>,
    pub base: Option<ManifestInput>,
    pub inputs: Vec<ManifestInput>,
    pub output: ManifestInput,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl MergeManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{task_vector, Layer};
    use crate::numkit::Rng;
    use proptest::prelude::*;

    fn vecp(v: &[f64]) -> ModelParams {
        ModelParams::from_layers(vec![Layer::from_vector("w", v)]).unwrap()
    }

    fn random_params(rng: &mut Rng) -> ModelParams {
        ModelParams::from_layers(vec![
            Layer::new("a", vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap(),
            Layer::from_vector("b", &(0..4).map(|_| rng.normal()).collect::<Vec<_>>()),
        ])
        .unwrap()
    }

    #[test]
    fn weight_average_examples() {
        let mut rng = Rng::new(1);
        let t = random_params(&mut rng);
        assert!(weight_average(&[t.clone(), t.clone(), t.clone()])
            .unwrap()
            .bitwise_eq(&t));
        assert_eq!(
            weight_average(&[vecp(&[1.0, 3.0]), vecp(&[3.0, 1.0])])
                .unwrap()
                .flat_values(),
            vec![2.0, 2.0]
        );
        assert!(matches!(weight_average(&[]), Err(Error::Config(_))));
        assert!(matches!(
            weight_average(&[vecp(&[1.0]), vecp(&[1.0, 2.0])]),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn merge_tasks_is_order_independent() {
        let mut rng = Rng::new(2);
        let base = random_params(&mut rng);
        let models: Vec<(usize, ModelParams)> =
            (0..4).map(|i| (i, random_params(&mut rng))).collect();
        let mut shuffled = models.clone();
        shuffled.reverse();
        shuffled.swap(0, 2);
        for method in MergeMethod::ALL {
            let spec = MergeSpec::new(method);
            let a = merge_tasks(&base, &models, &spec, 0.3).unwrap();
            let b = merge_tasks(&base, &shuffled, &spec, 0.3).unwrap();
            assert!(a.bitwise_eq(&b), "{method}");
        }
    }

    #[test]
    fn task_arithmetic_examples() {
        let mut rng = Rng::new(3);
        let base = random_params(&mut rng);
        let t = random_params(&mut rng);
        assert!(task_arithmetic(&base, &[t.clone()], 1.0)
            .unwrap()
            .bitwise_eq(&t));
        assert!(task_arithmetic(&base, &[t.clone(), t.clone()], 0.0)
            .unwrap()
            .bitwise_eq(&base));
        let m = task_arithmetic(
            &vecp(&[0.0, 0.0]),
            &[vecp(&[1.0, 0.0]), vecp(&[0.0, 1.0])],
            0.5,
        )
        .unwrap();
        assert_eq!(m.flat_values(), vec![0.5, 0.5]);
    }

    #[test]
    fn lambda_range_is_enforced_unless_warn_only() {
        let b = vecp(&[0.0]);
        let t = vecp(&[1.0]);
        assert!(matches!(
            task_arithmetic(&b, &[t.clone()], 1.5),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            task_arithmetic(&b, &[t.clone()], -0.1),
            Err(Error::Config(_))
        ));
        let m = task_arithmetic_with(&b, &[t.clone()], 1.5, LambdaPolicy::WarnOnly).unwrap();
        assert_eq!(m.flat_values(), vec![1.5]);
        assert!(matches!(
            ties_merge(&b, &[t], 2.0, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn trim_examples() {
        let d = TaskVector {
            delta: vecp(&[3.0, -1.0, 0.5, -4.0]),
        };
        assert_eq!(
            ties_trim(&d, 0.5).unwrap().delta.flat_values(),
            vec![3.0, 0.0, 0.0, -4.0]
        );
        assert!(ties_trim(&d, 1.0).unwrap().delta.bitwise_eq(&d.delta));
        let z = TaskVector {
            delta: vecp(&[0.0; 5]),
        };
        for keep in [0.1, 0.5, 1.0] {
            assert_eq!(
                ties_trim(&z, keep).unwrap().delta.flat_values(),
                vec![0.0; 5]
            );
        }
        assert!(matches!(ties_trim(&d, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn trim_ties_keep_lower_index() {
        let d = TaskVector {
            delta: vecp(&[1.0, -1.0, 1.0, 2.0]),
        };
        assert_eq!(
            ties_trim(&d, 0.5).unwrap().delta.flat_values(),
            vec![1.0, 0.0, 0.0, 2.0]
        );
    }

    #[test]
    fn kept_count_is_a_ceiling() {
        assert_eq!(kept_count(10, 0.3), 3);
        assert_eq!(kept_count(10, 0.2), 2);
        assert_eq!(kept_count(10, 0.21), 3);
        assert_eq!(kept_count(7, 0.01), 1);
        assert_eq!(kept_count(0, 0.5), 0);
    }

    #[test]
    fn ties_hand_traces() {
        let base = vecp(&[0.0, 0.0]);
        let models = [vecp(&[2.0, -1.0]), vecp(&[1.0, 3.0])];
        assert_eq!(
            ties_merge(&base, &models, 1.0, 1.0).unwrap().flat_values(),
            vec![1.5, 3.0]
        );
        assert_eq!(
            ties_merge(&base, &models, 1.0, 0.5).unwrap().flat_values(),
            vec![2.0, 3.0]
        );
    }

    #[test]
    fn ties_single_task_is_the_task() {
        let mut rng = Rng::new(4);
        let base = random_params(&mut rng);
        let t = random_params(&mut rng);
        assert!(ties_merge(&base, &[t.clone()], 1.0, 1.0)
            .unwrap()
            .bitwise_eq(&t));
        assert!(ties_merge(&base, &[t], 0.0, 0.2).unwrap().bitwise_eq(&base));
    }

    #[test]
    fn ties_zero_sum_elects_positive() {
        let base = vecp(&[0.0]);
        let m = ties_merge(&base, &[vecp(&[1.0]), vecp(&[-1.0])], 1.0, 1.0).unwrap();
        assert_eq!(m.flat_values(), vec![1.0]);
    }

    #[test]
    fn lambda_selection_rules() {
        let c = select_lambda_by(&[0.7], |_| Ok(0.1)).unwrap();
        assert_eq!(c.lambda, 0.7);
        let c =
            select_lambda_by(&[0.9, 0.3, 0.5], |l| Ok(if l > 0.4 { 0.8 } else { 0.5 })).unwrap();
        assert_eq!(c.lambda, 0.5);
        assert_eq!(c.sweep.len(), 3);
        assert!(matches!(
            select_lambda_by(&[], |_| Ok(0.0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn merges_leave_inputs_untouched() {
        let mut rng = Rng::new(5);
        let base = random_params(&mut rng);
        let models: Vec<ModelParams> = (0..3).map(|_| random_params(&mut rng)).collect();
        let (b0, m0) = (base.clone(), models.clone());
        weight_average(&models).unwrap();
        task_arithmetic(&base, &models, 0.4).unwrap();
        ties_merge(&base, &models, 0.4, 0.3).unwrap();
        assert!(base.bitwise_eq(&b0));
        assert!(models.iter().zip(&m0).all(|(a, b)| a.bitwise_eq(b)));
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = MergeManifest {
            method: MergeMethod::Ties,
            lambda: Some(0.4),
            keep_fraction: Some(0.2),
            base: Some(ManifestInput {
                path: "b.ckpt".into(),
                sha256: "00".into(),
            }),
            inputs: vec![ManifestInput {
                path: "t0.ckpt".into(),
                sha256: "ab".into(),
            }],
            output: ManifestInput {
                path: "m.ckpt".into(),
                sha256: "cd".into(),
            },
            config_digest: None,
        };
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(MergeManifest::load(&p).unwrap(), m);
        assert!(std::fs::read_to_string(&p)
            .unwrap()
            .contains("\"method\": \"ties\""));
    }

    proptest! {
        #[test]
        fn weight_average_is_task_arithmetic_at_one_over_t(seed in any::<u64>(), t in 1usize..6) {
            let mut rng = Rng::new(seed);
            let models: Vec<ModelParams> = (0..t).map(|_| random_params(&mut rng)).collect();
            let zero = models[0].zeros_like();
            let wa = weight_average(&models).unwrap();
            let ta = task_arithmetic(&zero, &models, 1.0 / t as f64).unwrap();
            for (a, b) in wa.flat_values().iter().zip(ta.flat_values()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn agreeing_signs_are_all_kept(seed in any::<u64>(), t in 1usize..5, lambda in 0.0f64..=1.0) {
            let mut rng = Rng::new(seed);
            let base = random_params(&mut rng);
            let models: Vec<ModelParams> = (0..t)
                .map(|_| base.map(|v| v + 0.1 + rng.uniform()))
                .collect();
            let got = ties_merge(&base, &models, lambda, 1.0).unwrap();
            let deltas: Vec<ModelParams> = models.iter().map(|m| task_vector(m, &base).unwrap().delta).collect();
            let mean = weight_average(&deltas).unwrap();
            let want = base.add(&mean.scale(lambda)).unwrap();
            for (a, b) in got.flat_values().iter().zip(want.flat_values()) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
            }
        }
    }
}
