//! Synthetic per-task classification data.
//!
//! Each class is a mixture of isotropic Gaussian blobs whose centres are
//! drawn uniformly from `[-4, 4]^input_dim`. Samples are split 70/10/20
//! into train/val/test, stratified by class.
//!
//! Tasks may share an input domain: their centres then come from one common
//! pool, so the same region of input space carries different labels in
//! different tasks, and every sample picks up variation along a common
//! nuisance subspace.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{random_orthogonal, Matrix, Rng};

pub const MEAN_RANGE: f64 = 4.0;
const VAL_FRACTION: f64 = 0.1;
const TEST_FRACTION: f64 = 0.2;
/// Smallest per-class count in any split.
const MIN_PER_SPLIT: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Generation recipe for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    /// Standard deviation of the isotropic noise around each blob centre.
    pub spread: f64,
    /// Blob centres per class; 1 gives one Gaussian per class.
    #[serde(default = "one")]
    pub modes_per_class: usize,
    /// Input-space structure shared with other tasks; `None` draws
    /// independent centres for this task alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<SharedDomain>,
    pub seed: u64,
}

/// Input domain shared by a family of tasks: a common pool of blob centres
/// (each task labels its own random subset of them) and a common low-rank
/// nuisance subspace carrying extra Gaussian variation that no task's labels
/// depend on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedDomain {
    pub seed: u64,
    /// Number of centres in the pool.
    pub centre_pool: usize,
    /// Dimension of the nuisance subspace; 0 disables it.
    #[serde(default)]
    pub nuisance_rank: usize,
    /// Standard deviation along each nuisance direction.
    #[serde(default)]
    pub nuisance_std: f64,
}

impl SharedDomain {
    fn validate(&self, spec: &TaskSpec) -> Result<()> {
        let needed = spec.num_classes * spec.modes_per_class;
        if self.centre_pool < needed {
            return Err(Error::Config(format!(
                "task {}: centre pool of {} cannot supply {needed} distinct centres",
                spec.task_id, self.centre_pool
            )));
        }
        if self.nuisance_rank > spec.input_dim {
            return Err(Error::Config(format!(
                "task {}: nuisance rank {} exceeds input_dim {}",
                spec.task_id, self.nuisance_rank, spec.input_dim
            )));
        }
        if !(self.nuisance_std >= 0.0 && self.nuisance_std.is_finite()) {
            return Err(Error::Config(format!(
                "task {}: nuisance_std must be finite and non-negative",
                spec.task_id
            )));
        }
        Ok(())
    }

    /// Pool centres and the nuisance basis (columns), both fixed by `seed`.
    fn materialize(&self, dim: usize) -> (Vec<Vec<f64>>, Matrix) {
        let mut rng = Rng::new(self.seed);
        let pool = (0..self.centre_pool)
            .map(|_| {
                (0..dim)
                    .map(|_| rng.uniform_range(-MEAN_RANGE, MEAN_RANGE))
                    .collect()
            })
            .collect();
        let q = random_orthogonal(dim, &mut rng);
        let cols: Vec<usize> = (0..self.nuisance_rank).collect();
        let basis = q.transpose().select_rows(&cols).transpose();
        (pool, basis)
    }
}

fn one() -> usize {
    1
}

/// Features and labels of one subset.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledBatch {
        LabeledBatch {
            x: self.x.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub num_classes: usize,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub seed: u64,
}

/// Row indices of the few-shot anchors, grouped by class.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotAnchors {
    pub k: usize,
    pub split: Split,
    pub per_class: Vec<Vec<usize>>,
}

impl FewShotAnchors {
    /// Anchor features, one matrix per class.
    pub fn features(&self, ds: &TaskDataset) -> Vec<Matrix> {
        self.per_class
            .iter()
            .map(|idx| ds.features.select_rows(idx))
            .collect()
    }

    /// All anchors as one batch, class-major order.
    pub fn batch(&self, ds: &TaskDataset) -> LabeledBatch {
        let idx: Vec<usize> = self.per_class.iter().flatten().copied().collect();
        ds.rows(&idx)
    }
}

/// Per-class split sizes `(train, val, test)` for `n` samples.
///
/// Each count is within one of its proportional target; validation and test
/// get at least two samples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let nf = n as f64;
    let val = ((nf * VAL_FRACTION).round() as usize).max(MIN_PER_SPLIT);
    let test_target = nf * TEST_FRACTION;
    let train_target = nf - nf * VAL_FRACTION - test_target;
    let test = [test_target.floor() as usize, test_target.ceil() as usize]
        .into_iter()
        .map(|t| t.max(MIN_PER_SPLIT))
        .min_by(|&a, &b| {
            let cost = |t: usize| {
                let train = (n - val - t) as f64;
                ((train - train_target).abs(), (t as f64 - test_target).abs())
            };
            cost(a).partial_cmp(&cost(b)).expect("finite")
        })
        .expect("two candidates");
    (n - test - val, val, test)
}

pub fn gen_task(spec: &TaskSpec) -> Result<TaskDataset> {
    if spec.num_classes < 2 {
        return Err(Error::Config(format!(
            "task {}: need at least 2 classes, got {}",
            spec.task_id, spec.num_classes
        )));
    }
    if spec.samples_per_class < 10 {
        return Err(Error::Config(format!(
            "task {}: need at least 10 samples per class, got {}",
            spec.task_id, spec.samples_per_class
        )));
    }
    if spec.input_dim == 0 || spec.modes_per_class == 0 {
        return Err(Error::Config(format!(
            "task {}: input_dim and modes_per_class must be positive",
            spec.task_id
        )));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(Error::Config(format!(
            "task {}: spread must be finite and non-negative, got {}",
            spec.task_id, spec.spread
        )));
    }

    let mut rng = Rng::new(spec.seed);
    let (c, n, dim, modes) = (
        spec.num_classes,
        spec.samples_per_class,
        spec.input_dim,
        spec.modes_per_class,
    );
    let (centres, nuisance): (Vec<Vec<f64>>, Option<(Matrix, f64)>) = match &spec.domain {
        None => {
            let centres = (0..c * modes)
                .map(|_| {
                    (0..dim)
                        .map(|_| rng.uniform_range(-MEAN_RANGE, MEAN_RANGE))
                        .collect()
                })
                .collect();
            (centres, None)
        }
        Some(domain) => {
            domain.validate(spec)?;
            let (pool, basis) = domain.materialize(dim);
            let mut order: Vec<usize> = (0..pool.len()).collect();
            rng.shuffle(&mut order);
            let centres = order[..c * modes]
                .iter()
                .map(|&i| pool[i].clone())
                .collect();
            let nuisance = (domain.nuisance_rank > 0).then_some((basis, domain.nuisance_std));
            (centres, nuisance)
        }
    };

    let mut data = Vec::with_capacity(c * n * dim);
    let mut labels = Vec::with_capacity(c * n);
    for class in 0..c {
        for i in 0..n {
            // Modes are filled round-robin so each gets an equal share.
            let centre = &centres[class * modes + i % modes];
            let mut x: Vec<f64> = centre
                .iter()
                .map(|&m| m + spec.spread * rng.normal())
                .collect();
            if let Some((basis, std)) = &nuisance {
                for k in 0..basis.cols() {
                    let z = std * rng.normal();
                    for (j, v) in x.iter_mut().enumerate() {
                        *v += z * basis.get(j, k);
                    }
                }
            }
            data.extend(x);
            labels.push(class);
        }
    }

    let (_, val, test) = split_sizes(n);
    let mut splits = vec![Split::Train; c * n];
    for class in 0..c {
        let mut idx: Vec<usize> = (class * n..(class + 1) * n).collect();
        rng.shuffle(&mut idx);
        for &i in &idx[..test] {
            splits[i] = Split::Test;
        }
        for &i in &idx[test..test + val] {
            splits[i] = Split::Val;
        }
    }

    Ok(TaskDataset {
        task_id: spec.task_id,
        num_classes: c,
        features: Matrix::new(c * n, dim, data)?,
        labels,
        splits,
        seed: spec.seed,
    })
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn rows(&self, idx: &[usize]) -> LabeledBatch {
        LabeledBatch {
            x: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn batch(&self, split: Split) -> LabeledBatch {
        self.rows(&self.indices(split))
    }

    /// Number of samples per class in `split`.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for (l, s) in self.labels.iter().zip(&self.splits) {
            if *s == split {
                counts[*l] += 1;
            }
        }
        counts
    }

    fn class_indices(&self, split: Split) -> Vec<Vec<usize>> {
        let mut per_class = vec![Vec::new(); self.num_classes];
        for i in self.indices(split) {
            per_class[self.labels[i]].push(i);
        }
        per_class
    }
}

/// Exactly `k` samples per class from `split`, uniformly without
/// replacement.
pub fn sample_few_shot(
    ds: &TaskDataset,
    k: usize,
    split: Split,
    seed: u64,
) -> Result<FewShotAnchors> {
    if k == 0 {
        return Err(Error::Config("few-shot k must be at least 1".into()));
    }
    let mut rng = Rng::new(seed);
    let mut per_class = Vec::with_capacity(ds.num_classes);
    for (class, mut idx) in ds.class_indices(split).into_iter().enumerate() {
        if idx.len() < k {
            return Err(Error::Config(format!(
                "task {}: class {class} has {} samples in the {split} split, fewer than k = {k}",
                ds.task_id,
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        idx.truncate(k);
        idx.sort_unstable();
        per_class.push(idx);
    }
    Ok(FewShotAnchors {
        k,
        split,
        per_class,
    })
}

/// `ceil(fraction * |split|)` samples (at least one) drawn uniformly
/// without replacement, returned in ascending row order.
pub fn sample_fraction(
    ds: &TaskDataset,
    fraction: f64,
    split: Split,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "sample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut idx = ds.indices(split);
    if idx.is_empty() {
        return Err(Error::Config(format!("the {split} split is empty")));
    }
    let take = ((fraction * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
    Rng::new(seed).shuffle(&mut idx);
    idx.truncate(take);
    idx.sort_unstable();
    Ok(idx)
}

/// Default suite: three tasks with 3, 4 and 5 classes.
pub fn default_suite(seed: u64) -> Vec<TaskSpec> {
    SuiteConfig::default().task_specs(seed)
}

/// Suite-level settings shared by every task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub class_counts: Vec<usize>,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    #[serde(default = "one")]
    pub modes_per_class: usize,
    /// Shared input domain; its seed is derived from the root seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<DomainConfig>,
}

/// [`SharedDomain`] without the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub centre_pool: usize,
    #[serde(default)]
    pub nuisance_rank: usize,
    #[serde(default)]
    pub nuisance_std: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            class_counts: vec![3, 4, 5],
            samples_per_class: 300,
            input_dim: 16,
            spread: 1.5,
            modes_per_class: 1,
            domain: Some(DomainConfig {
                centre_pool: 6,
                nuisance_rank: 10,
                nuisance_std: 8.0,
            }),
        }
    }
}

impl SuiteConfig {
    /// Task specs with seeds derived from `root` as `task:<id>`.
    pub fn task_specs(&self, root: u64) -> Vec<TaskSpec> {
        self.class_counts
            .iter()
            .enumerate()
            .map(|(task_id, &num_classes)| TaskSpec {
                task_id,
                num_classes,
                samples_per_class: self.samples_per_class,
                input_dim: self.input_dim,
                spread: self.spread,
                modes_per_class: self.modes_per_class,
                domain: self.domain.as_ref().map(|d| SharedDomain {
                    seed: crate::numkit::derive_seed(root, "data:domain"),
                    centre_pool: d.centre_pool,
                    nuisance_rank: d.nuisance_rank,
                    nuisance_std: d.nuisance_std,
                }),
                seed: crate::numkit::derive_seed(root, &format!("data:{task_id}")),
            })
            .collect()
    }
}

/// Writes `label,f0,f1,...`, one row per sample.
pub fn write_csv<W: Write>(ds: &TaskDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.input_dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (row, label) in ds.features.row_iter().zip(&ds.labels) {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}

/// Writes `index,split`.
pub fn write_splits_csv<W: Write>(ds: &TaskDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "split"]).map_err(csv_err)?;
    for (i, s) in ds.splits.iter().enumerate() {
        w.write_record([i.to_string(), s.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

/// Reads a `label,f0,...` table. Without a split table, samples are split
/// 70/10/20 per class using `seed`.
pub fn read_csv<R: Read, S: Read>(
    task_id: usize,
    data: R,
    splits: Option<S>,
    seed: u64,
) -> Result<TaskDataset> {
    let mut r = csv::Reader::from_reader(data);
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.get(0) != Some("label") {
        return Err(Error::Data(format!(
            "dataset header must start with `label`, got {:?}",
            headers.get(0)
        )));
    }
    let dim = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != dim + 1 {
            return Err(Error::Data(format!(
                "row {line}: expected {} fields, got {}",
                dim + 1,
                rec.len()
            )));
        }
        let label: usize = rec[0]
            .parse()
            .map_err(|e| Error::Data(format!("row {line}: bad label {:?}: {e}", &rec[0])))?;
        labels.push(label);
        for f in rec.iter().skip(1) {
            features.push(
                f.parse::<f64>()
                    .map_err(|e| Error::Data(format!("row {line}: bad feature {f:?}: {e}")))?,
            );
        }
    }
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    if num_classes < 2 {
        return Err(Error::Data("dataset needs at least two classes".into()));
    }
    let n = labels.len();
    let splits = match splits {
        Some(src) => {
            let mut assigned = vec![None; n];
            let mut r = csv::Reader::from_reader(src);
            for rec in r.records() {
                let rec = rec.map_err(csv_err)?;
                let idx: usize = rec
                    .get(0)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Data(format!("bad split row {rec:?}")))?;
                let split = Split::parse(rec.get(1).unwrap_or(""))?;
                *assigned
                    .get_mut(idx)
                    .ok_or_else(|| Error::Data(format!("split index {idx} out of range")))? =
                    Some(split);
            }
            assigned
                .into_iter()
                .enumerate()
                .map(|(i, s)| s.ok_or_else(|| Error::Data(format!("sample {i} has no split"))))
                .collect::<Result<Vec<_>>>()?
        }
        None => stratified_splits(&labels, num_classes, seed),
    };
    Ok(TaskDataset {
        task_id,
        num_classes,
        features: Matrix::new(n, dim, features)?,
        labels,
        splits,
        seed,
    })
}

fn stratified_splits(labels: &[usize], num_classes: usize, seed: u64) -> Vec<Split> {
    let mut rng = Rng::new(seed);
    let mut splits = vec![Split::Train; labels.len()];
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let n = idx.len();
        let test = (n as f64 * TEST_FRACTION).round() as usize;
        let val = ((n as f64 * VAL_FRACTION).round() as usize).min(n - test);
        rng.shuffle(&mut idx);
        for &i in &idx[..test] {
            splits[i] = Split::Test;
        }
        for &i in &idx[test..test + val] {
            splits[i] = Split::Val;
        }
    }
    splits
}

pub fn save_dataset(ds: &TaskDataset, data_path: &Path, splits_path: &Path) -> Result<()> {
    let f = std::fs::File::create(data_path).map_err(|e| Error::io(data_path, e))?;
    write_csv(ds, std::io::BufWriter::new(f))?;
    let f = std::fs::File::create(splits_path).map_err(|e| Error::io(splits_path, e))?;
    write_splits_csv(ds, std::io::BufWriter::new(f))
}

pub fn load_dataset(
    task_id: usize,
    data_path: &Path,
    splits_path: Option<&Path>,
    seed: u64,
) -> Result<TaskDataset> {
    let data = std::fs::File::open(data_path).map_err(|e| Error::io(data_path, e))?;
    let splits = match splits_path {
        Some(p) => Some(std::fs::File::open(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    read_csv(task_id, data, splits, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(c: usize, n: usize, seed: u64) -> TaskSpec {
        TaskSpec {
            task_id: 0,
            num_classes: c,
            samples_per_class: n,
            input_dim: 16,
            spread: 1.5,
            modes_per_class: 1,
            domain: None,
            seed,
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = gen_task(&spec(3, 50, 9)).unwrap();
        let b = gen_task(&spec(3, 50, 9)).unwrap();
        assert_eq!(a, b);
        let c = gen_task(&spec(3, 50, 10)).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn zero_spread_collapses_to_class_means() {
        let ds = gen_task(&TaskSpec {
            spread: 0.0,
            ..spec(3, 20, 1)
        })
        .unwrap();
        for class in 0..3 {
            let rows: Vec<&[f64]> = (0..ds.len())
                .filter(|&i| ds.labels[i] == class)
                .map(|i| ds.features.row(i))
                .collect();
            assert!(rows.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn stratified_test_split_counts() {
        // 100 per class: 20 test, 10 val, 70 train.
        let ds = gen_task(&spec(4, 100, 3)).unwrap();
        assert_eq!(ds.indices(Split::Test).len(), 80);
        assert_eq!(ds.class_counts(Split::Test), vec![20; 4]);
        assert_eq!(ds.class_counts(Split::Val), vec![10; 4]);
        assert_eq!(ds.class_counts(Split::Train), vec![70; 4]);
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        assert!(matches!(gen_task(&spec(1, 50, 0)), Err(Error::Config(_))));
        assert!(matches!(gen_task(&spec(3, 9, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn few_shot_examples() {
        let ds = gen_task(&spec(4, 100, 3)).unwrap();
        let all = sample_few_shot(&ds, 20, Split::Test, 1).unwrap();
        for (class, idx) in all.per_class.iter().enumerate() {
            let want: Vec<usize> = ds
                .indices(Split::Test)
                .into_iter()
                .filter(|&i| ds.labels[i] == class)
                .collect();
            assert_eq!(idx, &want);
        }
        let one_a = sample_few_shot(&ds, 1, Split::Train, 5).unwrap();
        let one_b = sample_few_shot(&ds, 1, Split::Train, 5).unwrap();
        assert_eq!(one_a, one_b);
        assert!(one_a.per_class.iter().all(|v| v.len() == 1));

        let a = sample_few_shot(&ds, 5, Split::Train, 1).unwrap();
        let b = sample_few_shot(&ds, 5, Split::Train, 2).unwrap();
        assert_ne!(a.per_class, b.per_class);

        let err = sample_few_shot(&ds, 21, Split::Test, 0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("class 0"), "{err}");
    }

    #[test]
    fn anchors_come_from_the_requested_split() {
        let ds = gen_task(&spec(3, 40, 4)).unwrap();
        let a = sample_few_shot(&ds, 3, Split::Val, 8).unwrap();
        for (class, idx) in a.per_class.iter().enumerate() {
            for &i in idx {
                assert_eq!(ds.splits[i], Split::Val);
                assert_eq!(ds.labels[i], class);
            }
        }
    }

    #[test]
    fn fraction_sampling() {
        let ds = gen_task(&spec(4, 100, 3)).unwrap();
        assert_eq!(sample_fraction(&ds, 0.05, Split::Test, 0).unwrap().len(), 4);
        assert_eq!(
            sample_fraction(&ds, 0.001, Split::Test, 0).unwrap().len(),
            1
        );
        assert!(sample_fraction(&ds, 0.0, Split::Test, 0).is_err());
    }

    #[test]
    fn csv_round_trip_with_splits() {
        let ds = gen_task(&TaskSpec {
            modes_per_class: 2,
            ..spec(3, 12, 6)
        })
        .unwrap();
        let mut data = Vec::new();
        let mut splits = Vec::new();
        write_csv(&ds, &mut data).unwrap();
        write_splits_csv(&ds, &mut splits).unwrap();
        assert!(String::from_utf8_lossy(&data).starts_with("label,f0,f1,"));
        let back = read_csv(0, data.as_slice(), Some(splits.as_slice()), 6).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.splits, ds.splits);
        assert_eq!(back.features, ds.features);
    }

    #[test]
    fn csv_without_split_table_is_stratified() {
        let ds = gen_task(&spec(3, 30, 6)).unwrap();
        let mut data = Vec::new();
        write_csv(&ds, &mut data).unwrap();
        let back = read_csv(0, data.as_slice(), None::<&[u8]>, 1).unwrap();
        assert_eq!(back.class_counts(Split::Test), vec![6; 3]);
        assert_eq!(back.class_counts(Split::Val), vec![3; 3]);
    }

    proptest! {
        #[test]
        fn splits_are_stratified_disjoint_and_exhaustive(
            c in 2usize..6, n in 10usize..120, seed in any::<u64>()
        ) {
            let ds = gen_task(&spec(c, n, seed)).unwrap();
            prop_assert_eq!(ds.len(), c * n);
            let total: usize = Split::ALL.iter().map(|&s| ds.indices(s).len()).sum();
            prop_assert_eq!(total, c * n);
            for (split, frac) in [(Split::Train, 0.7), (Split::Val, 0.1), (Split::Test, 0.2)] {
                for count in ds.class_counts(split) {
                    prop_assert!(count >= 2);
                    prop_assert!((count as f64 - frac * n as f64).abs() <= 1.0 + 1e-9,
                        "{split}: {count} vs {}", frac * n as f64);
                }
            }
            prop_assert!(ds.labels.iter().all(|&l| l < c));
        }
    }
}
