//! Datasets, the continual zero-shot task split, file ingestion, and the
//! synthetic generator.
//!
//! On-disk layout of a dataset directory:
//!
//! - `features.csv`: one sample per line, `feature_dim` floats followed by
//!   the integer class id. No header.
//! - `attributes.csv`: line `c` holds the `attr_dim` floats of class `c`.
//! - `meta.json`: `feature_dim`, `attr_dim`, `num_classes`, and optionally
//!   `train_idx` / `test_idx` (row indices into `features.csv`) and
//!   `class_names`. Without index lists, each class is split 80/20 by
//!   sorted row index.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const FEATURES_FILE: &str = "features.csv";
pub const ATTRIBUTES_FILE: &str = "attributes.csv";
pub const META_FILE: &str = "meta.json";
pub const FORMAT_VERSION: u32 = 1;

/// Features with their per-row attribute vectors and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub features: Tensor,
    pub attributes: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(features: Tensor, attributes: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() || attributes.rows() != labels.len() {
            return Err(Error::shape("labeled_set", features.shape(), attributes.shape()));
        }
        Ok(Self {
            features,
            attributes,
            labels,
        })
    }

    pub fn empty(feature_dim: usize, attr_dim: usize) -> Self {
        Self {
            features: Tensor::zeros(&[0, feature_dim]),
            attributes: Tensor::zeros(&[0, attr_dim]),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            features: self.features.select_rows(idx),
            attributes: self.attributes.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        LabeledSet::new(
            Tensor::vstack(&[&self.features, &other.features])?,
            Tensor::vstack(&[&self.attributes, &other.attributes])?,
            self.labels.iter().chain(&other.labels).copied().collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × feature_dim`
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// `num_classes × attr_dim`, row `c` is class `c`'s embedding.
    pub attributes: Tensor,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub class_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Train,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    format_version: Option<u32>,
    feature_dim: usize,
    attr_dim: usize,
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_idx: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_idx: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
}

impl Dataset {
    /// Validates and assembles a dataset. `None` index lists fall back to the
    /// per-class 80/20 split.
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        attributes: Tensor,
        split: Option<(Vec<usize>, Vec<usize>)>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let num_classes = attributes.rows();
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} >= num_classes {num_classes}")));
        }
        if !attributes.is_finite() {
            return Err(Error::Dataset("non-finite attribute value".into()));
        }
        if let Some(names) = &class_names {
            if names.len() != num_classes {
                return Err(Error::Dataset(format!(
                    "{} class names for {num_classes} classes",
                    names.len()
                )));
            }
        }
        let (train_idx, test_idx) = match split {
            Some(s) => s,
            None => default_split(&labels, num_classes),
        };
        let ds = Self {
            features,
            labels,
            attributes,
            train_idx,
            test_idx,
            class_names,
        };
        ds.validate_split()?;
        Ok(ds)
    }

    fn validate_split(&self) -> Result<()> {
        let n = self.len();
        let mut seen = vec![0u8; n];
        for (&i, tag) in self
            .train_idx
            .iter()
            .map(|i| (i, 1u8))
            .chain(self.test_idx.iter().map(|i| (i, 2u8)))
        {
            if i >= n {
                return Err(Error::Dataset(format!("split index {i} >= {n} samples")));
            }
            if seen[i] != 0 {
                return Err(Error::Dataset(format!(
                    "sample {i} appears twice in train/test indices"
                )));
            }
            seen[i] = tag;
        }
        if let Some(missing) = seen.iter().position(|&s| s == 0) {
            return Err(Error::Dataset(format!("sample {missing} is in neither train nor test")));
        }
        let mut counts = vec![[0usize; 2]; self.num_classes()];
        for (i, &s) in seen.iter().enumerate() {
            counts[self.labels[i]][usize::from(s - 1)] += 1;
        }
        for (c, [tr, te]) in counts.iter().enumerate() {
            if *tr == 0 || *te == 0 {
                return Err(Error::Dataset(format!(
                    "class {c} has {tr} train and {te} test samples; need at least one of each"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.attributes.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn attr_dim(&self) -> usize {
        self.attributes.cols()
    }

    /// Row indices of `partition` whose label is in `classes`, ascending.
    pub fn indices(&self, partition: Partition, classes: &[usize]) -> Vec<usize> {
        let wanted: BTreeSet<usize> = classes.iter().copied().collect();
        let src = match partition {
            Partition::Train => &self.train_idx,
            Partition::Test => &self.test_idx,
        };
        let mut out: Vec<usize> = src
            .iter()
            .copied()
            .filter(|&i| wanted.contains(&self.labels[i]))
            .collect();
        out.sort_unstable();
        out
    }

    pub fn labeled(&self, idx: &[usize]) -> LabeledSet {
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        LabeledSet {
            features: self.features.select_rows(idx),
            attributes: self.attributes.select_rows(&labels),
            labels,
        }
    }

    pub fn class_attributes(&self, classes: &[usize]) -> Tensor {
        self.attributes.select_rows(classes)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join(META_FILE);
        let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&meta_text)?;
        if let Some(v) = meta.format_version {
            if v > FORMAT_VERSION {
                return Err(Error::Dataset(format!("unsupported format_version {v}")));
            }
        }

        let attr_rows = read_csv_rows(&dir.join(ATTRIBUTES_FILE), ATTRIBUTES_FILE, meta.attr_dim)?;
        if attr_rows.len() != meta.num_classes {
            return Err(Error::Parse {
                file: ATTRIBUTES_FILE.into(),
                line: attr_rows.len() as u64,
                detail: format!(
                    "expected {} attribute rows (num_classes), found {}",
                    meta.num_classes,
                    attr_rows.len()
                ),
            });
        }
        let attributes = Tensor::from_rows(&attr_rows.into_iter().map(|(_, r)| r).collect::<Vec<_>>())?;

        let rows = read_csv_rows(&dir.join(FEATURES_FILE), FEATURES_FILE, meta.feature_dim + 1)?;
        let mut values = Vec::with_capacity(rows.len() * meta.feature_dim);
        let mut labels = Vec::with_capacity(rows.len());
        for (line, mut r) in rows {
            let raw = r.pop().expect("row has label column");
            if raw < 0.0 || raw.fract() != 0.0 {
                return Err(Error::Parse {
                    file: FEATURES_FILE.into(),
                    line,
                    detail: format!("class id {raw} is not a non-negative integer"),
                });
            }
            let label = raw as usize;
            if label >= meta.num_classes {
                return Err(Error::Parse {
                    file: FEATURES_FILE.into(),
                    line,
                    detail: format!("class id {label} >= num_classes {}", meta.num_classes),
                });
            }
            values.extend(r);
            labels.push(label);
        }
        let features = Tensor::matrix(labels.len(), meta.feature_dim, values)?;
        let split = match (meta.train_idx, meta.test_idx) {
            (Some(tr), Some(te)) => Some((tr, te)),
            (None, None) => None,
            _ => {
                return Err(Error::Dataset(
                    "meta.json must give both train_idx and test_idx or neither".into(),
                ))
            }
        };
        Dataset::new(features, labels, attributes, split, meta.class_names)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut w = csv_writer(&dir.join(FEATURES_FILE))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(dir.join(FEATURES_FILE), e))?;

        let mut w = csv_writer(&dir.join(ATTRIBUTES_FILE))?;
        for c in 0..self.num_classes() {
            w.write_record(self.attributes.row(c).iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(dir.join(ATTRIBUTES_FILE), e))?;

        let meta = Meta {
            format_version: Some(FORMAT_VERSION),
            feature_dim: self.feature_dim(),
            attr_dim: self.attr_dim(),
            num_classes: self.num_classes(),
            train_idx: Some(self.train_idx.clone()),
            test_idx: Some(self.test_idx.clone()),
            class_names: self.class_names.clone(),
        };
        let path = dir.join(META_FILE);
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

/// Parses a headerless numeric CSV, returning `(line number, values)` pairs.
fn read_csv_rows(path: &Path, name: &str, width: usize) -> Result<Vec<(u64, Vec<f64>)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(Error::Parse {
                file: name.into(),
                line,
                detail: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let mut row = Vec::with_capacity(width);
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                file: name.into(),
                line,
                detail: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    file: name.into(),
                    line,
                    detail: format!("non-finite value {field:?}"),
                });
            }
            row.push(v);
        }
        out.push((line, row));
    }
    Ok(out)
}

/// Per class: the first 80% of its rows (by index) train, the rest test,
/// keeping at least one of each.
fn default_split(labels: &[usize], num_classes: usize) -> (Vec<usize>, Vec<usize>) {
    let mut by_class = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for rows in by_class {
        let n = rows.len();
        let n_train = if n < 2 { n } else { (n * 4 / 5).clamp(1, n - 1) };
        train.extend_from_slice(&rows[..n_train]);
        test.extend_from_slice(&rows[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Ordered, disjoint class sets, one per task. Tasks are numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CzslSplit {
    pub num_classes: usize,
    pub tasks: Vec<Vec<usize>>,
}

impl CzslSplit {
    pub fn new(num_classes: usize, tasks: Vec<Vec<usize>>) -> Result<Self> {
        let mut used = BTreeSet::new();
        for (t, task) in tasks.iter().enumerate() {
            if task.is_empty() {
                return Err(Error::Contract(format!("task {} has no classes", t + 1)));
            }
            for &c in task {
                if c >= num_classes {
                    return Err(Error::Index {
                        what: "classes",
                        index: c,
                        bound: num_classes,
                    });
                }
                if !used.insert(c) {
                    return Err(Error::Contract(format!("class {c} assigned to more than one task")));
                }
            }
        }
        if tasks.is_empty() {
            return Err(Error::Contract("a split needs at least one task".into()));
        }
        Ok(Self { num_classes, tasks })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes of task `t` (1-based).
    pub fn task(&self, t: usize) -> Result<&[usize]> {
        self.check_t(t)?;
        Ok(&self.tasks[t - 1])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.tasks.len() {
            return Err(Error::Index {
                what: "tasks (1-based)",
                index: t,
                bound: self.tasks.len(),
            });
        }
        Ok(())
    }

    /// Classes of tasks `1..=t`, in task order.
    pub fn classes_through(&self, t: usize) -> Vec<usize> {
        self.tasks[..t.min(self.tasks.len())].concat()
    }

    /// 1-based task containing `class`, if any.
    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.contains(&class)).map(|i| i + 1)
    }

    /// Seen = tasks `1..=t`; unseen = every other dataset class. Both sorted.
    pub fn seen_unseen_at(&self, t: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        self.check_t(t)?;
        let mut seen = self.classes_through(t);
        seen.sort_unstable();
        let unseen = (0..self.num_classes)
            .filter(|c| seen.binary_search(c).is_err())
            .collect();
        Ok((seen, unseen))
    }
}

/// Partitions classes into `num_tasks` tasks of `classes_per_task` each, in
/// id order unless `order_seed` asks for a shuffled order.
pub fn make_split(
    num_classes: usize,
    num_tasks: usize,
    classes_per_task: usize,
    order_seed: Option<u64>,
) -> Result<CzslSplit> {
    let needed = num_tasks * classes_per_task;
    if num_tasks == 0 || classes_per_task == 0 || needed > num_classes {
        return Err(Error::Dataset(format!(
            "{num_tasks} tasks x {classes_per_task} classes needs {needed} classes, dataset has {num_classes}"
        )));
    }
    let mut order: Vec<usize> = (0..num_classes).collect();
    if let Some(seed) = order_seed {
        RngStream::new(seed).shuffle(&mut order);
    }
    let tasks = order[..needed]
        .chunks(classes_per_task)
        .map(<[usize]>::to_vec)
        .collect();
    CzslSplit::new(num_classes, tasks)
}

/// Per-dimension z-scoring with statistics frozen at fit time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Tensor, rows: &[usize]) -> Self {
        let d = features.cols();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(features.row(r)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for &r in rows {
            for ((s, v), m) in var.iter_mut().zip(features.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std = var
            .into_iter()
            .map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    /// Leaves features unchanged.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn apply(&self, features: &Tensor) -> Tensor {
        let d = features.cols();
        let mut out = features.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.mean[j]) / self.std[j];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub feature_dim: usize,
    pub attr_dim: usize,
    pub per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 12,
            feature_dim: 32,
            attr_dim: 8,
            per_class: 100,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

/// Class `c` samples are `N(W · attr_c, sigma² I)` for one fixed random
/// `W: feature_dim × attr_dim`, so class means are a linear function of the
/// attribute vectors and transfer to classes never trained on.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    let SynthSpec {
        classes,
        feature_dim,
        attr_dim,
        per_class,
        noise_sigma,
        seed,
    } = *spec;
    if classes == 0 || attr_dim == 0 || per_class < 2 {
        return Err(Error::Dataset(
            "synthetic data needs classes >= 1, attr_dim >= 1, per_class >= 2".into(),
        ));
    }
    if feature_dim < attr_dim {
        return Err(Error::Dataset(format!(
            "feature_dim {feature_dim} must be >= attr_dim {attr_dim}"
        )));
    }
    if noise_sigma.is_nan() || noise_sigma <= 0.0 {
        return Err(Error::Dataset(format!("noise_sigma must be > 0, got {noise_sigma}")));
    }
    let root = RngStream::new(seed);
    let w_scale = 1.0 / (attr_dim as f64).sqrt();
    let w = root
        .fork(1)
        .normal_tensor(&[feature_dim, attr_dim])
        .map(|v| v * w_scale);
    let attributes = root.fork(2).normal_tensor(&[classes, attr_dim]);

    let mut noise = root.fork(3);
    let mut values = Vec::with_capacity(classes * per_class * feature_dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let attr = attributes.row(c);
        let mean: Vec<f64> = (0..feature_dim)
            .map(|i| w.row(i).iter().zip(attr).map(|(a, b)| a * b).sum())
            .collect();
        for _ in 0..per_class {
            values.extend(mean.iter().map(|m| m + noise_sigma * noise.normal()));
            labels.push(c);
        }
    }
    let features = Tensor::matrix(labels.len(), feature_dim, values)?;
    Dataset::new(features, labels, attributes, None, None)
}
