//! The task loop: per-task model training with generative replay, a fresh
//! classifier trained on decoded features for every class, and evaluation
//! after each task.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{CzslSplit, Dataset, LabeledSet, Partition, Standardizer};
use crate::error::{Error, Result};
use crate::eval::{accuracy, harmonic, AccuracyMatrix, Averaging, MetricsReport, PredictionRecord, Regime};
use crate::graph::Graph;
use crate::model::{AczslModel, Batch, FakeMode, Lambdas, LossBreakdown, ModelConfig};
use crate::nn::{softmax_cross_entropy, Activation, Adam, AdamConfig, Mlp};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Epoch count applied to every task, or one count per task (the last entry
/// repeats for later tasks).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpochSchedule {
    Uniform(usize),
    PerTask(Vec<usize>),
}

impl EpochSchedule {
    pub fn for_task(&self, t: usize) -> usize {
        match self {
            Self::Uniform(n) => *n,
            Self::PerTask(v) => v.get(t - 1).or(v.last()).copied().unwrap_or(0),
        }
    }

    fn all_positive(&self) -> bool {
        match self {
            Self::Uniform(n) => *n > 0,
            Self::PerTask(v) => !v.is_empty() && v.iter().all(|&n| n > 0),
        }
    }
}

/// Task id given to replayed rows on the discriminator's real branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplayTaskLabel {
    /// The task being trained.
    #[default]
    Current,
    /// The task that introduced the replayed class.
    Original,
}

/// Network widths and adversarial settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    /// Empty means a linear softmax classifier.
    pub classifier_hidden: Vec<usize>,
    pub grl_strength: f64,
    pub fake_mode: FakeMode,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            latent_dim: 50,
            hidden: vec![500],
            head_hidden: vec![500],
            discriminator_hidden: vec![500],
            classifier_hidden: Vec::new(),
            grl_strength: 1.0,
            fake_mode: FakeMode::DecodedPrior,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model_epochs: EpochSchedule,
    pub classifier_epochs: EpochSchedule,
    pub s_steps: usize,
    pub d_steps: usize,
    pub batch_size: usize,
    pub lr_model: f64,
    pub lr_classifier: f64,
    pub classifier_weight_decay: f64,
    pub replay_n_per_class: usize,
    pub classifier_n_per_class: usize,
    pub lambdas: Lambdas,
    pub adversarial: bool,
    pub replay: bool,
    pub replay_task_label: ReplayTaskLabel,
    pub averaging: Averaging,
    /// z-score features with task-1 training statistics.
    pub standardize: bool,
    pub architecture: Architecture,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model_epochs: EpochSchedule::Uniform(100),
            classifier_epochs: EpochSchedule::Uniform(30),
            s_steps: 1,
            d_steps: 1,
            batch_size: 61,
            lr_model: 1e-3,
            lr_classifier: 1e-4,
            classifier_weight_decay: 1e-4,
            replay_n_per_class: 64,
            classifier_n_per_class: 128,
            lambdas: Lambdas::default(),
            adversarial: true,
            replay: true,
            replay_task_label: ReplayTaskLabel::Current,
            averaging: Averaging::ClassBalanced,
            standardize: true,
            architecture: Architecture::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Contract(format!("{what} must be positive")));
        if !self.model_epochs.all_positive() {
            return bad("model_epochs");
        }
        if !self.classifier_epochs.all_positive() {
            return bad("classifier_epochs");
        }
        for (name, n) in [
            ("s_steps", self.s_steps),
            ("batch_size", self.batch_size),
            ("replay_n_per_class", self.replay_n_per_class),
            ("classifier_n_per_class", self.classifier_n_per_class),
        ] {
            if n == 0 {
                return bad(name);
            }
        }
        if self.adversarial && self.d_steps == 0 {
            return bad("d_steps");
        }
        if !(self.lr_model > 0.0) || !(self.lr_classifier > 0.0) {
            return bad("learning rates");
        }
        if !(self.classifier_weight_decay >= 0.0) {
            return Err(Error::Contract("classifier_weight_decay must be >= 0".into()));
        }
        if self.architecture.classifier_hidden.contains(&0) {
            return bad("classifier_hidden widths");
        }
        Ok(())
    }

    pub fn model_config(&self, feature_dim: usize, attr_dim: usize, max_tasks: usize) -> ModelConfig {
        let a = &self.architecture;
        ModelConfig {
            feature_dim,
            attr_dim,
            latent_dim: a.latent_dim,
            hidden: a.hidden.clone(),
            head_hidden: a.head_hidden.clone(),
            discriminator_hidden: a.discriminator_hidden.clone(),
            max_tasks,
            lambdas: self.lambdas,
            grl_strength: a.grl_strength,
            fake_mode: a.fake_mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Replay,
    ClassifierTrain,
}

/// Decoder output tagged with what it is for. `origin_task[r]` is the task
/// that introduced row `r`'s class.
#[derive(Debug, Clone)]
pub struct GeneratedSet {
    pub set: LabeledSet,
    pub provenance: Provenance,
    pub origin_task: Vec<usize>,
}

impl GeneratedSet {
    pub fn empty(feature_dim: usize, attr_dim: usize) -> Self {
        Self {
            set: LabeledSet::empty(feature_dim, attr_dim),
            provenance: Provenance::Replay,
            origin_task: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub epoch: usize,
    pub samples: usize,
    pub losses: LossBreakdown,
    /// Mean discriminator loss; absent when adversarial training is off.
    pub discriminator: Option<f64>,
}

fn minibatches(n: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.l_adv += b.l_adv;
    acc.l_task += b.l_task;
    acc.l_vae_shared += b.l_vae_shared;
    acc.l_vae_private += b.l_vae_private;
    acc.total += b.total;
}

/// Trains task `t` on `data ∪ replay`. `task_attrs` holds one attribute row
/// per class of task `t` (used for the discriminator's fake branch).
pub fn train_task(
    model: &mut AczslModel,
    t: usize,
    data: &LabeledSet,
    replay: &GeneratedSet,
    task_attrs: &Tensor,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Vec<EpochLog>> {
    if !model.is_task_active() || model.num_tasks() != t {
        return Err(Error::Contract(format!("task {t} is not the active task")));
    }
    let current: BTreeSet<usize> = model.task_classes()[t - 1].iter().copied().collect();
    if let Some(c) = replay.set.labels.iter().find(|c| current.contains(c)) {
        return Err(Error::Contract(format!(
            "replay contains class {c} of the current task {t}"
        )));
    }
    if let Some(c) = data.labels.iter().find(|c| !current.contains(c)) {
        return Err(Error::Contract(format!("task {t} data contains foreign class {c}")));
    }
    let union = data.concat(&replay.set)?;
    let mut task_ids = vec![t; data.len()];
    task_ids.extend(replay.origin_task.iter().map(|&o| match config.replay_task_label {
        ReplayTaskLabel::Current => t,
        ReplayTaskLabel::Original => o,
    }));

    let s_params = model.s_step_params(t);
    let d_params = model.discriminator_params();
    let mut s_opt = Adam::new(AdamConfig::new(config.lr_model));
    let mut d_opt = Adam::new(AdamConfig::new(config.lr_model));
    let epochs = config.model_epochs.for_task(t);
    let mut logs = Vec::with_capacity(epochs);

    for epoch in 1..=epochs {
        let batches = minibatches(union.len(), config.batch_size, rng);
        let mut sum = LossBreakdown::default();
        let mut d_sum = 0.0;
        for idx in &batches {
            let batch = Batch::new(union.select(idx), idx.iter().map(|&i| task_ids[i]).collect())?;
            for step in 0..config.s_steps {
                let mut g = Graph::with_trainable(s_params.iter().copied());
                let terms = if config.adversarial {
                    model.total_loss(&mut g, &batch, t, rng)?
                } else {
                    model.total_loss_without_adversarial(&mut g, &batch, t, rng)?
                };
                let b = terms.breakdown(&g);
                if !b.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "model loss at task {t}, epoch {epoch}: {b:?}"
                    )));
                }
                if step == 0 {
                    add_breakdown(&mut sum, &b);
                }
                g.backward(terms.total)?;
                s_opt.step(&mut model.store, &g.param_grads())?;
            }
            if config.adversarial {
                for step in 0..config.d_steps {
                    let mut g = Graph::with_trainable(d_params.iter().copied());
                    let loss = model.discriminator_loss(&mut g, &batch, t, task_attrs, rng)?;
                    let v = g.value(loss).item();
                    if !v.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "discriminator loss at task {t}, epoch {epoch}"
                        )));
                    }
                    if step == 0 {
                        d_sum += v;
                    }
                    g.backward(loss)?;
                    d_opt.step(&mut model.store, &g.param_grads())?;
                }
            }
        }
        let n = batches.len().max(1) as f64;
        let mean = LossBreakdown {
            l_adv: sum.l_adv / n,
            l_task: sum.l_task / n,
            l_vae_shared: sum.l_vae_shared / n,
            l_vae_private: sum.l_vae_private / n,
            total: sum.total / n,
        };
        log::debug!("task {t} epoch {epoch}: total {:.5}", mean.total);
        logs.push(EpochLog {
            task: t,
            epoch,
            samples: union.len(),
            losses: mean,
            discriminator: config.adversarial.then_some(d_sum / n),
        });
    }
    Ok(logs)
}

/// Shared-decoder samples for every class of tasks `1..=t`.
pub fn build_replay(
    model: &AczslModel,
    split: &CzslSplit,
    class_attributes: &Tensor,
    t: usize,
    n_per_class: usize,
    rng: &mut RngStream,
) -> Result<GeneratedSet> {
    split.task(t)?;
    let classes = split.classes_through(t);
    let attrs = class_attributes.select_rows(&classes);
    let set = model
        .shared
        .generate(&model.store, &classes, &attrs, n_per_class, rng)?;
    let origin_task = set.labels.iter().map(|&c| split.task_of(c).unwrap_or(t)).collect();
    Ok(GeneratedSet {
        set,
        provenance: Provenance::Replay,
        origin_task,
    })
}

/// Softmax classifier over every dataset class, trained only on decoded
/// features.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub store: ParamStore,
    pub net: Mlp,
}

impl Classifier {
    pub fn num_classes(&self) -> usize {
        self.net.out_dim()
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::with_trainable([]);
        let x = g.constant(features.clone());
        let out = self.net.forward(&mut g, &self.store, x)?;
        Ok(g.value(out).clone())
    }

    /// Argmax restricted to `allowed` classes; ties go to the earliest entry
    /// of `allowed`.
    pub fn predict(&self, features: &Tensor, allowed: &[usize]) -> Result<Vec<usize>> {
        if allowed.is_empty() {
            return Err(Error::Contract("prediction needs at least one candidate class".into()));
        }
        if let Some(&c) = allowed.iter().find(|&&c| c >= self.num_classes()) {
            return Err(Error::Index {
                what: "classifier outputs",
                index: c,
                bound: self.num_classes(),
            });
        }
        let logits = self.logits(features)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = allowed[0];
                for &c in &allowed[1..] {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }
}

/// Fits a fresh classifier for step `t` on features decoded for every
/// dataset class. `class_attributes` must have one row per class.
pub fn train_classifier(
    model: &AczslModel,
    class_attributes: &Tensor,
    t: usize,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Classifier> {
    let num_classes = class_attributes.rows();
    if num_classes == 0 || class_attributes.cols() != model.config.attr_dim {
        return Err(Error::Dataset(format!(
            "classifier needs one {}-wide attribute row per class",
            model.config.attr_dim
        )));
    }
    let classes: Vec<usize> = (0..num_classes).collect();
    let data = model.shared.generate(
        &model.store,
        &classes,
        class_attributes,
        config.classifier_n_per_class,
        rng,
    )?;
    if !data.features.is_finite() {
        return Err(Error::NonFinite(format!("generated classifier data at task {t}")));
    }
    let mut store = ParamStore::new();
    let mut dims = vec![model.config.feature_dim];
    dims.extend_from_slice(&config.architecture.classifier_hidden);
    dims.push(num_classes);
    let net = Mlp::new(
        &mut store,
        "classifier",
        &dims,
        Activation::Relu,
        Activation::Identity,
        rng,
    );
    let mut opt = Adam::new(AdamConfig::new(config.lr_classifier).with_weight_decay(config.classifier_weight_decay));
    for epoch in 1..=config.classifier_epochs.for_task(t) {
        for idx in minibatches(data.len(), config.batch_size, rng) {
            let mut g = Graph::new();
            let x = g.constant(data.features.select_rows(&idx));
            let logits = net.forward(&mut g, &store, x)?;
            let targets: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let loss = softmax_cross_entropy(&mut g, logits, &targets)?;
            if !g.value(loss).item().is_finite() {
                return Err(Error::NonFinite(format!("classifier loss at task {t}, epoch {epoch}")));
            }
            g.backward(loss)?;
            opt.step(&mut store, &g.param_grads())?;
        }
    }
    Ok(Classifier { store, net })
}

/// Accuracy of the discriminator on held-out shared reconstructions: test
/// samples of task `i ≤ t` labelled `i`, plus as many fakes labelled `0`.
/// Class-balanced over labels `0..=t`.
pub fn discriminator_probe(
    model: &AczslModel,
    dataset: &Dataset,
    split: &CzslSplit,
    t: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    let mut real_rows = 0;
    for i in 1..=t {
        let idx = dataset.indices(Partition::Test, split.task(i)?);
        let batch = Batch::for_task(dataset.labeled(&idx), i);
        let recon = model.shared_reconstruction(&batch, rng)?;
        preds.extend(model.discriminate(&recon, t)?);
        labels.extend(std::iter::repeat_n(i, idx.len()));
        real_rows += idx.len();
    }
    let per_label = real_rows.div_ceil(t).max(1);
    let attrs = dataset.class_attributes(split.task(t)?);
    let fake = model.fake_features_decoded(per_label, &attrs, rng)?;
    preds.extend(model.discriminate(&fake, t)?);
    labels.extend(std::iter::repeat_n(0, per_label));
    let all: Vec<usize> = (0..=t).collect();
    accuracy(&preds, &labels, &all, Averaging::ClassBalanced, false)
}

/// Evaluation results at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEvaluation {
    pub task: usize,
    /// `R[task][i]` for `i = 1..=task`.
    pub seen: Vec<f64>,
    pub unseen: Option<f64>,
    pub overall: f64,
    pub harmonic: Option<f64>,
    pub discriminator_accuracy: Option<f64>,
    pub replay_rows: usize,
}

/// Everything produced by a full stream.
#[derive(Debug, Clone)]
pub struct StreamOutcome {
    pub matrix: AccuracyMatrix,
    pub report: MetricsReport,
    pub epochs: Vec<EpochLog>,
    pub evaluations: Vec<TaskEvaluation>,
    pub predictions: Vec<PredictionRecord>,
    /// Real training classes read while training each task.
    pub real_classes_read: Vec<BTreeSet<usize>>,
    pub standardizer: Standardizer,
    pub model: AczslModel,
}

/// Evaluates `classifier` after task `t`, appending prediction records and
/// filling step `t` of `matrix`. Returns `(R[t][1..=t], unseen, overall)`.
pub fn evaluate_step(
    classifier: &Classifier,
    dataset: &Dataset,
    split: &CzslSplit,
    t: usize,
    averaging: Averaging,
    matrix: &mut AccuracyMatrix,
    records: &mut Vec<PredictionRecord>,
) -> Result<(Vec<f64>, Option<f64>, f64)> {
    let (seen, unseen) = split.seen_unseen_at(t)?;
    let mut predict = |regime: Regime, classes: &[usize]| -> Result<(Vec<usize>, Vec<usize>)> {
        let idx = dataset.indices(Partition::Test, classes);
        let preds = classifier.predict(&dataset.features.select_rows(&idx), classes)?;
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
        records.extend(
            idx.iter()
                .zip(&preds)
                .zip(&labels)
                .map(|((&i, &p), &y)| PredictionRecord {
                    t,
                    sample_id: i,
                    true_label: y,
                    pred: p,
                    regime,
                }),
        );
        Ok((preds, labels))
    };

    let (preds, labels) = predict(Regime::Seen, &seen)?;
    let mut seen_acc = Vec::with_capacity(t);
    for i in 1..=t {
        let mut upto = split.classes_through(i);
        upto.sort_unstable();
        let (p, y): (Vec<usize>, Vec<usize>) = preds
            .iter()
            .zip(&labels)
            .filter(|(_, y)| upto.binary_search(y).is_ok())
            .map(|(&p, &y)| (p, y))
            .unzip();
        let acc = accuracy(&p, &y, &upto, averaging, false)?;
        matrix.set_seen(t, i, acc)?;
        seen_acc.push(acc);
    }
    let unseen_acc = if unseen.is_empty() {
        None
    } else {
        let (p, y) = predict(Regime::Unseen, &unseen)?;
        let acc = accuracy(&p, &y, &unseen, averaging, false)?;
        matrix.set_unseen(t, acc)?;
        Some(acc)
    };
    let all: Vec<usize> = (0..split.num_classes).collect();
    let (p, y) = predict(Regime::Overall, &all)?;
    let overall = accuracy(&p, &y, &all, averaging, false)?;
    matrix.set_overall(t, overall)?;
    Ok((seen_acc, unseen_acc, overall))
}

/// Runs the whole task sequence. Features are z-scored with task-1 training
/// statistics before anything else touches them.
pub fn run_stream(dataset: &Dataset, split: &CzslSplit, config: &TrainConfig) -> Result<StreamOutcome> {
    config.validate()?;
    if split.num_classes != dataset.num_classes() {
        return Err(Error::Dataset(format!(
            "split covers {} classes, dataset has {}",
            split.num_classes,
            dataset.num_classes()
        )));
    }
    let t_max = split.num_tasks();
    let standardizer = if config.standardize {
        Standardizer::fit(&dataset.features, &dataset.indices(Partition::Train, split.task(1)?))
    } else {
        Standardizer::identity(dataset.feature_dim())
    };
    let data = Dataset {
        features: standardizer.apply(&dataset.features),
        ..dataset.clone()
    };

    let root = RngStream::new(config.seed);
    let mut model = AczslModel::new(
        config.model_config(data.feature_dim(), data.attr_dim(), t_max),
        &mut root.fork(1),
    )?;
    let mut matrix = AccuracyMatrix::new(t_max);
    let mut epochs = Vec::new();
    let mut evaluations = Vec::with_capacity(t_max);
    let mut predictions = Vec::new();
    let mut real_classes_read = Vec::with_capacity(t_max);
    let mut replay = GeneratedSet::empty(data.feature_dim(), data.attr_dim());

    for t in 1..=t_max {
        let classes = split.task(t)?;
        let stream = |k: u64| root.fork(1000 * t as u64 + k);
        model.add_task(classes, &mut stream(1))?;
        let train = data.labeled(&data.indices(Partition::Train, classes));
        real_classes_read.push(train.classes());
        let task_attrs = data.class_attributes(classes);
        let logs = train_task(&mut model, t, &train, &replay, &task_attrs, config, &mut stream(2))?;
        epochs.extend(logs);
        model.finish_task()?;

        let classifier = train_classifier(&model, &data.attributes, t, config, &mut stream(3))?;
        let (seen, unseen, overall) = evaluate_step(
            &classifier,
            &data,
            split,
            t,
            config.averaging,
            &mut matrix,
            &mut predictions,
        )?;
        let disc = if config.adversarial {
            Some(discriminator_probe(&model, &data, split, t, &mut stream(4))?)
        } else {
            None
        };
        let harmonic = unseen.map(|u| harmonic(seen[t - 1], u));
        log::info!(
            "task {t}/{t_max}: seen {:.4} unseen {} overall {:.4}",
            seen[t - 1],
            unseen.map_or("-".to_string(), |u| format!("{u:.4}")),
            overall
        );
        evaluations.push(TaskEvaluation {
            task: t,
            seen,
            unseen,
            overall,
            harmonic,
            discriminator_accuracy: disc,
            replay_rows: replay.len(),
        });
        if config.replay && t < t_max {
            replay = build_replay(
                &model,
                split,
                &data.attributes,
                t,
                config.replay_n_per_class,
                &mut stream(5),
            )?;
        }
    }
    let report = MetricsReport::from_matrix(&matrix)?;
    Ok(StreamOutcome {
        matrix,
        report,
        epochs,
        evaluations,
        predictions,
        real_classes_read,
        standardizer,
        model,
    })
}
