//! The composite continual zero-shot network.
//!
//! One shared CVAE learns across every task; a private CVAE and a
//! classification head are added per task and frozen once that task ends.
//! A discriminator over feature space predicts which task produced a shared
//! reconstruction (label `t`) or whether it was decoded from prior noise
//! (label `0`). The shared module is trained against it through a gradient
//! reversal node.

use serde::{Deserialize, Serialize};

use crate::cvae::{Cvae, CvaeConfig};
use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{softmax_cross_entropy, Activation, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Weights of the four objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lambdas {
    pub adv: f64,
    pub task: f64,
    pub vae_shared: f64,
    pub vae_private: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            adv: 1.0,
            task: 1.0,
            vae_shared: 1.0,
            vae_private: 0.5,
        }
    }
}

impl Lambdas {
    pub fn scaled(self, c: f64) -> Self {
        Self {
            adv: self.adv * c,
            task: self.task * c,
            vae_shared: self.vae_shared * c,
            vae_private: self.vae_private * c,
        }
    }
}

/// What the discriminator sees on its label-0 branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeMode {
    /// Prior noise decoded through the shared decoder, conditioned on a
    /// uniformly drawn class of the current task.
    #[default]
    DecodedPrior,
    /// Standard-normal vectors of feature width, fed directly.
    RawNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub attr_dim: usize,
    #[serde(default = "d_latent")]
    pub latent_dim: usize,
    /// Hidden widths of every CVAE encoder and decoder.
    #[serde(default = "d_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "d_hidden")]
    pub head_hidden: Vec<usize>,
    #[serde(default = "d_hidden")]
    pub discriminator_hidden: Vec<usize>,
    /// The discriminator has `max_tasks + 1` outputs.
    pub max_tasks: usize,
    #[serde(default)]
    pub lambdas: Lambdas,
    #[serde(default = "d_grl")]
    pub grl_strength: f64,
    #[serde(default)]
    pub fake_mode: FakeMode,
}

fn d_latent() -> usize {
    50
}
fn d_hidden() -> Vec<usize> {
    vec![500]
}
fn d_grl() -> f64 {
    1.0
}

impl ModelConfig {
    pub fn new(feature_dim: usize, attr_dim: usize, max_tasks: usize) -> Self {
        Self {
            feature_dim,
            attr_dim,
            latent_dim: d_latent(),
            hidden: d_hidden(),
            head_hidden: d_hidden(),
            discriminator_hidden: d_hidden(),
            max_tasks,
            lambdas: Lambdas::default(),
            grl_strength: d_grl(),
            fake_mode: FakeMode::default(),
        }
    }

    pub fn cvae(&self) -> CvaeConfig {
        CvaeConfig {
            feature_dim: self.feature_dim,
            attr_dim: self.attr_dim,
            latent_dim: self.latent_dim,
            hidden: self.hidden.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.feature_dim, self.attr_dim, self.latent_dim, self.max_tasks];
        let widths = self
            .hidden
            .iter()
            .chain(&self.head_hidden)
            .chain(&self.discriminator_hidden);
        if dims.contains(&0) || widths.clone().any(|&w| w == 0) {
            return Err(Error::Contract("model dimensions must be positive".into()));
        }
        if !(self.grl_strength >= 0.0) {
            return Err(Error::Contract("grl_strength must be >= 0".into()));
        }
        let l = self.lambdas;
        if [l.adv, l.task, l.vae_shared, l.vae_private]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::Contract("lambdas must be >= 0".into()));
        }
        Ok(())
    }
}

/// A training minibatch: labeled samples plus the task label each row
/// carries on the discriminator's real branch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub set: LabeledSet,
    pub task_ids: Vec<usize>,
}

impl Batch {
    pub fn new(set: LabeledSet, task_ids: Vec<usize>) -> Result<Self> {
        if task_ids.len() != set.len() {
            return Err(Error::shape("batch", &[set.len()], &[task_ids.len()]));
        }
        Ok(Self { set, task_ids })
    }

    /// Every row tagged with task `t`.
    pub fn for_task(set: LabeledSet, t: usize) -> Self {
        let task_ids = vec![t; set.len()];
        Self { set, task_ids }
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

/// Graph handles of the four objective terms and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub adv: Var,
    pub task: Var,
    pub vae_shared: Var,
    pub vae_private: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_adv: g.value(self.adv).item(),
            l_task: g.value(self.task).item(),
            l_vae_shared: g.value(self.vae_shared).item(),
            l_vae_private: g.value(self.vae_private).item(),
            total: g.value(self.total).item(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_adv: f64,
    pub l_task: f64,
    pub l_vae_shared: f64,
    pub l_vae_private: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.l_adv,
            self.l_task,
            self.l_vae_shared,
            self.l_vae_private,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Recombines the components with `lambdas`.
    pub fn weighted(&self, lambdas: &Lambdas) -> f64 {
        lambdas.adv * self.l_adv
            + lambdas.task * self.l_task
            + lambdas.vae_shared * self.l_vae_shared
            + lambdas.vae_private * self.l_vae_private
    }
}

#[derive(Debug, Clone)]
pub struct AczslModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub shared: Cvae,
    pub privates: Vec<Cvae>,
    pub heads: Vec<Mlp>,
    pub discriminator: Mlp,
    task_classes: Vec<Vec<usize>>,
    active: bool,
}

impl AczslModel {
    pub fn new(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let shared = Cvae::new(&mut store, "shared", config.cvae(), rng);
        let mut d_dims = vec![config.feature_dim];
        d_dims.extend_from_slice(&config.discriminator_hidden);
        d_dims.push(config.max_tasks + 1);
        let discriminator = Mlp::new(
            &mut store,
            "discriminator",
            &d_dims,
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        Ok(Self {
            config,
            store,
            shared,
            privates: Vec::new(),
            heads: Vec::new(),
            discriminator,
            task_classes: Vec::new(),
            active: false,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.privates.len()
    }

    pub fn is_task_active(&self) -> bool {
        self.active
    }

    pub fn task_classes(&self) -> &[Vec<usize>] {
        &self.task_classes
    }

    /// Dataset class ids in head-output order.
    pub fn class_order(&self) -> Vec<usize> {
        self.task_classes.concat()
    }

    /// Head-output index of dataset class `class`.
    pub fn head_index(&self, class: usize) -> Option<usize> {
        self.task_classes.iter().flatten().position(|&c| c == class)
    }

    /// Starts a new task: freezes every earlier private module and head and
    /// appends fresh ones. Returns the 1-based task index.
    pub fn add_task(&mut self, class_ids: &[usize], rng: &mut RngStream) -> Result<usize> {
        if self.active {
            return Err(Error::Contract(format!(
                "add_task called while task {} is still being trained",
                self.num_tasks()
            )));
        }
        if self.num_tasks() >= self.config.max_tasks {
            return Err(Error::Contract(format!(
                "discriminator sized for {} tasks",
                self.config.max_tasks
            )));
        }
        if class_ids.is_empty() {
            return Err(Error::Contract("a task needs at least one class".into()));
        }
        if let Some(&c) = class_ids.iter().find(|&&c| self.head_index(c).is_some()) {
            return Err(Error::Contract(format!("class {c} already belongs to an earlier task")));
        }
        for id in self.old_task_params() {
            self.store.freeze(id);
        }
        let t = self.num_tasks() + 1;
        let private = Cvae::new(&mut self.store, &format!("private.{t}"), self.config.cvae(), rng);
        let classes_so_far = self.task_classes.iter().map(Vec::len).sum::<usize>() + class_ids.len();
        let mut dims = vec![2 * self.config.latent_dim];
        dims.extend_from_slice(&self.config.head_hidden);
        dims.push(classes_so_far);
        let head = Mlp::new(
            &mut self.store,
            &format!("head.{t}"),
            &dims,
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        self.privates.push(private);
        self.heads.push(head);
        self.task_classes.push(class_ids.to_vec());
        self.active = true;
        Ok(t)
    }

    /// Ends the current task and freezes its private module and head.
    pub fn finish_task(&mut self) -> Result<()> {
        if !self.active {
            return Err(Error::Contract("finish_task without an active task".into()));
        }
        self.active = false;
        for id in self.task_params(self.num_tasks()) {
            self.store.freeze(id);
        }
        Ok(())
    }

    fn old_task_params(&self) -> Vec<ParamId> {
        (1..=self.num_tasks()).flat_map(|t| self.task_params(t)).collect()
    }

    /// Private module and head parameters of task `t`.
    pub fn task_params(&self, t: usize) -> Vec<ParamId> {
        let mut p = self.privates[t - 1].params();
        p.extend(self.heads[t - 1].params());
        p
    }

    /// Parameters updated by the shared/private step of task `t`.
    pub fn s_step_params(&self, t: usize) -> Vec<ParamId> {
        let mut p = self.shared.params();
        p.extend(self.task_params(t));
        p
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.discriminator.params()
    }

    fn check_task(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_tasks() {
            return Err(Error::Index {
                what: "trained tasks (1-based)",
                index: t,
                bound: self.num_tasks(),
            });
        }
        if t > self.config.max_tasks {
            return Err(Error::Contract(format!("discriminator has no output for task {t}")));
        }
        Ok(())
    }

    fn head_targets(&self, labels: &[usize], t: usize) -> Result<Vec<usize>> {
        let width = self.heads[t - 1].out_dim();
        labels
            .iter()
            .map(|&c| match self.head_index(c) {
                Some(i) if i < width => Ok(i),
                _ => Err(Error::Contract(format!("label {c} is outside head {t}'s classes"))),
            })
            .collect()
    }

    fn inputs(g: &mut Graph, batch: &Batch) -> (Var, Var) {
        let x = g.constant(batch.set.features.clone());
        let a = g.constant(batch.set.attributes.clone());
        (x, a)
    }

    /// Cross-entropy of head `t` over the concatenated shared and private
    /// latent codes.
    pub fn task_loss_from_latents(
        &self,
        g: &mut Graph,
        z_shared: Var,
        z_private: Var,
        labels: &[usize],
        t: usize,
    ) -> Result<Var> {
        self.check_task(t)?;
        let targets = self.head_targets(labels, t)?;
        let z = g.concat(z_shared, z_private, 1)?;
        let logits = self.heads[t - 1].forward(g, &self.store, z)?;
        softmax_cross_entropy(g, logits, &targets)
    }

    pub fn task_loss(&self, g: &mut Graph, batch: &Batch, t: usize, rng: &mut RngStream) -> Result<Var> {
        self.check_task(t)?;
        let (x, a) = Self::inputs(g, batch);
        let (mu_s, lv_s) = self.shared.encode(g, &self.store, x, a)?;
        let eps = rng.normal_tensor(g.value(mu_s).shape());
        let z_s = Cvae::reparameterize(g, mu_s, lv_s, eps)?;
        let (mu_p, lv_p) = self.privates[t - 1].encode(g, &self.store, x, a)?;
        let eps = rng.normal_tensor(g.value(mu_p).shape());
        let z_p = Cvae::reparameterize(g, mu_p, lv_p, eps)?;
        self.task_loss_from_latents(g, z_s, z_p, &batch.set.labels, t)
    }

    /// Real branch as seen by the shared module: reconstructions pass through
    /// gradient reversal into the discriminator, targets are task labels.
    pub fn adversarial_shared_loss(&self, g: &mut Graph, x_hat_shared: Var, task_ids: &[usize]) -> Result<Var> {
        let reversed = g.grad_reverse(x_hat_shared, self.config.grl_strength);
        let logits = self.discriminator.forward(g, &self.store, reversed)?;
        softmax_cross_entropy(g, logits, task_ids)
    }

    /// Prior samples decoded by the shared decoder, one per row of
    /// `class_attrs` drawn uniformly.
    pub fn fake_features_decoded(&self, rows: usize, class_attrs: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
        match self.config.fake_mode {
            FakeMode::RawNoise => Ok(rng.normal_tensor(&[rows, self.config.feature_dim])),
            FakeMode::DecodedPrior => {
                let pick: Vec<usize> = (0..rows).map(|_| rng.below(class_attrs.rows())).collect();
                let attrs = class_attrs.select_rows(&pick);
                self.shared.decode_prior(&self.store, &attrs, rng)
            }
        }
    }

    /// Discriminator objective: cross-entropy toward the task label on
    /// detached shared reconstructions and toward label 0 on fakes.
    /// `current_attrs` holds one attribute row per class of task `t`.
    pub fn discriminator_loss(
        &self,
        g: &mut Graph,
        batch: &Batch,
        t: usize,
        current_attrs: &Tensor,
        rng: &mut RngStream,
    ) -> Result<Var> {
        self.check_task(t)?;
        let recon = self.shared_reconstruction(batch, rng)?;
        let fake = self.fake_features_decoded(batch.len(), current_attrs, rng)?;
        self.discriminator_loss_on(g, &recon, &batch.task_ids, &fake)
    }

    fn discriminator_loss_on(&self, g: &mut Graph, real: &Tensor, task_ids: &[usize], fake: &Tensor) -> Result<Var> {
        let inputs = g.constant(Tensor::vstack(&[real, fake])?);
        let mut targets = task_ids.to_vec();
        targets.extend(std::iter::repeat_n(0, fake.rows()));
        let logits = self.discriminator.forward(g, &self.store, inputs)?;
        softmax_cross_entropy(g, logits, &targets)
    }

    /// `decode(reparameterize(encode(x, a)), a)` through the shared module,
    /// without gradient.
    pub fn shared_reconstruction(&self, batch: &Batch, rng: &mut RngStream) -> Result<Tensor> {
        let mut g = Graph::with_trainable([]);
        let (x, a) = Self::inputs(&mut g, batch);
        let (mu, lv) = self.shared.encode(&mut g, &self.store, x, a)?;
        let eps = rng.normal_tensor(g.value(mu).shape());
        let z = Cvae::reparameterize(&mut g, mu, lv, eps)?;
        let out = self.shared.decode(&mut g, &self.store, z, a)?;
        Ok(g.value(out).clone())
    }

    /// Both sides of the minimax game on one graph:
    /// `(loss reaching the shared module, discriminator loss)`.
    pub fn adversarial_loss(
        &self,
        g: &mut Graph,
        batch: &Batch,
        t: usize,
        current_attrs: &Tensor,
        rng: &mut RngStream,
    ) -> Result<(Var, Var)> {
        self.check_task(t)?;
        let (x, a) = Self::inputs(g, batch);
        let vae = self.shared.vae_loss(g, &self.store, x, a, rng)?;
        let shared_side = self.adversarial_shared_loss(g, vae.x_hat, &batch.task_ids)?;
        let real = g.value(vae.x_hat).clone();
        let fake = self.fake_features_decoded(batch.len(), current_attrs, rng)?;
        let disc_side = self.discriminator_loss_on(g, &real, &batch.task_ids, &fake)?;
        Ok((shared_side, disc_side))
    }

    /// The weighted four-term objective for task `t`.
    pub fn total_loss(&self, g: &mut Graph, batch: &Batch, t: usize, rng: &mut RngStream) -> Result<LossTerms> {
        self.objective(g, batch, t, rng, true)
    }

    /// Same objective with the adversarial term held at zero and the
    /// discriminator left out of the graph.
    pub fn total_loss_without_adversarial(
        &self,
        g: &mut Graph,
        batch: &Batch,
        t: usize,
        rng: &mut RngStream,
    ) -> Result<LossTerms> {
        self.objective(g, batch, t, rng, false)
    }

    fn objective(
        &self,
        g: &mut Graph,
        batch: &Batch,
        t: usize,
        rng: &mut RngStream,
        adversarial: bool,
    ) -> Result<LossTerms> {
        self.check_task(t)?;
        let (x, a) = Self::inputs(g, batch);
        let shared = self.shared.vae_loss(g, &self.store, x, a, rng)?;
        let private = self.privates[t - 1].vae_loss(g, &self.store, x, a, rng)?;
        let task = self.task_loss_from_latents(g, shared.z, private.z, &batch.set.labels, t)?;
        let adv = if adversarial {
            self.adversarial_shared_loss(g, shared.x_hat, &batch.task_ids)?
        } else {
            g.constant(Tensor::scalar(0.0))
        };
        let l = self.config.lambdas;
        let parts = [
            g.scale(adv, l.adv),
            g.scale(task, l.task),
            g.scale(shared.total, l.vae_shared),
            g.scale(private.total, l.vae_private),
        ];
        let mut total = parts[0];
        for p in &parts[1..] {
            total = g.add(total, *p)?;
        }
        Ok(LossTerms {
            adv,
            task,
            vae_shared: shared.total,
            vae_private: private.total,
            total,
        })
    }

    /// Discriminator predictions (argmax over labels `0..=max_label`) for a
    /// batch of feature vectors.
    pub fn discriminate(&self, features: &Tensor, max_label: usize) -> Result<Vec<usize>> {
        let mut g = Graph::with_trainable([]);
        let x = g.constant(features.clone());
        let logits = self.discriminator.forward(&mut g, &self.store, x)?;
        let width = (max_label + 1).min(self.config.max_tasks + 1);
        let restricted = g.narrow(logits, 1, 0, width)?;
        Ok(g.value(restricted).argmax_rows())
    }
}
