//! Dense layers, loss primitives, and Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// `y = x·Wᵀ + b`, weights stored `out×in`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = rng.uniform_tensor(&[out_dim, in_dim], -bound, bound);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let cols = g.value(x).shape().get(1).copied();
        if cols != Some(self.in_dim) {
            return Err(Error::shape("linear", g.value(x).shape(), &[self.out_dim, self.in_dim]));
        }
        let w = g.param(store, self.weight);
        let xw = g.matmul_bt(x, w)?;
        let b = g.param(store, self.bias);
        g.add_row(xw, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl Mlp {
    /// `dims` lists every width from input to output, e.g. `[in, 500, out]`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut RngStream,
    ) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self {
            layers,
            hidden_activation,
            output_activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            let act = if i == last {
                self.output_activation
            } else {
                self.hidden_activation
            };
            h = act.apply(g, h);
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(LinearLayer::params).collect()
    }

    /// Zeroes the final layer so outputs are constant (zero) at init.
    pub fn zero_output_layer(&self, store: &mut ParamStore) {
        let last = &self.layers[self.layers.len() - 1];
        for id in last.params() {
            store.get_mut(id).values_mut().fill(0.0);
        }
    }
}

/// Mean over the batch of `-log softmax(logits)[target]`.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, targets)
}

/// KL(N(mu, exp(logvar)) ‖ N(0, I)), summed over latent dims and averaged over
/// the batch.
pub fn kl_diag_gaussian(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let batch = g.value(mu).rows() as f64;
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar);
    let a = g.add_scalar(logvar, 1.0);
    let b = g.sub(a, mu2)?;
    let c = g.sub(b, var)?;
    let s = g.sum(c);
    Ok(g.scale(s, -0.5 / batch))
}

/// Mean squared error over every element.
pub fn reconstruction_loss(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    let d = g.sub(x, x_hat)?;
    let d2 = g.mul(d, d)?;
    Ok(g.mean(d2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied as `p -= lr * wd * p` before the moment update.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: i32,
}

/// Adam state keyed by parameter id, so one optimizer can serve a growing
/// parameter set. Bias correction uses each parameter's own step count, so
/// modules added mid-stream start with a proper first step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in `grads`. Fails without
    /// touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at optimizer step {}",
                    store.name(*id),
                    self.step + 1
                )));
            }
            if g.shape() != store.get(*id).shape() {
                return Err(Error::shape("adam", store.get(*id).shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (id, g) in grads {
            let p = store.get_mut(*id);
            let st = self.moments.entry(*id).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t);
            let bc2 = 1.0 - beta2.powi(st.t);
            let pv = p.values_mut();
            if weight_decay > 0.0 {
                for x in pv.iter_mut() {
                    *x -= lr * weight_decay * *x;
                }
            }
            for (((x, &gv), m), v) in pv
                .iter_mut()
                .zip(g.values())
                .zip(st.m.values_mut())
                .zip(st.v.values_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * gv;
                *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
