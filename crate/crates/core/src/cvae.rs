//! Attribute-conditioned VAE with a diagonal-Gaussian latent.
//!
//! The attribute vector is concatenated to the encoder input and to the
//! decoder input. The encoder emits `[mu | logvar]`; the decoder output is
//! unbounded (identity activation) because the inputs are real-valued
//! feature vectors.

use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{kl_diag_gaussian, reconstruction_loss, Activation, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvaeConfig {
    pub feature_dim: usize,
    pub attr_dim: usize,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
}

fn default_latent() -> usize {
    50
}

fn default_hidden() -> Vec<usize> {
    vec![500]
}

impl CvaeConfig {
    pub fn new(feature_dim: usize, attr_dim: usize) -> Self {
        Self {
            feature_dim,
            attr_dim,
            latent_dim: default_latent(),
            hidden: default_hidden(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cvae {
    pub config: CvaeConfig,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

/// Graph handles for one VAE evaluation. `total = recon + kl`.
#[derive(Debug, Clone, Copy)]
pub struct VaeLoss {
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
    pub x_hat: Var,
}

impl Cvae {
    pub fn new(store: &mut ParamStore, name: &str, config: CvaeConfig, rng: &mut RngStream) -> Self {
        let CvaeConfig {
            feature_dim,
            attr_dim,
            latent_dim,
            ref hidden,
        } = config;
        let mut enc_dims = vec![feature_dim + attr_dim];
        enc_dims.extend_from_slice(hidden);
        enc_dims.push(2 * latent_dim);
        let mut dec_dims = vec![latent_dim + attr_dim];
        dec_dims.extend_from_slice(hidden);
        dec_dims.push(feature_dim);
        let encoder = Mlp::new(
            store,
            &format!("{name}.encoder"),
            &enc_dims,
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        let decoder = Mlp::new(
            store,
            &format!("{name}.decoder"),
            &dec_dims,
            Activation::Relu,
            Activation::Identity,
            rng,
        );
        Self {
            config,
            encoder,
            decoder,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn check_conditioning(&self, g: &Graph, x: Var, a: Var, op: &'static str) -> Result<()> {
        let (tx, ta) = (g.value(x), g.value(a));
        if ta.shape().len() != 2 || ta.shape()[1] != self.config.attr_dim || ta.rows() != tx.rows() {
            return Err(Error::shape(op, tx.shape(), ta.shape()));
        }
        Ok(())
    }

    /// `q(z | x, a)` parameters, each `batch × latent_dim`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, x: Var, a: Var) -> Result<(Var, Var)> {
        self.check_conditioning(g, x, a, "encode")?;
        let xa = g.concat(x, a, 1)?;
        let h = self.encoder.forward(g, store, xa)?;
        let l = self.config.latent_dim;
        let mu = g.narrow(h, 1, 0, l)?;
        let logvar = g.narrow(h, 1, l, l)?;
        Ok((mu, logvar))
    }

    /// `z = mu + exp(logvar / 2) * eps`.
    pub fn reparameterize(g: &mut Graph, mu: Var, logvar: Var, eps: Tensor) -> Result<Var> {
        if eps.shape() != g.value(mu).shape() {
            return Err(Error::shape("reparameterize", g.value(mu).shape(), eps.shape()));
        }
        let half = g.scale(logvar, 0.5);
        let std = g.exp(half);
        let e = g.constant(eps);
        let noise = g.mul(std, e)?;
        g.add(mu, noise)
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var, a: Var) -> Result<Var> {
        if g.value(z).shape().get(1) != Some(&self.config.latent_dim) {
            return Err(Error::shape("decode", g.value(z).shape(), &[self.config.latent_dim]));
        }
        self.check_conditioning(g, z, a, "decode")?;
        let za = g.concat(z, a, 1)?;
        self.decoder.forward(g, store, za)
    }

    /// Reconstruction (MSE) plus KL to the standard normal prior, KL weight 1.
    pub fn vae_loss(&self, g: &mut Graph, store: &ParamStore, x: Var, a: Var, rng: &mut RngStream) -> Result<VaeLoss> {
        let (mu, logvar) = self.encode(g, store, x, a)?;
        let eps = rng.normal_tensor(g.value(mu).shape());
        let z = Self::reparameterize(g, mu, logvar, eps)?;
        let x_hat = self.decode(g, store, z, a)?;
        let recon = reconstruction_loss(g, x, x_hat)?;
        let kl = kl_diag_gaussian(g, mu, logvar)?;
        let total = g.add(recon, kl)?;
        Ok(VaeLoss {
            recon,
            kl,
            total,
            mu,
            logvar,
            z,
            x_hat,
        })
    }

    /// Decodes `z' ~ N(0, I)` for a batch of attribute rows (no gradient).
    pub fn decode_prior(&self, store: &ParamStore, attrs: &Tensor, rng: &mut RngStream) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(rng.normal_tensor(&[attrs.rows(), self.config.latent_dim]));
        let a = g.constant(attrs.clone());
        let out = self.decode(&mut g, store, z, a)?;
        Ok(g.value(out).clone())
    }

    /// `n_per_row` prior samples for every `(class, attribute row)` pair, in
    /// row order.
    pub fn generate(
        &self,
        store: &ParamStore,
        class_ids: &[usize],
        attrs: &Tensor,
        n_per_row: usize,
        rng: &mut RngStream,
    ) -> Result<LabeledSet> {
        if n_per_row == 0 {
            return Err(Error::Contract("generate needs n_per_row >= 1".into()));
        }
        if attrs.rows() != class_ids.len() {
            return Err(Error::shape("generate", &[class_ids.len()], attrs.shape()));
        }
        let rows: Vec<usize> = (0..class_ids.len())
            .flat_map(|r| std::iter::repeat_n(r, n_per_row))
            .collect();
        let tiled = attrs.select_rows(&rows);
        let features = self.decode_prior(store, &tiled, rng)?;
        let labels = rows.iter().map(|&r| class_ids[r]).collect();
        LabeledSet::new(features, tiled, labels)
    }
}
