//! Continual zero-shot learning with adversarially trained conditional
//! variational autoencoders and generative replay.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`graph`]), dense layers and Adam ([`nn`]), the conditional VAE
//! ([`cvae`]), the growing multi-module network ([`model`]), the task loop
//! ([`trainer`]), datasets and splits ([`data`]) and metrics ([`eval`]).

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod cvae;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use cvae::{Cvae, CvaeConfig, VaeLoss};
pub use data::{make_split, synth_dataset, CzslSplit, Dataset, LabeledSet, Partition, Standardizer, SynthSpec};
pub use error::{Error, Result};
pub use eval::{AccuracyMatrix, Averaging, MetricsReport, PredictionRecord, Regime};
pub use graph::{Graph, Var};
pub use model::{AczslModel, Batch, FakeMode, Lambdas, LossBreakdown, LossTerms, ModelConfig};
pub use nn::{Activation, Adam, AdamConfig, LinearLayer, Mlp};
pub use params::{ParamId, ParamStore};
pub use rng::RngStream;
pub use tensor::Tensor;
pub use trainer::{
    run_stream, Architecture, Classifier, EpochLog, EpochSchedule, GeneratedSet, Provenance, ReplayTaskLabel,
    StreamOutcome, TaskEvaluation, TrainConfig,
};
