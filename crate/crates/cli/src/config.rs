//! Experiment configuration files (TOML).
//!
//! ```toml
//! seeds = [0, 1, 2]
//! output = "runs/cub"
//!
//! [dataset]
//! path = "data/cub"          # or a [dataset.synth] table
//!
//! [split]
//! num_tasks = 20
//! classes_per_task = 10
//!
//! [train]
//! model_epochs = [100, 50]
//! adversarial = true
//!
//! [train.architecture]
//! hidden = [500]
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use aczsl::{make_split, synth_dataset, CzslSplit, Dataset, SynthSpec, TrainConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "ACZSL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Directory holding `features.csv`, `attributes.csv`, `meta.json`.
    Path(PathBuf),
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    /// Shuffle class order with this seed; canonical id order when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub split: SplitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks everything that can be checked without training.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must list at least one seed");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            bail!("seeds must be distinct");
        }
        if self.split.num_tasks == 0 || self.split.classes_per_task == 0 {
            bail!("split.num_tasks and split.classes_per_task must be positive");
        }
        if let DatasetSource::Synth(spec) = &self.dataset {
            validate_synth(spec)?;
        }
        self.train.validate()?;
        Ok(())
    }

    /// Output root: the configured path, else `$ACZSL_OUTPUT_ROOT`, else `runs`.
    pub fn output_root(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(default_output_root)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSource::Path(p) => Dataset::load(p).with_context(|| format!("loading dataset {}", p.display())),
            DatasetSource::Synth(spec) => Ok(synth_dataset(spec)?),
        }
    }

    pub fn make_split(&self, dataset: &Dataset) -> Result<CzslSplit> {
        let s = &self.split;
        Ok(make_split(
            dataset.num_classes(),
            s.num_tasks,
            s.classes_per_task,
            s.order_seed,
        )?)
    }
}

pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn validate_synth(spec: &SynthSpec) -> Result<()> {
    if spec.classes == 0 {
        bail!("synthetic dataset needs at least one class");
    }
    if spec.attr_dim == 0 || spec.feature_dim < spec.attr_dim {
        bail!("synthetic dataset needs 0 < attr_dim <= feature_dim");
    }
    if spec.per_class < 2 {
        bail!("synthetic dataset needs at least 2 samples per class");
    }
    if !(spec.noise_sigma > 0.0) {
        bail!("noise_sigma must be > 0");
    }
    Ok(())
}
