//! Replicate execution and run-directory layout.
//!
//! Each replicate writes into `<root>/seed-<seed>/`:
//!
//! | file | content |
//! |------|---------|
//! | `config.toml` | the resolved configuration for this seed alone |
//! | `run.json` | code version, seed and configuration |
//! | `checkpoint.aczsl` | final model |
//! | `losses.csv` | `task,epoch,l_adv,l_task,l_vae_s,l_vae_p,total` |
//! | `evaluations.json` | one record per task |
//! | `predictions.csv` | `t,sample_id,true,pred,regime` |
//! | `split.json` | class ids per task |
//! | `accuracy_matrix.csv` | `j,i,regime,accuracy` |
//! | `metrics.json` | `mSA`, `mUA`, `mH`, `mOA`, `BWT` |
//! | `per_task_curves.csv` | `step,seen,unseen,overall,harmonic,discriminator` |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use aczsl::eval::write_predictions;
use aczsl::{checkpoint, run_stream, EpochLog, StreamOutcome, TaskEvaluation};

use crate::config::ExperimentConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const LOSSES_HEADER: &str = "task,epoch,l_adv,l_task,l_vae_s,l_vae_p,total";
pub const CURVES_HEADER: &str = "step,seen,unseen,overall,harmonic,discriminator";

#[derive(Serialize)]
struct RunInfo<'a> {
    version: &'a str,
    seed: u64,
    config: &'a ExperimentConfig,
}

pub fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

/// Configuration of a single replicate: one seed, written to `root`.
pub fn replicate_config(config: &ExperimentConfig, seed: u64, root: &Path) -> ExperimentConfig {
    let mut c = config.clone();
    c.seeds = vec![seed];
    c.train.seed = seed;
    c.output = Some(root.to_path_buf());
    c
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn losses_csv(epochs: &[EpochLog]) -> String {
    let mut s = format!("{LOSSES_HEADER}\n");
    for e in epochs {
        let l = &e.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            e.task, e.epoch, l.l_adv, l.l_task, l.l_vae_shared, l.l_vae_private, l.total
        );
    }
    s
}

pub fn curves_csv(evaluations: &[TaskEvaluation]) -> String {
    let mut s = format!("{CURVES_HEADER}\n");
    for e in evaluations {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.task,
            e.seen[e.task - 1],
            opt(e.unseen),
            e.overall,
            opt(e.harmonic),
            opt(e.discriminator_accuracy)
        );
    }
    s
}

/// Writes every artifact of a finished stream into `dir`.
pub fn write_outputs(
    dir: &Path,
    config: &ExperimentConfig,
    split: &aczsl::CzslSplit,
    out: &StreamOutcome,
) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let seed = config.train.seed;
    let info = RunInfo {
        version: VERSION,
        seed,
        config,
    };
    write(&dir.join("config.toml"), config.to_toml()?)?;
    let info_json = serde_json::to_value(&info)?;
    write(&dir.join("run.json"), serde_json::to_string_pretty(&info_json)? + "\n")?;
    checkpoint::save(&out.model, info_json, dir.join("checkpoint.aczsl"))?;
    write(&dir.join("losses.csv"), losses_csv(&out.epochs))?;
    write(
        &dir.join("evaluations.json"),
        serde_json::to_string_pretty(&out.evaluations)? + "\n",
    )?;
    let mut preds = Vec::new();
    write_predictions(&mut preds, &out.predictions)?;
    write(&dir.join("predictions.csv"), preds)?;
    write(&dir.join("split.json"), serde_json::to_string_pretty(split)? + "\n")?;
    let mut matrix = Vec::new();
    out.matrix.write_csv(&mut matrix)?;
    write(&dir.join("accuracy_matrix.csv"), matrix)?;
    write(&dir.join("metrics.json"), out.report.to_json()?)?;
    write(&dir.join("per_task_curves.csv"), curves_csv(&out.evaluations))?;
    Ok(())
}

/// Runs one seed end to end and returns its directory.
pub fn run_replicate(config: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let root = config.output_root();
    let cfg = replicate_config(config, seed, &root);
    let dataset = cfg.load_dataset()?;
    let split = cfg.make_split(&dataset)?;
    let outcome = run_stream(&dataset, &split, &cfg.train).with_context(|| format!("seed {seed}"))?;
    let dir = seed_dir(&root, seed);
    write_outputs(&dir, &cfg, &split, &outcome)?;
    log::info!("seed {seed}: wrote {}", dir.display());
    Ok(dir)
}

/// Outcome of one replicate.
#[derive(Debug)]
pub struct ReplicateResult {
    pub seed: u64,
    pub result: Result<PathBuf>,
}

/// Validates, then runs every seed on a pool of `jobs` workers (default:
/// replicate count capped at available parallelism).
pub fn run_experiment(config: &ExperimentConfig, jobs: Option<usize>) -> Result<Vec<ReplicateResult>> {
    config.validate()?;
    // Fail on unreadable data before spawning anything.
    let dataset = config.load_dataset()?;
    config.make_split(&dataset)?;
    let cap = std::thread::available_parallelism().map_or(1, |n| n.get());
    let jobs = jobs.unwrap_or_else(|| config.seeds.len().min(cap)).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("building worker pool")?;
    Ok(pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| ReplicateResult {
                seed,
                result: run_replicate(config, seed),
            })
            .collect()
    }))
}
