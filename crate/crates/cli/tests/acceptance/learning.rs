use std::cell::OnceCell;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use aczsl::{run_stream, StreamOutcome};
use aczsl_cli::config::DatasetSource;
use aczsl_cli::ExperimentConfig;
use serde_json::Value;
use tempfile::TempDir;

use crate::common::{bin, manifest_dir};
use crate::{check, Outcome};

const SEEDS: std::ops::Range<u64> = 0..5;

/// Desk-scale runs shared between criteria; each is computed at most once.
pub struct DeskRuns {
    pub config_path: PathBuf,
    config: ExperimentConfig,
    scratch: TempDir,
    first: OnceCell<(StreamOutcome, Duration)>,
    adversarial: OnceCell<Result<PathBuf, String>>,
}

fn timed(config: &ExperimentConfig, seed: u64, replay: bool) -> Result<(StreamOutcome, Duration), String> {
    let mut cfg = config.clone();
    cfg.train.seed = seed;
    cfg.train.replay = replay;
    if let DatasetSource::Synth(spec) = &mut cfg.dataset {
        spec.seed = seed;
    }
    let data = cfg.load_dataset().map_err(|e| e.to_string())?;
    let split = cfg.make_split(&data).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = run_stream(&data, &split, &cfg.train).map_err(|e| format!("seed {seed}: {e}"))?;
    Ok((out, start.elapsed()))
}

fn cli_train(root: &Path, config: &Path, extra: &[&str]) -> Result<PathBuf, String> {
    let out = bin()
        .arg("train")
        .arg("--config")
        .arg(config)
        .args(["--tasks", "2"])
        .args(extra)
        .arg("--out")
        .arg(root)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("train failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(root.join("seed-0"))
}

impl DeskRuns {
    pub fn new() -> Self {
        let config_path = manifest_dir().join("../../configs/desk.toml");
        let config = ExperimentConfig::load(&config_path).expect("desk config");
        Self {
            config_path,
            config,
            scratch: tempfile::tempdir().expect("scratch dir"),
            first: OnceCell::new(),
            adversarial: OnceCell::new(),
        }
    }

    fn first(&self) -> Result<&(StreamOutcome, Duration), String> {
        if self.first.get().is_none() {
            let _ = self.first.set(timed(&self.config, 0, true)?);
        }
        Ok(self.first.get().unwrap())
    }

    /// Seed directory of the two-task adversarial CLI run.
    pub fn adversarial_dir(&self) -> Result<&Path, String> {
        let r = self
            .adversarial
            .get_or_init(|| cli_train(&self.scratch.path().join("adv"), &self.config_path, &[]));
        r.as_deref().map_err(Clone::clone)
    }

    pub fn first_task(&self) -> Outcome {
        let (out, elapsed) = self.first()?;
        let ev = &out.evaluations[0];
        let seen = ev.seen[0];
        let unseen = ev.unseen.ok_or("no unseen accuracy after task 1")?;
        let classes = match &self.config.dataset {
            DatasetSource::Synth(spec) => spec.classes,
            DatasetSource::Path(_) => return Err("desk config must use a synthetic dataset".into()),
        };
        let unseen_classes = classes - self.config.split.classes_per_task;
        let floor = 2.0 / classes as f64;
        let secs = elapsed.as_secs_f64();
        check(
            seen >= 0.90 && unseen >= floor && secs < 600.0,
            format!(
                "after task 1: seen {seen:.3} >= 0.90, unseen {unseen:.3} >= {floor:.3} (chance over {unseen_classes} classes {:.3}); 4-task stream {secs:.1}s < 600s",
                1.0 / unseen_classes as f64
            ),
        )
    }

    pub fn replay_ablation(&self) -> Outcome {
        let mut wins = 0;
        let mut rows = Vec::new();
        for seed in SEEDS {
            let on = if seed == 0 {
                self.first()?.0.report
            } else {
                timed(&self.config, seed, true)?.0.report
            };
            let off = timed(&self.config, seed, false)?.0.report;
            let (mh_on, mh_off) = (on.mh.ok_or("mH undefined")?, off.mh.ok_or("mH undefined")?);
            let (bwt_on, bwt_off) = (on.bwt.ok_or("BWT undefined")?, off.bwt.ok_or("BWT undefined")?);
            let ok = mh_on > mh_off && bwt_on < bwt_off;
            wins += ok as usize;
            rows.push(format!(
                "seed {seed} mH {mh_on:.3}/{mh_off:.3} BWT {bwt_on:.3}/{bwt_off:.3}{}",
                if ok { "" } else { " x" }
            ));
        }
        check(
            wins >= 4,
            format!(
                "{wins}/5 seeds with replay ahead on both mH and BWT (need 4); on/off: {}",
                rows.join(", ")
            ),
        )
    }

    pub fn adversarial_ablation(&self) -> Outcome {
        let adv = self.adversarial_dir()?.to_path_buf();
        let noadv = cli_train(
            &self.scratch.path().join("noadv"),
            &self.config_path,
            &["--no-adversarial"],
        )?;
        for dir in [&adv, &noadv] {
            let losses = fs::read_to_string(dir.join("losses.csv")).map_err(|e| e.to_string())?;
            let bad = losses
                .lines()
                .skip(1)
                .flat_map(|l| l.split(',').skip(2))
                .filter(|v| !v.parse::<f64>().is_ok_and(f64::is_finite))
                .count();
            if bad > 0 {
                return Err(format!("{} non-finite loss values in {}", bad, dir.display()));
            }
        }
        let csv = self.scratch.path().join("ablation.csv");
        let out = bin()
            .current_dir(self.scratch.path())
            .args(["report", "adv", "noadv", "--csv"])
            .arg(&csv)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("report failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
        let table = fs::read_to_string(&csv).map_err(|e| e.to_string())?;
        let rows: Vec<&str> = table.lines().skip(1).collect();
        let populated = rows.iter().filter(|r| r.split(',').all(|f| !f.is_empty())).count();
        let evals: Value =
            serde_json::from_str(&fs::read_to_string(adv.join("evaluations.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        let disc = evals[1]["discriminator_accuracy"]
            .as_f64()
            .ok_or("no discriminator accuracy at task 2")?;
        check(
            rows.len() == 2 && populated == 2 && disc <= 0.65,
            format!("losses finite in both arms; report rows {populated}/2 populated; discriminator accuracy at task 2 {disc:.3} <= 0.65"),
        )
    }

    pub fn determinism(&self) -> Outcome {
        let first = fs::read(self.adversarial_dir()?.join("metrics.json")).map_err(|e| e.to_string())?;
        let again = cli_train(&self.scratch.path().join("again"), &self.config_path, &[])?;
        let second = fs::read(again.join("metrics.json")).map_err(|e| e.to_string())?;
        check(
            first == second,
            format!(
                "two runs with seed 0 wrote {} metrics.json bytes, identical: {}",
                first.len(),
                first == second
            ),
        )
    }
}
