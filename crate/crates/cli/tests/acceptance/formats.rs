use std::fs;
use std::process::Command;

use aczsl::{checkpoint, synth_dataset, Dataset, RngStream, SynthSpec};

use crate::common::{bin, fixture, golden_text, schema_of};
use crate::learning::DeskRuns;
use crate::Outcome;

type Check = Result<(), String>;
type CheckFn<'a> = Box<dyn Fn() -> Check + 'a>;

fn stdout_of(cmd: &mut Command) -> Result<String, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    String::from_utf8(out.stdout).map_err(|e| e.to_string())
}

fn matches_golden(name: &str, actual: &str) -> Check {
    if actual == golden_text(name) {
        Ok(())
    } else {
        Err(format!("{name} differs from its golden file"))
    }
}

fn dataset_round_trip() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in 0..20 {
        let spec = SynthSpec {
            classes: 2 + (seed as usize % 5),
            feature_dim: 7,
            attr_dim: 3,
            per_class: 4,
            noise_sigma: 0.3,
            seed,
        };
        let mut ds = synth_dataset(&spec).map_err(|e| e.to_string())?;
        if seed % 2 == 0 {
            ds.class_names = Some((0..spec.classes).map(|c| format!("class \"{c}\", odd")).collect());
        }
        let path = dir.path().join(format!("ds{seed}"));
        ds.save(&path).map_err(|e| e.to_string())?;
        let back = Dataset::load(&path).map_err(|e| e.to_string())?;
        let same_bits = back
            .features
            .values()
            .iter()
            .zip(ds.features.values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if back != ds || !same_bits {
            return Err(format!("dataset seed {seed} changed on round trip"));
        }
    }
    Ok(())
}

fn checkpoint_round_trip(desk: &DeskRuns) -> Check {
    let path = desk.adversarial_dir()?.join("checkpoint.aczsl");
    let bytes = fs::read(&path).map_err(|e| e.to_string())?;
    let (model, extra) = checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let again = checkpoint::to_bytes(&model, extra).map_err(|e| e.to_string())?;
    if again != bytes {
        return Err("re-serialized checkpoint differs".into());
    }
    let (back, _) = checkpoint::from_bytes(&again).map_err(|e| e.to_string())?;
    for ((_, na, a), (_, nb, b)) in model.store.iter().zip(back.store.iter()) {
        if na != nb
            || a.values()
                .iter()
                .zip(b.values())
                .any(|(x, y)| x.to_bits() != y.to_bits())
        {
            return Err(format!("parameter {na} changed"));
        }
    }
    let x = RngStream::new(0).normal_tensor(&[16, model.config.feature_dim]);
    let tasks = model.num_tasks();
    if model.discriminate(&x, tasks).map_err(|e| e.to_string())?
        != back.discriminate(&x, tasks).map_err(|e| e.to_string())?
    {
        return Err("restored model predicts differently".into());
    }
    Ok(())
}

fn cli_outputs_match_goldens(desk: &DeskRuns) -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = dir.path().join("ds");
    stdout_of(
        bin()
            .args([
                "synth",
                "--classes",
                "3",
                "--dim",
                "4",
                "--attr",
                "2",
                "--per-class",
                "4",
                "--seed",
                "1",
                "--out",
            ])
            .arg(&ds),
    )?;
    for (file, name) in [
        ("meta.json", "synth_meta.json"),
        ("features.csv", "synth_features.csv"),
        ("attributes.csv", "synth_attributes.csv"),
    ] {
        matches_golden(name, &fs::read_to_string(ds.join(file)).map_err(|e| e.to_string())?)?;
    }

    let matrix = dir.path().join("matrix.csv");
    let metrics = stdout_of(
        bin()
            .arg("evaluate")
            .arg("--predictions")
            .arg(fixture("eval/predictions.csv"))
            .arg("--split")
            .arg(fixture("eval/split.json"))
            .arg("--matrix")
            .arg(&matrix),
    )?;
    matches_golden("evaluate_metrics.json", &metrics)?;
    matches_golden(
        "evaluate_matrix.csv",
        &fs::read_to_string(&matrix).map_err(|e| e.to_string())?,
    )?;

    let csv = dir.path().join("report.csv");
    let table = stdout_of(
        bin()
            .current_dir(fixture("report"))
            .args(["report", "full", "single", "--csv"])
            .arg(&csv),
    )?;
    matches_golden("report_table.txt", &table)?;
    matches_golden("report.csv", &fs::read_to_string(&csv).map_err(|e| e.to_string())?)?;

    matches_golden("train_schema.txt", &schema_of(desk.adversarial_dir()?))
}

pub fn suite(desk: &DeskRuns) -> Outcome {
    let checks: [(&str, CheckFn); 3] = [
        ("dataset round trip", Box::new(dataset_round_trip)),
        ("checkpoint round trip", Box::new(|| checkpoint_round_trip(desk))),
        ("CLI goldens", Box::new(|| cli_outputs_match_goldens(desk))),
    ];
    let failures: Vec<String> = checks
        .iter()
        .filter_map(|(name, f)| f().err().map(|e| format!("{name}: {e}")))
        .collect();
    if failures.is_empty() {
        Ok("20 datasets and a trained checkpoint round-trip bit-exactly; synth, evaluate, report and run-directory outputs match goldens".into())
    } else {
        Err(failures.join("; "))
    }
}
