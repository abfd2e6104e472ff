#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aczsl"));
    c.env_remove("ACZSL_OUTPUT_ROOT").env_remove("RUST_LOG");
    c
}

pub fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn aczsl");
    assert!(
        out.status.success(),
        "aczsl failed ({}):\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixture(rel: &str) -> PathBuf {
    manifest_dir().join("tests/fixtures").join(rel)
}

pub fn golden_text(name: &str) -> String {
    let path = manifest_dir().join("tests/golden").join(name);
    fs::read_to_string(&path)
        .unwrap_or_else(|_| panic!("missing golden file {}; rerun with UPDATE_GOLDEN=1", path.display()))
}

/// Compares `actual` with `tests/golden/<name>`; `UPDATE_GOLDEN=1` rewrites it.
pub fn golden(name: &str, actual: &str) {
    let path = manifest_dir().join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    assert_eq!(
        actual,
        golden_text(name),
        "output differs from golden file {}",
        path.display()
    );
}

/// Writes a tiny experiment config and returns its path.
pub fn tiny_experiment(dir: &Path, extra_train: &str) -> PathBuf {
    let text = format!(
        r#"seeds = [3]

[dataset.synth]
classes = 5
feature_dim = 4
attr_dim = 2
per_class = 6
noise_sigma = 0.1
seed = 3

[split]
num_tasks = 2
classes_per_task = 2

[train]
model_epochs = 1
classifier_epochs = 1
batch_size = 8
replay_n_per_class = 3
classifier_n_per_class = 4
{extra_train}
[train.architecture]
latent_dim = 2
hidden = [6]
head_hidden = [4]
discriminator_hidden = [4]
"#
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Key paths of a JSON document; arrays contribute their first element.
fn key_paths(v: &Value, prefix: &str, out: &mut BTreeSet<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                out.insert(p.clone());
                key_paths(child, &p, out);
            }
        }
        Value::Array(items) => {
            if let Some(first) = items.first() {
                key_paths(first, &format!("{prefix}[]"), out);
            }
        }
        _ => {}
    }
}

pub fn schema_of(dir: &Path) -> String {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut out = String::new();
    for name in names {
        let path = dir.join(&name);
        out.push_str(&format!("== {name}\n"));
        if name.ends_with(".csv") {
            let text = fs::read_to_string(&path).unwrap();
            out.push_str(text.lines().next().unwrap_or(""));
            out.push('\n');
        } else if name.ends_with(".json") {
            let v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
            let mut keys = BTreeSet::new();
            key_paths(&v, "", &mut keys);
            for k in keys {
                out.push_str(&k);
                out.push('\n');
            }
        }
    }
    out
}
