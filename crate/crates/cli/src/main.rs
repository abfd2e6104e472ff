use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use aczsl::eval::{matrix_from_predictions, read_predictions};
use aczsl::{synth_dataset, Averaging, CzslSplit, EpochSchedule, MetricsReport, SynthSpec, TrainConfig};
use aczsl_cli::config::{validate_synth, DatasetSource, ExperimentConfig, SplitConfig};
use aczsl_cli::{report, run};

#[derive(Parser)]
#[command(name = "aczsl", version, about = "Continual zero-shot learning experiments")]
struct Cli {
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train and evaluate one or more replicates.
    Train(TrainArgs),
    /// Recompute metrics from a prediction log.
    Evaluate(EvaluateArgs),
    /// Tabulate metrics across run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    classes: u64,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    attr: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (replaces the configured dataset).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    classes_per_task: Option<usize>,
    /// Comma-separated replicate seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output root (default: config value, then $ACZSL_OUTPUT_ROOT, then `runs`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    classifier_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_model: Option<f64>,
    #[arg(long)]
    lr_classifier: Option<f64>,
    /// Drop the adversarial term and discriminator updates.
    #[arg(long)]
    no_adversarial: bool,
    /// Train each task on its own data only.
    #[arg(long)]
    no_replay: bool,
    /// Worker threads for replicates.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    sample_weighted: bool,
    /// Write metrics here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the rebuilt accuracy matrix.
    #[arg(long)]
    matrix: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (a seed directory, or a root holding seed directories).
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: a.classes as usize,
        feature_dim: a.dim,
        attr_dim: a.attr,
        per_class: a.per_class,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    validate_synth(&spec)?;
    let ds = synth_dataset(&spec)?;
    ds.save(&a.out)?;
    println!("{} rows, {} classes -> {}", ds.len(), ds.num_classes(), a.out.display());
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => {
            let Some(data) = &a.data else {
                bail!("either --config or --data is required");
            };
            let (Some(num_tasks), Some(classes_per_task)) = (a.tasks, a.classes_per_task) else {
                bail!("--tasks and --classes-per-task are required without --config");
            };
            ExperimentConfig {
                dataset: DatasetSource::Path(data.clone()),
                split: SplitConfig {
                    num_tasks,
                    classes_per_task,
                    order_seed: None,
                },
                train: TrainConfig::default(),
                output: None,
                seeds: vec![0],
            }
        }
    };
    if let Some(d) = &a.data {
        cfg.dataset = DatasetSource::Path(d.clone());
    }
    if let Some(n) = a.tasks {
        cfg.split.num_tasks = n;
    }
    if let Some(n) = a.classes_per_task {
        cfg.split.classes_per_task = n;
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(o) = &a.out {
        cfg.output = Some(o.clone());
    }
    let t = &mut cfg.train;
    if let Some(n) = a.epochs {
        t.model_epochs = EpochSchedule::Uniform(n);
    }
    if let Some(n) = a.classifier_epochs {
        t.classifier_epochs = EpochSchedule::Uniform(n);
    }
    if let Some(n) = a.batch_size {
        t.batch_size = n;
    }
    if let Some(v) = a.lr_model {
        t.lr_model = v;
    }
    if let Some(v) = a.lr_classifier {
        t.lr_classifier = v;
    }
    if a.no_adversarial {
        t.adversarial = false;
    }
    if a.no_replay {
        t.replay = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<bool> {
    let cfg = resolve_train_config(&a)?;
    let root = cfg.output_root();
    let results = run::run_experiment(&cfg, a.jobs)?;
    let mut ok_dirs = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r.result {
            Ok(dir) => ok_dirs.push(dir),
            Err(e) => failures.push((r.seed, e)),
        }
    }
    if !ok_dirs.is_empty() {
        let rows = report::rows_for(&[&root])?;
        print!("{}", report::render_table(&rows));
    }
    for (seed, e) in &failures {
        eprintln!("seed {seed} failed: {e:#}");
    }
    if !failures.is_empty() {
        eprintln!(
            "{} of {} replicates failed",
            failures.len(),
            failures.len() + ok_dirs.len()
        );
    }
    Ok(failures.is_empty())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let split_text = fs::read_to_string(&a.split).with_context(|| format!("reading {}", a.split.display()))?;
    let split: CzslSplit =
        serde_json::from_str(&split_text).with_context(|| format!("parsing {}", a.split.display()))?;
    let split = CzslSplit::new(split.num_classes, split.tasks)?;
    let file = fs::File::open(&a.predictions).with_context(|| format!("reading {}", a.predictions.display()))?;
    let records = read_predictions(file).with_context(|| format!("parsing {}", a.predictions.display()))?;
    let averaging = if a.sample_weighted {
        Averaging::SampleWeighted
    } else {
        Averaging::ClassBalanced
    };
    let matrix = matrix_from_predictions(&records, &split, averaging)?;
    let metrics = MetricsReport::from_matrix(&matrix)?.to_json()?;
    if let Some(path) = &a.matrix {
        let f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
        matrix.write_csv(f)?;
    }
    match &a.out {
        Some(path) => fs::write(path, metrics).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{metrics}"),
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let rows = report::rows_for(&a.dirs)?;
    print!("{}", report::render_table(&rows));
    if let Some(path) = &a.csv {
        fs::write(path, report::render_csv(&rows)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| true),
        Command::Report(a) => cmd_report(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
