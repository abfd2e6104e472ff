use std::collections::BTreeSet;

use aczsl::trainer::{build_replay, train_task};
use aczsl::{
    make_split, run_stream, synth_dataset, AczslModel, Adam, AdamConfig, Architecture, Batch, CzslSplit, Dataset,
    EpochSchedule, Graph, LabeledSet, ModelConfig, ParamId, ParamStore, Partition, Regime, RngStream, SynthSpec,
    TrainConfig,
};

use crate::Outcome;

type Check = Result<(), String>;
type CheckFn = fn() -> Check;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn data(seed: u64) -> (Dataset, CzslSplit) {
    let spec = SynthSpec {
        classes: 9,
        feature_dim: 6,
        attr_dim: 3,
        per_class: 12,
        noise_sigma: 0.1,
        seed,
    };
    (synth_dataset(&spec).unwrap(), make_split(9, 4, 2, None).unwrap())
}

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        model_epochs: EpochSchedule::Uniform(2),
        classifier_epochs: EpochSchedule::Uniform(2),
        batch_size: 8,
        replay_n_per_class: 5,
        classifier_n_per_class: 6,
        architecture: Architecture {
            latent_dim: 3,
            hidden: vec![10],
            head_hidden: vec![6],
            discriminator_hidden: vec![6],
            ..Architecture::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

fn grown(tasks: &[&[usize]], rng: &mut RngStream) -> AczslModel {
    let cfg = ModelConfig {
        latent_dim: 3,
        hidden: vec![7],
        head_hidden: vec![5],
        discriminator_hidden: vec![5],
        ..ModelConfig::new(6, 3, 4)
    };
    let mut m = AczslModel::new(cfg, rng).unwrap();
    for (k, classes) in tasks.iter().enumerate() {
        m.add_task(classes, rng).unwrap();
        if k + 1 < tasks.len() {
            m.finish_task().unwrap();
        }
    }
    m
}

fn bits(store: &ParamStore, ids: &[ParamId]) -> Vec<Vec<u64>> {
    ids.iter()
        .map(|&id| store.get(id).values().iter().map(|v| v.to_bits()).collect())
        .collect()
}

fn frozen_modules_get_zero_gradient() -> Check {
    for seed in 0..10 {
        let mut rng = RngStream::new(seed);
        let m = grown(&[&[0, 1], &[2], &[3, 4], &[5]], &mut rng);
        let labels: Vec<usize> = (0..9).map(|i| [5, 0, 3][i % 3]).collect();
        let set = LabeledSet::new(rng.normal_tensor(&[9, 6]), rng.normal_tensor(&[9, 3]), labels).unwrap();
        let batch = Batch::for_task(set, 4);
        let mut g = Graph::with_trainable(m.store.ids());
        let terms = m.total_loss(&mut g, &batch, 4, &mut rng).map_err(|e| e.to_string())?;
        g.backward(terms.total).map_err(|e| e.to_string())?;
        let frozen: BTreeSet<ParamId> = (1..4).flat_map(|t| m.task_params(t)).collect();
        for (id, grad) in g.param_grads() {
            ensure!(
                !frozen.contains(&id) || grad.values().iter().all(|v| *v == 0.0),
                "frozen {} got gradient (seed {seed})",
                m.store.name(id)
            );
        }
    }
    Ok(())
}

fn alternating_steps_touch_disjoint_parameters() -> Check {
    for seed in 0..5 {
        let mut rng = RngStream::new(100 + seed);
        let mut m = grown(&[&[0, 1], &[2, 3]], &mut rng);
        let set = LabeledSet::new(
            rng.normal_tensor(&[8, 6]),
            rng.normal_tensor(&[8, 3]),
            vec![2, 3, 2, 3, 0, 1, 2, 3],
        )
        .unwrap();
        let batch = Batch::for_task(set, 2);
        let attrs = rng.normal_tensor(&[2, 3]);
        let d_ids = m.discriminator_params();
        let d_set: BTreeSet<ParamId> = d_ids.iter().copied().collect();
        let rest: Vec<ParamId> = m.store.ids().filter(|id| !d_set.contains(id)).collect();

        let d_before = bits(&m.store, &d_ids);
        let mut g = Graph::with_trainable(m.s_step_params(2));
        let terms = m.total_loss(&mut g, &batch, 2, &mut rng).unwrap();
        g.backward(terms.total).unwrap();
        Adam::new(AdamConfig::new(1e-2))
            .step(&mut m.store, &g.param_grads())
            .unwrap();
        ensure!(
            bits(&m.store, &d_ids) == d_before,
            "S-step moved the discriminator (seed {seed})"
        );

        let rest_before = bits(&m.store, &rest);
        let mut g = Graph::with_trainable(d_ids.iter().copied());
        let loss = m.discriminator_loss(&mut g, &batch, 2, &attrs, &mut rng).unwrap();
        g.backward(loss).unwrap();
        Adam::new(AdamConfig::new(1e-2))
            .step(&mut m.store, &g.param_grads())
            .unwrap();
        ensure!(
            bits(&m.store, &rest) == rest_before,
            "D-step moved a generator parameter (seed {seed})"
        );
    }
    Ok(())
}

fn replay_excludes_current_and_future_classes() -> Check {
    let (data, split) = data(2);
    let cfg = config(2);
    let mut rng = RngStream::new(2);
    let mut m = AczslModel::new(cfg.model_config(6, 3, 4), &mut rng).unwrap();
    for t in 1..split.num_tasks() {
        m.add_task(split.task(t).unwrap(), &mut rng).unwrap();
        m.finish_task().unwrap();
        let replay = build_replay(&m, &split, &data.attributes, t, 4, &mut rng).unwrap();
        let past: BTreeSet<usize> = split.classes_through(t).into_iter().collect();
        ensure!(
            replay.set.classes() == past,
            "replay after task {t} covers {:?}",
            replay.set.classes()
        );
        ensure!(replay.len() == 4 * past.len(), "replay size {}", replay.len());

        // A replay row labelled with a current-task class is refused.
        let next = split.task(t + 1).unwrap();
        let mut probe = m.clone();
        probe.add_task(next, &mut rng).unwrap();
        let train = data.labeled(&data.indices(Partition::Train, next));
        let mut bad = replay.clone();
        bad.set.labels[0] = next[0];
        let refused = train_task(
            &mut probe,
            t + 1,
            &train,
            &bad,
            &data.class_attributes(next),
            &cfg,
            &mut rng,
        );
        ensure!(refused.is_err(), "contaminated replay accepted at task {}", t + 1);
    }
    Ok(())
}

fn no_real_past_data_is_read() -> Check {
    let (data, split) = data(3);
    let cfg = config(3);
    let out = run_stream(&data, &split, &cfg).map_err(|e| e.to_string())?;
    for (k, read) in out.real_classes_read.iter().enumerate() {
        let own: BTreeSet<usize> = split.task(k + 1).unwrap().iter().copied().collect();
        ensure!(read == &own, "task {} read real classes {read:?}", k + 1);
    }

    let mut rng = RngStream::new(3);
    let mut m = AczslModel::new(cfg.model_config(6, 3, 4), &mut rng).unwrap();
    m.add_task(split.task(1).unwrap(), &mut rng).unwrap();
    m.finish_task().unwrap();
    let replay = build_replay(&m, &split, &data.attributes, 1, 4, &mut rng).unwrap();
    let next = split.task(2).unwrap();
    m.add_task(next, &mut rng).unwrap();
    let train = data.labeled(&data.indices(Partition::Train, next));
    let past = data.labeled(&data.indices(Partition::Train, split.task(1).unwrap()));
    let mixed = train.concat(&past).unwrap();
    let refused = train_task(&mut m, 2, &mixed, &replay, &data.class_attributes(next), &cfg, &mut rng);
    ensure!(refused.is_err(), "real past-task rows accepted");
    Ok(())
}

fn seen_unseen_partitions_hold() -> Check {
    let (data, split) = data(4);
    let out = run_stream(&data, &split, &config(4)).map_err(|e| e.to_string())?;
    for t in 1..=split.num_tasks() {
        let (seen, unseen) = split.seen_unseen_at(t).unwrap();
        let all: BTreeSet<usize> = seen.iter().chain(&unseen).copied().collect();
        ensure!(
            all.len() == split.num_classes && seen.len() + unseen.len() == split.num_classes,
            "overlap at {t}"
        );
        for r in out.predictions.iter().filter(|r| r.t == t) {
            let origin = split.task_of(r.true_label);
            match r.regime {
                Regime::Seen => {
                    ensure!(
                        origin.is_some_and(|o| o <= t) && seen.contains(&r.pred),
                        "bad seen record {r:?}"
                    )
                }
                Regime::Unseen => {
                    ensure!(
                        origin.is_none_or(|o| o > t) && unseen.contains(&r.pred),
                        "bad unseen record {r:?}"
                    )
                }
                Regime::Overall => {}
            }
        }
        let counted = |regime| {
            out.predictions
                .iter()
                .filter(|r| r.t == t && r.regime == regime)
                .count()
        };
        ensure!(
            counted(Regime::Seen) == data.indices(Partition::Test, &seen).len(),
            "seen count at {t}"
        );
        ensure!(
            counted(Regime::Unseen) == data.indices(Partition::Test, &unseen).len(),
            "unseen count at {t}"
        );
        ensure!(counted(Regime::Overall) == data.test_idx.len(), "overall count at {t}");
    }
    Ok(())
}

pub fn suite() -> Outcome {
    let checks: [(&str, CheckFn); 5] = [
        ("frozen modules get zero gradient", frozen_modules_get_zero_gradient),
        (
            "S/D steps touch disjoint parameters",
            alternating_steps_touch_disjoint_parameters,
        ),
        (
            "replay excludes current and future classes",
            replay_excludes_current_and_future_classes,
        ),
        ("no real past-task data", no_real_past_data_is_read),
        ("seen/unseen partitions", seen_unseen_partitions_hold),
    ];
    let mut failures = Vec::new();
    for (name, f) in checks {
        if let Err(e) = f() {
            failures.push(format!("{name}: {e}"));
        }
    }
    if failures.is_empty() {
        Ok(format!(
            "{} contracts hold: {}",
            checks.len(),
            checks.map(|c| c.0).join("; ")
        ))
    } else {
        Err(failures.join("; "))
    }
}
