use std::time::Instant;

use aczsl::eval::{bwt, harmonic, mh, moa, msa, mua};
use aczsl::gradcheck::{check_inputs, check_params, GradCheck};
use aczsl::nn::{kl_diag_gaussian, reconstruction_loss, softmax_cross_entropy};
use aczsl::{
    AccuracyMatrix, AczslModel, Batch, Graph, LabeledSet, ModelConfig, ParamId, Result, RngStream, Tensor, Var,
};

use crate::{check, Outcome};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
const INSTANCES: usize = 100;

fn contract(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(out, wv)?;
    Ok(g.sum(p))
}

fn dims(rng: &mut RngStream) -> (usize, usize, usize) {
    (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4))
}

/// Runs one op's check; returns its max relative error.
type OpCheck = fn(&mut RngStream) -> GradCheck;

fn unary(rng: &mut RngStream, shift: fn(f64) -> f64, op: fn(&mut Graph, Var) -> Result<Var>) -> GradCheck {
    let (m, n, _) = dims(rng);
    let x = rng.uniform_tensor(&[m, n], -2.0, 2.0).map(shift);
    let w = rng.normal_tensor(&[m, n]);
    check_inputs(&[x], H, |g, v| {
        let o = op(g, v[0])?;
        contract(g, o, &w)
    })
    .unwrap()
}

fn binary(rng: &mut RngStream, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> GradCheck {
    let (m, n, _) = dims(rng);
    let a = rng.normal_tensor(&[m, n]);
    let b = rng.normal_tensor(&[m, n]);
    let w = rng.normal_tensor(&[m, n]);
    check_inputs(&[a, b], H, |g, v| {
        let o = op(g, v[0], v[1])?;
        contract(g, o, &w)
    })
    .unwrap()
}

fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = dims(rng);
            let (a, b, w) = (
                rng.normal_tensor(&[m, k]),
                rng.normal_tensor(&[k, n]),
                rng.normal_tensor(&[m, n]),
            );
            check_inputs(&[a, b], H, |g, v| {
                let o = g.matmul(v[0], v[1])?;
                contract(g, o, &w)
            })
            .unwrap()
        }),
        ("matmul_bt", |rng| {
            let (m, k, n) = dims(rng);
            let (a, b, w) = (
                rng.normal_tensor(&[m, k]),
                rng.normal_tensor(&[n, k]),
                rng.normal_tensor(&[m, n]),
            );
            check_inputs(&[a, b], H, |g, v| {
                let o = g.matmul_bt(v[0], v[1])?;
                contract(g, o, &w)
            })
            .unwrap()
        }),
        ("add", |rng| binary(rng, |g, a, b| g.add(a, b))),
        ("sub", |rng| binary(rng, |g, a, b| g.sub(a, b))),
        ("mul", |rng| binary(rng, |g, a, b| g.mul(a, b))),
        ("add_row", |rng| {
            let (m, n, _) = dims(rng);
            let (a, r, w) = (
                rng.normal_tensor(&[m, n]),
                rng.normal_tensor(&[n]),
                rng.normal_tensor(&[m, n]),
            );
            check_inputs(&[a, r], H, |g, v| {
                let o = g.add_row(v[0], v[1])?;
                contract(g, o, &w)
            })
            .unwrap()
        }),
        ("scale", |rng| unary(rng, |x| x, |g, a| Ok(g.scale(a, -2.5)))),
        ("add_scalar", |rng| unary(rng, |x| x, |g, a| Ok(g.add_scalar(a, 0.75)))),
        ("relu", |rng| {
            unary(rng, |x| if x >= 0.0 { x + 0.1 } else { x - 0.1 }, |g, a| Ok(g.relu(a)))
        }),
        ("sigmoid", |rng| unary(rng, |x| x, |g, a| Ok(g.sigmoid(a)))),
        ("tanh", |rng| unary(rng, |x| x, |g, a| Ok(g.tanh(a)))),
        ("exp", |rng| unary(rng, |x| x, |g, a| Ok(g.exp(a)))),
        ("log", |rng| unary(rng, |x| x.abs() + 0.5, |g, a| g.log(a))),
        ("concat", |rng| {
            let (m, n, p) = dims(rng);
            let axis = rng.below(2);
            let other = if axis == 0 { [p, n] } else { [m, p] };
            let out = if axis == 0 { [m + p, n] } else { [m, n + p] };
            let (a, b, w) = (
                rng.normal_tensor(&[m, n]),
                rng.normal_tensor(&other),
                rng.normal_tensor(&out),
            );
            check_inputs(&[a, b], H, |g, v| {
                let o = g.concat(v[0], v[1], axis)?;
                contract(g, o, &w)
            })
            .unwrap()
        }),
        ("narrow", |rng| {
            let (m, n, _) = dims(rng);
            let (m, n) = (m + 1, n + 1);
            let axis = rng.below(2);
            let size = if axis == 0 { m } else { n };
            let start = rng.below(size);
            let len = 1 + rng.below(size - start);
            let out = if axis == 0 { [len, n] } else { [m, len] };
            let (a, w) = (rng.normal_tensor(&[m, n]), rng.normal_tensor(&out));
            check_inputs(&[a], H, |g, v| {
                let o = g.narrow(v[0], axis, start, len)?;
                contract(g, o, &w)
            })
            .unwrap()
        }),
        ("sum", |rng| {
            let (m, n, _) = dims(rng);
            let a = rng.normal_tensor(&[m, n]);
            check_inputs(&[a], H, |g, v| {
                let s = g.sum(v[0]);
                g.mul(s, s)
            })
            .unwrap()
        }),
        ("mean", |rng| {
            let (m, n, _) = dims(rng);
            let a = rng.normal_tensor(&[m, n]);
            check_inputs(&[a], H, |g, v| {
                let s = g.mean(v[0]);
                g.mul(s, s)
            })
            .unwrap()
        }),
        ("softmax_cross_entropy", |rng| {
            let (b, c, _) = dims(rng);
            let c = c + 1;
            let logits = rng.uniform_tensor(&[b, c], -3.0, 3.0);
            let targets: Vec<usize> = (0..b).map(|_| rng.below(c)).collect();
            check_inputs(&[logits], H, |g, v| softmax_cross_entropy(g, v[0], &targets)).unwrap()
        }),
        ("kl_diag_gaussian", |rng| {
            let (b, d, _) = dims(rng);
            let (mu, lv) = (rng.normal_tensor(&[b, d]), rng.uniform_tensor(&[b, d], -2.0, 2.0));
            check_inputs(&[mu, lv], H, |g, v| kl_diag_gaussian(g, v[0], v[1])).unwrap()
        }),
        ("reconstruction_loss", |rng| {
            let (b, d, _) = dims(rng);
            let (x, y) = (rng.normal_tensor(&[b, d]), rng.normal_tensor(&[b, d]));
            check_inputs(&[x, y], H, |g, v| reconstruction_loss(g, v[0], v[1])).unwrap()
        }),
    ]
}

fn tiny_model(seed: u64, grl: f64) -> (AczslModel, Batch, Tensor) {
    let cfg = ModelConfig {
        latent_dim: 3,
        hidden: vec![6],
        head_hidden: vec![5],
        discriminator_hidden: vec![5],
        grl_strength: grl,
        ..ModelConfig::new(4, 2, 3)
    };
    let mut rng = RngStream::new(seed);
    let mut m = AczslModel::new(cfg, &mut rng).unwrap();
    m.add_task(&[0, 1], &mut rng).unwrap();
    m.finish_task().unwrap();
    m.add_task(&[2, 3], &mut rng).unwrap();
    let set = LabeledSet::new(
        rng.normal_tensor(&[6, 4]),
        rng.normal_tensor(&[6, 2]),
        vec![2, 3, 0, 3, 1, 2],
    )
    .unwrap();
    let batch = Batch::new(set, vec![2; 6]).unwrap();
    let attrs = rng.normal_tensor(&[2, 2]);
    (m, batch, attrs)
}

pub fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let ops = op_checks();
    let op_count = ops.len();
    for (name, f) in ops {
        let mut rng = RngStream::new(0x5eed);
        let max = (0..INSTANCES).map(|_| f(&mut rng).max_error()).fold(0.0, f64::max);
        worst.push((name.to_string(), max));
    }
    for seed in 0..5 {
        let grl = 0.1 + 0.4 * seed as f64;
        let (m, batch, attrs) = tiny_model(seed, grl);
        let shared = m.shared.params();
        let private = m.privates[1].params();
        let head = m.heads[1].params();
        let disc = m.discriminator_params();
        let mut task_side = shared.clone();
        task_side.extend(&private);
        task_side.extend(&head);
        // (term, params, expected analytic / numeric ratio)
        let cases: [(usize, &str, &[ParamId], f64); 6] = [
            (0, "vae loss (shared module)", &shared, 1.0),
            (1, "vae loss (private module)", &private, 1.0),
            (2, "task loss", &task_side, 1.0),
            (3, "adversarial loss (discriminator)", &disc, 1.0),
            (3, "adversarial loss (shared, reversed)", &shared, -grl),
            (4, "discriminator step loss", &disc, 1.0),
        ];
        for (term, name, ids, scale) in cases {
            let r = check_params(&m.store, ids, scale, H, |g, store| {
                let mut view = m.clone();
                view.store = store.clone();
                let mut rng = RngStream::new(seed + 100);
                if term == 4 {
                    return view.discriminator_loss(g, &batch, 2, &attrs, &mut rng);
                }
                let t = view.total_loss(g, &batch, 2, &mut rng)?;
                Ok([t.vae_shared, t.vae_private, t.task, t.adv][term])
            })
            .unwrap();
            match worst.iter_mut().find(|(n, _)| n == name) {
                Some(e) => e.1 = e.1.max(r.max_error()),
                None => worst.push((name.to_string(), r.max_error())),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let failing: Vec<&str> = worst.iter().filter(|w| w.1 >= TOL).map(|w| w.0.as_str()).collect();
    check(
        failing.is_empty() && secs < 60.0,
        format!(
            "{} checks ({} ops x {INSTANCES} instances, loss terms x 5 models), max rel err {max:.2e} < {TOL:e}, {secs:.1}s < 60s{}",
            worst.len(),
            op_count,
            if failing.is_empty() { String::new() } else { format!("; failing: {failing:?}") }
        ),
    )
}

pub fn gradient_reversal() -> Outcome {
    let mut rng = RngStream::new(17);
    let mut worst_ulps: f64 = 0.0;
    for case in 0..200 {
        let (m, n, _) = dims(&mut rng);
        let x = rng.normal_tensor(&[m, n]);
        let w = rng.normal_tensor(&[n, 2]);
        let strength = if case % 10 == 0 { 0.0 } else { rng.uniform(0.0, 5.0) };
        let run = |reverse: bool| {
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.constant(w.clone());
            let h = g.tanh(xv);
            let h = if reverse { g.grad_reverse(h, strength) } else { h };
            let y = g.matmul(h, wv).unwrap();
            let y = g.sigmoid(y);
            let loss = g.sum(y);
            let value = g.value(h).clone();
            g.backward(loss).unwrap();
            (value, g.grad_or_zeros(xv))
        };
        let (fwd_plain, grad_plain) = run(false);
        let (fwd_rev, grad_rev) = run(true);
        let same_forward = fwd_plain
            .values()
            .iter()
            .zip(fwd_rev.values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same_forward {
            return Err(format!("forward differs at case {case}"));
        }
        for (r, p) in grad_rev.values().iter().zip(grad_plain.values()) {
            let expect = -strength * p;
            if strength == 0.0 {
                if *r != 0.0 {
                    return Err(format!("strength 0 left gradient {r}"));
                }
                continue;
            }
            let ulps = (r - expect).abs() / (f64::EPSILON * expect.abs().max(f64::MIN_POSITIVE));
            worst_ulps = worst_ulps.max(ulps);
        }
    }
    check(
        worst_ulps <= 4.0,
        format!("200 random graphs: forward bit-identical, gradient = -strength x plain within {worst_ulps:.1} ulp, strength 0 gives exact zeros"),
    )
}

pub fn closed_forms() -> Outcome {
    let mut worst: f64 = 0.0;
    for c in 1..=100 {
        for level in [0.0, -7.0, 31.5] {
            let mut g = Graph::new();
            let logits = g.constant(Tensor::full(&[4, c], level));
            let ce = softmax_cross_entropy(&mut g, logits, &[0, c - 1, c / 2, c / 3]).unwrap();
            worst = worst.max((g.value(ce).item() - (c as f64).ln()).abs());
        }
    }
    let kl = |mu: f64, lv: f64| {
        let mut g = Graph::new();
        let m = g.constant(Tensor::full(&[1, 1], mu));
        let l = g.constant(Tensor::full(&[1, 1], lv));
        let k = kl_diag_gaussian(&mut g, m, l).unwrap();
        g.value(k).item()
    };
    let (k1, k0) = (kl(1.0, 0.0), kl(0.0, 0.0));
    check(
        worst <= 1e-12 && (k1 - 0.5).abs() <= 1e-12 && k0.abs() <= 1e-12,
        format!("CE(uniform) - ln C max {worst:.1e} over C = 1..100; KL(1,0) = {k1}; KL(0,0) = {k0}"),
    )
}

pub fn metric_oracles() -> Outcome {
    let mut rng = RngStream::new(99);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let t = 2 + case % 6;
        let seen: Vec<Vec<f64>> = (0..t)
            .map(|j| (0..=j).map(|_| rng.uniform(0.0, 1.0)).collect())
            .collect();
        let unseen: Vec<f64> = (0..t).map(|_| rng.uniform(0.0, 1.0)).collect();
        let overall: Vec<f64> = (0..t).map(|_| rng.uniform(0.0, 1.0)).collect();
        let mut m = AccuracyMatrix::new(t);
        for j in 0..t {
            for (i, v) in seen[j].iter().enumerate() {
                m.set_seen(j + 1, i + 1, *v).unwrap();
            }
            m.set_unseen(j + 1, unseen[j]).unwrap();
            m.set_overall(j + 1, overall[j]).unwrap();
        }
        // Brute force straight from the definitions.
        let n = t as f64;
        let b_msa = (0..t).map(|k| seen[k][k]).sum::<f64>() / n;
        let b_mua = (0..t - 1).map(|k| unseen[k]).sum::<f64>() / (n - 1.0);
        let b_mh = (0..t - 1)
            .map(|k| {
                let (s, u) = (seen[k][k], unseen[k]);
                if s + u == 0.0 {
                    0.0
                } else {
                    2.0 * s * u / (s + u)
                }
            })
            .sum::<f64>()
            / (n - 1.0);
        let b_moa = overall.iter().sum::<f64>() / n;
        let b_bwt = (0..t - 1).map(|k| seen[k][k] - seen[t - 1][k]).sum::<f64>() / (n - 1.0);
        let got = [
            msa(&m).unwrap(),
            mua(&m).unwrap().unwrap(),
            mh(&m).unwrap().unwrap(),
            moa(&m).unwrap(),
            bwt(&m).unwrap().unwrap(),
        ];
        for (g, b) in got.iter().zip([b_msa, b_mua, b_mh, b_moa, b_bwt]) {
            worst = worst.max((g - b).abs());
        }
    }
    let hand = harmonic(0.6, 0.3);
    check(
        worst <= 1e-12 && hand == 0.4,
        format!("50 random matrices: max |lib - brute| = {worst:.1e}; harmonic(0.6, 0.3) = {hand}"),
    )
}
