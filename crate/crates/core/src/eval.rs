//! Accuracy bookkeeping and the continual zero-shot metrics.
//!
//! `R[j][i]` is the seen-class accuracy after training through task `j`,
//! measured on the test samples of every class introduced in tasks `1..=i`
//! with predictions restricted to the classes seen at `j`. Alongside it we
//! keep, per task `t`, the zero-shot accuracy on the classes still unseen at
//! `t` and the generalized accuracy over every class.
//!
//! | metric | definition |
//! |--------|-----------|
//! | mSA | mean over `t = 1..T` of `R_seen[t][t]` |
//! | mUA | mean over `t = 1..T-1` of `R_unseen[t]` |
//! | mOA | mean over `t = 1..T` of `R_overall[t]` |
//! | mH  | mean over `t = 1..T-1` of the harmonic mean of `R_seen[t][t]` and `R_unseen[t]` |
//! | BWT | mean over `t = 1..T-1` of `R_seen[t][t] - R_seen[T][t]`; positive means forgetting |

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::data::CzslSplit;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of per-class accuracies.
    #[default]
    ClassBalanced,
    /// Fraction of samples correct.
    SampleWeighted,
}

/// Accuracy of `predictions` against `labels` restricted to `class_set`.
///
/// Classes in `class_set` without any sample are skipped with a warning, or
/// rejected when `strict` is set.
pub fn accuracy(
    predictions: &[usize],
    labels: &[usize],
    class_set: &[usize],
    averaging: Averaging,
    strict: bool,
) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("accuracy", &[predictions.len()], &[labels.len()]));
    }
    let mut tally: BTreeMap<usize, (usize, usize)> = class_set.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &y) in predictions.iter().zip(labels) {
        let Some(entry) = tally.get_mut(&y) else {
            return Err(Error::Contract(format!("label {y} is not in the evaluated class set")));
        };
        entry.0 += usize::from(p == y);
        entry.1 += 1;
    }
    let empty: Vec<usize> = tally.iter().filter(|(_, &(_, n))| n == 0).map(|(&c, _)| c).collect();
    if !empty.is_empty() {
        if strict {
            return Err(Error::Contract(format!("no samples for classes {empty:?}")));
        }
        log::warn!("accuracy: skipping classes without samples: {empty:?}");
    }
    let present: Vec<(usize, usize)> = tally.into_values().filter(|&(_, n)| n > 0).collect();
    if present.is_empty() {
        return Err(Error::Contract("accuracy over an empty sample set".into()));
    }
    Ok(match averaging {
        Averaging::ClassBalanced => {
            present.iter().map(|&(k, n)| k as f64 / n as f64).sum::<f64>() / present.len() as f64
        }
        Averaging::SampleWeighted => {
            let (k, n) = present.iter().fold((0, 0), |(a, b), &(k, n)| (a + k, b + n));
            k as f64 / n as f64
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    /// `seen[j-1][i-1]`, only `i <= j` populated.
    seen: Vec<Vec<Option<f64>>>,
    unseen: Vec<Option<f64>>,
    overall: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            seen: (1..=num_tasks).map(|j| vec![None; j]).collect(),
            unseen: vec![None; num_tasks],
            overall: vec![None; num_tasks],
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    fn check(&self, v: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Contract(format!("accuracy {v} outside [0, 1]")));
        }
        Ok(())
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_tasks {
            return Err(Error::Index {
                what: "tasks (1-based)",
                index: t,
                bound: self.num_tasks,
            });
        }
        Ok(())
    }

    /// Sets `R_seen[j][i]`; requires `1 <= i <= j <= T`.
    pub fn set_seen(&mut self, j: usize, i: usize, v: f64) -> Result<()> {
        self.check_t(j)?;
        if i == 0 || i > j {
            return Err(Error::Contract(format!("R[{j},{i}] lies above the diagonal")));
        }
        self.check(v)?;
        self.seen[j - 1][i - 1] = Some(v);
        Ok(())
    }

    pub fn set_unseen(&mut self, t: usize, v: f64) -> Result<()> {
        self.check_t(t)?;
        self.check(v)?;
        self.unseen[t - 1] = Some(v);
        Ok(())
    }

    pub fn set_overall(&mut self, t: usize, v: f64) -> Result<()> {
        self.check_t(t)?;
        self.check(v)?;
        self.overall[t - 1] = Some(v);
        Ok(())
    }

    pub fn seen(&self, j: usize, i: usize) -> Option<f64> {
        self.seen
            .get(j.wrapping_sub(1))?
            .get(i.wrapping_sub(1))
            .copied()
            .flatten()
    }

    pub fn unseen(&self, t: usize) -> Option<f64> {
        self.unseen.get(t.wrapping_sub(1)).copied().flatten()
    }

    pub fn overall(&self, t: usize) -> Option<f64> {
        self.overall.get(t.wrapping_sub(1)).copied().flatten()
    }

    fn diag(&self, t: usize) -> Result<f64> {
        self.seen(t, t).ok_or(Error::MissingEntry { which: "seen", t })
    }

    /// Long-format CSV: `j,i,regime,accuracy`, one line per populated entry.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["j", "i", "regime", "accuracy"])?;
        for j in 1..=self.num_tasks {
            for i in 1..=j {
                if let Some(v) = self.seen(j, i) {
                    w.write_record([j.to_string(), i.to_string(), "seen".into(), v.to_string()])?;
                }
            }
            if let Some(v) = self.unseen(j) {
                w.write_record([j.to_string(), j.to_string(), "unseen".into(), v.to_string()])?;
            }
            if let Some(v) = self.overall(j) {
                w.write_record([j.to_string(), j.to_string(), "overall".into(), v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("accuracy_matrix.csv", e))?;
        Ok(())
    }
}

pub fn harmonic(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

/// `None` when fewer than two tasks.
pub fn bwt(m: &AccuracyMatrix) -> Result<Option<f64>> {
    let t_max = m.num_tasks();
    if t_max < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    for t in 1..t_max {
        let last = m.seen(t_max, t).ok_or(Error::MissingEntry {
            which: "seen final row",
            t,
        })?;
        total += m.diag(t)? - last;
    }
    Ok(Some(total / (t_max - 1) as f64))
}

pub fn msa(m: &AccuracyMatrix) -> Result<f64> {
    let t_max = m.num_tasks();
    let mut total = 0.0;
    for t in 1..=t_max {
        total += m.diag(t)?;
    }
    Ok(total / t_max as f64)
}

/// `None` when fewer than two tasks.
pub fn mua(m: &AccuracyMatrix) -> Result<Option<f64>> {
    let t_max = m.num_tasks();
    if t_max < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    for t in 1..t_max {
        total += m.unseen(t).ok_or(Error::MissingEntry { which: "unseen", t })?;
    }
    Ok(Some(total / (t_max - 1) as f64))
}

pub fn moa(m: &AccuracyMatrix) -> Result<f64> {
    let t_max = m.num_tasks();
    let mut total = 0.0;
    for t in 1..=t_max {
        total += m.overall(t).ok_or(Error::MissingEntry { which: "overall", t })?;
    }
    Ok(total / t_max as f64)
}

/// `None` when fewer than two tasks.
pub fn mh(m: &AccuracyMatrix) -> Result<Option<f64>> {
    let t_max = m.num_tasks();
    if t_max < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    for t in 1..t_max {
        let u = m.unseen(t).ok_or(Error::MissingEntry { which: "unseen", t })?;
        total += harmonic(m.diag(t)?, u);
    }
    Ok(Some(total / (t_max - 1) as f64))
}

/// Serialized as `metrics.json`. Metrics undefined for a single task are
/// `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mSA")]
    pub msa: f64,
    #[serde(rename = "mUA")]
    pub mua: Option<f64>,
    #[serde(rename = "mH")]
    pub mh: Option<f64>,
    #[serde(rename = "mOA")]
    pub moa: f64,
    #[serde(rename = "BWT")]
    pub bwt: Option<f64>,
}

impl MetricsReport {
    pub fn from_matrix(m: &AccuracyMatrix) -> Result<Self> {
        Ok(Self {
            msa: msa(m)?,
            mua: mua(m)?,
            mh: mh(m)?,
            moa: moa(m)?,
            bwt: bwt(m)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Seen,
    Unseen,
    Overall,
}

/// One line of a prediction log: `t,sample_id,true,pred,regime`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub t: usize,
    pub sample_id: usize,
    #[serde(rename = "true")]
    pub true_label: usize,
    pub pred: usize,
    pub regime: Regime,
}

pub fn write_predictions<W: Write>(w: W, records: &[PredictionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("predictions.csv", e))?;
    Ok(())
}

pub fn read_predictions<R: Read>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Rebuilds the accuracy matrix from a prediction log.
///
/// A seen record logged at step `t` counts toward `R[t][i]` for every `i`
/// from the task owning its true class up to `t`. Unseen and overall records
/// give the per-step entries.
pub fn matrix_from_predictions(
    records: &[PredictionRecord],
    split: &CzslSplit,
    averaging: Averaging,
) -> Result<AccuracyMatrix> {
    let t_max = split.num_tasks();
    let mut m = AccuracyMatrix::new(t_max);
    // (owning task, pred, true)
    type Scored = (usize, usize, usize);
    let mut groups: BTreeMap<(usize, Regime), Vec<Scored>> = BTreeMap::new();
    for r in records {
        let owner = split.task_of(r.true_label).unwrap_or(usize::MAX);
        if r.regime == Regime::Seen && owner > r.t {
            return Err(Error::Contract(format!(
                "seen record at step {} for class {} not seen by then",
                r.t, r.true_label
            )));
        }
        groups
            .entry((r.t, r.regime))
            .or_default()
            .push((owner, r.pred, r.true_label));
    }
    for ((t, regime), rows) in groups {
        let (pred, truth): (Vec<usize>, Vec<usize>) = rows.iter().map(|&(_, p, y)| (p, y)).unzip();
        match regime {
            Regime::Seen => {
                for i in 1..=t {
                    let (p, y): (Vec<usize>, Vec<usize>) =
                        rows.iter().filter(|r| r.0 <= i).map(|&(_, p, y)| (p, y)).unzip();
                    let mut classes = split.classes_through(i);
                    classes.sort_unstable();
                    m.set_seen(t, i, accuracy(&p, &y, &classes, averaging, false)?)?;
                }
            }
            Regime::Unseen => {
                let classes = split.seen_unseen_at(t)?.1;
                m.set_unseen(t, accuracy(&pred, &truth, &classes, averaging, false)?)?;
            }
            Regime::Overall => {
                let classes: Vec<usize> = truth.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
                m.set_overall(t, accuracy(&pred, &truth, &classes, averaging, false)?)?;
            }
        }
    }
    Ok(m)
}
