//! Open-set prediction and category-weighted metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DomainTag;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// All `K + 1` classes, target-only categories collapsed into the unknown class.
    Acc,
    /// Binary normal versus intrusion.
    Ind,
}

impl EvalMode {
    pub const ALL: [EvalMode; 2] = [EvalMode::Acc, EvalMode::Ind];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Acc => "acc",
            EvalMode::Ind => "ind",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "acc" => Ok(EvalMode::Acc),
            "ind" => Ok(EvalMode::Ind),
            _ => Err(Error::UnknownVariant {
                kind: "evaluation mode",
                value: s.into(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl CategoryCounts {
    /// Instances whose true label is this category.
    pub fn support(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mode: EvalMode,
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Indexed by class in the mode's label space.
    pub per_category: Vec<CategoryCounts>,
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(probs: &Tensor) -> Vec<usize> {
    probs
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Labels in `0..=K` for raw target rows; `K` is unknown.
pub fn predict_labels(model: &Model, target: &Tensor) -> Result<Vec<usize>> {
    let f = model.project(target, DomainTag::Target)?;
    Ok(argmax_rows(&model.classify(&f)?))
}

/// Maps `0..=K` labels into the label space of `mode`.
pub fn collapse(label: usize, mode: EvalMode, normal_category: usize) -> usize {
    match mode {
        EvalMode::Acc => label,
        EvalMode::Ind => usize::from(label != normal_category),
    }
}

/// Metrics over labels in `0..=k` (`k` = unknown).
pub fn compute_metrics(
    predictions: &[usize],
    truth: &[usize],
    mode: EvalMode,
    normal_category: usize,
    k: usize,
) -> Result<Metrics> {
    if predictions.len() != truth.len() {
        return Err(Error::shape("predictions", truth.len(), predictions.len()));
    }
    if truth.is_empty() {
        return Err(Error::InvalidParameter("no instances to evaluate".into()));
    }
    if let Some(&bad) = predictions.iter().chain(truth).find(|&&l| l > k) {
        return Err(Error::Index { index: bad, len: k + 1 });
    }
    if mode == EvalMode::Ind && normal_category >= k {
        return Err(Error::Index {
            index: normal_category,
            len: k,
        });
    }
    let classes = match mode {
        EvalMode::Acc => k + 1,
        EvalMode::Ind => 2,
    };
    let n = truth.len();
    let mut per = vec![CategoryCounts::default(); classes];
    let mut correct = 0;
    for (&p, &t) in predictions.iter().zip(truth) {
        let (p, t) = (collapse(p, mode, normal_category), collapse(t, mode, normal_category));
        if p == t {
            per[t].tp += 1;
            correct += 1;
        } else {
            per[t].fn_ += 1;
            per[p].fp += 1;
        }
    }
    for c in &mut per {
        c.tn = n - c.tp - c.fp - c.fn_;
    }
    let weight = |c: &CategoryCounts| c.support() as f64 / n as f64;
    let accuracy = correct as f64 / n as f64;
    Ok(Metrics {
        mode,
        n,
        accuracy,
        precision: per.iter().map(|c| weight(c) * c.precision()).sum(),
        // Σ_k (n_k / n)(TP_k / n_k) telescopes to Σ_k TP_k / n.
        recall: per.iter().map(|c| c.tp).sum::<usize>() as f64 / n as f64,
        f1: per.iter().map(|c| weight(c) * c.f1()).sum(),
        per_category: per,
    })
}

/// `1 − K / K′`.
pub fn openness(k: usize, k_prime: usize) -> Result<f64> {
    if k == 0 || k > k_prime {
        return Err(Error::InvalidParameter(format!(
            "openness needs 1 <= K <= K', got K={k}, K'={k_prime}"
        )));
    }
    Ok(1.0 - k as f64 / k_prime as f64)
}
