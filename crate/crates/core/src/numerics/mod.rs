//! Dense `f64` arithmetic and a reverse-mode gradient tape.
//!
//! [`Tensor`] holds plain values; [`Tape`] records operations on tensors and
//! replays them backward to produce adjoints for every leaf.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{dot, norm, Tensor};

use crate::error::{Error, Result};

/// Norm guard for normalization and cosine similarity.
pub const EPS_NORM: f64 = 1e-12;
/// Lower clamp applied to probabilities before taking a logarithm.
pub const EPS_CE: f64 = 1e-9;

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= EPS_NORM || !n.is_finite() {
        return Err(Error::DegenerateVector { norm: n, eps: EPS_NORM });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_similarity", a.len(), b.len()));
    }
    let (na, nb) = (norm(a), norm(b));
    for n in [na, nb] {
        if n <= EPS_NORM {
            return Err(Error::DegenerateVector { norm: n, eps: EPS_NORM });
        }
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `1 − COS(a, b)`, the angular deviation used throughout the dandelion geometry.
pub fn cosine_deviation(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_similarity(a, b).map(|c| 1.0 - c)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = *probs.get(label).ok_or(Error::Index {
        index: label,
        len: probs.len(),
    })?;
    Ok(-p.max(EPS_CE).ln())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
