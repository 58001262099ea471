//! Characteristic-function graph embedding of dandelion graphs.
//!
//! Edge dissimilarities `w` become affinities `1 / (1 + w)`, rows are
//! normalized into a random-walk matrix `Â`, and for every scale `p`, feature
//! `f` and evaluation point `θ` the node functions `Σ_u Â^p[v][u]·cos(θ·x[u][f])`
//! (and the sine analogue) are mean-pooled over nodes.
//!
//! Layout of the output: scale-major, then feature, then evaluation point,
//! with the cosine value before the sine value.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::dandelion::DandelionGraph;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatherParams {
    pub eval_points: Vec<f64>,
    pub scales: usize,
}

impl Default for FeatherParams {
    fn default() -> Self {
        Self::linspace(8, 0.5, 4.0, 2)
    }
}

impl FeatherParams {
    /// `count` evaluation points evenly spaced over `[lo, hi]`.
    pub fn linspace(count: usize, lo: f64, hi: f64, scales: usize) -> Self {
        let eval_points = if count == 1 {
            vec![lo]
        } else {
            (0..count)
                .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
                .collect()
        };
        Self { eval_points, scales }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_points.is_empty() || self.scales == 0 {
            return Err(Error::InvalidParameter(
                "feather embedding needs at least one evaluation point and one scale".into(),
            ));
        }
        let ok = self.eval_points.iter().all(|&t| t > 0.0 && t.is_finite())
            && self.eval_points.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "evaluation points must be positive and strictly increasing: {:?}",
                self.eval_points
            )));
        }
        Ok(())
    }

    /// `2 · d_C · s · r`
    pub fn embedding_dim(&self, d_common: usize) -> usize {
        2 * d_common * self.eval_points.len() * self.scales
    }

    // sin(z) = cos(z − π/2), so each (θ, cos|sin) pair becomes one affine column
    fn expansion(&self) -> (Vec<f64>, Vec<f64>) {
        let mut coeffs = Vec::with_capacity(2 * self.eval_points.len());
        let mut offsets = Vec::with_capacity(2 * self.eval_points.len());
        for &t in &self.eval_points {
            coeffs.extend([t, t]);
            offsets.extend([0.0, -FRAC_PI_2]);
        }
        (coeffs, offsets)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEmbedding {
    pub values: Vec<f64>,
}

fn affinity_row_check(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::InvalidParameter(
            "graph has an isolated vertex (all-zero affinity row)".into(),
        ));
    }
    Ok(())
}

/// Embeds a graph from its stored edge weights and vertex coordinates.
pub fn feather_embed(graph: &DandelionGraph, params: &FeatherParams) -> Result<GraphEmbedding> {
    params.validate()?;
    let v = &graph.vertices;
    let m = v.rows();
    if graph.edge_weights.shape() != (m, m) {
        return Err(Error::shape("edge weights", format!("{m}x{m}"), format!("{:?}", graph.edge_weights.shape())));
    }
    affinity_row_check(m)?;
    let mut walk = Tensor::from_fn(m, m, |i, j| {
        if i == j {
            0.0
        } else {
            1.0 / (1.0 + graph.edge_weights.get(i, j))
        }
    });
    for i in 0..m {
        let s: f64 = walk.row(i).iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidParameter(format!("vertex {i} has no usable affinity")));
        }
        walk.row_mut(i).iter_mut().for_each(|a| *a /= s);
    }
    let (coeffs, offsets) = params.expansion();
    let l = coeffs.len();
    let mut h = Tensor::from_fn(m, v.cols() * l, |u, c| {
        (coeffs[c % l] * v.get(u, c / l) + offsets[c % l]).cos()
    });
    let mut values = Vec::with_capacity(params.embedding_dim(v.cols()));
    for _ in 0..params.scales {
        h = walk.matmul(&h)?;
        values.extend_from_slice(h.mean_rows().data());
    }
    Ok(GraphEmbedding { values })
}

/// Differentiable embedding of the graph whose vertices are the rows of `vertices`
/// (edge weights recomputed as squared distances). Returns a `1 × d_G` row.
pub fn feather_embed_var(tape: &mut Tape, vertices: Var, params: &FeatherParams) -> Result<Var> {
    params.validate()?;
    let m = tape.shape(vertices).0;
    affinity_row_check(m)?;
    let w = tape.pairwise_sq_dist(vertices);
    let w1 = tape.add_scalar(w, 1.0);
    let inv = tape.recip(w1);
    let mask = tape.leaf(Tensor::from_fn(m, m, |i, j| if i == j { 0.0 } else { 1.0 }));
    let a = tape.mul(inv, mask);
    let walk = tape.row_sum_normalize(a);
    let (coeffs, offsets) = params.expansion();
    let args = tape.expand_affine(vertices, coeffs, offsets);
    let mut h = tape.cos(args);
    let mut pooled = Vec::with_capacity(params.scales);
    for _ in 0..params.scales {
        h = tape.matmul(walk, h);
        pooled.push(tape.mean_rows(h));
    }
    Ok(tape.concat_cols(pooled))
}

/// Vertices for a dandelion graph on the tape: the centroid rows followed by the origin.
pub fn with_origin(tape: &mut Tape, centroids: Var) -> Var {
    let origin = tape.leaf(Tensor::zeros(1, tape.shape(centroids).1));
    tape.concat_rows(vec![centroids, origin])
}
