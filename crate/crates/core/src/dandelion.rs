//! Dandelion geometry on the unit hypersphere.
//!
//! A dandelion is one centroid per known category together with the category's
//! maximum angular deviation `d_max = max(1 − COS(x, μ))` over its members.
//! Target instances join the nearest pappus whose deviation ball contains them
//! and otherwise fall into the unknown category `K`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, dot, norm, Tensor, EPS_NORM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dandelion {
    /// `K × d_C`, row `i` is the mean of category `i`'s features.
    pub centroids: Tensor,
    pub max_dev: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Dandelion {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }
}

/// Target memberships; values in `0..K`, or `K` for unknown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    pub assignments: Vec<usize>,
    pub k: usize,
}

impl Membership {
    pub fn unknown_fraction(&self) -> f64 {
        if self.assignments.is_empty() {
            return 0.0;
        }
        self.assignments.iter().filter(|&&a| a == self.k).count() as f64
            / self.assignments.len() as f64
    }

    /// Row indices per known category.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        group_rows(&self.assignments, self.k)
    }
}

/// Row indices grouped by label; labels `>= k` are left out.
pub fn group_rows(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l < k {
            groups[l].push(i);
        }
    }
    groups
}

/// Fully connected graph over the centroids plus the origin (appended last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DandelionGraph {
    pub vertices: Tensor,
    /// Squared Euclidean distances between vertices.
    pub edge_weights: Tensor,
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index { index: bad, len: k });
    }
    Ok(())
}

fn category_means(features: &Tensor, groups: &[Vec<usize>]) -> Tensor {
    let mut out = Tensor::zeros(groups.len(), features.cols());
    for (i, g) in groups.iter().enumerate() {
        let row = out.row_mut(i);
        for &r in g {
            for (o, v) in row.iter_mut().zip(features.row(r)) {
                *o += v;
            }
        }
        let n = g.len().max(1) as f64;
        row.iter_mut().for_each(|o| *o /= n);
    }
    out
}

pub fn fit_dandelion(features: &Tensor, labels: &[usize], k: usize) -> Result<Dandelion> {
    check_labels(labels, features.rows(), k)?;
    let groups = group_rows(labels, k);
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(Error::EmptyCategory {
            index: i,
            name: format!("category {i}"),
        });
    }
    let centroids = category_means(features, &groups);
    let mut max_dev = Vec::with_capacity(k);
    for (i, g) in groups.iter().enumerate() {
        let mu = centroids.row(i);
        let n = norm(mu);
        if n <= EPS_NORM {
            return Err(Error::DegenerateCentroid { index: i, norm: n });
        }
        let mut worst: f64 = 0.0;
        for &r in g {
            let dev = 1.0 - cosine_similarity(features.row(r), mu)?;
            worst = worst.max(dev);
        }
        max_dev.push(worst.clamp(0.0, 2.0));
    }
    Ok(Dandelion {
        centroids,
        max_dev,
        counts: groups.iter().map(Vec::len).collect(),
    })
}

/// Nearest centroid by angular deviation, kept only inside that pappus' deviation ball.
/// Ties go to the lowest category index.
pub fn assign_membership(target: &Tensor, dandelion: &Dandelion) -> Membership {
    let k = dandelion.k();
    let mu_norms: Vec<f64> = (0..k).map(|i| norm(dandelion.centroids.row(i))).collect();
    let assignments = target
        .row_iter()
        .map(|x| {
            let xn = norm(x);
            if xn <= EPS_NORM {
                return k;
            }
            let mut best = (k, f64::INFINITY);
            for (i, &mn) in mu_norms.iter().enumerate() {
                let cos = (dot(x, dandelion.centroids.row(i)) / (xn * mn)).clamp(-1.0, 1.0);
                let dev = 1.0 - cos;
                if dev < best.1 {
                    best = (i, dev);
                }
            }
            match best {
                (i, dev) if i < k && dev <= dandelion.max_dev[i] => i,
                _ => k,
            }
        })
        .collect();
    Membership { assignments, k }
}

/// Mean pairwise cosine over the upper triangle of the centroid similarity matrix.
pub fn separation_loss(centroids: &Tensor) -> Result<f64> {
    let k = centroids.rows();
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "separation needs at least 2 centroids, got {k}"
        )));
    }
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += cosine_similarity(centroids.row(i), centroids.row(j))?;
        }
    }
    Ok(2.0 * total / (k * (k - 1)) as f64)
}

pub fn build_graph(centroids: &Tensor) -> Result<DandelionGraph> {
    if centroids.rows() == 0 {
        return Err(Error::InvalidParameter("graph needs at least one centroid".into()));
    }
    let origin = Tensor::zeros(1, centroids.cols());
    let vertices = Tensor::vstack(&[centroids, &origin])?;
    let m = vertices.rows();
    let edge_weights = Tensor::from_fn(m, m, |i, j| {
        vertices
            .row(i)
            .iter()
            .zip(vertices.row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    });
    Ok(DandelionGraph {
        vertices,
        edge_weights,
    })
}

/// Source instances (by label) plus target instances (by membership) per known category.
pub fn combined_groups(
    source_labels: &[usize],
    memberships: &Membership,
    n_source: usize,
    k: usize,
) -> Vec<Vec<usize>> {
    let mut groups = group_rows(source_labels, k);
    for (j, &m) in memberships.assignments.iter().enumerate() {
        if m < k {
            groups[m].push(n_source + j);
        }
    }
    groups
}

/// Separability of the combined source/target dandelion: mean upper-triangle cosine
/// between combined centroids. Smaller is better.
pub fn separability_sp(
    source: &Tensor,
    target: &Tensor,
    source_labels: &[usize],
    memberships: &Membership,
    k: usize,
) -> Result<f64> {
    if k < 2 {
        return Err(Error::InvalidParameter(format!("SP needs K >= 2, got {k}")));
    }
    check_labels(source_labels, source.rows(), k)?;
    if memberships.assignments.len() != target.rows() {
        return Err(Error::shape("memberships", target.rows(), memberships.assignments.len()));
    }
    let all = Tensor::vstack(&[source, target])?;
    let groups = combined_groups(source_labels, memberships, source.rows(), k);
    let present: Vec<Vec<usize>> = groups
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            if g.is_empty() {
                warn!("category {i} has no combined instances; skipped in SP");
                None
            } else {
                Some(g)
            }
        })
        .collect();
    let centroids = category_means(&all, &present);
    separation_loss(&centroids)
}

/// Average of the per-category maximum deviations. Smaller is better.
pub fn average_compactness(features: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let d = fit_dandelion(features, labels, k)?;
    Ok(d.max_dev.iter().sum::<f64>() / k as f64)
}

/// `(SP, average d_max)` on the combined dandelion formed by source labels and target memberships.
pub fn combined_diagnostics(
    source: &Tensor,
    target: &Tensor,
    source_labels: &[usize],
    memberships: &Membership,
    k: usize,
) -> Result<(f64, f64)> {
    let sp = separability_sp(source, target, source_labels, memberships, k)?;
    let keep: Vec<usize> = (0..target.rows())
        .filter(|&j| memberships.assignments[j] < k)
        .collect();
    let features = Tensor::vstack(&[source, &target.select_rows(&keep)])?;
    let labels: Vec<usize> = source_labels
        .iter()
        .copied()
        .chain(keep.iter().map(|&j| memberships.assignments[j]))
        .collect();
    Ok((sp, average_compactness(&features, &labels, k)?))
}
