//! Loss terms of the training objective.
//!
//! Each term has a plain reference implementation over tensors and a taped
//! counterpart inside [`build_objective`], which is what training differentiates.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dandelion::{build_graph, combined_groups, group_rows, Dandelion, DandelionGraph, Membership};
use crate::embedding::{feather_embed_var, with_origin, FeatherParams, GraphEmbedding};
use crate::error::{Error, Result};
use crate::model::{classify_var, discriminate_var, instance_discriminate_var, Model, ModelVars};
use crate::numerics::{cosine_similarity, cross_entropy, l2_normalize, Tape, Tensor, Var, EPS_CE};

pub const LAMBDA_RANGE: (f64, f64) = (0.4, 0.6);
pub const UNKNOWN_NOISE: f64 = 0.01;
/// Attempts allowed per requested unknown instance.
pub const REJECTION_FACTOR: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_s: f64,
    pub alpha_u: f64,
    pub beta_s: f64,
    pub beta_t: f64,
    pub delta: f64,
    pub theta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_s: 0.8,
            alpha_u: 0.1,
            beta_s: 0.75,
            beta_t: 0.75,
            delta: 0.001,
            theta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            alpha_s: 0.0,
            alpha_u: 0.0,
            beta_s: 0.0,
            beta_t: 0.0,
            delta: 0.0,
            theta: 0.0,
            gamma: 0.0,
        }
    }

    /// Weight of one term.
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::SupS => self.alpha_s,
            LossTerm::SupU => self.alpha_u,
            LossTerm::Ss => self.beta_s,
            LossTerm::St => self.beta_t,
            LossTerm::Ea => self.delta,
            LossTerm::Sc => self.theta,
            LossTerm::Cp => self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for t in LossTerm::ALL {
            let w = self.get(t);
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "loss weight for {} must be finite and >= 0, got {w}",
                    t.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossTerm {
    SupS,
    SupU,
    Ss,
    St,
    Ea,
    Cp,
    Sc,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::SupS,
        LossTerm::SupU,
        LossTerm::Ss,
        LossTerm::St,
        LossTerm::Ea,
        LossTerm::Cp,
        LossTerm::Sc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::SupS => "sup_s",
            LossTerm::SupU => "sup_u",
            LossTerm::Ss => "ss",
            LossTerm::St => "st",
            LossTerm::Ea => "ea",
            LossTerm::Cp => "cp",
            LossTerm::Sc => "sc",
        }
    }
}

/// Component values before weighting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sup_s: f64,
    pub sup_u: f64,
    pub ss: f64,
    pub st: f64,
    pub ea: f64,
    pub cp: f64,
    pub sc: f64,
}

impl LossTerms {
    pub fn get(&self, term: LossTerm) -> f64 {
        match term {
            LossTerm::SupS => self.sup_s,
            LossTerm::SupU => self.sup_u,
            LossTerm::Ss => self.ss,
            LossTerm::St => self.st,
            LossTerm::Ea => self.ea,
            LossTerm::Cp => self.cp,
            LossTerm::Sc => self.sc,
        }
    }

    fn set(&mut self, term: LossTerm, v: f64) {
        match term {
            LossTerm::SupS => self.sup_s = v,
            LossTerm::SupU => self.sup_u = v,
            LossTerm::Ss => self.ss = v,
            LossTerm::St => self.st = v,
            LossTerm::Ea => self.ea = v,
            LossTerm::Cp => self.cp = v,
            LossTerm::Sc => self.sc = v,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sup_s: f64,
    pub sup_u: f64,
    pub ss: f64,
    pub st: f64,
    pub ea: f64,
    pub cp: f64,
    pub sc: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> LossTerms {
        LossTerms {
            sup_s: self.sup_s,
            sup_u: self.sup_u,
            ss: self.ss,
            st: self.st,
            ea: self.ea,
            cp: self.cp,
            sc: self.sc,
        }
    }
}

/// Weighted sum of the components; fails on the first non-finite one.
pub fn total_objective(terms: &LossTerms, weights: &LossWeights) -> Result<LossReport> {
    let mut total = 0.0;
    for t in LossTerm::ALL {
        let v = terms.get(t);
        if !v.is_finite() {
            return Err(Error::NonFinite { term: t.name(), value: v });
        }
        total += weights.get(t) * v;
    }
    Ok(LossReport {
        sup_s: terms.sup_s,
        sup_u: terms.sup_u,
        ss: terms.ss,
        st: terms.st,
        ea: terms.ea,
        cp: terms.cp,
        sc: terms.sc,
        total,
    })
}

pub fn embedding_alignment_loss(phi_s: &[f64], phi_t: &[f64]) -> Result<f64> {
    if phi_s.len() != phi_t.len() {
        return Err(Error::shape("graph embeddings", phi_s.len(), phi_t.len()));
    }
    Ok(phi_s.iter().zip(phi_t).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// For each child, one uniformly drawn member index per group.
pub fn sample_child_indices<R: Rng>(
    groups: &[Vec<usize>],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(Error::EmptyCategory {
            index: i,
            name: format!("fused category {i}"),
        });
    }
    Ok((0..n)
        .map(|_| groups.iter().map(|g| *g.choose(rng).expect("non-empty")).collect())
        .collect())
}

/// Child dandelions drawn from the fused source/target members of every known category.
pub fn sample_child_dandelions(
    source: &Tensor,
    source_labels: &[usize],
    target: &Tensor,
    memberships: &Membership,
    n: usize,
    seed: u64,
) -> Result<Vec<DandelionGraph>> {
    if source_labels.len() != source.rows() {
        return Err(Error::shape("source labels", source.rows(), source_labels.len()));
    }
    if memberships.assignments.len() != target.rows() {
        return Err(Error::shape("memberships", target.rows(), memberships.assignments.len()));
    }
    let fused = Tensor::vstack(&[source, target])?;
    let groups = combined_groups(source_labels, memberships, source.rows(), memberships.k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_child_indices(&groups, n, &mut rng)?
        .into_iter()
        .map(|idx| build_graph(&fused.select_rows(&idx)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscMode {
    /// Adversarial binary cross-entropy.
    #[default]
    Bce,
    /// `½(log D(φ_S) + log D(φ_T)) + (1/N) Σ (1 − log D(φ_c))`, reported only.
    Literal,
}

/// Discriminating loss from discriminator outputs on the real embeddings and the children.
pub fn discriminating_loss_from_outputs(real: &[f64], children: &[f64], mode: DiscMode) -> Result<f64> {
    if real.is_empty() || children.is_empty() {
        return Err(Error::Contract(
            "discriminating loss needs at least one real and one child embedding".into(),
        ));
    }
    if let Some(d) = real.iter().chain(children).find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::Contract(format!("discriminator output {d} outside (0, 1)")));
    }
    let ln = |p: f64| p.max(EPS_CE).ln();
    let real_mean = real.iter().map(|&d| ln(d)).sum::<f64>() / real.len() as f64;
    let n = children.len() as f64;
    Ok(match mode {
        DiscMode::Bce => -(real_mean + children.iter().map(|&d| ln(1.0 - d)).sum::<f64>() / n),
        DiscMode::Literal => real_mean + children.iter().map(|&d| 1.0 - ln(d)).sum::<f64>() / n,
    })
}

pub fn discriminating_loss(
    model: &Model,
    phi_s: &GraphEmbedding,
    phi_t: &GraphEmbedding,
    children: &[GraphEmbedding],
    mode: DiscMode,
) -> Result<f64> {
    let rows = |es: &[&GraphEmbedding]| -> Result<Tensor> {
        let d = model.dims.d_graph;
        let mut data = Vec::with_capacity(es.len() * d);
        for e in es {
            if e.values.len() != d {
                return Err(Error::shape("graph embedding", d, e.values.len()));
            }
            data.extend_from_slice(&e.values);
        }
        Tensor::from_vec(es.len(), d, data)
    };
    let real = model.discriminate(&rows(&[phi_s, phi_t])?)?;
    let kids: Vec<&GraphEmbedding> = children.iter().collect();
    let fake = model.discriminate(&rows(&kids)?)?;
    discriminating_loss_from_outputs(&real, &fake, mode)
}

/// Accepted unknown instances together with the attempts spent on them.
#[derive(Clone, Debug, PartialEq)]
pub struct UnknownDraw {
    pub instances: Tensor,
    pub attempts: usize,
    pub requested: usize,
}

impl UnknownDraw {
    pub fn complete(&self) -> bool {
        self.instances.rows() == self.requested
    }
}

/// True when `x` lies strictly outside every pappus' deviation ball.
pub fn outside_all_pappuses(x: &[f64], dandelion: &Dandelion) -> Result<bool> {
    for m in 0..dandelion.k() {
        if 1.0 - cosine_similarity(x, dandelion.centroids.row(m))? <= dandelion.max_dev[m] {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Rejection sampler that stops at `n_r` acceptances or when the attempt budget runs out.
pub fn draw_unknowns<R: Rng>(dandelion: &Dandelion, n_r: usize, rng: &mut R) -> Result<UnknownDraw> {
    let k = dandelion.k();
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "unknown generation needs K >= 2, got {k}"
        )));
    }
    let d = dandelion.centroids.cols();
    let noise = Normal::new(0.0, UNKNOWN_NOISE).expect("valid sigma");
    let budget = REJECTION_FACTOR * n_r;
    let mut data = Vec::with_capacity(n_r * d);
    let mut accepted = 0;
    let mut attempts = 0;
    while accepted < n_r && attempts < budget {
        attempts += 1;
        let i = rng.random_range(0..k);
        let mut j = rng.random_range(0..k - 1);
        if j >= i {
            j += 1;
        }
        let lambda = rng.random_range(LAMBDA_RANGE.0..=LAMBDA_RANGE.1);
        let mix: Vec<f64> = dandelion
            .centroids
            .row(i)
            .iter()
            .zip(dandelion.centroids.row(j))
            .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
            .collect();
        let Ok(mix) = l2_normalize(&mix) else { continue };
        let noisy: Vec<f64> = mix.iter().map(|a| a + noise.sample(rng)).collect();
        let Ok(x) = l2_normalize(&noisy) else { continue };
        if outside_all_pappuses(&x, dandelion)? {
            data.extend_from_slice(&x);
            accepted += 1;
        }
    }
    Ok(UnknownDraw {
        instances: Tensor::from_vec(accepted, d, data)?,
        attempts,
        requested: n_r,
    })
}

/// Exactly `n_r` unit vectors in the gaps between pappuses.
pub fn generate_unknown_instances(dandelion: &Dandelion, n_r: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = draw_unknowns(dandelion, n_r, &mut rng)?;
    if !draw.complete() {
        return Err(Error::RejectionBudget {
            accepted: draw.instances.rows(),
            requested: n_r,
            attempts: draw.attempts,
        });
    }
    Ok(draw.instances)
}

fn mean_cross_entropy(probs: &Tensor, labels: impl Iterator<Item = usize>) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for (r, l) in labels.enumerate() {
        total += cross_entropy(probs.row(r), l)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// `(sup_s, sup_u)`: mean cross-entropy on the source and on generated unknowns (label `K`).
/// An empty unknown set gives `sup_u = 0`.
pub fn supervision_loss(
    model: &Model,
    projected_source: &Tensor,
    labels: &[usize],
    projected_unknowns: &Tensor,
) -> Result<(f64, f64)> {
    let k = model.dims.k;
    if labels.len() != projected_source.rows() {
        return Err(Error::shape("source labels", projected_source.rows(), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index { index: bad, len: k });
    }
    let ps = model.classify(projected_source)?;
    let sup_s = mean_cross_entropy(&ps, labels.iter().copied())?;
    let sup_u = if projected_unknowns.rows() == 0 {
        0.0
    } else {
        let pu = model.classify(projected_unknowns)?;
        mean_cross_entropy(&pu, std::iter::repeat_n(k, pu.rows()))?
    };
    Ok((sup_s, sup_u))
}

/// Mean class-probability row per known category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticDandelion {
    /// `K × (K + 1)`; absent rows are zero.
    pub pappi: Tensor,
    pub present: Vec<bool>,
}

fn semantic_from_groups(probs: &Tensor, groups: &[Vec<usize>]) -> SemanticDandelion {
    let mut pappi = Tensor::zeros(groups.len(), probs.cols());
    for (i, g) in groups.iter().enumerate() {
        let row = pappi.row_mut(i);
        for &r in g {
            for (o, p) in row.iter_mut().zip(probs.row(r)) {
                *o += p;
            }
        }
        if !g.is_empty() {
            let n = g.len() as f64;
            row.iter_mut().for_each(|o| *o /= n);
        }
    }
    SemanticDandelion {
        pappi,
        present: groups.iter().map(|g| !g.is_empty()).collect(),
    }
}

pub fn semantic_dandelions(
    probs_source: &Tensor,
    source_labels: &[usize],
    probs_target: &Tensor,
    memberships: &Membership,
    k: usize,
) -> Result<(SemanticDandelion, SemanticDandelion)> {
    if source_labels.len() != probs_source.rows() {
        return Err(Error::shape("source labels", probs_source.rows(), source_labels.len()));
    }
    if memberships.assignments.len() != probs_target.rows() {
        return Err(Error::shape("memberships", probs_target.rows(), memberships.assignments.len()));
    }
    if probs_source.cols() != probs_target.cols() {
        return Err(Error::shape("probability rows", probs_source.cols(), probs_target.cols()));
    }
    Ok((
        semantic_from_groups(probs_source, &group_rows(source_labels, k)),
        semantic_from_groups(probs_target, &group_rows(&memberships.assignments, k)),
    ))
}

/// `2 / (K (K + 1)) · Σ_i Σ_{j ≥ i} COS(src_i, tgt_j)` over pairs with both pappi present.
pub fn semantic_correction_loss(
    src: &SemanticDandelion,
    tgt: &SemanticDandelion,
    k: usize,
) -> Result<f64> {
    if src.present.len() != k || tgt.present.len() != k {
        return Err(Error::shape("semantic dandelions", k, src.present.len().min(tgt.present.len())));
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in (0..k).filter(|&i| src.present[i]) {
        for j in (i..k).filter(|&j| tgt.present[j]) {
            total += cosine_similarity(src.pappi.row(i), tgt.pappi.row(j))?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::Contract("no semantic pappus pair with both sides present".into()));
    }
    Ok(2.0 * total / (k * (k + 1)) as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversary {
    /// Discriminator over real and sampled child dandelion embeddings.
    #[default]
    Dandelion,
    /// Instance-level domain discriminator on projected features (source 1, target 0).
    Instance,
}

#[derive(Clone, Debug)]
pub struct ObjectiveSettings<'a> {
    pub weights: LossWeights,
    pub feather: &'a FeatherParams,
    pub grl_lambda: f64,
    pub adversary: Adversary,
}

/// One batch in the common subspace. Memberships, unknowns and child indices are
/// treated as constants.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs<'a> {
    /// Raw source rows.
    pub source: &'a Tensor,
    pub source_labels: &'a [usize],
    /// Raw target rows.
    pub target: &'a Tensor,
    /// Values in `0..=K`, `K` meaning unknown.
    pub memberships: &'a [usize],
    /// Generated unknown instances, already in the common subspace.
    pub unknowns: &'a Tensor,
    /// Per child, `K` row indices into the source rows followed by the target rows.
    pub children: &'a [Vec<usize>],
    pub k: usize,
}

/// Handles of every term recorded on the tape.
#[derive(Clone, Debug)]
pub struct ObjectiveGraph {
    pub terms: Vec<(LossTerm, Var)>,
    pub total: Var,
    /// Adversary outputs for rows with real label 1 and with real label 0.
    pub adversary_real: Vec<f64>,
    pub adversary_fake: Vec<f64>,
    /// The literal discriminating expression, when the dandelion adversary is active.
    pub cp_literal: Option<f64>,
}

impl ObjectiveGraph {
    pub fn term(&self, t: LossTerm) -> Option<Var> {
        self.terms.iter().find(|(x, _)| *x == t).map(|&(_, v)| v)
    }

    pub fn report(&self, tape: &Tape) -> LossReport {
        let mut terms = LossTerms::default();
        for &(t, v) in &self.terms {
            terms.set(t, tape.value(v).data()[0]);
        }
        LossReport {
            sup_s: terms.sup_s,
            sup_u: terms.sup_u,
            ss: terms.ss,
            st: terms.st,
            ea: terms.ea,
            cp: terms.cp,
            sc: terms.sc,
            total: tape.value(self.total).data()[0],
        }
    }

    /// Balanced accuracy of the active adversary at threshold 0.5.
    pub fn adversary_accuracy(&self) -> f64 {
        let hit = |xs: &[f64], real: bool| {
            if xs.is_empty() {
                return 0.5;
            }
            xs.iter().filter(|&&d| (d > 0.5) == real).count() as f64 / xs.len() as f64
        };
        0.5 * (hit(&self.adversary_real, true) + hit(&self.adversary_fake, false))
    }
}

fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Var {
    let an = tape.normalize_rows(a);
    let bn = tape.normalize_rows(b);
    let bt = tape.transpose(bn);
    tape.matmul(an, bt)
}

/// Mean pairwise cosine between the rows of `centroids`; `None` for fewer than two rows.
pub fn separation_var(tape: &mut Tape, centroids: Var) -> Option<Var> {
    let m = tape.shape(centroids).0;
    if m < 2 {
        return None;
    }
    let s = cosine_matrix(tape, centroids, centroids);
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i + 1..m).map(move |j| (i, j))).collect();
    let picked = tape.pick(s, pairs);
    let total = tape.sum(picked);
    Some(tape.scale(total, 2.0 / (m * (m - 1)) as f64))
}

/// Mean of `-log p[r][label_r]` over the listed entries.
fn nll_var(tape: &mut Tape, probs: Var, entries: Vec<(usize, usize)>) -> Var {
    let p = tape.pick(probs, entries);
    let lp = tape.log_clamped(p, EPS_CE);
    let m = tape.mean(lp);
    tape.neg(m)
}

/// `-(Σ w_real · log d + Σ w_fake · log(1 − d))` over a column of probabilities.
fn weighted_bce_var(tape: &mut Tape, d: Var, real_w: Vec<f64>, fake_w: Vec<f64>) -> Var {
    let n = real_w.len();
    let ld = tape.log_clamped(d, EPS_CE);
    let nd = tape.neg(d);
    let om = tape.add_scalar(nd, 1.0);
    let lom = tape.log_clamped(om, EPS_CE);
    let wr = tape.leaf(Tensor::from_vec(n, 1, real_w).expect("weights"));
    let wf = tape.leaf(Tensor::from_vec(n, 1, fake_w).expect("weights"));
    let a = tape.mul(ld, wr);
    let b = tape.mul(lom, wf);
    let s = tape.add(a, b);
    let s = tape.sum(s);
    tape.neg(s)
}

fn check_inputs(vars_dims: (usize, usize), inputs: &ObjectiveInputs) -> Result<()> {
    let (ns, nt) = (inputs.source.rows(), inputs.target.rows());
    if inputs.source_labels.len() != ns {
        return Err(Error::shape("source labels", ns, inputs.source_labels.len()));
    }
    if inputs.memberships.len() != nt {
        return Err(Error::shape("memberships", nt, inputs.memberships.len()));
    }
    let k = inputs.k;
    if let Some(&bad) = inputs.source_labels.iter().find(|&&l| l >= k) {
        return Err(Error::Index { index: bad, len: k });
    }
    if let Some(&bad) = inputs.memberships.iter().find(|&&l| l > k) {
        return Err(Error::Index { index: bad, len: k + 1 });
    }
    if inputs.unknowns.rows() > 0 && inputs.unknowns.cols() != vars_dims.0 {
        return Err(Error::shape("unknown instances", vars_dims.0, inputs.unknowns.cols()));
    }
    for child in inputs.children {
        if child.len() != k {
            return Err(Error::shape("child dandelion", k, child.len()));
        }
        if let Some(&bad) = child.iter().find(|&&r| r >= ns + nt) {
            return Err(Error::Index { index: bad, len: ns + nt });
        }
    }
    if inputs.children.is_empty() && vars_dims.1 == 0 {
        return Err(Error::InvalidParameter("at least one child dandelion is required".into()));
    }
    Ok(())
}

/// Records the full weighted objective on `tape`.
///
/// Source categories must all be present in the batch. Target-side terms that need
/// pseudo-labeled members are left out when too few categories have any.
pub fn build_objective(
    tape: &mut Tape,
    vars: &ModelVars,
    d_common: usize,
    inputs: &ObjectiveInputs,
    settings: &ObjectiveSettings,
) -> Result<ObjectiveGraph> {
    let dandelion_adv = settings.adversary == Adversary::Dandelion;
    check_inputs((d_common, usize::from(!dandelion_adv)), inputs)?;
    settings.weights.validate()?;
    let k = inputs.k;
    let src_groups = group_rows(inputs.source_labels, k);
    if let Some(i) = src_groups.iter().position(Vec::is_empty) {
        return Err(Error::EmptyCategory {
            index: i,
            name: format!("source category {i} in batch"),
        });
    }
    let tgt_groups = group_rows(inputs.memberships, k);
    let tgt_present: Vec<usize> = (0..k).filter(|&i| !tgt_groups[i].is_empty()).collect();
    let tgt_nonempty: Vec<Vec<usize>> = tgt_present.iter().map(|&i| tgt_groups[i].clone()).collect();

    let xs = tape.leaf(inputs.source.clone());
    let xt = tape.leaf(inputs.target.clone());
    let fs = crate::model::project_var(tape, vars, xs, crate::data::DomainTag::Source);
    let ft = crate::model::project_var(tape, vars, xt, crate::data::DomainTag::Target);

    let mut terms = Vec::new();

    let ps = classify_var(tape, vars, fs);
    let entries = inputs.source_labels.iter().enumerate().map(|(r, &l)| (r, l)).collect();
    terms.push((LossTerm::SupS, nll_var(tape, ps, entries)));

    if inputs.unknowns.rows() > 0 {
        let u = tape.leaf(inputs.unknowns.clone());
        let pu = classify_var(tape, vars, u);
        let entries = (0..inputs.unknowns.rows()).map(|r| (r, k)).collect();
        terms.push((LossTerm::SupU, nll_var(tape, pu, entries)));
    }

    let cs = tape.group_mean_rows(fs, src_groups.clone());
    if let Some(v) = separation_var(tape, cs) {
        terms.push((LossTerm::Ss, v));
    }
    let ct = if tgt_present.is_empty() {
        None
    } else {
        Some(tape.group_mean_rows(ft, tgt_nonempty.clone()))
    };
    if let Some(v) = ct.and_then(|ct| separation_var(tape, ct)) {
        terms.push((LossTerm::St, v));
    }

    let vs = with_origin(tape, cs);
    let phi_s = feather_embed_var(tape, vs, settings.feather)?;
    let phi_t = match ct {
        Some(ct) => {
            let vt = with_origin(tape, ct);
            Some(feather_embed_var(tape, vt, settings.feather)?)
        }
        None => None,
    };
    if let Some(phi_t) = phi_t {
        let diff = tape.sub(phi_s, phi_t);
        let sq = tape.mul(diff, diff);
        terms.push((LossTerm::Ea, tape.sum(sq)));
    }

    let (adversary_real, adversary_fake, cp_literal);
    if dandelion_adv {
        let fused = tape.concat_rows(vec![fs, ft]);
        let mut rows: Vec<Var> = vec![phi_s];
        rows.extend(phi_t);
        let n_real = rows.len();
        for child in inputs.children {
            let v = tape.gather_rows(fused, child.clone());
            let v = with_origin(tape, v);
            rows.push(feather_embed_var(tape, v, settings.feather)?);
        }
        let n_fake = rows.len() - n_real;
        let all = tape.concat_rows(rows);
        let rev = tape.grad_reversal(all, settings.grl_lambda);
        let d = discriminate_var(tape, vars, rev);
        let real_w: Vec<f64> = (0..n_real + n_fake)
            .map(|r| if r < n_real { 1.0 / n_real as f64 } else { 0.0 })
            .collect();
        let fake_w: Vec<f64> = (0..n_real + n_fake)
            .map(|r| if r < n_real { 0.0 } else { 1.0 / n_fake as f64 })
            .collect();
        terms.push((LossTerm::Cp, weighted_bce_var(tape, d, real_w, fake_w)));
        let dv = tape.value(d).data();
        adversary_real = dv[..n_real].to_vec();
        adversary_fake = dv[n_real..].to_vec();
        cp_literal = Some(discriminating_loss_from_outputs(
            &adversary_real,
            &adversary_fake,
            DiscMode::Literal,
        )?);
    } else {
        let (ns, nt) = (inputs.source.rows(), inputs.target.rows());
        let all = tape.concat_rows(vec![fs, ft]);
        let rev = tape.grad_reversal(all, settings.grl_lambda);
        let d = instance_discriminate_var(tape, vars, rev);
        let real_w = (0..ns + nt).map(|r| if r < ns { 1.0 / ns as f64 } else { 0.0 }).collect();
        let fake_w = (0..ns + nt)
            .map(|r| if r < ns { 0.0 } else { 1.0 / nt.max(1) as f64 })
            .collect();
        terms.push((LossTerm::Cp, weighted_bce_var(tape, d, real_w, fake_w)));
        let dv = tape.value(d).data();
        adversary_real = dv[..ns].to_vec();
        adversary_fake = dv[ns..].to_vec();
        cp_literal = None;
    }

    if !tgt_present.is_empty() {
        let pt = classify_var(tape, vars, ft);
        let ss = tape.group_mean_rows(ps, src_groups);
        let st = tape.group_mean_rows(pt, tgt_nonempty);
        let m = cosine_matrix(tape, ss, st);
        let pairs: Vec<(usize, usize)> = (0..k)
            .flat_map(|i| {
                tgt_present
                    .iter()
                    .enumerate()
                    .filter(move |&(_, &j)| j >= i)
                    .map(move |(b, _)| (i, b))
            })
            .collect();
        if !pairs.is_empty() {
            let picked = tape.pick(m, pairs);
            let s = tape.sum(picked);
            terms.push((LossTerm::Sc, tape.scale(s, 2.0 / (k * (k + 1)) as f64)));
        }
    }

    let mut parts = Vec::with_capacity(terms.len());
    for &(t, v) in &terms {
        let value = tape.value(v).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite { term: t.name(), value });
        }
        parts.push(tape.scale(v, settings.weights.get(t)));
    }
    let stacked = tape.concat_rows(parts);
    let total = tape.sum(stacked);

    Ok(ObjectiveGraph {
        terms,
        total,
        adversary_real,
        adversary_fake,
        cp_literal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dandelion::fit_dandelion;
    use crate::model::{init_model, Affine, Dims};

    #[test]
    fn alignment_examples() {
        assert_eq!(embedding_alignment_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(embedding_alignment_loss(&[0.3, 0.2], &[0.3, 0.2]).unwrap(), 0.0);
        assert!(embedding_alignment_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn discriminating_midpoint() {
        let bce = discriminating_loss_from_outputs(&[0.5, 0.5], &[0.5; 10], DiscMode::Bce).unwrap();
        assert!((bce - 2.0 * 2f64.ln()).abs() < 1e-12);
        let literal = discriminating_loss_from_outputs(&[0.5, 0.5], &[0.5; 10], DiscMode::Literal).unwrap();
        assert!((literal - (0.5f64.ln() + 1.0 - 0.5f64.ln())).abs() < 1e-12);
        let perfect = discriminating_loss_from_outputs(&[1.0, 1.0], &[0.0; 3], DiscMode::Bce).unwrap();
        assert!(perfect.abs() < 1e-8);
        assert!(discriminating_loss_from_outputs(&[1.5], &[0.5], DiscMode::Bce).is_err());
    }

    #[test]
    fn uniform_classifier_supervision() {
        let dims = Dims { d_source: 3, d_target: 3, d_common: 2, d_graph: 8, k: 4 };
        let mut model = init_model(dims, 1).unwrap();
        model.classifier = Affine::zeros(2, 5);
        let f = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (s, u) = supervision_loss(&model, &f, &[0, 3], &f).unwrap();
        assert!((s - 5f64.ln()).abs() < 1e-12);
        assert!((u - 5f64.ln()).abs() < 1e-12);
        assert!(supervision_loss(&model, &f, &[0, 4], &f).is_err());
    }

    #[test]
    fn semantic_examples() {
        let k = 2;
        let onehot = |i: usize| -> [f64; 3] {
            let mut r = [0.0; 3];
            r[i] = 1.0;
            r
        };
        let probs = Tensor::from_rows(&[onehot(0), onehot(1)]).unwrap();
        let mem = Membership { assignments: vec![0, 1], k };
        let (s, t) = semantic_dandelions(&probs, &[0, 1], &probs, &mem, k).unwrap();
        let v = semantic_correction_loss(&s, &t, k).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);

        let mem = Membership { assignments: vec![2, 2], k };
        let (_, t) = semantic_dandelions(&probs, &[0, 1], &probs, &mem, k).unwrap();
        assert_eq!(t.present, vec![false, false]);
        assert!(semantic_correction_loss(&s, &t, k).is_err());
    }

    #[test]
    fn semantic_single_category() {
        let probs = Tensor::from_rows(&[[0.3, 0.7]]).unwrap();
        let mem = Membership { assignments: vec![0], k: 1 };
        let (s, t) = semantic_dandelions(&probs, &[0], &probs, &mem, 1).unwrap();
        assert_eq!(s.pappi.row(0), &[0.3, 0.7]);
        assert!((semantic_correction_loss(&s, &t, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let terms = LossTerms { sup_s: 1.0, sup_u: 2.0, ss: 0.3, st: 0.1, ea: 4.0, cp: 1.2, sc: 0.5 };
        assert_eq!(total_objective(&terms, &LossWeights::zero()).unwrap().total, 0.0);
        let bad = LossTerms { ea: f64::NAN, ..terms };
        match total_objective(&bad, &LossWeights::default()) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "ea"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn square_dandelion() -> Dandelion {
        let f = Tensor::from_rows(&[
            [1.0, 0.05, 0.0],
            [1.0, -0.05, 0.0],
            [0.0, 1.0, 0.05],
            [0.0, 1.0, -0.05],
            [0.05, 0.0, 1.0],
            [-0.05, 0.0, 1.0],
        ])
        .unwrap();
        fit_dandelion(&f, &[0, 0, 1, 1, 2, 2], 3).unwrap()
    }

    #[test]
    fn unknowns_are_outside_and_unit() {
        let d = square_dandelion();
        let u = generate_unknown_instances(&d, 100, 3).unwrap();
        assert_eq!(u.rows(), 100);
        for r in u.row_iter() {
            assert!((crate::numerics::norm(r) - 1.0).abs() < 1e-12);
            assert!(outside_all_pappuses(r, &d).unwrap());
        }
        assert_eq!(u, generate_unknown_instances(&d, 100, 3).unwrap());
    }

    #[test]
    fn overlapping_pappuses_exhaust_budget() {
        let mut d = square_dandelion();
        d.max_dev = vec![2.0; 3];
        assert!(matches!(
            generate_unknown_instances(&d, 5, 0),
            Err(Error::RejectionBudget { accepted: 0, requested: 5, attempts: 500 })
        ));
    }

    #[test]
    fn children_are_drawn_from_members() {
        let src = Tensor::from_fn(6, 2, |i, j| (i * 2 + j) as f64 + 1.0);
        let tgt = Tensor::from_fn(3, 2, |i, j| -((i * 2 + j) as f64) - 1.0);
        let mem = Membership { assignments: vec![1, 2, 0], k: 2 };
        let kids = sample_child_dandelions(&src, &[0, 1, 0, 1, 0, 1], &tgt, &mem, 10, 4).unwrap();
        assert_eq!(kids.len(), 10);
        let fused = Tensor::vstack(&[&src, &tgt]).unwrap();
        let groups = [vec![0, 2, 4, 8], vec![1, 3, 5, 6]];
        for g in &kids {
            assert_eq!(g.vertices.rows(), 3);
            for (cat, members) in groups.iter().enumerate() {
                assert!(members.iter().any(|&r| fused.row(r) == g.vertices.row(cat)));
            }
        }
        let again = sample_child_dandelions(&src, &[0, 1, 0, 1, 0, 1], &tgt, &mem, 10, 4).unwrap();
        assert_eq!(kids, again);
    }
}
