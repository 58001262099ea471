//! End-to-end optimization with per-epoch dandelion refresh, plus checkpoint and
//! history persistence.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dandelion::{assign_membership, combined_diagnostics, fit_dandelion, group_rows, Membership};
use crate::data::{DomainTag, OpenSetTask};
use crate::embedding::FeatherParams;
use crate::error::{Error, Result};
use crate::model::{init_model, Dims, Model};
use crate::numerics::{Tape, Tensor};
use crate::objective::{
    build_objective, draw_unknowns, sample_child_indices, Adversary, LossReport, LossWeights,
    ObjectiveInputs, ObjectiveSettings,
};

pub const CHECKPOINT_VERSION: u64 = 1;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum BatchMode {
    #[default]
    Full,
    Minibatch { size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub weights: LossWeights,
    /// Child dandelions per step (`N`).
    pub n_children: usize,
    /// Generated unknown instances per epoch (`n_R`).
    pub n_unknown: usize,
    pub d_common: usize,
    pub feather: FeatherParams,
    pub lr: f64,
    pub epochs: usize,
    pub batch: BatchMode,
    pub grl_lambda: f64,
    pub adversary: Adversary,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            n_children: 10,
            n_unknown: 100,
            d_common: 64,
            feather: FeatherParams::default(),
            lr: 1e-3,
            epochs: 200,
            batch: BatchMode::Full,
            grl_lambda: 1.0,
            adversary: Adversary::Dandelion,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.feather.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.n_children == 0 {
            return bad("n_children must be >= 1".into());
        }
        if self.d_common == 0 {
            return bad("d_common must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !self.grl_lambda.is_finite() {
            return bad(format!("grl_lambda must be finite, got {}", self.grl_lambda));
        }
        if let BatchMode::Minibatch { size } = self.batch {
            if size == 0 {
                return bad("minibatch size must be >= 1".into());
            }
        }
        Ok(())
    }

    pub fn dims(&self, d_source: usize, d_target: usize, k: usize) -> Dims {
        Dims {
            d_source,
            d_target,
            d_common: self.d_common,
            d_graph: self.feather.embedding_dim(self.d_common),
            k,
        }
    }
}

/// Features and labels the optimizer sees. Target ground truth never enters here.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainData {
    pub source: Tensor,
    pub source_labels: Vec<usize>,
    pub target: Tensor,
    pub k: usize,
}

impl TrainData {
    pub fn from_task(task: &OpenSetTask) -> Self {
        Self {
            source: task.source.features.clone(),
            source_labels: task.source_labels().to_vec(),
            target: task.target.features.clone(),
            k: task.k(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidParameter(format!(
                "training needs K >= 2 shared categories, got {}",
                self.k
            )));
        }
        if self.source_labels.len() != self.source.rows() {
            return Err(Error::shape("source labels", self.source.rows(), self.source_labels.len()));
        }
        if self.target.rows() == 0 {
            return Err(Error::InvalidParameter("target domain is empty".into()));
        }
        Ok(())
    }
}

/// Geometry of the combined dandelion under the current model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub sp: f64,
    pub avg_dmax: f64,
    pub unknown_fraction: f64,
}

/// Projects both domains and measures SP and average compactness.
pub fn diagnose(model: &Model, data: &TrainData) -> Result<Diagnostics> {
    let fs = model.project(&data.source, DomainTag::Source)?;
    let ft = model.project(&data.target, DomainTag::Target)?;
    let d = fit_dandelion(&fs, &data.source_labels, data.k)?;
    let m = assign_membership(&ft, &d);
    let (sp, avg_dmax) = combined_diagnostics(&fs, &ft, &data.source_labels, &m, data.k)?;
    Ok(Diagnostics {
        sp,
        avg_dmax,
        unknown_fraction: m.unknown_fraction(),
    })
}

/// One row of the history: losses of the step(s) taken in this epoch and the geometry
/// measured at the start of the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossReport,
    pub cp_literal: Option<f64>,
    pub sp: f64,
    pub avg_dmax: f64,
    pub unknown_fraction: f64,
    pub n_generated: usize,
    pub disc_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Measured after the last optimizer step.
    pub final_diagnostics: Option<Diagnostics>,
    /// Wall-clock seconds per epoch; excluded from the history file.
    pub epoch_seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn total_seconds(&self) -> f64 {
        self.epoch_seconds.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64) -> Self {
        let zeros: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, model: &mut Model, grads: &[Tensor]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, p) in model.params_mut().into_iter().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Source rows dealt round-robin per category, target rows dealt evenly, so every
/// batch holds every source category.
fn make_batches(
    data: &TrainData,
    mode: BatchMode,
    rng: &mut ChaCha8Rng,
) -> Vec<(Vec<usize>, Vec<usize>)> {
    let (ns, nt) = (data.source.rows(), data.target.rows());
    let size = match mode {
        BatchMode::Full => return vec![((0..ns).collect(), (0..nt).collect())],
        BatchMode::Minibatch { size } => size,
    };
    let mut groups = group_rows(&data.source_labels, data.k);
    let smallest = groups.iter().map(Vec::len).min().unwrap_or(1).max(1);
    let count = ns.div_ceil(size).clamp(1, smallest);
    let mut batches = vec![(Vec::new(), Vec::new()); count];
    let mut slot = 0;
    for g in &mut groups {
        g.shuffle(rng);
        for &r in g.iter() {
            batches[slot % count].0.push(r);
            slot += 1;
        }
    }
    let mut t: Vec<usize> = (0..nt).collect();
    t.shuffle(rng);
    for (i, r) in t.into_iter().enumerate() {
        batches[i % count].1.push(r);
    }
    for b in &mut batches {
        b.0.sort_unstable();
        b.1.sort_unstable();
    }
    batches
}

/// Runs one epoch: project, fit the source dandelion, freeze memberships, generate
/// unknowns, then one optimizer step per batch.
pub fn train_epoch(
    model: &mut Model,
    data: &TrainData,
    hp: &HyperParams,
    epoch: usize,
    rng: &mut ChaCha8Rng,
    opt: &mut Adam,
) -> Result<EpochRecord> {
    let abort = |e: Error| Error::TrainingAborted {
        epoch,
        source: Box::new(e),
    };
    let k = data.k;
    let fs = model.project(&data.source, DomainTag::Source)?;
    let ft = model.project(&data.target, DomainTag::Target)?;
    let dandelion = fit_dandelion(&fs, &data.source_labels, k).map_err(abort)?;
    let membership: Membership = assign_membership(&ft, &dandelion);
    let (sp, avg_dmax) =
        combined_diagnostics(&fs, &ft, &data.source_labels, &membership, k).map_err(abort)?;
    let draw = draw_unknowns(&dandelion, hp.n_unknown, rng).map_err(abort)?;
    if !draw.complete() {
        warn!(
            "epoch {epoch}: accepted {} of {} unknown instances after {} attempts",
            draw.instances.rows(),
            draw.requested,
            draw.attempts
        );
    }

    let settings = ObjectiveSettings {
        weights: hp.weights,
        feather: &hp.feather,
        grl_lambda: hp.grl_lambda,
        adversary: hp.adversary,
    };
    let batches = make_batches(data, hp.batch, rng);
    let nb = batches.len() as f64;
    let mut loss = LossReport::default();
    let mut cp_literal = Some(0.0);
    let mut disc_accuracy = 0.0;
    for (src_idx, tgt_idx) in &batches {
        let source = data.source.select_rows(src_idx);
        let labels: Vec<usize> = src_idx.iter().map(|&r| data.source_labels[r]).collect();
        let target = data.target.select_rows(tgt_idx);
        let memberships: Vec<usize> = tgt_idx.iter().map(|&r| membership.assignments[r]).collect();
        let fused = crate::dandelion::combined_groups(
            &labels,
            &Membership {
                assignments: memberships.clone(),
                k,
            },
            labels.len(),
            k,
        );
        let children = sample_child_indices(&fused, hp.n_children, rng).map_err(abort)?;
        let inputs = ObjectiveInputs {
            source: &source,
            source_labels: &labels,
            target: &target,
            memberships: &memberships,
            unknowns: &draw.instances,
            children: &children,
            k,
        };
        let mut tape = Tape::new();
        let vars = model.record(&mut tape);
        let graph = build_objective(&mut tape, &vars, model.dims.d_common, &inputs, &settings)
            .map_err(abort)?;
        let report = graph.report(&tape);
        if !report.total.is_finite() {
            return Err(abort(Error::NonFinite {
                term: "total",
                value: report.total,
            }));
        }
        let grads = tape.backward(graph.total).map_err(abort)?;
        let grads: Vec<Tensor> = vars.all().iter().map(|&v| grads.wrt(v)).collect();
        opt.update(model, &grads);

        for (acc, v) in [
            (&mut loss.sup_s, report.sup_s),
            (&mut loss.sup_u, report.sup_u),
            (&mut loss.ss, report.ss),
            (&mut loss.st, report.st),
            (&mut loss.ea, report.ea),
            (&mut loss.cp, report.cp),
            (&mut loss.sc, report.sc),
            (&mut loss.total, report.total),
        ] {
            *acc += v / nb;
        }
        cp_literal = match (cp_literal, graph.cp_literal) {
            (Some(a), Some(b)) => Some(a + b / nb),
            _ => None,
        };
        disc_accuracy += graph.adversary_accuracy() / nb;
    }
    debug!("epoch {epoch}: total {:.6} sp {sp:.4} avg_dmax {avg_dmax:.4}", loss.total);
    Ok(EpochRecord {
        epoch,
        loss,
        cp_literal,
        sp,
        avg_dmax,
        unknown_fraction: membership.unknown_fraction(),
        n_generated: draw.instances.rows(),
        disc_accuracy,
    })
}

/// Seeds both the weight initialization and the training stream from `hp.seed`.
pub fn train(data: &TrainData, hp: &HyperParams) -> Result<(Model, TrainHistory)> {
    hp.validate()?;
    data.validate()?;
    let dims = hp.dims(data.source.cols(), data.target.cols(), data.k);
    let model = init_model(dims, hp.seed)?;
    train_from(model, data, hp)
}

/// Continues from an existing model with fresh optimizer state.
pub fn train_from(mut model: Model, data: &TrainData, hp: &HyperParams) -> Result<(Model, TrainHistory)> {
    hp.validate()?;
    data.validate()?;
    model.validate()?;
    model.check_input(&data.source, DomainTag::Source)?;
    model.check_input(&data.target, DomainTag::Target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    rng.set_stream(1);
    let mut opt = Adam::new(&model, hp.lr);
    let mut history = TrainHistory::default();
    for epoch in 0..hp.epochs {
        let start = Instant::now();
        let rec = train_epoch(&mut model, data, hp, epoch, &mut rng, &mut opt)?;
        history.epoch_seconds.push(start.elapsed().as_secs_f64());
        history.records.push(rec);
    }
    history.final_diagnostics = Some(diagnose(&model, data).map_err(|e| Error::TrainingAborted {
        epoch: hp.epochs,
        source: Box::new(e),
    })?);
    Ok((model, history))
}

pub const HISTORY_COLUMNS: [&str; 15] = [
    "epoch",
    "sup_s",
    "sup_u",
    "ss",
    "st",
    "ea",
    "cp",
    "sc",
    "total",
    "cp_literal",
    "sp",
    "avg_dmax",
    "unknown_fraction",
    "n_generated",
    "disc_accuracy",
];

/// One row per epoch in [`HISTORY_COLUMNS`] order; floats use shortest round-trip form.
pub fn write_history_csv(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_COLUMNS)?;
    for r in &history.records {
        let l = &r.loss;
        let mut row = vec![r.epoch.to_string()];
        row.extend([l.sup_s, l.sup_u, l.ss, l.st, l.ea, l.cp, l.sc, l.total].map(|v| v.to_string()));
        row.push(r.cp_literal.map(|v| v.to_string()).unwrap_or_default());
        row.extend([r.sp, r.avg_dmax, r.unknown_fraction].map(|v| v.to_string()));
        row.push(r.n_generated.to_string());
        row.push(r.disc_accuracy.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u64,
    hyperparams: HyperParams,
    model: Model,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u64,
}

/// JSON with `format_version` first, then the hyperparameters, then dims and weights.
pub fn save_checkpoint(model: &Model, hp: &HyperParams, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        hyperparams: hp.clone(),
        model: model.clone(),
    };
    let mut f = fs::File::create(path)?;
    serde_json::to_writer(&mut f, &ck)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn byte_offset(text: &str, e: &serde_json::Error) -> usize {
    if e.line() == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(e.line() - 1)
        .map(str::len)
        .sum();
    (line_start + e.column().saturating_sub(1)).min(text.len())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, HyperParams)> {
    let text = fs::read_to_string(path)?;
    let parse_err = |e: serde_json::Error| Error::CheckpointParse {
        offset: byte_offset(&text, &e),
        message: e.to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(&text).map_err(parse_err)?;
    let probe: VersionProbe = serde_json::from_value(value.clone()).map_err(|e| Error::CheckpointParse {
        offset: 0,
        message: e.to_string(),
    })?;
    if probe.format_version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: probe.format_version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let ck: Checkpoint = serde_json::from_str(&text).map_err(parse_err)?;
    ck.model.validate()?;
    ck.hyperparams.validate()?;
    Ok((ck.model, ck.hyperparams))
}
