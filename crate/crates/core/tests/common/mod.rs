//! Shared fixtures and independent reference implementations for the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use osdn::dandelion::{fit_dandelion, Dandelion};
use osdn::data::{synth_task, SynthSpec};
use osdn::embedding::FeatherParams;
use osdn::model::{init_model, Dims, Model};
use osdn::numerics::{Tape, Tensor};
use osdn::objective::{
    build_objective, draw_unknowns, sample_child_indices, Adversary, LossTerm, LossWeights,
    ObjectiveInputs, ObjectiveSettings,
};
use osdn::training::TrainData;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for the relative error, so entries whose true gradient is
/// numerically zero are judged by an absolute error of `FD_TOL * FD_FLOOR`.
pub const FD_FLOOR: f64 = 1e-6;

/// A frozen random instance: model, raw data and the per-epoch constants.
pub struct GradInstance {
    pub model: Model,
    pub source: Tensor,
    pub source_labels: Vec<usize>,
    pub target: Tensor,
    pub memberships: Vec<usize>,
    pub unknowns: Tensor,
    pub children: Vec<Vec<usize>>,
    pub k: usize,
    pub feather: FeatherParams,
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    for r in 0..rows {
        let n = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    t
}

/// K=3, d_C=8, n=30 per domain, N=3 children, up to n_R=10 unknowns.
pub fn grad_instance(seed: u64) -> GradInstance {
    let (k, d_s, d_t, d_c, n) = (3, 6, 5, 8, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let feather = FeatherParams::default();
    let dims = Dims {
        d_source: d_s,
        d_target: d_t,
        d_common: d_c,
        d_graph: feather.embedding_dim(d_c),
        k,
    };
    let model = init_model(dims, seed).unwrap();
    let source = unit_rows(n, d_s, &mut rng);
    let source_labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let target = unit_rows(n, d_t, &mut rng);
    // every category gets members, plus a few unknowns
    let memberships: Vec<usize> = (0..n).map(|i| if i % 7 == 6 { k } else { i % k }).collect();
    let fs = model.project(&source, osdn::data::DomainTag::Source).unwrap();
    let dandelion = fit_dandelion(&fs, &source_labels, k).unwrap();
    let mut unknowns = draw_unknowns(&dandelion, 10, &mut rng).unwrap().instances;
    if unknowns.rows() == 0 {
        unknowns = unit_rows(10, d_c, &mut rng);
    }
    let mut groups = vec![Vec::new(); k];
    for (i, &l) in source_labels.iter().enumerate() {
        groups[l].push(i);
    }
    for (j, &m) in memberships.iter().enumerate() {
        if m < k {
            groups[m].push(n + j);
        }
    }
    let children = sample_child_indices(&groups, 3, &mut rng).unwrap();
    GradInstance {
        model,
        source,
        source_labels,
        target,
        memberships,
        unknowns,
        children,
        k,
        feather,
    }
}

impl GradInstance {
    pub fn settings(&self, weights: LossWeights, adversary: Adversary) -> ObjectiveSettings<'_> {
        ObjectiveSettings {
            weights,
            feather: &self.feather,
            grl_lambda: 1.0,
            adversary,
        }
    }

    fn inputs(&self) -> ObjectiveInputs<'_> {
        ObjectiveInputs {
            source: &self.source,
            source_labels: &self.source_labels,
            target: &self.target,
            memberships: &self.memberships,
            unknowns: &self.unknowns,
            children: &self.children,
            k: self.k,
        }
    }

    pub fn value(&self, model: &Model, settings: &ObjectiveSettings) -> f64 {
        let mut tape = Tape::new();
        let vars = model.record(&mut tape);
        let g = build_objective(&mut tape, &vars, model.dims.d_common, &self.inputs(), settings).unwrap();
        tape.value(g.total).data()[0]
    }

    pub fn analytic(&self, settings: &ObjectiveSettings) -> Vec<Tensor> {
        let mut tape = Tape::new();
        let vars = self.model.record(&mut tape);
        let g = build_objective(&mut tape, &vars, self.model.dims.d_common, &self.inputs(), settings)
            .unwrap();
        let grads = tape.backward(g.total).unwrap();
        vars.all().iter().map(|&v| grads.wrt(v)).collect()
    }
}

/// Only `term` switched on, with unit weight.
pub fn only(term: LossTerm) -> LossWeights {
    let mut w = LossWeights::zero();
    match term {
        LossTerm::SupS => w.alpha_s = 1.0,
        LossTerm::SupU => w.alpha_u = 1.0,
        LossTerm::Ss => w.beta_s = 1.0,
        LossTerm::St => w.beta_t = 1.0,
        LossTerm::Ea => w.delta = 1.0,
        LossTerm::Cp => w.gamma = 1.0,
        LossTerm::Sc => w.theta = 1.0,
    }
    w
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

impl GradReport {
    pub fn pass_fraction(&self) -> f64 {
        self.passed as f64 / self.checked as f64
    }
}

/// Central differences over every parameter entry. Parameters upstream of the
/// gradient reversal (the two projectors) carry `-λ` times the true gradient when
/// `reversed` is set.
pub fn check_gradients(inst: &GradInstance, settings: &ObjectiveSettings, reversed: bool) -> GradReport {
    let analytic = inst.analytic(settings);
    let mut report = GradReport::default();
    let mut model = inst.model.clone();
    for p in 0..10 {
        let sign = if reversed && p < 4 { -settings.grl_lambda } else { 1.0 };
        for e in 0..analytic[p].len() {
            let orig = model.params()[p].data()[e];
            model.params_mut()[p].data_mut()[e] = orig + FD_STEP;
            let up = inst.value(&model, settings);
            model.params_mut()[p].data_mut()[e] = orig - FD_STEP;
            let down = inst.value(&model, settings);
            model.params_mut()[p].data_mut()[e] = orig;
            let fd = sign * (up - down) / (2.0 * FD_STEP);
            let err = rel_err(analytic[p].data()[e], fd);
            report.checked += 1;
            if err <= FD_TOL {
                report.passed += 1;
            }
            report.worst = report.worst.max(err);
        }
    }
    report
}

/// Brute-force dandelion, computed with plain loops.
pub fn brute_dandelion(x: &Tensor, labels: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = x.cols();
    let mut mu = vec![vec![0.0; d]; k];
    let mut cnt = vec![0usize; k];
    for (r, &l) in labels.iter().enumerate() {
        cnt[l] += 1;
        for c in 0..d {
            mu[l][c] += x.get(r, c);
        }
    }
    for i in 0..k {
        for c in 0..d {
            mu[i][c] /= cnt[i] as f64;
        }
    }
    let mut dmax = vec![0.0f64; k];
    for (r, &l) in labels.iter().enumerate() {
        dmax[l] = dmax[l].max(1.0 - brute_cos(x.row(r), &mu[l]));
    }
    (mu, dmax)
}

pub fn brute_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

pub fn brute_dandelion_struct(x: &Tensor, labels: &[usize], k: usize) -> Dandelion {
    let (mu, dmax) = brute_dandelion(x, labels, k);
    let rows: Vec<f64> = mu.concat();
    Dandelion {
        centroids: Tensor::from_vec(k, x.cols(), rows).unwrap(),
        max_dev: dmax,
        counts: (0..k).map(|i| labels.iter().filter(|&&l| l == i).count()).collect(),
    }
}

/// The synthetic task used for the end-to-end criteria, preprocessed.
pub fn synth_data(seed: u64) -> (osdn::data::OpenSetTask, TrainData) {
    let spec = SynthSpec {
        k: 4,
        unknown_count: 2,
        n_per_category: 100,
        d_source: 20,
        d_target: 16,
        separation: 2.0,
        seed,
    };
    let task = synth_task(&spec).unwrap().preprocessed(None, None).unwrap();
    let data = TrainData::from_task(&task);
    (task, data)
}

/// Membership by exhaustive comparison against every centroid.
pub fn brute_membership(target: &Tensor, mu: &[Vec<f64>], dmax: &[f64]) -> Vec<usize> {
    let k = mu.len();
    let mut out = Vec::new();
    for r in 0..target.rows() {
        let devs: Vec<f64> = mu.iter().map(|m| 1.0 - brute_cos(target.row(r), m)).collect();
        let mut best = 0;
        for i in 1..k {
            if devs[i] < devs[best] {
                best = i;
            }
        }
        out.push(if devs[best] <= dmax[best] { best } else { k });
    }
    out
}

pub fn brute_separation(rows: &[Vec<f64>]) -> f64 {
    let k = rows.len();
    let mut s = 0.0;
    let mut pairs = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i < j {
                s += brute_cos(&rows[i], &rows[j]);
                pairs += 1.0;
            }
        }
    }
    s / pairs
}

/// Mean of the given rows of `x`, as a plain vector.
fn brute_mean(x: &Tensor, rows: &[usize]) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for &r in rows {
        for c in 0..x.cols() {
            m[c] += x.get(r, c);
        }
    }
    m.iter().map(|v| v / rows.len() as f64).collect()
}

/// Semantic correction from raw probabilities, labels and memberships.
pub fn brute_sc(ps: &Tensor, ys: &[usize], pt: &Tensor, mt: &[usize], k: usize) -> f64 {
    let rows_of = |labels: &[usize], c: usize| -> Vec<usize> {
        (0..labels.len()).filter(|&r| labels[r] == c).collect()
    };
    let mut s = 0.0;
    for i in 0..k {
        let si = rows_of(ys, i);
        if si.is_empty() {
            continue;
        }
        for j in i..k {
            let tj = rows_of(mt, j);
            if tj.is_empty() {
                continue;
            }
            s += brute_cos(&brute_mean(ps, &si), &brute_mean(pt, &tj));
        }
    }
    s * 2.0 / (k * (k + 1)) as f64
}

/// SP: combined per-category means, then mean pairwise cosine over categories present.
pub fn brute_sp(xs: &Tensor, ys: &[usize], xt: &Tensor, mt: &[usize], k: usize) -> f64 {
    let mut mus = Vec::new();
    for c in 0..k {
        let mut sum = vec![0.0; xs.cols()];
        let mut n = 0.0;
        for (x, labels) in [(xs, ys), (xt, mt)] {
            for r in 0..x.rows() {
                if labels[r] == c {
                    for d in 0..x.cols() {
                        sum[d] += x.get(r, d);
                    }
                    n += 1.0;
                }
            }
        }
        if n > 0.0 {
            mus.push(sum.iter().map(|v| v / n).collect());
        }
    }
    brute_separation(&mus)
}

/// (accuracy, weighted precision, weighted recall, weighted F1) from a full confusion matrix,
/// using the literal support-weighted recall.
pub fn brute_metrics(pred: &[usize], truth: &[usize], binary_normal: Option<usize>, k: usize) -> [f64; 4] {
    let map = |l: usize| match binary_normal {
        Some(nc) => usize::from(l != nc),
        None => l,
    };
    let c = if binary_normal.is_some() { 2 } else { k + 1 };
    let mut conf = vec![vec![0usize; c]; c];
    for (&p, &t) in pred.iter().zip(truth) {
        conf[map(t)][map(p)] += 1;
    }
    let n = truth.len() as f64;
    let diag: usize = (0..c).map(|i| conf[i][i]).sum();
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for i in 0..c {
        let support: usize = conf[i].iter().sum();
        let predicted: usize = (0..c).map(|t| conf[t][i]).sum();
        let tp = conf[i][i] as f64;
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if support == 0 { 0.0 } else { tp / support as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let w = support as f64 / n;
        wp += w * p;
        wr += w * r;
        wf += w * f;
    }
    [diag as f64 / n, wp, wr, wf]
}

/// Random unit rows, exposed for the property tests.
pub fn random_unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    unit_rows(rows, cols, rng)
}

/// Worst absolute difference (or mismatch count for discrete outputs) against an oracle.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn random_labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // first k rows cover every category
    (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect()
}

fn random_probs(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::from_fn(n, c, |_, _| rng.random_range(-3.0..3.0f64).exp());
    for r in 0..n {
        let s: f64 = t.row(r).iter().sum();
        t.row_mut(r).iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// Target rows: half are jittered copies of source rows, half are random directions.
fn random_target(source: &Tensor, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let d = source.cols();
    let noise = rng.random_range(0.01..0.5);
    let mut t = Tensor::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    for r in 0..n {
        if r % 2 == 0 {
            let src = rng.random_range(0..source.rows());
            for c in 0..d {
                let v = source.get(src, c) + noise * t.get(r, c);
                t.set(r, c, v);
            }
        }
        let nr = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        t.row_mut(r).iter_mut().for_each(|v| *v /= nr);
    }
    t
}

pub fn oracle_suite(instances: usize) -> Vec<OracleResult> {
    use osdn::dandelion::{assign_membership, separability_sp, separation_loss, Membership};
    use osdn::evaluation::{compute_metrics, EvalMode};
    use osdn::objective::{semantic_correction_loss, semantic_dandelions};

    let mut worst = [0.0f64; 5];
    for seed in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let k = rng.random_range(2..7);
        let d = rng.random_range(2..10);
        let ns = rng.random_range(k..40);
        let nt = rng.random_range(1..40);
        let xs = unit_rows(ns, d, &mut rng);
        let ys = random_labels(ns, k, &mut rng);
        let xt = random_target(&xs, nt, &mut rng);

        let fitted = fit_dandelion(&xs, &ys, k).unwrap();
        let (mu, dmax) = brute_dandelion(&xs, &ys, k);
        let mut dev: f64 = 0.0;
        for i in 0..k {
            dev = dev.max((fitted.max_dev[i] - dmax[i]).abs());
            for c in 0..d {
                dev = dev.max((fitted.centroids.get(i, c) - mu[i][c]).abs());
            }
        }
        let got = assign_membership(&xt, &fitted);
        let want = brute_membership(&xt, &mu, &dmax);
        let mismatches = got.assignments.iter().zip(&want).filter(|(a, b)| a != b).count();
        worst[0] = worst[0].max(dev).max(mismatches as f64);

        worst[1] = worst[1].max((separation_loss(&fitted.centroids).unwrap() - brute_separation(&mu)).abs());

        let memberships = Membership {
            assignments: want.clone(),
            k,
        };
        let sp = separability_sp(&xs, &xt, &ys, &memberships, k).unwrap();
        worst[3] = worst[3].max((sp - brute_sp(&xs, &ys, &xt, &want, k)).abs());

        // arbitrary memberships, including absent categories and unknowns
        let mt: Vec<usize> = (0..nt).map(|_| rng.random_range(0..=k)).collect();
        let ps = random_probs(ns, k + 1, &mut rng);
        let pt = random_probs(nt, k + 1, &mut rng);
        let mem = Membership {
            assignments: mt.clone(),
            k,
        };
        if mt.iter().any(|&m| m < k) {
            let (s, t) = semantic_dandelions(&ps, &ys, &pt, &mem, k).unwrap();
            let sc = semantic_correction_loss(&s, &t, k).unwrap();
            worst[2] = worst[2].max((sc - brute_sc(&ps, &ys, &pt, &mt, k)).abs());
        }

        let n = rng.random_range(1..200);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..=k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..=k)).collect();
        let normal = rng.random_range(0..k);
        for (mode, bin) in [(EvalMode::Acc, None), (EvalMode::Ind, Some(normal))] {
            let m = compute_metrics(&pred, &truth, mode, normal, k).unwrap();
            let b = brute_metrics(&pred, &truth, bin, k);
            for (x, y) in [m.accuracy, m.precision, m.recall, m.f1].iter().zip(b) {
                worst[4] = worst[4].max((x - y).abs());
            }
        }
    }
    ["assign_membership", "separation_loss", "semantic_correction_loss", "separability_sp", "compute_metrics"]
        .into_iter()
        .zip(worst)
        .map(|(name, worst)| OracleResult { name, instances, worst })
        .collect()
}

/// Draws where weighted recall and accuracy differ, over `draws` random draws in both modes.
pub fn recall_identity_violations(draws: usize) -> usize {
    use osdn::evaluation::{compute_metrics, EvalMode};
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut bad = 0;
    for _ in 0..draws {
        let k = rng.random_range(1..8);
        let n = rng.random_range(1..300);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..=k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..=k)).collect();
        let normal = rng.random_range(0..k);
        for mode in EvalMode::ALL {
            let m = compute_metrics(&pred, &truth, mode, normal, k).unwrap();
            if m.recall != m.accuracy {
                bad += 1;
            }
        }
    }
    bad
}

/// Central differences of `Σ c_i φ_i` with respect to the dandelion centroids.
pub fn embedding_gradient_check(seed: u64, k: usize, d: usize) -> GradReport {
    use osdn::embedding::{feather_embed_var, with_origin};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = FeatherParams::default();
    let centroids = Tensor::from_fn(k, d, |_, _| rng.random_range(-0.5..0.5));
    let weights = Tensor::from_fn(1, params.embedding_dim(d), |_, _| rng.random_range(-1.0..1.0));
    let value = |c: &Tensor| -> (f64, Option<Tensor>) {
        let mut tape = Tape::new();
        let cv = tape.leaf(c.clone());
        let verts = with_origin(&mut tape, cv);
        let phi = feather_embed_var(&mut tape, verts, &params).unwrap();
        let w = tape.leaf(weights.clone());
        let prod = tape.mul(phi, w);
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        (tape.value(loss).data()[0], Some(grads.wrt(cv)))
    };
    let analytic = value(&centroids).1.unwrap();
    let mut report = GradReport::default();
    let mut c = centroids.clone();
    for e in 0..c.len() {
        let orig = c.data()[e];
        c.data_mut()[e] = orig + FD_STEP;
        let up = value(&c).0;
        c.data_mut()[e] = orig - FD_STEP;
        let down = value(&c).0;
        c.data_mut()[e] = orig;
        let err = rel_err(analytic.data()[e], (up - down) / (2.0 * FD_STEP));
        report.checked += 1;
        if err <= FD_TOL {
            report.passed += 1;
        }
        report.worst = report.worst.max(err);
    }
    report
}
