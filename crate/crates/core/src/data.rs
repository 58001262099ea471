//! Dataset loading, preprocessing and open-set task construction.
//!
//! Category labels are zero-based throughout the crate. In an [`OpenSetTask`]
//! the shared categories occupy `0..K` and the collapsed unknown label is `K`
//! (the `K+1`-th class).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, Tensor, EPS_NORM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Domain {
    pub features: Tensor,
    pub labels: Option<Vec<usize>>,
    pub category_names: Vec<String>,
    pub tag: DomainTag,
}

impl Domain {
    pub fn new(
        features: Tensor,
        labels: Option<Vec<usize>>,
        category_names: Vec<String>,
        tag: DomainTag,
    ) -> Result<Self> {
        let d = Domain {
            features,
            labels,
            category_names,
            tag,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        if self.features.rows() == 0 || self.features.cols() == 0 {
            return Err(Error::InvalidParameter(format!(
                "domain must have n >= 1 and d >= 1, got {}x{}",
                self.features.rows(),
                self.features.cols()
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::InvalidParameter("domain features contain non-finite values".into()));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.features.rows() {
                return Err(Error::shape("Domain labels", self.features.rows(), labels.len()));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.category_names.len()) {
                return Err(Error::Index {
                    index: bad,
                    len: self.category_names.len(),
                });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Ignore,
}

/// Sidecar schema for a dataset CSV. Columns absent from `columns` are numeric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default)]
    pub columns: BTreeMap<String, ColumnKind>,
}

fn default_label_column() -> String {
    "label".to_string()
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            label_column: default_label_column(),
            columns: BTreeMap::new(),
        }
    }
}

impl Schema {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn kind(&self, column: &str) -> ColumnKind {
        self.columns.get(column).copied().unwrap_or(ColumnKind::Numeric)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelPolicy {
    Required,
    Optional,
}

pub fn load_csv_domain(
    path: &Path,
    schema: &Schema,
    tag: DomainTag,
    labels: LabelPolicy,
) -> Result<Domain> {
    let dataset_err = |message: String| Error::Dataset {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(dataset_err("empty file or missing header row".into()));
    }
    let label_idx = headers.iter().position(|h| *h == schema.label_column);
    if label_idx.is_none() && labels == LabelPolicy::Required {
        return Err(dataset_err(format!(
            "required label column {:?} not found",
            schema.label_column
        )));
    }

    let records: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>()?;
    if records.is_empty() {
        return Err(dataset_err("no data rows".into()));
    }

    let feature_cols: Vec<(usize, ColumnKind)> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != label_idx)
        .map(|(i, h)| (i, schema.kind(h)))
        .filter(|(_, k)| *k != ColumnKind::Ignore)
        .collect();

    // one-hot vocabularies, sorted for a stable column order
    let mut vocab: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for &(c, kind) in &feature_cols {
        if kind == ColumnKind::Categorical {
            let values: BTreeSet<String> = records.iter().map(|r| r[c].trim().to_string()).collect();
            vocab.insert(c, values.into_iter().collect());
        }
    }
    let width: usize = feature_cols
        .iter()
        .map(|(c, k)| match k {
            ColumnKind::Categorical => vocab[c].len(),
            _ => 1,
        })
        .sum();
    if width == 0 {
        return Err(dataset_err("no feature columns".into()));
    }

    let mut data = Vec::with_capacity(records.len() * width);
    for (row, rec) in records.iter().enumerate() {
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: row + 1,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        for &(c, kind) in &feature_cols {
            let raw = rec[c].trim();
            match kind {
                ColumnKind::Numeric => {
                    let v: f64 = raw.parse().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        row: row + 1,
                        column: headers[c].clone(),
                        message: format!("{raw:?} is not a number"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            row: row + 1,
                            column: headers[c].clone(),
                            message: format!("{raw:?} is not finite"),
                        });
                    }
                    data.push(v);
                }
                ColumnKind::Categorical => {
                    for v in &vocab[&c] {
                        data.push(if v == raw { 1.0 } else { 0.0 });
                    }
                }
                ColumnKind::Ignore => unreachable!(),
            }
        }
    }
    let features = Tensor::from_vec(records.len(), width, data)?;

    let (labels, names) = match label_idx {
        Some(li) => {
            let names: Vec<String> = records
                .iter()
                .map(|r| r[li].trim().to_string())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let labels = records
                .iter()
                .map(|r| names.binary_search(&r[li].trim().to_string()).expect("label in vocabulary"))
                .collect();
            (Some(labels), names)
        }
        None => (None, Vec::new()),
    };
    Domain::new(features, labels, names, tag)
}

/// Writes a domain as CSV with columns `f0..f{d-1}` followed by `label` when labels exist.
pub fn write_csv_domain(domain: &Domain, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..domain.dim()).map(|j| format!("f{j}")).collect();
    if domain.labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..domain.n() {
        let mut rec: Vec<String> = domain.features.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(labels) = &domain.labels {
            rec.push(domain.category_names[labels[i]].clone());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads newline-separated zero-based column indices; blank lines and `#` comments are skipped.
pub fn load_feature_selection(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(line.parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            row: i + 1,
            column: String::new(),
            message: format!("{line:?} is not a column index"),
        })?);
    }
    Ok(out)
}

/// Population z-score of every column; zero-variance columns become all zeros.
pub fn zscore_columns(x: &Tensor) -> Tensor {
    let (n, d) = x.shape();
    let mean = x.mean_rows();
    let mut std = vec![0.0; d];
    for r in x.row_iter() {
        for ((s, &v), &m) in std.iter_mut().zip(r).zip(mean.data()) {
            *s += (v - m) * (v - m);
        }
    }
    std.iter_mut().for_each(|s| *s = (*s / n as f64).sqrt());
    Tensor::from_fn(n, d, |i, j| {
        if std[j] > 0.0 {
            (x.get(i, j) - mean.data()[j]) / std[j]
        } else {
            0.0
        }
    })
}

/// Column selection, column z-scoring, then projection of every row onto the unit sphere.
pub fn preprocess_domain(domain: &Domain, selected: Option<&[usize]>) -> Result<Domain> {
    let x = match selected {
        Some(sel) => {
            if let Some(&bad) = sel.iter().find(|&&j| j >= domain.dim()) {
                return Err(Error::Index {
                    index: bad,
                    len: domain.dim(),
                });
            }
            if sel.is_empty() {
                return Err(Error::InvalidParameter("empty feature selection".into()));
            }
            domain.features.select_cols(sel)
        }
        None => domain.features.clone(),
    };
    let mut z = zscore_columns(&x);
    let mut zero_rows = Vec::new();
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        let n = norm(row);
        if n <= EPS_NORM {
            zero_rows.push(i);
            continue;
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    if !zero_rows.is_empty() {
        return Err(Error::ZeroRows { rows: zero_rows });
    }
    Domain::new(z, domain.labels.clone(), domain.category_names.clone(), domain.tag)
}

/// Paired source/target domains with the target's ground truth held back for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenSetTask {
    /// Labels in `0..K`, ordered like `shared_names`.
    pub source: Domain,
    /// Unlabeled; carries only the shared category names.
    pub target: Domain,
    pub shared_names: Vec<String>,
    /// Number of target categories `K′`, when the target was labeled.
    pub target_category_count: Option<usize>,
    /// Target ground truth collapsed to `0..=K` (`K` = unknown). Evaluation only.
    pub target_truth: Option<Vec<usize>>,
    /// Index of the normal (non-intrusion) category among the shared ones.
    pub normal_category: usize,
}

impl OpenSetTask {
    pub fn k(&self) -> usize {
        self.shared_names.len()
    }

    pub fn unknown_label(&self) -> usize {
        self.k()
    }

    pub fn source_labels(&self) -> &[usize] {
        self.source.labels.as_deref().expect("task source is labeled")
    }

    pub fn preprocessed(
        &self,
        source_sel: Option<&[usize]>,
        target_sel: Option<&[usize]>,
    ) -> Result<Self> {
        Ok(Self {
            source: preprocess_domain(&self.source, source_sel)?,
            target: preprocess_domain(&self.target, target_sel)?,
            ..self.clone()
        })
    }
}

pub fn make_openset_task(
    source: &Domain,
    target: &Domain,
    shared: &[String],
    normal: Option<&str>,
) -> Result<OpenSetTask> {
    if shared.is_empty() {
        return Err(Error::InvalidParameter("shared category list is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for s in shared {
        if !seen.insert(s) {
            return Err(Error::InvalidParameter(format!("duplicate shared category {s:?}")));
        }
    }
    let src_labels = source
        .labels
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("source domain must be labeled".into()))?;
    let k = shared.len();

    let src_map: Vec<Option<usize>> = source
        .category_names
        .iter()
        .map(|n| shared.iter().position(|s| s == n))
        .collect();
    for s in shared {
        if !source.category_names.contains(s) {
            return Err(Error::InvalidParameter(format!(
                "shared category {s:?} absent from source domain"
            )));
        }
    }
    let keep: Vec<usize> = (0..source.n()).filter(|&i| src_map[src_labels[i]].is_some()).collect();
    if keep.len() < source.n() {
        warn!(
            "dropping {} source instances outside the shared categories",
            source.n() - keep.len()
        );
    }
    let source_task = Domain::new(
        source.features.select_rows(&keep),
        Some(keep.iter().map(|&i| src_map[src_labels[i]].unwrap()).collect()),
        shared.to_vec(),
        DomainTag::Source,
    )?;
    for (i, s) in shared.iter().enumerate() {
        if !source_task.labels.as_ref().unwrap().contains(&i) {
            return Err(Error::EmptyCategory {
                index: i,
                name: s.clone(),
            });
        }
    }

    let (target_truth, target_count) = match &target.labels {
        Some(tl) => {
            for s in shared {
                if !target.category_names.contains(s) {
                    return Err(Error::InvalidParameter(format!(
                        "shared category {s:?} absent from target domain"
                    )));
                }
            }
            let map: Vec<usize> = target
                .category_names
                .iter()
                .map(|n| shared.iter().position(|s| s == n).unwrap_or(k))
                .collect();
            let kp = target.category_names.len();
            if kp == k {
                warn!("target has no target-only categories (K' = K = {k}); the task is closed-set");
            }
            (Some(tl.iter().map(|&l| map[l]).collect()), Some(kp))
        }
        None => (None, None),
    };

    let normal_category = match normal {
        Some(name) => shared.iter().position(|s| s == name).ok_or_else(|| {
            Error::InvalidParameter(format!("normal category {name:?} is not shared"))
        })?,
        None => shared.iter().position(|s| s == "normal").unwrap_or(0),
    };

    Ok(OpenSetTask {
        source: source_task,
        target: Domain::new(target.features.clone(), None, shared.to_vec(), DomainTag::Target)?,
        shared_names: shared.to_vec(),
        target_category_count: target_count,
        target_truth,
        normal_category,
    })
}

/// Parameters of the synthetic heterogeneous open-set generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub k: usize,
    pub unknown_count: usize,
    pub n_per_category: usize,
    pub d_source: usize,
    pub d_target: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            k: 4,
            unknown_count: 2,
            n_per_category: 100,
            d_source: 20,
            d_target: 16,
            separation: 2.0,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidParameter(format!(
                "synthetic task needs K >= 2 shared categories, got {}",
                self.k
            )));
        }
        if self.n_per_category == 0 || self.d_source == 0 || self.d_target == 0 {
            return Err(Error::InvalidParameter(
                "n_per_category, d_source and d_target must be >= 1".into(),
            ));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "separation must be positive, got {}",
                self.separation
            )));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.k + self.unknown_count + 2
    }

    pub fn category_names(&self) -> Vec<String> {
        let mut names = vec!["normal".to_string()];
        names.extend((1..self.k).map(|i| format!("attack_{i}")));
        names.extend((1..=self.unknown_count).map(|i| format!("novel_{i}")));
        names
    }
}

/// Spread of instances around their latent prototype.
const LATENT_NOISE: f64 = 0.5;
/// Observation noise added after the linear maps.
const OBS_NOISE: f64 = 0.05;

/// Latent draw behind a synthetic task: prototypes plus per-domain latent instances.
#[derive(Clone, Debug)]
pub struct SynthLatents {
    pub prototypes: Tensor,
    pub source: Tensor,
    pub source_labels: Vec<usize>,
    pub target: Tensor,
    pub target_labels: Vec<usize>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_latents(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> SynthLatents {
    let l = spec.latent_dim();
    let total = spec.k + spec.unknown_count;
    let mut protos = Tensor::zeros(total, l);
    for c in 0..total {
        let mut dir: Vec<f64> = (0..l).map(|_| gaussian(rng)).collect();
        let n = norm(&dir);
        dir.iter_mut().for_each(|v| *v *= spec.separation / n);
        protos.row_mut(c).copy_from_slice(&dir);
    }
    let sample = |cats: usize, rng: &mut ChaCha8Rng| {
        let mut labels: Vec<usize> =
            (0..cats).flat_map(|c| std::iter::repeat_n(c, spec.n_per_category)).collect();
        labels.shuffle(rng);
        let z = Tensor::from_fn(labels.len(), l, |i, j| {
            protos.get(labels[i], j) + LATENT_NOISE * gaussian(rng)
        });
        (z, labels)
    };
    let (source, source_labels) = sample(spec.k, rng);
    let (target, target_labels) = sample(total, rng);
    SynthLatents {
        prototypes: protos,
        source,
        source_labels,
        target,
        target_labels,
    }
}

fn observe(z: &Tensor, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let l = z.cols();
    let scale = 1.0 / (l as f64).sqrt();
    let map = Tensor::from_fn(l, dim, |_, _| gaussian(rng) * scale);
    let offset: Vec<f64> = (0..dim).map(|_| 3.0 * gaussian(rng)).collect();
    let mut x = z.matmul(&map).expect("latent map shape");
    for i in 0..x.rows() {
        for (j, v) in x.row_mut(i).iter_mut().enumerate() {
            *v += offset[j] + OBS_NOISE * gaussian(rng);
        }
    }
    x
}

/// Draws only the latent layer of a synthetic task (same RNG stream as [`synth_domains`]).
pub fn synth_latents(spec: &SynthSpec) -> Result<SynthLatents> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(draw_latents(spec, &mut rng))
}

/// Raw labeled source and target domains plus the shared category names.
pub fn synth_domains(spec: &SynthSpec) -> Result<(Domain, Domain, Vec<String>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lat = draw_latents(spec, &mut rng);
    let xs = observe(&lat.source, spec.d_source, &mut rng);
    let xt = observe(&lat.target, spec.d_target, &mut rng);
    let names = spec.category_names();
    let source = Domain::new(
        xs,
        Some(lat.source_labels),
        names[..spec.k].to_vec(),
        DomainTag::Source,
    )?;
    let target = Domain::new(xt, Some(lat.target_labels), names.clone(), DomainTag::Target)?;
    Ok((source, target, names[..spec.k].to_vec()))
}

/// Synthetic open-set task (raw features; call [`OpenSetTask::preprocessed`] before training).
pub fn synth_task(spec: &SynthSpec) -> Result<OpenSetTask> {
    let (s, t, shared) = synth_domains(spec)?;
    make_openset_task(&s, &t, &shared, Some("normal"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use std::path::PathBuf;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn loads_small_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "x,y,label\n1,2,dos\n3,4,normal\n5,6,dos\n");
        let d = load_csv_domain(&p, &Schema::default(), DomainTag::Source, LabelPolicy::Required).unwrap();
        assert_eq!((d.n(), d.dim()), (3, 2));
        assert_eq!(d.category_names, vec!["dos", "normal"]);
        assert_eq!(d.labels.unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn missing_label_column_is_an_error_when_required() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "x,y\n1,2\n");
        let err = load_csv_domain(&p, &Schema::default(), DomainTag::Source, LabelPolicy::Required);
        assert!(matches!(err, Err(Error::Dataset { .. })));
        let ok = load_csv_domain(&p, &Schema::default(), DomainTag::Target, LabelPolicy::Optional).unwrap();
        assert!(ok.labels.is_none());
    }

    #[test]
    fn non_numeric_cell_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "x,y,label\n1,2,a\n3,abc,b\n");
        match load_csv_domain(&p, &Schema::default(), DomainTag::Source, LabelPolicy::Required) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "");
        assert!(load_csv_domain(&p, &Schema::default(), DomainTag::Source, LabelPolicy::Optional).is_err());
        let p = write(dir.path(), "b.csv", "x,label\n");
        assert!(load_csv_domain(&p, &Schema::default(), DomainTag::Source, LabelPolicy::Optional).is_err());
    }

    #[test]
    fn categorical_columns_are_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.csv", "proto,x,label\ntcp,1,a\nudp,2,a\ntcp,3,b\n");
        let mut schema = Schema::default();
        schema.columns.insert("proto".into(), ColumnKind::Categorical);
        let d = load_csv_domain(&p, &schema, DomainTag::Source, LabelPolicy::Required).unwrap();
        assert_eq!(d.dim(), 3);
        assert_eq!(d.features.row(1), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn zscore_uses_population_std() {
        let x = Tensor::from_rows(&[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]).unwrap();
        let z = zscore_columns(&x);
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (i, e) in expect.iter().enumerate() {
            assert!((z.get(i, 0) - e).abs() < 1e-12);
            assert_eq!(z.get(i, 1), 0.0);
        }
    }

    #[test]
    fn preprocess_selects_and_normalizes() {
        let x = Tensor::from_rows(&[
            [1.0, 9.0, 2.0, 0.0],
            [2.0, 8.0, 7.0, 1.0],
            [4.0, 1.0, 3.0, 5.0],
        ])
        .unwrap();
        let d = Domain::new(x, None, vec![], DomainTag::Target).unwrap();
        let p = preprocess_domain(&d, Some(&[0, 2])).unwrap();
        assert_eq!(p.dim(), 2);
        for r in p.features.row_iter() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
        assert!(matches!(preprocess_domain(&d, Some(&[4])), Err(Error::Index { .. })));
    }

    #[test]
    fn zero_row_after_zscore_is_rejected() {
        // the middle row sits exactly at the column means
        let x = Tensor::from_rows(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]).unwrap();
        let d = Domain::new(x, None, vec![], DomainTag::Target).unwrap();
        match preprocess_domain(&d, None) {
            Err(Error::ZeroRows { rows }) => assert_eq!(rows, vec![1]),
            other => panic!("{other:?}"),
        }
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn toy_domain(cats: &[&str], labels: Vec<usize>, tag: DomainTag) -> Domain {
        let n = labels.len();
        Domain::new(
            Tensor::from_fn(n, 2, |i, j| (i + j) as f64 + 1.0),
            Some(labels),
            names(cats),
            tag,
        )
        .unwrap()
    }

    #[test]
    fn openset_task_counts_and_collapses_unknowns() {
        let s = toy_domain(&["a", "b", "c"], vec![0, 1, 2], DomainTag::Source);
        let t = toy_domain(&["a", "b", "c", "d", "e"], vec![0, 3, 4, 2, 1], DomainTag::Target);
        let task = make_openset_task(&s, &t, &names(&["a", "b", "c"]), None).unwrap();
        assert_eq!(task.k(), 3);
        assert_eq!(task.target_category_count, Some(5));
        // category d is target-only: collapsed to the unknown label K (the K+1-th class)
        assert_eq!(task.target_truth.as_ref().unwrap()[1], 3);
        assert_eq!(task.target_truth.unwrap(), vec![0, 3, 3, 2, 1]);
        assert!(task.target.labels.is_none());
        assert_eq!(task.target.category_names, names(&["a", "b", "c"]));
    }

    #[test]
    fn shared_category_missing_from_target_is_an_error() {
        let s = toy_domain(&["a", "z"], vec![0, 1], DomainTag::Source);
        let t = toy_domain(&["a", "b"], vec![0, 1], DomainTag::Target);
        assert!(make_openset_task(&s, &t, &names(&["a", "z"]), None).is_err());
    }

    #[test]
    fn synth_counts_and_determinism() {
        let spec = SynthSpec::default();
        let task = synth_task(&spec).unwrap();
        assert_eq!((task.source.n(), task.source.dim()), (400, 20));
        assert_eq!((task.target.n(), task.target.dim()), (600, 16));
        assert_eq!(task, synth_task(&spec).unwrap());
        let other = synth_task(&SynthSpec { seed: 8, ..spec.clone() }).unwrap();
        assert_ne!(task.source.features, other.source.features);
    }

    #[test]
    fn synth_rejects_k_below_two() {
        let spec = SynthSpec { k: 1, ..SynthSpec::default() };
        assert!(matches!(synth_task(&spec), Err(Error::InvalidParameter(_))));
    }
}
