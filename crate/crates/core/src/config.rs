//! Run configuration and on-disk task descriptions (JSON).
//!
//! Relative paths inside a file are resolved against that file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::AblationGroup;
use crate::data::{
    load_csv_domain, load_feature_selection, make_openset_task, synth_task, DomainTag, LabelPolicy,
    OpenSetTask, Schema, SynthSpec,
};
use crate::error::Result;
use crate::training::HyperParams;

/// Source and target CSV files plus the shared category list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvTask {
    pub source_csv: PathBuf,
    pub target_csv: PathBuf,
    /// Schema for both files unless overridden per domain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_schema: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_schema: Option<PathBuf>,
    pub shared: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<String>,
    /// Files of zero-based column indices to keep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_features: Option<PathBuf>,
    /// Generator settings when the files were written by `osdn synth`; informational only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
}

#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskSpec {
    Synth(SynthSpec),
    Csv(CsvTask),
}

/// A task given inline or as a path to a task file.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TaskRef {
    File(PathBuf),
    Inline(TaskSpec),
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn resolve_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        resolve(base, p);
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

impl TaskSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let mut spec: TaskSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.resolve_paths(&parent_dir(path));
        Ok(spec)
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let TaskSpec::Csv(c) = self {
            resolve(base, &mut c.source_csv);
            resolve(base, &mut c.target_csv);
            for p in [
                &mut c.schema,
                &mut c.source_schema,
                &mut c.target_schema,
                &mut c.source_features,
                &mut c.target_features,
            ] {
                resolve_opt(base, p);
            }
        }
    }

    /// Loads (or generates) the task and applies z-scoring and row normalization.
    pub fn prepare(&self) -> Result<OpenSetTask> {
        match self {
            TaskSpec::Synth(spec) => synth_task(spec)?.preprocessed(None, None),
            TaskSpec::Csv(c) => {
                let schema_for = |own: &Option<PathBuf>| -> Result<Schema> {
                    match own.as_ref().or(c.schema.as_ref()) {
                        Some(p) => Schema::load(p),
                        None => Ok(Schema::default()),
                    }
                };
                let source = load_csv_domain(
                    &c.source_csv,
                    &schema_for(&c.source_schema)?,
                    DomainTag::Source,
                    LabelPolicy::Required,
                )?;
                let target = load_csv_domain(
                    &c.target_csv,
                    &schema_for(&c.target_schema)?,
                    DomainTag::Target,
                    LabelPolicy::Optional,
                )?;
                let task = make_openset_task(&source, &target, &c.shared, c.normal.as_deref())?;
                let sel = |p: &Option<PathBuf>| p.as_deref().map(load_feature_selection).transpose();
                let (ss, ts) = (sel(&c.source_features)?, sel(&c.target_features)?);
                task.preprocessed(ss.as_deref(), ts.as_deref())
            }
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("osdn-run")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskRef,
    #[serde(default)]
    pub hyperparams: HyperParams,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationGroup>,
    /// Seeds for multi-run commands; empty means `[hyperparams.seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn new(task: TaskSpec) -> Self {
        Self {
            task: TaskRef::Inline(task),
            hyperparams: HyperParams::default(),
            output_dir: default_output_dir(),
            ablation: None,
            seeds: Vec::new(),
        }
    }

    /// Parses the file, inlines a referenced task file and makes every path absolute
    /// relative to the file it appeared in.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = parent_dir(path);
        resolve(&base, &mut cfg.output_dir);
        cfg.task = TaskRef::Inline(match cfg.task {
            TaskRef::File(mut p) => {
                resolve(&base, &mut p);
                TaskSpec::load(&p)?
            }
            TaskRef::Inline(mut t) => {
                t.resolve_paths(&base);
                t
            }
        });
        cfg.hyperparams.validate()?;
        Ok(cfg)
    }

    pub fn task_spec(&self) -> Result<TaskSpec> {
        match &self.task {
            TaskRef::Inline(t) => Ok(t.clone()),
            TaskRef::File(p) => TaskSpec::load(p),
        }
    }

    /// Hyperparameters with the ablation group applied.
    pub fn effective_hyperparams(&self) -> HyperParams {
        match self.ablation {
            Some(g) => g.apply(&self.hyperparams),
            None => self.hyperparams.clone(),
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.hyperparams.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// The fully resolved form written next to every run's outputs.
    pub fn resolved(&self) -> Result<Self> {
        Ok(Self {
            task: TaskRef::Inline(self.task_spec()?),
            hyperparams: self.effective_hyperparams(),
            ..self.clone()
        })
    }
}
