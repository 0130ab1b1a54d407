//! Experiment configuration, run outputs and dataset materialization.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::data::{
    gen_permuted_tasks, gen_split_tasks, gen_synthetic_sized, gen_synthetic_tasks, load_idx, ClassOrder,
    LabeledDataset, Split, TaskKind, TaskSequence,
};
use crate::error::{Error, Result};
use crate::metrics::{emit_curves, emit_matrix, parse_bshot_curve, parse_matrix, MetricsReport};
use crate::trainer::{train_sequence, HyperParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            train_per_class: 20,
            test_per_class: 10,
            spread: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSpec {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Keep only the first `max_train` training samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_test: Option<usize>,
}

/// Where the task sequence comes from. Permuted and split sequences are
/// derived from one base dataset (synthetic blobs or an IDX pair); the
/// synthetic kind draws every task independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes_per_task: Option<usize>,
    #[serde(default)]
    pub class_order: ClassOrder,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idx: Option<IdxSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Trunk widths from the input to the feature layer.
    pub layer_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub label: String,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub train: HyperParams,
}

fn field(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.idx) {
            (Some(_), Some(_)) => return Err(field("dataset", "set only one of [dataset.synthetic] and [dataset.idx]")),
            (None, Some(_)) if self.kind == TaskKind::Synthetic => {
                return Err(field("dataset.idx", "not used by kind \"synthetic\""))
            }
            _ => {}
        }
        match self.kind {
            TaskKind::Permuted | TaskKind::Synthetic => match self.tasks {
                None => return Err(field("dataset.tasks", "required for this kind")),
                Some(0) => return Err(field("dataset.tasks", "must be >= 1")),
                _ => {}
            },
            TaskKind::Split => {
                let Some(per) = self.classes_per_task else {
                    return Err(field("dataset.classes_per_task", "required for kind \"split\""));
                };
                if per == 0 {
                    return Err(field("dataset.classes_per_task", "must be >= 1"));
                }
                if let Some(s) = &self.synthetic {
                    if s.classes % per != 0 {
                        return Err(field(
                            "dataset.classes_per_task",
                            format!("{} classes are not divisible by {per}", s.classes),
                        ));
                    }
                    if let Some(t) = self.tasks {
                        if t != s.classes / per {
                            return Err(field(
                                "dataset.tasks",
                                format!("split of {} classes by {per} gives {} tasks, not {t}", s.classes, s.classes / per),
                            ));
                        }
                    }
                }
            }
        }
        if let Some(s) = &self.synthetic {
            for (name, v) in [
                ("classes", s.classes),
                ("dim", s.dim),
                ("train_per_class", s.train_per_class),
                ("test_per_class", s.test_per_class),
            ] {
                if v == 0 {
                    return Err(field(&format!("dataset.synthetic.{name}"), "must be >= 1"));
                }
            }
            if !(s.spread >= 0.0 && s.spread.is_finite()) {
                return Err(field("dataset.synthetic.spread", "must be a finite value >= 0"));
            }
        }
        Ok(())
    }

    fn synthetic_or_default(&self) -> SyntheticSpec {
        self.synthetic.clone().unwrap_or_default()
    }

    fn base_pair(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.idx {
            Some(idx) => {
                let mut train = load_idx(&idx.train_images, &idx.train_labels)?;
                let mut test = load_idx(&idx.test_images, &idx.test_labels)?.with_split(Split::Test);
                if let Some(n) = idx.max_train {
                    train = train.truncate(n)?;
                }
                if let Some(n) = idx.max_test {
                    test = test.truncate(n)?;
                }
                // both splits share the class count of the larger label range
                let classes = train.num_classes().max(test.num_classes());
                let widen = |d: LabeledDataset| {
                    let split = d.split();
                    LabeledDataset::new(d.inputs().clone(), d.labels().to_vec(), classes, split)
                };
                Ok((widen(train)?, widen(test)?))
            }
            None => {
                let s = self.synthetic_or_default();
                gen_synthetic_sized(s.classes, s.dim, s.train_per_class, s.test_per_class, s.spread, self.seed)
            }
        }
    }

    /// Builds the task sequence this spec describes.
    pub fn build(&self) -> Result<TaskSequence> {
        self.validate()?;
        match self.kind {
            TaskKind::Permuted => {
                let (train, test) = self.base_pair()?;
                gen_permuted_tasks(&train, &test, self.tasks.unwrap_or(1), self.seed)
            }
            TaskKind::Split => {
                let (train, test) = self.base_pair()?;
                let seq = gen_split_tasks(
                    &train,
                    &test,
                    self.classes_per_task.unwrap_or(1),
                    self.class_order,
                    self.seed,
                )?;
                if let Some(t) = self.tasks {
                    if t != seq.len() {
                        return Err(field("dataset.tasks", format!("split produced {} tasks, not {t}", seq.len())));
                    }
                }
                Ok(seq)
            }
            TaskKind::Synthetic => {
                let s = self.synthetic_or_default();
                gen_synthetic_tasks(
                    self.tasks.unwrap_or(1),
                    s.classes,
                    s.dim,
                    s.train_per_class,
                    s.test_per_class,
                    s.spread,
                    self.seed,
                )
            }
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let Some(idx) = &mut self.idx {
            for p in [
                &mut idx.train_images,
                &mut idx.train_labels,
                &mut idx.test_images,
                &mut idx.test_labels,
            ] {
                resolve(base, p);
            }
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        let base = base.canonicalize().unwrap_or_else(|_| base.to_path_buf());
        resolve(&base, &mut cfg.out_dir);
        cfg.dataset.resolve_paths(&base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label.trim().is_empty() {
            return Err(field("label", "must not be empty"));
        }
        self.dataset.validate()?;
        let sizes = &self.model.layer_sizes;
        if sizes.len() < 2 {
            return Err(field("model.layer_sizes", "needs an input and at least one layer"));
        }
        if sizes.contains(&0) {
            return Err(field("model.layer_sizes", "entries must be >= 1"));
        }
        if self.dataset.idx.is_none() {
            let dim = self.dataset.synthetic_or_default().dim;
            if sizes[0] != dim {
                return Err(field(
                    "model.layer_sizes",
                    format!("first entry {} does not match the input dim {dim}", sizes[0]),
                ));
            }
        }
        let t = &self.train;
        let m = &t.margin;
        if !(m.m_c >= 0.0 && m.m_c.is_finite()) {
            return Err(field("train.margin.m_c", "must be a finite value >= 0"));
        }
        if !(m.m_t >= 0.0 && m.m_t.is_finite()) {
            return Err(field("train.margin.m_t", "must be a finite value >= 0"));
        }
        if m.m_c + m.m_t >= std::f64::consts::PI {
            return Err(field("train.margin", "m_c + m_t must be < pi"));
        }
        if !(m.s > 0.0 && m.s.is_finite()) {
            return Err(field("train.margin.s", "must be positive"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(field("train.lr", "must be positive"));
        }
        for (name, v) in [
            ("train.batch_size", t.batch_size),
            ("train.ref_batch_size", t.ref_batch()),
            ("train.quota", t.quota),
            ("train.epochs_per_task", t.epochs_per_task),
        ] {
            if v == 0 {
                return Err(field(name, "must be >= 1"));
            }
        }
        Ok(())
    }

    /// The config as written to `manifest.toml`: every default made explicit.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        cfg.train.ref_batch_size = Some(self.train.ref_batch());
        if cfg.dataset.idx.is_none() && cfg.dataset.synthetic.is_none() {
            cfg.dataset.synthetic = Some(SyntheticSpec::default());
        }
        cfg
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Paths and metrics of a finished run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub report: MetricsReport,
}

pub const MATRIX_FILE: &str = "matrix.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const CURVES_FILE: &str = "curves.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_FILE: &str = "state.ckpt";

/// Trains the configured sequence and writes the matrix, metrics, curves,
/// manifest and final checkpoint into `out_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let seq = cfg.dataset.build()?;
    if cfg.model.layer_sizes[0] != seq.input_dim() {
        return Err(field(
            "model.layer_sizes",
            format!(
                "first entry {} does not match the input dim {}",
                cfg.model.layer_sizes[0],
                seq.input_dim()
            ),
        ));
    }
    log::info!("{}: {} tasks, mode {}", cfg.label, seq.len(), cfg.train.loss_mode);
    let outcome = train_sequence(seq.tasks(), &cfg.model.layer_sizes, &cfg.train)?;

    // metrics come from the written text so that re-reading the files
    // reproduces them exactly
    let matrix_text = emit_matrix(&outcome.matrix);
    let matrix = parse_matrix(&matrix_text)?;
    let trend = crate::metrics::accuracy_trend(&matrix);
    let curves_text = emit_curves(&trend, Some(&outcome.curve));
    let curve = parse_bshot_curve(&curves_text)?;
    let report = MetricsReport::compute(&matrix, Some(&curve));

    let mut metrics = report.to_json();
    metrics["label"] = json!(cfg.label);
    metrics["loss_mode"] = json!(cfg.train.loss_mode.as_str());
    metrics["use_ed"] = json!(cfg.train.use_ed && cfg.train.loss_mode.replays());
    metrics["seed"] = json!(cfg.train.seed);

    fs::create_dir_all(&cfg.out_dir)?;
    let out = &cfg.out_dir;
    fs::write(out.join(MATRIX_FILE), matrix_text)?;
    fs::write(out.join(CURVES_FILE), curves_text)?;
    fs::write(
        out.join(METRICS_FILE),
        serde_json::to_string_pretty(&metrics).map_err(|e| Error::Config(e.to_string()))? + "\n",
    )?;
    let manifest = format!(
        "# resolved run configuration; rerun with `mdmt train --config {MANIFEST_FILE}`\n{}",
        cfg.to_toml()?
    );
    fs::write(out.join(MANIFEST_FILE), manifest)?;
    checkpoint::save(&outcome.state, &out.join(CHECKPOINT_FILE))?;
    Ok(RunSummary {
        out_dir: cfg.out_dir.clone(),
        report,
    })
}

pub const DEFAULT_LCA_BETA: usize = 10;

/// Metrics of a matrix file, with LCA when a curve file is given. Without an
/// explicit `beta`, LCA uses the first ten shots (or all recorded ones).
pub fn eval_matrix(matrix_path: &Path, curve_path: Option<&Path>, beta: Option<usize>) -> Result<MetricsReport> {
    let with_path = |path: &Path, e: Error| match e {
        Error::Parse { line, msg } => Error::Data {
            path: path.to_path_buf(),
            msg: format!("line {line}: {msg}"),
        },
        Error::Input(msg) => Error::Data {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    };
    let text = fs::read_to_string(matrix_path).map_err(|e| Error::Data {
        path: matrix_path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let matrix = parse_matrix(&text).map_err(|e| with_path(matrix_path, e))?;
    let curve = match curve_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Data {
                path: p.to_path_buf(),
                msg: e.to_string(),
            })?;
            let curve = parse_bshot_curve(&text).map_err(|e| with_path(p, e))?;
            let beta = beta.unwrap_or(DEFAULT_LCA_BETA.min(curve.beta()));
            Some(curve.truncate(beta).map_err(|e| with_path(p, e))?)
        }
        None => None,
    };
    Ok(MetricsReport::compute(&matrix, curve.as_ref()))
}

/// Record of one permuted task in a data manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermutationRecord {
    pub task: usize,
    pub permutation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSetRecord {
    pub task: usize,
    pub classes: Vec<usize>,
}

/// `manifest.toml` written by [`gen_data`]: the generating spec plus what it
/// produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub dataset: DatasetSpec,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub permutations: Vec<PermutationRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub class_sets: Vec<ClassSetRecord>,
}

impl DataManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_end())))
    }
}

pub fn task_file(t: usize, split: Split) -> String {
    format!("task_{t}_{}.csv", split.as_str())
}

/// Writes `task_{t}_train.csv` / `task_{t}_test.csv` for every task and a
/// manifest from which the same files can be regenerated.
pub fn gen_data(spec: &DatasetSpec, out_dir: &Path) -> Result<DataManifest> {
    let mut spec = spec.clone();
    if spec.idx.is_none() && spec.synthetic.is_none() {
        spec.synthetic = Some(SyntheticSpec::default());
    }
    let seq = spec.build()?;
    fs::create_dir_all(out_dir)?;
    for (i, task) in seq.tasks().iter().enumerate() {
        fs::write(out_dir.join(task_file(i + 1, Split::Train)), task.train.to_csv())?;
        fs::write(out_dir.join(task_file(i + 1, Split::Test)), task.test.to_csv())?;
    }
    let manifest = DataManifest {
        dataset: spec,
        permutations: seq
            .permutations()
            .iter()
            .enumerate()
            .map(|(i, p)| PermutationRecord {
                task: i + 1,
                permutation: p.clone(),
            })
            .collect(),
        class_sets: seq
            .class_sets()
            .iter()
            .enumerate()
            .map(|(i, c)| ClassSetRecord {
                task: i + 1,
                classes: c.clone(),
            })
            .collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out_dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONFIG: &str = r#"
label = "tiny"
out_dir = "out"

[dataset]
kind = "permuted"
tasks = 2
seed = 3

[dataset.synthetic]
classes = 3
dim = 6
train_per_class = 4
test_per_class = 2
spread = 0.1

[model]
layer_sizes = [6, 5, 4]

[train]
lr = 0.1
lca_beta = 2
quota = 3

[train.margin]
m_c = 0.01
m_t = 0.1
s = 4.0
"#;

    #[test]
    fn parses_and_validates() {
        let cfg = ExperimentConfig::from_toml_str(CONFIG).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.batch_size, 10);
        assert_eq!(cfg.train.margin.s, 4.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = CONFIG.replace("lr = 0.1", "lr = 0.1\nmomentum = 0.9");
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains("momentum"), "{err}");
    }

    #[test]
    fn errors_name_the_field() {
        let bad = [
            ("lr = 0.1", "lr = -1.0", "train.lr"),
            ("m_c = 0.01", "m_c = 3.1", "train.margin"),
            ("layer_sizes = [6, 5, 4]", "layer_sizes = [7, 5, 4]", "model.layer_sizes"),
            ("tasks = 2", "tasks = 0", "dataset.tasks"),
            ("spread = 0.1", "spread = -0.1", "dataset.synthetic.spread"),
        ];
        for (from, to, path) in bad {
            let cfg = ExperimentConfig::from_toml_str(&CONFIG.replace(from, to)).unwrap();
            let err = cfg.validate().unwrap_err().to_string();
            assert!(err.contains(path), "{err}");
        }
    }

    #[test]
    fn manifest_reloads_to_the_resolved_config() {
        let cfg = ExperimentConfig::from_toml_str(CONFIG).unwrap().resolved();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn split_spec_checks_divisibility() {
        let text = CONFIG
            .replace("kind = \"permuted\"\ntasks = 2", "kind = \"split\"\nclasses_per_task = 2");
        let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("dataset.classes_per_task"), "{err}");
    }
}
