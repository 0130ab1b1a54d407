//! Labelled datasets and deterministic task-sequence construction.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Inputs (one sample per row) with class labels in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

impl LabeledDataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Input("dataset must contain at least one sample".into()));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::Input(format!(
                "{} inputs but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            split,
        })
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows picked by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let inputs = self.inputs.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(inputs, labels, self.num_classes, self.split)
    }

    /// The first `n` samples (or all of them).
    pub fn truncate(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// One `label,x_1,...,x_dim` line per sample after a `#` header carrying
    /// the class count and split. Values use the shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# classes={} split={} dim={}\n",
            self.num_classes,
            self.split.as_str(),
            self.dim()
        );
        for (row, label) in self.inputs.outer_iter().zip(&self.labels) {
            out.push_str(&label.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty dataset file".into(),
        })?;
        let header_err = |msg: &str| Error::Parse {
            line: 1,
            msg: msg.to_string(),
        };
        let mut classes = None;
        let mut split = None;
        for field in header.trim_start_matches('#').split_whitespace() {
            match field.split_once('=') {
                Some(("classes", v)) => classes = v.parse().ok(),
                Some(("split", "train")) => split = Some(Split::Train),
                Some(("split", "test")) => split = Some(Split::Test),
                _ => {}
            }
        }
        let classes = classes.ok_or_else(|| header_err("header is missing classes="))?;
        let split = split.ok_or_else(|| header_err("header is missing split="))?;
        let mut labels = Vec::new();
        let mut values = Vec::new();
        let mut width = None;
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let bad = |msg: String| Error::Parse { line: line_no, msg };
            let label: usize = fields
                .next()
                .unwrap_or_default()
                .trim()
                .parse()
                .map_err(|_| bad("invalid label".into()))?;
            let row = fields
                .map(|f| f.trim().parse::<f64>().map_err(|_| bad(format!("invalid value {f:?}"))))
                .collect::<Result<Vec<_>>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(bad(format!("expected {w} values, got {}", row.len())))
                }
                _ => {}
            }
            labels.push(label);
            values.extend(row);
        }
        let width = width.ok_or(Error::Parse {
            line: 2,
            msg: "dataset has no samples".into(),
        })?;
        let inputs = Array2::from_shape_vec((labels.len(), width), values)
            .map_err(|e| Error::Input(e.to_string()))?;
        Self::new(inputs, labels, classes, split)
    }
}

/// Train and test sets of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Permuted,
    Split,
    Synthetic,
}

/// How classes are assigned to split tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassOrder {
    /// Random partition drawn from the seed.
    #[default]
    Random,
    /// Consecutive blocks of class ids: `0..c`, `c..2c`, ...
    Sequential,
}

/// Ordered tasks sharing one input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    tasks: Vec<TaskData>,
    kind: TaskKind,
    permutations: Vec<Vec<usize>>,
    class_sets: Vec<Vec<usize>>,
}

impl TaskSequence {
    pub fn new(tasks: Vec<TaskData>, kind: TaskKind) -> Result<Self> {
        let Some(first) = tasks.first() else {
            return Err(Error::Config("task sequence needs at least one task".into()));
        };
        let dim = first.train.dim();
        for (t, task) in tasks.iter().enumerate() {
            if task.train.dim() != dim || task.test.dim() != dim {
                return Err(Error::Config(format!(
                    "task {} has input dim {}/{}, expected {dim}",
                    t + 1,
                    task.train.dim(),
                    task.test.dim()
                )));
            }
        }
        Ok(Self {
            tasks,
            kind,
            permutations: Vec::new(),
            class_sets: Vec::new(),
        })
    }

    pub fn tasks(&self) -> &[TaskData] {
        &self.tasks
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    /// Pixel permutation of each task (permuted sequences only).
    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.permutations
    }

    /// Source class ids of each task (split sequences only), in label order.
    pub fn class_sets(&self) -> &[Vec<usize>] {
        &self.class_sets
    }
}

fn permute_columns(ds: &LabeledDataset, perm: &[usize]) -> Result<LabeledDataset> {
    let inputs = ds.inputs.select(Axis(1), perm);
    LabeledDataset::new(inputs, ds.labels.clone(), ds.num_classes, ds.split)
}

/// Task `t` applies a fixed input permutation to both splits. The first task
/// uses the identity; later permutations are drawn from `seed`.
pub fn gen_permuted_tasks(
    train: &LabeledDataset,
    test: &LabeledDataset,
    num_tasks: usize,
    seed: u64,
) -> Result<TaskSequence> {
    if num_tasks == 0 {
        return Err(Error::Config("number of tasks must be >= 1".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::Config("train and test input dims differ".into()));
    }
    let dim = train.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut permutations = Vec::with_capacity(num_tasks);
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let mut perm: Vec<usize> = (0..dim).collect();
        if t > 0 {
            perm.shuffle(&mut rng);
        }
        tasks.push(TaskData {
            train: permute_columns(train, &perm)?,
            test: permute_columns(test, &perm)?,
        });
        permutations.push(perm);
    }
    let mut seq = TaskSequence::new(tasks, TaskKind::Permuted)?;
    seq.permutations = permutations;
    Ok(seq)
}

fn restrict_to_classes(ds: &LabeledDataset, classes: &[usize]) -> Result<LabeledDataset> {
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| classes.contains(&ds.labels[i])).collect();
    if idx.is_empty() {
        return Err(Error::Input(format!(
            "no {} samples for classes {classes:?}",
            ds.split.as_str()
        )));
    }
    let inputs = ds.inputs.select(Axis(0), &idx);
    let labels = idx
        .iter()
        .map(|&i| classes.iter().position(|&c| c == ds.labels[i]).unwrap())
        .collect();
    LabeledDataset::new(inputs, labels, classes.len(), ds.split)
}

/// Partitions the classes into disjoint groups of `classes_per_task`; each
/// task keeps only its classes, relabelled `0..classes_per_task` in
/// increasing order of the original ids.
pub fn gen_split_tasks(
    train: &LabeledDataset,
    test: &LabeledDataset,
    classes_per_task: usize,
    order: ClassOrder,
    seed: u64,
) -> Result<TaskSequence> {
    let total = train.num_classes();
    if classes_per_task == 0 || !total.is_multiple_of(classes_per_task) {
        return Err(Error::Config(format!(
            "{total} classes cannot be split into groups of {classes_per_task}"
        )));
    }
    if test.num_classes() != total {
        return Err(Error::Config("train and test class counts differ".into()));
    }
    let mut classes: Vec<usize> = (0..total).collect();
    if order == ClassOrder::Random {
        classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut class_sets = Vec::new();
    let mut tasks = Vec::new();
    for chunk in classes.chunks(classes_per_task) {
        let mut set = chunk.to_vec();
        set.sort_unstable();
        tasks.push(TaskData {
            train: restrict_to_classes(train, &set)?,
            test: restrict_to_classes(test, &set)?,
        });
        class_sets.push(set);
    }
    let mut seq = TaskSequence::new(tasks, TaskKind::Split)?;
    seq.class_sets = class_sets;
    Ok(seq)
}

/// Gaussian blobs around random non-negative unit-norm class centres, clipped
/// to `[0, 1]`. Train and test use `per_class` samples per class each.
pub fn gen_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    gen_synthetic_sized(num_classes, dim, per_class, per_class, spread, seed)
}

pub fn gen_synthetic_sized(
    num_classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if num_classes == 0 || dim == 0 || train_per_class == 0 || test_per_class == 0 {
        return Err(Error::Config("synthetic dataset sizes must be positive".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Config(format!("spread must be >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .map(|x: f64| x.abs())
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let mut draw = |per_class: usize, split: Split| {
        let n = num_classes * per_class;
        let mut inputs = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for (i, mut row) in inputs.outer_iter_mut().enumerate() {
            let class = i % num_classes;
            for (x, c) in row.iter_mut().zip(&centers[class]) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *x = (c + spread * noise).clamp(0.0, 1.0);
            }
            labels.push(class);
        }
        LabeledDataset::new(inputs, labels, num_classes, split)
    };
    let train = draw(train_per_class, Split::Train)?;
    let test = draw(test_per_class, Split::Test)?;
    Ok((train, test))
}

/// `num_tasks` independent synthetic tasks, task `t` drawn with `seed + t`.
pub fn gen_synthetic_tasks(
    num_tasks: usize,
    num_classes: usize,
    dim: usize,
    train_per_class: usize,
    test_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<TaskSequence> {
    if num_tasks == 0 {
        return Err(Error::Config("number of tasks must be >= 1".into()));
    }
    let tasks = (0..num_tasks as u64)
        .map(|t| {
            let (train, test) = gen_synthetic_sized(
                num_classes,
                dim,
                train_per_class,
                test_per_class,
                spread,
                seed.wrapping_add(t),
            )?;
            Ok(TaskData { train, test })
        })
        .collect::<Result<Vec<_>>>()?;
    TaskSequence::new(tasks, TaskKind::Synthetic)
}

fn idx_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_idx_header(path: &Path, bytes: &[u8], magic: u32, dims: usize) -> Result<(Vec<usize>, usize)> {
    let mut cur = Cursor::new(bytes);
    let found = cur
        .read_u32::<BigEndian>()
        .map_err(|_| idx_error(path, "truncated header"))?;
    if found != magic {
        return Err(idx_error(
            path,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    let sizes = (0..dims)
        .map(|_| {
            cur.read_u32::<BigEndian>()
                .map(|v| v as usize)
                .map_err(|_| idx_error(path, "truncated header"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sizes, cur.position() as usize))
}

/// Reads an IDX image/label file pair. Pixel bytes are scaled by `1/255`;
/// the class count is one more than the largest label.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images_path).map_err(|e| idx_error(images_path, e.to_string()))?;
    let lbl_bytes = fs::read(labels_path).map_err(|e| idx_error(labels_path, e.to_string()))?;

    let (sizes, offset) = read_idx_header(images_path, &img_bytes, IDX_IMAGES_MAGIC, 3)?;
    let (count, pixels) = (sizes[0], sizes[1] * sizes[2]);
    let payload = &img_bytes[offset..];
    if payload.len() < count * pixels {
        return Err(idx_error(
            images_path,
            format!("truncated payload: {} bytes for {count} images of {pixels} pixels", payload.len()),
        ));
    }

    let (lsizes, loffset) = read_idx_header(labels_path, &lbl_bytes, IDX_LABELS_MAGIC, 1)?;
    if lsizes[0] != count {
        return Err(idx_error(
            labels_path,
            format!("{} labels for {count} images", lsizes[0]),
        ));
    }
    let mut labels_raw = vec![0u8; count];
    Cursor::new(&lbl_bytes[loffset..])
        .read_exact(&mut labels_raw)
        .map_err(|_| idx_error(labels_path, "truncated payload"))?;
    if count == 0 {
        return Err(idx_error(images_path, "file holds no images"));
    }

    let inputs = Array2::from_shape_fn((count, pixels), |(i, j)| f64::from(payload[i * pixels + j]) / 255.0);
    let labels: Vec<usize> = labels_raw.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(1, |m| m + 1);
    LabeledDataset::new(inputs, labels, num_classes, Split::Train)
}
