//! Sequential multi-task training with memory replay and episodic
//! distillation, plus task-incremental evaluation.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, TaskData};
use crate::error::{Error, Result};
use crate::loss::{cds_loss, ed_loss, softmax_ce_loss, tam_loss, LossResult, MarginConfig, TaskHead};
use crate::memory::{MemoryStore, RefBatch, DEFAULT_QUOTA};
use crate::metrics::{AccuracyMatrix, BShotCurve};
use crate::nn::{init_network, sgd_step, Gradients, Network, ParamGrad};

const STREAM_NET: u64 = 1;
const STREAM_HEAD: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_REPLAY: u64 = 4;
const STREAM_MEMORY: u64 = 5;

/// Independent generator for one purpose (`stream`) and one task.
fn sub_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | index);
    rng
}

fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    rand::RngCore::next_u64(&mut sub_rng(seed, stream, index))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Angular-margin loss over all seen heads, with replay.
    #[default]
    Tam,
    /// Affine cross-domain softmax over all seen heads, with replay.
    CdsRaw,
    /// Plain softmax on the current head; no replay, no distillation.
    Vanilla,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Tam => "tam",
            LossMode::CdsRaw => "cds_raw",
            LossMode::Vanilla => "vanilla",
        }
    }

    pub fn replays(self) -> bool {
        self != LossMode::Vanilla
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "tam" => Ok(LossMode::Tam),
            "cds_raw" => Ok(LossMode::CdsRaw),
            "vanilla" => Ok(LossMode::Vanilla),
            _ => Err(Error::Config(format!(
                "unknown loss mode {s:?} (expected tam, cds_raw or vanilla)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    pub margin: MarginConfig,
    pub lr: f64,
    pub batch_size: usize,
    /// Replay batch size; the training batch size when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ref_batch_size: Option<usize>,
    pub quota: usize,
    pub epochs_per_task: usize,
    pub use_ed: bool,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub lca_beta: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            margin: MarginConfig::default(),
            lr: 0.1,
            batch_size: 10,
            ref_batch_size: None,
            quota: DEFAULT_QUOTA,
            epochs_per_task: 1,
            use_ed: true,
            loss_mode: LossMode::Tam,
            seed: 0,
            lca_beta: 10,
        }
    }
}

impl HyperParams {
    pub fn ref_batch(&self) -> usize {
        self.ref_batch_size.unwrap_or(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("ref_batch_size", self.ref_batch()),
            ("quota", self.quota),
            ("epochs_per_task", self.epochs_per_task),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Everything that evolves while a task sequence is learned.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub net: Network,
    pub heads: Vec<TaskHead>,
    pub memory: MemoryStore,
    pub matrix: AccuracyMatrix,
    /// One row per finished task: accuracy after `0..=beta` updates.
    pub curve_rows: Vec<Vec<f64>>,
}

impl TrainerState {
    pub fn new(net: Network, quota: usize, num_tasks: usize) -> Result<Self> {
        Ok(Self {
            net,
            heads: Vec::new(),
            memory: MemoryStore::new(quota)?,
            matrix: AccuracyMatrix::zeros(num_tasks)?,
            curve_rows: Vec::new(),
        })
    }

    /// Tasks whose accuracy row has been recorded.
    pub fn tasks_done(&self) -> usize {
        self.curve_rows.len()
    }

    pub fn curve(&self) -> Result<BShotCurve> {
        BShotCurve::new(self.curve_rows.clone())
    }
}

/// Per-step gradients, kept apart so the applied update is their exact sum.
#[derive(Debug, Clone)]
pub struct StepGradients {
    pub current: Gradients,
    pub reference: Option<Gradients>,
    pub loss: f64,
    pub ref_loss: Option<f64>,
}

impl StepGradients {
    pub fn combined(&self) -> Result<Gradients> {
        match &self.reference {
            Some(r) => self.current.add(r),
            None => Ok(self.current.clone()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskLog {
    /// Current-task batch loss of every update.
    pub losses: Vec<f64>,
    /// Test accuracy on the task before the first update and after each of
    /// the first `lca_beta` updates.
    pub curve: Vec<f64>,
}

fn mode_loss(
    features: ArrayView2<f64>,
    labels: &[usize],
    heads: &[TaskHead],
    k: usize,
    hp: &HyperParams,
) -> Result<LossResult> {
    match hp.loss_mode {
        LossMode::Tam => tam_loss(features, labels, heads, k, &hp.margin),
        LossMode::CdsRaw => cds_loss(features, labels, heads, k),
        LossMode::Vanilla => softmax_ce_loss(features, labels, &heads[k]),
    }
}

/// Loss of task `t` on `(x, y)` with its gradients over the trunk and heads
/// `0..=t`.
fn current_gradients(
    net: &mut Network,
    heads: &[TaskHead],
    x: ArrayView2<f64>,
    y: &[usize],
    t: usize,
    hp: &HyperParams,
) -> Result<(f64, Gradients)> {
    let features = net.forward(x)?;
    let res = mode_loss(features.view(), y, &heads[..=t], t, hp)?;
    let mut grads = net.backward(res.feature_grad.view())?;
    grads.heads = res.head_grads;
    Ok((res.value, grads))
}

/// Replay gradient: per-task losses on the memory batch averaged over the
/// tasks present, plus the distillation term when enabled.
fn reference_gradients(
    net: &mut Network,
    heads: &[TaskHead],
    batch: &RefBatch,
    t: usize,
    hp: &HyperParams,
) -> Result<(f64, Gradients)> {
    let features = net.forward(batch.inputs.view())?;
    let groups = batch.groups();
    let weight = 1.0 / groups.len() as f64;
    let mut feature_grad = Array2::zeros(features.dim());
    let mut total = 0.0;
    let mut head_grads = std::collections::BTreeMap::new();
    for (&k, rows) in &groups {
        let f = features.select(Axis(0), rows);
        let labels: Vec<usize> = rows.iter().map(|&i| batch.labels[i]).collect();
        let res = mode_loss(f.view(), &labels, &heads[..=t], k, hp)?;
        total += weight * res.value;
        for (r, &i) in rows.iter().enumerate() {
            let mut dst = feature_grad.row_mut(i);
            dst.scaled_add(weight, &res.feature_grad.row(r));
        }
        for (id, mut g) in res.head_grads {
            g.scale(weight);
            head_grads
                .entry(id)
                .and_modify(|acc: &mut ParamGrad| acc.add_assign(&g))
                .or_insert(g);
        }
    }
    if hp.use_ed {
        let ed = ed_loss(features.view(), batch.representations.view())?;
        total += ed.value;
        feature_grad += &ed.feature_grad;
    }
    let mut grads = net.backward(feature_grad.view())?;
    grads.heads = head_grads;
    Ok((total, grads))
}

/// Gradients of one update for task `t`: the current batch, and a replay
/// batch when earlier tasks are in memory and the mode replays.
pub fn step_gradients(
    state: &mut TrainerState,
    x: ArrayView2<f64>,
    y: &[usize],
    t: usize,
    hp: &HyperParams,
    replay_rng: &mut ChaCha8Rng,
) -> Result<StepGradients> {
    if state.heads.len() <= t {
        return Err(Error::State(format!("no head for task {}", t + 1)));
    }
    let (loss, current) = current_gradients(&mut state.net, &state.heads, x, y, t, hp)?;
    let mut out = StepGradients {
        current,
        reference: None,
        loss,
        ref_loss: None,
    };
    if t > 0 && hp.loss_mode.replays() && !state.memory.is_empty() {
        let batch = state.memory.sample_ref_batch(hp.ref_batch(), replay_rng)?;
        let (ref_loss, reference) = reference_gradients(&mut state.net, &state.heads, &batch, t, hp)?;
        out.reference = Some(reference);
        out.ref_loss = Some(ref_loss);
    }
    Ok(out)
}

/// Index of the largest score in each row; ties go to the lowest index.
fn argmax_rows(scores: &Array2<f64>) -> Vec<usize> {
    scores
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Accuracy of `head` on `data` using margin-free logits.
pub fn head_accuracy(net: &Network, head: &TaskHead, data: &LabeledDataset, mode: LossMode) -> Result<f64> {
    if data.num_classes() > head.num_classes() {
        return Err(Error::State(format!(
            "head {} has {} classes, test set has {}",
            head.task_id() + 1,
            head.num_classes(),
            data.num_classes()
        )));
    }
    let features = net.infer(data.inputs().view())?;
    let scores = match mode {
        // Dividing a row by its feature norm leaves the argmax unchanged, so
        // only the columns are normalized; zero features then predict class 0.
        LossMode::Tam => {
            let w = head.weight();
            let norms = w.map_axis(Axis(0), |c| c.dot(&c).sqrt());
            if norms.iter().any(|&n| n <= 0.0 || !n.is_finite()) {
                return Err(Error::NumericDomain(format!(
                    "head {} has a zero or non-finite column",
                    head.task_id() + 1
                )));
            }
            features.dot(&(w / &norms.view().insert_axis(Axis(0))))
        }
        LossMode::CdsRaw | LossMode::Vanilla => head.affine_logits(features.view())?,
    };
    let correct = argmax_rows(&scores)
        .iter()
        .zip(data.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy on each test set with the head of the same index.
pub fn evaluate(state: &TrainerState, test_sets: &[&LabeledDataset], mode: LossMode) -> Result<Vec<f64>> {
    test_sets
        .iter()
        .enumerate()
        .map(|(j, ds)| {
            let head = state
                .heads
                .get(j)
                .ok_or_else(|| Error::State(format!("no head for task {}", j + 1)))?;
            head_accuracy(&state.net, head, ds, mode)
        })
        .collect()
}

/// Trains task `t` (0-based) for `hp.epochs_per_task` passes. A fresh head
/// is added when the state has exactly `t` heads.
pub fn train_task(state: &mut TrainerState, task: &TaskData, hp: &HyperParams, t: usize) -> Result<TaskLog> {
    hp.validate()?;
    if state.heads.len() == t {
        let head = TaskHead::init(
            t,
            state.net.feature_dim(),
            task.train.num_classes(),
            sub_seed(hp.seed, STREAM_HEAD, t as u64),
        )?;
        state.heads.push(head);
    } else if state.heads.len() != t + 1 {
        return Err(Error::State(format!(
            "training task {} with {} heads",
            t + 1,
            state.heads.len()
        )));
    }
    if task.train.dim() != state.net.input_dim() {
        return Err(Error::Config(format!(
            "task {} has input dim {}, network expects {}",
            t + 1,
            task.train.dim(),
            state.net.input_dim()
        )));
    }

    let mut log = TaskLog::default();
    log.curve
        .push(head_accuracy(&state.net, &state.heads[t], &task.test, hp.loss_mode)?);
    let mut shuffle_rng = sub_rng(hp.seed, STREAM_SHUFFLE, t as u64);
    let mut replay_rng = sub_rng(hp.seed, STREAM_REPLAY, t as u64);
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut step = 0;
    for _ in 0..hp.epochs_per_task {
        order.shuffle(&mut shuffle_rng);
        for idx in order.chunks(hp.batch_size) {
            let x = task.train.inputs().select(Axis(0), idx);
            let y: Vec<usize> = idx.iter().map(|&i| task.train.labels()[i]).collect();
            let grads = step_gradients(state, x.view(), &y, t, hp, &mut replay_rng)?;
            let total = grads.combined()?;
            let finite = grads.loss.is_finite() && grads.ref_loss.is_none_or(f64::is_finite);
            if !finite || !total.is_finite() {
                return Err(Error::NonFinite { task: t + 1, batch: step });
            }
            sgd_step(&mut state.net, &mut state.heads, &total, hp.lr)?;
            log.losses.push(grads.loss);
            step += 1;
            if step <= hp.lca_beta {
                log.curve
                    .push(head_accuracy(&state.net, &state.heads[t], &task.test, hp.loss_mode)?);
            }
        }
    }
    // fewer updates than beta: hold the last accuracy
    let last = *log.curve.last().expect("b = 0 is always recorded");
    log.curve.resize(hp.lca_beta + 1, last);
    Ok(log)
}

/// Result of learning a whole task sequence.
#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub matrix: AccuracyMatrix,
    pub curve: BShotCurve,
    pub state: TrainerState,
    pub logs: Vec<TaskLog>,
}

fn check_dims(tasks: &[TaskData], input_dim: usize) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Config("task sequence is empty".into()));
    }
    for (t, task) in tasks.iter().enumerate() {
        if task.train.dim() != input_dim || task.test.dim() != input_dim {
            return Err(Error::Config(format!(
                "task {} has input dim {}/{}, expected {input_dim}",
                t + 1,
                task.train.dim(),
                task.test.dim()
            )));
        }
    }
    Ok(())
}

/// Fresh network with the given layer sizes, trained on every task in turn.
pub fn train_sequence(tasks: &[TaskData], layer_sizes: &[usize], hp: &HyperParams) -> Result<SequenceOutcome> {
    hp.validate()?;
    let input_dim = *layer_sizes
        .first()
        .ok_or_else(|| Error::Config("layer sizes are empty".into()))?;
    check_dims(tasks, input_dim)?;
    let net = init_network(layer_sizes, sub_seed(hp.seed, STREAM_NET, 0))?;
    let state = TrainerState::new(net, hp.quota, tasks.len())?;
    continue_sequence(state, tasks, hp)
}

/// Trains the tasks the state has not finished yet.
pub fn continue_sequence(mut state: TrainerState, tasks: &[TaskData], hp: &HyperParams) -> Result<SequenceOutcome> {
    hp.validate()?;
    check_dims(tasks, state.net.input_dim())?;
    if state.matrix.size() != tasks.len() {
        return Err(Error::State(format!(
            "state records {} tasks, sequence has {}",
            state.matrix.size(),
            tasks.len()
        )));
    }
    let tests: Vec<&LabeledDataset> = tasks.iter().map(|t| &t.test).collect();
    let mut logs = Vec::new();
    for t in state.tasks_done()..tasks.len() {
        let log = train_task(&mut state, &tasks[t], hp, t)?;
        state.memory.store_mem(
            t,
            &tasks[t].train,
            &state.net,
            sub_seed(hp.seed, STREAM_MEMORY, t as u64),
        )?;
        let row = evaluate(&state, &tests[..=t], hp.loss_mode)?;
        for (j, a) in row.into_iter().enumerate() {
            state.matrix.set(t, j, a)?;
        }
        state.curve_rows.push(log.curve.clone());
        log::info!("task {}/{} done, final batch loss {:?}", t + 1, tasks.len(), log.losses.last());
        logs.push(log);
    }
    Ok(SequenceOutcome {
        matrix: state.matrix.clone(),
        curve: state.curve()?,
        state,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, gen_synthetic_tasks, Split};
    use ndarray::array;

    fn hp(mode: LossMode) -> HyperParams {
        HyperParams {
            loss_mode: mode,
            margin: MarginConfig::new(0.01, 0.1, 8.0).unwrap(),
            lca_beta: 3,
            quota: 5,
            ..HyperParams::default()
        }
    }

    fn tasks(n: usize) -> Vec<TaskData> {
        gen_synthetic_tasks(n, 3, 8, 10, 5, 0.1, 4).unwrap().tasks().to_vec()
    }

    #[test]
    fn loss_mode_parses() {
        assert_eq!("TAM".parse::<LossMode>().unwrap(), LossMode::Tam);
        assert_eq!("cds-raw".parse::<LossMode>().unwrap(), LossMode::CdsRaw);
        assert!("agem".parse::<LossMode>().is_err());
    }

    #[test]
    fn hyperparams_reject_zero_sizes() {
        let mut h = HyperParams {
            batch_size: 0,
            ..HyperParams::default()
        };
        assert!(matches!(h.validate(), Err(Error::Config(_))));
        h.batch_size = 1;
        h.ref_batch_size = Some(0);
        assert!(h.validate().is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax_rows(&array![[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]), vec![0, 1]);
    }

    #[test]
    fn constant_predictor_scores_one_fifth() {
        let net = init_network(&[2, 2], 0).unwrap();
        let mut w = Array2::zeros((2, 5));
        w[[0, 0]] = 1.0;
        let bias = array![1.0, 0.0, 0.0, 0.0, 0.0];
        let head = TaskHead::new(0, w, bias).unwrap();
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let ds = LabeledDataset::new(Array2::zeros((10, 2)), labels, 5, Split::Test).unwrap();
        assert_eq!(head_accuracy(&net, &head, &ds, LossMode::Vanilla).unwrap(), 0.2);
    }

    #[test]
    fn features_on_head_columns_are_classified_perfectly() {
        let net = init_network(&[3, 3], 0).unwrap();
        let state = {
            let mut s = TrainerState::new(net, 1, 1).unwrap();
            s.heads.push(TaskHead::init(0, 3, 4, 2).unwrap());
            s
        };
        let head = &state.heads[0];
        let cols = head.weight().t().to_owned();
        // pick inputs whose features equal the head columns
        let ds_feats = cols.clone();
        let w = state.net.layers()[0].weight();
        let b = state.net.layers()[0].bias();
        let inv = invert3(w);
        let inputs = (&ds_feats - &b.view().insert_axis(Axis(0))).dot(&inv.t());
        let ds = LabeledDataset::new(inputs, vec![0, 1, 2, 3], 4, Split::Test).unwrap();
        let acc = evaluate(&state, &[&ds], LossMode::Tam).unwrap();
        assert_eq!(acc, vec![1.0]);
    }

    fn invert3(m: &Array2<f64>) -> Array2<f64> {
        let c = |i: usize, j: usize| m[[i % 3, j % 3]];
        let mut adj = Array2::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                adj[[j, i]] = c(i + 1, j + 1) * c(i + 2, j + 2) - c(i + 1, j + 2) * c(i + 2, j + 1);
            }
        }
        let det: f64 = (0..3).map(|j| m[[0, j]] * adj[[j, 0]]).sum();
        adj / det
    }

    #[test]
    fn evaluation_is_pure_and_needs_heads() {
        let ts = tasks(2);
        let out = train_sequence(&ts[..1], &[8, 6, 5], &hp(LossMode::Tam)).unwrap();
        let a = evaluate(&out.state, &[&ts[0].test], LossMode::Tam).unwrap();
        let b = evaluate(&out.state, &[&ts[0].test], LossMode::Tam).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            evaluate(&out.state, &[&ts[0].test, &ts[1].test], LossMode::Tam),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn single_task_matrix_is_test_accuracy() {
        let ts = tasks(1);
        let out = train_sequence(&ts, &[8, 6, 5], &hp(LossMode::Tam)).unwrap();
        let acc = head_accuracy(&out.state.net, &out.state.heads[0], &ts[0].test, LossMode::Tam).unwrap();
        assert_eq!(out.matrix.size(), 1);
        assert_eq!(out.matrix.get(0, 0), acc);
        assert_eq!(out.curve.rows()[0].len(), 4);
    }

    #[test]
    fn first_task_has_no_reference_gradient() {
        let ts = tasks(1);
        let net = init_network(&[8, 5], 3).unwrap();
        let mut state = TrainerState::new(net, 3, 1).unwrap();
        state.heads.push(TaskHead::init(0, 5, 3, 1).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = ts[0].train.inputs().slice(ndarray::s![..4, ..]).to_owned();
        let g = step_gradients(&mut state, x.view(), &ts[0].train.labels()[..4], 0, &hp(LossMode::Tam), &mut rng)
            .unwrap();
        assert!(g.reference.is_none());
        assert_eq!(g.combined().unwrap(), g.current);
    }

    fn state_after_first_task(mode: LossMode) -> (TrainerState, Vec<TaskData>) {
        let ts = tasks(2);
        let h = hp(mode);
        let net = init_network(&[8, 6, 5], 1).unwrap();
        let mut state = TrainerState::new(net, h.quota, 2).unwrap();
        train_task(&mut state, &ts[0], &h, 0).unwrap();
        state.memory.store_mem(0, &ts[0].train, &state.net, 9).unwrap();
        state.heads.push(TaskHead::init(1, 5, 3, 5).unwrap());
        (state, ts)
    }

    #[test]
    fn distillation_vanishes_at_the_anchors() {
        let (mut state, ts) = state_after_first_task(LossMode::Tam);
        let x = ts[1].train.inputs().slice(ndarray::s![..6, ..]).to_owned();
        let y = &ts[1].train.labels()[..6];
        let mut with = hp(LossMode::Tam);
        with.use_ed = true;
        let mut without = with.clone();
        without.use_ed = false;
        let a = step_gradients(&mut state, x.view(), y, 1, &with, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = step_gradients(&mut state, x.view(), y, 1, &without, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.reference, b.reference);
        assert_eq!(a.ref_loss, b.ref_loss);

        let mem: Vec<_> = state.memory.iter().collect();
        let inputs = Array2::from_shape_fn((mem.len(), 8), |(i, j)| mem[i].input[j]);
        let reps = Array2::from_shape_fn((mem.len(), 5), |(i, j)| mem[i].representation[j]);
        let cur = state.net.infer(inputs.view()).unwrap();
        assert_eq!(ed_loss(cur.view(), reps.view()).unwrap().value, 0.0);
    }

    #[test]
    fn applied_update_is_the_sum_of_both_gradients() {
        let (mut state, ts) = state_after_first_task(LossMode::Tam);
        let x = ts[1].train.inputs().slice(ndarray::s![..6, ..]).to_owned();
        let y = &ts[1].train.labels()[..6];
        let h = hp(LossMode::Tam);
        let g = step_gradients(&mut state, x.view(), y, 1, &h, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let reference = g.reference.clone().unwrap();
        let before = state.net.params_flat();
        sgd_step(&mut state.net, &mut state.heads, &g.combined().unwrap(), h.lr).unwrap();
        let after = state.net.params_flat();
        let (gc, gr) = (g.current.trunk_flat(), reference.trunk_flat());
        for i in 0..before.len() {
            assert_eq!(after[i], before[i] - h.lr * (gc[i] + gr[i]));
        }
    }

    #[test]
    fn old_heads_receive_gradients_during_replay() {
        let (mut state, ts) = state_after_first_task(LossMode::Tam);
        let x = ts[1].train.inputs().slice(ndarray::s![..6, ..]).to_owned();
        let g = step_gradients(
            &mut state,
            x.view(),
            &ts[1].train.labels()[..6],
            1,
            &hp(LossMode::Tam),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let old = &g.reference.unwrap().heads[&0];
        assert!(old.weight.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn vanilla_touches_only_the_current_head() {
        let (mut state, ts) = state_after_first_task(LossMode::Vanilla);
        let x = ts[1].train.inputs().slice(ndarray::s![..6, ..]).to_owned();
        let g = step_gradients(
            &mut state,
            x.view(),
            &ts[1].train.labels()[..6],
            1,
            &hp(LossMode::Vanilla),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(g.reference.is_none());
        assert_eq!(g.current.heads.keys().copied().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn sequences_are_deterministic() {
        let ts = tasks(3);
        for mode in [LossMode::Tam, LossMode::CdsRaw, LossMode::Vanilla] {
            let a = train_sequence(&ts, &[8, 6, 5], &hp(mode)).unwrap();
            let b = train_sequence(&ts, &[8, 6, 5], &hp(mode)).unwrap();
            assert_eq!(a.matrix, b.matrix);
            assert_eq!(a.curve, b.curve);
            assert_eq!(a.state, b.state);
            for i in 0..3 {
                for j in i + 1..3 {
                    assert_eq!(a.matrix.get(i, j), 0.0);
                }
            }
            assert_eq!(a.state.memory.len(), 3 * 5);
        }
    }

    #[test]
    fn inconsistent_input_dims_are_rejected() {
        let mut ts = tasks(2);
        let (train, test) = gen_synthetic(3, 9, 2, 0.1, 0).unwrap();
        ts[1] = TaskData { train, test };
        assert!(matches!(train_sequence(&ts, &[8, 5], &hp(LossMode::Tam)), Err(Error::Config(_))));
    }

    #[test]
    fn exploding_step_reports_the_batch() {
        let ts = tasks(1);
        let mut h = hp(LossMode::Vanilla);
        h.lr = 1e300;
        h.batch_size = 5;
        match train_sequence(&ts, &[8, 6, 5], &h) {
            Err(Error::NonFinite { task: 1, batch }) => assert!(batch >= 1),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }
}
