//! Task heads and the softmax-family losses that train them.
//!
//! Every loss returns its value together with exact gradients with respect to
//! the input features and to every head it touched. The cross-domain losses
//! ([`cds_loss`], [`tam_loss`]) normalize each sample over the classes of *all*
//! seen heads, so every seen head receives a gradient.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{glorot_matrix, ParamGrad};

/// Clamp applied to cosines before deriving `sin θ = sqrt(1 − cos² θ)`.
pub const COS_CLAMP_EPS: f64 = 1e-7;

/// Per-task linear classifier. `weight` is `d × C` (one column per class).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    task_id: usize,
    weight: Array2<f64>,
    bias: Array1<f64>,
}

impl TaskHead {
    pub fn new(task_id: usize, weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.ncols() == 0 || weight.nrows() == 0 {
            return Err(Error::Config("task head needs at least one class and one feature".into()));
        }
        if weight.ncols() != bias.len() {
            return Err(shape_err("head bias length", weight.ncols(), bias.len()));
        }
        Ok(Self {
            task_id,
            weight,
            bias,
        })
    }

    /// Fresh head with the trunk's Glorot-uniform scheme and zero bias.
    pub fn init(task_id: usize, feature_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::Config("task head dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weight = glorot_matrix(feature_dim, num_classes, feature_dim, num_classes, &mut rng);
        Self::new(task_id, weight, Array1::zeros(num_classes))
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn num_classes(&self) -> usize {
        self.weight.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut Array2<f64> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut Array1<f64> {
        &mut self.bias
    }

    pub fn apply_gradient(&mut self, grad: &ParamGrad, lr: f64) -> Result<()> {
        if grad.weight.dim() != self.weight.dim() || grad.bias.len() != self.bias.len() {
            return Err(shape_err(
                "head gradient",
                (self.weight.dim(), self.bias.len()),
                (grad.weight.dim(), grad.bias.len()),
            ));
        }
        self.weight.scaled_add(-lr, &grad.weight);
        self.bias.scaled_add(-lr, &grad.bias);
        Ok(())
    }

    /// Raw scores `xᵀ W_j + b_j`, shape `n × C`.
    pub fn affine_logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_feature_width(&features, self)?;
        let mut z = features.dot(&self.weight);
        z += &self.bias;
        Ok(z)
    }

    /// Cosines between each normalized feature and each normalized column.
    pub fn cosine_logits(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_feature_width(&features, self)?;
        let (x_hat, _) = normalize_rows(features)?;
        let (w_hat, _) = normalize_columns(self.weight.view(), self.task_id)?;
        Ok(x_hat.dot(&w_hat))
    }
}

/// Angular margins and feature scale for [`tam_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginConfig {
    /// Class-level margin, added to the target angle only.
    pub m_c: f64,
    /// Task-level margin, added to every class angle of the current task.
    pub m_t: f64,
    /// Scale applied to the (margin-adjusted) cosines.
    pub s: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            m_c: 0.01,
            m_t: 0.1,
            s: 32.0,
        }
    }
}

impl MarginConfig {
    pub fn new(m_c: f64, m_t: f64, s: f64) -> Result<Self> {
        let cfg = Self { m_c, m_t, s };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m_c >= 0.0 && self.m_c.is_finite()) {
            return Err(Error::Config(format!("m_c must be a finite value >= 0, got {}", self.m_c)));
        }
        if !(self.m_t >= 0.0 && self.m_t.is_finite()) {
            return Err(Error::Config(format!("m_t must be a finite value >= 0, got {}", self.m_t)));
        }
        if self.m_c + self.m_t >= std::f64::consts::PI {
            return Err(Error::Config(format!(
                "m_c + m_t must be < pi, got {}",
                self.m_c + self.m_t
            )));
        }
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::Config(format!("s must be positive, got {}", self.s)));
        }
        Ok(())
    }
}

/// Loss value with gradients w.r.t. the features and each touched head,
/// keyed by the head's task id.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub feature_grad: Array2<f64>,
    pub head_grads: BTreeMap<usize, ParamGrad>,
}

fn check_feature_width(features: &ArrayView2<f64>, head: &TaskHead) -> Result<()> {
    if features.ncols() != head.feature_dim() {
        return Err(shape_err(
            &format!("feature width for head {}", head.task_id),
            head.feature_dim(),
            features.ncols(),
        ));
    }
    Ok(())
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(shape_err("label count", n, labels.len()));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(Error::Input(format!(
            "label {y} at sample {i} is out of range for {classes} classes"
        )));
    }
    Ok(())
}

fn current_head(heads: &[TaskHead], k: usize) -> Result<&TaskHead> {
    if heads.is_empty() {
        return Err(Error::State("no task heads available".into()));
    }
    heads.get(k).ok_or_else(|| {
        Error::Input(format!("task index {k} out of range for {} heads", heads.len()))
    })
}

fn normalize_rows(x: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| n <= 0.0 || !n.is_finite()) {
        return Err(Error::NumericDomain(format!("feature {i} has zero or non-finite norm")));
    }
    let normed = &x / &norms.view().insert_axis(Axis(1));
    Ok((normed, norms))
}

fn normalize_columns(w: ArrayView2<f64>, task: usize) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = w.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    if let Some(j) = norms.iter().position(|&n| n <= 0.0 || !n.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "column {j} of head {task} has zero or non-finite norm"
        )));
    }
    let normed = &w / &norms.view().insert_axis(Axis(0));
    Ok((normed, norms))
}

/// Row-wise softmax cross-entropy over a logit matrix. Returns the mean loss
/// and `dL/dlogits` (already divided by `n`).
fn softmax_xent(logits: &Array2<f64>, targets: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows();
    let mut grad = Array2::zeros(logits.dim());
    let mut total = 0.0;
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[targets[i]];
        let mut g = grad.row_mut(i);
        for (gj, &z) in g.iter_mut().zip(row.iter()) {
            *gj = (z - lse).exp() / n as f64;
        }
        g[targets[i]] -= 1.0 / n as f64;
    }
    (total / n as f64, grad)
}

/// Column offsets of each head inside the concatenated logit matrix.
fn head_offsets(heads: &[TaskHead]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(heads.len() + 1);
    let mut acc = 0;
    for h in heads {
        offsets.push(acc);
        acc += h.num_classes();
    }
    offsets.push(acc);
    offsets
}

/// Cross-Domain Softmax: affine logits of every seen head share one
/// normalization; the target is class `labels[i]` of head `k`.
pub fn cds_loss(
    features: ArrayView2<f64>,
    labels: &[usize],
    heads: &[TaskHead],
    k: usize,
) -> Result<LossResult> {
    let current = current_head(heads, k)?;
    check_labels(labels, features.nrows(), current.num_classes())?;
    let offsets = head_offsets(heads);
    let n = features.nrows();
    let mut logits = Array2::zeros((n, offsets[heads.len()]));
    for (h, head) in heads.iter().enumerate() {
        let z = head.affine_logits(features)?;
        logits
            .slice_mut(ndarray::s![.., offsets[h]..offsets[h + 1]])
            .assign(&z);
    }
    let targets: Vec<usize> = labels.iter().map(|&y| offsets[k] + y).collect();
    let (value, dz) = softmax_xent(&logits, &targets);

    let mut feature_grad = Array2::zeros(features.dim());
    let mut head_grads = BTreeMap::new();
    for (h, head) in heads.iter().enumerate() {
        let dz_h = dz.slice(ndarray::s![.., offsets[h]..offsets[h + 1]]);
        feature_grad += &dz_h.dot(&head.weight.t());
        head_grads.insert(
            head.task_id,
            ParamGrad {
                weight: features.t().dot(&dz_h),
                bias: dz_h.sum_axis(Axis(0)),
            },
        );
    }
    Ok(LossResult {
        value,
        feature_grad,
        head_grads,
    })
}

/// `cos(θ + m)` from `cos θ`, and its derivative with respect to `cos θ`.
///
/// `sin θ` is derived from the clamped cosine; the linear term uses the raw
/// cosine so that `m = 0` reproduces `c` exactly.
fn cos_plus_margin(c: f64, m: f64) -> (f64, f64) {
    if m == 0.0 {
        return (c, 1.0);
    }
    let lo = -1.0 + COS_CLAMP_EPS;
    let hi = 1.0 - COS_CLAMP_EPS;
    let cc = c.clamp(lo, hi);
    let sin = (1.0 - cc * cc).sqrt();
    let (sm, cm) = m.sin_cos();
    let value = c * cm - sin * sm;
    let deriv = if c > lo && c < hi { cm + sm * cc / sin } else { cm };
    (value, deriv)
}

/// Two-level Angular Margin loss.
///
/// Logits are scaled cosines between L2-normalized features and L2-normalized
/// head columns. For the current task `k` the target gets `cos(θ + m_c + m_t)`
/// and the other classes of `k` get `cos(θ + m_t)`; classes of other seen
/// tasks carry no margin. Head biases are ignored.
pub fn tam_loss(
    features: ArrayView2<f64>,
    labels: &[usize],
    heads: &[TaskHead],
    k: usize,
    cfg: &MarginConfig,
) -> Result<LossResult> {
    cfg.validate()?;
    let current = current_head(heads, k)?;
    check_labels(labels, features.nrows(), current.num_classes())?;
    for head in heads {
        check_feature_width(&features, head)?;
    }
    let (x_hat, x_norms) = normalize_rows(features)?;
    let offsets = head_offsets(heads);
    let n = features.nrows();

    let mut logits = Array2::zeros((n, offsets[heads.len()]));
    // d logit / d cos, per entry
    let mut dlogit_dcos = Array2::zeros(logits.dim());
    let mut per_head = Vec::with_capacity(heads.len());
    for (h, head) in heads.iter().enumerate() {
        let (w_hat, w_norms) = normalize_columns(head.weight.view(), head.task_id)?;
        let cos = x_hat.dot(&w_hat);
        for i in 0..n {
            for j in 0..head.num_classes() {
                let c = cos[[i, j]];
                let margin = if h != k {
                    0.0
                } else if j == labels[i] {
                    cfg.m_c + cfg.m_t
                } else {
                    cfg.m_t
                };
                let (v, d) = cos_plus_margin(c, margin);
                logits[[i, offsets[h] + j]] = cfg.s * v;
                dlogit_dcos[[i, offsets[h] + j]] = cfg.s * d;
            }
        }
        per_head.push((w_hat, w_norms, cos));
    }
    let targets: Vec<usize> = labels.iter().map(|&y| offsets[k] + y).collect();
    let (value, dz) = softmax_xent(&logits, &targets);
    let dcos_all = dz * dlogit_dcos;

    // accumulated over heads: G Ŵᵀ and the per-row sum of G ∘ C
    let mut proj = Array2::<f64>::zeros(features.dim());
    let mut row_dot = Array1::<f64>::zeros(n);
    let mut head_grads = BTreeMap::new();
    for (h, (head, (w_hat, w_norms, cos))) in heads.iter().zip(&per_head).enumerate() {
        let g = dcos_all.slice(ndarray::s![.., offsets[h]..offsets[h + 1]]);
        proj += &g.dot(&w_hat.t());
        let gc = &g * cos;
        row_dot += &gc.sum_axis(Axis(1));
        // dL/dw_j = [ (X̂ᵀ G)_j − (Σ_i G_ij c_ij) ŵ_j ] / ‖w_j‖
        let col_dot = gc.sum_axis(Axis(0));
        let mut w_grad = x_hat.t().dot(&g);
        w_grad -= &(w_hat * &col_dot.view().insert_axis(Axis(0)));
        w_grad /= &w_norms.view().insert_axis(Axis(0));
        head_grads.insert(
            head.task_id,
            ParamGrad {
                weight: w_grad,
                bias: Array1::zeros(head.num_classes()),
            },
        );
    }
    // dL/dx_i = [ (G Ŵᵀ)_i − (Σ_j G_ij c_ij) x̂_i ] / ‖x_i‖
    let mut feature_grad = proj - &x_hat * &row_dot.view().insert_axis(Axis(1));
    feature_grad /= &x_norms.view().insert_axis(Axis(1));
    Ok(LossResult {
        value,
        feature_grad,
        head_grads,
    })
}

/// Episodic distillation: mean squared difference between current features
/// and the representations stored alongside the memory samples.
pub fn ed_loss(current: ArrayView2<f64>, stored: ArrayView2<f64>) -> Result<LossResult> {
    if current.dim() != stored.dim() {
        return Err(shape_err("stored representation shape", current.dim(), stored.dim()));
    }
    let count = current.len();
    if count == 0 {
        return Err(Error::Input("episodic distillation on an empty batch".into()));
    }
    let diff = &current - &stored;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / count as f64;
    let feature_grad = diff * (2.0 / count as f64);
    Ok(LossResult {
        value,
        feature_grad,
        head_grads: BTreeMap::new(),
    })
}

/// Plain affine softmax cross-entropy on a single head.
pub fn softmax_ce_loss(features: ArrayView2<f64>, labels: &[usize], head: &TaskHead) -> Result<LossResult> {
    check_labels(labels, features.nrows(), head.num_classes())?;
    let logits = head.affine_logits(features)?;
    let (value, dz) = softmax_xent(&logits, labels);
    let feature_grad = dz.dot(&head.weight.t());
    let mut head_grads = BTreeMap::new();
    head_grads.insert(
        head.task_id,
        ParamGrad {
            weight: features.t().dot(&dz),
            bias: dz.sum_axis(Axis(0)),
        },
    );
    Ok(LossResult {
        value,
        feature_grad,
        head_grads,
    })
}

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor for relative errors, so coordinates with a vanishing
/// true gradient are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares `analytic` against central differences of `loss` around `point`
/// on every coordinate.
pub fn grad_check<F>(loss: F, point: ArrayView1<f64>, analytic: ArrayView1<f64>, h: f64) -> GradCheckReport
where
    F: FnMut(ArrayView1<f64>) -> f64,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    grad_check_coords(loss, point, analytic, h, &coords)
}

/// Like [`grad_check`] but on `count` coordinates sampled without replacement
/// (all coordinates when `count >= point.len()`).
pub fn grad_check_sampled<F>(
    loss: F,
    point: ArrayView1<f64>,
    analytic: ArrayView1<f64>,
    h: f64,
    count: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(ArrayView1<f64>) -> f64,
{
    let coords: Vec<usize> = if count >= point.len() {
        (0..point.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = index::sample(&mut rng, point.len(), count).into_vec();
        picked.sort_unstable();
        picked
    };
    grad_check_coords(loss, point, analytic, h, &coords)
}

fn grad_check_coords<F>(
    mut loss: F,
    point: ArrayView1<f64>,
    analytic: ArrayView1<f64>,
    h: f64,
    coords: &[usize],
) -> GradCheckReport
where
    F: FnMut(ArrayView1<f64>) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(point.len(), analytic.len(), "gradient length must match the point");
    let mut probe = point.to_owned();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: coords.len(),
    };
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = loss(probe.view());
        probe[i] = orig - h;
        let down = loss(probe.view());
        probe[i] = orig;
        let err = rel_error(analytic[i], (up - down) / (2.0 * h));
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn head(task: usize, w: Array2<f64>) -> TaskHead {
        let c = w.ncols();
        TaskHead::new(task, w, Array1::zeros(c)).unwrap()
    }

    #[test]
    fn tam_zero_margin_reference_value() {
        let heads = vec![head(0, Array2::eye(2))];
        let cfg = MarginConfig::new(0.0, 0.0, 1.0).unwrap();
        let r = tam_loss(array![[1.0, 0.0]].view(), &[0], &heads, 0, &cfg).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((r.value - expected).abs() < 1e-12);
        assert!((r.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn tam_class_margin_reference_value() {
        let heads = vec![head(0, Array2::eye(2))];
        let cfg = MarginConfig::new(0.5, 0.0, 1.0).unwrap();
        let r = tam_loss(array![[1.0, 0.0]].view(), &[0], &heads, 0, &cfg).unwrap();
        // feature sits on the clamp boundary, so cos(0 + 0.5) is evaluated
        // with sin θ = sqrt(1 − (1 − 1e-7)²)
        assert!((r.value - 0.3477).abs() < 1e-3, "{}", r.value);
        assert!(r.value > 0.3133);
    }

    #[test]
    fn tam_rejects_zero_norms() {
        let cfg = MarginConfig::new(0.1, 0.1, 4.0).unwrap();
        let heads = vec![head(0, Array2::eye(2))];
        let err = tam_loss(array![[0.0, 0.0]].view(), &[0], &heads, 0, &cfg).unwrap_err();
        assert!(matches!(err, Error::NumericDomain(_)));
        let heads = vec![head(0, array![[1.0, 0.0], [0.0, 0.0]])];
        let err = tam_loss(array![[1.0, 1.0]].view(), &[0], &heads, 0, &cfg).unwrap_err();
        assert!(matches!(err, Error::NumericDomain(_)));
    }

    #[test]
    fn cds_single_class_has_zero_loss() {
        let heads = vec![head(0, array![[0.3], [-0.7]])];
        let r = cds_loss(array![[1.0, 2.0], [0.5, -1.0]].view(), &[0, 0], &heads, 0).unwrap();
        assert!(r.value.abs() < 1e-15);
        assert!(r.feature_grad.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn softmax_ce_uniform_and_single_class() {
        let heads = head(0, Array2::zeros((3, 5)));
        let r = softmax_ce_loss(array![[1.0, 2.0, 3.0]].view(), &[2], &heads).unwrap();
        assert!((r.value - 5f64.ln()).abs() < 1e-12);
        let single = head(0, array![[1.0], [2.0], [3.0]]);
        let r = softmax_ce_loss(array![[1.0, 2.0, 3.0]].view(), &[0], &single).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let heads = vec![head(0, Array2::eye(2))];
        let x = array![[1.0, 0.5]];
        assert!(matches!(cds_loss(x.view(), &[2], &heads, 0), Err(Error::Input(_))));
        let cfg = MarginConfig::new(0.0, 0.0, 1.0).unwrap();
        assert!(matches!(tam_loss(x.view(), &[5], &heads, 0, &cfg), Err(Error::Input(_))));
        assert!(matches!(softmax_ce_loss(x.view(), &[2], &heads[0]), Err(Error::Input(_))));
    }

    #[test]
    fn no_heads_is_state_error() {
        let x = array![[1.0, 0.5]];
        assert!(matches!(cds_loss(x.view(), &[0], &[], 0), Err(Error::State(_))));
    }

    #[test]
    fn ed_loss_values() {
        let r = ed_loss(array![[1.0, 2.0]].view(), array![[0.0, 0.0]].view()).unwrap();
        assert_eq!(r.value, 2.5);
        assert_eq!(r.feature_grad, array![[1.0, 2.0]]);
        let same = array![[0.3, -0.2], [1.0, 4.0]];
        let r = ed_loss(same.view(), same.view()).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.feature_grad.iter().all(|&v| v == 0.0));
        assert!(r.head_grads.is_empty());
        assert!(matches!(
            ed_loss(same.view(), array![[1.0, 2.0]].view()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn margin_config_validation() {
        assert!(MarginConfig::new(-0.1, 0.0, 1.0).is_err());
        assert!(MarginConfig::new(2.0, 1.2, 1.0).is_err());
        assert!(MarginConfig::new(0.1, 0.1, 0.0).is_err());
        assert!(MarginConfig::new(0.01, 0.1, 32.0).is_ok());
    }

    #[test]
    fn tam_is_scale_invariant_in_head_columns_cds_is_not() {
        let w = array![[0.4, -0.3, 0.9], [0.2, 0.8, -0.5]];
        let mut w_scaled = w.clone();
        w_scaled.column_mut(1).mapv_inplace(|v| v * 3.7);
        let x = array![[0.7, -0.2], [0.1, 0.9]];
        let cfg = MarginConfig::new(0.2, 0.1, 5.0).unwrap();
        let a = tam_loss(x.view(), &[0, 2], &[head(0, w.clone())], 0, &cfg).unwrap();
        let b = tam_loss(x.view(), &[0, 2], &[head(0, w_scaled.clone())], 0, &cfg).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        let a = cds_loss(x.view(), &[0, 2], &[head(0, w)], 0).unwrap();
        let b = cds_loss(x.view(), &[0, 2], &[head(0, w_scaled)], 0).unwrap();
        assert!((a.value - b.value).abs() > 1e-6);
    }

    #[test]
    fn grad_check_on_quadratic_is_tight() {
        let cur = array![[0.3, -1.2, 0.5], [2.0, 0.1, -0.4]];
        let stored = array![[0.0, 0.5, 0.5], [1.0, -1.0, 0.3]];
        let r = ed_loss(cur.view(), stored.view()).unwrap();
        let flat = Array1::from_iter(cur.iter().copied());
        let analytic = Array1::from_iter(r.feature_grad.iter().copied());
        let report = grad_check(
            |p| {
                let m = p.to_owned().into_shape_with_order((2, 3)).unwrap();
                ed_loss(m.view(), stored.view()).unwrap().value
            },
            flat.view(),
            analytic.view(),
            1e-5,
        );
        assert_eq!(report.checked, 6);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn grad_check_flags_wrong_gradient() {
        let x = array![1.0, 2.0];
        let wrong = array![2.0, 2.0]; // d/dx of x0² + x1² is [2, 4]
        let report = grad_check(|p| p.dot(&p), x.view(), wrong.view(), 1e-5);
        assert_eq!(report.worst_index, 1);
        assert!(report.max_rel_error > 0.4);
    }
}
