//! Dense feed-forward trunk with explicit forward/backward passes.
//!
//! The trunk maps a batch `n × in_0` to penultimate features `n × d`. Hidden
//! layers are followed by a rectifier; the last layer is left linear so the
//! features can point anywhere on the sphere once normalized by the angular
//! losses.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::loss::TaskHead;

/// Gradient (or parameter) pair for an affine map: `weight` plus `bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ParamGrad {
    pub fn zeros(weight_shape: (usize, usize), bias_len: usize) -> Self {
        Self {
            weight: Array2::zeros(weight_shape),
            bias: Array1::zeros(bias_len),
        }
    }

    fn check_same_shape(&self, other: &ParamGrad, what: &str) -> Result<()> {
        if self.weight.dim() != other.weight.dim() {
            return Err(shape_err(what, self.weight.dim(), other.weight.dim()));
        }
        if self.bias.len() != other.bias.len() {
            return Err(shape_err(what, self.bias.len(), other.bias.len()));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        self.weight += &other.weight;
        self.bias += &other.bias;
    }

    pub fn scale(&mut self, factor: f64) {
        self.weight *= factor;
        self.bias *= factor;
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Gradients for the trunk layers and for any subset of task heads.
///
/// Heads are keyed by task index; a head absent from the map received no
/// gradient.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub trunk: Vec<ParamGrad>,
    pub heads: BTreeMap<usize, ParamGrad>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            trunk: net
                .layers
                .iter()
                .map(|l| ParamGrad::zeros(l.weight.dim(), l.bias.len()))
                .collect(),
            heads: BTreeMap::new(),
        }
    }

    /// Elementwise sum. Trunk shapes must agree; head maps are merged, adding
    /// where both sides carry the same task.
    pub fn add(&self, other: &Gradients) -> Result<Gradients> {
        if self.trunk.len() != other.trunk.len() {
            return Err(shape_err("trunk layer count", self.trunk.len(), other.trunk.len()));
        }
        for (a, b) in self.trunk.iter().zip(&other.trunk) {
            a.check_same_shape(b, "trunk gradient")?;
        }
        for (k, b) in &other.heads {
            if let Some(a) = self.heads.get(k) {
                a.check_same_shape(b, "head gradient")?;
            }
        }
        let mut out = self.clone();
        for (a, b) in out.trunk.iter_mut().zip(&other.trunk) {
            a.add_assign(b);
        }
        for (k, b) in &other.heads {
            match out.heads.get_mut(k) {
                Some(a) => a.add_assign(b),
                None => {
                    out.heads.insert(*k, b.clone());
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, factor: f64) {
        self.trunk.iter_mut().for_each(|g| g.scale(factor));
        self.heads.values_mut().for_each(|g| g.scale(factor));
    }

    pub fn is_finite(&self) -> bool {
        self.trunk.iter().all(ParamGrad::is_finite) && self.heads.values().all(ParamGrad::is_finite)
    }

    /// Trunk gradients flattened in the same order as [`Network::params_flat`].
    pub fn trunk_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.trunk {
            out.extend(g.weight.iter().copied());
            out.extend(g.bias.iter().copied());
        }
        out
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    preactivation: Array2<f64>,
}

/// Affine layer `y = x Wᵀ + b` with `weight` stored `out × in`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    weight: Array2<f64>,
    bias: Array1<f64>,
    cache: Option<LayerCache>,
}

impl DenseLayer {
    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(shape_err("bias length", weight.nrows(), bias.len()));
        }
        if weight.nrows() == 0 || weight.ncols() == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        Ok(Self {
            weight,
            bias,
            cache: None,
        })
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn affine(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }
}

// Caches are transient and do not take part in equality.
impl PartialEq for DenseLayer {
    fn eq(&self, other: &Self) -> bool {
        self.weight == other.weight && self.bias == other.bias
    }
}

/// Shared trunk: dense layers with rectifiers between them and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<DenseLayer>,
}

/// Glorot-uniform `rows × cols` matrix with bound `sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot_matrix(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let bound = glorot_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite glorot bound");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Builds a trunk for `layer_sizes = [in_0, h_1, ..., d]` with Glorot-uniform
/// weights and zero biases. Deterministic in `seed`.
pub fn init_network(layer_sizes: &[usize], seed: u64) -> Result<Network> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "layer_sizes needs at least 2 entries, got {}",
            layer_sizes.len()
        )));
    }
    if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
        return Err(Error::Config(format!("layer_sizes[{pos}] must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            DenseLayer {
                weight: glorot_matrix(fan_out, fan_in, fan_in, fan_out, &mut rng),
                bias: Array1::zeros(fan_out),
                cache: None,
            }
        })
        .collect();
    Ok(Network { layers })
}

impl Network {
    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(shape_err(
                    &format!("input width of layer {}", i + 1),
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    fn check_input(&self, batch: &ArrayView2<f64>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(shape_err("batch width", self.input_dim(), batch.ncols()));
        }
        Ok(())
    }

    /// Forward pass that records per-layer caches for [`Network::backward`].
    pub fn forward(&mut self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let last = self.layers.len() - 1;
        let mut x = batch.to_owned();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let z = layer.affine(&x.view());
            let next = if i == last { z.clone() } else { z.mapv(relu) };
            layer.cache = Some(LayerCache {
                input: x,
                preactivation: z,
            });
            x = next;
        }
        Ok(x)
    }

    /// Forward pass without touching the caches. Safe on a shared reference.
    pub fn infer(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&batch)?;
        let last = self.layers.len() - 1;
        let mut x = batch.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&x.view());
            x = if i == last { z } else { z.mapv(relu) };
        }
        Ok(x)
    }

    /// Reverse pass for the batch seen by the last [`Network::forward`].
    /// Consumes the caches.
    pub fn backward(&mut self, grad_wrt_features: ArrayView2<f64>) -> Result<Gradients> {
        let Some(top) = self.layers.last().and_then(|l| l.cache.as_ref()) else {
            return Err(Error::State("backward called without a preceding forward".into()));
        };
        if self.layers.iter().any(|l| l.cache.is_none()) {
            return Err(Error::State("backward called without a preceding forward".into()));
        }
        let expected = top.preactivation.dim();
        if grad_wrt_features.dim() != expected {
            return Err(shape_err("feature gradient", expected, grad_wrt_features.dim()));
        }

        let last = self.layers.len() - 1;
        let mut trunk = Vec::with_capacity(self.layers.len());
        let mut upstream = grad_wrt_features.to_owned();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let cache = layer.cache.take().expect("checked above");
            if i != last {
                Zip::from(&mut upstream)
                    .and(&cache.preactivation)
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            let weight_grad = upstream.t().dot(&cache.input);
            let bias_grad = upstream.sum_axis(Axis(0));
            let next = upstream.dot(&layer.weight);
            trunk.push(ParamGrad {
                weight: weight_grad,
                bias: bias_grad,
            });
            upstream = next;
        }
        trunk.reverse();
        Ok(Gradients {
            trunk,
            heads: BTreeMap::new(),
        })
    }

    /// Applies `p ← p − lr·g` to every trunk layer.
    pub fn apply_gradients(&mut self, grads: &[ParamGrad], lr: f64) -> Result<()> {
        if grads.len() != self.layers.len() {
            return Err(shape_err("trunk layer count", self.layers.len(), grads.len()));
        }
        for (layer, g) in self.layers.iter().zip(grads) {
            if layer.weight.dim() != g.weight.dim() || layer.bias.len() != g.bias.len() {
                return Err(shape_err(
                    "trunk gradient",
                    (layer.weight.dim(), layer.bias.len()),
                    (g.weight.dim(), g.bias.len()),
                ));
            }
        }
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.weight.scaled_add(-lr, &g.weight);
            layer.bias.scaled_add(-lr, &g.bias);
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// All parameters flattened: per layer, weight (row-major) then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(shape_err("flat parameter length", self.num_params(), params.len()));
        }
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.params_flat().iter().all(|v| v.is_finite())
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Single SGD step over the trunk and every head named in `grads.heads`.
///
/// All shapes are validated before anything is written, so a failed call
/// leaves the parameters untouched.
pub fn sgd_step(net: &mut Network, heads: &mut [TaskHead], grads: &Gradients, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive and finite, got {lr}")));
    }
    if !grads.is_finite() {
        return Err(Error::NumericDomain("non-finite gradient passed to sgd_step".into()));
    }
    let mut targets = Vec::with_capacity(grads.heads.len());
    for (&k, g) in &grads.heads {
        let pos = heads
            .iter()
            .position(|h| h.task_id() == k)
            .ok_or_else(|| Error::State(format!("gradient for missing head {k}")))?;
        let head = &heads[pos];
        if head.weight().dim() != g.weight.dim() || head.bias().len() != g.bias.len() {
            return Err(shape_err(
                &format!("head {k} gradient"),
                (head.weight().dim(), head.bias().len()),
                (g.weight.dim(), g.bias.len()),
            ));
        }
        targets.push((pos, g));
    }
    net.apply_gradients(&grads.trunk, lr)?;
    for (pos, g) in targets {
        heads[pos].apply_gradient(g, lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_shapes_and_bound() {
        let net = init_network(&[4, 3], 7).unwrap();
        assert_eq!(net.layers().len(), 1);
        assert_eq!(net.layers()[0].weight().dim(), (3, 4));
        assert_eq!(net.layers()[0].bias().len(), 3);
        let bound = (6.0f64 / 7.0).sqrt();
        assert!((bound - 0.9258).abs() < 1e-4);
        assert!(net.params_flat().iter().all(|w| w.is_finite() && w.abs() <= bound));
        assert!(net.layers()[0].bias().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_network(&[784, 256, 256], 1).unwrap();
        let b = init_network(&[784, 256, 256], 1).unwrap();
        let (pa, pb) = (a.params_flat(), b.params_flat());
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = init_network(&[784, 256, 256], 2).unwrap();
        assert_ne!(pa, c.params_flat());
    }

    #[test]
    fn init_rejects_bad_sizes() {
        assert!(matches!(init_network(&[], 0), Err(Error::Config(_))));
        assert!(matches!(init_network(&[4], 0), Err(Error::Config(_))));
        assert!(matches!(init_network(&[4, 0, 3], 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_batch_zero_bias_gives_zero_features() {
        let mut net = init_network(&[5, 4, 3], 3).unwrap();
        let out = net.forward(Array2::zeros((2, 5)).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trunk_output_is_not_rectified() {
        let layer = DenseLayer::from_parts(Array2::eye(2), Array1::zeros(2)).unwrap();
        let mut net = Network::from_layers(vec![layer]).unwrap();
        let out = net.forward(array![[1.0, -1.0]].view()).unwrap();
        assert_eq!(out, array![[1.0, -1.0]]);
    }

    #[test]
    fn hidden_layers_are_rectified() {
        let l0 = DenseLayer::from_parts(Array2::eye(2), Array1::zeros(2)).unwrap();
        let l1 = DenseLayer::from_parts(Array2::eye(2), Array1::zeros(2)).unwrap();
        let net = Network::from_layers(vec![l0, l1]).unwrap();
        assert_eq!(net.infer(array![[1.0, -1.0]].view()).unwrap(), array![[1.0, 0.0]]);
    }

    #[test]
    fn forward_matches_hand_rolled_matmul() {
        let mut net = init_network(&[4, 3], 11).unwrap();
        // give the biases some value so they are exercised
        let mut params = net.params_flat();
        let n = params.len();
        params[n - 3..].copy_from_slice(&[0.1, -0.2, 0.3]);
        net.set_params_flat(&params).unwrap();
        let x = random_matrix(5, 4, 12);
        let out = net.forward(x.view()).unwrap();
        let w = net.layers()[0].weight();
        let b = net.layers()[0].bias();
        for i in 0..5 {
            for o in 0..3 {
                let mut acc = b[o];
                for k in 0..4 {
                    acc += x[[i, k]] * w[[o, k]];
                }
                assert!((acc - out[[i, o]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mut net = init_network(&[4, 3], 1).unwrap();
        assert!(matches!(net.forward(Array2::zeros((1, 5)).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut net = init_network(&[4, 3], 1).unwrap();
        assert!(matches!(net.backward(Array2::zeros((1, 3)).view()), Err(Error::State(_))));
        net.forward(Array2::zeros((1, 4)).view()).unwrap();
        net.backward(Array2::zeros((1, 3)).view()).unwrap();
        // caches were consumed
        assert!(matches!(net.backward(Array2::zeros((1, 3)).view()), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut net = init_network(&[4, 6, 3], 5).unwrap();
        net.forward(random_matrix(3, 4, 6).view()).unwrap();
        let g = net.backward(Array2::zeros((3, 3)).view()).unwrap();
        assert!(g.trunk_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_sum_loss_weight_grad_is_column_sums() {
        let mut net = init_network(&[4, 3], 5).unwrap();
        let x = random_matrix(6, 4, 8);
        net.forward(x.view()).unwrap();
        let g = net.backward(Array2::ones((6, 3)).view()).unwrap();
        let col_sums = x.sum_axis(Axis(0));
        for o in 0..3 {
            for k in 0..4 {
                assert!((g.trunk[0].weight[[o, k]] - col_sums[k]).abs() < 1e-12);
            }
            assert!((g.trunk[0].bias[o] - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5u64 {
            let mut net = init_network(&[5, 7, 6, 4], 100 + seed).unwrap();
            let x = random_matrix(3, 5, 200 + seed);
            let r = random_matrix(3, 4, 300 + seed);
            net.forward(x.view()).unwrap();
            let analytic = net.backward(r.view()).unwrap().trunk_flat();
            let base = net.params_flat();
            let h = 1e-5;
            let loss = |net: &Network| (&net.infer(x.view()).unwrap() * &r).sum();
            let mut probe = net.clone();
            for i in 0..base.len() {
                let mut p = base.clone();
                p[i] += h;
                probe.set_params_flat(&p).unwrap();
                let up = loss(&probe);
                p[i] -= 2.0 * h;
                probe.set_params_flat(&p).unwrap();
                let down = loss(&probe);
                let numeric = (up - down) / (2.0 * h);
                let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
                assert!(
                    (numeric - analytic[i]).abs() / denom < 1e-4,
                    "param {i}: numeric {numeric} analytic {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn sgd_arithmetic_and_zero_grads() {
        let layer = DenseLayer::from_parts(array![[1.0]], array![0.0]).unwrap();
        let mut net = Network::from_layers(vec![layer]).unwrap();
        let mut grads = Gradients::zeros_like(&net);
        sgd_step(&mut net, &mut [], &grads, 0.1).unwrap();
        assert_eq!(net.params_flat(), vec![1.0, 0.0]);
        grads.trunk[0].weight[[0, 0]] = 0.5;
        sgd_step(&mut net, &mut [], &grads, 0.1).unwrap();
        assert_eq!(net.params_flat()[0], 0.95);
    }

    #[test]
    fn sgd_rejects_bad_lr_and_shapes() {
        let mut net = init_network(&[3, 2], 0).unwrap();
        let grads = Gradients::zeros_like(&net);
        assert!(sgd_step(&mut net, &mut [], &grads, 0.0).is_err());
        assert!(sgd_step(&mut net, &mut [], &grads, -1.0).is_err());
        let other = init_network(&[3, 4], 0).unwrap();
        let wrong = Gradients::zeros_like(&other);
        let before = net.params_flat();
        assert!(matches!(sgd_step(&mut net, &mut [], &wrong, 0.1), Err(Error::Shape(_))));
        assert_eq!(before, net.params_flat());
    }

    #[test]
    fn identical_steps_stay_bit_identical() {
        let mut a = init_network(&[6, 5, 4], 9).unwrap();
        let mut b = init_network(&[6, 5, 4], 9).unwrap();
        let x = random_matrix(4, 6, 1);
        let r = random_matrix(4, 4, 2);
        for _ in 0..3 {
            a.forward(x.view()).unwrap();
            let g = a.backward(r.view()).unwrap();
            sgd_step(&mut a, &mut [], &g, 0.05).unwrap();
            sgd_step(&mut b, &mut [], &g, 0.05).unwrap();
            b.forward(x.view()).unwrap();
            b.backward(r.view()).unwrap();
        }
        let (pa, pb) = (a.params_flat(), b.params_flat());
        assert!(pa.iter().zip(&pb).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn gradient_addition_is_elementwise_and_merges_heads() {
        let net = init_network(&[2, 2], 0).unwrap();
        let mut a = Gradients::zeros_like(&net);
        let mut b = Gradients::zeros_like(&net);
        a.trunk[0].weight.fill(1.0);
        b.trunk[0].weight.fill(2.0);
        a.heads.insert(0, ParamGrad::zeros((2, 3), 3));
        let mut hb = ParamGrad::zeros((2, 3), 3);
        hb.bias.fill(1.5);
        b.heads.insert(0, hb.clone());
        b.heads.insert(1, hb);
        let sum = a.add(&b).unwrap();
        assert!(sum.trunk[0].weight.iter().all(|&v| v == 3.0));
        assert_eq!(sum.heads.len(), 2);
        assert!(sum.heads[&0].bias.iter().all(|&v| v == 1.5));
    }
}
