use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::TensorF64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            c => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fully connected layer; `weight` is `out x in`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("layer dims must be positive".into()));
        }
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "layer {in_dim}->{out_dim} needs {} weights and {out_dim} biases, got {} and {}",
                in_dim * out_dim,
                weight.len(),
                bias.len()
            )));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
            activation,
        })
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Self {
            in_dim: dim,
            out_dim: dim,
            weight,
            bias: vec![0.0; dim],
            activation: Activation::Identity,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Pre-activations `z = x W^T + b` for a `rows x in` batch.
    fn affine(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut z = Vec::with_capacity(rows * self.out_dim);
        for r in 0..rows {
            let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let wr = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                let mut acc = self.bias[o];
                for (w, v) in wr.iter().zip(xr) {
                    acc += w * v;
                }
                z.push(acc);
            }
        }
        z
    }
}

/// Gradients for one layer, same layout as the layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients for a whole segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(segment: &Segment) -> Self {
        Self {
            layers: segment
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Same order as [`Segment::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Adds `scale * flat[k]` to the k-th flattened gradient entry.
    pub fn add_flat(&mut self, flat: &[f64], scale: f64) {
        let mut k = 0;
        for l in &mut self.layers {
            for g in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *g += scale * flat[k];
                k += 1;
            }
        }
    }

    /// Adds the gradient of `decay / 2 * |W|^2` over `segment`'s weights;
    /// biases are not decayed.
    pub fn add_weight_decay(&mut self, segment: &Segment, decay: f64) {
        if decay == 0.0 {
            return;
        }
        for (g, l) in self.layers.iter_mut().zip(&segment.layers) {
            for (gw, w) in g.weight.iter_mut().zip(&l.weight) {
                *gw += decay * w;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|&g| g == 0.0))
    }
}

/// Cached per-layer inputs and pre-activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    segment_uid: u64,
    version: u64,
    rows: usize,
    inputs: Vec<Vec<f64>>,
    pre_activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn depth(&self) -> usize {
        self.inputs.len()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// An ordered stack of dense layers plus SGD momentum buffers.
///
/// A segment is the unit of ownership in the relay: exactly one role holds
/// it, and once frozen it rejects every parameter update.
#[derive(Debug)]
pub struct Segment {
    layers: Vec<DenseLayer>,
    velocity: Vec<LayerGrads>,
    frozen: bool,
    uid: u64,
    version: u64,
}

impl Clone for Segment {
    /// Clones get a fresh identity, so traces recorded on the original are
    /// not accepted by the copy.
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            velocity: self.velocity.clone(),
            frozen: self.frozen,
            uid: fresh_uid(),
            version: 0,
        }
    }
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Segment {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("segment needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} but layer {} expects {}",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        let velocity = layers
            .iter()
            .map(|l| LayerGrads {
                weight: vec![0.0; l.weight.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        Ok(Self {
            layers,
            velocity,
            frozen: false,
            uid: fresh_uid(),
            version: 0,
        })
    }

    /// Randomly initialised stack over `dims` (e.g. `[32, 128, 32]` is two
    /// layers). Hidden layers use ReLU; the last uses `last_activation`.
    pub fn init(dims: &[usize], last_activation: Activation, seed: u64) -> Result<Self> {
        Self::init_with(dims, Activation::Relu, last_activation, seed)
    }

    /// Like [`Segment::init`] with a chosen hidden activation. Weights are
    /// uniform with variance `2 / fan_in` under ReLU and `1 / fan_in`
    /// otherwise; biases are zero.
    pub fn init_with(
        dims: &[usize],
        hidden: Activation,
        last_activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape("need at least input and output width".into()));
        }
        let mut r = rng::seeded(seed);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (k, w) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let act = if k + 2 == dims.len() { last_activation } else { hidden };
            let gain = if act == Activation::Relu { 6.0 } else { 3.0 };
            let bound = (gain / fan_in.max(1) as f64).sqrt();
            let weight = (0..fan_in * fan_out)
                .map(|_| rng::uniform_range(&mut r, -bound, bound))
                .collect();
            layers.push(DenseLayer::new(fan_in, fan_out, weight, vec![0.0; fan_out], act)?);
        }
        Self::new(layers)
    }

    /// Concatenates segments into one, checking interface widths.
    pub fn concat(parts: &[&Segment]) -> Result<Self> {
        let layers = parts
            .iter()
            .flat_map(|s| s.layers.iter().cloned())
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn momentum_state(&self) -> &[LayerGrads] {
        &self.velocity
    }

    pub fn forward(&self, batch: &TensorF64) -> Result<(TensorF64, ForwardTrace)> {
        if !batch.is_matrix() || batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "segment expects rows of width {}, got shape {:?}",
                self.input_dim(),
                batch.shape()
            )));
        }
        let rows = batch.rows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = batch.values().to_vec();
        for layer in &self.layers {
            let z = layer.affine(&x, rows);
            let a: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
            inputs.push(x);
            pre.push(z);
            x = a;
        }
        let out = TensorF64::from_parts(vec![rows, self.output_dim()], x);
        let trace = ForwardTrace {
            segment_uid: self.uid,
            version: self.version,
            rows,
            inputs,
            pre_activations: pre,
        };
        Ok((out, trace))
    }

    /// Forward pass without keeping the trace.
    pub fn infer(&self, batch: &TensorF64) -> Result<TensorF64> {
        if !batch.is_matrix() || batch.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "segment expects rows of width {}, got shape {:?}",
                self.input_dim(),
                batch.shape()
            )));
        }
        let rows = batch.rows();
        let mut x = batch.values().to_vec();
        for layer in &self.layers {
            let mut z = layer.affine(&x, rows);
            for v in &mut z {
                *v = layer.activation.apply(*v);
            }
            x = z;
        }
        Ok(TensorF64::from_parts(vec![rows, self.output_dim()], x))
    }

    /// Exact gradients of a loss with respect to the parameters and the
    /// segment input, given `dL/d(output)`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        upstream: &TensorF64,
    ) -> Result<(ParamGrads, TensorF64)> {
        if trace.segment_uid != self.uid || trace.version != self.version {
            return Err(Error::StaleTrace(format!(
                "trace recorded for segment {}@{}, this is {}@{}",
                trace.segment_uid, trace.version, self.uid, self.version
            )));
        }
        if trace.depth() != self.layers.len() {
            return Err(Error::StaleTrace("trace depth differs from layer count".into()));
        }
        let rows = trace.rows;
        if upstream.shape() != [rows, self.output_dim()] {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output [{rows}, {}]",
                upstream.shape(),
                self.output_dim()
            )));
        }
        let mut grads = ParamGrads::zeros_like(self);
        let mut g = upstream.values().to_vec();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let (n_in, n_out) = (layer.in_dim, layer.out_dim);
            let z = &trace.pre_activations[k];
            let x = &trace.inputs[k];
            let dz: Vec<f64> = g
                .iter()
                .zip(z)
                .map(|(&gv, &zv)| gv * layer.activation.derivative(zv))
                .collect();
            let lg = &mut grads.layers[k];
            for r in 0..rows {
                let dzr = &dz[r * n_out..(r + 1) * n_out];
                let xr = &x[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    let d = dzr[o];
                    lg.bias[o] += d;
                    let wrow = &mut lg.weight[o * n_in..(o + 1) * n_in];
                    for (w, &xv) in wrow.iter_mut().zip(xr) {
                        *w += d * xv;
                    }
                }
            }
            let mut dx = vec![0.0; rows * n_in];
            for r in 0..rows {
                let dzr = &dz[r * n_out..(r + 1) * n_out];
                let dxr = &mut dx[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    let d = dzr[o];
                    let wrow = &layer.weight[o * n_in..(o + 1) * n_in];
                    for (acc, &w) in dxr.iter_mut().zip(wrow) {
                        *acc += d * w;
                    }
                }
            }
            g = dx;
        }
        let input_grad = TensorF64::from_parts(vec![rows, self.input_dim()], g);
        Ok((grads, input_grad))
    }

    /// Momentum SGD: `v = momentum * v + g; w = w - lr * v`.
    pub fn sgd_step(&mut self, grads: &ParamGrads, lr: f64, momentum: f64) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.weight.len() != l.weight.len() || g.bias.len() != l.bias.len())
        {
            return Err(Error::Shape("gradient layout differs from segment".into()));
        }
        for ((layer, vel), g) in self.layers.iter_mut().zip(&mut self.velocity).zip(&grads.layers) {
            for ((w, v), &gv) in layer.weight.iter_mut().zip(&mut vel.weight).zip(&g.weight) {
                *v = momentum * *v + gv;
                *w -= lr * *v;
            }
            for ((b, v), &gv) in layer.bias.iter_mut().zip(&mut vel.bias).zip(&g.bias) {
                *v = momentum * *v + gv;
                *b -= lr * *v;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Parameters in the fixed order: for each layer, weights row-major
    /// then bias.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Inverse of [`Segment::flatten_params`]; rejected on frozen segments.
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen);
        }
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flat parameters"));
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            for p in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *p = *it.next().unwrap();
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Rebuilds a segment with this architecture from flattened parameters.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Segment> {
        let mut s = Segment::new(self.layers.clone())?;
        s.set_flat_params(flat)?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg_3x4(seed: u64) -> Segment {
        Segment::init(&[3, 4, 2], Activation::Identity, seed).unwrap()
    }

    #[test]
    fn identity_layer_passes_through() {
        let s = Segment::new(vec![DenseLayer::identity(3)]).unwrap();
        let x = TensorF64::matrix(2, 3, vec![1., -2., 3., 0.5, 0., -7.]).unwrap();
        let (y, _) = s.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_layer_clamps_negatives() {
        let mut l = DenseLayer::identity(2);
        l.activation = Activation::Relu;
        let s = Segment::new(vec![l]).unwrap();
        let x = TensorF64::matrix(1, 2, vec![-1.0, 2.0]).unwrap();
        assert_eq!(s.forward(&x).unwrap().0.values(), &[0.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let s = seg_3x4(1);
        let x = TensorF64::matrix(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(s.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn new_rejects_incompatible_layers() {
        let a = DenseLayer::identity(3);
        let b = DenseLayer::identity(2);
        assert!(Segment::new(vec![a, b]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let s = seg_3x4(2);
        let x = TensorF64::matrix(2, 3, vec![0.3, -0.1, 0.7, 1.0, 0.2, -0.4]).unwrap();
        let (_, tr) = s.forward(&x).unwrap();
        let (g, dx) = s.backward(&tr, &TensorF64::zeros(vec![2, 2])).unwrap();
        assert!(g.is_zero());
        assert!(dx.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_trace_rejected_after_update() {
        let mut s = seg_3x4(3);
        let x = TensorF64::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let (_, tr) = s.forward(&x).unwrap();
        let g = ParamGrads::zeros_like(&s);
        s.sgd_step(&g, 0.1, 0.0).unwrap();
        assert!(matches!(
            s.backward(&tr, &TensorF64::zeros(vec![1, 2])),
            Err(Error::StaleTrace(_))
        ));
    }

    #[test]
    fn trace_from_other_segment_rejected() {
        let a = seg_3x4(4);
        let b = a.clone();
        let x = TensorF64::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let (_, tr) = a.forward(&x).unwrap();
        assert!(b.backward(&tr, &TensorF64::zeros(vec![1, 2])).is_err());
    }

    #[test]
    fn plain_gradient_step() {
        let mut s = seg_3x4(5);
        let before = s.flatten_params();
        let mut g = ParamGrads::zeros_like(&s);
        let flat_g: Vec<f64> = (0..s.param_count()).map(|k| k as f64 * 0.01).collect();
        g.add_flat(&flat_g, 1.0);
        s.sgd_step(&g, 1.0, 0.0).unwrap();
        for ((a, b), gk) in before.iter().zip(s.flatten_params()).zip(&flat_g) {
            assert_eq!(b, a - gk);
        }
    }

    #[test]
    fn zero_grad_zero_velocity_keeps_params() {
        let mut s = seg_3x4(6);
        let before = s.flatten_params();
        s.sgd_step(&ParamGrads::zeros_like(&s), 0.5, 0.9).unwrap();
        assert_eq!(before, s.flatten_params());
    }

    #[test]
    fn momentum_two_steps_match_hand_recurrence() {
        // Scalar model: w0 = 1, lr = 0.1, mu = 0.9, grads 0.5 then -0.2.
        // v1 = 0.5,  w1 = 1 - 0.05 = 0.95
        // v2 = 0.45 - 0.2 = 0.25, w2 = 0.95 - 0.025 = 0.925
        let l = DenseLayer::new(1, 1, vec![1.0], vec![0.0], Activation::Identity).unwrap();
        let mut s = Segment::new(vec![l]).unwrap();
        let step = |s: &mut Segment, gw: f64| {
            let g = ParamGrads {
                layers: vec![LayerGrads {
                    weight: vec![gw],
                    bias: vec![0.0],
                }],
            };
            s.sgd_step(&g, 0.1, 0.9).unwrap();
        };
        step(&mut s, 0.5);
        assert!((s.layers()[0].weight[0] - 0.95).abs() < 1e-15);
        step(&mut s, -0.2);
        assert!((s.layers()[0].weight[0] - 0.925).abs() < 1e-15);
        assert!((s.momentum_state()[0].weight[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn frozen_rejects_updates() {
        let mut s = seg_3x4(7);
        s.freeze();
        assert!(matches!(
            s.sgd_step(&ParamGrads::zeros_like(&s), 0.1, 0.0),
            Err(Error::Frozen)
        ));
        let flat = s.flatten_params();
        assert!(matches!(s.set_flat_params(&flat), Err(Error::Frozen)));
    }

    #[test]
    fn flatten_counts_and_roundtrips() {
        let l = DenseLayer::new(2, 2, vec![1., 2., 3., 4.], vec![5., 6.], Activation::Relu).unwrap();
        let s = Segment::new(vec![l]).unwrap();
        assert_eq!(s.flatten_params(), vec![1., 2., 3., 4., 5., 6.]);
        let t = s.unflatten_like(&s.flatten_params()).unwrap();
        assert_eq!(s, t);
    }

    #[test]
    fn flatten_order_stable_across_runs() {
        let a = Segment::init(&[5, 7, 3], Activation::Identity, 42).unwrap();
        let b = Segment::init(&[5, 7, 3], Activation::Identity, 42).unwrap();
        assert_eq!(a.flatten_params(), b.flatten_params());
        assert_eq!(a.flatten_params(), a.flatten_params());
    }
}
