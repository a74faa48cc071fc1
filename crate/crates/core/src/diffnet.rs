//! A small dense-network engine: batched forward passes, exact reverse-mode
//! gradients for scalar losses, and Adam.
//!
//! Hidden layers use tanh, the output layer is affine. Losses supply their own
//! derivative with respect to the network outputs; the network backpropagates
//! it to every weight and bias.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView, ArrayView2, ArrayViewMut, Axis, Dimension, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in_dim x out_dim`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { weight: Array2::zeros((in_dim, out_dim)), bias: Array1::zeros(out_dim) }
    }

    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights and biases.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((in_dim, out_dim), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(out_dim, || rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer inputs recorded during a forward pass. `acts[0]` is the network input,
/// `acts[l]` is the (post-tanh) output of layer `l - 1`, and the last entry is
/// the network output.
#[derive(Debug, Clone)]
pub struct Trace {
    pub acts: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("trace always holds the input")
    }

    /// Activations of the last hidden layer (the input itself for a
    /// single-layer network).
    pub fn penultimate(&self) -> &Array2<f64> {
        &self.acts[self.acts.len() - 2]
    }
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(layer_sizes: &[usize], rng: &mut R) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output sizes");
        let layers = layer_sizes.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn zeros(layer_sizes: &[usize]) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output sizes");
        let layers = layer_sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Self { layers }
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layers[0].in_dim()];
        sizes.extend(self.layers.iter().map(Dense::out_dim));
        sizes
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch { expected: self.in_dim(), got: x.ncols() });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut h = x.dot(&self.layers[0].weight) + &self.layers[0].bias;
        if last > 0 {
            h.mapv_inplace(f64::tanh);
        }
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            h = h.dot(&layer.weight) + &layer.bias;
            if l < last {
                h.mapv_inplace(f64::tanh);
            }
        }
        Ok(h)
    }

    pub fn forward_traced(&self, x: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut h = acts[l].dot(&layer.weight) + &layer.bias;
            if l < last {
                h.mapv_inplace(f64::tanh);
            }
            acts.push(h);
        }
        Ok(Trace { acts })
    }

    /// Backpropagates `d_out` (dLoss/dOutput, same shape as the output) through
    /// a recorded forward pass.
    pub fn backward(&self, trace: &Trace, d_out: ArrayView2<f64>) -> Gradients {
        let last = self.layers.len() - 1;
        let mut grads: Vec<Option<Dense>> = vec![None; self.layers.len()];
        let mut delta = d_out.to_owned();
        for l in (0..=last).rev() {
            if l < last {
                // tanh'(z) = 1 - tanh(z)^2
                delta.zip_mut_with(&trace.acts[l + 1], |d, &a| *d *= 1.0 - a * a);
            }
            let weight = trace.acts[l].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if l > 0 {
                delta = delta.dot(&self.layers[l].weight.t());
            }
            grads[l] = Some(Dense { weight, bias });
        }
        Gradients { layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect() }
    }

    /// Loss value and parameter gradients. `loss` maps the batch output to the
    /// scalar loss and its gradient with respect to that output.
    pub fn grad<F>(&self, x: ArrayView2<f64>, loss: F) -> Result<(f64, Gradients)>
    where
        F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
    {
        let trace = self.forward_traced(x)?;
        let (value, d_out) = loss(trace.output());
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok((value, self.backward(&trace, d_out.view())))
    }

    /// Activations of the last hidden layer.
    pub fn penultimate(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let trace = self.forward_traced(x)?;
        Ok(trace.penultimate().clone())
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch { expected: self.num_params(), got: flat.len() });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            layer_sizes: self.layer_sizes(),
            tensors: self
                .layers
                .iter()
                .flat_map(|l| [l.weight.iter().copied().collect(), l.bias.to_vec()])
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let sizes = &ckpt.layer_sizes;
        if sizes.len() < 2 || ckpt.tensors.len() != 2 * (sizes.len() - 1) {
            return Err(Error::Checkpoint(format!(
                "{} tensors for layer sizes {:?}",
                ckpt.tensors.len(),
                sizes
            )));
        }
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (l, w) in sizes.windows(2).enumerate() {
            let weight = Array2::from_shape_vec((w[0], w[1]), ckpt.tensors[2 * l].clone())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            let bias = &ckpt.tensors[2 * l + 1];
            if bias.len() != w[1] {
                return Err(Error::Checkpoint(format!("layer {l} bias has {} entries", bias.len())));
            }
            layers.push(Dense { weight, bias: Array1::from(bias.clone()) });
        }
        Ok(Self { layers })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_checkpoint(&ckpt)
    }
}

/// On-disk network format: a layer-size header followed by the weight and
/// bias tensors of each layer, flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layer_sizes: Vec<usize>,
    pub tensors: Vec<Vec<f64>>,
}

/// Parameter-shaped gradient (or moment) buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self { layers: net.layers.iter().map(|l| Dense::zeros(l.in_dim(), l.out_dim())).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weight *= k;
            l.bias *= k;
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        Mlp { layers: self.layers.clone() }.to_flat()
    }

    fn to_checkpoint(&self) -> Checkpoint {
        Mlp { layers: self.layers.clone() }.to_checkpoint()
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self { layers: Mlp::from_checkpoint(ckpt)?.layers })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Gradients,
    second: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    pub fn update(&mut self, net: &mut Mlp, grads: &Gradients, lr: f64) {
        self.step += 1;
        let rule = AdamRule {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            lr,
            c1: 1.0 - self.beta1.powi(self.step as i32),
            c2: 1.0 - self.beta2.powi(self.step as i32),
        };
        for (((p, g), m), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.first.layers).zip(&mut self.second.layers) {
            rule.apply(p.weight.view_mut(), g.weight.view(), m.weight.view_mut(), v.weight.view_mut());
            rule.apply(p.bias.view_mut(), g.bias.view(), m.bias.view_mut(), v.bias.view_mut());
        }
    }

    pub fn to_state(&self) -> AdamState {
        AdamState { step: self.step, first: self.first.to_checkpoint(), second: self.second.to_checkpoint() }
    }

    pub fn from_state(state: &AdamState) -> Result<Self> {
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: state.step,
            first: Gradients::from_checkpoint(&state.first)?,
            second: Gradients::from_checkpoint(&state.second)?,
        })
    }
}

struct AdamRule {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr: f64,
    c1: f64,
    c2: f64,
}

impl AdamRule {
    fn apply<D: Dimension>(
        &self,
        p: ArrayViewMut<f64, D>,
        g: ArrayView<f64, D>,
        m: ArrayViewMut<f64, D>,
        v: ArrayViewMut<f64, D>,
    ) {
        Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / self.c1) / ((*v / self.c2).sqrt() + self.eps);
        });
    }
}

/// Serializable optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub first: Checkpoint,
    pub second: Checkpoint,
}

/// Central finite differences of `f` at `x`, one coordinate at a time.
pub fn finite_difference<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest coordinate-wise relative error, with denominators floored at
/// `floor` so that near-zero coordinates are compared absolutely.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
