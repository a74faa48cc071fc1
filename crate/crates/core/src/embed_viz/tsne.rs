//! Exact O(N^2) t-SNE.
//!
//! Per-point Gaussian bandwidths are found by bisection on the conditional
//! entropy, the conditionals are symmetrized into a joint `P`, and a 2D layout
//! is optimized against Student-t affinities with momentum, adaptive gains and
//! early exaggeration.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iter: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch_iter: usize,
    pub init_std: f64,
    /// Record KL(P||Q) every this many iterations (0 disables monitoring).
    pub kl_every: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_iter: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch_iter: 250,
            init_std: 1e-4,
            kl_every: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    pub coords: Array2<f64>,
    /// Effective perplexity `exp(H(P_i))` reached by each point's bandwidth.
    pub perplexities: Vec<f64>,
    /// `(iterations completed, KL(P||Q))`.
    pub kl_history: Vec<(usize, f64)>,
}

impl TsneResult {
    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        self.kl_history.iter().find(|(i, _)| *i == iteration).map(|(_, kl)| *kl)
    }
}

pub fn squared_distances(x: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let sq: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let gram = x.dot(&x.t());
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (sq[i] + sq[j] - 2.0 * gram[[i, j]]).max(0.0);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Conditional distribution of row `i` at precision `beta`, with its entropy
/// in nats. Distances are shifted by the row minimum for stability.
fn conditional_row(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let d_min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, p)) in dist.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *p = 0.0;
            continue;
        }
        let shifted = d - d_min;
        *p = (-beta * shifted).exp();
        sum += *p;
        weighted += *p * shifted;
    }
    out.iter_mut().for_each(|p| *p /= sum);
    sum.ln() + beta * weighted / sum
}

/// Row-stochastic conditional affinities calibrated to `perplexity`, plus the
/// perplexity actually reached by each row.
pub fn conditional_affinities(x: ArrayView2<f64>, perplexity: f64) -> Result<(Array2<f64>, Vec<f64>)> {
    let n = x.nrows();
    if perplexity <= 0.0 || 3.0 * perplexity >= n as f64 {
        return Err(Error::InvalidConfig(format!("perplexity {perplexity} needs more than {} points, got {n}", 3.0 * perplexity)));
    }
    let dist = squared_distances(x);
    let target = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    let mut reached = Vec::with_capacity(n);
    let mut row = vec![0.0; n];
    for i in 0..n {
        let d = dist.row(i).to_vec();
        let (mut lo, mut hi) = (0.0, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = conditional_row(&d, i, beta, &mut row);
        for _ in 0..200 {
            let diff = h - target;
            if diff.abs() < 1e-10 {
                break;
            }
            if diff > 0.0 {
                // Too flat: sharpen.
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            h = conditional_row(&d, i, beta, &mut row);
        }
        reached.push(h.exp());
        p.row_mut(i).assign(&ndarray::aview1(&row));
    }
    Ok((p, reached))
}

/// Symmetrized joint affinities `(P_{j|i} + P_{i|j}) / 2N`.
pub fn joint_probabilities(x: ArrayView2<f64>, perplexity: f64) -> Result<(Array2<f64>, Vec<f64>)> {
    let (cond, reached) = conditional_affinities(x, perplexity)?;
    let n = cond.nrows() as f64;
    let joint = (&cond + &cond.t()) / (2.0 * n);
    Ok((joint, reached))
}

/// Student-t numerators `1 / (1 + |y_i - y_j|^2)` (zero diagonal) and their sum.
fn student_t(y: ArrayView2<f64>) -> (Array2<f64>, f64) {
    let n = y.nrows();
    let mut num = Array2::zeros((n, n));
    let mut z = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for k in 0..y.ncols() {
                let diff = y[[i, k]] - y[[j, k]];
                d2 += diff * diff;
            }
            let v = 1.0 / (1.0 + d2);
            num[[i, j]] = v;
            num[[j, i]] = v;
            z += 2.0 * v;
        }
    }
    (num, z)
}

pub fn low_dim_affinities(y: ArrayView2<f64>) -> Array2<f64> {
    let (num, z) = student_t(y);
    num / z
}

/// `KL(P || Q(y))`, skipping zero entries of `P`.
pub fn kl_divergence(p: ArrayView2<f64>, y: ArrayView2<f64>) -> f64 {
    let (num, z) = student_t(y);
    kl_from_parts(p, &num, z)
}

fn kl_from_parts(p: ArrayView2<f64>, num: &Array2<f64>, z: f64) -> f64 {
    let ln_z = z.ln();
    let mut kl = 0.0;
    for ((i, j), &pij) in p.indexed_iter() {
        if i != j && pij > 0.0 {
            kl += pij * (pij.ln() - (num[[i, j]].ln() - ln_z));
        }
    }
    kl
}

/// KL(P || Q) and its gradient `4 sum_j (p_ij - q_ij)(1 + |y_i - y_j|^2)^-1 (y_i - y_j)`.
pub fn kl_gradient(p: ArrayView2<f64>, y: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let (num, z) = student_t(y);
    let grad = gradient_from_parts(p, y, &num, z, 1.0);
    (kl_from_parts(p, &num, z), grad)
}

fn gradient_from_parts(p: ArrayView2<f64>, y: ArrayView2<f64>, num: &Array2<f64>, z: f64, exaggeration: f64) -> Array2<f64> {
    let (n, dim) = y.dim();
    let mut grad = Array2::zeros((n, dim));
    for i in 0..n {
        for j in (i + 1)..n {
            let w = 4.0 * (exaggeration * p[[i, j]] - num[[i, j]] / z) * num[[i, j]];
            for k in 0..dim {
                let f = w * (y[[i, k]] - y[[j, k]]);
                grad[[i, k]] += f;
                grad[[j, k]] -= f;
            }
        }
    }
    grad
}

/// Embeds the rows of `x` in 2D.
pub fn tsne<R: Rng + ?Sized>(x: ArrayView2<f64>, cfg: &TsneConfig, rng: &mut R) -> Result<TsneResult> {
    let (p, perplexities) = joint_probabilities(x, cfg.perplexity)?;
    let n = x.nrows();
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let y = Array2::from_shape_simple_fn((n, 2), || normal.sample(rng));
    let (coords, kl_history) = optimize(p.view(), y, cfg);
    Ok(TsneResult { coords, perplexities, kl_history })
}

/// Gradient descent on KL(P || Q) from the initial layout `y`.
pub fn optimize(p: ArrayView2<f64>, mut y: Array2<f64>, cfg: &TsneConfig) -> (Array2<f64>, Vec<(usize, f64)>) {
    let mut update = Array2::<f64>::zeros(y.raw_dim());
    let mut gains = Array2::<f64>::ones(y.raw_dim());
    let mut history = Vec::new();
    for it in 0..cfg.n_iter {
        let exaggeration = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.momentum_switch_iter { cfg.initial_momentum } else { cfg.final_momentum };
        let (num, z) = student_t(y.view());
        let grad = gradient_from_parts(p, y.view(), &num, z, exaggeration);
        ndarray::Zip::from(&mut gains).and(&grad).and(&update).for_each(|g, &d, &u| {
            *g = if (d > 0.0) != (u > 0.0) { *g + 0.2 } else { (*g * 0.8).max(0.01) };
        });
        ndarray::Zip::from(&mut update).and(&gains).and(&grad).for_each(|u, &g, &d| {
            *u = momentum * *u - cfg.learning_rate * g * d;
        });
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("nonempty");
        y -= &mean;
        let done = it + 1;
        if cfg.kl_every > 0 && (done % cfg.kl_every == 0 || done == cfg.n_iter) {
            history.push((done, kl_divergence(p, y.view())));
        }
    }
    (y, history)
}
