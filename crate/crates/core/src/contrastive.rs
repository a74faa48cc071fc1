//! InfoNCE encoder over rendered frames.
//!
//! Positive pairs are two random crops of the same frame; every other crop in
//! the batch is a negative. Embeddings are L2-normalized before the loss and
//! before export.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Adam, Mlp};
use crate::env::{EnvSpec, EnvState};
use crate::render::{random_crop, render, Frame, FRAME_SIZE};
use crate::{Error, Result};

pub const FRAME_PIXELS: usize = FRAME_SIZE * FRAME_SIZE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { embed_dim: 512, hidden: vec![128], temperature: 0.1, epochs: 5, batch_size: 50, lr: 5e-5 }
    }
}

fn l2_normalize_rows(z: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let norms: Vec<f64> = z.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
    let mut a = z.clone();
    for (mut row, n) in a.rows_mut().into_iter().zip(&norms) {
        row /= *n;
    }
    (a, norms)
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-item InfoNCE losses for raw (unnormalized) embeddings.
pub fn infonce_items(anchors: ArrayView2<f64>, positives: ArrayView2<f64>, temperature: f64) -> Result<Vec<f64>> {
    let b = anchors.nrows();
    if b < 2 || positives.nrows() != b {
        return Err(Error::BatchTooSmall { min: 2, got: b.min(positives.nrows()) });
    }
    let (a, _) = l2_normalize_rows(&anchors.to_owned());
    let (p, _) = l2_normalize_rows(&positives.to_owned());
    let logits = a.dot(&p.t()) / temperature;
    Ok(logits
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| logsumexp(row.iter().copied()) - row[i])
        .collect())
}

/// Mean InfoNCE loss and its gradients with respect to the raw anchor and
/// positive embeddings.
pub fn infonce_grad(
    anchors: ArrayView2<f64>,
    positives: ArrayView2<f64>,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let b = anchors.nrows();
    if b < 2 || positives.nrows() != b {
        return Err(Error::BatchTooSmall { min: 2, got: b.min(positives.nrows()) });
    }
    let (a, a_norm) = l2_normalize_rows(&anchors.to_owned());
    let (p, p_norm) = l2_normalize_rows(&positives.to_owned());
    let logits = a.dot(&p.t()) / temperature;
    let mut g = Array2::zeros((b, b));
    let mut loss = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let lse = logsumexp(row.iter().copied());
        loss += lse - row[i];
        for j in 0..b {
            g[[i, j]] = (row[j] - lse).exp() / b as f64;
        }
        g[[i, i]] -= 1.0 / b as f64;
    }
    let d_a = g.dot(&p) / temperature;
    let d_p = g.t().dot(&a) / temperature;
    Ok((loss / b as f64, unnormalize_grad(&a, &a_norm, d_a), unnormalize_grad(&p, &p_norm, d_p)))
}

/// Chains d/d(z/|z|) back to d/dz: `(d - a (a . d)) / |z|`.
fn unnormalize_grad(a: &Array2<f64>, norms: &[f64], mut d: Array2<f64>) -> Array2<f64> {
    for ((mut d_row, a_row), n) in d.rows_mut().into_iter().zip(a.rows()).zip(norms) {
        let proj = a_row.dot(&d_row);
        d_row.scaled_add(-proj, &a_row);
        d_row /= *n;
    }
    d
}

pub fn frames_matrix(frames: &[Frame]) -> Array2<f64> {
    let mut x = Array2::zeros((frames.len(), FRAME_PIXELS));
    for (mut row, f) in x.rows_mut().into_iter().zip(frames) {
        row.assign(&ndarray::aview1(&f.pixels));
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveNet {
    pub net: Mlp,
}

impl ContrastiveNet {
    pub fn new<R: Rng + ?Sized>(cfg: &ContrastiveConfig, rng: &mut R) -> Self {
        let mut sizes = vec![FRAME_PIXELS];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.embed_dim);
        Self { net: Mlp::new(&sizes, rng) }
    }

    pub fn embed_dim(&self) -> usize {
        self.net.out_dim()
    }

    pub fn infonce_loss(&self, anchors: &[Frame], positives: &[Frame], temperature: f64) -> Result<f64> {
        let za = self.net.forward(frames_matrix(anchors).view())?;
        let zp = self.net.forward(frames_matrix(positives).view())?;
        let items = infonce_items(za.view(), zp.view(), temperature)?;
        Ok(items.iter().sum::<f64>() / items.len() as f64)
    }

    /// L2-normalized embeddings of the given frames.
    pub fn embed_frames(&self, frames: &[Frame]) -> Result<Array2<f64>> {
        let z = self.net.forward(frames_matrix(frames).view())?;
        Ok(l2_normalize_rows(&z).0)
    }

    /// Normalized embedding of the un-augmented rendering of `s`.
    pub fn embed_visual(&self, spec: &EnvSpec, s: &EnvState) -> Result<Vec<f64>> {
        Ok(self.embed_frames(&[render(spec, s)])?.row(0).to_vec())
    }

    /// Minimizes InfoNCE over (crop, crop) pairs of the rendered states.
    /// Returns the mean batch loss of each epoch.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        spec: &EnvSpec,
        states: &[EnvState],
        cfg: &ContrastiveConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let frames: Vec<Frame> = states.iter().map(|s| render(spec, s)).collect();
        self.train_frames(&frames, cfg, rng)
    }

    pub fn train_frames<R: Rng + ?Sized>(
        &mut self,
        frames: &[Frame],
        cfg: &ContrastiveConfig,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if frames.len() < cfg.batch_size || cfg.batch_size < 2 {
            return Err(Error::BatchTooSmall { min: cfg.batch_size.max(2), got: frames.len() });
        }
        let mut adam = Adam::new(&self.net);
        let mut order: Vec<usize> = (0..frames.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks_exact(cfg.batch_size) {
                let b = chunk.len();
                let mut crops: Vec<Frame> = chunk.iter().map(|&i| random_crop(&frames[i], rng)).collect();
                crops.extend(chunk.iter().map(|&i| random_crop(&frames[i], rng)));
                let x = frames_matrix(&crops);
                let temperature = cfg.temperature;
                let (loss, grads) = self.net.grad(x.view(), |z| {
                    let (loss, d_a, d_p) = infonce_grad(z.slice(s![..b, ..]), z.slice(s![b.., ..]), temperature)
                        .expect("batch of at least two");
                    (loss, ndarray::concatenate(Axis(0), &[d_a.view(), d_p.view()]).expect("same width"))
                })?;
                adam.update(&mut self.net, &grads, cfg.lr);
                total += loss;
                batches += 1;
            }
            history.push(total / batches as f64);
        }
        Ok(history)
    }
}
