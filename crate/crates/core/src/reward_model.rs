//! Bradley-Terry reward model over state observations.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Adam, Gradients, Mlp};
use crate::{Error, Result, StateId};

pub const REWARD_HIDDEN: [usize; 2] = [64, 64];

/// A labeled comparison between two entries of a state table. `y = 1` means
/// `s0` is preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub s0: StateId,
    pub s1: StateId,
    pub y: u8,
}

/// A comparison with its observations resolved.
#[derive(Debug, Clone, Copy)]
pub struct LabeledPair<'a> {
    pub s0: &'a [f64],
    pub s1: &'a [f64],
    pub y: u8,
}

/// Append-only comparison set with the state table it refers to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PreferenceDataset {
    states: Vec<Vec<f64>>,
    comparisons: Vec<Comparison>,
}

impl PreferenceDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_state(&mut self, obs: Vec<f64>) -> StateId {
        self.states.push(obs);
        self.states.len() - 1
    }

    pub fn state(&self, id: StateId) -> &[f64] {
        &self.states[id]
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn push(&mut self, c: Comparison) -> Result<()> {
        if c.y > 1 {
            return Err(Error::InvalidRanking(format!("label {} is not 0 or 1", c.y)));
        }
        if c.s0 >= self.states.len() || c.s1 >= self.states.len() {
            return Err(Error::InvalidRanking(format!("comparison ({}, {}) references an unknown state", c.s0, c.s1)));
        }
        self.comparisons.push(c);
        Ok(())
    }

    pub fn extend(&mut self, cs: impl IntoIterator<Item = Comparison>) -> Result<()> {
        cs.into_iter().try_for_each(|c| self.push(c))
    }

    pub fn len(&self) -> usize {
        self.comparisons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comparisons.is_empty()
    }

    pub fn comparisons(&self) -> &[Comparison] {
        &self.comparisons
    }

    pub fn pair(&self, i: usize) -> LabeledPair<'_> {
        let c = self.comparisons[i];
        LabeledPair { s0: &self.states[c.s0], s1: &self.states[c.s1], y: c.y }
    }

    pub fn pairs(&self, indices: &[usize]) -> Vec<LabeledPair<'_>> {
        indices.iter().map(|&i| self.pair(i)).collect()
    }

    /// Writes `comparisons.csv` (`s0_id,s1_id,y`) and `states.csv`
    /// (`id,obs_0,...`) into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(dir.join("comparisons.csv"))?;
        w.write_record(["s0_id", "s1_id", "y"])?;
        for c in &self.comparisons {
            w.write_record([c.s0.to_string(), c.s1.to_string(), c.y.to_string()])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("states.csv"))?;
        let dim = self.states.first().map_or(0, Vec::len);
        let mut header = vec!["id".to_string()];
        header.extend((0..dim).map(|i| format!("obs_{i}")));
        w.write_record(&header)?;
        for (id, s) in self.states.iter().enumerate() {
            let mut row = vec![id.to_string()];
            // `{:?}` prints the shortest representation that parses back exactly.
            row.extend(s.iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(dir: &Path) -> Result<Self> {
        let mut data = Self::new();
        let mut r = csv::Reader::from_path(dir.join("states.csv"))?;
        for row in r.records() {
            let row = row?;
            let obs = row
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Checkpoint(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            data.add_state(obs);
        }
        let mut r = csv::Reader::from_path(dir.join("comparisons.csv"))?;
        for row in r.deserialize() {
            let (s0, s1, y): (StateId, StateId, u8) = row?;
            data.push(Comparison { s0, s1, y })?;
        }
        Ok(data)
    }
}

/// `P(s0 > s1) = e^r0 / (e^r0 + e^r1)`, evaluated after subtracting the max.
pub fn preference_probability(r0: f64, r1: f64) -> f64 {
    let m = r0.max(r1);
    let e0 = (r0 - m).exp();
    let e1 = (r1 - m).exp();
    e0 / (e0 + e1)
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of one comparison given the two predicted rewards:
/// `-[y ln P + (1 - y) ln(1 - P)]` with `ln P = -softplus(r1 - r0)`.
pub fn pair_loss(r0: f64, r1: f64, y: u8) -> f64 {
    let y = f64::from(y);
    y * softplus(r1 - r0) + (1.0 - y) * softplus(r0 - r1)
}

/// Scalar reward network on vectorized observations.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardNet {
    pub net: Mlp,
}

impl RewardNet {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend(REWARD_HIDDEN);
        sizes.push(1);
        Self { net: Mlp::new(&sizes, rng) }
    }

    pub fn from_net(net: Mlp) -> Result<Self> {
        if net.out_dim() != 1 {
            return Err(Error::DimensionMismatch { expected: 1, got: net.out_dim() });
        }
        Ok(Self { net })
    }

    pub fn obs_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        *self.net.layer_sizes().iter().rev().nth(1).expect("at least two layers")
    }

    pub fn rewards(&self, obs: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward(obs)?.column(0).to_vec())
    }

    pub fn reward(&self, obs: &[f64]) -> Result<f64> {
        let x = ArrayView2::from_shape((1, obs.len()), obs).expect("contiguous row");
        Ok(self.rewards(x)?[0])
    }

    pub fn pref_prob(&self, s0: &[f64], s1: &[f64]) -> Result<f64> {
        Ok(preference_probability(self.reward(s0)?, self.reward(s1)?))
    }

    /// Last hidden layer activations for one observation.
    pub fn embed(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, obs.len()), obs).expect("contiguous row");
        Ok(self.net.penultimate(x)?.row(0).to_vec())
    }

    pub fn embed_batch(&self, obs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.penultimate(obs)
    }

    /// Stacks the batch as `[s0 rows; s1 rows]`.
    fn stack(&self, batch: &[LabeledPair<'_>]) -> Result<Array2<f64>> {
        let d = self.obs_dim();
        let b = batch.len();
        let mut x = Array2::zeros((2 * b, d));
        for (i, p) in batch.iter().enumerate() {
            if p.s0.len() != d || p.s1.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: p.s0.len().max(p.s1.len()) });
            }
            x.row_mut(i).assign(&ndarray::aview1(p.s0));
            x.row_mut(b + i).assign(&ndarray::aview1(p.s1));
        }
        Ok(x)
    }

    /// Summed Bradley-Terry cross-entropy over the batch.
    pub fn bt_loss(&self, batch: &[LabeledPair<'_>]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let r = self.rewards(self.stack(batch)?.view())?;
        let b = batch.len();
        let loss = batch.iter().enumerate().map(|(i, p)| pair_loss(r[i], r[b + i], p.y)).sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(loss)
    }

    pub fn bt_loss_grad(&self, batch: &[LabeledPair<'_>]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let x = self.stack(batch)?;
        let b = batch.len();
        self.net.grad(x.view(), |out| {
            let mut d = Array2::zeros(out.raw_dim());
            let mut loss = 0.0;
            for (i, p) in batch.iter().enumerate() {
                let (r0, r1) = (out[[i, 0]], out[[b + i, 0]]);
                loss += pair_loss(r0, r1, p.y);
                // dL/dr0 = P(s0 > s1) - y
                let g = sigmoid(r0 - r1) - f64::from(p.y);
                d[[i, 0]] = g;
                d[[b + i, 0]] = -g;
            }
            (loss, d)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTrainConfig {
    pub initial_steps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for RewardTrainConfig {
    fn default() -> Self {
        Self { initial_steps: 2000, steps: 500, batch_size: 500, lr: 3e-4 }
    }
}

/// Reward network plus its optimizer state, updated across iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub net: RewardNet,
    pub adam: Adam,
    /// Number of completed training calls.
    pub updates: usize,
}

impl RewardModel {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, rng: &mut R) -> Self {
        let net = RewardNet::new(obs_dim, rng);
        let adam = Adam::new(&net.net);
        Self { net, adam, updates: 0 }
    }

    /// `steps` Adam steps on uniformly sampled minibatches (with replacement
    /// only when the dataset is smaller than the batch). Returns the loss of
    /// every step.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        data: &PreferenceDataset,
        steps: usize,
        batch_size: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx: Vec<usize> = if data.len() >= batch_size {
                index::sample(rng, data.len(), batch_size).into_vec()
            } else {
                (0..batch_size).map(|_| rng.random_range(0..data.len())).collect()
            };
            losses.push(self.step(data, &idx, lr)?);
        }
        self.updates += 1;
        Ok(losses)
    }

    /// Shuffled passes over the whole dataset in minibatches of `batch_size`.
    /// Returns the mean per-comparison loss of each epoch.
    pub fn train_epochs<R: Rng + ?Sized>(
        &mut self,
        data: &PreferenceDataset,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch_size.max(1)) {
                total += self.step(data, chunk, lr)?;
            }
            history.push(total / data.len() as f64);
        }
        self.updates += 1;
        Ok(history)
    }

    fn step(&mut self, data: &PreferenceDataset, idx: &[usize], lr: f64) -> Result<f64> {
        let (loss, grads) = self.net.bt_loss_grad(&data.pairs(idx))?;
        self.adam.update(&mut self.net.net, &grads, lr);
        Ok(loss)
    }
}
