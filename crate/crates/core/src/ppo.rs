//! Clipped-surrogate PPO with a tanh-squashed Gaussian policy, plus the
//! mixed-policy sampler used to pick states for the labeling map.
//!
//! The policy network outputs a mean and a log-std per action dimension. The
//! buffer stores the pre-squash sample `u`, so log-probabilities can be
//! recomputed exactly; the squash Jacobian does not depend on parameters and
//! cancels in the probability ratio.

use std::f64::consts::{LN_2, PI};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Adam, AdamState, Checkpoint, Gradients, Mlp};
use crate::env::{EnvSpec, EnvState};
use crate::reward_model::{softplus, RewardNet};
use crate::stats::{mean_sem, RunningMeanStd};
use crate::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub hidden: Vec<usize>,
    /// Environment steps gathered before each update; rounded up to whole episodes.
    pub n_steps: usize,
    /// Environment steps per outer iteration.
    pub steps_per_iteration: usize,
    pub epochs: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub lr: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub eval_episodes: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            n_steps: 2000,
            steps_per_iteration: 20_000,
            epochs: 10,
            minibatch: 64,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            lr: 3e-4,
            value_coef: 0.5,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            eval_episodes: 20,
        }
    }
}

/// Per-state reward used during policy optimization.
#[derive(Debug, Clone, Copy)]
pub enum StepReward<'a> {
    Zero,
    Oracle,
    Learned(&'a RewardNet),
}

impl StepReward<'_> {
    pub fn rewards(&self, spec: &EnvSpec, states: &[EnvState]) -> Result<Vec<f64>> {
        match self {
            StepReward::Zero => Ok(vec![0.0; states.len()]),
            StepReward::Oracle => Ok(states.iter().map(|s| spec.oracle_reward(s)).collect()),
            StepReward::Learned(net) => net.rewards(obs_matrix(states).view()),
        }
    }
}

pub fn obs_matrix(states: &[EnvState]) -> Array2<f64> {
    let d = states.first().map_or(0, |s| s.obs.len());
    Array2::from_shape_fn((states.len(), d), |(i, j)| states[i].obs[j])
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
pub fn log_tanh_jacobian(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

fn gaussian_log_prob(u: f64, mean: f64, log_std: f64) -> f64 {
    let z = (u - mean) / log_std.exp();
    -0.5 * z * z - log_std - 0.5 * (2.0 * PI).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub policy: Mlp,
    pub value: Mlp,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let sizes = |out: usize| {
            let mut v = vec![obs_dim];
            v.extend(hidden);
            v.push(out);
            v
        };
        let mut policy = Mlp::new(&sizes(2 * act_dim), rng);
        let last = policy.layers.last_mut().expect("output layer");
        last.weight *= 0.01;
        last.bias.fill(0.0);
        let mut value = Mlp::new(&sizes(1), rng);
        let last = value.layers.last_mut().expect("output layer");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
        Self { policy, value }
    }

    pub fn act_dim(&self) -> usize {
        self.policy.out_dim() / 2
    }

    /// Means and clamped log-stds, one row per observation.
    pub fn distribution(&self, obs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = self.policy.forward(obs)?;
        Ok(split_heads(&out))
    }

    /// Log-probability of pre-squash samples `u` under the current policy,
    /// including the tanh correction.
    pub fn log_prob(&self, obs: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<Vec<f64>> {
        let (mean, log_std) = self.distribution(obs)?;
        Ok((0..u.nrows())
            .map(|i| {
                (0..u.ncols())
                    .map(|d| gaussian_log_prob(u[[i, d]], mean[[i, d]], log_std[[i, d]]) - log_tanh_jacobian(u[[i, d]]))
                    .sum()
            })
            .collect())
    }

    pub fn values(&self, obs: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.value.forward(obs)?.column(0).to_vec())
    }

    /// Samples pre-squash actions for each row; returns `(u, log_prob)`.
    pub fn sample<R: Rng + ?Sized>(&self, obs: ArrayView2<f64>, rng: &mut R) -> Result<(Array2<f64>, Vec<f64>)> {
        let (mean, log_std) = self.distribution(obs)?;
        let mut u = Array2::zeros(mean.raw_dim());
        let mut logp = vec![0.0; mean.nrows()];
        for i in 0..mean.nrows() {
            for d in 0..mean.ncols() {
                let eps: f64 = rng.sample(StandardNormal);
                let ui = mean[[i, d]] + log_std[[i, d]].exp() * eps;
                u[[i, d]] = ui;
                logp[i] += gaussian_log_prob(ui, mean[[i, d]], log_std[[i, d]]) - log_tanh_jacobian(ui);
            }
        }
        Ok((u, logp))
    }

    /// Squashed mean action for a single observation.
    pub fn deterministic_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row");
        let (mean, _) = self.distribution(x.view())?;
        Ok(mean.row(0).iter().map(|m| m.tanh()).collect())
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).expect("row");
        let (u, _) = self.sample(x.view(), rng)?;
        Ok(u.row(0).iter().map(|v| v.tanh()).collect())
    }
}

fn split_heads(out: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let a = out.ncols() / 2;
    let mean = out.slice(s![.., ..a]).to_owned();
    let log_std = out.slice(s![.., a..]).mapv(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    (mean, log_std)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer {
    pub obs: Array2<f64>,
    /// Pre-squash actions.
    pub u: Array2<f64>,
    pub log_probs: Vec<f64>,
    /// Normalized rewards, the ones GAE sees.
    pub rewards: Vec<f64>,
    pub raw_rewards: Vec<f64>,
    pub values: Vec<f64>,
    /// Value of the state after each transition.
    pub next_values: Vec<f64>,
    /// True on the last transition of each episode.
    pub episode_end: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }
}

/// Generalized advantage estimates. Episodes end at `episode_end`; the
/// post-transition value is still used there because episodes are cut by
/// the time limit, not by a terminal state.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    episode_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if episode_end[t] {
            running = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Runs `ceil(n_steps / episode_len)` episodes in lockstep with the stochastic
/// policy and fills a buffer. Rewards are normalized by `reward_stats`, which
/// is first updated with this batch.
pub fn collect_rollouts<R: Rng + ?Sized>(
    ac: &ActorCritic,
    spec: &EnvSpec,
    n_steps: usize,
    reward: StepReward<'_>,
    reward_stats: &mut RunningMeanStd,
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<RolloutBuffer> {
    let len = spec.episode_len;
    let episodes = n_steps.div_ceil(len).max(1);
    let total = episodes * len;
    let mut states: Vec<EnvState> = (0..episodes).map(|_| spec.reset(rng)).collect();
    let mut obs = Array2::zeros((total, spec.obs_dim));
    let mut u_all = Array2::zeros((total, spec.act_dim));
    let mut log_probs = vec![0.0; total];
    let mut next_states: Vec<EnvState> = vec![EnvState::new(Vec::new()); total];
    for t in 0..len {
        let x = obs_matrix(&states);
        let (u, logp) = ac.sample(x.view(), rng)?;
        for e in 0..episodes {
            let row = e * len + t;
            obs.row_mut(row).assign(&x.row(e));
            u_all.row_mut(row).assign(&u.row(e));
            log_probs[row] = logp[e];
            let a: Vec<f64> = u.row(e).iter().map(|v| v.tanh()).collect();
            states[e] = spec.step(&states[e], &a)?;
            next_states[row] = states[e].clone();
        }
    }
    let raw_rewards = reward.rewards(spec, &next_states)?;
    reward_stats.update(&raw_rewards);
    let rewards: Vec<f64> = raw_rewards.iter().map(|&r| reward_stats.normalize(r)).collect();
    let values = ac.values(obs.view())?;
    let next_values = ac.values(obs_matrix(&next_states).view())?;
    let episode_end: Vec<bool> = (0..total).map(|i| i % len == len - 1).collect();
    let (advantages, returns) = gae(&rewards, &values, &next_values, &episode_end, cfg.gamma, cfg.gae_lambda);
    Ok(RolloutBuffer {
        obs,
        u: u_all,
        log_probs,
        rewards,
        raw_rewards,
        values,
        next_values,
        episode_end,
        advantages,
        returns,
    })
}

/// Zero-mean, unit-std copy; a constant input becomes all zeros.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

/// Clipped surrogate policy loss `-mean(min(r A, clip(r) A))` for one
/// minibatch, with its gradient with respect to the raw policy outputs.
pub fn surrogate_loss_grad(
    out: &Array2<f64>,
    u: ArrayView2<f64>,
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
) -> (f64, Array2<f64>) {
    let n = out.nrows();
    let a = out.ncols() / 2;
    let mut grad = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    for i in 0..n {
        let mut logp = 0.0;
        for d in 0..a {
            let ls = out[[i, a + d]].clamp(LOG_STD_MIN, LOG_STD_MAX);
            logp += gaussian_log_prob(u[[i, d]], out[[i, d]], ls) - log_tanh_jacobian(u[[i, d]]);
        }
        let ratio = (logp - old_log_probs[i]).exp();
        let adv = advantages[i];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        loss -= unclipped.min(clipped) / n as f64;
        if unclipped <= clipped {
            let d_logp = -unclipped / n as f64;
            for d in 0..a {
                let raw_ls = out[[i, a + d]];
                let ls = raw_ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
                let sigma = ls.exp();
                let z = (u[[i, d]] - out[[i, d]]) / sigma;
                grad[[i, d]] = d_logp * z / sigma;
                if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_ls) {
                    grad[[i, a + d]] = d_logp * (z * z - 1.0);
                }
            }
        }
    }
    (loss, grad)
}

/// Gaussian entropy per sample, averaged, with its gradient; only used when
/// the entropy coefficient is nonzero.
fn entropy_grad(out: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = out.nrows();
    let a = out.ncols() / 2;
    let mut grad = Array2::zeros(out.raw_dim());
    let mut ent = 0.0;
    for i in 0..n {
        for d in 0..a {
            let raw = out[[i, a + d]];
            ent += (raw.clamp(LOG_STD_MIN, LOG_STD_MAX) + 0.5 * (2.0 * PI * std::f64::consts::E).ln()) / n as f64;
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw) {
                grad[[i, a + d]] = 1.0 / n as f64;
            }
        }
    }
    (ent, grad)
}

fn value_loss_grad(out: &Array2<f64>, returns: &[f64], coef: f64) -> (f64, Array2<f64>) {
    let n = out.nrows() as f64;
    let mut grad = Array2::zeros(out.raw_dim());
    let mut loss = 0.0;
    for (i, r) in returns.iter().enumerate() {
        let e = out[[i, 0]] - r;
        loss += coef * e * e / n;
        grad[[i, 0]] = 2.0 * coef * e / n;
    }
    (loss, grad)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub mean_raw_reward: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoState {
    pub policy: Checkpoint,
    pub value: Checkpoint,
    pub policy_adam: AdamState,
    pub value_adam: AdamState,
    pub reward_stats: RunningMeanStd,
}

/// Policy, value function, their optimizers and the reward normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoAgent {
    pub ac: ActorCritic,
    pub policy_adam: Adam,
    pub value_adam: Adam,
    pub reward_stats: RunningMeanStd,
}

impl PpoAgent {
    pub fn new<R: Rng + ?Sized>(spec: &EnvSpec, cfg: &PpoConfig, rng: &mut R) -> Self {
        let ac = ActorCritic::new(spec.obs_dim, spec.act_dim, &cfg.hidden, rng);
        let policy_adam = Adam::new(&ac.policy);
        let value_adam = Adam::new(&ac.value);
        Self { ac, policy_adam, value_adam, reward_stats: RunningMeanStd::default() }
    }

    pub fn to_state(&self) -> PpoState {
        PpoState {
            policy: self.ac.policy.to_checkpoint(),
            value: self.ac.value.to_checkpoint(),
            policy_adam: self.policy_adam.to_state(),
            value_adam: self.value_adam.to_state(),
            reward_stats: self.reward_stats.clone(),
        }
    }

    pub fn from_state(state: &PpoState) -> Result<Self> {
        Ok(Self {
            ac: ActorCritic { policy: Mlp::from_checkpoint(&state.policy)?, value: Mlp::from_checkpoint(&state.value)? },
            policy_adam: Adam::from_state(&state.policy_adam)?,
            value_adam: Adam::from_state(&state.value_adam)?,
            reward_stats: state.reward_stats.clone(),
        })
    }

    /// Several epochs of minibatch Adam on one buffer. A non-finite loss
    /// restores the parameters and optimizer state from before the update.
    pub fn update<R: Rng + ?Sized>(&mut self, buf: &RolloutBuffer, cfg: &PpoConfig, rng: &mut R) -> Result<UpdateStats> {
        if buf.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let backup = self.clone();
        match self.update_inner(buf, cfg, rng) {
            Ok(stats) => Ok(stats),
            Err(Error::NonFiniteLoss) => {
                *self = backup;
                log::warn!("non-finite PPO loss; update skipped");
                Ok(UpdateStats { aborted: true, ..Default::default() })
            }
            Err(e) => Err(e),
        }
    }

    fn update_inner<R: Rng + ?Sized>(&mut self, buf: &RolloutBuffer, cfg: &PpoConfig, rng: &mut R) -> Result<UpdateStats> {
        let adv = normalize_advantages(&buf.advantages);
        let mut order: Vec<usize> = (0..buf.len()).collect();
        let (mut pl_total, mut vl_total, mut batches) = (0.0, 0.0, 0usize);
        for _ in 0..cfg.epochs {
            order.shuffle(rng);
            for idx in order.chunks(cfg.minibatch.max(1)) {
                let obs = buf.obs.select(Axis(0), idx);
                let u = buf.u.select(Axis(0), idx);
                let old: Vec<f64> = idx.iter().map(|&i| buf.log_probs[i]).collect();
                let a: Vec<f64> = idx.iter().map(|&i| adv[i]).collect();
                let ret: Vec<f64> = idx.iter().map(|&i| buf.returns[i]).collect();
                let (pl, mut pg) = self.ac.policy.grad(obs.view(), |out| {
                    let (mut loss, mut g) = surrogate_loss_grad(out, u.view(), &old, &a, cfg.clip);
                    if cfg.entropy_coef != 0.0 {
                        let (ent, ge) = entropy_grad(out);
                        loss -= cfg.entropy_coef * ent;
                        g.scaled_add(-cfg.entropy_coef, &ge);
                    }
                    (loss, g)
                })?;
                let (vl, mut vg) = self.ac.value.grad(obs.view(), |out| value_loss_grad(out, &ret, cfg.value_coef))?;
                clip_joint(&mut pg, &mut vg, cfg.max_grad_norm);
                self.policy_adam.update(&mut self.ac.policy, &pg, cfg.lr);
                self.value_adam.update(&mut self.ac.value, &vg, cfg.lr);
                pl_total += pl;
                vl_total += vl;
                batches += 1;
            }
        }
        if !self.ac.policy.is_finite() || !self.ac.value.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        let b = batches.max(1) as f64;
        Ok(UpdateStats {
            policy_loss: pl_total / b,
            value_loss: vl_total / b,
            mean_raw_reward: buf.raw_rewards.iter().sum::<f64>() / buf.len() as f64,
            aborted: false,
        })
    }

    /// Collect-and-update cycles until `cfg.steps_per_iteration` environment
    /// steps have been used.
    pub fn train<R: Rng + ?Sized>(
        &mut self,
        spec: &EnvSpec,
        reward: StepReward<'_>,
        total_steps: usize,
        cfg: &PpoConfig,
        rng: &mut R,
    ) -> Result<Vec<UpdateStats>> {
        let mut used = 0;
        let mut stats = Vec::new();
        while used < total_steps {
            let n = cfg.n_steps.min(total_steps - used);
            let buf = collect_rollouts(&self.ac, spec, n, reward, &mut self.reward_stats, cfg, rng)?;
            used += buf.len();
            stats.push(self.update(&buf, cfg, rng)?);
        }
        Ok(stats)
    }
}

fn clip_joint(a: &mut Gradients, b: &mut Gradients, max_norm: f64) {
    let norm = (a.norm().powi(2) + b.norm().powi(2)).sqrt();
    if norm > max_norm && norm > 0.0 {
        a.scale(max_norm / norm);
        b.scale(max_norm / norm);
    }
}

/// One episode that follows the stochastic policy for the first `switch`
/// steps and uniform random actions afterwards. `switch = None` draws it
/// uniformly from `0..episode_len`. Returns the visited states and the switch.
pub fn mixed_rollout<R: Rng + ?Sized>(
    ac: &ActorCritic,
    spec: &EnvSpec,
    switch: Option<usize>,
    rng: &mut R,
) -> Result<(Vec<EnvState>, usize)> {
    let t_switch = switch.unwrap_or_else(|| rng.random_range(0..spec.episode_len));
    let mut s = spec.reset(rng);
    let mut visited = Vec::with_capacity(spec.episode_len);
    for t in 0..spec.episode_len {
        let a = if t < t_switch { ac.sample_action(&s.obs, rng)? } else { spec.random_action(rng) };
        s = spec.step(&s, &a)?;
        visited.push(s.clone());
    }
    Ok((visited, t_switch))
}

/// Oracle return of each of `episodes` episodes driven by `act`.
pub fn episode_returns<R, F>(spec: &EnvSpec, episodes: usize, rng: &mut R, mut act: F) -> Result<Vec<f64>>
where
    R: Rng + ?Sized,
    F: FnMut(&EnvState, &mut R) -> Result<Vec<f64>>,
{
    (0..episodes)
        .map(|_| {
            let mut s = spec.reset(rng);
            let mut ret = 0.0;
            for _ in 0..spec.episode_len {
                let a = act(&s, rng)?;
                s = spec.step(&s, &a)?;
                ret += spec.oracle_reward(&s);
            }
            Ok(ret)
        })
        .collect()
}

/// Mean and SEM of the oracle return under the deterministic (mean) action.
pub fn evaluate<R: Rng + ?Sized>(ac: &ActorCritic, spec: &EnvSpec, episodes: usize, rng: &mut R) -> Result<(f64, f64)> {
    let returns = episode_returns(spec, episodes, rng, |s, _| ac.deterministic_action(&s.obs))?;
    Ok(mean_sem(&returns))
}
