//! Fixed-length joint-space control tasks with hidden oracle rewards.
//!
//! Each joint is a damped double integrator driven by a torque in [-1, 1]:
//!
//! ```text
//! w' = w + dt * (accel_gain * a - damping * w + drift)
//! q' = wrap(q + dt * w')
//! ```
//!
//! Observations are all joint angles followed by all joint velocities.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Fingertip target of the planar reacher, bottom left of the workspace.
pub const REACHER_TARGET: [f64; 2] = [-0.1, -0.1];
pub const REACHER_LINK: f64 = 0.1;
/// Target pose angle of the tilt-stand body.
pub const TILT_TARGET: f64 = 1.25;
/// Rotor angle limit of the chain-curl task.
pub const CURL_LIMIT: f64 = 2.0 * PI / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    PlanarReacher,
    TiltStand,
    ChainCurl,
}

impl EnvKind {
    pub const ALL: [EnvKind; 3] = [EnvKind::PlanarReacher, EnvKind::TiltStand, EnvKind::ChainCurl];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PlanarReacher => "planar-reacher",
            EnvKind::TiltStand => "tilt-stand",
            EnvKind::ChainCurl => "chain-curl",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EnvKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown env `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub episode_len: usize,
    pub dt: f64,
    pub accel_gain: f64,
    pub damping: f64,
    pub drift: f64,
}

/// Vectorized observation: joint angles in (-pi, pi] then angular velocities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub obs: Vec<f64>,
}

impl EnvState {
    pub fn new(obs: Vec<f64>) -> Self {
        Self { obs }
    }

    pub fn angles(&self) -> &[f64] {
        &self.obs[..self.obs.len() / 2]
    }

    pub fn velocities(&self) -> &[f64] {
        &self.obs[self.obs.len() / 2..]
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    let k = ((x - PI) / (2.0 * PI)).ceil();
    let w = x - 2.0 * PI * k;
    // ceil can land one period off when x - PI is a hair above a multiple.
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Planar two-link forward kinematics; the second angle is relative to the first link.
pub fn fingertip(q1: f64, q2: f64) -> [f64; 2] {
    [
        REACHER_LINK * q1.cos() + REACHER_LINK * (q1 + q2).cos(),
        REACHER_LINK * q1.sin() + REACHER_LINK * (q1 + q2).sin(),
    ]
}

impl EnvSpec {
    pub fn new(kind: EnvKind) -> Self {
        let joints = match kind {
            EnvKind::TiltStand => 1,
            EnvKind::PlanarReacher | EnvKind::ChainCurl => 2,
        };
        Self {
            kind,
            obs_dim: 2 * joints,
            act_dim: joints,
            episode_len: 50,
            dt: 0.05,
            accel_gain: 8.0,
            damping: 1.0,
            drift: if kind == EnvKind::TiltStand { -0.5 } else { 0.0 },
        }
    }

    pub fn joints(&self) -> usize {
        self.act_dim
    }

    fn angle_limit(&self) -> Option<f64> {
        (self.kind == EnvKind::ChainCurl).then_some(CURL_LIMIT)
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let n = self.joints();
        let mut obs = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let angle = match self.angle_limit() {
                Some(lim) => -lim + 2.0 * lim * u,
                // u in [0, 1) maps onto (-pi, pi]
                None => PI - 2.0 * PI * u,
            };
            obs.push(angle);
        }
        for _ in 0..n {
            obs.push(rng.random_range(-0.5..=0.5));
        }
        EnvState { obs }
    }

    pub fn step(&self, s: &EnvState, action: &[f64]) -> Result<EnvState> {
        let n = self.joints();
        if action.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: action.len() });
        }
        if s.obs.len() != self.obs_dim {
            return Err(Error::DimensionMismatch { expected: self.obs_dim, got: s.obs.len() });
        }
        if let Some(a) = action.iter().find(|a| !a.is_finite() || a.abs() > 1.0) {
            return Err(Error::InvalidAction(format!("component {a} outside [-1, 1]")));
        }
        let mut obs = vec![0.0; 2 * n];
        for j in 0..n {
            let (q, w) = (s.obs[j], s.obs[n + j]);
            let mut w_next = w + self.dt * (self.accel_gain * action[j] - self.damping * w + self.drift);
            let mut q_next = wrap_angle(q + self.dt * w_next);
            if let Some(lim) = self.angle_limit() {
                if q_next.abs() > lim {
                    q_next = q_next.clamp(-lim, lim);
                    w_next = 0.0;
                }
            }
            obs[j] = q_next;
            obs[n + j] = w_next;
        }
        Ok(EnvState { obs })
    }

    /// Ground-truth reward of a single state. Never shown to the learner.
    pub fn oracle_reward(&self, s: &EnvState) -> f64 {
        let q = s.angles();
        match self.kind {
            EnvKind::PlanarReacher => {
                let tip = fingertip(q[0], q[1]);
                -((tip[0] - REACHER_TARGET[0]).powi(2) + (tip[1] - REACHER_TARGET[1]).powi(2)).sqrt()
            }
            EnvKind::TiltStand => -(q[0] - TILT_TARGET).abs(),
            EnvKind::ChainCurl => q[0] * q[1],
        }
    }

    /// Supremum of the oracle reward over all states.
    pub fn reward_upper_bound(&self) -> f64 {
        match self.kind {
            EnvKind::PlanarReacher | EnvKind::TiltStand => 0.0,
            EnvKind::ChainCurl => CURL_LIMIT * CURL_LIMIT,
        }
    }

    /// Runs one full episode, returning the `episode_len` states reached after
    /// each action.
    pub fn rollout<R, F>(&self, rng: &mut R, mut act: F) -> Result<Vec<EnvState>>
    where
        R: Rng + ?Sized,
        F: FnMut(usize, &EnvState, &mut R) -> Vec<f64>,
    {
        let mut s = self.reset(rng);
        let mut visited = Vec::with_capacity(self.episode_len);
        for t in 0..self.episode_len {
            let a = act(t, &s, rng);
            s = self.step(&s, &a)?;
            visited.push(s.clone());
        }
        Ok(visited)
    }

    pub fn random_action<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.act_dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }
}
