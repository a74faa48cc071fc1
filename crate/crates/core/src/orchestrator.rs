//! The outer training loop for both feedback methods, run directories and
//! resumable checkpoints.
//!
//! Iteration 0 only evaluates the initial policy. Each later iteration gathers
//! labels, refits the reward model on the cumulative dataset, continues PPO
//! from the previous policy and evaluates with the oracle reward.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster_oracle::{simulate_ranking, ClusterRanking, OracleConfig, RankingSource};
use crate::contrastive::{ContrastiveConfig, ContrastiveNet};
use crate::diffnet::{Adam, AdamState, Checkpoint, Mlp};
use crate::embed_viz::{visualize, EmbeddingSnapshot, TsneConfig};
use crate::env::{EnvKind, EnvSpec, EnvState};
use crate::ppo::{evaluate, mixed_rollout, obs_matrix, PpoAgent, PpoConfig, PpoState, StepReward};
use crate::preferences::{
    drlhp_label, drlhp_queries, expand_ranking, hyperbolic_schedule, HumanClock, HumanEvent, TimeModel,
};
use crate::reward_model::{PreferenceDataset, RewardModel, RewardNet, RewardTrainConfig};
use crate::{Error, Result, StateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Clrvis,
    Drlhp,
    /// PPO on the oracle reward; the performance ceiling.
    Oracle,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Clrvis => "clrvis",
            Method::Drlhp => "drlhp",
            Method::Oracle => "oracle",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clrvis" => Ok(Method::Clrvis),
            "drlhp" => Ok(Method::Drlhp),
            "oracle" => Ok(Method::Oracle),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feedback {
    Simulated,
    Live,
}

impl FromStr for Feedback {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulated" => Ok(Feedback::Simulated),
            "live" => Ok(Feedback::Live),
            other => Err(Error::InvalidConfig(format!("unknown feedback source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrlhpConfig {
    /// Total comparisons over the run.
    pub budget: usize,
    pub init_frac: f64,
    pub initial_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DrlhpConfig {
    fn default() -> Self {
        Self { budget: 320, init_frac: 0.25, initial_epochs: 200, epochs: 2, batch_size: 50, lr: 3e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub method: Method,
    pub env: EnvKind,
    pub iterations: usize,
    /// States per labeling snapshot (and per query pool).
    pub n_states: usize,
    /// Episodes rolled out per iteration to draw the snapshot states from.
    pub sample_episodes: usize,
    pub feedback: Feedback,
    pub seed: u64,
    pub pca_dim: usize,
    pub contrastive: ContrastiveConfig,
    pub tsne: TsneConfig,
    pub oracle: OracleConfig,
    pub reward: RewardTrainConfig,
    pub drlhp: DrlhpConfig,
    pub time: TimeModel,
    pub ppo: PpoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Clrvis,
            env: EnvKind::PlanarReacher,
            iterations: 8,
            n_states: 500,
            sample_episodes: 50,
            feedback: Feedback::Simulated,
            seed: 0,
            pca_dim: 50,
            contrastive: ContrastiveConfig::default(),
            tsne: TsneConfig::default(),
            oracle: OracleConfig::default(),
            reward: RewardTrainConfig::default(),
            drlhp: DrlhpConfig::default(),
            time: TimeModel::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.time.validate()?;
        let spec = EnvSpec::new(self.env);
        let pool = self.sample_episodes * spec.episode_len;
        if self.n_states < 2 || self.n_states > pool {
            return Err(Error::InvalidConfig(format!(
                "n_states {} must be in [2, {pool}] (sample_episodes x episode_len)",
                self.n_states
            )));
        }
        if self.method == Method::Clrvis && self.n_states as f64 <= 3.0 * self.tsne.perplexity {
            return Err(Error::InvalidConfig(format!(
                "n_states {} too small for perplexity {}",
                self.n_states, self.tsne.perplexity
            )));
        }
        if self.method == Method::Drlhp && self.iterations > 0 && self.drlhp.budget < self.iterations {
            return Err(Error::InvalidConfig("drlhp budget smaller than iteration count".into()));
        }
        if self.method != Method::Clrvis && self.feedback == Feedback::Live {
            return Err(Error::InvalidConfig("live feedback is only available for clrvis".into()));
        }
        if self.oracle.clusters < 2 || self.oracle.clusters > self.oracle.candidates {
            return Err(Error::InvalidConfig("need 2 <= clusters <= candidates".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> EnvSpec {
        EnvSpec::new(self.env)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: usize,
    pub human_seconds: f64,
    pub mean_reward: f64,
    pub sem: f64,
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(Error::from)).collect()
}

/// What the live labeler receives each iteration. `states[i]` is the state
/// shown at `snapshot.points[i]`.
#[derive(Debug, Clone)]
pub struct LabelRequest {
    pub spec: EnvSpec,
    pub snapshot: EmbeddingSnapshot,
    pub states: Vec<EnvState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiveSubmission {
    pub clusters: Vec<Vec<StateId>>,
    /// Measured labeling time.
    pub seconds: f64,
}

/// A human labeler reached through some session. `request` blocks until a
/// ranking arrives and returns `Error::Aborted` if the session ends first.
pub trait Labeler {
    fn training(&mut self, iteration: usize);
    fn request(&mut self, req: LabelRequest) -> Result<LiveSubmission>;
    fn done(&mut self);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelState {
    pub net: Checkpoint,
    pub adam: AdamState,
    pub updates: usize,
}

/// Everything needed to continue a run after the last completed iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub next_iteration: usize,
    pub rng: ChaCha8Rng,
    pub agent: PpoState,
    pub reward: Option<RewardModelState>,
    pub dataset: PreferenceDataset,
    pub clock: HumanClock,
    pub records: Vec<RunRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub records: Vec<RunRecord>,
    /// False when a live session was aborted before the last iteration.
    pub completed: bool,
}

/// Evaluation episodes use their own stream so that evaluation never shifts
/// the training random sequence.
pub fn eval_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + iteration as u64);
    rng
}

pub struct Run<'a> {
    pub cfg: RunConfig,
    spec: EnvSpec,
    out: Option<PathBuf>,
    labeler: Option<&'a mut dyn Labeler>,
    rng: ChaCha8Rng,
    agent: PpoAgent,
    reward: Option<RewardModel>,
    dataset: PreferenceDataset,
    clock: HumanClock,
    records: Vec<RunRecord>,
    next_iteration: usize,
}

impl<'a> Run<'a> {
    /// Fresh run. With an output directory, the config is written before
    /// anything else happens.
    pub fn new(cfg: RunConfig, out: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
        }
        let spec = cfg.spec();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let agent = PpoAgent::new(&spec, &cfg.ppo, &mut rng);
        Ok(Self {
            spec,
            out: out.map(Path::to_path_buf),
            labeler: None,
            rng,
            agent,
            reward: None,
            dataset: PreferenceDataset::new(),
            clock: HumanClock::default(),
            records: Vec::new(),
            next_iteration: 0,
            cfg,
        })
    }

    /// Continues the run stored in `dir` from its latest checkpoint.
    pub fn resume(dir: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        cfg.validate()?;
        let latest = latest_checkpoint(dir)?
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint under {}", dir.display())))?;
        let state: RunState = serde_json::from_str(&fs::read_to_string(latest.join("state.json"))?)?;
        Self::from_state(cfg, state, Some(dir))
    }

    pub fn from_state(cfg: RunConfig, state: RunState, out: Option<&Path>) -> Result<Self> {
        let reward = match &state.reward {
            Some(r) => Some(RewardModel {
                net: RewardNet::from_net(Mlp::from_checkpoint(&r.net)?)?,
                adam: Adam::from_state(&r.adam)?,
                updates: r.updates,
            }),
            None => None,
        };
        Ok(Self {
            spec: cfg.spec(),
            out: out.map(Path::to_path_buf),
            labeler: None,
            rng: state.rng,
            agent: PpoAgent::from_state(&state.agent)?,
            reward,
            dataset: state.dataset,
            clock: state.clock,
            records: state.records,
            next_iteration: state.next_iteration,
            cfg,
        })
    }

    pub fn with_labeler(mut self, labeler: &'a mut dyn Labeler) -> Self {
        self.labeler = Some(labeler);
        self
    }

    pub fn state(&self) -> RunState {
        RunState {
            next_iteration: self.next_iteration,
            rng: self.rng.clone(),
            agent: self.agent.to_state(),
            reward: self.reward.as_ref().map(|r| RewardModelState {
                net: r.net.net.to_checkpoint(),
                adam: r.adam.to_state(),
                updates: r.updates,
            }),
            dataset: self.dataset.clone(),
            clock: self.clock.clone(),
            records: self.records.clone(),
        }
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn dataset(&self) -> &PreferenceDataset {
        &self.dataset
    }

    pub fn clock(&self) -> &HumanClock {
        &self.clock
    }

    pub fn agent(&self) -> &PpoAgent {
        &self.agent
    }

    pub fn reward_model(&self) -> Option<&RewardModel> {
        self.reward.as_ref()
    }

    pub fn next_iteration(&self) -> usize {
        self.next_iteration
    }

    /// Runs the remaining iterations.
    pub fn run(&mut self) -> Result<RunOutcome> {
        self.run_until(self.cfg.iterations)
    }

    /// Runs iterations up to and including `last` (capped at the configured count).
    pub fn run_until(&mut self, last: usize) -> Result<RunOutcome> {
        let last = last.min(self.cfg.iterations);
        while self.next_iteration <= last {
            match self.step() {
                Ok(()) => {}
                Err(Error::Aborted) => {
                    log::warn!("session aborted during iteration {}; halting", self.next_iteration);
                    return Ok(RunOutcome { records: self.records.clone(), completed: false });
                }
                Err(e) => return Err(e),
            }
        }
        let completed = self.next_iteration > self.cfg.iterations;
        if completed {
            if let Some(l) = self.labeler.as_deref_mut() {
                l.done();
            }
        }
        Ok(RunOutcome { records: self.records.clone(), completed })
    }

    /// One full iteration, then checkpoint.
    pub fn step(&mut self) -> Result<()> {
        let i = self.next_iteration;
        if i > 0 {
            match self.cfg.method {
                Method::Clrvis => self.clrvis_feedback(i)?,
                Method::Drlhp => self.drlhp_feedback(i)?,
                Method::Oracle => {}
            }
            if let Some(l) = self.labeler.as_deref_mut() {
                l.training(i);
            }
            let reward = match (self.cfg.method, &self.reward) {
                (Method::Oracle, _) => StepReward::Oracle,
                (_, Some(rm)) => StepReward::Learned(&rm.net),
                (_, None) => StepReward::Zero,
            };
            self.agent.train(&self.spec, reward, self.cfg.ppo.steps_per_iteration, &self.cfg.ppo, &mut self.rng)?;
        }
        let (mean_reward, sem) =
            evaluate(&self.agent.ac, &self.spec, self.cfg.ppo.eval_episodes, &mut eval_rng(self.cfg.seed, i))?;
        let record = RunRecord { iteration: i, human_seconds: self.clock.seconds(), mean_reward, sem };
        log::info!(
            "{} {} seed {} iter {i}: human {:.0}s reward {mean_reward:.3} +- {sem:.3} |D| {}",
            self.cfg.method,
            self.cfg.env,
            self.cfg.seed,
            record.human_seconds,
            self.dataset.len()
        );
        self.records.push(record);
        self.next_iteration += 1;
        self.persist(i)
    }

    /// States from `sample_episodes` episodes, `n_states` of them chosen
    /// uniformly without replacement.
    fn sample_states(&mut self, mixed: bool) -> Result<Vec<EnvState>> {
        let mut pool = Vec::with_capacity(self.cfg.sample_episodes * self.spec.episode_len);
        for _ in 0..self.cfg.sample_episodes {
            let states = if mixed {
                mixed_rollout(&self.agent.ac, &self.spec, None, &mut self.rng)?.0
            } else {
                let switch = self.spec.episode_len;
                mixed_rollout(&self.agent.ac, &self.spec, Some(switch), &mut self.rng)?.0
            };
            pool.extend(states);
        }
        let picked = index::sample(&mut self.rng, pool.len(), self.cfg.n_states).into_vec();
        Ok(picked.into_iter().map(|k| pool[k].clone()).collect())
    }

    fn random_policy_states(&mut self) -> Result<Vec<EnvState>> {
        let mut pool = Vec::new();
        for _ in 0..self.cfg.sample_episodes {
            pool.extend(self.spec.rollout(&mut self.rng, |_, _, r| self.spec.random_action(r))?);
        }
        let picked = index::sample(&mut self.rng, pool.len(), self.cfg.n_states).into_vec();
        Ok(picked.into_iter().map(|k| pool[k].clone()).collect())
    }

    fn register(&mut self, states: &[EnvState]) -> Vec<StateId> {
        states.iter().map(|s| self.dataset.add_state(s.obs.clone())).collect()
    }

    fn clrvis_feedback(&mut self, i: usize) -> Result<()> {
        let states = self.sample_states(true)?;
        let ids = self.register(&states);
        let mut encoder = ContrastiveNet::new(&self.cfg.contrastive, &mut self.rng);
        encoder.train(&self.spec, &states, &self.cfg.contrastive, &mut self.rng)?;
        let frames: Vec<_> = states.iter().map(|s| crate::render::render(&self.spec, s)).collect();
        let visual = encoder.embed_frames(&frames)?;
        let reward_emb: Option<Array2<f64>> = match &self.reward {
            Some(rm) => Some(rm.net.embed_batch(obs_matrix(&states).view())?),
            None => None,
        };
        let layout = visualize(visual.view(), reward_emb.as_ref().map(|r| r.view()), self.cfg.pca_dim, &self.cfg.tsne, &mut self.rng)?;
        let snapshot = EmbeddingSnapshot::new(i, &ids, layout.coords.view())?;
        if let Some(dir) = &self.out {
            let snap_dir = dir.join("snapshots");
            fs::create_dir_all(&snap_dir)?;
            fs::write(snap_dir.join(format!("iter_{i}.json")), serde_json::to_string(&snapshot)?)?;
        }
        let ranking = match (self.cfg.feedback, self.labeler.as_deref_mut()) {
            (Feedback::Live, Some(labeler)) => {
                let sub = labeler.request(LabelRequest { spec: self.spec.clone(), snapshot: snapshot.clone(), states })?;
                let ranking = ClusterRanking { clusters: sub.clusters, source: RankingSource::Live, iteration: i };
                ranking.validate(Some(&snapshot))?;
                self.clock.charge(&self.cfg.time, i, HumanEvent::LiveRanking(sub.seconds));
                ranking
            }
            (Feedback::Live, None) => return Err(Error::InvalidConfig("live feedback needs a labeler".into())),
            (Feedback::Simulated, _) => {
                let rewards: Vec<f64> = states.iter().map(|s| self.spec.oracle_reward(s)).collect();
                let ranking = simulate_ranking(&snapshot, &rewards, &self.cfg.oracle)?;
                self.clock.charge(&self.cfg.time, i, HumanEvent::SimulatedRanking);
                ranking
            }
        };
        self.dataset.extend(expand_ranking(&ranking))?;
        let rc = self.cfg.reward.clone();
        let steps = if self.reward.is_none() { rc.initial_steps } else { rc.steps };
        let obs_dim = self.spec.obs_dim;
        let rng = &mut self.rng;
        let rm = self.reward.get_or_insert_with(|| RewardModel::new(obs_dim, rng));
        rm.train(&self.dataset, steps, rc.batch_size, rc.lr, &mut self.rng)?;
        Ok(())
    }

    fn drlhp_feedback(&mut self, i: usize) -> Result<()> {
        let d = self.cfg.drlhp.clone();
        let schedule = hyperbolic_schedule(d.budget, d.init_frac, self.cfg.iterations.saturating_sub(1))?;
        let count = schedule.get(i - 1).copied().unwrap_or(0);
        let states = if i == 1 { self.random_policy_states()? } else { self.sample_states(false)? };
        let ids = self.register(&states);
        let queries = drlhp_queries(&ids, count, &mut self.rng)?;
        let labels: Vec<_> = queries
            .into_iter()
            .map(|(a, b)| {
                let (ra, rb) = (
                    self.spec.oracle_reward(&EnvState::new(self.dataset.state(a).to_vec())),
                    self.spec.oracle_reward(&EnvState::new(self.dataset.state(b).to_vec())),
                );
                drlhp_label((a, b), ra, rb, &mut self.rng)
            })
            .collect();
        self.dataset.extend(labels)?;
        self.clock.charge(&self.cfg.time, i, HumanEvent::DrlhpComparisons(count));
        if self.dataset.is_empty() {
            return Ok(());
        }
        let epochs = if self.reward.is_none() { d.initial_epochs } else { d.epochs };
        let obs_dim = self.spec.obs_dim;
        let rng = &mut self.rng;
        let rm = self.reward.get_or_insert_with(|| RewardModel::new(obs_dim, rng));
        rm.train_epochs(&self.dataset, epochs, d.batch_size, d.lr, &mut self.rng)?;
        Ok(())
    }

    fn persist(&self, i: usize) -> Result<()> {
        let Some(dir) = &self.out else { return Ok(()) };
        write_records(&dir.join("records.csv"), &self.records)?;
        self.clock.write_events_csv(&dir.join("events.csv"))?;
        self.dataset.write_csv(dir)?;
        let ck = dir.join("checkpoints").join(format!("iter_{i}"));
        fs::create_dir_all(&ck)?;
        fs::write(ck.join("state.json"), serde_json::to_string(&self.state())?)?;
        self.agent.ac.policy.save(&ck.join("policy.json"))?;
        self.agent.ac.value.save(&ck.join("value.json"))?;
        if let Some(rm) = &self.reward {
            rm.net.net.save(&ck.join("reward.json"))?;
        }
        Ok(())
    }
}

/// Directory of the highest-numbered `checkpoints/iter_<i>` under `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let root = run_dir.join("checkpoints");
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&root)? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(i) = name.to_str().and_then(|n| n.strip_prefix("iter_")).and_then(|n| n.parse::<usize>().ok()) else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| i > *b) {
            best = Some((i, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Runs a fresh experiment to completion.
pub fn run_experiment(cfg: RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    Run::new(cfg, out)?.run()
}
