//! Ranking expansion, single-state query generation and human-time accounting.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster_oracle::ClusterRanking;
use crate::reward_model::Comparison;
use crate::{Error, Result, StateId};

/// One comparison per cross-cluster pair; the member of the higher-ranked
/// cluster is `s0` and preferred.
pub fn expand_ranking(ranking: &ClusterRanking) -> Vec<Comparison> {
    let c = &ranking.clusters;
    let mut out = Vec::new();
    for i in 0..c.len() {
        for j in (i + 1)..c.len() {
            for &a in &c[j] {
                for &b in &c[i] {
                    out.push(Comparison { s0: a, s1: b, y: 1 });
                }
            }
        }
    }
    out
}

pub fn expansion_count(sizes: &[usize]) -> usize {
    let mut n = 0;
    for i in 0..sizes.len() {
        for j in (i + 1)..sizes.len() {
            n += sizes[i] * sizes[j];
        }
    }
    n
}

/// `count` pairs of distinct states, uniform over ordered pairs of the pool.
pub fn drlhp_queries<R: Rng + ?Sized>(pool: &[StateId], count: usize, rng: &mut R) -> Result<Vec<(StateId, StateId)>> {
    if pool.len() < 2 {
        return Err(Error::InvalidConfig(format!("query pool needs at least 2 states, got {}", pool.len())));
    }
    Ok((0..count)
        .map(|_| {
            let i = rng.random_range(0..pool.len());
            let mut j = rng.random_range(0..pool.len() - 1);
            if j >= i {
                j += 1;
            }
            (pool[i], pool[j])
        })
        .collect())
}

/// Perfect label from true rewards; exact ties are a fair coin.
pub fn drlhp_label<R: Rng + ?Sized>(pair: (StateId, StateId), r0: f64, r1: f64, rng: &mut R) -> Comparison {
    let y = if r0 > r1 {
        1
    } else if r0 < r1 {
        0
    } else {
        u8::from(rng.random_bool(0.5))
    };
    Comparison { s0: pair.0, s1: pair.1, y }
}

/// Per-iteration label counts: entry 0 is the initial share, entries
/// `1..=iterations` split the rest proportionally to `1/(i+1)`. Rounding
/// leftovers go to the earliest iterations, so the counts sum to `budget`.
pub fn hyperbolic_schedule(budget: usize, init_frac: f64, iterations: usize) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&init_frac) {
        return Err(Error::InvalidConfig(format!("init_frac {init_frac} outside [0, 1]")));
    }
    if budget < iterations {
        return Err(Error::InvalidConfig(format!("budget {budget} smaller than {iterations} iterations")));
    }
    let initial = ((budget as f64 * init_frac).round() as usize).min(budget);
    let rest = budget - initial;
    let mut counts = vec![initial];
    if iterations == 0 {
        counts[0] = budget;
        return Ok(counts);
    }
    let weights: Vec<f64> = (1..=iterations).map(|i| 1.0 / (i + 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let shares: Vec<usize> = weights.iter().map(|w| (rest as f64 * w / total).floor() as usize).collect();
    let mut leftover = rest - shares.iter().sum::<usize>();
    for mut s in shares {
        if leftover > 0 {
            s += 1;
            leftover -= 1;
        }
        counts.push(s);
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeModel {
    pub drlhp_seconds_per_comparison: f64,
    pub clrvis_seconds_per_ranking: f64,
}

impl Default for TimeModel {
    fn default() -> Self {
        Self { drlhp_seconds_per_comparison: 3.0, clrvis_seconds_per_ranking: 60.0 }
    }
}

impl TimeModel {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(self.drlhp_seconds_per_comparison) && ok(self.clrvis_seconds_per_ranking) {
            Ok(())
        } else {
            Err(Error::InvalidConfig("time model entries must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    DrlhpComparisons,
    SimulatedRanking,
    LiveRanking,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::DrlhpComparisons => "drlhp_comparisons",
            EventKind::SimulatedRanking => "simulated_ranking",
            EventKind::LiveRanking => "live_ranking",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HumanEvent {
    DrlhpComparisons(usize),
    SimulatedRanking,
    /// Measured seconds from snapshot load to submission.
    LiveRanking(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub iteration: usize,
    pub event_type: EventKind,
    pub count: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HumanClock {
    pub accumulated_seconds: f64,
    pub events: Vec<EventRecord>,
}

impl HumanClock {
    pub fn seconds(&self) -> f64 {
        self.accumulated_seconds
    }

    /// Adds the cost of `event` and logs it. Returns the seconds charged.
    pub fn charge(&mut self, model: &TimeModel, iteration: usize, event: HumanEvent) -> f64 {
        let (event_type, count, seconds) = match event {
            HumanEvent::DrlhpComparisons(n) => {
                (EventKind::DrlhpComparisons, n, n as f64 * model.drlhp_seconds_per_comparison)
            }
            HumanEvent::SimulatedRanking => (EventKind::SimulatedRanking, 1, model.clrvis_seconds_per_ranking),
            HumanEvent::LiveRanking(s) => (EventKind::LiveRanking, 1, s.max(0.0)),
        };
        self.accumulated_seconds += seconds;
        self.events.push(EventRecord { iteration, event_type, count, seconds });
        seconds
    }

    pub fn write_events_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.events {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_events_csv(path: &Path) -> Result<Vec<EventRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        r.deserialize().map(|e| e.map_err(Error::from)).collect()
    }
}

/// Writes `events` to any writer in the events CSV layout.
pub fn write_events<W: Write>(events: &[EventRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in events {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}
