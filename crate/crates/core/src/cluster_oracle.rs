//! Simulated labeler: Ward clustering of the 2D map, filtering of small or
//! reward-inconsistent clusters, selection of clusters spread evenly over the
//! reward range, and ranking by true mean reward.
//!
//! The oracle only sees true rewards per cluster, so clusters whose reward
//! ranges overlap produce some mislabeled state pairs, as a human would.

use std::collections::HashSet;
use std::fmt;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::embed_viz::EmbeddingSnapshot;
use crate::preferences::expand_ranking;
use crate::{Error, Result, StateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingSource {
    Simulated,
    Live,
}

/// Disjoint clusters of state ids, ascending by judged reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRanking {
    pub clusters: Vec<Vec<StateId>>,
    pub source: RankingSource,
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankingViolation {
    TooFewClusters,
    EmptyCluster,
    Overlap,
    UnknownId,
}

impl RankingViolation {
    pub fn reason(self) -> &'static str {
        match self {
            RankingViolation::TooFewClusters => "too_few_clusters",
            RankingViolation::EmptyCluster => "empty_cluster",
            RankingViolation::Overlap => "overlap",
            RankingViolation::UnknownId => "unknown_id",
        }
    }
}

impl fmt::Display for RankingViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.reason())
    }
}

/// Checks `M >= 2`, non-empty and disjoint clusters, and (given a snapshot)
/// that every id was shown.
pub fn validate_clusters(clusters: &[Vec<StateId>], snapshot: Option<&EmbeddingSnapshot>) -> std::result::Result<(), RankingViolation> {
    if clusters.len() < 2 {
        return Err(RankingViolation::TooFewClusters);
    }
    if clusters.iter().any(Vec::is_empty) {
        return Err(RankingViolation::EmptyCluster);
    }
    let shown: Option<HashSet<StateId>> = snapshot.map(|s| s.ids().into_iter().collect());
    let mut seen = HashSet::new();
    for &id in clusters.iter().flatten() {
        if let Some(shown) = &shown {
            if !shown.contains(&id) {
                return Err(RankingViolation::UnknownId);
            }
        }
        if !seen.insert(id) {
            return Err(RankingViolation::Overlap);
        }
    }
    Ok(())
}

impl ClusterRanking {
    pub fn validate(&self, snapshot: Option<&EmbeddingSnapshot>) -> Result<()> {
        validate_clusters(&self.clusters, snapshot).map_err(|v| Error::InvalidRanking(v.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Clusters selected and ranked per iteration (M).
    pub clusters: usize,
    /// Candidate clusters cut from the dendrogram (K).
    pub candidates: usize,
    pub min_size_frac: f64,
    pub variance_quantile: f64,
    pub relax_step: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { clusters: 5, candidates: 30, min_size_frac: 0.01, variance_quantile: 0.75, relax_step: 0.05 }
    }
}

fn ward_cost(size_a: usize, ca: &[f64], size_b: usize, cb: &[f64]) -> f64 {
    let (na, nb) = (size_a as f64, size_b as f64);
    let d2: f64 = ca.iter().zip(cb).map(|(a, b)| (a - b).powi(2)).sum();
    na * nb / (na + nb) * d2
}

/// Bottom-up Ward clustering of the rows of `points`, stopped at `k`
/// clusters. Each step merges the pair with the smallest increase in
/// within-cluster squared error, ties broken by the lower cluster index (a
/// cluster's index is its smallest member). Clusters are returned ordered by
/// smallest member.
pub fn agglomerate(points: ArrayView2<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = points.nrows();
    let k = k.clamp(1, n.max(1));
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut centroids: Vec<Vec<f64>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut sizes = vec![1usize; n];
    // cost[a][b] for a < b; row_min[a] = best (cost, b) with b > a.
    let mut cost = vec![vec![f64::INFINITY; n]; n];
    for a in 0..n {
        for b in (a + 1)..n {
            cost[a][b] = ward_cost(1, &centroids[a], 1, &centroids[b]);
        }
    }
    let row_best = |cost: &Vec<Vec<f64>>, members: &Vec<Option<Vec<usize>>>, a: usize| -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for b in (a + 1)..n {
            if members[b].is_some() && best.is_none_or(|(c, _)| cost[a][b] < c) {
                best = Some((cost[a][b], b));
            }
        }
        best
    };
    let mut row_min: Vec<Option<(f64, usize)>> = (0..n).map(|a| row_best(&cost, &members, a)).collect();
    let mut active = n;
    while active > k {
        let mut pick: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if members[a].is_none() {
                continue;
            }
            if let Some((c, b)) = row_min[a] {
                if pick.is_none_or(|(pc, _, _)| c < pc) {
                    pick = Some((c, a, b));
                }
            }
        }
        let (_, a, b) = pick.expect("more than k active clusters");
        let merged_b = members[b].take().expect("active");
        let (na, nb) = (sizes[a], sizes[b]);
        let centroid: Vec<f64> = centroids[a]
            .iter()
            .zip(&centroids[b])
            .map(|(x, y)| (x * na as f64 + y * nb as f64) / (na + nb) as f64)
            .collect();
        centroids[a] = centroid;
        sizes[a] = na + nb;
        members[a].as_mut().expect("active").extend(merged_b);
        active -= 1;
        for c in 0..n {
            if c == a || members[c].is_none() {
                continue;
            }
            let (lo, hi) = if c < a { (c, a) } else { (a, c) };
            cost[lo][hi] = ward_cost(sizes[lo], &centroids[lo], sizes[hi], &centroids[hi]);
        }
        row_min[b] = None;
        for c in 0..n {
            if members[c].is_none() {
                continue;
            }
            let stale = match row_min[c] {
                Some((_, m)) => m == a || m == b,
                None => false,
            };
            if c == a || stale {
                row_min[c] = row_best(&cost, &members, c);
            } else if c < a {
                let cand = cost[c][a];
                if let Some((best, m)) = row_min[c] {
                    if cand < best || (cand == best && a < m) {
                        row_min[c] = Some((cand, a));
                    }
                } else {
                    row_min[c] = Some((cand, a));
                }
            }
        }
    }
    let mut out: Vec<Vec<usize>> = members.into_iter().flatten().collect();
    for c in &mut out {
        c.sort_unstable();
    }
    out.sort_by_key(|c| c[0]);
    out
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn variance(values: &[f64]) -> f64 {
    let m = mean(values.iter().copied());
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64
}

/// Indices of the candidate clusters that survive the size and variance
/// filters. `rewards` is indexed by the member positions used in `clusters`;
/// `total` is the number of points in the map.
pub fn filter_candidates(
    clusters: &[Vec<usize>],
    rewards: &[f64],
    total: usize,
    cfg: &OracleConfig,
) -> Result<Vec<usize>> {
    let min_size = cfg.min_size_frac * total as f64;
    let sized: Vec<usize> = (0..clusters.len()).filter(|&c| clusters[c].len() as f64 >= min_size).collect();
    if sized.len() < cfg.clusters {
        return Err(Error::NotEnoughClusters { needed: cfg.clusters, available: sized.len() });
    }
    let variances: Vec<f64> = sized
        .iter()
        .map(|&c| variance(&clusters[c].iter().map(|&i| rewards[i]).collect::<Vec<_>>()))
        .collect();
    // Ascending by (variance, index): the tail is dropped first.
    let mut order: Vec<usize> = (0..sized.len()).collect();
    order.sort_by(|&a, &b| variances[a].total_cmp(&variances[b]).then(a.cmp(&b)));
    let mut quantile = cfg.variance_quantile;
    loop {
        let drop = if quantile >= 1.0 { 0 } else { (sized.len() as f64 * (1.0 - quantile) + 1e-9).floor() as usize };
        let keep = sized.len() - drop;
        if keep >= cfg.clusters {
            let mut kept: Vec<usize> = order[..keep].iter().map(|&o| sized[o]).collect();
            kept.sort_unstable();
            return Ok(kept);
        }
        quantile += cfg.relax_step;
    }
}

/// Picks the `m` clusters whose mean rewards are closest to `m` targets spaced
/// evenly from the lowest to the highest survivor mean, then orders them
/// ascending by mean reward. Returns indices into `clusters`.
pub fn select_and_rank(clusters: &[Vec<usize>], survivors: &[usize], rewards: &[f64], m: usize) -> Result<Vec<usize>> {
    if survivors.len() < m || m < 2 {
        return Err(Error::NotEnoughClusters { needed: m.max(2), available: survivors.len() });
    }
    let means: Vec<f64> = survivors.iter().map(|&c| mean(clusters[c].iter().map(|&i| rewards[i]))).collect();
    select_by_means(&means, m).map(|picked| picked.into_iter().map(|p| survivors[p]).collect())
}

/// Target-value selection over plain means; returns positions into `means`,
/// ascending by mean.
pub fn select_by_means(means: &[f64], m: usize) -> Result<Vec<usize>> {
    if means.len() < m || m < 2 {
        return Err(Error::NotEnoughClusters { needed: m.max(2), available: means.len() });
    }
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut used = vec![false; means.len()];
    let mut picked = Vec::with_capacity(m);
    for t in 0..m {
        let target = lo + (hi - lo) * t as f64 / (m - 1) as f64;
        let best = (0..means.len())
            .filter(|&i| !used[i])
            .min_by(|&a, &b| (means[a] - target).abs().total_cmp(&(means[b] - target).abs()).then(a.cmp(&b)))
            .expect("enough unused survivors");
        used[best] = true;
        picked.push(best);
    }
    picked.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    Ok(picked)
}

/// Full simulated-labeler pass over one snapshot. `rewards[i]` is the oracle
/// reward of the state shown at `snapshot.points[i]`.
pub fn simulate_ranking(snapshot: &EmbeddingSnapshot, rewards: &[f64], cfg: &OracleConfig) -> Result<ClusterRanking> {
    if rewards.len() != snapshot.len() {
        return Err(Error::DimensionMismatch { expected: snapshot.len(), got: rewards.len() });
    }
    let coords = snapshot.coords();
    let candidates = agglomerate(coords.view(), cfg.candidates);
    let survivors = filter_candidates(&candidates, rewards, snapshot.len(), cfg)?;
    let ranked = select_and_rank(&candidates, &survivors, rewards, cfg.clusters)?;
    let ids = snapshot.ids();
    Ok(ClusterRanking {
        clusters: ranked.iter().map(|&c| candidates[c].iter().map(|&i| ids[i]).collect()).collect(),
        source: RankingSource::Simulated,
        iteration: snapshot.iteration,
    })
}

/// Fraction of the comparisons induced by `ranking` whose preferred state has
/// a strictly lower true reward.
pub fn induced_mislabel_rate(ranking: &ClusterRanking, reward_of: impl Fn(StateId) -> f64) -> f64 {
    let comparisons = expand_ranking(ranking);
    if comparisons.is_empty() {
        return 0.0;
    }
    let wrong = comparisons
        .iter()
        .filter(|c| {
            let (pref, other) = if c.y == 1 { (c.s0, c.s1) } else { (c.s1, c.s0) };
            reward_of(pref) < reward_of(other)
        })
        .count();
    wrong as f64 / comparisons.len() as f64
}
