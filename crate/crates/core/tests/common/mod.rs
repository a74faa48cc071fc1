//! Independent reference implementations shared by the integration tests and
//! the acceptance suite.
#![allow(dead_code)]

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use prefviz_core::contrastive::{infonce_grad, infonce_items};
use prefviz_core::diffnet::{finite_difference, Mlp};
use prefviz_core::embed_viz::tsne::{joint_probabilities, kl_divergence, kl_gradient};
use prefviz_core::ppo::surrogate_loss_grad;
use prefviz_core::reward_model::{Comparison, PreferenceDataset, RewardNet};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `|a - b| / max(|a|, |b|)` over whole vectors.
pub fn norm_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Pearson chi-square statistic of observed counts against equal expected counts.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

/// Upper `alpha` critical value of the chi-square distribution.
pub fn chi_square_critical(df: usize, alpha: f64) -> f64 {
    ChiSquared::new(df as f64).expect("df > 0").inverse_cdf(1.0 - alpha)
}

/// Kendall tau-b between two score lists.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..n {
        for j in (i + 1)..n {
            let da = if a[i] == a[j] { 0.0 } else { (a[i] - a[j]).signum() };
            let db = if b[i] == b[j] { 0.0 } else { (b[i] - b[j]).signum() };
            if da == 0.0 && db == 0.0 {
                continue;
            } else if da == 0.0 {
                ties_a += 1.0;
            } else if db == 0.0 {
                ties_b += 1.0;
            } else if da == db {
                concordant += 1.0;
            } else {
                discordant += 1.0;
            }
        }
    }
    (concordant - discordant) / ((concordant + discordant + ties_a) * (concordant + discordant + ties_b)).sqrt()
}

// ---- gradient checks -------------------------------------------------------

const FD_STEP: f64 = 1e-5;

/// Bradley-Terry loss gradient vs central differences over all reward-net
/// parameters. Returns the relative error of one random instance.
pub fn bt_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let obs_dim = r.random_range(1..4);
    let net = RewardNet::new(obs_dim, &mut r);
    let mut data = PreferenceDataset::new();
    for _ in 0..8 {
        data.add_state((0..obs_dim).map(|_| r.random_range(-2.0..2.0)).collect());
    }
    for _ in 0..6 {
        let s0 = r.random_range(0..8);
        let s1 = (s0 + r.random_range(1..8)) % 8;
        data.push(Comparison { s0, s1, y: r.random_range(0..2) }).unwrap();
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (_, grads) = net.bt_loss_grad(&data.pairs(&idx)).unwrap();
    let flat = net.net.to_flat();
    let fd = finite_difference(&flat, FD_STEP, |p| {
        let mut probe = net.clone();
        probe.net.set_flat(p).unwrap();
        probe.bt_loss(&data.pairs(&idx)).unwrap()
    });
    norm_relative_error(&grads.to_flat(), &fd)
}

/// InfoNCE gradient with respect to raw anchor/positive embeddings.
pub fn infonce_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.random_range(2..7);
    let d = r.random_range(2..6);
    let tau = r.random_range(0.05..1.0);
    let z = Array2::from_shape_simple_fn((2 * b, d), || r.random_range(-1.0..1.0));
    let (_, da, dp) = infonce_grad(z.slice(s![..b, ..]), z.slice(s![b.., ..]), tau).unwrap();
    let analytic: Vec<f64> = da.iter().chain(dp.iter()).copied().collect();
    let flat: Vec<f64> = z.iter().copied().collect();
    let fd = finite_difference(&flat, FD_STEP, |p| {
        let zz = Array2::from_shape_vec((2 * b, d), p.to_vec()).unwrap();
        let items = infonce_items(zz.slice(s![..b, ..]), zz.slice(s![b.., ..]), tau).unwrap();
        items.iter().sum::<f64>() / b as f64
    });
    norm_relative_error(&analytic, &fd)
}

/// InfoNCE loss backpropagated through a small encoder to its parameters.
pub fn infonce_network_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = 4;
    let net = Mlp::new(&[6, 5, 3], &mut r);
    let x = Array2::from_shape_simple_fn((2 * b, 6), || r.random_range(-1.0..1.0));
    let tau = 0.2;
    let loss_of = |m: &Mlp| {
        let z = m.forward(x.view()).unwrap();
        let items = infonce_items(z.slice(s![..b, ..]), z.slice(s![b.., ..]), tau).unwrap();
        items.iter().sum::<f64>() / b as f64
    };
    let (_, grads) = net
        .grad(x.view(), |z| {
            let (l, da, dp) = infonce_grad(z.slice(s![..b, ..]), z.slice(s![b.., ..]), tau).unwrap();
            (l, ndarray::concatenate(Axis(0), &[da.view(), dp.view()]).unwrap())
        })
        .unwrap();
    let fd = finite_difference(&net.to_flat(), FD_STEP, |p| {
        let mut m = net.clone();
        m.set_flat(p).unwrap();
        loss_of(&m)
    });
    norm_relative_error(&grads.to_flat(), &fd)
}

/// Reference tanh-Gaussian log-density of pre-squash samples, written out
/// directly from the density formula.
pub fn reference_log_prob(out: &Array2<f64>, u: &Array2<f64>) -> Vec<f64> {
    let a = u.ncols();
    (0..u.nrows())
        .map(|i| {
            (0..a)
                .map(|d| {
                    let mu = out[[i, d]];
                    let sigma = out[[i, a + d]].clamp(-5.0, 2.0).exp();
                    let density = (-(u[[i, d]] - mu).powi(2) / (2.0 * sigma * sigma)).exp()
                        / (sigma * (2.0 * std::f64::consts::PI).sqrt());
                    density.ln() - (1.0 - u[[i, d]].tanh().powi(2)).ln()
                })
                .sum()
        })
        .collect()
}

/// Clipped surrogate loss backpropagated to policy parameters.
pub fn ppo_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let obs_dim = r.random_range(1..4);
    let act_dim = r.random_range(1..3);
    let n = r.random_range(3..9);
    let net = Mlp::new(&[obs_dim, 6, 2 * act_dim], &mut r);
    let obs = Array2::from_shape_simple_fn((n, obs_dim), || r.random_range(-1.0..1.0));
    let u = Array2::from_shape_simple_fn((n, act_dim), || r.random_range(-1.5..1.5));
    let out = net.forward(obs.view()).unwrap();
    let current = reference_log_prob(&out, &u);
    let old: Vec<f64> = current.iter().map(|lp| lp + r.random_range(-0.3..0.3)).collect();
    let adv: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let clip = 0.2;
    let loss_of = |m: &Mlp| {
        let out = m.forward(obs.view()).unwrap();
        let lp = reference_log_prob(&out, &u);
        -(0..n)
            .map(|i| {
                let ratio = (lp[i] - old[i]).exp();
                (ratio * adv[i]).min(ratio.clamp(1.0 - clip, 1.0 + clip) * adv[i])
            })
            .sum::<f64>()
            / n as f64
    };
    let (_, grads) = net.grad(obs.view(), |o| surrogate_loss_grad(o, u.view(), &old, &adv, clip)).unwrap();
    let fd = finite_difference(&net.to_flat(), 1e-6, |p| {
        let mut m = net.clone();
        m.set_flat(p).unwrap();
        loss_of(&m)
    });
    norm_relative_error(&grads.to_flat(), &fd)
}

/// t-SNE KL gradient with respect to the 2D layout.
pub fn tsne_gradient_error(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = r.random_range(12..20);
    let x = Array2::from_shape_simple_fn((n, 4), || r.random_range(-1.0..1.0));
    let (p, _) = joint_probabilities(x.view(), 3.0).unwrap();
    let y = Array2::from_shape_simple_fn((n, 2), || r.random_range(-2.0..2.0));
    let (_, grad) = kl_gradient(p.view(), y.view());
    let fd = finite_difference(&y.iter().copied().collect::<Vec<_>>(), FD_STEP, |v| {
        let yy = Array2::from_shape_vec((n, 2), v.to_vec()).unwrap();
        kl_divergence(p.view(), yy.view())
    });
    norm_relative_error(&grad.iter().copied().collect::<Vec<_>>(), &fd)
}

// ---- clustering oracles ----------------------------------------------------

fn sse(points: &Array2<f64>, members: &[usize]) -> f64 {
    let d = points.ncols();
    let mut c = vec![0.0; d];
    for &m in members {
        for k in 0..d {
            c[k] += points[[m, k]] / members.len() as f64;
        }
    }
    members.iter().map(|&m| (0..d).map(|k| (points[[m, k]] - c[k]).powi(2)).sum::<f64>()).sum()
}

/// Exhaustive Ward merging: every step recomputes the total within-cluster
/// squared error of every candidate merge from scratch. Returns the partition
/// at each cluster count, keyed by count.
pub fn brute_force_ward(points: &Array2<f64>) -> Vec<(usize, Vec<Vec<usize>>)> {
    let n = points.nrows();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut history = vec![(n, clusters.clone())];
    while clusters.len() > 1 {
        let base: f64 = clusters.iter().map(|c| sse(points, c)).sum();
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let mut merged = clusters[a].clone();
                merged.extend(&clusters[b]);
                let total = base - sse(points, &clusters[a]) - sse(points, &clusters[b]) + sse(points, &merged);
                let inc = total - base;
                let (ka, kb) = (clusters[a][0].min(clusters[b][0]), clusters[a][0].max(clusters[b][0]));
                let better = match best {
                    None => true,
                    Some((c, ba, bb)) => {
                        let (ca, cb) = (clusters[ba][0], clusters[bb][0]);
                        inc < c - 1e-12 || ((inc - c).abs() <= 1e-12 && (ka, kb) < (ca.min(cb), ca.max(cb)))
                    }
                };
                if better {
                    best = Some((inc, a, b));
                }
            }
        }
        let (_, a, b) = best.unwrap();
        let mb = clusters.remove(b);
        clusters[a].extend(mb);
        clusters[a].sort_unstable();
        clusters.sort_by_key(|c| c[0]);
        history.push((clusters.len(), clusters.clone()));
    }
    history
}

/// Nearest-unused target assignment written as a sort per target.
pub fn brute_force_select(means: &[f64], m: usize) -> Vec<usize> {
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut used = vec![false; means.len()];
    let mut picked = Vec::new();
    for t in 0..m {
        let target = lo + (hi - lo) * t as f64 / (m - 1) as f64;
        let mut cands: Vec<(f64, usize)> = (0..means.len()).map(|i| ((means[i] - target).abs(), i)).collect();
        cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let &(_, i) = cands.iter().find(|(_, i)| !used[*i]).unwrap();
        used[i] = true;
        picked.push(i);
    }
    picked.sort_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap().then(a.cmp(&b)));
    picked
}

/// All cross-cluster pairs, enumerated over the flattened membership.
pub fn enumerate_cross_pairs(sizes: &[usize]) -> usize {
    let owner: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &s)| std::iter::repeat_n(c, s)).collect();
    let mut n = 0;
    for a in 0..owner.len() {
        for b in 0..owner.len() {
            if owner[a] > owner[b] {
                n += 1;
            }
        }
    }
    n
}

/// `k` Gaussian blobs with centers far apart; returns points and labels.
pub fn blobs(k: usize, per: usize, dim: usize, spread: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut r = rng(seed);
    let centers: Vec<Vec<f64>> = (0..k).map(|c| (0..dim).map(|d| if d == c { 10.0 } else { 0.0 }).collect()).collect();
    let normal = rand_distr::Normal::new(0.0, spread).unwrap();
    let mut x = Array2::zeros((k * per, dim));
    let mut labels = Vec::with_capacity(k * per);
    for c in 0..k {
        for i in 0..per {
            for d in 0..dim {
                x[[c * per + i, d]] = centers[c][d] + r.sample(normal);
            }
            labels.push(c);
        }
    }
    (x, labels)
}

/// Fraction of points whose nearest other point (in `y`) shares their label.
pub fn one_nn_purity(y: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = y.nrows();
    let mut hits = 0;
    for i in 0..n {
        let mut best = (f64::INFINITY, i);
        for j in 0..n {
            if i != j {
                let d: f64 = (0..y.ncols()).map(|k| (y[[i, k]] - y[[j, k]]).powi(2)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        if labels[best.1] == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues and eigenvectors (as columns), sorted descending.
pub fn jacobi_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| m[[i, j]].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[[y, y]].total_cmp(&m[[x, x]]));
    let vals = order.iter().map(|&i| m[[i, i]]).collect();
    let vecs = Array2::from_shape_fn((n, n), |(r, c)| v[[r, order[c]]]);
    (vals, vecs)
}

/// Perplexity `exp(H)` of each row of a conditional affinity matrix.
pub fn row_perplexities(p: &Array2<f64>) -> Vec<f64> {
    p.rows()
        .into_iter()
        .map(|row| {
            let h: f64 = row.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
            h.exp()
        })
        .collect()
}

/// A two-cluster ranking whose reward ranges overlap, and one whose ranges are
/// disjoint, each with the per-state rewards. Cluster order is ascending.
pub fn mislabel_fixtures() -> [(prefviz_core::cluster_oracle::ClusterRanking, Vec<f64>); 2] {
    use prefviz_core::cluster_oracle::{ClusterRanking, RankingSource};
    let ranking = |clusters: Vec<Vec<usize>>| ClusterRanking { clusters, source: RankingSource::Simulated, iteration: 1 };
    // ids 0..3 low cluster, 3..6 middle, 6..9 high
    let overlapping = vec![0.0, 0.4, 1.2, 0.9, 1.0, 1.5, 1.4, 2.0, 2.5];
    let disjoint = vec![0.0, 0.1, 0.2, 1.0, 1.1, 1.2, 2.0, 2.1, 2.2];
    let clusters = vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7, 8]];
    [(ranking(clusters.clone()), overlapping), (ranking(clusters), disjoint)]
}

/// Random cluster-size fixtures: `count` lists of 2..=6 sizes in 1..=8, with
/// sizes (4, 5, 6) first.
pub fn expansion_fixtures(count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut r = rng(seed);
    let mut out = vec![vec![4, 5, 6]];
    while out.len() < count {
        let m = r.random_range(2..=6);
        out.push((0..m).map(|_| r.random_range(1..=8)).collect());
    }
    out
}

/// Consecutive ids grouped into clusters of the given sizes.
pub fn ranking_with_sizes(sizes: &[usize]) -> prefviz_core::cluster_oracle::ClusterRanking {
    use prefviz_core::cluster_oracle::{ClusterRanking, RankingSource};
    let mut next = 0;
    let clusters = sizes
        .iter()
        .map(|&s| {
            let c: Vec<usize> = (next..next + s).collect();
            next += s;
            c
        })
        .collect();
    ClusterRanking { clusters, source: RankingSource::Simulated, iteration: 1 }
}

/// Histogram of mixed-rollout switch times over `episodes` episodes of a
/// fresh policy.
pub fn mixed_switch_counts(kind: prefviz_core::env::EnvKind, episodes: usize, seed: u64) -> Vec<usize> {
    use prefviz_core::env::EnvSpec;
    use prefviz_core::ppo::{mixed_rollout, ActorCritic};
    let spec = EnvSpec::new(kind);
    let mut r = rng(seed);
    let ac = ActorCritic::new(spec.obs_dim, spec.act_dim, &[8], &mut r);
    let mut counts = vec![0; spec.episode_len];
    for _ in 0..episodes {
        let (states, t) = mixed_rollout(&ac, &spec, None, &mut r).unwrap();
        assert_eq!(states.len(), spec.episode_len);
        counts[t] += 1;
    }
    counts
}

/// A run small enough to finish in seconds.
pub fn tiny_config(
    method: prefviz_core::orchestrator::Method,
    env: prefviz_core::env::EnvKind,
    seed: u64,
) -> prefviz_core::orchestrator::RunConfig {
    use prefviz_core::cluster_oracle::OracleConfig;
    use prefviz_core::contrastive::ContrastiveConfig;
    use prefviz_core::embed_viz::tsne::TsneConfig;
    use prefviz_core::orchestrator::{DrlhpConfig, RunConfig};
    use prefviz_core::ppo::PpoConfig;
    use prefviz_core::reward_model::RewardTrainConfig;
    RunConfig {
        method,
        env,
        seed,
        iterations: 3,
        n_states: 100,
        sample_episodes: 4,
        pca_dim: 10,
        contrastive: ContrastiveConfig { embed_dim: 16, hidden: vec![8], epochs: 1, ..Default::default() },
        tsne: TsneConfig { n_iter: 300, perplexity: 10.0, ..Default::default() },
        oracle: OracleConfig { candidates: 10, clusters: 3, ..Default::default() },
        reward: RewardTrainConfig { initial_steps: 20, steps: 10, batch_size: 64, ..Default::default() },
        drlhp: DrlhpConfig { budget: 30, initial_epochs: 5, ..Default::default() },
        ppo: PpoConfig { hidden: vec![8], n_steps: 200, steps_per_iteration: 400, epochs: 2, eval_episodes: 4, ..Default::default() },
        ..Default::default()
    }
}
