//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. The end-to-end block trains 30 full-size runs and dominates the
//! runtime.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;

use common::*;
use prefviz_core::cluster_oracle::induced_mislabel_rate;
use prefviz_core::embed_viz::tsne::{conditional_affinities, tsne, TsneConfig};
use prefviz_core::embed_viz::visualize;
use prefviz_core::env::EnvKind;
use prefviz_core::orchestrator::{read_records, write_records, Method, Run, RunConfig, RunRecord};
use prefviz_core::preferences::expand_ranking;
use prefviz_core::reward_model::{pair_loss, preference_probability, Comparison, PreferenceDataset, RewardNet};
use prefviz_core::stats::mean_sem;

const SEEDS: u64 = 5;
const ENVS: [EnvKind; 2] = [EnvKind::PlanarReacher, EnvKind::TiltStand];
const METHODS: [Method; 3] = [Method::Clrvis, Method::Drlhp, Method::Oracle];

#[derive(Default)]
struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: impl AsRef<str>) {
        if !pass {
            self.failed += 1;
        }
        println!("{} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    }

    fn note(&self, name: &str, detail: impl AsRef<str>) {
        println!("INFO {name}: {}", detail.as_ref());
    }
}

fn gradients(rep: &mut Report) {
    let start = Instant::now();
    let checks: [(&str, fn(u64) -> f64); 5] = [
        ("bradley-terry", bt_gradient_error),
        ("infonce", infonce_gradient_error),
        ("infonce-encoder", infonce_network_gradient_error),
        ("ppo-surrogate", ppo_gradient_error),
        ("tsne-kl", tsne_gradient_error),
    ];
    let mut worst = Vec::new();
    let mut ok = true;
    for (name, f) in checks {
        let max = (0..25).map(f).fold(0.0, f64::max);
        ok &= max <= 1e-4;
        worst.push(format!("{name} {max:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    rep.line(
        "gradient correctness",
        ok && secs < 60.0,
        format!("25 instances each, worst relative error [{}], {secs:.1}s", worst.join(", ")),
    );
}

fn preference_semantics(rep: &mut Report) {
    let mut r = rng(0);
    let mut worst_anti = 0.0f64;
    for _ in 0..10_000 {
        let (a, b) = (r.random_range(-100.0..100.0), r.random_range(-100.0..100.0));
        worst_anti = worst_anti.max((preference_probability(a, b) + preference_probability(b, a) - 1.0).abs());
    }
    let net = RewardNet::new(3, &mut r);
    let mut data = PreferenceDataset::new();
    let s = data.add_state(vec![0.2, -0.4, 1.0]);
    let t = data.add_state(vec![0.2, -0.4, 1.0]);
    for y in [1, 0, 1, 1, 0, 0, 1] {
        data.push(Comparison { s0: s, s1: t, y }).unwrap();
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let equal_loss = net.bt_loss(&data.pairs(&idx)).unwrap();
    let equal_ok = equal_loss == 7.0 * std::f64::consts::LN_2;
    let overflow_ok = [(1000.0, 0.0), (0.0, 1000.0), (-1000.0, 0.0)].iter().all(|&(a, b)| {
        let p = preference_probability(a, b);
        p.is_finite() && pair_loss(a, b, 0).is_finite() && pair_loss(a, b, 1).is_finite()
    }) && (pair_loss(0.0, 1000.0, 1) - 1000.0).abs() < 1e-9;
    rep.line(
        "preference semantics",
        worst_anti <= 1e-12 && equal_ok && overflow_ok,
        format!("antisymmetry error {worst_anti:.1e}, equal-reward loss {equal_loss} (7 ln 2), |dr| = 1000 finite: {overflow_ok}"),
    );
}

fn tsne_quality(rep: &mut Report) {
    let mut r = rng(1);
    let x = Array2::from_shape_simple_fn((500, 20), || r.random_range(-1.0..1.0));
    let (p, _) = conditional_affinities(x.view(), 30.0).unwrap();
    let worst_perp = row_perplexities(&p).into_iter().map(|v| (v - 30.0).abs() / 30.0).fold(0.0, f64::max);

    let (blob_x, _) = blobs(3, 60, 10, 1.0, 0);
    let cfg = TsneConfig { kl_every: 1, ..Default::default() };
    let res = tsne(blob_x.view(), &cfg, &mut rng(0)).unwrap();
    let tail: Vec<f64> = res.kl_history.iter().filter(|(i, _)| *i >= cfg.n_iter - 100).map(|(_, kl)| *kl).collect();
    let worst_rise = tail.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let kl_ok = tail.len() == 101 && tail.windows(2).all(|w| w[1] <= w[0] + 1e-9 * w[0].abs());

    let purities: Vec<f64> = (0..5)
        .map(|seed| {
            let (x, labels) = blobs(3, 60, 10, 1.0, seed);
            one_nn_purity(&tsne(x.view(), &TsneConfig::default(), &mut rng(seed)).unwrap().coords, &labels)
        })
        .collect();
    let purity_ok = purities.iter().all(|&p| p >= 0.95);

    let visual = Array2::from_shape_simple_fn((500, 128), || r.random_range(-1.0..1.0));
    let reward = Array2::from_shape_simple_fn((500, 64), || r.random_range(-1.0..1.0));
    let start = Instant::now();
    visualize(visual.view(), Some(reward.view()), 50, &TsneConfig::default(), &mut r).unwrap();
    let secs = start.elapsed().as_secs_f64();

    rep.line(
        "t-SNE calibration and quality",
        worst_perp <= 0.01 && kl_ok && purity_ok && secs < 120.0,
        format!(
            "max perplexity error {:.2e}%, largest late KL change {worst_rise:.1e}, 1-NN purity {purities:?}, N=500 in {secs:.1}s",
            worst_perp * 100.0
        ),
    );
}

fn expansion(rep: &mut Report) {
    let fixtures = expansion_fixtures(100, 7);
    let bad = fixtures
        .iter()
        .filter(|sizes| expand_ranking(&ranking_with_sizes(sizes)).len() != enumerate_cross_pairs(sizes))
        .count();
    let n74 = expand_ranking(&ranking_with_sizes(&[4, 5, 6])).len();
    rep.line(
        "expansion bookkeeping",
        bad == 0 && n74 == 74,
        format!("{} fixtures, {bad} mismatches, sizes (4, 5, 6) -> {n74}", fixtures.len()),
    );
}

fn simulated_human(rep: &mut Report) {
    let [(overlap, r_o), (disjoint, r_d)] = mislabel_fixtures();
    let a = induced_mislabel_rate(&overlap, |id| r_o[id]);
    let b = induced_mislabel_rate(&disjoint, |id| r_d[id]);
    rep.line(
        "simulated-human fidelity",
        a > 0.0 && b == 0.0,
        format!("mislabel rate {a:.3} with overlapping rewards, {b} with disjoint ranges"),
    );
}

fn mixed_policy(rep: &mut Report) {
    let counts = mixed_switch_counts(EnvKind::PlanarReacher, 10_000, 3);
    let stat = chi_square_uniform(&counts);
    let crit = chi_square_critical(counts.len() - 1, 0.01);
    rep.line(
        "mixed-policy switch time",
        stat < crit,
        format!("chi2 {stat:.1} vs critical {crit:.1} (df {}, 10^4 episodes)", counts.len() - 1),
    );
}

fn determinism(rep: &mut Report) {
    let mut ok = true;
    let mut notes = Vec::new();
    for method in METHODS {
        let cfg = tiny_config(method, EnvKind::PlanarReacher, 11);
        let a = Run::new(cfg.clone(), None).unwrap().run().unwrap();
        let b = Run::new(cfg.clone(), None).unwrap().run().unwrap();
        let dir = tempfile::tempdir().unwrap();
        Run::new(cfg.clone(), Some(dir.path())).unwrap().run_until(1).unwrap();
        let resumed = Run::resume(dir.path()).unwrap().run().unwrap();
        let on_disk = read_records(&dir.path().join("records.csv")).unwrap();
        let same = a == b;
        let restored = resumed.records == a.records && on_disk == a.records;
        ok &= same && restored;
        notes.push(format!("{method}: rerun identical {same}, resume identical {restored}"));
    }
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![
        RunRecord { iteration: 0, human_seconds: 0.0, mean_reward: -1.0 / 3.0, sem: 0.1 + 0.2 },
        RunRecord { iteration: 1, human_seconds: 60.0, mean_reward: std::f64::consts::PI, sem: 1e-300 },
    ];
    let path = dir.path().join("records.csv");
    write_records(&path, &recs).unwrap();
    let round = read_records(&path).unwrap() == recs;
    ok &= round;
    notes.push(format!("records.csv round trip {round}"));
    rep.line("determinism and persistence", ok, notes.join("; "));
}

struct MethodRuns {
    records: Vec<Vec<RunRecord>>,
    /// Comparisons in the dataset at each record, per seed.
    comparisons: Vec<Vec<usize>>,
}

fn train_all(env: EnvKind, method: Method) -> MethodRuns {
    let mut records = Vec::new();
    let mut comparisons = Vec::new();
    for seed in 0..SEEDS {
        let cfg = RunConfig { method, env, seed, ..Default::default() };
        let mut run = Run::new(cfg, None).unwrap();
        let mut counts = Vec::new();
        let last = run.cfg.iterations;
        for i in 0..=last {
            run.run_until(i).unwrap();
            counts.push(run.dataset().len());
        }
        records.push(run.records().to_vec());
        comparisons.push(counts);
    }
    MethodRuns { records, comparisons }
}

/// Mean across seeds at each iteration, as (human seconds, mean reward).
fn series(runs: &MethodRuns) -> Vec<(f64, f64)> {
    let len = runs.records[0].len();
    (0..len)
        .map(|i| {
            let t = runs.records.iter().map(|r| r[i].human_seconds).sum::<f64>() / runs.records.len() as f64;
            let (m, _) = mean_sem(&runs.records.iter().map(|r| r[i].mean_reward).collect::<Vec<_>>());
            (t, m)
        })
        .collect()
}

/// Value of a record series at human time `t`: the latest record at or before `t`.
fn value_at(s: &[(f64, f64)], t: f64) -> f64 {
    s.iter().rev().find(|(x, _)| *x <= t + 1e-9).map_or(s[0].1, |p| p.1)
}

fn first_time_reaching(s: &[(f64, f64)], level: f64) -> Option<f64> {
    s.iter().find(|(_, v)| *v >= level).map(|(t, _)| *t)
}

fn end_to_end(rep: &mut Report) {
    let start = Instant::now();
    let mut time_ok = true;
    let mut time_notes = Vec::new();
    for env in ENVS {
        let t0 = Instant::now();
        let clrvis = train_all(env, Method::Clrvis);
        let drlhp = train_all(env, Method::Drlhp);
        let oracle = train_all(env, Method::Oracle);
        let (c, d, o) = (series(&clrvis), series(&drlhp), series(&oracle));
        let baseline = c[0].1;
        let ceiling = o.last().unwrap().1;
        let reached = c.last().unwrap().1;
        let frac = (reached - baseline) / (ceiling - baseline);
        rep.line(
            &format!("end-to-end (a) {env}: CLRVis reaches 80% of oracle ceiling"),
            frac >= 0.8,
            format!("baseline {baseline:.3}, CLRVis final {reached:.3}, oracle final {ceiling:.3}, normalized {frac:.3}"),
        );

        let lo = c[2.min(c.len() - 1)].0;
        let hi = c.last().unwrap().0.min(d.last().unwrap().0);
        let mut budgets: Vec<f64> = c.iter().chain(&d).map(|p| p.0).filter(|&t| t >= lo && t <= hi).collect();
        budgets.sort_by(f64::total_cmp);
        budgets.dedup();
        let losses: Vec<String> = budgets
            .iter()
            .filter(|&&t| value_at(&c, t) < value_at(&d, t))
            .map(|t| format!("{t:.0}s: {:.3} < {:.3}", value_at(&c, *t), value_at(&d, *t)))
            .collect();
        rep.line(
            &format!("end-to-end (b) {env}: CLRVis >= DRLHP at matched human time"),
            losses.is_empty() && !budgets.is_empty(),
            if losses.is_empty() {
                format!("{} budgets in [{lo:.0}s, {hi:.0}s] all hold", budgets.len())
            } else {
                format!("behind at {}", losses.join(", "))
            },
        );

        let target = d.last().unwrap().1;
        let t_d = first_time_reaching(&d, target).unwrap();
        let t_c = first_time_reaching(&c, target);
        rep.line(
            &format!("end-to-end (c) {env}: CLRVis time to DRLHP final <= 0.67x"),
            t_c.is_some_and(|t| t <= 0.67 * t_d),
            format!(
                "DRLHP final {target:.3} first reached at {t_d:.0}s; CLRVis reaches it at {}",
                t_c.map_or("never".to_string(), |t| format!("{t:.0}s ({:.2}x)", t / t_d))
            ),
        );

        let within: usize = (0..SEEDS as usize)
            .filter(|&s| {
                let (b, f, top) = (
                    clrvis.records[s][0].mean_reward,
                    clrvis.records[s].last().unwrap().mean_reward,
                    oracle.records[s].last().unwrap().mean_reward,
                );
                (f - b) >= 0.8 * (top - b)
            })
            .count();
        rep.note(&format!("{env} per-seed"), format!("{within}/{SEEDS} CLRVis seeds within 20% of their oracle run"));
        rep.note(
            &format!("{env} series"),
            format!(
                "clrvis {}; drlhp {}; oracle {}",
                fmt_series(&c),
                fmt_series(&d),
                fmt_series(&o)
            ),
        );

        // Time accounting from the same runs.
        for (s, (recs, counts)) in drlhp.records.iter().zip(&drlhp.comparisons).enumerate() {
            for (r, &n) in recs.iter().zip(counts) {
                if r.human_seconds != 3.0 * n as f64 {
                    time_ok = false;
                    time_notes.push(format!("{env} seed {s} iteration {}: {}s for {n} comparisons", r.iteration, r.human_seconds));
                }
            }
        }
        for s in 0..SEEDS as usize {
            let b = [&clrvis, &drlhp, &oracle].map(|m| m.records[s][0]);
            if !b.iter().all(|r| r.human_seconds == 0.0 && r.mean_reward == b[0].mean_reward) {
                time_ok = false;
                time_notes.push(format!("{env} seed {s}: baselines differ {b:?}"));
            }
        }
        rep.note(&format!("{env} runtime"), format!("{:.0}s for {} runs", t0.elapsed().as_secs_f64(), 3 * SEEDS));
    }
    rep.line(
        "time accounting",
        time_ok,
        if time_ok {
            "DRLHP seconds = 3 x comparisons at every record; iteration-0 baselines identical across methods".to_string()
        } else {
            time_notes.join("; ")
        },
    );
    let secs = start.elapsed().as_secs_f64();
    rep.line("end-to-end runtime budget", secs < 4.0 * 3600.0, format!("{:.1} min", secs / 60.0));
}

fn fmt_series(s: &[(f64, f64)]) -> String {
    s.iter().map(|(t, v)| format!("{t:.0}:{v:.2}")).collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let mut rep = Report::default();
    gradients(&mut rep);
    preference_semantics(&mut rep);
    tsne_quality(&mut rep);
    expansion(&mut rep);
    simulated_human(&mut rep);
    mixed_policy(&mut rep);
    determinism(&mut rep);
    if std::env::var_os("ACCEPTANCE_SKIP_E2E").is_some() {
        rep.note("end-to-end", "skipped (ACCEPTANCE_SKIP_E2E set)");
    } else {
        end_to_end(&mut rep);
    }
    if rep.failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", rep.failed);
        ExitCode::FAILURE
    }
}
