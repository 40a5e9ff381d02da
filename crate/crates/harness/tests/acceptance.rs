//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- C4 C7`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use rlab_core::agent::{
    advantages_from_values, critic_loss, ppo_actor_loss, ActorSample, AdvantageMode, PolicyParams, ValueParams,
};
use rlab_core::baselines::{linucb_update, two_proportion_z, FmConfig, FmParams, LinUcbState};
use rlab_core::encoder::{Dims, EncoderParams, FusionInput};
use rlab_core::env::parse_criteo_line_at;
use rlab_core::memory::{memory_return, RewardEstimatorParams};
use rlab_core::numkit::{log_softmax, Gru, Mlp, Parameterized};
use rlab_core::variants::Arm;
use rlab_core::Error;
use rlab_harness::checkpoint::{decode_checkpoint, encode_checkpoint};
use rlab_harness::config::{AblationFlags, Method, Preset, RunConfig};
use rlab_harness::experiment::{median, write_results};
use rlab_harness::metrics::{wilson_interval, Z95};
use rlab_harness::replica::prompt_oracle_ctr;
use rlab_harness::{run_experiment, Replica};

type Outcome = Result<(bool, String), String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(n: usize, r: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fmt_err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- C1

const FD_STEP: f64 = 1e-6;
/// Entries smaller than this are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn fd_error<P: Parameterized + Clone>(p: &P, analytic: &P, f: impl Fn(&P) -> f64) -> f64 {
    let base = p.flat_params();
    let g = analytic.flat_params();
    let mut worst: f64 = 0.0;
    let mut q = p.clone();
    let mut v = base.clone();
    for i in 0..base.len() {
        v[i] = base[i] + FD_STEP;
        q.set_flat_params(&v).unwrap();
        let up = f(&q);
        v[i] = base[i] - FD_STEP;
        q.set_flat_params(&v).unwrap();
        let down = f(&q);
        v[i] = base[i];
        worst = worst.max(rel_err(g[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn gradient_integrity() -> Outcome {
    const SEEDS: u64 = 20;
    let mut worst = [0.0f64; 6];
    for seed in 0..SEEDS {
        let mut r = rng(seed);

        let mlp = Mlp::new(&[4, 6, 5, 2], &mut r).map_err(fmt_err)?;
        let (x, w) = (uniform(4, &mut r), uniform(2, &mut r));
        let (_, cache) = mlp.forward(&x).map_err(fmt_err)?;
        let (g, _) = mlp.backward(&cache, &w).map_err(fmt_err)?;
        worst[0] = worst[0].max(fd_error(&mlp, &g, |m| dot(&m.predict(&x).unwrap(), &w)));

        let gru = Gru::new(3, 4, &mut r).map_err(fmt_err)?;
        let (h, x, w) = (uniform(4, &mut r), uniform(3, &mut r), uniform(4, &mut r));
        let (_, cache) = gru.forward(&h, &x).map_err(fmt_err)?;
        let (g, _, _) = gru.backward(&cache, &w).map_err(fmt_err)?;
        worst[1] = worst[1].max(fd_error(&gru, &g, |c| dot(&c.forward(&h, &x).unwrap().0, &w)));

        let dims = Dims {
            user: 3,
            context: 2,
            embedding: 3,
            state: 4,
            hidden: 5,
            memory: 3,
        };
        let enc = EncoderParams::new(dims, &mut r).map_err(fmt_err)?;
        let input = FusionInput {
            u: uniform(3, &mut r),
            c: uniform(2, &mut r),
            e_a: uniform(3, &mut r),
            e_b: uniform(3, &mut r),
        };
        let w = uniform(4, &mut r);
        let (_, cache) = enc.encode_input(&input).map_err(fmt_err)?;
        let (g, _) = enc.backward(&cache, &w).map_err(fmt_err)?;
        worst[2] = worst[2].max(fd_error(&enc.fusion, &g.fusion, |m| {
            let p = EncoderParams { dims, fusion: m.clone() };
            dot(&p.encode_input(&input).unwrap().0, &w)
        }));

        let policy = PolicyParams::new(4, 5, &mut r).map_err(fmt_err)?;
        let mut batch = Vec::new();
        while batch.len() < 8 {
            let state = uniform(4, &mut r);
            let action = if r.random::<bool>() { Arm::A } else { Arm::B };
            let logp = log_softmax(&policy.logits(&state).map_err(fmt_err)?).map_err(fmt_err)?[action.index()];
            let log_prob_old = (logp + r.random_range(-0.5..0.5)).min(0.0);
            let ratio = (logp - log_prob_old).exp();
            if (ratio - 0.8).abs() < 1e-3 || (ratio - 1.2).abs() < 1e-3 {
                continue;
            }
            let advantage = r.random_range(-2.0..2.0);
            batch.push(ActorSample { state, action, log_prob_old, advantage });
        }
        let out = ppo_actor_loss(&policy, &batch, 0.2).map_err(fmt_err)?;
        worst[3] = worst[3].max(fd_error(&policy.actor, &out.grads, |m| {
            ppo_actor_loss(&PolicyParams { actor: m.clone() }, &batch, 0.2).unwrap().loss
        }));

        let value = ValueParams::new(4, 5, &mut r).map_err(fmt_err)?;
        let states: Vec<Vec<f64>> = (0..6).map(|_| uniform(4, &mut r)).collect();
        let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
        let returns = uniform(6, &mut r);
        let out = critic_loss(&value, &refs, &returns).map_err(fmt_err)?;
        worst[4] = worst[4].max(fd_error(&value.critic, &out.grads, |m| {
            critic_loss(&ValueParams { critic: m.clone() }, &refs, &returns).unwrap().loss
        }));

        let est = RewardEstimatorParams::new(4, 3, 5, &mut r).map_err(fmt_err)?;
        let (s, m) = (uniform(4, &mut r), uniform(3, &mut r));
        let a = if r.random::<bool>() { Arm::A } else { Arm::B };
        let (_, cache) = est.forward(&s, a, &m).map_err(fmt_err)?;
        let g = est.backward(&cache, 1.0).map_err(fmt_err)?;
        worst[5] = worst[5].max(fd_error(&est, &g, |p| p.forward(&s, a, &m).unwrap().0));
    }
    let max = worst.iter().copied().fold(0.0, f64::max);
    let names = ["mlp", "gru", "encoder", "actor", "critic", "estimator"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((max <= 1e-5, format!("{SEEDS} seeds each; max rel err {detail}")))
}

// ---------------------------------------------------------------- C2

fn ppo_spot_values() -> Outcome {
    let policy = PolicyParams {
        actor: Mlp::zeros(&[1, 2]).map_err(fmt_err)?,
    };
    let sample = |p_old: f64, advantage: f64| ActorSample {
        state: vec![0.0],
        action: Arm::A,
        log_prob_old: f64::ln(p_old),
        advantage,
    };
    let cases = [(sample(0.5, 1.0), -1.0), (sample(0.25, 1.0), -1.2), (sample(1.0, -1.0), 0.8)];
    let mut worst: f64 = 0.0;
    for (s, expected) in cases {
        let loss = ppo_actor_loss(&policy, &[s], 0.2).map_err(fmt_err)?.loss;
        worst = worst.max((loss - expected).abs());
    }
    Ok((worst <= 1e-12, format!("ratios 1, 2, 0.5; max abs err {worst:.1e}")))
}

// ---------------------------------------------------------------- C3

fn return_equivalence() -> Outcome {
    let mut r = rng(33);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(1..=100);
        let gamma = r.random_range(0.01..=1.0);
        let rewards: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let dones: Vec<bool> = (0..n).map(|t| t + 1 == n && r.random::<bool>() || r.random::<f64>() < 0.05).collect();
        let values = uniform(n, &mut r);
        let next_values = uniform(n, &mut r);

        let mc = advantages_from_values(AdvantageMode::MonteCarlo, gamma, &rewards, &dones, &values, &next_values)
            .map_err(fmt_err)?;
        let shaped = memory_return(gamma, &rewards).map_err(fmt_err)?;
        for t in 0..n {
            let (mut episodic, mut plain, mut discount, mut open) = (0.0, 0.0, 1.0, true);
            for k in t..n {
                if open {
                    episodic += discount * rewards[k];
                }
                plain += discount * rewards[k];
                if dones[k] {
                    open = false;
                }
                discount *= gamma;
            }
            if open {
                let steps = (n - t) as i32;
                episodic += gamma.powi(steps) * next_values[n - 1];
            }
            worst = worst
                .max((mc.returns[t] - episodic).abs())
                .max((mc.advantages[t] - (episodic - values[t])).abs())
                .max((shaped[t] - plain).abs());
        }
    }
    Ok((worst <= 1e-12, format!("1000 episodes; max abs err {worst:.1e}")))
}

// ---------------------------------------------------------------- C4

fn stationary_convergence() -> Outcome {
    let mut cfg = Preset::TwoArm.config(20_000);
    cfg.oracle_users = 0;
    let (mut converged, mut finals) = (0, Vec::new());
    for seed in 0..10 {
        let mut rep = Replica::new(&cfg, seed).map_err(fmt_err)?;
        let mut reached = false;
        for cp in (1000..=5000).step_by(1000) {
            rep.run_until(cp).map_err(fmt_err)?;
            reached |= rep.best_arm_rates(500).map_err(fmt_err)?.0 >= 0.95;
        }
        converged += usize::from(reached);
        rep.run_to_end().map_err(fmt_err)?;
        finals.push(rep.totals().rate());
    }
    let med = median(&finals).unwrap_or(0.0);
    let min = finals.iter().copied().fold(1.0, f64::min);
    Ok((
        converged >= 9 && med >= 0.70,
        format!("greedy best-arm >= 0.95 by 5000 in {converged}/10 seeds; final CTR median {med:.3} (min {min:.3})"),
    ))
}

// ---------------------------------------------------------------- C5

fn drift_recovery() -> Outcome {
    let mut full = Preset::Drift.config(20_000);
    full.oracle_users = 0;
    full.seeds = (0..10).collect();
    let ablated = RunConfig {
        ablation: AblationFlags {
            no_memory: true,
            ..AblationFlags::default()
        },
        ..full.clone()
    };
    let a = run_experiment(&full).map_err(fmt_err)?;
    let b = run_experiment(&ablated).map_err(fmt_err)?;
    if !a.failures.is_empty() || !b.failures.is_empty() {
        return Err(format!("{} failed seeds", a.failures.len() + b.failures.len()));
    }
    let mut wins = 0;
    let mut pairs = Vec::new();
    for run in &a.runs {
        let other = b.run(run.seed).ok_or("unpaired seed")?;
        wins += usize::from(run.summary.post_drift_clicks >= other.summary.post_drift_clicks);
        pairs.push(format!("{}/{}", run.summary.post_drift_clicks, other.summary.post_drift_clicks));
    }
    Ok((wins >= 7, format!("memory >= no_memory post-flip clicks in {wins}/10 seeds [{}]", pairs.join(" "))))
}

// ---------------------------------------------------------------- C6

fn prompt_lift() -> Outcome {
    let mut cfg = Preset::Tone.config(20_000);
    cfg.oracle_users = 0;
    let (mut wins, mut lifts) = (0, Vec::new());
    for seed in 0..10 {
        let rep = Replica::new(&cfg, seed).map_err(fmt_err)?;
        let tuned = prompt_oracle_ctr(&cfg, seed, rep.prompt_params(), 2000).map_err(fmt_err)?;
        let fixed = prompt_oracle_ctr(&cfg, seed, &cfg.prompt.initial, 2000).map_err(fmt_err)?;
        wins += usize::from(tuned > fixed);
        lifts.push(tuned / fixed - 1.0);
    }
    let mean = lifts.iter().sum::<f64>() / lifts.len() as f64;
    Ok((wins >= 9, format!("tuned > static in {wins}/10 seeds; mean relative lift {:+.1}%", 100.0 * mean)))
}

// ---------------------------------------------------------------- C7

fn method_ordering() -> Outcome {
    let mut cfg = Preset::Drift.config(20_000);
    cfg.oracle_users = 0;
    cfg.seeds = (0..10).collect();
    let mut medians = Vec::new();
    for method in Method::ALL {
        let result = run_experiment(&RunConfig { method, ..cfg.clone() }).map_err(fmt_err)?;
        if !result.failures.is_empty() {
            return Err(format!("{method}: {} failed seeds", result.failures.len()));
        }
        medians.push((method, result.median_final_ctr().ok_or("no runs")?));
    }
    let rl = medians[0].1;
    let passed = medians[1..].iter().all(|(_, m)| rl >= *m);
    let detail = medians.iter().map(|(m, v)| format!("{m} {v:.4}")).collect::<Vec<_>>().join(", ");
    Ok((passed, format!("median final CTR: {detail}")))
}

// ---------------------------------------------------------------- C8

fn gauss_jordan(mut m: Vec<Vec<f64>>, mut y: Vec<f64>) -> Vec<f64> {
    let n = y.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap();
        m.swap(col, pivot);
        y.swap(col, pivot);
        for row in 0..n {
            if row != col {
                let f = m[row][col] / m[col][col];
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
                y[row] -= f * y[col];
            }
        }
    }
    (0..n).map(|i| y[i] / m[i][i]).collect()
}

fn baseline_oracles() -> Outcome {
    let mut lin: f64 = 0.0;
    for seed in 0..50 {
        let mut r = rng(800 + seed);
        let d = r.random_range(1..=5);
        let n = r.random_range(1..=100);
        let mut state = LinUcbState::new(d, 1.0).map_err(fmt_err)?;
        let mut gram = vec![vec![0.0; d]; d];
        let mut rhs = vec![0.0; d];
        for (i, row) in gram.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _ in 0..n {
            let x = uniform(d, &mut r);
            let y = r.random_range(0.0..1.0);
            state = linucb_update(&state, Arm::A, &x, y).map_err(fmt_err)?;
            for i in 0..d {
                rhs[i] += y * x[i];
                for j in 0..d {
                    gram[i][j] += x[i] * x[j];
                }
            }
        }
        let theta = state.theta(Arm::A).map_err(fmt_err)?;
        for (a, b) in theta.iter().zip(gauss_jordan(gram, rhs)) {
            lin = lin.max((a - b).abs());
        }
    }

    let mut fm: f64 = 0.0;
    for seed in 0..200 {
        let mut r = rng(900 + seed);
        let d = r.random_range(1..12);
        let cfg = FmConfig {
            factors: r.random_range(1..6),
            init_std: 0.5,
            ..FmConfig::default()
        };
        let mut p = FmParams::new(d, &cfg, &mut r).map_err(fmt_err)?;
        p.w0 = r.random_range(-1.0..1.0);
        p.w = uniform(d, &mut r);
        let x = uniform(d, &mut r);
        let mut slow = p.w0 + dot(&p.w, &x);
        for i in 0..d {
            for j in i + 1..d {
                let inner: f64 = (0..p.factors()).map(|f| p.v.get(i, f) * p.v.get(j, f)).sum();
                slow += inner * x[i] * x[j];
            }
        }
        fm = fm.max((p.logit(&x).map_err(fmt_err)? - slow).abs());
    }

    let z = two_proportion_z(100, 1000, 150, 1000).map_err(fmt_err)?;
    Ok((
        lin <= 1e-8 && fm <= 1e-12 && (z - 3.38).abs() <= 1e-2,
        format!("LinUCB err {lin:.1e}, FM err {fm:.1e}, z = {z:.4}"),
    ))
}

// ---------------------------------------------------------------- C9

fn wilson_coverage() -> Outcome {
    let mut r = rng(99);
    let dist = Binomial::new(500, 0.1).map_err(fmt_err)?;
    let mut covered = 0;
    for _ in 0..10_000 {
        let (lo, hi) = wilson_interval(dist.sample(&mut r), 500, Z95).map_err(fmt_err)?;
        covered += usize::from(lo <= 0.1 && 0.1 <= hi);
    }
    let rate = covered as f64 / 10_000.0;
    Ok(((0.94..=0.96).contains(&rate), format!("coverage {:.2}%", 100.0 * rate)))
}

// ---------------------------------------------------------------- C10

fn parse_field(line: &str) -> Option<usize> {
    match parse_criteo_line_at(line, 1) {
        Err(Error::Parse { field, .. }) => Some(field),
        _ => None,
    }
}

fn dir_files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "run_meta.json") {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn parser_and_determinism() -> Outcome {
    let blank = |label: &str| std::iter::once(label).chain(std::iter::repeat_n("", 39)).collect::<Vec<_>>().join("\t");
    let mut valid: Vec<String> = blank("1").split('\t').map(str::to_string).collect();
    valid[1] = "5".into();
    valid[14] = "62770d79".into();
    let mut bad_int = valid.clone();
    bad_int[3] = "4.5".into();
    let mut bad_cat = valid.clone();
    bad_cat[20] = "zz12".into();
    let short = valid[..39].join("\t");
    let parser_ok = parse_criteo_line_at(&valid.join("\t"), 1).is_ok()
        && parse_criteo_line_at(&blank("0"), 1).is_ok()
        && parse_field(&short) == Some(40)
        && parse_field(&format!("{}\textra", valid.join("\t"))) == Some(41)
        && parse_field(&blank("2")) == Some(1)
        && parse_field(&bad_int.join("\t")) == Some(4)
        && parse_field(&bad_cat.join("\t")) == Some(21);

    let mut cfg = Preset::Drift.config(2000);
    cfg.report_every = 250;
    cfg.oracle_users = 50;
    cfg.seeds = vec![1, 2];
    let mut identical = true;
    for method in Method::ALL {
        let c = RunConfig { method, ..cfg.clone() };
        let dirs = [tempfile::tempdir().map_err(fmt_err)?, tempfile::tempdir().map_err(fmt_err)?];
        for d in &dirs {
            write_results(&[run_experiment(&c).map_err(fmt_err)?], d.path()).map_err(fmt_err)?;
        }
        identical &= dir_files(dirs[0].path()) == dir_files(dirs[1].path());
    }

    let mut resumed_equal = true;
    for method in Method::ALL {
        let c = RunConfig { method, ..cfg.clone() };
        let mut whole = Replica::new(&c, 7).map_err(fmt_err)?;
        whole.run_to_end().map_err(fmt_err)?;
        let mut first = Replica::new(&c, 7).map_err(fmt_err)?;
        first.run_until(1000).map_err(fmt_err)?;
        let bytes = encode_checkpoint(&first).map_err(fmt_err)?;
        drop(first);
        let mut rest = decode_checkpoint(&bytes).map_err(fmt_err)?;
        rest.run_to_end().map_err(fmt_err)?;
        resumed_equal &= rest.series() == whole.series()
            && encode_checkpoint(&rest).map_err(fmt_err)? == encode_checkpoint(&whole).map_err(fmt_err)?;
    }
    Ok((
        parser_ok && identical && resumed_equal,
        format!("parser {parser_ok}, byte-identical reruns {identical}, split-run resume exact {resumed_equal}"),
    ))
}

// ----------------------------------------------------------------

struct Criterion {
    id: &'static str,
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let secs = Duration::from_secs;
    let all = [
        Criterion { id: "C1", name: "gradient integrity", budget: secs(30), run: gradient_integrity },
        Criterion { id: "C2", name: "PPO clip spot values", budget: secs(1), run: ppo_spot_values },
        Criterion { id: "C3", name: "return/advantage equivalence", budget: secs(10), run: return_equivalence },
        Criterion { id: "C4", name: "stationary convergence", budget: secs(120), run: stationary_convergence },
        Criterion { id: "C5", name: "drift recovery with memory", budget: secs(300), run: drift_recovery },
        Criterion { id: "C6", name: "prompt-optimization lift", budget: secs(120), run: prompt_lift },
        Criterion { id: "C7", name: "method ordering under drift", budget: secs(600), run: method_ordering },
        Criterion { id: "C8", name: "baseline oracles", budget: secs(10), run: baseline_oracles },
        Criterion { id: "C9", name: "Wilson coverage", budget: secs(10), run: wilson_coverage },
        Criterion { id: "C10", name: "parser and determinism", budget: secs(30), run: parser_and_determinism },
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in all.iter().filter(|c| wanted.is_empty() || wanted.iter().any(|w| w.eq_ignore_ascii_case(c.id))) {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (passed, detail) = match outcome {
            Ok((ok, detail)) => (ok && elapsed <= c.budget, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!passed);
        println!(
            "{} {:<4} {:<30} {detail} ({:.1}s of {}s)",
            if passed { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64(),
            c.budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
