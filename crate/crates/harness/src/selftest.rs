//! Quick built-in checks: finite-difference gradients, clip cases, the
//! z-test hand case and interval coverage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rlab_core::agent::{ppo_actor_loss, ActorSample, PolicyParams};
use rlab_core::baselines::two_proportion_z;
use rlab_core::numkit::{Gru, Mlp, Parameterized};
use rlab_core::variants::Arm;

use crate::metrics::{wilson_interval, Z95};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Max relative error between `analytic` and central differences of `f`.
fn fd_check<P: Parameterized + Clone>(p: &P, analytic: &[f64], f: impl Fn(&P) -> f64) -> f64 {
    let h = 1e-6;
    let base = p.flat_params();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut q = p.clone();
        let mut v = base.clone();
        v[i] += h;
        q.set_flat_params(&v).expect("same shape");
        let up = f(&q);
        v[i] -= 2.0 * h;
        q.set_flat_params(&v).expect("same shape");
        let down = f(&q);
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
    }
    worst
}

fn gaussian_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn mlp_gradients() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp::new(&[4, 5, 3], &mut rng).expect("valid shape");
        let x = gaussian_vec(4, &mut rng);
        let w = gaussian_vec(3, &mut rng);
        let (_, cache) = mlp.forward(&x).expect("forward");
        let (g, _) = mlp.backward(&cache, &w).expect("backward");
        let loss = |m: &Mlp| m.predict(&x).expect("forward").iter().zip(&w).map(|(y, w)| y * w).sum();
        worst = worst.max(fd_check(&mlp, &g.flat_params(), loss));
    }
    Check {
        name: "mlp finite differences",
        passed: worst <= 1e-5,
        detail: format!("max relative error {worst:.2e}"),
    }
}

fn gru_gradients() -> Check {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let gru = Gru::new(3, 4, &mut rng).expect("valid shape");
        let h = gaussian_vec(4, &mut rng);
        let x = gaussian_vec(3, &mut rng);
        let w = gaussian_vec(4, &mut rng);
        let (_, cache) = gru.forward(&h, &x).expect("forward");
        let (g, _, _) = gru.backward(&cache, &w).expect("backward");
        let loss = |c: &Gru| c.forward(&h, &x).expect("forward").0.iter().zip(&w).map(|(y, w)| y * w).sum();
        worst = worst.max(fd_check(&gru, &g.flat_params(), loss));
    }
    Check {
        name: "gru finite differences",
        passed: worst <= 1e-5,
        detail: format!("max relative error {worst:.2e}"),
    }
}

fn ppo_clip_cases() -> Check {
    let policy = PolicyParams {
        actor: Mlp::zeros(&[1, 2]).expect("valid shape"),
    };
    let half = 0.5f64.ln();
    let sample = |log_prob_old: f64, advantage: f64| ActorSample {
        state: vec![0.0],
        action: Arm::A,
        log_prob_old,
        advantage,
    };
    let cases = [
        (sample(half, 1.0), -1.0),
        (sample(0.25f64.ln(), 1.0), -1.2),
        (sample(0.0, -1.0), 0.8),
    ];
    let mut worst: f64 = 0.0;
    for (s, expected) in cases {
        let loss = ppo_actor_loss(&policy, &[s], 0.2).expect("valid batch").loss;
        worst = worst.max((loss - expected).abs());
    }
    Check {
        name: "ppo clip cases",
        passed: worst <= 1e-12,
        detail: format!("max abs error {worst:.2e}"),
    }
}

fn z_test_case() -> Check {
    let z = two_proportion_z(100, 1000, 150, 1000).expect("valid counts");
    Check {
        name: "two-proportion z",
        passed: (z - 3.38).abs() <= 1e-2,
        detail: format!("z = {z:.4}"),
    }
}

fn wilson_coverage() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let trials = 2000;
    let mut covered = 0;
    for _ in 0..trials {
        let clicks = (0..500).filter(|_| rng.random::<f64>() < 0.1).count() as u64;
        let (lo, hi) = wilson_interval(clicks, 500, Z95).expect("valid counts");
        covered += usize::from(lo <= 0.1 && 0.1 <= hi);
    }
    let rate = covered as f64 / trials as f64;
    Check {
        name: "wilson coverage",
        passed: (0.93..=0.97).contains(&rate),
        detail: format!("coverage {rate:.3} over {trials} trials"),
    }
}

pub fn run_selftest() -> Vec<Check> {
    vec![
        mlp_gradients(),
        gru_gradients(),
        ppo_clip_cases(),
        z_test_case(),
        wilson_coverage(),
    ]
}
