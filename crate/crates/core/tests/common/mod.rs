#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlab_core::numkit::Parameterized;

pub const FD_STEP: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Magnitude below which a gradient entry is compared on an absolute scale.
/// Central differences at `h = 1e-6` carry roughly `1e-10` of roundoff.
pub const REL_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central difference of `f` along every coordinate of `x`.
pub fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + FD_STEP;
            let up = f(&v);
            v[i] = x[i] - FD_STEP;
            let down = f(&v);
            v[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| rel_err(*a, *b))
        .fold(0.0, f64::max)
}

/// Max relative error between `analytic` and central differences of `f`
/// over the flat parameters of `p`.
pub fn param_fd_error<P: Parameterized + Clone>(p: &P, analytic: &P, f: impl Fn(&P) -> f64) -> f64 {
    let base = p.flat_params();
    let numeric = numeric_grad(&base, |v| {
        let mut q = p.clone();
        q.set_flat_params(v).expect("same shape");
        f(&q)
    });
    max_rel_err(&analytic.flat_params(), &numeric)
}
