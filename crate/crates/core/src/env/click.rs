use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::population::{Population, SimUser};
use crate::error::{check_dim, Error, Result};
use crate::numkit::{dot, mix_seed, sigmoid, stable_hash};
use crate::variants::{Arm, Knob, Variant, VariantPair};

/// `p = σ(temperature·⟨preference, embedding⟩ + bias + ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClickModel {
    pub bias: f64,
    pub temperature: f64,
    /// Scale of a fixed per-(user, text) logit offset.
    pub noise_std: f64,
}

impl Default for ClickModel {
    fn default() -> Self {
        Self {
            bias: -1.5,
            temperature: 4.0,
            noise_std: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClickScenario {
    /// Click probability depends only on the arm.
    FixedArms { p_a: f64, p_b: f64 },
    Preference(ClickModel),
}

/// The ground-truth response surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub scenario: ClickScenario,
    /// Added to the click probability of content written in the urgent tone.
    pub tone_bonus: f64,
}

impl World {
    pub fn validate(&self) -> Result<()> {
        match &self.scenario {
            ClickScenario::FixedArms { p_a, p_b } => {
                if !(0.0..=1.0).contains(p_a) || !(0.0..=1.0).contains(p_b) {
                    return Err(Error::Config("fixed arm probabilities must lie in [0, 1]".into()));
                }
            }
            ClickScenario::Preference(m) => {
                if !(m.temperature >= 0.0 && m.temperature.is_finite()) {
                    return Err(Error::Config(format!("temperature {} must be ≥ 0", m.temperature)));
                }
                if !(m.noise_std >= 0.0 && m.bias.is_finite()) {
                    return Err(Error::Config("click model bias and noise must be finite, noise ≥ 0".into()));
                }
            }
        }
        if !self.tone_bonus.is_finite() {
            return Err(Error::Config("tone bonus must be finite".into()));
        }
        Ok(())
    }
}

fn text_noise(user: &SimUser, text: &str) -> f64 {
    let seed = mix_seed(&[user.user_id.0, stable_hash(text.as_bytes())]);
    StandardNormal.sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Exact click probability of showing `variant` to `user`.
pub fn ground_truth_p(user: &SimUser, variant: &Variant, world: &World) -> Result<f64> {
    let base = match &world.scenario {
        ClickScenario::FixedArms { p_a, p_b } => match variant.id {
            Arm::A => *p_a,
            Arm::B => *p_b,
        },
        ClickScenario::Preference(m) => {
            check_dim("variant embedding", user.preference.len(), variant.embedding.len())?;
            let mut logit = m.temperature * dot(&user.preference, &variant.embedding) + m.bias;
            if m.noise_std > 0.0 {
                logit += m.noise_std * text_noise(user, &variant.text);
            }
            sigmoid(logit)
        }
    };
    let bonus = if variant.params.get(Knob::Tone) == 0 {
        world.tone_bonus
    } else {
        0.0
    };
    Ok((base + bonus).clamp(0.0, 1.0))
}

/// Click iff `u < p`.
pub fn click_from_uniform(p: f64, u: f64) -> bool {
    u < p
}

/// Serves `variant` to `user`: one uniform draw decides the click.
pub fn step<R: Rng + ?Sized>(user: &SimUser, variant: &Variant, world: &World, rng: &mut R) -> Result<(bool, f64)> {
    let p = ground_truth_p(user, variant, world)?;
    let u: f64 = rng.random();
    Ok((click_from_uniform(p, u), p))
}

/// Expected CTR of a frozen policy over `n_users` sampled users.
///
/// `policy` returns the pair it would generate and its arm probabilities;
/// the expectation is exact per user (no click sampling).
pub fn oracle_ctr<R, F>(population: &Population, world: &World, n_users: usize, rng: &mut R, mut policy: F) -> Result<f64>
where
    R: Rng + ?Sized,
    F: FnMut(&SimUser, &mut R) -> Result<(VariantPair, [f64; 2])>,
{
    if n_users == 0 {
        return Err(Error::Contract("oracle needs at least one user".into()));
    }
    let mut total = 0.0;
    for _ in 0..n_users {
        let user = population.user(population.sample_index(rng));
        let (pair, probs) = policy(user, rng)?;
        for arm in Arm::BOTH {
            if probs[arm.index()] > 0.0 {
                total += probs[arm.index()] * ground_truth_p(user, pair.get(arm), world)?;
            }
        }
    }
    Ok(total / n_users as f64)
}
