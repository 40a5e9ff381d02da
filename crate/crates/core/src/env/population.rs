use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{ContextFeatures, UserId, UserProfile};
use crate::error::{Error, Result};
use crate::numkit::{mix_seed, normalize_in_place, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub n_users: usize,
    pub n_segments: usize,
    /// Spread of individual preferences around their segment archetype.
    pub noise_std: f64,
    /// Noise added to the projected profile.
    pub profile_noise: f64,
    /// Preference (and variant embedding) dimension.
    pub preference_dim: usize,
    pub profile_dim: usize,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            n_users: 10_000,
            n_segments: 5,
            noise_std: 0.1,
            profile_noise: 0.1,
            preference_dim: 32,
            profile_dim: 16,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_segments == 0 {
            return Err(Error::Config("population needs at least one user and one segment".into()));
        }
        if self.preference_dim == 0 || self.profile_dim == 0 {
            return Err(Error::Config("population dimensions must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.profile_noise >= 0.0) {
            return Err(Error::Config("population noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimUser {
    pub user_id: UserId,
    /// Unit-norm taste vector in embedding space.
    pub preference: Vec<f64>,
    pub segment: usize,
    pub profile: UserProfile,
}

/// Segment archetypes and the fixed preference-to-profile projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    pub archetypes: Vec<Vec<f64>>,
    /// `profile_dim × preference_dim`
    pub projection: Matrix,
}

impl PopulationModel {
    pub fn new(config: &PopulationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5e9]));
        let archetypes = (0..config.n_segments)
            .map(|_| unit_gaussian(config.preference_dim, &mut rng))
            .collect();
        let mut projection = Matrix::zeros(config.profile_dim, config.preference_dim);
        for x in projection.as_mut_slice() {
            *x = StandardNormal.sample(&mut rng);
        }
        Ok(Self { archetypes, projection })
    }
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if normalize_in_place(&mut v) > 1e-12 {
            return v;
        }
    }
}

/// Draws one user: a segment, a perturbed archetype preference, and the
/// projected profile.
pub fn sample_user<R: Rng + ?Sized>(
    config: &PopulationConfig,
    model: &PopulationModel,
    user_id: UserId,
    rng: &mut R,
) -> Result<SimUser> {
    let segment = rng.random_range(0..config.n_segments);
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut preference: Vec<f64> = model.archetypes[segment]
        .iter()
        .map(|a| a + noise.sample(rng))
        .collect();
    if normalize_in_place(&mut preference) == 0.0 {
        preference = model.archetypes[segment].clone();
    }
    let pnoise = Normal::new(0.0, config.profile_noise).map_err(|e| Error::Config(e.to_string()))?;
    let u = model
        .projection
        .matvec(&preference)
        .into_iter()
        .map(|x| x + pnoise.sample(rng))
        .collect();
    Ok(SimUser {
        user_id,
        preference,
        segment,
        profile: UserProfile { user_id, u },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub config: PopulationConfig,
    pub seed: u64,
    pub model: PopulationModel,
    pub users: Vec<SimUser>,
}

impl Population {
    /// Each user is drawn from its own stream, so user `i` does not depend on
    /// how many users precede it.
    pub fn new(config: PopulationConfig, seed: u64) -> Result<Self> {
        let model = PopulationModel::new(&config, seed)?;
        let users = (0..config.n_users)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x05e7, i as u64]));
                sample_user(&config, &model, UserId(i as u64), &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            seed,
            model,
            users,
        })
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn user(&self, index: usize) -> &SimUser {
        &self.users[index]
    }

    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        rng.random_range(0..self.users.len())
    }
}

/// Context at `step`: time of day as sin/cos, a device one-hot over three
/// devices, and Gaussian filler for the remaining entries.
pub fn sample_context<R: Rng + ?Sized>(step: u64, dim: usize, rng: &mut R) -> Result<ContextFeatures> {
    if dim < 5 {
        return Err(Error::Config(format!("context dimension {dim} is below the 5 structured entries")));
    }
    const PERIOD: f64 = 2400.0;
    let phase = std::f64::consts::TAU * (step as f64 % PERIOD) / PERIOD;
    let mut c = vec![0.0; dim];
    c[0] = phase.sin();
    c[1] = phase.cos();
    c[2 + rng.random_range(0..3)] = 1.0;
    for x in c.iter_mut().skip(5) {
        let g: f64 = StandardNormal.sample(rng);
        *x = 0.5 * g;
    }
    Ok(ContextFeatures { timestamp: step, c })
}
