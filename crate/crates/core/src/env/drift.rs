use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::population::Population;
use crate::error::{Error, Result};
use crate::numkit::{dot, mix_seed, normalize_in_place};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftKind {
    /// Negates every preference.
    Flip,
    /// Rotates preferences by `angle` radians in a seeded 2-plane.
    Rotate { angle: f64 },
    /// Reflects segment pairs (0,1), (2,3), … onto each other's archetypes.
    SegmentSwap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub step: u64,
    #[serde(flatten)]
    pub kind: DriftKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DriftSchedule {
    pub events: Vec<DriftEvent>,
    /// Seeds rotation planes.
    #[serde(default)]
    pub seed: u64,
}

impl DriftSchedule {
    pub fn validate(&self) -> Result<()> {
        for w in self.events.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::Config(format!(
                    "drift steps must be strictly increasing ({} then {})",
                    w[0].step, w[1].step
                )));
            }
        }
        for e in &self.events {
            if let DriftKind::Rotate { angle } = e.kind {
                if !angle.is_finite() {
                    return Err(Error::Config("rotation angle must be finite".into()));
                }
            }
        }
        Ok(())
    }

    /// Events scheduled for exactly `step`.
    pub fn due(&self, step: u64) -> impl Iterator<Item = (usize, &DriftEvent)> {
        self.events.iter().enumerate().filter(move |(_, e)| e.step == step)
    }
}

fn rotation_plane(dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let mut q1 = draw();
    normalize_in_place(&mut q1);
    let mut q2 = draw();
    let proj = dot(&q1, &q2);
    for (a, b) in q2.iter_mut().zip(&q1) {
        *a -= proj * b;
    }
    normalize_in_place(&mut q2);
    (q1, q2)
}

fn rotate(v: &mut [f64], q1: &[f64], q2: &[f64], angle: f64) {
    let (a, b) = (dot(v, q1), dot(v, q2));
    let (s, c) = angle.sin_cos();
    let (na, nb) = (c * a - s * b, s * a + c * b);
    for i in 0..v.len() {
        v[i] += (na - a) * q1[i] + (nb - b) * q2[i];
    }
}

fn reflect(v: &mut [f64], n: &[f64]) {
    let d = 2.0 * dot(v, n);
    for (x, ni) in v.iter_mut().zip(n) {
        *x -= d * ni;
    }
}

/// Applies every event scheduled for `step`. Profiles are left as they were.
pub fn apply_drift_in_place(population: &mut Population, schedule: &DriftSchedule, step: u64) -> Result<usize> {
    schedule.validate()?;
    let mut applied = 0;
    for (index, event) in schedule.due(step) {
        match event.kind {
            DriftKind::Flip => {
                for u in &mut population.users {
                    u.preference.iter_mut().for_each(|x| *x = -*x);
                }
                for a in &mut population.model.archetypes {
                    a.iter_mut().for_each(|x| *x = -*x);
                }
            }
            DriftKind::Rotate { angle } => {
                let dim = population.config.preference_dim;
                let (q1, q2) = rotation_plane(dim, mix_seed(&[schedule.seed, index as u64]));
                for u in &mut population.users {
                    rotate(&mut u.preference, &q1, &q2, angle);
                }
                for a in &mut population.model.archetypes {
                    rotate(a, &q1, &q2, angle);
                }
            }
            DriftKind::SegmentSwap => {
                let k = population.model.archetypes.len();
                for i in (0..k.saturating_sub(1)).step_by(2) {
                    let j = i + 1;
                    let mut n: Vec<f64> = population.model.archetypes[i]
                        .iter()
                        .zip(&population.model.archetypes[j])
                        .map(|(a, b)| a - b)
                        .collect();
                    if normalize_in_place(&mut n) == 0.0 {
                        continue;
                    }
                    for u in population.users.iter_mut().filter(|u| u.segment == i || u.segment == j) {
                        reflect(&mut u.preference, &n);
                    }
                    population.model.archetypes.swap(i, j);
                }
            }
        }
        applied += 1;
    }
    Ok(applied)
}

/// Pure form of [`apply_drift_in_place`].
pub fn apply_drift(population: &Population, schedule: &DriftSchedule, step: u64) -> Result<Population> {
    let mut next = population.clone();
    apply_drift_in_place(&mut next, schedule, step)?;
    Ok(next)
}
