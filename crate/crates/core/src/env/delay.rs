use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayConfig {
    /// Maximum delay in steps; overdue rewards are zero-filled at this age.
    pub d_max: u64,
    /// Probability that a reward never arrives.
    pub loss_prob: f64,
}

impl Default for DelayConfig {
    fn default() -> Self {
        Self {
            d_max: 20,
            loss_prob: 0.0,
        }
    }
}

impl DelayConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(Error::Config(format!("loss probability {} outside [0, 1]", self.loss_prob)));
        }
        Ok(())
    }

    /// Delay uniform on `[0, d_max]`, or `None` if the reward is lost. Always
    /// consumes exactly two draws.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<u64> {
        let delay = rng.random_range(0..=self.d_max);
        let lost = rng.random::<f64>() < self.loss_prob;
        (!lost).then_some(delay)
    }
}

/// Rewards waiting to be credited, ordered by due step then id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DelayedRewardQueue {
    d_max: u64,
    #[serde(with = "entries")]
    pending: BTreeMap<(u64, u64), f64>,
    ids: BTreeSet<u64>,
}

impl DelayedRewardQueue {
    pub fn new(d_max: u64) -> Self {
        Self {
            d_max,
            pending: BTreeMap::new(),
            ids: BTreeSet::new(),
        }
    }

    pub fn d_max(&self) -> u64 {
        self.d_max
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Schedules `reward` for transition `id`, issued at `now`. `None` delay
    /// means the reward was lost and a zero is delivered at `now + d_max`.
    pub fn push(&mut self, id: u64, reward: f64, now: u64, delay: Option<u64>) -> Result<()> {
        if !self.ids.insert(id) {
            return Err(Error::Contract(format!("transition {id} already has a pending reward")));
        }
        let (due, value) = match delay {
            Some(d) if d <= self.d_max => (now + d, reward),
            Some(d) => {
                self.ids.remove(&id);
                return Err(Error::Contract(format!("delay {d} exceeds d_max {}", self.d_max)));
            }
            None => (now + self.d_max, 0.0),
        };
        self.pending.insert((due, id), value);
        Ok(())
    }

    /// Removes and returns every reward due at or before `now`.
    pub fn pop_due(&mut self, now: u64) -> Vec<(u64, f64)> {
        let later = self.pending.split_off(&(now + 1, 0));
        let due = std::mem::replace(&mut self.pending, later);
        due.into_iter()
            .map(|((_, id), r)| {
                self.ids.remove(&id);
                (id, r)
            })
            .collect()
    }
}

/// Serializes a map with tuple keys as a list of `[key, value]` pairs.
mod entries {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<(u64, u64), f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(map.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<(u64, u64), f64>, D::Error> {
        Ok(Vec::<((u64, u64), f64)>::deserialize(d)?.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivers_in_due_order_exactly_once() {
        let mut q = DelayedRewardQueue::new(20);
        q.push(1, 1.0, 0, Some(3)).unwrap();
        q.push(2, 1.0, 1, Some(0)).unwrap();
        q.push(3, 1.0, 2, None).unwrap();
        assert!(q.push(1, 0.0, 5, Some(1)).is_err());
        assert_eq!(q.pop_due(0), vec![]);
        assert_eq!(q.pop_due(1), vec![(2, 1.0)]);
        assert_eq!(q.pop_due(3), vec![(1, 1.0)]);
        assert_eq!(q.pop_due(21), vec![]);
        assert_eq!(q.pop_due(22), vec![(3, 0.0)]);
        assert!(q.is_empty());
        q.push(1, 0.5, 30, Some(0)).unwrap();
        assert!(q.push(9, 0.5, 30, Some(21)).is_err());
        assert_eq!(q.len(), 1);
    }
}
