//! Per-user recurrent memory and the learned reward estimator built on it.
//!
//! The memory update reads `[s; onehot(a)]`; the estimator reads the memory
//! after the current step has been folded in, so its gradient reaches both
//! the head and the recurrent cell.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::UserId;
use crate::error::{check_dim, Error, Result};
use crate::numkit::{all_finite, AdamState, Gru, GruCache, Mlp, MlpCache, Parameterized};
use crate::variants::Arm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMemory {
    pub user_id: UserId,
    pub m: Vec<f64>,
    pub last_update_step: u64,
}

impl UserMemory {
    pub fn fresh(user_id: UserId, dim: usize) -> Self {
        Self {
            user_id,
            m: vec![0.0; dim],
            last_update_step: 0,
        }
    }
}

/// Bounded map of user memories with least-recently-updated eviction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryStore {
    capacity: usize,
    dim: usize,
    clock: u64,
    entries: BTreeMap<u64, (UserMemory, u64)>,
    recency: BTreeMap<u64, u64>,
}

impl MemoryStore {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("memory store capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            dim,
            clock: 0,
            entries: BTreeMap::new(),
            recency: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn contains(&self, user: UserId) -> bool {
        self.entries.contains_key(&user.0)
    }

    /// The stored memory, or a zero memory for unknown and evicted users.
    pub fn get(&self, user: UserId) -> UserMemory {
        self.entries
            .get(&user.0)
            .map(|(m, _)| m.clone())
            .unwrap_or_else(|| UserMemory::fresh(user, self.dim))
    }

    /// Stores `mem`, evicting the least recently updated user if full.
    /// Returns the evicted user, if any.
    pub fn put(&mut self, mem: UserMemory) -> Result<Option<UserId>> {
        check_dim("user memory", self.dim, mem.m.len())?;
        self.clock += 1;
        let key = mem.user_id.0;
        if let Some((_, tick)) = self.entries.remove(&key) {
            self.recency.remove(&tick);
        }
        let mut evicted = None;
        if self.entries.len() >= self.capacity {
            if let Some((_, oldest)) = self.recency.pop_first() {
                self.entries.remove(&oldest);
                evicted = Some(UserId(oldest));
            }
        }
        self.entries.insert(key, (mem, self.clock));
        self.recency.insert(self.clock, key);
        Ok(evicted)
    }
}

/// Recurrent cell plus reward head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardEstimatorParams {
    pub gru: Gru,
    pub head: Mlp,
}

pub struct EstimatorCache {
    gru: GruCache,
    head: MlpCache,
}

impl RewardEstimatorParams {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, memory_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            gru: Gru::new(state_dim + 2, memory_dim, rng)?,
            head: Mlp::new(&[state_dim + 2 + memory_dim, hidden, 1], rng)?,
        })
    }

    pub fn zeros(state_dim: usize, memory_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            gru: Gru::zeros(state_dim + 2, memory_dim),
            head: Mlp::zeros(&[state_dim + 2 + memory_dim, hidden, 1])?,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.gru.input_dim() - 2
    }

    pub fn memory_dim(&self) -> usize {
        self.gru.hidden_dim()
    }

    fn step_input(&self, s: &[f64], a: Arm) -> Result<Vec<f64>> {
        check_dim("estimator state", self.state_dim(), s.len())?;
        let mut x = Vec::with_capacity(s.len() + 2);
        x.extend_from_slice(s);
        x.extend(a.one_hot());
        Ok(x)
    }

    /// `r̃` together with the cache needed for [`Self::backward`].
    pub fn forward(&self, s: &[f64], a: Arm, m_prev: &[f64]) -> Result<(f64, EstimatorCache)> {
        let x = self.step_input(s, a)?;
        check_dim("estimator memory", self.memory_dim(), m_prev.len())?;
        let (m, gru) = self.gru.forward(m_prev, &x)?;
        let mut z = x;
        z.extend_from_slice(&m);
        let (y, head) = self.head.forward(&z)?;
        if !y[0].is_finite() {
            return Err(Error::Numeric("reward estimate is not finite".into()));
        }
        Ok((y[0], EstimatorCache { gru, head }))
    }

    /// Gradient of `upstream · r̃` with respect to all parameters.
    pub fn backward(&self, cache: &EstimatorCache, upstream: f64) -> Result<RewardEstimatorParams> {
        let (head, dz) = self.head.backward(&cache.head, &[upstream])?;
        let dm = &dz[self.gru.input_dim()..];
        let (gru, _, _) = self.gru.backward(&cache.gru, dm)?;
        Ok(Self { gru, head })
    }
}

impl Parameterized for RewardEstimatorParams {
    fn num_params(&self) -> usize {
        self.gru.num_params() + self.head.num_params()
    }

    fn write_params(&self, out: &mut Vec<f64>) {
        self.gru.write_params(out);
        self.head.write_params(out);
    }

    fn read_params(&mut self, src: &[f64]) -> Result<usize> {
        let n = self.gru.read_params(src)?;
        Ok(n + self.head.read_params(&src[n..])?)
    }

    fn zeros_like(&self) -> Self {
        Self {
            gru: self.gru.zeros_like(),
            head: self.head.zeros_like(),
        }
    }
}

/// `m' = GRU(m, [s; onehot(a)])`, stamped with `step`.
pub fn update_memory(
    params: &RewardEstimatorParams,
    mem: &UserMemory,
    s: &[f64],
    a: Arm,
    step: u64,
) -> Result<UserMemory> {
    let x = params.step_input(s, a)?;
    check_dim("user memory", params.memory_dim(), mem.m.len())?;
    let (m, _) = params.gru.forward(&mem.m, &x)?;
    Ok(UserMemory {
        user_id: mem.user_id,
        m,
        last_update_step: step,
    })
}

/// `r̃ = f_r(s, a, m)`.
pub fn estimate_reward(params: &RewardEstimatorParams, s: &[f64], a: Arm, mem: &UserMemory) -> Result<f64> {
    params.forward(s, a, &mem.m).map(|(r, _)| r)
}

/// `R_t = r̃_t + γ R_{t+1}`, computed backwards.
pub fn memory_return(gamma: f64, shaped: &[f64]) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("discount {gamma} outside (0, 1]")));
    }
    let mut out = vec![0.0; shaped.len()];
    let mut acc = 0.0;
    for t in (0..shaped.len()).rev() {
        acc = shaped[t] + gamma * acc;
        out[t] = acc;
    }
    Ok(out)
}

/// One regression example for the estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSample {
    pub s: Vec<f64>,
    pub action: Arm,
    /// Memory before this step.
    pub m_prev: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorTrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Shuffle sample order each epoch.
    pub shuffle: bool,
}

impl Default for EstimatorTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 4,
            minibatch: 64,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    /// Full-dataset loss before training and after each epoch.
    pub losses: Vec<f64>,
    /// True when training made the loss worse and the input was kept.
    pub reverted: bool,
}

/// Mean squared error of the estimator on `data`.
pub fn estimator_loss(params: &RewardEstimatorParams, data: &[EstimatorSample]) -> Result<f64> {
    let mut total = 0.0;
    for x in data {
        let (r, _) = params.forward(&x.s, x.action, &x.m_prev)?;
        total += (r - x.target).powi(2);
    }
    Ok(total / data.len().max(1) as f64)
}

/// Squared-error regression with Adam. Never returns parameters with a
/// higher training loss than the input.
pub fn train_estimator<R: Rng + ?Sized>(
    params: &RewardEstimatorParams,
    optimizer: &AdamState,
    data: &[EstimatorSample],
    cfg: &EstimatorTrainConfig,
    rng: &mut R,
) -> Result<(RewardEstimatorParams, AdamState, EstimatorReport)> {
    if data.is_empty() {
        return Err(Error::Contract("estimator dataset is empty".into()));
    }
    if cfg.minibatch == 0 {
        return Err(Error::Config("estimator minibatch must be positive".into()));
    }
    let initial = estimator_loss(params, data)?;
    let mut losses = vec![initial];
    let mut current = params.clone();
    let mut opt = optimizer.clone();
    let mut flat = current.flat_params();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(rng);
        }
        for chunk in order.chunks(cfg.minibatch) {
            let mut grads = current.zeros_like();
            let scale = 2.0 / chunk.len() as f64;
            for &i in chunk {
                let x = &data[i];
                let (r, cache) = current.forward(&x.s, x.action, &x.m_prev)?;
                let g = current.backward(&cache, scale * (r - x.target))?;
                grads.axpy(1.0, &g)?;
            }
            let g = grads.flat_params();
            if !all_finite(&g) {
                return Err(Error::Numeric(format!(
                    "estimator gradient became non-finite in epoch {epoch}"
                )));
            }
            opt.step_in_place(&mut flat, &g)?;
            current.set_flat_params(&flat)?;
        }
        let loss = estimator_loss(&current, data)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("estimator loss became {loss} in epoch {epoch}")));
        }
        losses.push(loss);
    }
    if *losses.last().unwrap() > initial {
        return Ok((
            params.clone(),
            optimizer.clone(),
            EstimatorReport {
                losses,
                reverted: true,
            },
        ));
    }
    Ok((current, opt, EstimatorReport { losses, reverted: false }))
}
