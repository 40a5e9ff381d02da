//! PPO actor-critic over the two-arm action space.
//!
//! The actor reads the state recorded when the action was taken. The critic
//! re-encodes the stored fusion inputs, and its loss is the only gradient
//! that reaches the encoder.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Dims, EncoderParams, FusionInput, State};
use crate::error::{check_dim, Error, Result};
use crate::numkit::{all_finite, log_softmax, softmax, AdamState, Mlp, Parameterized};
use crate::variants::Arm;

const LR_BAND: (f64, f64) = (1e-4, 5e-4);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// `Â = r + γV(s') − V(s)`
    Td1,
    /// `Â = R − V(s)` with `R` the discounted return.
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub clip_epsilon: f64,
    pub actor_lr: f64,
    /// Also used for the encoder.
    pub critic_lr: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub buffer_capacity: usize,
    pub advantage_mode: AdvantageMode,
    /// Weight of the entropy bonus; 0 gives the plain clipped objective.
    pub entropy_coef: f64,
    pub normalize_advantages: bool,
    pub actor_hidden: usize,
    pub critic_hidden: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            clip_epsilon: 0.2,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            epochs: 4,
            minibatch: 64,
            buffer_capacity: 256,
            advantage_mode: AdvantageMode::Td1,
            entropy_coef: 0.01,
            normalize_advantages: true,
            actor_hidden: 32,
            critic_hidden: 32,
        }
    }
}

impl PpoConfig {
    /// Rejects invalid settings; returns warnings for learning rates outside
    /// the stable band.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::Config(format!("clip epsilon {} outside (0, 1)", self.clip_epsilon)));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.buffer_capacity == 0 {
            return Err(Error::Config("epochs, minibatch and buffer capacity must be positive".into()));
        }
        if self.actor_hidden == 0 || self.critic_hidden == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return Err(Error::Config("entropy coefficient must be finite and non-negative".into()));
        }
        let mut warnings = Vec::new();
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} {lr} must be positive")));
            }
            if lr < LR_BAND.0 || lr > LR_BAND.1 {
                let msg = format!("{name} {lr} is outside [{}, {}]; training may stall or oscillate", LR_BAND.0, LR_BAND.1);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        Ok(warnings)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub actor: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub critic: Mlp,
}

impl PolicyParams {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            actor: Mlp::new(&[state_dim, hidden, 2], rng)?,
        })
    }

    pub fn logits(&self, s: &[f64]) -> Result<Vec<f64>> {
        let z = self.actor.predict(s)?;
        if !all_finite(&z) {
            return Err(Error::Numeric(format!("policy logits {z:?}")));
        }
        Ok(z)
    }

    /// `[π(A|s), π(B|s)]`.
    pub fn probs(&self, s: &[f64]) -> Result<[f64; 2]> {
        let p = softmax(&self.logits(s)?)?;
        Ok([p[0], p[1]])
    }

    /// Most probable arm; ties go to A.
    pub fn greedy(&self, s: &[f64]) -> Result<Arm> {
        let p = self.probs(s)?;
        Ok(if p[1] > p[0] { Arm::B } else { Arm::A })
    }
}

impl ValueParams {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            critic: Mlp::new(&[state_dim, hidden, 1], rng)?,
        })
    }

    pub fn value(&self, s: &[f64]) -> Result<f64> {
        Ok(self.critic.predict(s)?[0])
    }
}

/// Samples an arm from `softmax(logits)`; returns it with its log-probability.
pub fn select_action<R: Rng + ?Sized>(policy: &PolicyParams, s: &State, rng: &mut R) -> Result<(Arm, f64)> {
    let logp = log_softmax(&policy.logits(&s.s)?)?;
    let u: f64 = rng.random();
    let arm = if u < logp[0].exp() { Arm::A } else { Arm::B };
    Ok((arm, logp[arm.index()]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub input: FusionInput,
    pub next_input: FusionInput,
    pub state: State,
    pub next_state: State,
    pub action: Arm,
    /// Reward used for training.
    pub reward: f64,
    /// Reward delivered by the environment.
    pub observed_reward: f64,
    pub log_prob_old: f64,
    pub done: bool,
    /// User memory before this step (empty when unused).
    pub memory_prev: Vec<f64>,
}

/// Ordered transitions awaiting an update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBuffer {
    transitions: Vec<Transition>,
    capacity: usize,
}

impl RolloutBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("rollout buffer capacity must be positive".into()));
        }
        Ok(Self {
            transitions: Vec::with_capacity(capacity),
            capacity,
        })
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if !t.reward.is_finite() || !t.observed_reward.is_finite() {
            return Err(Error::Validation("transition reward must be finite".into()));
        }
        if t.log_prob_old.is_nan() || t.log_prob_old > 0.0 {
            return Err(Error::Validation(format!("log_prob_old {} must be ≤ 0", t.log_prob_old)));
        }
        if self.is_full() {
            return Err(Error::Contract("rollout buffer is full".into()));
        }
        self.transitions.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.transitions.len() >= self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn transitions_mut(&mut self) -> &mut [Transition] {
        &mut self.transitions
    }

    /// Takes every transition, leaving the buffer empty.
    pub fn drain(&mut self) -> Vec<Transition> {
        std::mem::take(&mut self.transitions)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Advantages and return targets from precomputed values.
///
/// Transitions are in time order: a transition that is not `done` is followed
/// by its successor, or is the last one, in which case its return bootstraps
/// from `next_values`.
pub fn advantages_from_values(
    mode: AdvantageMode,
    gamma: f64,
    rewards: &[f64],
    dones: &[bool],
    values: &[f64],
    next_values: &[f64],
) -> Result<Advantages> {
    let n = rewards.len();
    if n == 0 {
        return Err(Error::Contract("cannot compute advantages of an empty buffer".into()));
    }
    check_dim("dones", n, dones.len())?;
    check_dim("values", n, values.len())?;
    check_dim("next values", n, next_values.len())?;
    let (advantages, returns) = match mode {
        AdvantageMode::Td1 => {
            let returns: Vec<f64> = (0..n)
                .map(|t| rewards[t] + if dones[t] { 0.0 } else { gamma * next_values[t] })
                .collect();
            let adv: Vec<f64> = (0..n).map(|t| returns[t] - values[t]).collect();
            (adv, returns)
        }
        AdvantageMode::MonteCarlo => {
            let mut returns = vec![0.0; n];
            let mut acc = 0.0;
            for t in (0..n).rev() {
                let tail = if dones[t] {
                    0.0
                } else if t + 1 == n {
                    next_values[t]
                } else {
                    acc
                };
                acc = rewards[t] + gamma * tail;
                returns[t] = acc;
            }
            let adv: Vec<f64> = (0..n).map(|t| returns[t] - values[t]).collect();
            (adv, returns)
        }
    };
    if !all_finite(&advantages) {
        return Err(Error::Numeric("non-finite advantage".into()));
    }
    Ok(Advantages { advantages, returns })
}

/// `compute_advantages(cfg, value, buffer)` with states re-encoded by `encoder`.
pub fn compute_advantages(
    cfg: &PpoConfig,
    value: &ValueParams,
    encoder: &EncoderParams,
    transitions: &[Transition],
) -> Result<Advantages> {
    let mut values = Vec::with_capacity(transitions.len());
    let mut next_values = Vec::with_capacity(transitions.len());
    for t in transitions {
        values.push(value.value(&encoder.encode_input(&t.input)?.0)?);
        next_values.push(if t.done {
            0.0
        } else {
            value.value(&encoder.encode_input(&t.next_input)?.0)?
        });
    }
    let rewards: Vec<f64> = transitions.iter().map(|t| t.reward).collect();
    let dones: Vec<bool> = transitions.iter().map(|t| t.done).collect();
    advantages_from_values(cfg.advantage_mode, cfg.gamma, &rewards, &dones, &values, &next_values)
}

/// Centers and scales to unit variance. A constant vector becomes all zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-8 {
            *a /= std;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorSample {
    pub state: Vec<f64>,
    pub action: Arm,
    pub log_prob_old: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorLoss {
    pub loss: f64,
    pub grads: Mlp,
    pub mean_ratio: f64,
    /// Share of samples with `|ratio − 1| > ε`.
    pub clip_fraction: f64,
}

/// Clipped surrogate loss `−mean(min(ρÂ, clip(ρ, 1−ε, 1+ε)Â))` and its gradient.
pub fn ppo_actor_loss(policy: &PolicyParams, batch: &[ActorSample], epsilon: f64) -> Result<ActorLoss> {
    if batch.is_empty() {
        return Err(Error::Contract("empty actor batch".into()));
    }
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    let mut grads = policy.actor.zeros_like();
    for x in batch {
        if !(x.log_prob_old.is_finite() && x.log_prob_old <= 0.0) {
            return Err(Error::Contract(format!(
                "sample is missing a valid log_prob_old (got {})",
                x.log_prob_old
            )));
        }
        let (z, cache) = policy.actor.forward(&x.state)?;
        let logp = log_softmax(&z)?;
        let a = x.action.index();
        let ratio = (logp[a] - x.log_prob_old).exp();
        let bounded = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
        let plain = ratio * x.advantage;
        let clip = bounded * x.advantage;
        loss -= plain.min(clip) / n;
        ratio_sum += ratio;
        if (ratio - 1.0).abs() > epsilon {
            clipped += 1;
        }
        if plain <= clip {
            // d(−ρÂ/n)/dz_k = −(Â/n) ρ (1[k=a] − p_k)
            let scale = -x.advantage * ratio / n;
            let up: Vec<f64> = (0..2)
                .map(|k| scale * (if k == a { 1.0 } else { 0.0 } - logp[k].exp()))
                .collect();
            let (g, _) = policy.actor.backward(&cache, &up)?;
            grads.axpy(1.0, &g)?;
        }
    }
    Ok(ActorLoss {
        loss,
        grads,
        mean_ratio: ratio_sum / n,
        clip_fraction: clipped as f64 / n,
    })
}

/// Mean policy entropy over `states` and its gradient.
pub fn policy_entropy(policy: &PolicyParams, states: &[&[f64]]) -> Result<(f64, Mlp)> {
    if states.is_empty() {
        return Err(Error::Contract("empty entropy batch".into()));
    }
    let n = states.len() as f64;
    let mut total = 0.0;
    let mut grads = policy.actor.zeros_like();
    for s in states {
        let (z, cache) = policy.actor.forward(s)?;
        let logp = log_softmax(&z)?;
        let h: f64 = -logp.iter().map(|l| l.exp() * l).sum::<f64>();
        total += h / n;
        // dH/dz_k = −p_k (log p_k + H)
        let up: Vec<f64> = logp.iter().map(|l| -l.exp() * (l + h) / n).collect();
        let (g, _) = policy.actor.backward(&cache, &up)?;
        grads.axpy(1.0, &g)?;
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticLoss {
    pub loss: f64,
    pub grads: Mlp,
    /// `∂L/∂s` per sample.
    pub dstates: Vec<Vec<f64>>,
}

/// `mean((V(s) − R)²)` with gradients for the critic and the states.
pub fn critic_loss(value: &ValueParams, states: &[&[f64]], returns: &[f64]) -> Result<CriticLoss> {
    if states.is_empty() {
        return Err(Error::Contract("empty critic batch".into()));
    }
    check_dim("critic returns", states.len(), returns.len())?;
    let n = states.len() as f64;
    let mut loss = 0.0;
    let mut grads = value.critic.zeros_like();
    let mut dstates = Vec::with_capacity(states.len());
    for (s, r) in states.iter().zip(returns) {
        let (v, cache) = value.critic.forward(s)?;
        let err = v[0] - r;
        loss += err * err / n;
        let (g, ds) = value.critic.backward(&cache, &[2.0 * err / n])?;
        grads.axpy(1.0, &g)?;
        dstates.push(ds);
    }
    Ok(CriticLoss { loss, grads, dstates })
}

/// Everything the learner owns: networks plus optimizer states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentParams {
    pub policy: PolicyParams,
    pub value: ValueParams,
    pub encoder: EncoderParams,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    pub encoder_opt: AdamState,
}

impl AgentParams {
    pub fn new<R: Rng + ?Sized>(dims: Dims, cfg: &PpoConfig, rng: &mut R) -> Result<Self> {
        let encoder = EncoderParams::new(dims, rng)?;
        let policy = PolicyParams::new(dims.state, cfg.actor_hidden, rng)?;
        let value = ValueParams::new(dims.state, cfg.critic_hidden, rng)?;
        Ok(Self {
            actor_opt: AdamState::new(policy.actor.num_params(), cfg.actor_lr),
            critic_opt: AdamState::new(value.critic.num_params(), cfg.critic_lr),
            encoder_opt: AdamState::new(encoder.fusion.num_params(), cfg.critic_lr),
            policy,
            value,
            encoder,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub samples: usize,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub mean_advantage_raw: f64,
}

fn adam_apply<P: Parameterized>(params: &mut P, opt: &mut AdamState, grads: &P) -> Result<()> {
    let mut flat = params.flat_params();
    opt.step_in_place(&mut flat, &grads.flat_params())?;
    params.set_flat_params(&flat)
}

/// One PPO update over the buffer: `cfg.epochs` passes of shuffled minibatch
/// Adam on actor and critic (the critic loss also trains the encoder).
///
/// The buffer is emptied whether or not the update succeeds. On error the
/// input parameters are untouched.
pub fn train_update<R: Rng + ?Sized>(
    cfg: &PpoConfig,
    params: &AgentParams,
    buffer: &mut RolloutBuffer,
    rng: &mut R,
) -> Result<(AgentParams, TrainDiagnostics)> {
    let transitions = buffer.drain();
    train_on(cfg, params, &transitions, rng)
}

/// [`train_update`] on an explicit transition list.
pub fn train_on<R: Rng + ?Sized>(
    cfg: &PpoConfig,
    params: &AgentParams,
    transitions: &[Transition],
    rng: &mut R,
) -> Result<(AgentParams, TrainDiagnostics)> {
    let adv = compute_advantages(cfg, &params.value, &params.encoder, transitions)?;
    let mut advantages = adv.advantages;
    let raw_mean = advantages.iter().sum::<f64>() / advantages.len() as f64;
    if cfg.normalize_advantages {
        normalize_advantages(&mut advantages);
    }
    let returns = adv.returns;
    let samples: Vec<ActorSample> = transitions
        .iter()
        .zip(&advantages)
        .map(|(t, &a)| ActorSample {
            state: t.state.s.clone(),
            action: t.action,
            log_prob_old: t.log_prob_old,
            advantage: a,
        })
        .collect();

    let mut next = params.clone();
    let mut order: Vec<usize> = (0..transitions.len()).collect();
    let mut diag = TrainDiagnostics {
        samples: transitions.len(),
        mean_advantage_raw: raw_mean,
        ..TrainDiagnostics::default()
    };
    let mut batches = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_actor = 0.0;
        let mut epoch_critic = 0.0;
        let mut epoch_entropy = 0.0;
        let chunks: Vec<&[usize]> = order.chunks(cfg.minibatch).collect();
        for chunk in &chunks {
            let batch: Vec<ActorSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let actor = ppo_actor_loss(&next.policy, &batch, cfg.clip_epsilon)?;
            let mut grads = actor.grads;
            let mut entropy = 0.0;
            if cfg.entropy_coef > 0.0 {
                let states: Vec<&[f64]> = batch.iter().map(|b| &b.state[..]).collect();
                let (h, gh) = policy_entropy(&next.policy, &states)?;
                grads.axpy(-cfg.entropy_coef, &gh)?;
                entropy = h;
            }

            let mut encoded = Vec::with_capacity(chunk.len());
            for &i in chunk.iter() {
                encoded.push(next.encoder.encode_input(&transitions[i].input)?);
            }
            let states: Vec<&[f64]> = encoded.iter().map(|(s, _)| &s[..]).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
            let critic = critic_loss(&next.value, &states, &targets)?;
            let mut enc_grads = next.encoder.fusion.zeros_like();
            for ((_, cache), ds) in encoded.iter().zip(&critic.dstates) {
                let (g, _) = next.encoder.backward(cache, ds)?;
                enc_grads.axpy(1.0, &g.fusion)?;
            }

            if !(actor.loss.is_finite() && critic.loss.is_finite()) {
                return Err(Error::Numeric(format!(
                    "loss became non-finite in epoch {epoch} (actor {}, critic {})",
                    actor.loss, critic.loss
                )));
            }
            adam_apply(&mut next.policy.actor, &mut next.actor_opt, &grads)?;
            adam_apply(&mut next.value.critic, &mut next.critic_opt, &critic.grads)?;
            adam_apply(&mut next.encoder.fusion, &mut next.encoder_opt, &enc_grads)?;

            diag.mean_ratio += actor.mean_ratio;
            diag.clip_fraction += actor.clip_fraction;
            epoch_actor += actor.loss;
            epoch_critic += critic.loss;
            epoch_entropy += entropy;
            batches += 1;
        }
        let k = chunks.len() as f64;
        diag.actor_loss = epoch_actor / k;
        diag.critic_loss = epoch_critic / k;
        diag.entropy = epoch_entropy / k;
    }
    diag.mean_ratio /= batches as f64;
    diag.clip_fraction /= batches as f64;
    Ok((next, diag))
}
