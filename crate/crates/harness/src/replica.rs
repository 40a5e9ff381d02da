//! One seeded run of one method: environment, allocator and learner state,
//! advanced one impression at a time.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rlab_core::agent::{select_action, train_on, AgentParams, RolloutBuffer, TrainDiagnostics, Transition};
use rlab_core::baselines::{
    fm_rank_select, fm_sgd_step, linucb_select, linucb_update_in_place, rule_select,
    static_ab_select, AbPhase, FmParams, LinUcbState, StaticAbState,
};
use rlab_core::encoder::{ContextFeatures, FusionInput, State, UserProfile};
use rlab_core::env::{
    apply_drift_in_place, click_from_uniform, ground_truth_p, oracle_ctr, sample_context, DelayedRewardQueue,
    Population, SimUser,
};
use rlab_core::memory::{train_estimator, update_memory, EstimatorSample, MemoryStore, RewardEstimatorParams};
use rlab_core::numkit::{mix_seed, AdamState, Parameterized};
use rlab_core::variants::{
    build_prompt, generate_pair, optimize_prompt_params, stub_pair, Arm, Embedder, Endpoint, GeneratorBinding, Prompt,
    PromptParams, VariantPair,
};

use crate::config::{GeneratorKind, Method, RunConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::{Counter, MetricRow, MetricSeries};

const TAG_USERS: u64 = 0x7573;
const TAG_CONTEXT: u64 = 0x6374;
const TAG_POLICY: u64 = 0x706f;
const TAG_CLICK: u64 = 0x636b;
const TAG_DELAY: u64 = 0x646c;
const TAG_TRAIN: u64 = 0x7472;
const TAG_INIT: u64 = 0x696e;
const TAG_PROBE: u64 = 0x7072;
const TAG_ORACLE: u64 = 0x6f72;
const TAG_GENERATE: u64 = 0x6765;

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, tag]))
}

/// Independent random streams. Environment streams advance identically for
/// every method, so methods see the same users, contexts and click draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Streams {
    users: ChaCha8Rng,
    context: ChaCha8Rng,
    click: ChaCha8Rng,
    delay: ChaCha8Rng,
    policy: ChaCha8Rng,
    train: ChaCha8Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            users: stream(seed, TAG_USERS),
            context: stream(seed, TAG_CONTEXT),
            click: stream(seed, TAG_CLICK),
            delay: stream(seed, TAG_DELAY),
            policy: stream(seed, TAG_POLICY),
            train: stream(seed, TAG_TRAIN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Session {
    user: usize,
    remaining: u64,
}

/// An impression waiting for its reward and its successor state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Pending {
    id: u64,
    input: FusionInput,
    state: State,
    action: Arm,
    log_prob: f64,
    memory_prev: Vec<f64>,
    done: bool,
    reward: Option<f64>,
    next: Option<(FusionInput, State)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub params: AgentParams,
    pub estimator: RewardEstimatorParams,
    pub estimator_opt: AdamState,
    pub memory: MemoryStore,
    buffer: RolloutBuffer,
    pending: VecDeque<Pending>,
    pub updates: u64,
    pub estimator_reverts: u64,
    pub last_diagnostics: Option<TrainDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocator {
    Learned(Box<Learner>),
    StaticAb {
        state: StaticAbState,
        pending: BTreeMap<u64, Arm>,
    },
    LinUcb {
        state: LinUcbState,
        pending: BTreeMap<u64, (Arm, Vec<f64>)>,
    },
    Fm {
        params: FmParams,
        pending: BTreeMap<u64, (Arm, Vec<f64>)>,
    },
    Rules,
}

/// Outcome of pre-launch prompt tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    pub params: PromptParams,
    pub description: String,
    pub evaluations: usize,
    pub estimate: f64,
    pub initial_estimate: f64,
}

/// State rebuilt from the configuration rather than persisted.
struct Runtime {
    population: Population,
    embedder: Embedder,
    external: Option<GeneratorBinding>,
}

#[derive(Serialize, Deserialize)]
pub struct Replica {
    config: RunConfig,
    seed: u64,
    step: u64,
    streams: Streams,
    session: Session,
    prompt_params: PromptParams,
    prompt_report: Option<PromptReport>,
    allocator: Allocator,
    queue: DelayedRewardQueue,
    totals: Counter,
    post_drift: Counter,
    series: MetricSeries,
    generator_fallbacks: u64,
    #[serde(skip)]
    runtime: Option<Runtime>,
}

/// `[u; c; e; 1]` for the linear and factorization baselines.
pub fn arm_features(profile: &UserProfile, context: &ContextFeatures, pair: &VariantPair, arm: Arm) -> Vec<f64> {
    let e = &pair.get(arm).embedding;
    let mut x = Vec::with_capacity(profile.u.len() + context.c.len() + e.len() + 1);
    x.extend_from_slice(&profile.u);
    x.extend_from_slice(&context.c);
    x.extend_from_slice(e);
    x.push(1.0);
    x
}

fn baseline_dim(cfg: &RunConfig) -> usize {
    cfg.dims.user + cfg.dims.context + cfg.dims.embedding + 1
}

fn build_runtime(cfg: &RunConfig, seed: u64, upto_step: u64) -> Result<Runtime> {
    let mut population = Population::new(cfg.population.clone(), seed)?;
    for event in cfg.drift.events.iter().filter(|e| e.step < upto_step) {
        apply_drift_in_place(&mut population, &cfg.drift, event.step)?;
    }
    let embedder = Embedder::new(cfg.dims.embedding);
    let endpoint = match cfg.generator.kind {
        GeneratorKind::Stub => None,
        GeneratorKind::Command => Some(Endpoint::Command {
            program: cfg.generator.command[0].clone(),
            args: cfg.generator.command[1..].to_vec(),
        }),
        GeneratorKind::Tcp => Some(Endpoint::Tcp(cfg.generator.address.clone())),
    };
    let external = match endpoint {
        None => None,
        Some(ep) => match GeneratorBinding::external(ep, cfg.generator.timeout_ms, embedder.clone()) {
            Ok(b) => Some(b),
            Err(e) if cfg.generator.allow_fallback => {
                log::warn!("external generator unavailable, using the stub: {e}");
                None
            }
            Err(e) => return Err(e.into()),
        },
    };
    Ok(Runtime {
        population,
        embedder,
        external,
    })
}

/// Unwraps core errors so callbacks that must return them keep their kind.
fn into_core(e: HarnessError) -> rlab_core::Error {
    match e {
        HarnessError::Core(inner) => inner,
        other => rlab_core::Error::Contract(other.to_string()),
    }
}

fn generate(
    external: &mut Option<GeneratorBinding>,
    embedder: &Embedder,
    cfg: &RunConfig,
    prompt: &Prompt,
    seed: u64,
    fallbacks: &mut u64,
) -> Result<VariantPair> {
    if let Some(binding) = external.as_mut() {
        match generate_pair(binding, prompt, seed) {
            Ok(pair) => return Ok(pair),
            Err(e) if cfg.generator.allow_fallback => {
                log::warn!("generator call failed, using the stub: {e}");
                *fallbacks += 1;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(stub_pair(embedder, prompt, seed)?)
}

/// Mean click rate of uniformly allocated probe impressions served under `params`.
fn probe_ctr(
    rt: &mut Runtime,
    cfg: &RunConfig,
    params: &PromptParams,
    n: usize,
    rng: &mut ChaCha8Rng,
    fallbacks: &mut u64,
) -> Result<f64> {
    let mut clicks = 0u64;
    for _ in 0..n {
        let user = rt.population.user(rt.population.sample_index(rng)).clone();
        let t = rng.random_range(0..2400u64);
        let context = sample_context(t, cfg.dims.context, rng)?;
        let prompt = build_prompt(&cfg.dims, &user.profile, &context, params)?;
        let pair = generate(&mut rt.external, &rt.embedder, cfg, &prompt, rng.random(), fallbacks)?;
        let arm = if rng.random::<f64>() < 0.5 { Arm::A } else { Arm::B };
        let p = ground_truth_p(&user, pair.get(arm), &cfg.world)?;
        clicks += u64::from(click_from_uniform(p, rng.random()));
    }
    Ok(clicks as f64 / n as f64)
}

/// Exact expected CTR of serving `params` with uniform allocation, over
/// `n_users` users drawn from a stream fixed by `seed`.
pub fn prompt_oracle_ctr(cfg: &RunConfig, seed: u64, params: &PromptParams, n_users: usize) -> Result<f64> {
    let Runtime {
        population,
        embedder,
        mut external,
    } = build_runtime(cfg, seed, 0)?;
    let mut rng = stream(seed, TAG_ORACLE);
    let mut fallbacks = 0;
    Ok(oracle_ctr(&population, &cfg.world, n_users, &mut rng, |user, rng| {
        let t = rng.random_range(0..2400u64);
        let context = sample_context(t, cfg.dims.context, rng)?;
        let prompt = build_prompt(&cfg.dims, &user.profile, &context, params)?;
        let pair = generate(&mut external, &embedder, cfg, &prompt, rng.random(), &mut fallbacks)
            .map_err(into_core)?;
        Ok((pair, [0.5, 0.5]))
    })?)
}

impl Replica {
    /// Builds the replica for `seed`, including pre-launch prompt tuning.
    pub fn new(config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.effective();
        let mut runtime = build_runtime(&cfg, seed, 0)?;
        let mut init = stream(seed, TAG_INIT);
        let mut fallbacks = 0;

        let mut prompt_params = cfg.prompt.initial.clone();
        let mut prompt_report = None;
        if cfg.optimizes_prompt() {
            let mut probe_rng = stream(seed, TAG_PROBE);
            let rt = &mut runtime;
            let mut probe = |params: &PromptParams, n: usize| -> rlab_core::Result<f64> {
                probe_ctr(rt, &cfg, params, n, &mut probe_rng, &mut fallbacks)
                    .map_err(into_core)
            };
            let outcome = optimize_prompt_params(&mut probe, &prompt_params, cfg.prompt.budget, &cfg.prompt.optimizer)?;
            prompt_params = outcome.params.clone();
            prompt_report = Some(PromptReport {
                description: outcome.params.describe(),
                params: outcome.params,
                evaluations: outcome.evaluations,
                estimate: outcome.estimate,
                initial_estimate: outcome.input_estimate,
            });
        }

        let allocator = match cfg.method {
            Method::RlLlmAbtest if cfg.ablation.no_actor_critic => Allocator::Rules,
            Method::RlLlmAbtest => {
                let params = AgentParams::new(cfg.dims, &cfg.agent, &mut init)?;
                let estimator =
                    RewardEstimatorParams::new(cfg.dims.state, cfg.dims.memory, cfg.memory.head_hidden, &mut init)?;
                let estimator_opt = AdamState::new(estimator.num_params(), cfg.memory.estimator.learning_rate);
                Allocator::Learned(Box::new(Learner {
                    params,
                    estimator_opt,
                    estimator,
                    memory: MemoryStore::new(cfg.memory.capacity, cfg.dims.memory)?,
                    buffer: RolloutBuffer::new(cfg.agent.buffer_capacity)?,
                    pending: VecDeque::new(),
                    updates: 0,
                    estimator_reverts: 0,
                    last_diagnostics: None,
                }))
            }
            Method::StaticAb => Allocator::StaticAb {
                state: StaticAbState::new(cfg.baselines.static_ab.clone())?,
                pending: BTreeMap::new(),
            },
            Method::Linucb => Allocator::LinUcb {
                state: LinUcbState::new(baseline_dim(&cfg), cfg.baselines.linucb_alpha)?,
                pending: BTreeMap::new(),
            },
            Method::FmRank => Allocator::Fm {
                params: FmParams::new(baseline_dim(&cfg), &cfg.baselines.fm, &mut init)?,
                pending: BTreeMap::new(),
            },
            Method::RulePolicy => Allocator::Rules,
        };

        Ok(Self {
            streams: Streams::new(seed),
            session: Session { user: 0, remaining: 0 },
            queue: DelayedRewardQueue::new(cfg.delay.d_max),
            config: cfg,
            seed,
            step: 0,
            prompt_params,
            prompt_report,
            allocator,
            totals: Counter::default(),
            post_drift: Counter::default(),
            series: MetricSeries::default(),
            generator_fallbacks: fallbacks,
            runtime: Some(runtime),
        })
    }

    /// Rebuilds the non-persisted state after deserialization.
    pub(crate) fn restore(&mut self) -> Result<()> {
        self.runtime = Some(build_runtime(&self.config, self.seed, self.step)?);
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.config.horizon
    }

    pub fn series(&self) -> &MetricSeries {
        &self.series
    }

    pub fn totals(&self) -> Counter {
        self.totals
    }

    /// Clicks and impressions from the first drift event on.
    pub fn post_drift(&self) -> Counter {
        self.post_drift
    }

    pub fn prompt_params(&self) -> &PromptParams {
        &self.prompt_params
    }

    pub fn prompt_report(&self) -> Option<&PromptReport> {
        self.prompt_report.as_ref()
    }

    pub fn allocator(&self) -> &Allocator {
        &self.allocator
    }

    pub fn generator_fallbacks(&self) -> u64 {
        self.generator_fallbacks
    }

    fn runtime(&mut self) -> &mut Runtime {
        self.runtime.as_mut().expect("replica runtime restored")
    }

    /// Runs until `step` impressions have been served (capped at the horizon).
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        let end = step.min(self.config.horizon);
        while self.step < end {
            self.step_once()?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        self.run_until(self.config.horizon)
    }

    /// Serves one impression and processes every reward that matures.
    pub fn step_once(&mut self) -> Result<()> {
        if self.is_finished() {
            return Err(HarnessError::Core(rlab_core::Error::Contract("horizon reached".into())));
        }
        let t = self.step;
        let cfg = self.config.clone();
        let mut fallbacks = self.generator_fallbacks;

        let rt = self.runtime.as_mut().expect("replica runtime restored");
        apply_drift_in_place(&mut rt.population, &cfg.drift, t)?;
        if self.session.remaining == 0 {
            self.session = Session {
                user: rt.population.sample_index(&mut self.streams.users),
                remaining: cfg.session_length,
            };
        }
        let user = rt.population.user(self.session.user).clone();
        let context = sample_context(t, cfg.dims.context, &mut self.streams.context)?;
        let prompt = build_prompt(&cfg.dims, &user.profile, &context, &self.prompt_params)?;
        let pair = generate(
            &mut rt.external,
            &rt.embedder,
            &cfg,
            &prompt,
            mix_seed(&[self.seed, TAG_GENERATE, t]),
            &mut fallbacks,
        )?;
        self.generator_fallbacks = fallbacks;
        let done = self.session.remaining == 1;

        let arm = self.act(t, &user, &context, &pair, done)?;
        let p = ground_truth_p(&user, pair.get(arm), &cfg.world)?;
        let click = click_from_uniform(p, self.streams.click.random());
        let delay = cfg.delay.sample(&mut self.streams.delay);
        self.queue.push(t, if click { 1.0 } else { 0.0 }, t, delay)?;
        self.totals.record(click);
        if cfg.drift.events.first().is_some_and(|e| t >= e.step) {
            self.post_drift.record(click);
        }
        for (id, reward) in self.queue.pop_due(t) {
            self.credit(id, reward)?;
        }
        self.session.remaining -= 1;
        self.step += 1;

        if self.step.is_multiple_of(cfg.report_every) || self.step == cfg.horizon {
            let oracle = if cfg.oracle_users > 0 {
                Some(self.policy_oracle_ctr(cfg.oracle_users)?)
            } else {
                None
            };
            let row = MetricRow::new(self.step, self.totals.impressions, self.totals.clicks, oracle)?;
            self.series.push(row)?;
        }
        Ok(())
    }

    fn act(&mut self, t: u64, user: &SimUser, context: &ContextFeatures, pair: &VariantPair, done: bool) -> Result<Arm> {
        let cfg = &self.config;
        match &mut self.allocator {
            Allocator::Learned(learner) => {
                let input = FusionInput {
                    u: user.profile.u.clone(),
                    c: context.c.clone(),
                    e_a: pair.a.embedding.clone(),
                    e_b: pair.b.embedding.clone(),
                };
                let (state, _) = learner
                    .params
                    .encoder
                    .encode(&user.profile, context, &input.e_a, &input.e_b)?;
                let (arm, log_prob) = select_action(&learner.params.policy, &state, &mut self.streams.policy)?;
                let memory_prev = if cfg.memory.lambda > 0.0 {
                    let mem = learner.memory.get(user.user_id);
                    let next = update_memory(&learner.estimator, &mem, &state.s, arm, t)?;
                    learner.memory.put(next)?;
                    mem.m
                } else {
                    Vec::new()
                };
                if let Some(prev) = learner.pending.back_mut() {
                    if !prev.done && prev.next.is_none() {
                        prev.next = Some((input.clone(), state.clone()));
                    }
                }
                let next = done.then(|| (input.clone(), state.clone()));
                learner.pending.push_back(Pending {
                    id: t,
                    input,
                    state,
                    action: arm,
                    log_prob,
                    memory_prev,
                    done,
                    reward: None,
                    next,
                });
                Ok(arm)
            }
            Allocator::StaticAb { state, pending } => {
                let arm = static_ab_select(state, &mut self.streams.policy);
                if state.phase == AbPhase::Exploring {
                    pending.insert(t, arm);
                    state.record_impression(arm)?;
                }
                Ok(arm)
            }
            Allocator::LinUcb { state, pending } => {
                let x_a = arm_features(&user.profile, context, pair, Arm::A);
                let x_b = arm_features(&user.profile, context, pair, Arm::B);
                let arm = linucb_select(state, &x_a, &x_b)?;
                pending.insert(t, (arm, if arm == Arm::A { x_a } else { x_b }));
                Ok(arm)
            }
            Allocator::Fm { params, pending } => {
                let x_a = arm_features(&user.profile, context, pair, Arm::A);
                let x_b = arm_features(&user.profile, context, pair, Arm::B);
                let arm = fm_rank_select(params, &x_a, &x_b)?;
                pending.insert(t, (arm, if arm == Arm::A { x_a } else { x_b }));
                Ok(arm)
            }
            Allocator::Rules => Ok(rule_select(&cfg.baselines.rules, &user.profile, context)),
        }
    }

    fn credit(&mut self, id: u64, reward: f64) -> Result<()> {
        let cfg = &self.config;
        match &mut self.allocator {
            Allocator::Learned(learner) => {
                let front = learner.pending.front().map_or(id, |p| p.id);
                let slot = learner
                    .pending
                    .get_mut((id - front) as usize)
                    .filter(|p| p.id == id)
                    .ok_or_else(|| HarnessError::Runtime(format!("reward for unknown impression {id}")))?;
                slot.reward = Some(reward);
                self.flush_matured()
            }
            Allocator::StaticAb { state, pending } => {
                if let Some(arm) = pending.remove(&id) {
                    if reward > 0.0 {
                        state.record_click(arm);
                    }
                }
                Ok(())
            }
            Allocator::LinUcb { state, pending } => {
                if let Some((arm, x)) = pending.remove(&id) {
                    linucb_update_in_place(state, arm, &x, reward)?;
                }
                Ok(())
            }
            Allocator::Fm { params, pending } => {
                if let Some((_, x)) = pending.remove(&id) {
                    fm_sgd_step(params, &x, reward, &cfg.baselines.fm)?;
                }
                Ok(())
            }
            Allocator::Rules => Ok(()),
        }
    }

    /// Moves leading impressions whose reward and successor are known into
    /// the rollout buffer, training whenever it fills.
    fn flush_matured(&mut self) -> Result<()> {
        loop {
            let Allocator::Learned(learner) = &mut self.allocator else {
                return Ok(());
            };
            let ready = learner
                .pending
                .front()
                .is_some_and(|p| p.reward.is_some() && p.next.is_some());
            if !ready {
                return Ok(());
            }
            let p = learner.pending.pop_front().expect("front exists");
            let (next_input, next_state) = p.next.expect("checked");
            let reward = p.reward.expect("checked");
            learner.buffer.push(Transition {
                input: p.input,
                next_input,
                state: p.state,
                next_state,
                action: p.action,
                reward,
                observed_reward: reward,
                log_prob_old: p.log_prob,
                done: p.done,
                memory_prev: p.memory_prev,
            })?;
            if learner.buffer.is_full() {
                self.train()?;
            }
        }
    }

    fn train(&mut self) -> Result<()> {
        let cfg = &self.config;
        let Allocator::Learned(learner) = &mut self.allocator else {
            return Ok(());
        };
        let mut transitions = learner.buffer.drain();
        let lambda = cfg.memory.lambda;
        if lambda > 0.0 {
            for t in &mut transitions {
                let (r_hat, _) = learner.estimator.forward(&t.state.s, t.action, &t.memory_prev)?;
                t.reward = (1.0 - lambda) * t.observed_reward + lambda * r_hat;
            }
        }
        let (params, diagnostics) = train_on(&cfg.agent, &learner.params, &transitions, &mut self.streams.train)?;
        learner.params = params;
        learner.last_diagnostics = Some(diagnostics);
        learner.updates += 1;

        if lambda > 0.0 {
            let g = cfg.memory.target_discount;
            let mut targets = vec![0.0; transitions.len()];
            let mut acc = 0.0;
            for (i, t) in transitions.iter().enumerate().rev() {
                acc = t.observed_reward + if t.done { 0.0 } else { g * acc };
                targets[i] = acc;
            }
            let data: Vec<EstimatorSample> = transitions
                .into_iter()
                .zip(targets)
                .map(|(t, target)| EstimatorSample {
                    s: t.state.s,
                    action: t.action,
                    m_prev: t.memory_prev,
                    target,
                })
                .collect();
            let (estimator, opt, report) = train_estimator(
                &learner.estimator,
                &learner.estimator_opt,
                &data,
                &cfg.memory.estimator,
                &mut self.streams.train,
            )?;
            learner.estimator = estimator;
            learner.estimator_opt = opt;
            learner.estimator_reverts += u64::from(report.reverted);
        }
        Ok(())
    }

    /// Arm probabilities of the current policy's deterministic choice.
    fn greedy_choice(&self, user: &SimUser, context: &ContextFeatures, pair: &VariantPair) -> Result<Arm> {
        Ok(match &self.allocator {
            Allocator::Learned(learner) => {
                let (state, _) =
                    learner
                        .params
                        .encoder
                        .encode(&user.profile, context, &pair.a.embedding, &pair.b.embedding)?;
                learner.params.policy.greedy(&state.s)?
            }
            Allocator::StaticAb { state, .. } => match state.committed_arm {
                Some(arm) => arm,
                None => return Err(HarnessError::Runtime("no committed arm".into())),
            },
            Allocator::LinUcb { state, .. } => linucb_select(
                state,
                &arm_features(&user.profile, context, pair, Arm::A),
                &arm_features(&user.profile, context, pair, Arm::B),
            )?,
            Allocator::Fm { params, .. } => fm_rank_select(
                params,
                &arm_features(&user.profile, context, pair, Arm::A),
                &arm_features(&user.profile, context, pair, Arm::B),
            )?,
            Allocator::Rules => rule_select(&self.config.baselines.rules, &user.profile, context),
        })
    }

    fn choice_probs(&self, user: &SimUser, context: &ContextFeatures, pair: &VariantPair) -> Result<[f64; 2]> {
        if let Allocator::StaticAb { state, .. } = &self.allocator {
            if state.committed_arm.is_none() {
                return Ok([0.5, 0.5]);
            }
        }
        Ok(self.greedy_choice(user, context, pair)?.one_hot())
    }

    /// Draws `n` evaluation impressions (user, context, pair) from a stream
    /// fixed by the seed and current step, identical across methods.
    fn evaluation_draws(&mut self, n: usize) -> Result<Vec<(SimUser, ContextFeatures, VariantPair)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, TAG_ORACLE, self.step]));
        let cfg = self.config.clone();
        let params = self.prompt_params.clone();
        let mut fallbacks = self.generator_fallbacks;
        let rt = self.runtime();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let user = rt.population.user(rt.population.sample_index(&mut rng)).clone();
            let context = sample_context(rng.random_range(0..2400), cfg.dims.context, &mut rng)?;
            let prompt = build_prompt(&cfg.dims, &user.profile, &context, &params)?;
            let pair = generate(&mut rt.external, &rt.embedder, &cfg, &prompt, rng.random(), &mut fallbacks)?;
            out.push((user, context, pair));
        }
        self.generator_fallbacks = fallbacks;
        Ok(out)
    }

    /// Exact expected CTR of the current policy's deterministic choices.
    pub fn policy_oracle_ctr(&mut self, n_users: usize) -> Result<f64> {
        let draws = self.evaluation_draws(n_users)?;
        let mut total = 0.0;
        for (user, context, pair) in &draws {
            let probs = self.choice_probs(user, context, pair)?;
            for arm in Arm::BOTH {
                if probs[arm.index()] > 0.0 {
                    total += probs[arm.index()] * ground_truth_p(user, pair.get(arm), &self.config.world)?;
                }
            }
        }
        Ok(total / draws.len().max(1) as f64)
    }

    /// Fraction of `n` evaluation impressions on which the deterministic
    /// choice is a best arm, and the mean probability the learned policy
    /// assigns to a best arm.
    pub fn best_arm_rates(&mut self, n: usize) -> Result<(f64, f64)> {
        let draws = self.evaluation_draws(n)?;
        let world = self.config.world.clone();
        let (mut greedy_hits, mut prob_mass) = (0usize, 0.0);
        for (user, context, pair) in &draws {
            let pa = ground_truth_p(user, &pair.a, &world)?;
            let pb = ground_truth_p(user, &pair.b, &world)?;
            let best = |arm: Arm| match arm {
                Arm::A => pa >= pb,
                Arm::B => pb >= pa,
            };
            greedy_hits += usize::from(best(self.greedy_choice(user, context, pair)?));
            let probs = match &self.allocator {
                Allocator::Learned(learner) => {
                    let (state, _) =
                        learner
                            .params
                            .encoder
                            .encode(&user.profile, context, &pair.a.embedding, &pair.b.embedding)?;
                    learner.params.policy.probs(&state.s)?
                }
                _ => self.choice_probs(user, context, pair)?,
            };
            prob_mass += Arm::BOTH
                .into_iter()
                .filter(|a| best(*a))
                .map(|a| probs[a.index()])
                .sum::<f64>();
        }
        let n = draws.len().max(1) as f64;
        Ok((greedy_hits as f64 / n, prob_mass / n))
    }

    /// Expected CTR of uniform and of oracle-best allocation over `n`
    /// evaluation impressions under the current prompt parameters.
    pub fn allocation_headroom(&mut self, n: usize) -> Result<(f64, f64)> {
        let draws = self.evaluation_draws(n)?;
        let (mut uniform, mut best) = (0.0, 0.0);
        for (user, _, pair) in &draws {
            let pa = ground_truth_p(user, &pair.a, &self.config.world)?;
            let pb = ground_truth_p(user, &pair.b, &self.config.world)?;
            uniform += 0.5 * (pa + pb);
            best += pa.max(pb);
        }
        let n = draws.len().max(1) as f64;
        Ok((uniform / n, best / n))
    }
}
