//! Comparison policies: static A/B with a significance test, LinUCB, an
//! online factorization machine ranker, and ordered heuristic rules.
//!
//! Every tie resolves to arm A.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StdNormal};

use crate::encoder::{ContextFeatures, UserProfile};
use crate::error::{check_dim, Error, Result};
use crate::numkit::{cholesky_solve, dot, Matrix};
use crate::variants::Arm;

// ---------------------------------------------------------------- static A/B

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbPhase {
    Exploring,
    Committed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticAbConfig {
    /// Impressions per arm before committing.
    pub exploration_n: u64,
    pub alpha: f64,
}

impl Default for StaticAbConfig {
    fn default() -> Self {
        Self {
            exploration_n: 1000,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticAbState {
    pub config: StaticAbConfig,
    pub phase: AbPhase,
    pub impressions: [u64; 2],
    pub clicks: [u64; 2],
    pub committed_arm: Option<Arm>,
    pub z: Option<f64>,
    pub significant: Option<bool>,
}

impl StaticAbState {
    pub fn new(config: StaticAbConfig) -> Result<Self> {
        if config.exploration_n == 0 {
            return Err(Error::Config("exploration_n must be positive".into()));
        }
        if !(config.alpha > 0.0 && config.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", config.alpha)));
        }
        Ok(Self {
            config,
            phase: AbPhase::Exploring,
            impressions: [0; 2],
            clicks: [0; 2],
            committed_arm: None,
            z: None,
            significant: None,
        })
    }

    pub fn total_impressions(&self) -> u64 {
        self.impressions.iter().sum()
    }

    /// Counts an exploration impression; commits once both arms reach
    /// `exploration_n`. Committed impressions are not counted.
    pub fn record_impression(&mut self, arm: Arm) -> Result<()> {
        if self.phase == AbPhase::Committed {
            return Ok(());
        }
        if self.impressions[arm.index()] >= self.config.exploration_n {
            return Err(Error::Contract(format!("arm {arm} already has its exploration quota")));
        }
        self.impressions[arm.index()] += 1;
        if self.impressions.iter().all(|&n| n >= self.config.exploration_n) {
            *self = static_ab_commit(self)?;
        }
        Ok(())
    }

    /// Credits a click to an exploration impression. Clicks arriving after
    /// the commit are ignored.
    pub fn record_click(&mut self, arm: Arm) {
        if self.phase == AbPhase::Exploring {
            self.clicks[arm.index()] += 1;
        }
    }
}

/// Exploring: uniform over arms still below quota. Committed: the chosen arm.
pub fn static_ab_select<R: Rng + ?Sized>(state: &StaticAbState, rng: &mut R) -> Arm {
    if let Some(arm) = state.committed_arm {
        return arm;
    }
    let open: Vec<Arm> = Arm::BOTH
        .into_iter()
        .filter(|a| state.impressions[a.index()] < state.config.exploration_n)
        .collect();
    match open.len() {
        1 => open[0],
        _ => {
            if rng.random::<f64>() < 0.5 {
                Arm::A
            } else {
                Arm::B
            }
        }
    }
}

/// Pooled two-proportion z statistic `(p̂_B − p̂_A) / se`; 0 when the pooled
/// rate is 0 or 1.
pub fn two_proportion_z(clicks_a: u64, n_a: u64, clicks_b: u64, n_b: u64) -> Result<f64> {
    if n_a == 0 || n_b == 0 {
        return Err(Error::Contract("z-test needs impressions on both arms".into()));
    }
    if clicks_a > n_a || clicks_b > n_b {
        return Err(Error::Contract("more clicks than impressions".into()));
    }
    let (na, nb) = (n_a as f64, n_b as f64);
    let pooled = (clicks_a + clicks_b) as f64 / (na + nb);
    if pooled <= 0.0 || pooled >= 1.0 {
        return Ok(0.0);
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb)).sqrt();
    Ok((clicks_b as f64 / nb - clicks_a as f64 / na) / se)
}

/// Two-sided critical value `z_{α/2}`.
pub fn critical_z(alpha: f64) -> f64 {
    StdNormal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - alpha / 2.0)
}

/// Commits to the higher-CTR arm. Without significance the empirical leader
/// is still chosen and the result is flagged.
pub fn static_ab_commit(state: &StaticAbState) -> Result<StaticAbState> {
    let z = two_proportion_z(state.clicks[0], state.impressions[0], state.clicks[1], state.impressions[1])?;
    let significant = z.abs() >= critical_z(state.config.alpha);
    let ctr = |a: Arm| state.clicks[a.index()] as f64 / state.impressions[a.index()] as f64;
    let arm = if ctr(Arm::B) > ctr(Arm::A) { Arm::B } else { Arm::A };
    if !significant {
        log::info!("static A/B committing to {arm} without significance (z = {z:.3})");
    }
    let mut next = state.clone();
    next.phase = AbPhase::Committed;
    next.committed_arm = Some(arm);
    next.z = Some(z);
    next.significant = Some(significant);
    Ok(next)
}

// ------------------------------------------------------------------ LinUCB

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinUcbState {
    pub dim: usize,
    pub alpha: f64,
    pub design: [Matrix; 2],
    pub response: [Vec<f64>; 2],
}

impl LinUcbState {
    /// `A = I`, `b = 0` for both arms.
    pub fn new(dim: usize, alpha: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("LinUCB dimension must be positive".into()));
        }
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("LinUCB alpha {alpha} must be non-negative")));
        }
        Ok(Self {
            dim,
            alpha,
            design: [Matrix::identity(dim), Matrix::identity(dim)],
            response: [vec![0.0; dim], vec![0.0; dim]],
        })
    }

    /// `θ̂ = A⁻¹ b` for one arm.
    pub fn theta(&self, arm: Arm) -> Result<Vec<f64>> {
        self.design[arm.index()].solve_spd(&self.response[arm.index()])
    }

    /// `θ̂ᵀx + α·sqrt(xᵀA⁻¹x)`.
    pub fn score(&self, arm: Arm, x: &[f64]) -> Result<f64> {
        check_dim("LinUCB features", self.dim, x.len())?;
        let l = self.design[arm.index()].cholesky()?;
        let theta = cholesky_solve(&l, &self.response[arm.index()]);
        let ainv_x = cholesky_solve(&l, x);
        let width = dot(x, &ainv_x).max(0.0).sqrt();
        Ok(dot(&theta, x) + self.alpha * width)
    }
}

pub fn linucb_select(state: &LinUcbState, x_a: &[f64], x_b: &[f64]) -> Result<Arm> {
    let a = state.score(Arm::A, x_a)?;
    let b = state.score(Arm::B, x_b)?;
    Ok(if b > a { Arm::B } else { Arm::A })
}

/// `A ← A + xxᵀ`, `b ← b + r x` for the played arm.
pub fn linucb_update(state: &LinUcbState, arm: Arm, x: &[f64], reward: f64) -> Result<LinUcbState> {
    let mut next = state.clone();
    linucb_update_in_place(&mut next, arm, x, reward)?;
    Ok(next)
}

pub fn linucb_update_in_place(state: &mut LinUcbState, arm: Arm, x: &[f64], reward: f64) -> Result<()> {
    check_dim("LinUCB features", state.dim, x.len())?;
    if !reward.is_finite() {
        return Err(Error::Validation("LinUCB reward must be finite".into()));
    }
    let i = arm.index();
    state.design[i].add_outer(1.0, x, x);
    for (b, xi) in state.response[i].iter_mut().zip(x) {
        *b += reward * xi;
    }
    Ok(())
}

// ------------------------------------------------------ factorization machine

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FmParams {
    pub w0: f64,
    pub w: Vec<f64>,
    /// `d × k` latent factors.
    pub v: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FmConfig {
    pub factors: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub init_std: f64,
}

impl Default for FmConfig {
    fn default() -> Self {
        Self {
            factors: 4,
            learning_rate: 0.05,
            l2: 1e-4,
            init_std: 0.01,
        }
    }
}

impl FmParams {
    pub fn zeros(dim: usize, factors: usize) -> Self {
        Self {
            w0: 0.0,
            w: vec![0.0; dim],
            v: Matrix::zeros(dim, factors),
        }
    }

    pub fn new<R: Rng + ?Sized>(dim: usize, cfg: &FmConfig, rng: &mut R) -> Result<Self> {
        if dim == 0 || cfg.factors == 0 {
            return Err(Error::Config("FM needs a positive dimension and factor count".into()));
        }
        let normal = Normal::new(0.0, cfg.init_std)
            .map_err(|e| Error::Config(format!("FM init std: {e}")))?;
        let mut p = Self::zeros(dim, cfg.factors);
        for x in p.v.as_mut_slice() {
            *x = normal.sample(rng);
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn factors(&self) -> usize {
        self.v.cols()
    }

    /// `w0 + wᵀx + ½ Σ_f [(Σ_i V_if x_i)² − Σ_i V_if² x_i²]` and the per-factor sums.
    fn logit_parts(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim("FM features", self.dim(), x.len())?;
        let sums = self.v.matvec_t(x);
        let mut pair = 0.0;
        for (f, s) in sums.iter().enumerate() {
            let sq: f64 = x
                .iter()
                .enumerate()
                .map(|(i, xi)| (self.v.get(i, f) * xi).powi(2))
                .sum();
            pair += s * s - sq;
        }
        Ok((self.w0 + dot(&self.w, x) + 0.5 * pair, sums))
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        self.logit_parts(x).map(|(l, _)| l)
    }
}

/// Predicted click probability.
pub fn fm_score(params: &FmParams, x: &[f64]) -> Result<f64> {
    Ok(crate::numkit::sigmoid(params.logit(x)?))
}

/// One logistic-loss SGD step on `(x, y)`; returns the pre-update probability.
pub fn fm_sgd_step(params: &mut FmParams, x: &[f64], y: f64, cfg: &FmConfig) -> Result<f64> {
    let (logit, sums) = params.logit_parts(x)?;
    let p = crate::numkit::sigmoid(logit);
    let g = p - y;
    let lr = cfg.learning_rate;
    params.w0 -= lr * g;
    for (i, &xi) in x.iter().enumerate() {
        params.w[i] -= lr * (g * xi + cfg.l2 * params.w[i]);
        if xi == 0.0 {
            continue;
        }
        for (f, s) in sums.iter().enumerate() {
            let v = params.v.get(i, f);
            let grad = g * (xi * s - v * xi * xi) + cfg.l2 * v;
            params.v.set(i, f, v - lr * grad);
        }
    }
    Ok(p)
}

/// Higher predicted probability wins; ties go to A.
pub fn fm_rank_select(params: &FmParams, x_a: &[f64], x_b: &[f64]) -> Result<Arm> {
    let a = params.logit(x_a)?;
    let b = params.logit(x_b)?;
    Ok(if b > a { Arm::B } else { Arm::A })
}

// ------------------------------------------------------------------- rules

/// A feature referenced by a rule: `u3` or `c0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FieldRef {
    User(usize),
    Context(usize),
}

impl FromStr for FieldRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("rule field {s:?} is not of the form u<i> or c<i>"));
        let (head, idx) = s.split_at(s.chars().next().map_or(0, char::len_utf8));
        let idx = idx.strip_prefix('[').and_then(|x| x.strip_suffix(']')).unwrap_or(idx);
        let i: usize = idx.parse().map_err(|_| bad())?;
        match head {
            "u" => Ok(FieldRef::User(i)),
            "c" => Ok(FieldRef::Context(i)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for FieldRef {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FieldRef> for String {
    fn from(f: FieldRef) -> String {
        f.to_string()
    }
}

impl fmt::Display for FieldRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldRef::User(i) => write!(f, "u{i}"),
            FieldRef::Context(i) => write!(f, "c{i}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
}

impl Comparator {
    pub fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            Comparator::Gt => lhs > rhs,
            Comparator::Ge => lhs >= rhs,
            Comparator::Lt => lhs < rhs,
            Comparator::Le => lhs <= rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub field: FieldRef,
    pub comparator: Comparator,
    pub threshold: f64,
    pub arm: Arm,
}

impl Rule {
    pub fn matches(&self, profile: &UserProfile, context: &ContextFeatures) -> bool {
        let value = match self.field {
            FieldRef::User(i) => profile.u.get(i),
            FieldRef::Context(i) => context.c.get(i),
        };
        value.is_some_and(|&v| self.comparator.holds(v, self.threshold))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulePolicyConfig {
    #[serde(default)]
    pub rules: Vec<Rule>,
    pub default_arm: Arm,
}

impl RulePolicyConfig {
    /// Checks every rule against the configured profile and context widths.
    pub fn validate(&self, user_dim: usize, context_dim: usize) -> Result<()> {
        for (k, rule) in self.rules.iter().enumerate() {
            let (i, n) = match rule.field {
                FieldRef::User(i) => (i, user_dim),
                FieldRef::Context(i) => (i, context_dim),
            };
            if i >= n {
                return Err(Error::Config(format!("rule #{k} reads {} but only {n} entries exist", rule.field)));
            }
            if !rule.threshold.is_finite() {
                return Err(Error::Config(format!("rule #{k} has a non-finite threshold")));
            }
        }
        Ok(())
    }
}

/// First matching rule wins; otherwise the default arm.
pub fn rule_select(config: &RulePolicyConfig, profile: &UserProfile, context: &ContextFeatures) -> Arm {
    config
        .rules
        .iter()
        .find(|r| r.matches(profile, context))
        .map_or(config.default_arm, |r| r.arm)
}
