//! Run configuration, its TOML form, validation and built-in environments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use rlab_core::agent::PpoConfig;
use rlab_core::baselines::{Comparator, FieldRef, FmConfig, Rule, RulePolicyConfig, StaticAbConfig};
use rlab_core::encoder::Dims;
use rlab_core::env::{
    ClickModel, ClickScenario, DelayConfig, DriftEvent, DriftKind, DriftSchedule, PopulationConfig, World,
};
use rlab_core::memory::EstimatorTrainConfig;
use rlab_core::variants::{Arm, OptimizerConfig, PromptParams};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Method {
    RlLlmAbtest,
    StaticAb,
    Linucb,
    FmRank,
    RulePolicy,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::RlLlmAbtest,
        Method::StaticAb,
        Method::Linucb,
        Method::FmRank,
        Method::RulePolicy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::RlLlmAbtest => "rl_llm_abtest",
            Method::StaticAb => "static_ab",
            Method::Linucb => "linucb",
            Method::FmRank => "fm_rank",
            Method::RulePolicy => "rule_policy",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Single-axis ablations of the full system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Serve the initial prompt parameters instead of optimized ones.
    pub no_prompt_opt: bool,
    /// Allocate with the rule policy instead of the learned actor.
    pub no_actor_critic: bool,
    /// Train on observed rewards only (λ = 0).
    pub no_memory: bool,
}

impl AblationFlags {
    pub fn count(&self) -> usize {
        [self.no_prompt_opt, self.no_actor_critic, self.no_memory]
            .iter()
            .filter(|f| **f)
            .count()
    }

    pub fn label(&self) -> &'static str {
        if self.no_prompt_opt {
            "no_prompt_opt"
        } else if self.no_actor_critic {
            "no_actor_critic"
        } else if self.no_memory {
            "no_memory"
        } else {
            "full"
        }
    }

    /// The full system followed by each single-flag ablation.
    pub fn single_axis() -> [AblationFlags; 4] {
        let none = AblationFlags::default();
        [
            none,
            AblationFlags {
                no_prompt_opt: true,
                ..none
            },
            AblationFlags {
                no_actor_critic: true,
                ..none
            },
            AblationFlags {
                no_memory: true,
                ..none
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemoryConfig {
    /// Weight of the estimated reward in the training reward.
    pub lambda: f64,
    pub capacity: usize,
    pub head_hidden: usize,
    /// Discount of the in-session returns the estimator regresses on.
    pub target_discount: f64,
    pub estimator: EstimatorTrainConfig,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            capacity: 100_000,
            head_hidden: 32,
            target_discount: 0.99,
            estimator: EstimatorTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Tune prompt parameters with probe traffic before launch.
    pub optimize: bool,
    /// Probe evaluations available to the optimizer.
    pub budget: usize,
    pub optimizer: OptimizerConfig,
    pub initial: PromptParams,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            optimize: true,
            budget: 24,
            optimizer: OptimizerConfig::default(),
            initial: PromptParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub static_ab: StaticAbConfig,
    pub linucb_alpha: f64,
    pub fm: FmConfig,
    pub rules: RulePolicyConfig,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            static_ab: StaticAbConfig::default(),
            linucb_alpha: 1.0,
            fm: FmConfig::default(),
            rules: RulePolicyConfig {
                rules: vec![
                    Rule {
                        field: FieldRef::Context(2),
                        comparator: Comparator::Ge,
                        threshold: 0.5,
                        arm: Arm::B,
                    },
                    Rule {
                        field: FieldRef::User(0),
                        comparator: Comparator::Gt,
                        threshold: 0.0,
                        arm: Arm::A,
                    },
                ],
                default_arm: Arm::B,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    #[default]
    Stub,
    Command,
    Tcp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    /// Program and arguments for `kind = "command"`.
    pub command: Vec<String>,
    /// `host:port` for `kind = "tcp"`.
    pub address: String,
    pub timeout_ms: u64,
    /// Fall back to the stub generator when the external one fails.
    pub allow_fallback: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Stub,
            command: Vec::new(),
            address: String::new(),
            timeout_ms: 2_000,
            allow_fallback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub horizon: u64,
    pub report_every: u64,
    /// Users sampled for the oracle CTR column; 0 leaves it empty.
    pub oracle_users: usize,
    pub out_dir: PathBuf,
    /// Consecutive impressions served to one user (one episode).
    pub session_length: u64,
    pub dims: Dims,
    pub population: PopulationConfig,
    pub world: World,
    pub drift: DriftSchedule,
    pub delay: DelayConfig,
    pub agent: PpoConfig,
    pub memory: MemoryConfig,
    pub prompt: PromptConfig,
    pub baselines: BaselineConfig,
    pub generator: GeneratorConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            method: Method::RlLlmAbtest,
            seeds: vec![0],
            horizon: 50_000,
            report_every: 500,
            oracle_users: 200,
            out_dir: PathBuf::from("rlab-out"),
            session_length: 10,
            dims: Dims::default(),
            population: PopulationConfig::default(),
            world: World {
                scenario: ClickScenario::Preference(ClickModel::default()),
                tone_bonus: 0.0,
            },
            drift: DriftSchedule::default(),
            delay: DelayConfig::default(),
            agent: PpoConfig::default(),
            memory: MemoryConfig::default(),
            prompt: PromptConfig::default(),
            baselines: BaselineConfig::default(),
            generator: GeneratorConfig::default(),
            ablation: AblationFlags::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| config_err(e.to_string()))
    }

    /// Checks every invariant; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.horizon == 0 {
            return Err(config_err("horizon must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(config_err("at least one seed is required"));
        }
        if self.report_every == 0 {
            return Err(config_err("report_every must be positive"));
        }
        if self.session_length == 0 {
            return Err(config_err("session_length must be positive"));
        }
        if self.ablation.count() > 0 && self.method != Method::RlLlmAbtest {
            return Err(config_err("ablation flags are only valid with method rl_llm_abtest"));
        }
        if self.ablation.count() > 1 {
            return Err(config_err("ablations are single-axis: set at most one flag"));
        }
        if self.population.preference_dim != self.dims.embedding {
            return Err(config_err(format!(
                "population.preference_dim {} must equal dims.embedding {}",
                self.population.preference_dim, self.dims.embedding
            )));
        }
        if self.population.profile_dim != self.dims.user {
            return Err(config_err(format!(
                "population.profile_dim {} must equal dims.user {}",
                self.population.profile_dim, self.dims.user
            )));
        }
        if self.dims.context < 5 {
            return Err(config_err("dims.context must be at least 5"));
        }
        self.population.validate()?;
        self.world.validate()?;
        self.drift.validate()?;
        self.delay.validate()?;
        self.baselines.rules.validate(self.dims.user, self.dims.context)?;
        if !(self.baselines.linucb_alpha >= 0.0 && self.baselines.linucb_alpha.is_finite()) {
            return Err(config_err("baselines.linucb_alpha must be a finite non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.memory.lambda) {
            return Err(config_err(format!("memory.lambda {} outside [0, 1]", self.memory.lambda)));
        }
        if !(0.0..=1.0).contains(&self.memory.target_discount) {
            return Err(config_err("memory.target_discount outside [0, 1]"));
        }
        if self.memory.capacity == 0 || self.memory.head_hidden == 0 {
            return Err(config_err("memory.capacity and memory.head_hidden must be positive"));
        }
        if self.prompt.optimize && self.prompt.budget < rlab_core::variants::Knob::total_values() {
            return Err(config_err(format!(
                "prompt.budget {} is below one knob sweep ({})",
                self.prompt.budget,
                rlab_core::variants::Knob::total_values()
            )));
        }
        let initial = &self.prompt.initial;
        for knob in rlab_core::variants::Knob::ALL {
            initial.with(knob, initial.get(knob))?;
        }
        initial.with_emphasis(*initial.emphasis())?;
        match self.generator.kind {
            GeneratorKind::Command if self.generator.command.is_empty() => {
                return Err(config_err("generator.command is required for kind = \"command\""));
            }
            GeneratorKind::Tcp if self.generator.address.is_empty() => {
                return Err(config_err("generator.address is required for kind = \"tcp\""));
            }
            _ => {}
        }
        Ok(self.agent.validate()?)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    /// Copy with the ablation applied to the knobs it controls.
    pub fn effective(&self) -> RunConfig {
        let mut cfg = self.clone();
        if cfg.ablation.no_memory {
            cfg.memory.lambda = 0.0;
        }
        if cfg.ablation.no_prompt_opt {
            cfg.prompt.optimize = false;
        }
        cfg
    }

    /// Whether this run tunes its prompt parameters before launch.
    pub fn optimizes_prompt(&self) -> bool {
        let tuned = matches!(self.method, Method::RlLlmAbtest);
        tuned && self.prompt.optimize && !self.ablation.no_prompt_opt
    }
}

/// Built-in environments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum Preset {
    /// Arm A clicks with probability 0.8, arm B with 0.2.
    TwoArm,
    /// Preference clicks plus a bonus for urgent copy.
    Tone,
    /// Preference clicks with a small urgent-tone bonus; all preferences are
    /// negated at mid-horizon.
    Drift,
}

impl Preset {
    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Preset::TwoArm => {
                cfg.world = World {
                    scenario: ClickScenario::FixedArms { p_a: 0.8, p_b: 0.2 },
                    tone_bonus: 0.0,
                };
                cfg.drift = DriftSchedule::default();
            }
            Preset::Tone => {
                cfg.world = World {
                    scenario: ClickScenario::Preference(ClickModel::default()),
                    tone_bonus: 0.2,
                };
                cfg.drift = DriftSchedule::default();
            }
            Preset::Drift => {
                cfg.world = World {
                    scenario: ClickScenario::Preference(ClickModel::default()),
                    tone_bonus: 0.05,
                };
                cfg.drift = DriftSchedule {
                    events: vec![DriftEvent {
                        step: cfg.horizon / 2,
                        kind: DriftKind::Flip,
                    }],
                    seed: 0,
                };
            }
        }
    }

    pub fn config(self, horizon: u64) -> RunConfig {
        let mut cfg = RunConfig {
            horizon,
            ..RunConfig::default()
        };
        self.apply(&mut cfg);
        cfg
    }
}
