//! Prompt construction, A/B variant generation, content embedding, and
//! prompt-parameter search.

mod embed;
mod generator;
mod optimize;
mod protocol;
mod templates;

pub use embed::{embed_variant, Embedder};
pub use generator::{generate_pair, stub_pair, Endpoint, GeneratorBinding, GeneratorMode};
pub use optimize::{optimize_prompt_params, OptimizeOutcome, OptimizerConfig, PromptProbe};
pub use protocol::{GenerationRequest, GenerationResponse, ResponseVariant, PROTOCOL_VERSION};
pub use templates::{TemplateBook, TemplateSlot};

use serde::{Deserialize, Serialize};

use crate::encoder::{ContextFeatures, Dims, UserProfile};
use crate::error::{check_dim, Error, Result};

/// One of the two allocation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    A,
    B,
}

impl Arm {
    pub const BOTH: [Arm; 2] = [Arm::A, Arm::B];

    pub fn index(self) -> usize {
        match self {
            Arm::A => 0,
            Arm::B => 1,
        }
    }

    pub fn from_index(i: usize) -> Arm {
        if i == 0 {
            Arm::A
        } else {
            Arm::B
        }
    }

    pub fn other(self) -> Arm {
        match self {
            Arm::A => Arm::B,
            Arm::B => Arm::A,
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Arm::A => [1.0, 0.0],
            Arm::B => [0.0, 1.0],
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arm::A => "A",
            Arm::B => "B",
        })
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Arm::A),
            "B" | "b" => Ok(Arm::B),
            other => Err(Error::Config(format!("unknown arm {other:?}"))),
        }
    }
}

/// The discrete prompt knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Knob {
    Tone,
    OfferFraming,
    Length,
}

impl Knob {
    pub const ALL: [Knob; 3] = [Knob::Tone, Knob::OfferFraming, Knob::Length];

    /// Names of the values in the knob's domain, in one-hot order.
    pub fn domain(self) -> &'static [&'static str] {
        match self {
            Knob::Tone => &["urgent", "friendly", "neutral"],
            Knob::OfferFraming => &["discount", "scarcity", "social_proof"],
            Knob::Length => &["short", "long"],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Knob::Tone => "tone",
            Knob::OfferFraming => "offer_framing",
            Knob::Length => "length",
        }
    }

    /// Total number of knob values across all knobs.
    pub fn total_values() -> usize {
        Knob::ALL.iter().map(|k| k.domain().len()).sum()
    }
}

/// Number of emphasis weights carried by [`PromptParams`].
pub const EMPHASIS_DIM: usize = 3;
/// Names of the emphasis weights, in order.
pub const EMPHASIS_NAMES: [&str; EMPHASIS_DIM] = ["price", "urgency", "brand"];

/// Prompt parameters: one value index per knob plus continuous emphasis weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParams {
    /// Value index per knob, in [`Knob::ALL`] order.
    choices: [usize; 3],
    emphasis: [f64; EMPHASIS_DIM],
}

impl Default for PromptParams {
    /// Neutral tone, discount framing, short copy, mid emphasis.
    fn default() -> Self {
        Self {
            choices: [2, 0, 0],
            emphasis: [0.5; EMPHASIS_DIM],
        }
    }
}

impl PromptParams {
    pub fn get(&self, knob: Knob) -> usize {
        self.choices[knob as usize]
    }

    pub fn value_name(&self, knob: Knob) -> &'static str {
        knob.domain()[self.get(knob)]
    }

    pub fn with(&self, knob: Knob, value: usize) -> Result<Self> {
        if value >= knob.domain().len() {
            return Err(Error::Validation(format!(
                "{} has no value #{value}",
                knob.name()
            )));
        }
        let mut next = self.clone();
        next.choices[knob as usize] = value;
        Ok(next)
    }

    /// Sets a knob by value name.
    pub fn with_named(&self, knob: Knob, name: &str) -> Result<Self> {
        let idx = knob
            .domain()
            .iter()
            .position(|v| *v == name)
            .ok_or_else(|| Error::Validation(format!("{} has no value {name:?}", knob.name())))?;
        self.with(knob, idx)
    }

    pub fn emphasis(&self) -> &[f64; EMPHASIS_DIM] {
        &self.emphasis
    }

    /// Replaces the emphasis weights, clamping each into `[0, 1]`.
    pub fn with_emphasis(&self, weights: [f64; EMPHASIS_DIM]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Validation("emphasis weights must be finite".into()));
        }
        let mut next = self.clone();
        next.emphasis = weights.map(|w| w.clamp(0.0, 1.0));
        Ok(next)
    }

    /// `[tone one-hot (3); framing one-hot (3); length one-hot (2); emphasis (3)]`.
    pub fn encode(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Knob::total_values() + EMPHASIS_DIM);
        for knob in Knob::ALL {
            let n = knob.domain().len();
            v.extend((0..n).map(|i| if i == self.get(knob) { 1.0 } else { 0.0 }));
        }
        v.extend_from_slice(&self.emphasis);
        v
    }

    /// Length of [`PromptParams::encode`].
    pub const fn encoded_len() -> usize {
        8 + EMPHASIS_DIM
    }

    pub fn describe(&self) -> String {
        format!(
            "tone={} framing={} length={} emphasis=[{:.2},{:.2},{:.2}]",
            self.value_name(Knob::Tone),
            self.value_name(Knob::OfferFraming),
            self.value_name(Knob::Length),
            self.emphasis[0],
            self.emphasis[1],
            self.emphasis[2]
        )
    }
}

/// A rendered prompt together with the parameters it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    /// `[u; c; knob one-hots; emphasis]`
    pub feature_vector: Vec<f64>,
    pub params: PromptParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub id: Arm,
    pub text: String,
    pub raw_features: Vec<f64>,
    /// Unit-norm content embedding.
    pub embedding: Vec<f64>,
    /// Prompt parameters the content was generated under.
    pub params: PromptParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantPair {
    pub a: Variant,
    pub b: Variant,
}

impl VariantPair {
    pub fn get(&self, arm: Arm) -> &Variant {
        match arm {
            Arm::A => &self.a,
            Arm::B => &self.b,
        }
    }
}

/// `p = g(u, c)`: renders the prompt text and its numeric feature vector.
pub fn build_prompt(
    dims: &Dims,
    profile: &UserProfile,
    context: &ContextFeatures,
    params: &PromptParams,
) -> Result<Prompt> {
    check_dim("prompt user block", dims.user, profile.u.len())?;
    check_dim("prompt context block", dims.context, context.c.len())?;
    let mut feature_vector =
        Vec::with_capacity(dims.user + dims.context + PromptParams::encoded_len());
    feature_vector.extend_from_slice(&profile.u);
    feature_vector.extend_from_slice(&context.c);
    feature_vector.extend(params.encode());

    // Strongest profile signals, for a human-readable audience hint.
    let mut ranked: Vec<(usize, f64)> = profile.u.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    let signals = ranked
        .iter()
        .take(3)
        .map(|(i, v)| format!("u{i}={v:+.2}"))
        .collect::<Vec<_>>()
        .join(" ");

    let text = format!(
        "Write two {length} marketing variants in a {tone} tone with {framing} framing. \
         Emphasis price={:.2} urgency={:.2} brand={:.2}. Audience signals: {signals}. \
         Context step {step}.",
        params.emphasis[0],
        params.emphasis[1],
        params.emphasis[2],
        length = params.value_name(Knob::Length),
        tone = params.value_name(Knob::Tone),
        framing = params.value_name(Knob::OfferFraming).replace('_', " "),
        step = context.timestamp,
    );
    Ok(Prompt {
        text,
        feature_vector,
        params: params.clone(),
    })
}
