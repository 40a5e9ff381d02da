//! Coordinate hill-climbing over prompt parameters, scored by probe impressions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Knob, PromptParams, EMPHASIS_DIM};
use crate::error::{Error, Result};

/// Black-box utility estimate for a parameter setting.
pub trait PromptProbe {
    /// Mean observed reward over `n` probe impressions served under `params`.
    fn probe(&mut self, params: &PromptParams, n: usize) -> Result<f64>;
}

impl<F> PromptProbe for F
where
    F: FnMut(&PromptParams, usize) -> Result<f64>,
{
    fn probe(&mut self, params: &PromptParams, n: usize) -> Result<f64> {
        self(params, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Probe impressions per evaluation.
    pub n_eval: usize,
    /// Finite-difference step for emphasis weights.
    pub delta: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            n_eval: 200,
            delta: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub params: PromptParams,
    /// Probe evaluations spent (never above the budget).
    pub evaluations: usize,
    /// Pooled estimate of the returned parameters.
    pub estimate: f64,
    /// Pooled estimate of the input parameters.
    pub input_estimate: f64,
}

#[derive(Default)]
struct Pool {
    stats: HashMap<Vec<u64>, (f64, usize)>,
}

impl Pool {
    fn key(params: &PromptParams) -> Vec<u64> {
        params.encode().iter().map(|v| v.to_bits()).collect()
    }

    fn add(&mut self, params: &PromptParams, mean: f64, n: usize) {
        let e = self.stats.entry(Self::key(params)).or_insert((0.0, 0));
        e.0 += mean * n as f64;
        e.1 += n;
    }

    fn estimate(&self, params: &PromptParams) -> Option<f64> {
        self.stats
            .get(&Self::key(params))
            .filter(|(_, n)| *n > 0)
            .map(|(s, n)| s / *n as f64)
    }
}

struct Search<'a, P: PromptProbe> {
    probe: &'a mut P,
    pool: Pool,
    used: usize,
    budget: usize,
    n_eval: usize,
}

impl<P: PromptProbe> Search<'_, P> {
    fn eval(&mut self, params: &PromptParams) -> Result<f64> {
        let mean = self.probe.probe(params, self.n_eval)?;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!(
                "probe returned {mean} for {}",
                params.describe()
            )));
        }
        self.used += 1;
        self.pool.add(params, mean, self.n_eval);
        Ok(self.pool.estimate(params).unwrap())
    }

    fn remaining(&self) -> usize {
        self.budget - self.used
    }

    /// Evaluates every value of `knob`; moves only on a strictly better pooled estimate.
    fn knob_step(&mut self, incumbent: PromptParams, knob: Knob) -> Result<PromptParams> {
        let mut candidates = Vec::new();
        for v in 0..knob.domain().len() {
            let cand = incumbent.with(knob, v)?;
            self.eval(&cand)?;
            candidates.push(cand);
        }
        self.pick(incumbent, candidates)
    }

    fn emphasis_step(&mut self, incumbent: PromptParams, i: usize, delta: f64) -> Result<PromptParams> {
        let mut candidates = Vec::new();
        for sign in [1.0, -1.0] {
            let mut w = *incumbent.emphasis();
            w[i] += sign * delta;
            let cand = incumbent.with_emphasis(w)?;
            self.eval(&cand)?;
            candidates.push(cand);
        }
        self.pick(incumbent, candidates)
    }

    fn pick(&self, incumbent: PromptParams, candidates: Vec<PromptParams>) -> Result<PromptParams> {
        let mut best_value = self.pool.estimate(&incumbent).unwrap_or(f64::NEG_INFINITY);
        let mut best = incumbent;
        for cand in candidates {
            let value = self.pool.estimate(&cand).unwrap();
            if value > best_value {
                best_value = value;
                best = cand;
            }
        }
        Ok(best)
    }
}

/// Improves `params` within `budget` probe evaluations.
///
/// Each round sweeps the discrete knobs (every value of every knob, one
/// evaluation each) and then tries `±delta` on each emphasis weight.
/// The budget must cover at least one full knob sweep.
pub fn optimize_prompt_params<P: PromptProbe>(
    probe: &mut P,
    params: &PromptParams,
    budget: usize,
    config: &OptimizerConfig,
) -> Result<OptimizeOutcome> {
    let sweep = Knob::total_values();
    if budget < sweep {
        return Err(Error::Config(format!(
            "prompt optimization budget {budget} is below one knob sweep ({sweep} evaluations)"
        )));
    }
    if config.n_eval == 0 {
        return Err(Error::Config("n_eval must be positive".into()));
    }
    if !(config.delta > 0.0 && config.delta.is_finite()) {
        return Err(Error::Config(format!("emphasis delta {} must be positive", config.delta)));
    }
    let mut search = Search {
        probe,
        pool: Pool::default(),
        used: 0,
        budget,
        n_eval: config.n_eval,
    };
    let mut incumbent = params.clone();
    'rounds: loop {
        let mut progressed = false;
        for knob in Knob::ALL {
            if search.remaining() < knob.domain().len() {
                break 'rounds;
            }
            incumbent = search.knob_step(incumbent, knob)?;
            progressed = true;
        }
        for i in 0..EMPHASIS_DIM {
            if search.remaining() < 2 {
                break 'rounds;
            }
            incumbent = search.emphasis_step(incumbent, i, config.delta)?;
            progressed = true;
        }
        if !progressed {
            break;
        }
    }
    // The input is always evaluated during the first sweep.
    let input_estimate = search.pool.estimate(params).unwrap_or(f64::NEG_INFINITY);
    let mut estimate = search.pool.estimate(&incumbent).unwrap_or(f64::NEG_INFINITY);
    if input_estimate > estimate {
        incumbent = params.clone();
        estimate = input_estimate;
    }
    Ok(OptimizeOutcome {
        params: incumbent,
        evaluations: search.used,
        estimate,
        input_estimate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_objective_returns_input() {
        let input = PromptParams::default().with(Knob::Length, 1).unwrap();
        let mut probe = |_: &PromptParams, _: usize| Ok(0.25);
        let out = optimize_prompt_params(&mut probe, &input, 40, &OptimizerConfig::default()).unwrap();
        assert_eq!(out.params, input);
        assert!(out.evaluations <= 40);
    }

    #[test]
    fn one_sweep_budget() {
        let mut seen = Vec::new();
        let mut probe = |p: &PromptParams, _: usize| {
            seen.push(p.clone());
            Ok(0.0)
        };
        let out = optimize_prompt_params(&mut probe, &PromptParams::default(), 8, &OptimizerConfig::default())
            .unwrap();
        assert_eq!(out.evaluations, 8);
        assert_eq!(seen.len(), 8);
        for (knob, range) in [(Knob::Tone, 0..3), (Knob::OfferFraming, 3..6), (Knob::Length, 6..8)] {
            let values: Vec<usize> = seen[range].iter().map(|p| p.get(knob)).collect();
            assert_eq!(values, (0..knob.domain().len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn budget_below_sweep_is_config_error() {
        let mut probe = |_: &PromptParams, _: usize| Ok(0.0);
        let err = optimize_prompt_params(&mut probe, &PromptParams::default(), 7, &OptimizerConfig::default());
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn deterministic_objective_finds_argmax_knobs() {
        let mut probe = |p: &PromptParams, _: usize| {
            Ok(0.1 * p.get(Knob::Tone) as f64 + 0.05 * p.get(Knob::Length) as f64
                - (p.emphasis()[1] - 0.8).powi(2))
        };
        let out = optimize_prompt_params(&mut probe, &PromptParams::default(), 200, &OptimizerConfig::default())
            .unwrap();
        assert_eq!(out.params.get(Knob::Tone), 2);
        assert_eq!(out.params.get(Knob::Length), 1);
        assert!((out.params.emphasis()[1] - 0.8).abs() < 0.051);
        assert!(out.estimate >= out.input_estimate);
    }
}
