//! Multi-seed runs, method comparisons and ablations, plus their artifacts.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::{AblationFlags, Method, RunConfig};
use crate::error::{HarnessError, Result};
use crate::metrics::{Counter, MetricRow, MetricSeries};
use crate::replica::{Allocator, PromptReport, Replica};
use crate::report::{export_report, file_stem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub impressions: u64,
    pub clicks: u64,
    pub final_ctr: f64,
    pub final_oracle_ctr: Option<f64>,
    /// Cumulative CTR from the first drift event on.
    pub post_drift_ctr: Option<f64>,
    pub post_drift_clicks: u64,
    pub prompt: Option<PromptReport>,
    pub policy_updates: Option<u64>,
    pub generator_fallbacks: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub series: MetricSeries,
    pub summary: SeedSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub seed: u64,
    pub step: Option<u64>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub method: Method,
    /// Method name, or the ablation label for ablated runs.
    pub label: String,
    pub runs: Vec<SeedRun>,
    pub failures: Vec<FailureRecord>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl ExperimentResult {
    pub fn run(&self, seed: u64) -> Option<&SeedRun> {
        self.runs.iter().find(|r| r.seed == seed)
    }

    pub fn median_final_ctr(&self) -> Option<f64> {
        median(&self.runs.iter().map(|r| r.summary.final_ctr).collect::<Vec<_>>())
    }

    pub fn median_final_oracle_ctr(&self) -> Option<f64> {
        median(&self.runs.iter().filter_map(|r| r.summary.final_oracle_ctr).collect::<Vec<_>>())
    }

    /// Clicks and impressions summed over seeds at each shared checkpoint;
    /// oracle CTR averaged.
    pub fn pooled_series(&self) -> Result<MetricSeries> {
        let mut out = MetricSeries::default();
        let Some(first) = self.runs.first() else {
            return Ok(out);
        };
        for (k, row) in first.series.rows.iter().enumerate() {
            let rows: Vec<&MetricRow> = self.runs.iter().filter_map(|r| r.series.rows.get(k)).collect();
            if rows.len() != self.runs.len() || rows.iter().any(|r| r.step != row.step) {
                break;
            }
            let impressions = rows.iter().map(|r| r.impressions).sum();
            let clicks = rows.iter().map(|r| r.clicks).sum();
            let oracle = rows
                .iter()
                .map(|r| r.oracle_ctr)
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);
            out.push(MetricRow::new(row.step, impressions, clicks, oracle)?)?;
        }
        Ok(out)
    }
}

fn summarize(replica: &Replica) -> SeedSummary {
    let totals = replica.totals();
    let post: Counter = replica.post_drift();
    SeedSummary {
        seed: replica.seed(),
        impressions: totals.impressions,
        clicks: totals.clicks,
        final_ctr: totals.rate(),
        final_oracle_ctr: replica.series().final_oracle_ctr(),
        post_drift_ctr: (post.impressions > 0).then(|| post.rate()),
        post_drift_clicks: post.clicks,
        prompt: replica.prompt_report().cloned(),
        policy_updates: match replica.allocator() {
            Allocator::Learned(l) => Some(l.updates),
            _ => None,
        },
        generator_fallbacks: replica.generator_fallbacks(),
    }
}

/// A failed seed, with the replica as it stood when it failed (if built).
pub struct SeedFailure {
    pub record: FailureRecord,
    pub replica: Option<Box<Replica>>,
}

pub fn run_seed(config: &RunConfig, seed: u64) -> std::result::Result<SeedRun, SeedFailure> {
    let mut replica = Replica::new(config, seed).map_err(|e| SeedFailure {
        record: FailureRecord {
            seed,
            step: None,
            error: e.to_string(),
        },
        replica: None,
    })?;
    match replica.run_to_end() {
        Ok(()) => Ok(SeedRun {
            seed,
            series: replica.series().clone(),
            summary: summarize(&replica),
        }),
        Err(e) => Err(SeedFailure {
            record: FailureRecord {
                seed,
                step: Some(replica.step()),
                error: e.to_string(),
            },
            replica: Some(Box::new(replica)),
        }),
    }
}

/// Runs every seed in parallel. Failed seeds are recorded (and their state
/// persisted under `failure_dir`, if given); the others continue.
pub fn run_experiment_with(config: &RunConfig, failure_dir: Option<&Path>) -> Result<ExperimentResult> {
    config.validate()?;
    let outcomes: Vec<_> = config.seeds.par_iter().map(|&seed| run_seed(config, seed)).collect();
    let label = if config.ablation.count() > 0 {
        config.ablation.label().to_string()
    } else {
        config.method.name().to_string()
    };
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(run) => runs.push(run),
            Err(failure) => {
                log::error!("seed {} failed: {}", failure.record.seed, failure.record.error);
                if let Some(dir) = failure_dir {
                    persist_failure(dir, &label, &failure)?;
                }
                failures.push(failure.record);
            }
        }
    }
    Ok(ExperimentResult {
        method: config.method,
        label,
        runs,
        failures,
    })
}

pub fn run_experiment(config: &RunConfig) -> Result<ExperimentResult> {
    run_experiment_with(config, None)
}

fn persist_failure(dir: &Path, label: &str, failure: &SeedFailure) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let stem = format!("{}-seed{}", file_stem(label), failure.record.seed);
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &failure.record)?;
    if let Some(replica) = &failure.replica {
        save_checkpoint(replica, &dir.join(format!("{stem}.ckpt")))?;
    }
    Ok(())
}

/// Every method on the same seeds and environment.
pub fn compare(config: &RunConfig, failure_dir: Option<&Path>) -> Result<Vec<ExperimentResult>> {
    Method::ALL
        .iter()
        .map(|&method| {
            let cfg = RunConfig {
                method,
                ablation: AblationFlags::default(),
                ..config.clone()
            };
            run_experiment_with(&cfg, failure_dir)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationDelta {
    pub ablation: String,
    pub seed: u64,
    /// Full system minus ablated, final cumulative CTR.
    pub final_ctr: f64,
    pub final_oracle_ctr: Option<f64>,
    pub post_drift_ctr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub full: ExperimentResult,
    pub ablated: Vec<ExperimentResult>,
    pub deltas: Vec<AblationDelta>,
}

/// The full system and each single-flag ablation on paired seeds.
pub fn run_ablation(config: &RunConfig, failure_dir: Option<&Path>) -> Result<AblationReport> {
    if config.method != Method::RlLlmAbtest {
        return Err(HarnessError::Config("ablations require method rl_llm_abtest".into()));
    }
    config.validate()?;
    let mut variants = AblationFlags::single_axis()
        .into_iter()
        .map(|ablation| {
            let cfg = RunConfig {
                ablation,
                ..config.clone()
            };
            run_experiment_with(&cfg, failure_dir)
        })
        .collect::<Result<Vec<_>>>()?;
    let full = variants.remove(0);
    let mut deltas = Vec::new();
    for ablated in &variants {
        for run in &full.runs {
            let Some(other) = ablated.run(run.seed) else { continue };
            let (a, b) = (&run.summary, &other.summary);
            deltas.push(AblationDelta {
                ablation: ablated.label.clone(),
                seed: run.seed,
                final_ctr: a.final_ctr - b.final_ctr,
                final_oracle_ctr: a.final_oracle_ctr.zip(b.final_oracle_ctr).map(|(x, y)| x - y),
                post_drift_ctr: a.post_drift_ctr.zip(b.post_drift_ctr).map(|(x, y)| x - y),
            });
        }
    }
    Ok(AblationReport {
        full,
        ablated: variants,
        deltas,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

#[derive(Serialize)]
struct ResultSummary<'a> {
    label: &'a str,
    method: Method,
    median_final_ctr: Option<f64>,
    median_final_oracle_ctr: Option<f64>,
    seeds: Vec<&'a SeedSummary>,
    failures: &'a [FailureRecord],
}

fn result_summary(r: &ExperimentResult) -> ResultSummary<'_> {
    ResultSummary {
        label: &r.label,
        method: r.method,
        median_final_ctr: r.median_final_ctr(),
        median_final_oracle_ctr: r.median_final_oracle_ctr(),
        seeds: r.runs.iter().map(|s| &s.summary).collect(),
        failures: &r.failures,
    }
}

/// Per-seed CSVs, one pooled CSV per result, the chart and `summary.json`.
/// All of it is a pure function of the results.
pub fn write_results(results: &[ExperimentResult], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut pooled = Vec::new();
    for r in results {
        let per_seed: Vec<(String, MetricSeries)> = r
            .runs
            .iter()
            .map(|run| (format!("{}_seed{}", r.label, run.seed), run.series.clone()))
            .collect();
        if !per_seed.is_empty() {
            let dir = out_dir.join("seeds");
            std::fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
            for (name, series) in &per_seed {
                crate::report::write_csv(series, &dir.join(format!("{}.csv", file_stem(name))))?;
            }
            pooled.push((r.label.clone(), r.pooled_series()?));
        }
    }
    if !pooled.is_empty() {
        export_report(&pooled, out_dir)?;
    }
    let summaries: Vec<ResultSummary> = results.iter().map(result_summary).collect();
    write_json(&out_dir.join("summary.json"), &summaries)
}

pub fn write_ablation(report: &AblationReport, out_dir: &Path) -> Result<()> {
    let mut all = vec![report.full.clone()];
    all.extend(report.ablated.iter().cloned());
    write_results(&all, out_dir)?;
    write_json(&out_dir.join("ablation_deltas.json"), &report.deltas)
}

#[derive(Serialize)]
struct RunMeta {
    tool_version: &'static str,
    command: String,
    config_hash: String,
    started_unix: u64,
    finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Wall-clock metadata, kept apart from the deterministic artifacts.
pub struct MetaClock {
    started: u64,
}

impl MetaClock {
    pub fn start() -> Self {
        Self { started: unix_now() }
    }

    pub fn write(&self, out_dir: &Path, command: &str, config: &RunConfig) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
        let hash: String = config.hash().iter().map(|b| format!("{b:02x}")).collect();
        write_json(
            &out_dir.join("run_meta.json"),
            &RunMeta {
                tool_version: env!("CARGO_PKG_VERSION"),
                command: command.to_string(),
                config_hash: hash,
                started_unix: self.started,
                finished_unix: unix_now(),
            },
        )
    }
}
