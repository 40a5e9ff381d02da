//! Offline pass over a Criteo log: label CTR checkpoints and progressive
//! validation of an online factorization machine.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rlab_core::baselines::{fm_score, fm_sgd_step, FmConfig, FmParams};
use rlab_core::env::{ReplayConfig, ReplaySource};

use crate::error::Result;
use crate::metrics::{Counter, MetricRow, MetricSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySummary {
    pub records: u64,
    pub lines_read: u64,
    pub skipped: u64,
    pub label_ctr: f64,
    /// Mean log loss of each prediction made before training on the record.
    pub progressive_log_loss: f64,
}

pub fn replay_file(path: &Path, cfg: &ReplayConfig, fm: &FmConfig, report_every: u64) -> Result<(MetricSeries, ReplaySummary)> {
    let mut source = ReplaySource::open(path, cfg.clone())?;
    let dim = cfg.features.user_dim + cfg.features.context_dim + 1;
    let mut params = FmParams::new(dim, fm, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut counter = Counter::default();
    let mut series = MetricSeries::default();
    let mut log_loss = 0.0;
    for record in source.by_ref() {
        let record = record?;
        let mut x = record.profile.u.clone();
        x.extend_from_slice(&record.context.c);
        x.push(1.0);
        let y = f64::from(record.label);
        let p = fm_score(&params, &x)?.clamp(1e-12, 1.0 - 1e-12);
        log_loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        fm_sgd_step(&mut params, &x, y, fm)?;
        counter.record(record.label == 1);
        if counter.impressions % report_every == 0 {
            series.push(MetricRow::new(counter.impressions, counter.impressions, counter.clicks, None)?)?;
        }
    }
    if counter.impressions > 0 && counter.impressions % report_every != 0 {
        series.push(MetricRow::new(counter.impressions, counter.impressions, counter.clicks, None)?)?;
    }
    let summary = ReplaySummary {
        records: counter.impressions,
        lines_read: source.lines_read(),
        skipped: source.skipped(),
        label_ctr: counter.rate(),
        progressive_log_loss: if counter.impressions > 0 {
            log_loss / counter.impressions as f64
        } else {
            0.0
        },
    };
    Ok((series, summary))
}
