//! Cumulative CTR checkpoints with Wilson score intervals.

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `clicks` successes in `impressions` trials.
pub fn wilson_interval(clicks: u64, impressions: u64, z: f64) -> Result<(f64, f64)> {
    if impressions == 0 {
        return Err(HarnessError::Core(rlab_core::Error::Contract(
            "Wilson interval needs at least one impression".into(),
        )));
    }
    if clicks > impressions {
        return Err(HarnessError::Core(rlab_core::Error::Contract(format!(
            "{clicks} clicks exceed {impressions} impressions"
        ))));
    }
    let n = impressions as f64;
    let p = clicks as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    let low = (center - half).clamp(0.0, p);
    let high = (center + half).clamp(p, 1.0);
    Ok((low, high))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub impressions: u64,
    pub clicks: u64,
    pub ctr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub oracle_ctr: Option<f64>,
}

impl MetricRow {
    pub fn new(step: u64, impressions: u64, clicks: u64, oracle_ctr: Option<f64>) -> Result<Self> {
        let (ci_low, ci_high) = wilson_interval(clicks, impressions, Z95)?;
        Ok(Self {
            step,
            impressions,
            clicks,
            ctr: clicks as f64 / impressions as f64,
            ci_low,
            ci_high,
            oracle_ctr,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSeries {
    pub rows: Vec<MetricRow>,
}

impl MetricSeries {
    pub fn push(&mut self, row: MetricRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.impressions < last.impressions || row.step < last.step {
                return Err(HarnessError::Core(rlab_core::Error::Contract(
                    "metric checkpoints must be non-decreasing".into(),
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&MetricRow> {
        self.rows.last()
    }

    pub fn final_ctr(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.ctr)
    }

    pub fn final_oracle_ctr(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.oracle_ctr)
    }
}

/// Running click and impression counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counter {
    pub impressions: u64,
    pub clicks: u64,
}

impl Counter {
    pub fn record(&mut self, click: bool) {
        self.impressions += 1;
        self.clicks += u64::from(click);
    }

    pub fn rate(&self) -> f64 {
        if self.impressions == 0 {
            0.0
        } else {
            self.clicks as f64 / self.impressions as f64
        }
    }
}
