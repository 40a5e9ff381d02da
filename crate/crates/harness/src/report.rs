//! CSV export and a self-contained SVG line chart with confidence bands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::metrics::{MetricRow, MetricSeries};

pub const CSV_HEADER: [&str; 7] = ["step", "impressions", "clicks", "ctr", "ci_low", "ci_high", "oracle_ctr"];

/// Plot geometry shared by the writer and anyone parsing the chart back.
pub const CHART_WIDTH: f64 = 800.0;
pub const CHART_HEIGHT: f64 = 480.0;
pub const PLOT_LEFT: f64 = 70.0;
pub const PLOT_RIGHT: f64 = 620.0;
pub const PLOT_TOP: f64 = 30.0;
pub const PLOT_BOTTOM: f64 = 430.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::Runtime(format!("{}: {e}", path.display()))
}

pub fn write_csv(series: &MetricSeries, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for r in &series.rows {
        w.write_record([
            r.step.to_string(),
            r.impressions.to_string(),
            r.clicks.to_string(),
            r.ctr.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
            r.oracle_ctr.map(|x| x.to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<MetricSeries> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_HEADER {
        return Err(HarnessError::Config(format!(
            "{}: expected header {}",
            path.display(),
            CSV_HEADER.join(",")
        )));
    }
    let bad = |line: usize, what: &str| HarnessError::Config(format!("{}: row {line}: bad {what}", path.display()));
    let mut series = MetricSeries::default();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let int = |k: usize| rec[k].parse::<u64>().map_err(|_| bad(i + 2, CSV_HEADER[k]));
        let float = |k: usize| rec[k].parse::<f64>().map_err(|_| bad(i + 2, CSV_HEADER[k]));
        series.push(MetricRow {
            step: int(0)?,
            impressions: int(1)?,
            clicks: int(2)?,
            ctr: float(3)?,
            ci_low: float(4)?,
            ci_high: float(5)?,
            oracle_ctr: if rec[6].is_empty() { None } else { Some(float(6)?) },
        })?;
    }
    Ok(series)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Axis ranges `(x_max, y_min, y_max)` covering every series.
fn ranges(set: &[(String, MetricSeries)]) -> (f64, f64, f64) {
    let rows = || set.iter().flat_map(|(_, s)| s.rows.iter());
    let x_max = rows().map(|r| r.step).max().unwrap_or(1).max(1) as f64;
    let lo = rows().map(|r| r.ci_low).fold(f64::INFINITY, f64::min);
    let hi = rows().map(|r| r.ci_high).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = ((hi - lo) * 0.05).max(0.01);
    ((x_max), (lo - pad).max(0.0), (hi + pad).min(1.0))
}

/// Renders the chart. The plot group carries `data-x-max`, `data-y-min` and
/// `data-y-max` so coordinates can be mapped back to data values.
pub fn render_svg(set: &[(String, MetricSeries)]) -> String {
    let (x_max, y_min, y_max) = ranges(set);
    let sx = |step: u64| PLOT_LEFT + step as f64 / x_max * (PLOT_RIGHT - PLOT_LEFT);
    let sy = |v: f64| PLOT_BOTTOM - (v - y_min) / (y_max - y_min) * (PLOT_BOTTOM - PLOT_TOP);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_WIDTH}" height="{CHART_HEIGHT}" viewBox="0 0 {CHART_WIDTH} {CHART_HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<g class="plot" data-x-max="{x_max}" data-y-min="{y_min}" data-y-max="{y_max}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{PLOT_LEFT}" y="{PLOT_TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        PLOT_RIGHT - PLOT_LEFT,
        PLOT_BOTTOM - PLOT_TOP
    );
    for k in 0..=4 {
        let v = y_min + (y_max - y_min) * k as f64 / 4.0;
        let y = sy(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{PLOT_LEFT}" y1="{y:.3}" x2="{PLOT_RIGHT}" y2="{y:.3}" stroke="#dddddd"/><text x="{}" y="{:.3}" text-anchor="end">{v:.3}</text>"##,
            PLOT_LEFT - 6.0,
            y + 4.0
        );
        let step = (x_max * k as f64 / 4.0).round() as u64;
        let _ = writeln!(
            svg,
            r#"<text x="{:.3}" y="{}" text-anchor="middle">{step}</text>"#,
            sx(step),
            PLOT_BOTTOM + 16.0
        );
    }
    for (i, (name, series)) in set.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let name = escape(name);
        let upper = series.rows.iter().map(|r| format!("{:.6},{:.6}", sx(r.step), sy(r.ci_high)));
        let lower = series.rows.iter().rev().map(|r| format!("{:.6},{:.6}", sx(r.step), sy(r.ci_low)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            svg,
            r#"<polygon class="ci-band" data-series="{name}" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = series
            .rows
            .iter()
            .map(|r| format!("{:.6},{:.6}", sx(r.step), sy(r.ctr)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline class="ctr-line" data-series="{name}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, r#"<g class="legend">"#);
    for (i, (name, _)) in set.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let y = PLOT_TOP + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="14" height="10" fill="{color}"/><text class="legend-label" x="{}" y="{}">{}</text>"#,
            PLOT_RIGHT + 15.0,
            y - 9.0,
            PLOT_RIGHT + 35.0,
            y,
            escape(name)
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">impressions</text>"#,
        (PLOT_LEFT + PLOT_RIGHT) / 2.0,
        CHART_HEIGHT - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">cumulative CTR (95% CI)</text>"#,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0
    );
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub csvs: Vec<PathBuf>,
    pub chart: PathBuf,
}

/// File-name-safe form of a series name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `<name>.csv` for each series and `chart.svg` for all of them.
pub fn export_report(set: &[(String, MetricSeries)], out_dir: &Path) -> Result<ReportFiles> {
    if set.is_empty() || set.iter().any(|(_, s)| s.rows.is_empty()) {
        return Err(HarnessError::Runtime("report needs at least one non-empty series".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut csvs = Vec::new();
    for (name, series) in set {
        let path = out_dir.join(format!("{}.csv", file_stem(name)));
        write_csv(series, &path)?;
        csvs.push(path);
    }
    let chart = out_dir.join("chart.svg");
    std::fs::write(&chart, render_svg(set)).map_err(|e| HarnessError::io(&chart, e))?;
    Ok(ReportFiles { csvs, chart })
}
