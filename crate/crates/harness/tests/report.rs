use rlab_harness::report::{export_report, read_csv, render_svg, write_csv, CSV_HEADER, PLOT_BOTTOM, PLOT_LEFT, PLOT_RIGHT, PLOT_TOP};
use rlab_harness::{MetricRow, MetricSeries};

fn series(rows: &[(u64, u64, Option<f64>)]) -> MetricSeries {
    let mut s = MetricSeries::default();
    for (i, (n, c, o)) in rows.iter().enumerate() {
        s.push(MetricRow::new((i as u64 + 1) * 100, *n, *c, *o).unwrap()).unwrap();
    }
    s
}

#[test]
fn single_row_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.csv");
    let s = series(&[(100, 25, None)]);
    write_csv(&s, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "step,impressions,clicks,ctr,ci_low,ci_high,oracle_ctr");
    let fields: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(fields.len(), CSV_HEADER.len());
    assert_eq!(&fields[..4], ["100", "100", "25", "0.25"]);
    assert_eq!(fields[6], "");
    assert_eq!(read_csv(&path).unwrap(), s);
}

#[test]
fn csv_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let s = series(&[(100, 7, Some(0.1 + 0.2)), (200, 31, Some(1.0 / 3.0)), (300, 44, Some(0.2))]);
    write_csv(&s, &path).unwrap();
    assert_eq!(read_csv(&path).unwrap(), s);

    std::fs::write(&path, "step,clicks\n1,2\n").unwrap();
    assert!(read_csv(&path).is_err());
}

fn points(attr: &str) -> Vec<(f64, f64)> {
    attr.split_whitespace()
        .map(|p| {
            let (x, y) = p.split_once(',').unwrap();
            (x.parse().unwrap(), y.parse().unwrap())
        })
        .collect()
}

#[test]
fn chart_bands_parse_back_to_the_intervals() {
    let a = series(&[(100, 40, None), (200, 90, None), (300, 150, None)]);
    let b = series(&[(100, 10, None), (200, 35, None), (300, 60, None)]);
    let set = vec![("rl <a&b>".to_string(), a.clone()), ("linucb".to_string(), b.clone())];
    let svg = render_svg(&set);
    let doc = roxmltree::Document::parse(&svg).unwrap();

    let plot = doc.descendants().find(|n| n.attribute("class") == Some("plot")).unwrap();
    let attr = |k: &str| plot.attribute(k).unwrap().parse::<f64>().unwrap();
    let (x_max, y_min, y_max) = (attr("data-x-max"), attr("data-y-min"), attr("data-y-max"));
    let step_of = |x: f64| (x - PLOT_LEFT) / (PLOT_RIGHT - PLOT_LEFT) * x_max;
    let value_of = |y: f64| y_min + (PLOT_BOTTOM - y) / (PLOT_BOTTOM - PLOT_TOP) * (y_max - y_min);

    for (name, s) in &set {
        let band = doc
            .descendants()
            .find(|n| n.attribute("class") == Some("ci-band") && n.attribute("data-series") == Some(name))
            .unwrap();
        let pts = points(band.attribute("points").unwrap());
        let k = s.rows.len();
        assert_eq!(pts.len(), 2 * k);
        for (i, row) in s.rows.iter().enumerate() {
            let (x, hi) = pts[i];
            let (x2, lo) = pts[2 * k - 1 - i];
            assert!((step_of(x) - row.step as f64).abs() < 1e-3);
            assert_eq!(x, x2);
            assert!((value_of(hi) - row.ci_high).abs() < 1e-5);
            assert!((value_of(lo) - row.ci_low).abs() < 1e-5);
        }
        let line = doc
            .descendants()
            .find(|n| n.attribute("class") == Some("ctr-line") && n.attribute("data-series") == Some(name))
            .unwrap();
        for ((_, y), row) in points(line.attribute("points").unwrap()).iter().zip(&s.rows) {
            assert!((value_of(*y) - row.ctr).abs() < 1e-5);
        }
    }
    let legend: Vec<&str> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("legend-label"))
        .filter_map(|n| n.text())
        .collect();
    assert_eq!(legend, ["rl <a&b>", "linucb"]);
}

#[test]
fn export_writes_one_csv_per_series_and_a_chart() {
    let dir = tempfile::tempdir().unwrap();
    let s = series(&[(100, 12, Some(0.15))]);
    let files = export_report(&[("static_ab".into(), s.clone()), ("fm rank".into(), s.clone())], dir.path()).unwrap();
    assert_eq!(files.csvs, [dir.path().join("static_ab.csv"), dir.path().join("fm_rank.csv")]);
    assert!(files.chart.exists());
    assert!(export_report(&[], dir.path()).is_err());
    assert!(export_report(&[("x".into(), MetricSeries::default())], dir.path()).is_err());

    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    assert!(export_report(&[("x".into(), s)], &blocker.join("sub")).is_err());
}
