//! CSV tables, standalone SVG line plots and the markdown ablation report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::{reference_for, AblationRow, Reference, REFERENCE_NOTE, REFERENCE_PARAMETERS};
use crate::objectives::{DistanceKind, MetricRow};

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Corrupt {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

/// Writes `rows` with a header row taken from the field names.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct MetricLine<'a> {
    k: usize,
    min_ade: f64,
    min_fde: f64,
    n_examples: usize,
    distance_kind: &'a str,
}

/// Metric rows tagged with the distance function the model was trained with.
pub fn write_metrics(path: &Path, rows: &[MetricRow], distance: DistanceKind) -> Result<()> {
    let lines: Vec<MetricLine> = rows
        .iter()
        .map(|r| MetricLine {
            k: r.k,
            min_ade: r.min_ade,
            min_fde: r.min_fde,
            n_examples: r.n_examples,
            distance_kind: distance.label(),
        })
        .collect();
    write_csv(path, &lines)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Line plot with axes, ticks and a legend. With `log2_x` the x axis is
/// spaced by `log₂ x` (all x must then be positive).
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], log2_x: bool) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 55.0);
    let tx = |x: f64| if log2_x { x.log2() } else { x };
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(x, y)| (tx(x), y)))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let span = |v: Vec<f64>| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), (hi - lo).abs() > 1e-12) {
            (false, _) => (0.0, 1.0),
            (true, true) => (lo, hi),
            (true, false) => (lo - 0.5, hi + 0.5),
        }
    };
    let (x0, x1) = span(all.iter().map(|p| p.0).collect());
    let (y0, y1) = span(all.iter().map(|p| p.1).collect());
    let y0 = y0.min(0.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let xl = if log2_x { format!("{}", xv.exp2().round()) } else { tick(xv) };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xl}</text>"#,
            px(xv),
            top + ph + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(yv) + 4.0,
            tick(yv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            left + pw,
            py(yv),
            py(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(x, y)| (tx(x), y))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            pts.join(" ")
        );
        let ly = top + 16.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// minADE and minFDE curves over `k` for one or more models.
pub fn k_curves(curves: &[(&str, &[MetricRow])], log2_x: bool) -> (String, String) {
    let make = |fde: bool| {
        let series: Vec<Series> = curves
            .iter()
            .map(|(label, rows)| Series {
                label,
                points: rows
                    .iter()
                    .map(|r| (r.k as f64, if fde { r.min_fde } else { r.min_ade }))
                    .collect(),
            })
            .collect();
        let metric = if fde { "minFDE" } else { "minADE" };
        line_plot(&format!("{metric} vs number of samples"), "k", &format!("{metric} [m]"), &series, log2_x)
    };
    (make(false), make(true))
}

/// Markdown table of desk results beside the published reference numbers.
pub fn ablation_markdown(title: &str, rows: &[AblationRow], reference: &[Reference]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {title}\n");
    let _ = writeln!(s, "Desk-scale columns come from this run. {REFERENCE_NOTE}.\n");
    let _ = writeln!(
        s,
        "| setting | k | desk minADE | desk minFDE | reference minADE (non-comparable) | reference minFDE (non-comparable) |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|---|");
    for r in rows {
        let (ra, rf) = match reference_for(reference, &r.setting, r.k) {
            Some(x) => (format!("{:.2}", x.min_ade), format!("{:.2}", x.min_fde)),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} | {:.3} | {ra} | {rf} |",
            r.setting, r.k, r.min_ade, r.min_fde
        );
    }
    if let Some(p) = rows.first().map(|r| r.parameters) {
        let _ = writeln!(
            s,
            "\nTrainable parameters: desk {p}; reference (non-comparable) {:.1}m.",
            REFERENCE_PARAMETERS / 1e6
        );
    }
    s
}

/// Markdown table for a single model's metric curve with optional
/// reference numbers at matching `k`.
pub fn metrics_markdown(title: &str, rows: &[MetricRow], reference: &[Reference], parameters: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {title}\n");
    let _ = writeln!(s, "Desk-scale columns come from this run. {REFERENCE_NOTE}.\n");
    let _ = writeln!(
        s,
        "| k | desk minADE | desk minFDE | reference minADE (non-comparable) | reference minFDE (non-comparable) |"
    );
    let _ = writeln!(s, "|---|---|---|---|---|");
    for r in rows {
        let (ra, rf) = match reference.iter().find(|x| x.k == r.k) {
            Some(x) => (format!("{:.2}", x.min_ade), format!("{:.2}", x.min_fde)),
            None => ("-".into(), "-".into()),
        };
        let _ = writeln!(s, "| {} | {:.3} | {:.3} | {ra} | {rf} |", r.k, r.min_ade, r.min_fde);
    }
    let _ = writeln!(
        s,
        "\nTrainable parameters: desk {parameters}; reference (non-comparable) {:.1}m.",
        REFERENCE_PARAMETERS / 1e6
    );
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::MON_N_REFERENCE;

    fn rows() -> Vec<MetricRow> {
        [(16, 3.0, 6.0), (32, 2.5, 5.0), (64, 2.0, 4.0)]
            .iter()
            .map(|&(k, a, f)| MetricRow {
                k,
                min_ade: a,
                min_fde: f,
                n_examples: 7,
            })
            .collect()
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m/metrics.csv");
        write_metrics(&path, &rows(), DistanceKind::L2).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "k,min_ade,min_fde,n_examples,distance_kind");
        assert_eq!(lines[1], "16,3.0,6.0,7,L2");
        assert_eq!(lines.len(), 4);
    }

    #[test]
    fn plot_structure() {
        let (ade, fde) = k_curves(&[("a", &rows()), ("b", &rows())], true);
        for svg in [&ade, &fde] {
            assert!(svg.starts_with("<svg"));
            assert!(svg.trim_end().ends_with("</svg>"));
            assert_eq!(svg.matches("<polyline").count(), 2);
        }
        assert!(fde.contains("minFDE"));
    }

    #[test]
    fn report_labels_reference_numbers() {
        let rows = vec![AblationRow {
            setting: "n=32".into(),
            k: 25,
            min_ade: 3.0,
            min_fde: 6.0,
            n_examples: 10,
            best_epoch: 1,
            parameters: 1234,
        }];
        let md = ablation_markdown("MoN ablation", &rows, &MON_N_REFERENCE);
        assert!(md.contains("| n=32 | 25 | 3.000 | 6.000 | 1.25 | 2.42 |"));
        assert!(md.contains("non-comparable"));
        assert!(md.contains("7.4m"));
    }
}
