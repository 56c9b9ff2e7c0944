//! Minimal SVG line charts for aggregate metrics, one file per metric.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::AggregateRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
];

/// One line per series with a shaded ±stderr band.
pub fn line_chart_svg(metric: &str, series: &[(String, Vec<AggregateRecord>)]) -> String {
    let points: Vec<(f64, f64, f64)> = series
        .iter()
        .flat_map(|(_, recs)| recs.iter())
        .filter_map(|r| {
            r.metric(metric)
                .map(|s| (r.envs_seen as f64, s.mean, s.stderr))
        })
        .collect();
    let x_max = points.iter().map(|p| p.0).fold(1.0, f64::max);
    let y_max = points.iter().map(|p| p.1 + p.2).fold(0.0, f64::max);
    let y_max = if y_max > 0.0 { y_max * 1.05 } else { 1.0 };
    let sx = |x: f64| MARGIN + x / x_max * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - y / y_max * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle">{metric}</text>"#,
        WIDTH / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">envs seen ({x_max})</text><text x="5" y="{}">{y_max:.3}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 15.0,
        MARGIN
    );
    for (i, (name, recs)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let stats: Vec<(f64, f64, f64)> = recs
            .iter()
            .filter_map(|r| {
                r.metric(metric)
                    .map(|s| (r.envs_seen as f64, s.mean, s.stderr))
            })
            .collect();
        if stats.is_empty() {
            continue;
        }
        let upper = stats
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1 + p.2)));
        let lower = stats
            .iter()
            .rev()
            .map(|p| format!("{:.1},{:.1}", sx(p.0), sy((p.1 - p.2).max(0.0))));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            svg,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = stats
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(p.0), sy(p.1)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#,
            WIDTH - MARGIN + 5.0,
            MARGIN + 15.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_line_chart(
    path: &Path,
    metric: &str,
    series: &[(String, Vec<AggregateRecord>)],
) -> Result<()> {
    fs::write(path, line_chart_svg(metric, series)).map_err(|e| Error::io(path, e))
}
