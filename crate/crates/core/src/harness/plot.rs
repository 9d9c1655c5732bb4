//! Standalone SVG line charts from run CSV files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// One named series of `(x, y)` points.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads `columns` from a CSV file, using the first column as `x`.
pub fn read_series(csv_path: &Path, columns: &[&str]) -> Result<Vec<Series>> {
    let mut reader = csv::Reader::from_path(csv_path)?;
    let headers = reader.headers()?.clone();
    let index: Vec<usize> = columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == *c)
                .ok_or_else(|| Error::MissingColumn((*c).to_string()))
        })
        .collect::<Result<_>>()?;
    let mut series: Vec<Series> = columns
        .iter()
        .map(|c| Series {
            name: (*c).to_string(),
            points: Vec::new(),
        })
        .collect();
    for record in reader.records() {
        let record = record?;
        let x: f64 = parse(&record[0])?;
        for (s, &i) in series.iter_mut().zip(&index) {
            s.points.push((x, parse(&record[i])?));
        }
    }
    Ok(series)
}

fn parse(field: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("not a number: {field:?}")))
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders the series as a line chart. With `log_y`, non-positive values
/// are dropped and break the line.
pub fn render_svg(series: &[Series], log_y: bool, title: &str) -> String {
    let transform = |y: f64| if log_y { y.log10() } else { y };
    let usable = |y: f64| y.is_finite() && (!log_y || y > 0.0);

    let mut x_range = (f64::INFINITY, f64::NEG_INFINITY);
    let mut y_range = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            if x.is_finite() && usable(y) {
                x_range = (x_range.0.min(x), x_range.1.max(x));
                let ty = transform(y);
                y_range = (y_range.0.min(ty), y_range.1.max(ty));
            }
        }
    }
    if !x_range.0.is_finite() {
        x_range = (0.0, 1.0);
        y_range = (0.0, 1.0);
    }
    if x_range.1 == x_range.0 {
        x_range.1 = x_range.0 + 1.0;
    }
    if y_range.1 == y_range.0 {
        y_range = (y_range.0 - 0.5, y_range.1 + 0.5);
    }
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x_range.0) / (x_range.1 - x_range.0) * plot_w;
    let py = |ty: f64| TOP + (y_range.1 - ty) / (y_range.1 - y_range.0) * plot_h;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="14" font-size="12" text-anchor="middle" font-family="sans-serif">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (LEFT, TOP + plot_h, LEFT + plot_w, TOP);
    let _ = writeln!(
        svg,
        r#"<g id="axes" stroke="black" stroke-width="1"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#
    );
    let label = |ty: f64| {
        if log_y {
            format!("1e{ty:.1}")
        } else {
            format!("{ty:.3e}")
        }
    };
    let _ = writeln!(
        svg,
        r#"<g font-size="10" font-family="sans-serif"><text x="{x0}" y="{}" text-anchor="middle">{}</text><text x="{x1}" y="{}" text-anchor="middle">{}</text><text x="{}" y="{y0}" text-anchor="end">{}</text><text x="{}" y="{}" text-anchor="end">{}</text></g>"#,
        y0 + 15.0,
        x_range.0,
        y0 + 15.0,
        x_range.1,
        x0 - 4.0,
        label(y_range.0),
        x0 - 4.0,
        y1 + 10.0,
        label(y_range.1)
    );
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut segments: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
        for &(x, y) in &s.points {
            if x.is_finite() && usable(y) {
                segments
                    .last_mut()
                    .expect("non-empty")
                    .push((px(x), py(transform(y))));
            } else if !segments.last().expect("non-empty").is_empty() {
                segments.push(Vec::new());
            }
        }
        for seg in segments.iter().filter(|seg| !seg.is_empty()) {
            let points: Vec<String> = seg.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="series" data-name="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                escape(&s.name),
                points.join(" ")
            );
        }
        let ly = TOP + 14.0 * (k as f64 + 1.0);
        let _ = writeln!(
            svg,
            r#"<g class="legend"><line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}" font-size="10" font-family="sans-serif">{}</text></g>"#,
            x1 - 120.0,
            x1 - 100.0,
            x1 - 95.0,
            ly + 3.0,
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Reads `columns` from `csv_path` and writes an SVG chart to `out`.
pub fn emit_svg_curves(csv_path: &Path, columns: &[&str], out: &Path, log_y: bool) -> Result<()> {
    let series = read_series(csv_path, columns)?;
    let title = columns.join(", ");
    std::fs::write(out, render_svg(&series, log_y, &title))?;
    Ok(())
}
