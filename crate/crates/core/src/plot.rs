//! Minimal SVG line plots of metric columns.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::metrics::Table;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Columns drawn for each plot kind.
pub fn kind_columns(kind: &str) -> Result<&'static [&'static str]> {
    Ok(match kind {
        "tau" => &["tau_tilde"],
        "lambda" => &["lambda"],
        "loss" => &["loss_cls", "loss_adv", "loss_gen", "loss_kd"],
        "entropy" => &["teacher_entropy"],
        "lr" => &["student_lr"],
        "accuracy" => &["pgd_t"],
        other => {
            return Err(Error::config(format!(
                "unknown plot kind '{other}' (expected tau, lambda, loss, entropy, lr or accuracy)"
            )))
        }
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One series per column; the x axis is the row index. Each defined cell
/// becomes one `<circle class="point">` marker.
pub fn render_svg(table: &Table, columns: &[&str], title: &str, footer: &str) -> Result<String> {
    let mut series = Vec::new();
    for &c in columns {
        let values = table
            .column(c)
            .ok_or_else(|| Error::input(format!("metrics file has no column '{c}'")))?;
        let points: Vec<(f64, f64)> = values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.filter(|v| v.is_finite()).map(|v| (i as f64, v)))
            .collect();
        series.push((c, points));
    }
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(_, y) in all {
        lo = lo.min(y);
        hi = hi.max(y);
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let n = table.rows.len().max(2) as f64;
    let sx = |x: f64| MARGIN + x / (n - 1.0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - lo) / (hi - lo) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, "<!-- {} -->", escape(footer));
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, x1, y0, y1) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(svg, r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" stroke="black" fill="none"/>"#);
    for (v, anchor) in [(lo, y0), (hi, y1)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{anchor}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.4}</text>"#,
            x0 - 4.0
        );
    }
    for (k, (name, points)) in series.iter().enumerate() {
        let colour = COLOURS[k % COLOURS.len()];
        let _ = writeln!(svg, r#"<g class="series" data-name="{name}">"#);
        if points.len() > 1 {
            let path: Vec<String> = points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(svg, r#"<polyline points="{}" stroke="{colour}" fill="none"/>"#, path.join(" "));
        }
        for &(x, y) in points {
            let _ = writeln!(
                svg,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="2.5" fill="{colour}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{colour}">{name}</text>"#,
            x1 - 90.0,
            MARGIN + 14.0 * (k as f64 + 1.0)
        );
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
