//! Hand-written SVG charts.
//!
//! Both charts share an 800x480 viewport with 10% margins, so the plot area
//! is x in [80, 720] and y in [48, 432]. Markers carry their source values
//! as `data-*` attributes for checking.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::report::{write_atomic, SweepReport};
use crate::sensitivity::LayerErrorRecord;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 480.0;
pub const PLOT_LEFT: f64 = 80.0;
pub const PLOT_RIGHT: f64 = 720.0;
pub const PLOT_TOP: f64 = 48.0;
pub const PLOT_BOTTOM: f64 = 432.0;

const COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

/// X pixel of position `i` among `n` evenly spaced positions; a lone
/// position sits in the middle.
pub fn x_pixel(i: usize, n: usize) -> f64 {
    if n <= 1 {
        (PLOT_LEFT + PLOT_RIGHT) / 2.0
    } else {
        PLOT_LEFT + i as f64 * (PLOT_RIGHT - PLOT_LEFT) / (n - 1) as f64
    }
}

/// Y pixel of `v` where `max` maps to the top of the plot area.
pub fn y_pixel(v: f64, max: f64) -> f64 {
    PLOT_BOTTOM - v / max * (PLOT_BOTTOM - PLOT_TOP)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Series<'a> {
    name: &'a str,
    class: &'a str,
    values: Vec<f64>,
}

struct Chart<'a> {
    title: &'a str,
    x_label: &'a str,
    y_label: &'a str,
    y_max: f64,
    y_ticks: &'a [f64],
    x_ticks: Vec<String>,
}

fn svg(chart: &Chart<'_>, series: &[Series<'_>], extra: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="28" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(chart.title)
    );
    // axes
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{PLOT_LEFT:.2}" y1="{PLOT_BOTTOM:.2}" x2="{PLOT_RIGHT:.2}" y2="{PLOT_BOTTOM:.2}"/><line x1="{PLOT_LEFT:.2}" y1="{PLOT_TOP:.2}" x2="{PLOT_LEFT:.2}" y2="{PLOT_BOTTOM:.2}"/></g>"#
    );
    for &t in chart.y_ticks {
        let y = y_pixel(t, chart.y_max);
        let _ = writeln!(
            s,
            r##"<g class="ytick"><line x1="{:.2}" y1="{y:.2}" x2="{PLOT_RIGHT:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{t}</text></g>"##,
            PLOT_LEFT,
            PLOT_LEFT - 6.0,
            y + 4.0
        );
    }
    let n = chart.x_ticks.len();
    for (i, label) in chart.x_ticks.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text class="xtick" x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            x_pixel(i, n),
            PLOT_BOTTOM + 16.0,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="xlabel" x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(chart.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text class="ylabel" x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(chart.y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let m = ser.values.len();
        let pts: Vec<String> = ser
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", x_pixel(i, m), y_pixel(v, chart.y_max)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series {}" data-series="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            ser.class,
            ser.class,
            pts.join(" ")
        );
        for (i, &v) in ser.values.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<circle class="marker {}" data-series="{}" data-index="{i}" data-value="{v}" cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                ser.class,
                ser.class,
                x_pixel(i, m),
                y_pixel(v, chart.y_max)
            );
        }
    }
    s.push_str(extra);
    // legend
    for (k, ser) in series.iter().enumerate() {
        let y = PLOT_TOP + 6.0 + 18.0 * k as f64;
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<g class="legend"><rect x="{:.2}" y="{:.2}" width="12" height="12" fill="{color}"/><text x="{:.2}" y="{:.2}">{}</text></g>"#,
            PLOT_RIGHT - 150.0,
            y,
            PLOT_RIGHT - 132.0,
            y + 10.0,
            escape(ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Normalized QDQ and cross-model errors per layer, in topological order.
pub fn plot_layer_errors(records: &[LayerErrorRecord], path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Argument("no layer errors to plot".into()));
    }
    let mut ordered: Vec<&LayerErrorRecord> = records.iter().collect();
    ordered.sort_by_key(|r| r.topo_index);
    let chart = Chart {
        title: "Normalized layer errors",
        x_label: "layer (topological order)",
        y_label: "normalized error",
        y_max: 1.0,
        y_ticks: &[0.0, 0.25, 0.5, 0.75, 1.0],
        x_ticks: ordered.iter().map(|r| r.node_id.clone()).collect(),
    };
    let series = [
        Series {
            name: "QDQ error",
            class: "norm_qdq_err",
            values: ordered.iter().map(|r| r.norm_qdq_err).collect(),
        },
        Series {
            name: "XModel error",
            class: "norm_xmodel_err",
            values: ordered.iter().map(|r| r.norm_xmodel_err).collect(),
        },
    ];
    write_atomic(path.as_ref(), svg(&chart, &series, "").as_bytes())
}

/// Normalized objectives against variant index, with a labelled vertical
/// line at every selected candidate.
pub fn plot_objectives(r: &SweepReport, path: impl AsRef<Path>) -> Result<()> {
    r.validate()?;
    let n = r.normalized_objectives.len();
    let mut ordered = r.normalized_objectives.clone();
    ordered.sort_by_key(|o| o.variant_index);
    let chart = Chart {
        title: "Objectives per selectively quantized model",
        x_label: "selectively quantized model number",
        y_label: "normalized objective (%)",
        y_max: 100.0,
        y_ticks: &[0.0, 25.0, 50.0, 75.0, 100.0],
        x_ticks: ordered.iter().map(|o| o.variant_index.to_string()).collect(),
    };
    let series = [
        Series {
            name: "top-1 mismatch",
            class: "top1_mismatch",
            values: ordered.iter().map(|o| o.top1_mismatch).collect(),
        },
        Series {
            name: "model size",
            class: "size_bytes",
            values: ordered.iter().map(|o| o.size_bytes).collect(),
        },
    ];
    let mut lines = String::new();
    for &c in &r.pareto.top_candidates {
        let x = x_pixel(c, n);
        let _ = writeln!(
            lines,
            r##"<g class="pareto" data-variant="{c}"><line class="pareto" data-variant="{c}" x1="{x:.2}" y1="{PLOT_TOP:.2}" x2="{x:.2}" y2="{PLOT_BOTTOM:.2}" stroke="#2ca02c" stroke-dasharray="6 4" stroke-width="1.5"/><text x="{x:.2}" y="{:.2}" text-anchor="middle" fill="#2ca02c">{c}</text></g>"##,
            PLOT_TOP - 4.0
        );
    }
    write_atomic(path.as_ref(), svg(&chart, &series, &lines).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_mapping() {
        assert_eq!(x_pixel(0, 1), 400.0);
        assert_eq!(x_pixel(0, 5), PLOT_LEFT);
        assert_eq!(x_pixel(4, 5), PLOT_RIGHT);
        assert_eq!(y_pixel(0.0, 1.0), PLOT_BOTTOM);
        assert_eq!(y_pixel(1.0, 1.0), PLOT_TOP);
        assert_eq!(y_pixel(50.0, 100.0), 240.0);
    }

    #[test]
    fn text_is_escaped() {
        assert_eq!(escape("a<b&\"c\""), "a&lt;b&amp;&quot;c&quot;");
    }
}
