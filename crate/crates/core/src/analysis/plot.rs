//! Minimal SVG rendering for histograms and position traces.

use std::fmt::Write as _;

use super::Histogram;
use crate::positioning::PositionTrace;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, x_label: &str, y_label: &str, x_range: (f64, f64), y_range: (f64, f64)) {
    let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black"><line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{MARGIN}"/></g>"#,
        WIDTH - MARGIN
    );
    let label = |s: &mut String, x: f64, y: f64, anchor: &str, text: &str| {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-family="sans-serif" font-size="11">{}</text>"#,
            escape(text)
        );
    };
    label(s, x0, y0 + 16.0, "middle", &format!("{:.3}", x_range.0));
    label(s, WIDTH - MARGIN, y0 + 16.0, "middle", &format!("{:.3}", x_range.1));
    label(s, x0 - 4.0, y0, "end", &format!("{:.3}", y_range.0));
    label(s, x0 - 4.0, MARGIN + 4.0, "end", &format!("{:.3}", y_range.1));
    label(s, WIDTH / 2.0, HEIGHT - 10.0, "middle", x_label);
    label(s, 14.0, HEIGHT / 2.0, "middle", y_label);
}

/// Bar chart of a histogram.
pub fn histogram_svg(hist: &Histogram, title: &str, x_label: &str) -> String {
    let mut s = open(title);
    let lo = hist.edges.first().copied().unwrap_or(0.0);
    let hi = hist.edges.last().copied().unwrap_or(1.0);
    let peak = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    axes(&mut s, x_label, "count", (lo, hi), (0.0, peak));
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let bar_w = plot_w / hist.counts.len().max(1) as f64;
    let _ = writeln!(s, r#"<g class="bars" fill="{}">"#, PALETTE[0]);
    for (i, &c) in hist.counts.iter().enumerate() {
        let h = plot_h * c as f64 / peak;
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"><title>[{:.3}, {:.3}]: {c}</title></rect>"#,
            MARGIN + bar_w * i as f64,
            HEIGHT - MARGIN - h,
            (bar_w - 1.0).max(0.5),
            h,
            hist.edges[i],
            hist.edges[i + 1]
        );
    }
    s.push_str("</g>\n</svg>\n");
    s
}

/// Scatter of assigned position against token index, one series per
/// (layer, head).
pub fn positions_svg(trace: &PositionTrace, title: &str) -> String {
    let mut s = open(title);
    let n = trace.heads.iter().map(|h| h.positions.len()).max().unwrap_or(0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for z in trace.heads.iter().flat_map(|h| &h.positions) {
        lo = lo.min(*z);
        hi = hi.max(*z);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    axes(&mut s, "token index", "assigned position", (0.0, n.saturating_sub(1) as f64), (lo, hi));
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let x_of = |i: usize| MARGIN + plot_w * i as f64 / n.saturating_sub(1).max(1) as f64;
    let y_of = |z: f64| HEIGHT - MARGIN - plot_h * (z - lo) / (hi - lo);
    for (k, h) in trace.heads.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<g class="series" data-layer="{}" data-head="{}" fill="{color}" stroke="{color}">"#,
            h.layer, h.head
        );
        let points: Vec<String> = h
            .positions
            .iter()
            .enumerate()
            .map(|(i, &z)| format!("{:.2},{:.2}", x_of(i), y_of(z)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke-width="1" points="{}"/>"#, points.join(" "));
        for (i, &z) in h.positions.iter().enumerate() {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#, x_of(i), y_of(z));
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="10" stroke="none">L{} H{}</text>"#,
            WIDTH - MARGIN + 4.0,
            MARGIN + 12.0 * k as f64,
            h.layer,
            h.head
        );
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
