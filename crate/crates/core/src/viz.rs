//! Minimal SVG scatter plots of 2-D latents, one color per label.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{contract, Result};

/// 26 visually distinct colors; labels beyond the palette wrap around.
pub const PALETTE: [&str; 26] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173", "#3182bd",
    "#e6550d", "#31a354", "#756bb1", "#636363", "#6baed6", "#fd8d3c", "#74c476", "#9e9ac8",
    "#fdd0a2", "#a1d99b",
];

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 40.0;
const LEGEND_W: f64 = 110.0;

/// Render points (`n x 2`) as an SVG document. `labels` colors the points;
/// without labels everything uses the first palette color.
pub fn scatter_svg(points: &Tensor, labels: Option<&[usize]>, title: &str) -> Result<String> {
    let n = points.rows();
    if points.cols() != 2 && n > 0 {
        return Err(contract(format!("scatter needs 2-D points, got {} columns", points.cols())));
    }
    if let Some(l) = labels {
        if l.len() != n {
            return Err(contract("one label per point required"));
        }
    }
    if points.data().iter().any(|v| !v.is_finite()) {
        return Err(contract("scatter points must be finite"));
    }

    let (mut lo, mut hi) = ([-1.0f64, -1.0], [1.0f64, 1.0]);
    if n > 0 {
        lo = [f64::INFINITY; 2];
        hi = [f64::NEG_INFINITY; 2];
        for i in 0..n {
            for c in 0..2 {
                lo[c] = lo[c].min(points.get(i, c));
                hi[c] = hi[c].max(points.get(i, c));
            }
        }
        for c in 0..2 {
            let pad = ((hi[c] - lo[c]) * 0.05).max(1e-6);
            lo[c] -= pad;
            hi[c] += pad;
        }
    }
    let plot_w = WIDTH - 2.0 * MARGIN - LEGEND_W;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let sx = |v: f64| MARGIN + (v - lo[0]) / (hi[0] - lo[0]) * plot_w;
    let sy = |v: f64| HEIGHT - MARGIN - (v - lo[1]) / (hi[1] - lo[1]) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="24" font-family="sans-serif" font-size="14">{}</text>"#, escape(title));

    // axes
    let (x0, x1, y0, y1) = (MARGIN, MARGIN + plot_w, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(s, r##"<g id="axes" stroke="#000000" stroke-width="1">"##);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
    let _ = writeln!(s, "</g>");
    let tick = |s: &mut String, x: f64, y: f64, anchor: &str, v: f64| {
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{v:.2}</text>"#
        );
    };
    tick(&mut s, x0, y0 + 14.0, "start", lo[0]);
    tick(&mut s, x1, y0 + 14.0, "end", hi[0]);
    tick(&mut s, x0 - 4.0, y0, "end", lo[1]);
    tick(&mut s, x0 - 4.0, y1 + 8.0, "end", hi[1]);

    let _ = writeln!(s, r#"<g id="points">"#);
    for i in 0..n {
        let l = labels.map_or(0, |l| l[i]);
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{}" fill-opacity="0.7"/>"#,
            sx(points.get(i, 0)),
            sy(points.get(i, 1)),
            PALETTE[l % PALETTE.len()]
        );
    }
    let _ = writeln!(s, "</g>");

    let _ = writeln!(s, r#"<g id="legend" font-family="sans-serif" font-size="11">"#);
    let distinct: BTreeSet<usize> = labels.map(|l| l.iter().copied().collect()).unwrap_or_default();
    let lx = WIDTH - LEGEND_W - MARGIN / 2.0 + 10.0;
    for (row, l) in distinct.iter().enumerate() {
        let y = MARGIN + 16.0 * row as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{y}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{l}</text>"#,
            PALETTE[l % PALETTE.len()],
            lx + 16.0,
            y + 9.0
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn emit_scatter(points: &Tensor, labels: Option<&[usize]>, out: &Path) -> Result<()> {
    let title = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let svg = scatter_svg(points, labels, &title)?;
    std::fs::write(out, svg)?;
    Ok(())
}
