//! Static SVG heatmaps and line plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::io::IoError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorScale {
    Linear,
    Log,
}

const STOPS: [(f64, [f64; 3]); 5] = [
    (0.0, [68.0, 1.0, 84.0]),
    (0.25, [59.0, 82.0, 139.0]),
    (0.5, [33.0, 145.0, 140.0]),
    (0.75, [94.0, 201.0, 98.0]),
    (1.0, [253.0, 231.0, 37.0]),
];

fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let i = STOPS.iter().rposition(|s| s.0 <= t).unwrap_or(0).min(STOPS.len() - 2);
    let (t0, c0) = STOPS[i];
    let (t1, c1) = STOPS[i + 1];
    let u = (t - t0) / (t1 - t0);
    let ch = |k: usize| (c0[k] + u * (c1[k] - c0[k])).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ch(0), ch(1), ch(2))
}

/// Row-major heatmap, first row drawn at the top. Large rasters are
/// block-averaged to at most `max_cells` per side.
pub fn heatmap(values: &[f64], nx: usize, ny: usize, scale: ColorScale, title: &str) -> String {
    const MAX_CELLS: usize = 200;
    let step = nx.max(ny).div_ceil(MAX_CELLS).max(1);
    let (cx, cy) = (nx.div_ceil(step), ny.div_ceil(step));
    let mut cells = vec![0.0; cx * cy];
    for j in 0..cy {
        for i in 0..cx {
            let (mut sum, mut n) = (0.0, 0);
            for r in j * step..((j + 1) * step).min(ny) {
                for c in i * step..((i + 1) * step).min(nx) {
                    sum += values[r * nx + c];
                    n += 1;
                }
            }
            cells[j * cx + i] = sum / n as f64;
        }
    }
    let map = |v: f64| match scale {
        ColorScale::Linear => v,
        ColorScale::Log => v.max(0.0).ln_1p(),
    };
    let lo = cells.iter().map(|&v| map(v)).fold(f64::INFINITY, f64::min);
    let hi = cells.iter().map(|&v| map(v)).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = (600 / cx.max(cy)).max(1);
    let (w, h) = (cx * px, cy * px);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{}\" viewBox=\"0 0 {w} {}\">",
        h + 24,
        h + 24
    );
    let _ = writeln!(s, "<text x=\"4\" y=\"16\" font-family=\"sans-serif\" font-size=\"14\">{}</text>", escape(title));
    let _ = writeln!(s, "<g transform=\"translate(0,24)\" shape-rendering=\"crispEdges\">");
    for j in 0..cy {
        for i in 0..cx {
            let t = (map(cells[j * cx + i]) - lo) / span;
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{px}\" height=\"{px}\" fill=\"{}\"/>",
                i * px,
                j * px,
                color(t)
            );
        }
    }
    s.push_str("</g>\n</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#555555"];

/// Line plot with linear axes.
pub fn line_plot(series: &[Series], x_label: &str, y_label: &str, title: &str) -> String {
    let (w, h, m) = (640.0, 420.0, 56.0);
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all.filter(|p| p.0.is_finite() && p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{m}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>", escape(title));
    let _ = writeln!(
        s,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        w - 2.0 * m,
        h - 2.0 * m
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
            sx(fx),
            h - m + 14.0,
            tick(fx)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>",
            m - 4.0,
            sy(fy) + 3.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
        w / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        h / 2.0,
        h / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"1.5\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{c}\">{}</text>",
            w - m - 140.0,
            m + 16.0 + 14.0 * i as f64,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn emit_svg(path: &Path, svg: &str) -> Result<(), IoError> {
    std::fs::write(path, svg).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}
