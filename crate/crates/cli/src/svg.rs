// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal SVG emitters: a line plot and a [0, 1] heatmap.

use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn header(w: f64, h: f64, title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    )
    .unwrap();
    s
}

/// Line plot of `ys` against integer x positions `0..ys.len()`.
/// Non-finite points are skipped.
pub fn line_plot(ys: &[f64], title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = header(W, H, title);
    let finite: Vec<f64> = ys.iter().copied().filter(|y| y.is_finite()).collect();
    let mut lo = finite.iter().copied().fold(0.0_f64, f64::min);
    let mut hi = finite.iter().copied().fold(1.0_f64, f64::max);
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN / 2.0, H - MARGIN, MARGIN);
    let span = (ys.len().max(2) - 1) as f64;
    let px = |i: usize| x0 + (x1 - x0) * i as f64 / span;
    let py = |v: f64| y0 + (y1 - y0) * (v - lo) / (hi - lo);

    writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#
    )
    .unwrap();
    for (i, _) in ys.iter().enumerate() {
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{i}</text>"#,
            px(i),
            y0 + 16.0
        )
        .unwrap();
    }
    for v in [lo, hi] {
        writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.2}</text>"#,
            x0 - 6.0,
            py(v) + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 10.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    )
    .unwrap();

    let points: Vec<String> = ys
        .iter()
        .enumerate()
        .filter(|(_, y)| y.is_finite())
        .map(|(i, &y)| format!("{:.2},{:.2}", px(i), py(y)))
        .collect();
    writeln!(
        s,
        r##"<polyline fill="none" stroke="#1f4e9c" stroke-width="2" points="{}"/>"##,
        points.join(" ")
    )
    .unwrap();
    for (i, &y) in ys.iter().enumerate().filter(|(_, y)| y.is_finite()) {
        writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#1f4e9c"><title>{i}: {y}</title></circle>"##,
            px(i),
            py(y)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Maps `v` in [0, 1] onto a white-to-navy ramp. Every channel decreases
/// with `v`, so luminance is monotone. Values outside the range are clamped.
pub fn heat_color(v: f64) -> (u8, u8, u8) {
    const LO: (f64, f64, f64) = (247.0, 251.0, 255.0);
    const HI: (f64, f64, f64) = (8.0, 48.0, 107.0);
    let t = if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (mix(LO.0, HI.0), mix(LO.1, HI.1), mix(LO.2, HI.2))
}

/// Square heatmap of a row-major `n x n` matrix with values in [0, 1].
pub fn heatmap(values: &[Vec<f64>], title: &str) -> String {
    let n = values.len().max(1);
    let cell = (320.0 / n as f64).clamp(8.0, 64.0);
    let grid = cell * n as f64;
    let (ox, oy) = (MARGIN, MARGIN);
    let legend_x = ox + grid + 24.0;
    let w = legend_x + 64.0;
    let h = oy + grid + MARGIN;
    let mut s = header(w, h, title);

    for (i, row) in values.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let (r, g, b) = heat_color(v);
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="rgb({r},{g},{b})"><title>K[{i}][{j}] = {v}</title></rect>"#,
                ox + cell * j as f64,
                oy + cell * i as f64,
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-family="sans-serif" font-size="11">h{i}</text>"#,
            ox - 4.0,
            oy + cell * (i as f64 + 0.5) + 4.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">h{i}</text>"#,
            ox + cell * (i as f64 + 0.5),
            oy + grid + 14.0
        )
        .unwrap();
    }

    // legend: 0 at the bottom, 1 at the top
    let steps = 10;
    let seg = grid / steps as f64;
    for k in 0..steps {
        let v = (k as f64 + 0.5) / steps as f64;
        let (r, g, b) = heat_color(v);
        writeln!(
            s,
            r#"<rect class="legend" x="{legend_x:.2}" y="{:.2}" width="16" height="{seg:.2}" fill="rgb({r},{g},{b})"/>"#,
            oy + grid - seg * (k as f64 + 1.0)
        )
        .unwrap();
    }
    for (v, y) in [(0.0, oy + grid), (1.0, oy + 8.0)] {
        writeln!(
            s,
            r#"<text x="{:.2}" y="{y:.2}" font-family="sans-serif" font-size="11">{v:.1}</text>"#,
            legend_x + 20.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn color_ramp_is_monotone() {
        let mut prev = heat_color(0.0);
        for i in 1..=100 {
            let c = heat_color(i as f64 / 100.0);
            assert!(c.0 <= prev.0 && c.1 <= prev.1 && c.2 <= prev.2);
            prev = c;
        }
        assert_eq!(heat_color(-1.0), heat_color(0.0));
        assert_eq!(heat_color(2.0), heat_color(1.0));
    }

    #[test]
    fn titles_are_escaped() {
        let s = line_plot(&[0.0, 1.0], "a<b & c", "x", "y");
        assert!(s.contains("a&lt;b &amp; c"));
    }
}
