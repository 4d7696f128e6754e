//! Minimal hand-written SVG documents: line charts and heatmaps.

use std::fmt::Write;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Line chart with a log₂ x axis (context lengths double).
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|p| p.0 > 0.0 && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x.log2());
        x1 = x1.max(x.log2());
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.1).max(1e-3);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| left + (x.log2() - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| top + (y1 - y) / (y1 - y0) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let (bx, by) = (h - bottom, w - right);
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{bx}" x2="{by}" y2="{bx}" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bx}" stroke="black"/>"#
    );
    let mut e = x0.floor() as i32;
    while (e as f64) <= x1 + 1e-9 {
        let x = sx(2f64.powi(e));
        if x >= left - 1e-6 {
            let _ = writeln!(
                s,
                r#"<line x1="{x:.1}" y1="{bx}" x2="{x:.1}" y2="{}" stroke="black"/>"#,
                bx + 5.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
                bx + 18.0,
                1u64 << e.max(0)
            );
        }
        e += 1;
    }
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let py = sy(y);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{py:.1}" x2="{left}" y2="{py:.1}" stroke="black"/>"#,
            left - 5.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.3}</text>"#,
            left - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (left + by) / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (top + bx) / 2.0,
        escape(y_label)
    );
    for (i, series) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = series
            .points
            .iter()
            .filter(|p| p.0 > 0.0 && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for p in &path {
            let (cx, cy) = p.split_once(',').expect("formatted point");
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="3" fill="{color}"/>"#,
            by + 10.0,
            ly + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            by + 28.0,
            ly + 9.0,
            escape(&series.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of `values[row][col]` in `[0, 1]` (white to dark blue).
pub fn heatmap(
    title: &str,
    values: &[Vec<f64>],
    row_labels: &[String],
    col_labels: &[String],
) -> String {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    let cell = (480.0 / rows.max(cols).max(1) as f64).clamp(2.0, 24.0);
    let (left, top) = (60.0, 60.0);
    let w = left + cell * cols as f64 + 20.0;
    let h = top + cell * rows as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="18" font-size="13">{}</text>"#,
        escape(title)
    );
    let show_labels = cell >= 8.0;
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let t = if v.is_finite() {
                v.clamp(0.0, 1.0)
            } else {
                0.0
            };
            let shade = |full: f64| (255.0 - t * (255.0 - full)).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{cell:.1}" height="{cell:.1}" fill="rgb({},{},{})"><title>{:.4}</title></rect>"#,
                left + cell * c as f64,
                top + cell * r as f64,
                shade(8.0),
                shade(48.0),
                shade(107.0),
                v
            );
        }
        if show_labels {
            if let Some(label) = row_labels.get(r) {
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                    left - 4.0,
                    top + cell * (r as f64 + 0.7),
                    escape(label)
                );
            }
        }
    }
    if show_labels {
        for (c, label) in col_labels.iter().enumerate().take(cols) {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                left + cell * (c as f64 + 0.5),
                top - 4.0,
                escape(label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
