//! Minimal SVG line plots. The CSV tables are the data of record; these are
//! for a quick look.

use std::fmt::Write;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn axis_range(values: impl Iterator<Item = f64>, log: bool) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        let v = if log { v.log10() } else { v };
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// Renders `series` on shared axes. Points that cannot be shown on a log
/// axis are skipped.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, log_x: bool, log_y: bool, series: &[Series], stamp: &str) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let ys = series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
    let (x0, x1) = axis_range(xs, log_x);
    let (y0, y1) = axis_range(ys, log_y);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, "<!-- {stamp} -->");
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    let _ = writeln!(s, r#"<text x="{}" y="25" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 15.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" text-anchor="middle" transform="rotate(-90 15 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    let tick = |v: f64, log: bool| if log { format!("{:.3e}", 10f64.powf(v)) } else { format!("{v:.4}") };
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="{anchor}">{}</text>"#, px(v), H - MARGIN + 15.0, tick(v, log_x));
    }
    for v in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN - 4.0, py(v) + 4.0, tick(v, log_y));
    }
    for (k, ser) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter_map(|&(x, y)| {
                let x = if log_x { x.log10() } else { x };
                let y = if log_y { y.log10() } else { y };
                (x.is_finite() && y.is_finite()).then(|| format!("{:.1},{:.1}", px(x), py(y)))
            })
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - MARGIN - 150.0,
            MARGIN + 16.0 * (k as f64 + 1.0),
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
