//! Static SVG figures.

use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 48.0;

fn frame(title: &str, comment: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, "<!-- {comment} -->");
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD / 2.0
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One bar per `(label, value)`, values in `[0, 1]`.
pub fn bar_chart(title: &str, bars: &[(String, f64)], comment: &str) -> String {
    let mut s = frame(title, comment);
    let plot_w = W - 1.5 * PAD;
    let plot_h = H - 2.0 * PAD;
    let slot = plot_w / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let h = v * plot_h;
        let x = PAD + i as f64 * slot + 0.15 * slot;
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="#4a7fb5"/>"##,
            H - PAD - h,
            0.7 * slot
        );
        let cx = x + 0.35 * slot;
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{:.3}</text>"#,
            H - PAD - h - 4.0,
            v
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            H - PAD + 16.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Polyline of `values` against their index.
pub fn line_chart(title: &str, values: &[f64], comment: &str) -> String {
    let mut s = frame(title, comment);
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() >= 2 {
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let plot_w = W - 1.5 * PAD;
        let plot_h = H - 2.0 * PAD;
        let n = values.len() - 1;
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, v)| {
                format!(
                    "{:.1},{:.1}",
                    PAD + plot_w * i as f64 / n as f64,
                    H - PAD - plot_h * (v - lo) / span
                )
            })
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#b5534a" stroke-width="1.5"/>"##,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="4" y="{:.1}" font-family="sans-serif" font-size="10">{hi:.3}</text>"#,
            PAD + 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="4" y="{:.1}" font-family="sans-serif" font-size="10">{lo:.3}</text>"#,
            H - PAD
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_chart_has_one_rect_per_bar() {
        let svg = bar_chart("K", &[("1".into(), 0.5), ("2".into(), 0.7)], "cfg");
        assert_eq!(svg.matches("<rect").count(), 3);
        assert!(svg.contains("<!-- cfg -->"));
    }

    #[test]
    fn line_chart_tolerates_flat_series() {
        let svg = line_chart("loss", &[1.0, 1.0, 1.0], "x");
        assert!(svg.contains("<polyline"));
        assert!(!line_chart("loss", &[1.0], "x").contains("<polyline"));
    }
}
