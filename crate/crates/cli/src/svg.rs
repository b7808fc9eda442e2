//! Minimal SVG line charts.

use std::fmt::Write as _;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 44.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn bounds(panel: &Panel) -> (f64, f64, f64, f64) {
    let pts = panel.series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    (x0, x1, y0 - pad, y1 + pad)
}

/// Panels side by side, sharing one legend.
pub fn render(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len().max(1) as f64;
    let height = PANEL_H + 40.0;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (k, panel) in panels.iter().enumerate() {
        let left = k as f64 * PANEL_W;
        let (x0, x1, y0, y1) = bounds(panel);
        let (pw, ph) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
        let sx = |x: f64| left + MARGIN + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN + (y1 - y) / (y1 - y0) * ph;
        let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, left + PANEL_W / 2.0, panel.title);
        let _ = writeln!(
            out,
            r##"<rect x="{}" y="{MARGIN}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##,
            left + MARGIN
        );
        if y0 < 0.0 && y1 > 0.0 {
            let _ = writeln!(
                out,
                r##"<line x1="{}" y1="{z}" x2="{}" y2="{z}" stroke="#bbb" stroke-dasharray="3,3"/>"##,
                sx(x0),
                sx(x1),
                z = sy(0.0)
            );
        }
        for (label, y) in [(format!("{:.2}", y1), sy(y1)), (format!("{:.2}", y0), sy(y0))] {
            let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#, left + MARGIN - 4.0, y + 4.0);
        }
        for (label, x, anchor) in [(format!("{x0}"), sx(x0), "start"), (format!("{x1}"), sx(x1), "end")] {
            let _ = writeln!(out, r#"<text x="{x}" y="{}" text-anchor="{anchor}">{label}</text>"#, MARGIN + ph + 14.0);
        }
        for (s, series) in panel.series.iter().enumerate() {
            let path: Vec<String> = series
                .points
                .iter()
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                COLORS[s % COLORS.len()],
                path.join(" ")
            );
        }
    }
    if let Some(first) = panels.first() {
        for (s, series) in first.series.iter().enumerate() {
            let x = MARGIN + 110.0 * s as f64;
            let y = height - 12.0;
            let color = COLORS[s % COLORS.len()];
            let _ = writeln!(out, r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="3"/>"#, x + 18.0);
            let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 22.0, y + 4.0, series.name);
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_every_series() {
        let panels: Vec<Panel> = (0..3)
            .map(|k| Panel {
                title: format!("panel {k}"),
                series: vec![
                    Series {
                        name: "a".into(),
                        points: vec![(0.0, 0.0), (1.0, 1.0)],
                    },
                    Series {
                        name: "b".into(),
                        points: vec![(0.0, -1.0), (1.0, f64::NAN)],
                    },
                ],
            })
            .collect();
        let svg = render(&panels);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 6);
        assert!(!svg.contains("NaN"));
    }
}
