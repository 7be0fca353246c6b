//! Static SVG charts. Output depends only on the inputs, so plots are
//! byte-reproducible.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + (WIDTH - LEFT - RIGHT) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    );
    let cy = TOP + (HEIGHT - TOP - BOTTOM) / 2.0;
    let _ = writeln!(
        out,
        r#"<text x="16" y="{cy:.1}" text-anchor="middle" transform="rotate(-90 16 {cy:.1})">{}</text>"#,
        escape(y_label)
    );
}

/// Y axis from 0 to 1 with gridlines every 0.2.
fn unit_y_axis(out: &mut String) {
    let plot_h = HEIGHT - TOP - BOTTOM;
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = TOP + plot_h * (1.0 - v);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            WIDTH - RIGHT
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, LEFT - 6.0, y + 4.0);
    }
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT:.1}" y1="{TOP:.1}" x2="{LEFT:.1}" y2="{:.1}" stroke="#333333"/>"##,
        HEIGHT - BOTTOM
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let x = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}"/>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(out, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 18.0, escape(name));
    }
}

/// Line chart over a shared x axis with y clamped to [0, 1].
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    unit_y_axis(&mut out);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x_max = series.iter().flat_map(|(_, p)| p.iter().map(|(x, _)| *x)).fold(1.0f64, f64::max);
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#333333"/>"##,
        HEIGHT - BOTTOM,
        WIDTH - RIGHT,
        HEIGHT - BOTTOM
    );
    for i in 0..=4 {
        let v = x_max * i as f64 / 4.0;
        let x = LEFT + plot_w * i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{v:.0}</text>"#, HEIGHT - BOTTOM + 16.0);
    }
    for (k, (_, points)) in series.iter().enumerate() {
        let path: Vec<String> = points
            .iter()
            .map(|(x, y)| {
                let px = LEFT + plot_w * x / x_max;
                let py = TOP + plot_h * (1.0 - y.clamp(0.0, 1.0));
                format!("{px:.1},{py:.1}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            PALETTE[k % PALETTE.len()],
            path.join(" ")
        );
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// One cluster of bars per group, one bar per series, values in [0, 1].
pub fn grouped_bars(title: &str, y_label: &str, series_names: &[&str], groups: &[(String, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title, "", y_label);
    unit_y_axis(&mut out);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let slot = plot_w / groups.len().max(1) as f64;
    let bar = slot * 0.8 / series_names.len().max(1) as f64;
    let _ = writeln!(
        out,
        r##"<line x1="{LEFT:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#333333"/>"##,
        HEIGHT - BOTTOM,
        WIDTH - RIGHT,
        HEIGHT - BOTTOM
    );
    for (g, (name, values)) in groups.iter().enumerate() {
        let x0 = LEFT + slot * g as f64 + slot * 0.1;
        for (k, v) in values.iter().enumerate() {
            let h = plot_h * v.clamp(0.0, 1.0);
            let x = x0 + bar * k as f64;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"><title>{} {}: {v:.4}</title></rect>"#,
                TOP + plot_h - h,
                bar * 0.95,
                PALETTE[k % PALETTE.len()],
                escape(name),
                escape(series_names.get(k).copied().unwrap_or(""))
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{:.1}</text>"#,
                x + bar * 0.475,
                TOP + plot_h - h - 3.0,
                v * 100.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + slot * (g as f64 + 0.5),
            HEIGHT - BOTTOM + 16.0,
            escape(name)
        );
    }
    legend(&mut out, series_names);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_is_deterministic_and_well_formed() {
        let s = vec![("2-layer".to_string(), vec![(100.0, 0.3), (200.0, 0.9), (300.0, 1.0)])];
        let a = line_chart("Convergence", "step", "ID exact match", &s);
        assert_eq!(a, line_chart("Convergence", "step", "ID exact match", &s));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert_eq!(a.matches("<polyline").count(), 1);
    }

    #[test]
    fn bars_escape_labels_and_count_rects() {
        let groups = vec![("a<b".to_string(), vec![0.5, 1.0]), ("c".to_string(), vec![0.25, 0.0])];
        let svg = grouped_bars("t", "y", &["ID", "OOD"], &groups);
        assert!(svg.contains("a&lt;b"));
        // background + 4 bars + 2 legend swatches
        assert_eq!(svg.matches("<rect").count(), 7);
    }
}
