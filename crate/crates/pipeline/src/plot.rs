//! Minimal SVG line chart of Chamfer distance against hypothesis count.

use std::fmt::Write;

use crate::eval::{EvalReport, Stat};

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn polyline(points: &[(f64, f64)], colour: &str) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>\n",
        pts.join(" ")
    )
}

/// Oracle and inlier-selected curves with ±1 std bands.
pub fn best_of_n_svg(report: &EvalReport) -> String {
    let n = report.oracle_curve.len().max(1);
    let all = report.oracle_curve.iter().chain(&report.inlier_curve);
    let hi = all.clone().map(|s| s.mean + s.std).fold(0.0, f64::max).max(1e-9);
    let lo = all.map(|s| (s.mean - s.std).max(0.0)).fold(hi, f64::min);
    let span = (hi - lo).max(1e-9);
    let x = |k: usize| MARGIN + (W - 2.0 * MARGIN) * if n > 1 { k as f64 / (n - 1) as f64 } else { 0.5 };
    let y = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v - lo) / span;

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let _ = writeln!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for k in 0..n {
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", x(k), H - MARGIN + 16.0, k + 1);
    }
    for v in [lo, hi] {
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.4}</text>", MARGIN - 4.0, y(v) + 4.0);
    }
    let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">hypotheses N</text>", W / 2.0, H - 10.0);
    let _ = writeln!(svg, "<text x=\"12\" y=\"{:.2}\" transform=\"rotate(-90 12 {:.2})\" text-anchor=\"middle\">Chamfer L1</text>", H / 2.0, H / 2.0);
    for (curve, colour, label) in [
        (&report.oracle_curve, "#1f77b4", "best of N"),
        (&report.inlier_curve, "#d62728", "most inliers"),
    ] {
        let band = |c: &[Stat]| {
            let upper = c.iter().enumerate().map(|(k, s)| (x(k), y(s.mean + s.std)));
            let lower = c.iter().enumerate().rev().map(|(k, s)| (x(k), y((s.mean - s.std).max(lo))));
            upper.chain(lower).map(|(a, b)| format!("{a:.2},{b:.2}")).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(svg, "<polygon fill=\"{colour}\" fill-opacity=\"0.15\" points=\"{}\"/>", band(curve));
        let pts: Vec<(f64, f64)> = curve.iter().enumerate().map(|(k, s)| (x(k), y(s.mean))).collect();
        svg.push_str(&polyline(&pts, colour));
        let ly = if label == "best of N" { MARGIN - 20.0 } else { MARGIN - 6.0 };
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{ly:.2}\" fill=\"{colour}\">{label}</text>", W - MARGIN - 80.0);
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_both_curves() {
        let s = |m| Stat { mean: m, std: 0.01 };
        let report = EvalReport {
            scenes: 2,
            hypotheses: 3,
            n_points: 10,
            f_threshold: 0.02,
            oracle_curve: vec![s(0.1), s(0.08), s(0.07)],
            inlier_curve: vec![s(0.1), s(0.09), s(0.09)],
            oracle_fscore: s(0.5),
            selected_chamfer: s(0.09),
            selected_fscore: s(0.4),
            first_chamfer: s(0.1),
            valid_fraction: 1.0,
        };
        let svg = best_of_n_svg(&report);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
