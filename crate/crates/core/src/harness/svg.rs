//! Minimal SVG line chart for ROC curves on a log-FPR axis.

use crate::metrics::MetricCurve;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const MIN_FPR: f64 = 1e-3;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn x_of(fpr: f64) -> f64 {
    let f = fpr.max(MIN_FPR).log10();
    let lo = MIN_FPR.log10();
    PAD + (f - lo) / -lo * (W - 2.0 * PAD)
}

fn y_of(tpr: f64) -> f64 {
    H - PAD - tpr.clamp(0.0, 1.0) * (H - 2.0 * PAD)
}

/// One polyline per named curve; points are sorted by FPR and FPR values
/// below 0.1% are drawn on the left edge.
pub fn roc_svg(curves: &[(String, MetricCurve)]) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    s.push_str(&format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    ));
    for e in [-3, -2, -1, 0] {
        let x = x_of(10f64.powi(e));
        s.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">1e{e}</text>\n",
            H - PAD + 14.0
        ));
    }
    for t in [0.0, 0.5, 1.0] {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{t}</text>\n",
            PAD - 4.0,
            y_of(t) + 4.0
        ));
    }
    s.push_str(&format!("<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">FPR</text>\n", W / 2.0, H - 8.0));
    s.push_str(&format!("<text x=\"12\" y=\"{:.1}\" transform=\"rotate(-90 12 {:.1})\" text-anchor=\"middle\">TPR</text>\n", H / 2.0, H / 2.0));
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts: Vec<(f64, f64)> = curve.points.iter().filter_map(|p| Some((p.fpr?, p.tpr?))).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let path: Vec<String> = pts.iter().map(|(f, t)| format!("{:.1},{:.1}", x_of(*f), y_of(*t))).collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{name}</text>\n",
            PAD + 8.0,
            PAD + 14.0 + 13.0 * i as f64
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::decision_point;

    #[test]
    fn renders_one_polyline_per_curve() {
        let c = MetricCurve {
            points: vec![decision_point(0.1, &[(true, true), (false, false)]), decision_point(0.2, &[(true, true), (true, false)])],
        };
        let svg = roc_svg(&[("a".into(), c.clone()), ("b".into(), c)]);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }

    #[test]
    fn log_axis_ends() {
        assert!((x_of(1.0) - (W - PAD)).abs() < 1e-9);
        assert!((x_of(0.0) - PAD).abs() < 1e-9);
    }
}
