//! Brute-force threshold enumeration for ROC, TPR@FPR and precision/recall
//! on random panels with heavy ties.

use oslo_lab::metrics::{decision_point, precision_recall, roc_points, tpr_at_fpr, ScoredEntry, ScoredPanel};
use oslo_lab::rng::stage_rng;
use rand::Rng;

/// (threshold, tp, fp) for +inf and every distinct score, descending.
fn brute_roc(scores: &[(f64, bool)]) -> Vec<(f64, usize, usize)> {
    let mut thresholds: Vec<f64> = scores.iter().map(|s| s.0).collect();
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| {
            let tp = scores.iter().filter(|s| s.0 >= t && s.1).count();
            let fp = scores.iter().filter(|s| s.0 >= t && !s.1).count();
            (t, tp, fp)
        })
        .collect()
}

fn random_panel(i: u64) -> Vec<(f64, bool)> {
    let mut rng = stage_rng(i, "metric-oracle");
    let n = rng.random_range(2..=64);
    let levels = rng.random_range(1..=12);
    let mut v: Vec<(f64, bool)> = (0..n)
        .map(|_| (rng.random_range(0..levels) as f64 / levels as f64, rng.random_bool(0.5)))
        .collect();
    v[0].1 = true;
    v[1].1 = false;
    v
}

macro_rules! same {
    ($a:expr, $b:expr, $($ctx:tt)*) => {
        if $a != $b {
            return Err(format!("{}: {:?} != {:?}", format!($($ctx)*), $a, $b));
        }
    };
}

/// Compares the library against the brute force on `count` panels; the
/// first mismatch is returned as an error.
pub fn check_panels(count: u64) -> Result<(), String> {
    for i in 0..count {
        let scores = random_panel(i);
        let panel = ScoredPanel::new(
            scores
                .iter()
                .enumerate()
                .map(|(k, &(score, is_member))| ScoredEntry {
                    sample_id: k,
                    score,
                    is_member,
                })
                .collect(),
        );
        let pos = scores.iter().filter(|s| s.1).count();
        let neg = scores.len() - pos;
        let brute = brute_roc(&scores);
        let roc = roc_points(&panel).map_err(|e| e.to_string())?;
        same!(roc.points.len(), brute.len(), "panel {i} point count");
        for (p, &(t, tp, fp)) in roc.points.iter().zip(&brute) {
            same!(p.parameter, t, "panel {i} threshold");
            same!(p.tpr, Some(tp as f64 / pos as f64), "panel {i} tpr at {t}");
            same!(p.fpr, Some(fp as f64 / neg as f64), "panel {i} fpr at {t}");
            same!(p.flagged, tp + fp, "panel {i} flagged at {t}");
            same!(p.precision, (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64), "panel {i} precision at {t}");
        }
        for cap in [0.0, 0.001, 0.01, 0.1, 0.25, 0.5, 1.0] {
            let want = brute
                .iter()
                .filter(|b| b.2 as f64 / neg as f64 <= cap)
                .map(|b| b.1 as f64 / pos as f64)
                .fold(0.0, f64::max);
            same!(tpr_at_fpr(&panel, cap).map_err(|e| e.to_string())?, want, "panel {i} tpr@fpr {cap}");
        }
        let t = scores[i as usize % scores.len()].0;
        let d: Vec<(bool, bool)> = scores.iter().map(|s| (s.0 >= t, s.1)).collect();
        let tp = d.iter().filter(|x| x.0 && x.1).count();
        let flagged = d.iter().filter(|x| x.0).count();
        let pr = precision_recall(&d);
        same!(pr.precision, (flagged > 0).then(|| tp as f64 / flagged as f64), "panel {i} precision");
        same!(pr.recall, Some(tp as f64 / pos as f64), "panel {i} recall");
        same!(decision_point(t, &d).fpr, Some((flagged - tp) as f64 / neg as f64), "panel {i} decision fpr");
    }
    Ok(())
}
