//! Evaluation quantities: ROC points, TPR at a capped FPR, precision and
//! recall, perturbation CDFs and query accounting.
//!
//! Scores follow one convention everywhere: higher means more member-like.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub sample_id: usize,
    pub score: f64,
    pub is_member: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredPanel {
    pub entries: Vec<ScoredEntry>,
}

impl ScoredPanel {
    pub fn new(entries: Vec<ScoredEntry>) -> Self {
        Self { entries }
    }

    pub fn members(&self) -> usize {
        self.entries.iter().filter(|e| e.is_member).count()
    }

    pub fn nonmembers(&self) -> usize {
        self.entries.len() - self.members()
    }

    fn check_two_classes(&self) -> Result<()> {
        if self.members() == 0 || self.nonmembers() == 0 {
            return Err(Error::invalid(format!(
                "ROC needs members and non-members (got {} and {})",
                self.members(),
                self.nonmembers()
            )));
        }
        if self.entries.iter().any(|e| e.score.is_nan()) {
            return Err(Error::invalid("NaN score in panel"));
        }
        Ok(())
    }
}

/// One measured operating point. Rates are `None` where undefined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Score threshold for ROC curves, tau for OSLO sweeps.
    pub parameter: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub flagged_fraction: f64,
    pub flagged: usize,
    pub true_positives: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub points: Vec<CurvePoint>,
}

impl MetricCurve {
    /// CSV with header `tau,tpr,fpr,precision,recall,flagged_fraction`;
    /// undefined values are written as `null`.
    pub fn to_csv(&self, parameter_name: &str) -> String {
        let mut s = format!("{parameter_name},tpr,fpr,precision,recall,flagged_fraction\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fmt_f(p.parameter),
                fmt_opt(p.tpr),
                fmt_opt(p.fpr),
                fmt_opt(p.precision),
                fmt_opt(p.recall),
                fmt_f(p.flagged_fraction)
            ));
        }
        s
    }

    /// Highest TPR among points whose FPR is at most `cap`; 0 if none.
    pub fn tpr_at_fpr(&self, cap: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fpr.is_some_and(|f| f <= cap))
            .filter_map(|p| p.tpr)
            .fold(0.0, f64::max)
    }

    /// Highest precision among points with recall at least `min_recall`.
    pub fn max_precision_at_recall(&self, min_recall: f64) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.recall.is_some_and(|r| r >= min_recall))
            .filter_map(|p| p.precision)
            .reduce(f64::max)
    }
}

pub(crate) fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".into(), fmt_f)
}

/// Operating point for a set of binary decisions `(flagged, is_member)`.
pub fn decision_point(parameter: f64, decisions: &[(bool, bool)]) -> CurvePoint {
    let members = decisions.iter().filter(|d| d.1).count();
    let nonmembers = decisions.len() - members;
    let tp = decisions.iter().filter(|d| d.0 && d.1).count();
    let fp = decisions.iter().filter(|d| d.0 && !d.1).count();
    let pr = precision_recall(decisions);
    CurvePoint {
        parameter,
        tpr: ratio(tp, members),
        fpr: ratio(fp, nonmembers),
        precision: pr.precision,
        recall: pr.recall,
        flagged_fraction: if decisions.is_empty() {
            0.0
        } else {
            (tp + fp) as f64 / decisions.len() as f64
        },
        flagged: tp + fp,
        true_positives: tp,
    }
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// ROC operating points, one per distinct threshold, from `+inf` (nothing
/// flagged) down to the lowest score. A sample is flagged when
/// `score >= threshold`, so tied scores switch together.
pub fn roc_points(panel: &ScoredPanel) -> Result<MetricCurve> {
    panel.check_two_classes()?;
    let mut sorted: Vec<&ScoredEntry> = panel.entries.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (pos, neg) = (panel.members(), panel.nonmembers());
    let n = sorted.len();
    let mut points = vec![point_from_counts(f64::INFINITY, 0, 0, pos, neg, n)];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < n {
        let thr = sorted[i].score;
        while i < n && sorted[i].score == thr {
            if sorted[i].is_member {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(point_from_counts(thr, tp, fp, pos, neg, n));
    }
    Ok(MetricCurve { points })
}

fn point_from_counts(thr: f64, tp: usize, fp: usize, pos: usize, neg: usize, n: usize) -> CurvePoint {
    CurvePoint {
        parameter: thr,
        tpr: ratio(tp, pos),
        fpr: ratio(fp, neg),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, pos),
        flagged_fraction: (tp + fp) as f64 / n as f64,
        flagged: tp + fp,
        true_positives: tp,
    }
}

/// Highest TPR over score thresholds whose FPR stays within `cap`.
pub fn tpr_at_fpr(panel: &ScoredPanel, cap: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&cap) {
        return Err(Error::invalid(format!("fpr cap {cap} outside [0, 1]")));
    }
    Ok(roc_points(panel)?.tpr_at_fpr(cap))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

/// Precision and recall of `(flagged, is_member)` decisions. Precision is
/// `None` with no positives, recall is `None` with no members.
pub fn precision_recall(decisions: &[(bool, bool)]) -> PrecisionRecall {
    let tp = decisions.iter().filter(|d| d.0 && d.1).count();
    let flagged = decisions.iter().filter(|d| d.0).count();
    let members = decisions.iter().filter(|d| d.1).count();
    PrecisionRecall {
        precision: ratio(tp, flagged),
        recall: ratio(tp, members),
    }
}

/// Empirical CDF as `(value, fraction <= value)` at each distinct value.
pub fn empirical_cdf(values: &[f64]) -> Vec<(f64, f64)> {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in v.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationCdf {
    pub members: Vec<(f64, f64)>,
    pub nonmembers: Vec<(f64, f64)>,
}

impl PerturbationCdf {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,perturbation_linf,cdf\n");
        for (name, rows) in [("member", &self.members), ("nonmember", &self.nonmembers)] {
            for (v, c) in rows {
                s.push_str(&format!("{name},{v},{c}\n"));
            }
        }
        s
    }
}

/// CDFs of perturbation magnitude grouped by membership, from
/// `(perturbation_linf, is_member)` pairs.
pub fn perturbation_cdf(magnitudes: &[(f64, bool)]) -> Result<PerturbationCdf> {
    if magnitudes.is_empty() {
        return Err(Error::invalid("perturbation CDF of an empty archive"));
    }
    let pick = |m: bool| magnitudes.iter().filter(|e| e.1 == m).map(|e| e.0).collect::<Vec<_>>();
    Ok(PerturbationCdf {
        members: empirical_cdf(&pick(true)),
        nonmembers: empirical_cdf(&pick(false)),
    })
}

/// Query usage claimed by one attack run, next to the audited counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub attack: String,
    /// Per-sample query counts as recorded in the attack's outputs.
    pub per_sample: Vec<u64>,
    /// Value read from the shared atomic counter.
    pub audited: u64,
    /// Exact expectation where one exists (e.g. panel size for one-shot).
    pub expected: Option<u64>,
    /// Upper bound where one exists (e.g. budget times panel size).
    pub bound: Option<u64>,
}

/// Totals per attack. Any disagreement between recorded, audited and
/// expected counts is an integrity error.
pub fn query_report(records: &[QueryRecord]) -> Result<BTreeMap<String, u64>> {
    let mut out = BTreeMap::new();
    for r in records {
        let recorded: u64 = r.per_sample.iter().sum();
        if recorded != r.audited {
            return Err(Error::Integrity(format!(
                "{}: per-sample queries sum to {recorded} but the counter reads {}",
                r.attack, r.audited
            )));
        }
        if let Some(e) = r.expected {
            if e != r.audited {
                return Err(Error::Integrity(format!(
                    "{}: expected exactly {e} target queries, counted {}",
                    r.attack, r.audited
                )));
            }
        }
        if let Some(b) = r.bound {
            if r.audited > b {
                return Err(Error::Integrity(format!(
                    "{}: {} target queries exceed the bound {b}",
                    r.attack, r.audited
                )));
            }
        }
        out.insert(r.attack.clone(), r.audited);
    }
    Ok(out)
}

/// Wilson score interval for `k` successes in `n` trials at ~95% coverage.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let (n, p) = (n as f64, k as f64 / n as f64);
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}
