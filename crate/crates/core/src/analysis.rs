//! Comparative studies over archived traces: OSLO against a global
//! perturbation threshold at a matched flagged fraction, the uniform-budget
//! ablation without validation models, stopping-rule comparison, multi-shot
//! inference, and the member/non-member perturbation-to-flip test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{decision_point, fmt_opt, CurvePoint};
use crate::oslo::{
    decide, infer_membership, run_panel, tau_archive, AdvTrace, AttackConfig, MembershipDecision, PanelSample, Probes,
    Surrogates, TargetOracle,
};

/// One attack's operating point at the matched fraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackAtFraction {
    /// tau for OSLO, magnitude threshold for the global attack.
    pub parameter: f64,
    pub flagged: usize,
    pub flagged_fraction: f64,
    pub precision: Option<f64>,
    /// False positives over flagged samples.
    pub fp_share: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedComparison {
    pub requested_fraction: f64,
    pub panel_size: usize,
    pub oslo: AttackAtFraction,
    pub global: AttackAtFraction,
    /// Flagged counts differ by at most one sample.
    pub matched: bool,
    /// Neither attack could reach the requested count exactly.
    pub nearest_only: bool,
}

impl MatchedComparison {
    pub fn precision_gap(&self) -> Option<f64> {
        Some(self.oslo.precision? - self.global.precision?)
    }
}

fn at_fraction(parameter: f64, decisions: &[(bool, bool)]) -> AttackAtFraction {
    let p = decision_point(parameter, decisions);
    AttackAtFraction {
        parameter,
        flagged: p.flagged,
        flagged_fraction: p.flagged_fraction,
        precision: p.precision,
        fp_share: p.precision.map(|v| 1.0 - v),
    }
}

/// Picks the OSLO tau whose flagged count is nearest to
/// `fraction * panel`, then the global magnitude threshold whose flagged
/// count is nearest to OSLO's, and reports both precisions.
///
/// `oslo` holds `(tau, decisions)` per tau; `magnitudes` holds
/// `(perturbation, is_member)` per sample for the global attack, which
/// flags a sample when its magnitude is at least the threshold.
pub fn matched_fraction_comparison(
    oslo: &[(f64, Vec<(bool, bool)>)],
    magnitudes: &[(f64, bool)],
    fraction: f64,
) -> Result<MatchedComparison> {
    if oslo.is_empty() || magnitudes.is_empty() {
        return Err(Error::invalid("matched comparison needs OSLO points and global-attack traces"));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid("fraction must lie in [0, 1]"));
    }
    let n = magnitudes.len();
    let want = fraction * n as f64;
    let (tau, oslo_dec) = oslo
        .iter()
        .min_by(|a, b| {
            let fa = a.1.iter().filter(|d| d.0).count() as f64;
            let fb = b.1.iter().filter(|d| d.0).count() as f64;
            (fa - want).abs().total_cmp(&(fb - want).abs())
        })
        .expect("non-empty");
    let oslo_pt = at_fraction(*tau, oslo_dec);

    // candidate thresholds: +inf (nothing flagged) and every distinct value
    let mut sorted: Vec<f64> = magnitudes.iter().map(|m| m.0).collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.dedup();
    let mut best: Option<(f64, Vec<(bool, bool)>)> = None;
    for thr in std::iter::once(f64::INFINITY).chain(sorted) {
        let d: Vec<(bool, bool)> = magnitudes.iter().map(|&(m, is)| (m >= thr, is)).collect();
        let c = d.iter().filter(|x| x.0).count();
        let better = match &best {
            None => true,
            Some((_, bd)) => {
                let bc = bd.iter().filter(|x| x.0).count();
                c.abs_diff(oslo_pt.flagged) < bc.abs_diff(oslo_pt.flagged)
            }
        };
        if better {
            best = Some((thr, d));
        }
    }
    let (thr, gd) = best.expect("at least the +inf threshold");
    let global_pt = at_fraction(thr, &gd);
    let target_count = want.round() as usize;
    Ok(MatchedComparison {
        requested_fraction: fraction,
        panel_size: n,
        matched: oslo_pt.flagged.abs_diff(global_pt.flagged) <= 1,
        nearest_only: oslo_pt.flagged != target_count,
        oslo: oslo_pt,
        global: global_pt,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformRow {
    pub eps: f64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub flagged_fraction: f64,
}

/// Attack settings for a fixed budget `eps` with no validation models:
/// one stage of `cfg.n` iterations with step `2.5 * eps / n`, no early stop.
pub fn uniform_config(cfg: &AttackConfig, eps: f64) -> AttackConfig {
    AttackConfig {
        k: 1,
        alpha: 2.5 * eps / cfg.n as f64,
        eps_max: eps,
        tau: 0.0,
        stop_mode: crate::oslo::StopMode::TauThreshold,
        ..cfg.clone()
    }
}

/// Every sample gets the same budget; member iff the target is unfooled.
/// One target query per sample per budget. `eps = 0` skips the attack.
pub fn uniform_budget_ablation(
    panel: &[PanelSample],
    oracle: &TargetOracle,
    sur: &Surrogates,
    cfg: &AttackConfig,
    eps_list: &[f64],
    seed: u64,
) -> Result<Vec<UniformRow>> {
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let traces: Vec<AdvTrace> = if eps == 0.0 {
            panel
                .iter()
                .map(|s| AdvTrace {
                    sample_id: s.sample_id,
                    label: s.label,
                    is_member: s.is_member,
                    tau: None,
                    x_final: s.image.clone(),
                    stop_stage: 0,
                    stop_iteration: 0,
                    exhausted: true,
                    perturbation_linf: 0.0,
                    validation_confidences: vec![],
                    queries_used: 0,
                })
                .collect()
        } else {
            let ucfg = uniform_config(cfg, eps);
            let t = run_panel(panel, sur, &ucfg, &Probes::taus(&[0.0]), seed)?;
            panel
                .iter()
                .zip(&t)
                .map(|(s, t)| AdvTrace::from_snapshot(s, None, &t.tau_hits[0]))
                .collect()
        };
        let p = decision_point(eps, &decide(oracle, &traces)?);
        rows.push(UniformRow {
            eps,
            tpr: p.tpr,
            fpr: p.fpr,
            flagged_fraction: p.flagged_fraction,
        });
    }
    Ok(rows)
}

/// Smallest budget in `ladder` (ascending) at which at least `rate` of the
/// given non-members fool every validation model. Uses no target queries.
pub fn calibrate_large_eps(
    nonmembers: &[PanelSample],
    sur: &Surrogates,
    cfg: &AttackConfig,
    ladder: &[f64],
    rate: f64,
    seed: u64,
) -> Result<(f64, bool)> {
    for &eps in ladder {
        let t = run_panel(nonmembers, sur, &uniform_config(cfg, eps), &Probes::taus(&[0.0]), seed)?;
        let fooled: Vec<bool> = nonmembers
            .par_iter()
            .zip(&t)
            .map(|(s, t)| {
                Ok(sur
                    .validation
                    .assess(&t.tau_hits[0].x, s.label)?
                    .iter()
                    .all(|a| a.1 != s.label))
            })
            .collect::<Result<_>>()?;
        let r = fooled.iter().filter(|f| **f).count() as f64 / nonmembers.len().max(1) as f64;
        if r >= rate {
            return Ok((eps, true));
        }
    }
    Ok((*ladder.last().ok_or_else(|| Error::invalid("empty eps ladder"))?, false))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopModeRow {
    pub mode: String,
    pub tau: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub flagged_fraction: f64,
    pub mean_stop_stage: f64,
}

/// TPR and FPR per stopping rule on one panel from a single trajectory
/// pass. One target query per sample per rule.
pub fn stop_mode_comparison(
    panel: &[PanelSample],
    oracle: &TargetOracle,
    sur: &Surrogates,
    cfg: &AttackConfig,
    taus: &[f64],
    label_flip: bool,
    seed: u64,
) -> Result<Vec<StopModeRow>> {
    let probes = Probes {
        taus: taus.to_vec(),
        label_flip,
        target: None,
    };
    let t = run_panel(panel, sur, cfg, &probes, seed)?;
    let archive = tau_archive(panel, &t, taus)?;
    let decisions = archive.iter().map(|lvl| decide(oracle, lvl)).collect::<Result<Vec<_>>>()?;
    let lf: Option<Vec<AdvTrace>> = label_flip.then(|| {
        panel
            .iter()
            .zip(&t)
            .map(|(s, t)| AdvTrace::from_snapshot(s, None, t.label_flip.as_ref().expect("probe set")))
            .collect()
    });
    let lf_dec = lf.as_ref().map(|l| decide(oracle, l)).transpose()?;
    stop_mode_rows(&archive, &decisions, lf.as_deref().zip(lf_dec.as_deref()))
}

/// Stop-mode rows from already queried decisions: one row per archived tau
/// level, plus the label-flip row when given.
pub fn stop_mode_rows(
    archive: &[Vec<AdvTrace>],
    decisions: &[Vec<(bool, bool)>],
    label_flip: Option<(&[AdvTrace], &[(bool, bool)])>,
) -> Result<Vec<StopModeRow>> {
    if archive.len() != decisions.len() {
        return Err(Error::invalid("one decision set per archived tau level is required"));
    }
    let row = |mode: &str, tau: Option<f64>, traces: &[AdvTrace], d: &[(bool, bool)]| {
        let p = decision_point(tau.unwrap_or(f64::NAN), d);
        StopModeRow {
            mode: mode.into(),
            tau,
            tpr: p.tpr,
            fpr: p.fpr,
            flagged_fraction: p.flagged_fraction,
            mean_stop_stage: traces.iter().map(|t| t.stop_stage as f64).sum::<f64>() / traces.len().max(1) as f64,
        }
    };
    let mut rows: Vec<StopModeRow> = archive
        .iter()
        .zip(decisions)
        .map(|(lvl, d)| row("tau-threshold", lvl.first().and_then(|t| t.tau), lvl, d))
        .collect();
    if let Some((traces, d)) = label_flip {
        rows.push(row("label-flip", None, traces, d));
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRow {
    pub shots: usize,
    pub taus: Vec<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub flagged: usize,
    pub queries: u64,
    pub members_flagged: Vec<usize>,
}

/// Multi-shot inference for 1..=`max_shots` shots. `archive[j]` holds the
/// panel's traces at the j-th tau of a descending list; an s-shot decision
/// feeds the s lowest-tau traces and needs all of them to keep the label.
pub fn multishot_study(oracle: &TargetOracle, archive: &[Vec<AdvTrace>], max_shots: usize) -> Result<Vec<ShotRow>> {
    if archive.len() < max_shots {
        return Err(Error::invalid(format!(
            "{} tau levels archived, {max_shots} shots requested",
            archive.len()
        )));
    }
    let n = archive[0].len();
    let per_sample: Vec<Vec<AdvTrace>> = (0..n).map(|i| archive.iter().map(|lvl| lvl[i].clone()).collect()).collect();
    let taus: Vec<f64> = archive.iter().map(|lvl| lvl[0].tau.unwrap_or(f64::NAN)).collect();
    let mut rows = Vec::new();
    for shots in 1..=max_shots {
        let d: Vec<MembershipDecision> = infer_membership(oracle, &per_sample, shots)?;
        let pairs: Vec<(bool, bool)> = d.iter().zip(&per_sample).map(|(d, t)| (d.member, t[0].is_member)).collect();
        let p: CurvePoint = decision_point(shots as f64, &pairs);
        rows.push(ShotRow {
            shots,
            taus: taus[taus.len() - shots..].to_vec(),
            precision: p.precision,
            recall: p.recall,
            tpr: p.tpr,
            fpr: p.fpr,
            flagged: p.flagged,
            queries: d.iter().map(|x| x.queries).sum(),
            members_flagged: d.iter().filter(|x| x.member).map(|x| x.sample_id).collect(),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipStudy {
    pub member_mean: f64,
    pub nonmember_mean: f64,
    pub members: usize,
    pub nonmembers: usize,
    pub never_flipped: usize,
}

/// Compares perturbation-to-flip magnitudes (from target-side flip search
/// traces) between members and non-members.
pub fn flip_study(traces: &[AdvTrace]) -> Result<FlipStudy> {
    let m: Vec<f64> = traces.iter().filter(|t| t.is_member).map(|t| t.perturbation_linf).collect();
    let nm: Vec<f64> = traces.iter().filter(|t| !t.is_member).map(|t| t.perturbation_linf).collect();
    if m.is_empty() || nm.is_empty() {
        return Err(Error::invalid("flip study needs members and non-members"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(FlipStudy {
        member_mean: mean(&m),
        nonmember_mean: mean(&nm),
        members: m.len(),
        nonmembers: nm.len(),
        never_flipped: traces.iter().filter(|t| t.exhausted).count(),
    })
}

/// All analysis tables of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub matched: Vec<MatchedComparison>,
    pub uniform: Vec<UniformRow>,
    pub stop_modes: Vec<StopModeRow>,
    pub multishot: Vec<ShotRow>,
    pub flip: Option<FlipStudy>,
}

impl ComparisonReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        if !self.matched.is_empty() {
            s.push_str("## OSLO vs global threshold at matched flagged fraction\n\n");
            s.push_str("| requested | oslo tau | oslo flagged | oslo precision | global threshold | global flagged | global precision | matched |\n");
            s.push_str("|---|---|---|---|---|---|---|---|\n");
            for m in &self.matched {
                s.push_str(&format!(
                    "| {:.3} | {} | {} | {} | {:.4} | {} | {} | {} |\n",
                    m.requested_fraction,
                    m.oslo.parameter,
                    m.oslo.flagged,
                    fmt_opt(m.oslo.precision),
                    m.global.parameter,
                    m.global.flagged,
                    fmt_opt(m.global.precision),
                    m.matched
                ));
            }
            s.push('\n');
        }
        if !self.uniform.is_empty() {
            s.push_str("## Uniform budget without validation models\n\n| eps | tpr | fpr |\n|---|---|---|\n");
            for r in &self.uniform {
                s.push_str(&format!("| {:.4} | {} | {} |\n", r.eps, fmt_opt(r.tpr), fmt_opt(r.fpr)));
            }
            s.push('\n');
        }
        if !self.stop_modes.is_empty() {
            s.push_str("## Stopping criteria\n\n| mode | tau | tpr | fpr | mean stop stage |\n|---|---|---|---|---|\n");
            for r in &self.stop_modes {
                s.push_str(&format!(
                    "| {} | {} | {} | {} | {:.2} |\n",
                    r.mode,
                    fmt_opt(r.tau),
                    fmt_opt(r.tpr),
                    fmt_opt(r.fpr),
                    r.mean_stop_stage
                ));
            }
            s.push('\n');
        }
        if !self.multishot.is_empty() {
            s.push_str("## Multi-shot\n\n| shots | precision | recall | flagged | queries |\n|---|---|---|---|---|\n");
            for r in &self.multishot {
                s.push_str(&format!(
                    "| {} | {} | {} | {} | {} |\n",
                    r.shots,
                    fmt_opt(r.precision),
                    fmt_opt(r.recall),
                    r.flagged,
                    r.queries
                ));
            }
            s.push('\n');
        }
        if let Some(f) = &self.flip {
            s.push_str(&format!(
                "## Perturbation to flip the target\n\nmember mean {:.5}, non-member mean {:.5}, never flipped {}\n",
                f.member_mean, f.nonmember_mean, f.never_flipped
            ));
        }
        s
    }

    /// Long-format CSV: `table,key,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("table,key,metric,value\n");
        let mut row = |t: &str, k: String, m: &str, v: String| s.push_str(&format!("{t},{k},{m},{v}\n"));
        for m in &self.matched {
            let k = format!("{}", m.requested_fraction);
            row("matched", k.clone(), "oslo_precision", fmt_opt(m.oslo.precision));
            row("matched", k.clone(), "oslo_flagged", m.oslo.flagged.to_string());
            row("matched", k.clone(), "global_precision", fmt_opt(m.global.precision));
            row("matched", k, "global_flagged", m.global.flagged.to_string());
        }
        for r in &self.uniform {
            row("uniform", r.eps.to_string(), "tpr", fmt_opt(r.tpr));
            row("uniform", r.eps.to_string(), "fpr", fmt_opt(r.fpr));
        }
        for r in &self.stop_modes {
            let k = format!("{}:{}", r.mode, fmt_opt(r.tau));
            row("stop_mode", k.clone(), "tpr", fmt_opt(r.tpr));
            row("stop_mode", k, "fpr", fmt_opt(r.fpr));
        }
        for r in &self.multishot {
            row("multishot", r.shots.to_string(), "precision", fmt_opt(r.precision));
            row("multishot", r.shots.to_string(), "recall", fmt_opt(r.recall));
        }
        if let Some(f) = &self.flip {
            row("flip", "all".into(), "member_mean", f.member_mean.to_string());
            row("flip", "all".into(), "nonmember_mean", f.nonmember_mean.to_string());
            row("flip", "all".into(), "never_flipped", f.never_flipped.to_string());
        }
        s
    }
}
