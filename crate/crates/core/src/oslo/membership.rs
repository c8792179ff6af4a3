use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_panel, AdvTrace, AttackConfig, PanelSample, Probes, Surrogates, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::{decision_point, CurvePoint, MetricCurve};
use crate::models::ModelHandle;
use crate::tensor::Tensor;

pub const CALIBRATION_TAU_GRID: [f64; 9] = [0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001];

/// Black-box access to the target: hard labels only, every call counted.
#[derive(Debug)]
pub struct TargetOracle {
    model: Arc<ModelHandle>,
    queries: AtomicU64,
}

impl TargetOracle {
    pub fn new(model: Arc<ModelHandle>) -> Self {
        Self {
            model,
            queries: AtomicU64::new(0),
        }
    }

    /// Predicted label for `x`; increments the query counter.
    pub fn query(&self, x: &Tensor) -> Result<usize> {
        self.queries.fetch_add(1, Ordering::SeqCst);
        self.model.predict_label(x)
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipDecision {
    pub sample_id: usize,
    pub member: bool,
    pub shots: usize,
    pub queries: u64,
}

/// One target query per trace. `per_sample[j]` holds sample j's traces in
/// descending tau order; the last `shots` of them are fed to the target and
/// the sample is a member only if every shot keeps its true label. All
/// shots are always queried, so the count is exactly `shots` per sample.
pub fn infer_membership(
    oracle: &TargetOracle,
    per_sample: &[Vec<AdvTrace>],
    shots: usize,
) -> Result<Vec<MembershipDecision>> {
    if shots == 0 {
        return Err(Error::invalid("shots must be >= 1"));
    }
    per_sample
        .par_iter()
        .map(|traces| {
            let first = traces
                .first()
                .ok_or_else(|| Error::invalid("sample without traces"))?;
            if traces.len() < shots {
                return Err(Error::invalid(format!(
                    "sample {} has {} traces, {shots} shots requested",
                    first.sample_id,
                    traces.len()
                )));
            }
            let mut member = true;
            for t in &traces[traces.len() - shots..] {
                if t.sample_id != first.sample_id {
                    return Err(Error::invalid("traces of different samples grouped together"));
                }
                member &= oracle.query(&t.x_final)? == t.label;
            }
            Ok(MembershipDecision {
                sample_id: first.sample_id,
                member,
                shots,
                queries: shots as u64,
            })
        })
        .collect()
}

/// Single-shot decisions as `(flagged, is_member)` pairs.
pub fn decide(oracle: &TargetOracle, traces: &[AdvTrace]) -> Result<Vec<(bool, bool)>> {
    traces
        .par_iter()
        .map(|t| Ok((oracle.query(&t.x_final)? == t.label, t.is_member)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct TauSweep {
    pub curve: MetricCurve,
    /// `archive[j][s]`: trace of panel sample `s` at `taus[j]`, with
    /// `queries_used` = 1.
    pub archive: Vec<Vec<AdvTrace>>,
    pub decisions: Vec<Vec<(bool, bool)>>,
}

impl TauSweep {
    pub fn point(&self, j: usize) -> &CurvePoint {
        &self.curve.points[j]
    }
}

pub(crate) fn check_decreasing(taus: &[f64]) -> Result<()> {
    if taus.is_empty() {
        return Err(Error::invalid("tau list is empty"));
    }
    if taus.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("tau list must be strictly decreasing"));
    }
    if taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("tau values must lie in [0, 1]"));
    }
    Ok(())
}

/// One trajectory per panel sample watching every tau, then one target
/// query per (sample, tau). Costs `panel.len() * taus.len()` queries.
pub fn sweep_tau(
    panel: &[PanelSample],
    oracle: &TargetOracle,
    sur: &Surrogates,
    cfg: &AttackConfig,
    taus: &[f64],
    seed: u64,
) -> Result<TauSweep> {
    check_decreasing(taus)?;
    let trajectories = run_panel(panel, sur, cfg, &Probes::taus(taus), seed)?;
    sweep_archive(oracle, tau_archive(panel, &trajectories, taus)?)
}

/// Per-tau traces cut from trajectories that watched `taus` (in order).
pub fn tau_archive(panel: &[PanelSample], trajectories: &[Trajectory], taus: &[f64]) -> Result<Vec<Vec<AdvTrace>>> {
    check_decreasing(taus)?;
    if trajectories.len() != panel.len() || trajectories.iter().any(|t| t.tau_hits.len() != taus.len()) {
        return Err(Error::invalid("trajectories do not match the panel and tau list"));
    }
    Ok(taus
        .iter()
        .enumerate()
        .map(|(j, &tau)| {
            panel
                .iter()
                .zip(trajectories)
                .map(|(s, t)| AdvTrace {
                    queries_used: 1,
                    ..AdvTrace::from_snapshot(s, Some(tau), &t.tau_hits[j])
                })
                .collect()
        })
        .collect())
}

/// Queries `oracle` once per archived trace. The archive is
/// target-independent, so the same one can be replayed against any model.
pub fn sweep_archive(oracle: &TargetOracle, archive: Vec<Vec<AdvTrace>>) -> Result<TauSweep> {
    let mut decisions = Vec::with_capacity(archive.len());
    let mut points = Vec::with_capacity(archive.len());
    for traces in &archive {
        let tau = traces.first().and_then(|t| t.tau).unwrap_or(f64::NAN);
        let d = decide(oracle, traces)?;
        points.push(decision_point(tau, &d));
        decisions.push(d);
    }
    Ok(TauSweep {
        curve: MetricCurve { points },
        archive,
        decisions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    /// Set when no grid value reached the target rate.
    pub unachievable: bool,
    /// `(tau, failure rate)` over the grid, largest tau first.
    pub failure_rates: Vec<(f64, f64)>,
}

/// Largest grid tau whose transfer-failure rate (target still predicting
/// the true label) on known non-members is at most `target_fpr`.
pub fn calibrate_tau(
    target_fpr: f64,
    nonmembers: &[PanelSample],
    oracle: &TargetOracle,
    sur: &Surrogates,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Calibration> {
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::invalid("target FPR must lie in [0, 1]"));
    }
    if nonmembers.is_empty() {
        return Err(Error::invalid("calibration set is empty"));
    }
    let sweep = sweep_tau(nonmembers, oracle, sur, cfg, &CALIBRATION_TAU_GRID, seed)?;
    let failure_rates: Vec<(f64, f64)> = sweep
        .curve
        .points
        .iter()
        .map(|p| (p.parameter, p.flagged_fraction))
        .collect();
    let pick = failure_rates.iter().find(|(_, r)| *r <= target_fpr);
    Ok(match pick {
        Some(&(tau, _)) => Calibration {
            tau,
            unachievable: false,
            failure_rates,
        },
        None => Calibration {
            tau: *CALIBRATION_TAU_GRID.last().expect("non-empty grid"),
            unachievable: true,
            failure_rates,
        },
    })
}
