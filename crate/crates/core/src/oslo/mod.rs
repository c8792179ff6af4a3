//! One-shot label-only membership inference.
//!
//! A sample's adversarial trajectory grows its allowed L-inf ball in `K`
//! stages of `eps_max / K`, running `N` transfer-attack iterations per stage
//! against the source ensemble. After every iteration the validation
//! ensemble is consulted; once it is fooled strongly enough the current
//! example is handed to the target exactly once. If the target still
//! predicts the true label the sample is called a member.
//!
//! The trajectory only depends on the seed, so one pass can record the
//! stopping point for many thresholds at once ([`Probes`]); a single-stop
//! run is the same pass cut short.

mod engine;
mod membership;

pub use engine::{generate_adversarial, run_panel, run_trajectory, Probes, Snapshot, Trajectory};
pub use membership::{
    calibrate_tau, decide, infer_membership, sweep_archive, sweep_tau, tau_archive, Calibration, MembershipDecision, TargetOracle, TauSweep,
    CALIBRATION_TAU_GRID,
};

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, SplitPlan};
use crate::error::{Error, Result};
use crate::models::ModelHandle;
use crate::tensor::{argmax, softmax, Tensor};
use crate::transfer::{check_ensemble, AdmixPool, SourceEnsemble, TransferMethodParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationRule {
    /// Stop only when every validation model's confidence is below tau
    /// (the aggregate is the maximum).
    AllBelow,
    /// Stop when the mean confidence is below tau.
    MeanBelow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopMode {
    TauThreshold,
    /// Stop once every validation model predicts a label other than y.
    LabelFlip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Number of sub-procedures (stages).
    pub k: usize,
    /// Iterations per stage.
    pub n: usize,
    pub alpha: f64,
    pub eps_max: f64,
    pub tau: f64,
    pub methods: TransferMethodParams,
    pub validation_rule: ValidationRule,
    pub stop_mode: StopMode,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            k: 80,
            n: 10,
            alpha: 1.0 / 255.0,
            eps_max: 80.0 / 255.0,
            tau: 0.01,
            methods: TransferMethodParams::default(),
            validation_rule: ValidationRule::AllBelow,
            stop_mode: StopMode::TauThreshold,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return Err(Error::invalid("attack k and n must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("attack alpha must be > 0"));
        }
        if !(self.eps_max > 0.0 && self.eps_max <= 1.0) {
            return Err(Error::invalid("attack eps_max must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::invalid(format!("attack tau {} outside [0, 1]", self.tau)));
        }
        self.methods.validate()
    }

    /// Allowed L-inf radius in stage `k` (1-based).
    pub fn radius(&self, stage: usize) -> f64 {
        stage as f64 * self.eps_max / self.k as f64
    }
}

/// Models whose confidence in the true label decides when to stop.
#[derive(Clone, Debug)]
pub struct ValidationEnsemble {
    models: Vec<Arc<ModelHandle>>,
}

impl ValidationEnsemble {
    pub fn new(models: Vec<Arc<ModelHandle>>) -> Result<Self> {
        check_ensemble(&models, "validation")?;
        Ok(Self { models })
    }

    pub fn models(&self) -> &[Arc<ModelHandle>] {
        &self.models
    }

    /// Per-model softmax confidence of `y` and predicted label.
    pub fn assess(&self, x: &Tensor, y: usize) -> Result<Vec<(f64, usize)>> {
        self.models
            .iter()
            .map(|m| {
                let logits = m.logits(x)?;
                Ok((softmax(&logits)[y], argmax(&logits)))
            })
            .collect()
    }
}

/// Aggregates per-model confidences under `rule`.
pub fn aggregate_confidence(confidences: &[f64], rule: ValidationRule) -> f64 {
    match rule {
        ValidationRule::AllBelow => confidences.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ValidationRule::MeanBelow => confidences.iter().sum::<f64>() / confidences.len() as f64,
    }
}

/// The value compared against tau: max (all-below) or mean (mean-below) of
/// the validation models' softmax confidence in class `y`.
pub fn validation_confidence(h: &ValidationEnsemble, x: &Tensor, y: usize, rule: ValidationRule) -> Result<f64> {
    let c: Vec<f64> = h.assess(x, y)?.into_iter().map(|(c, _)| c).collect();
    Ok(aggregate_confidence(&c, rule))
}

/// Everything the attacker trains or holds.
#[derive(Clone, Debug)]
pub struct Surrogates {
    pub source: SourceEnsemble,
    pub validation: ValidationEnsemble,
    pub admix_pool: AdmixPool,
}

impl Surrogates {
    pub fn new(source: SourceEnsemble, validation: ValidationEnsemble, admix_pool: AdmixPool) -> Result<Self> {
        if source.num_classes() != validation.models()[0].num_classes {
            return Err(Error::invalid("source and validation ensembles disagree on class count"));
        }
        Ok(Self { source, validation, admix_pool })
    }
}

/// One evaluation sample with its ground-truth membership.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelSample {
    pub sample_id: usize,
    pub image: Tensor,
    pub label: usize,
    pub is_member: bool,
}

/// Members first, then non-members, as laid out by the split plan.
pub fn build_panel(data: &LabeledDataset, plan: &SplitPlan) -> Vec<PanelSample> {
    plan.panel()
        .into_iter()
        .map(|(i, is_member)| PanelSample {
            sample_id: i,
            image: data.samples[i].image.clone(),
            label: data.samples[i].label,
            is_member,
        })
        .collect()
}

/// Samples from `indices`, all tagged non-member.
pub fn nonmember_samples(data: &LabeledDataset, indices: &[usize]) -> Vec<PanelSample> {
    indices
        .iter()
        .map(|&i| PanelSample {
            sample_id: i,
            image: data.samples[i].image.clone(),
            label: data.samples[i].label,
            is_member: false,
        })
        .collect()
}

/// Archived record of one adversarial example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvTrace {
    pub sample_id: usize,
    pub label: usize,
    pub is_member: bool,
    /// Threshold the trace was stopped at, if tau-driven.
    pub tau: Option<f64>,
    pub x_final: Tensor,
    /// 1-based stage; `k` when exhausted, 0 if the clean input already met
    /// the stopping rule (target flip search only).
    pub stop_stage: usize,
    pub stop_iteration: usize,
    pub exhausted: bool,
    pub perturbation_linf: f64,
    pub validation_confidences: Vec<f64>,
    pub queries_used: u64,
}

impl AdvTrace {
    pub fn from_snapshot(sample: &PanelSample, tau: Option<f64>, s: &Snapshot) -> Self {
        Self {
            sample_id: sample.sample_id,
            label: sample.label,
            is_member: sample.is_member,
            tau,
            x_final: s.x.clone(),
            stop_stage: s.stage,
            stop_iteration: s.iteration,
            exhausted: s.exhausted,
            perturbation_linf: s.linf,
            validation_confidences: s.confidences.clone(),
            queries_used: s.queries,
        }
    }
}

/// JSON-lines archive, one trace per line.
pub fn traces_to_jsonl(traces: &[AdvTrace]) -> Result<String> {
    let mut s = String::new();
    for t in traces {
        s.push_str(&serde_json::to_string(t)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn traces_from_jsonl(text: &str) -> Result<Vec<AdvTrace>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::InputShape;
    use crate::models::{ArchSpec, Family};

    /// Zero-weight mlp whose output bias is set by hand, so its logits are
    /// the same constant vector for every input.
    pub(crate) fn constant_model(logits: &[f64]) -> Arc<ModelHandle> {
        let mut m = ModelHandle::zeroed(ArchSpec::new(Family::Mlp), InputShape::new(1, 4, 4), logits.len());
        let last = m.weights.len() - 1;
        m.weights[last] = Tensor::vector(logits.to_vec());
        Arc::new(m)
    }

    #[test]
    fn confidence_examples() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let uniform = ValidationEnsemble::new(vec![constant_model(&[0.0; 10])]).unwrap();
        let c = validation_confidence(&uniform, &x, 3, ValidationRule::AllBelow).unwrap();
        assert!((c - 0.1).abs() < 1e-15);

        let mut l = [0.0; 10];
        l[2] = 5.0;
        let peaked = ValidationEnsemble::new(vec![constant_model(&l)]).unwrap();
        let c = validation_confidence(&peaked, &x, 2, ValidationRule::AllBelow).unwrap();
        let e5 = 5f64.exp();
        assert!((c - e5 / (e5 + 9.0)).abs() < 1e-15);
    }

    #[test]
    fn all_below_takes_max() {
        assert_eq!(aggregate_confidence(&[0.05, 0.30], ValidationRule::AllBelow), 0.30);
        assert!((aggregate_confidence(&[0.05, 0.30], ValidationRule::MeanBelow) - 0.175).abs() < 1e-15);
    }

    #[test]
    fn config_ranges() {
        assert!(AttackConfig::default().validate().is_ok());
        assert!(AttackConfig { tau: 1.5, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { eps_max: 0.0, ..Default::default() }.validate().is_err());
        assert!(AttackConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
        let c = AttackConfig::default();
        assert!((c.radius(1) - 1.0 / 255.0).abs() < 1e-15);
        assert!((c.radius(80) - 80.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn empty_validation_rejected() {
        assert!(ValidationEnsemble::new(vec![]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let t = AdvTrace {
            sample_id: 4,
            label: 1,
            is_member: true,
            tau: Some(0.1),
            x_final: Tensor::new(vec![1, 1, 2], vec![0.25, 0.5]).unwrap(),
            stop_stage: 3,
            stop_iteration: 7,
            exhausted: false,
            perturbation_linf: 0.01,
            validation_confidences: vec![0.05],
            queries_used: 1,
        };
        let text = traces_to_jsonl(&[t.clone(), t.clone()]).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"perturbation_linf\""));
        assert_eq!(traces_from_jsonl(&text).unwrap(), vec![t.clone(), t]);
    }
}
