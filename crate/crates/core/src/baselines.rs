//! Label-only baselines: Gaussian-noise boundary distance, augmentation
//! robustness, a shadow model trained on target-relabelled data, and a
//! single global threshold on perturbation magnitude.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Augmentation, LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::metrics::{ScoredEntry, ScoredPanel};
use crate::models::{train, ArchSpec, Family, ModelHandle, TrainConfig};
use crate::oslo::{AdvTrace, MembershipDecision, PanelSample, TargetOracle};
use crate::rng::mix;
use crate::tensor::{softmax, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianConfig {
    pub sigma_grid: Vec<f64>,
    pub trials_per_sigma: usize,
    pub query_budget: usize,
}

impl Default for GaussianConfig {
    fn default() -> Self {
        Self {
            sigma_grid: (1..=25).map(|i| 0.02 * i as f64).collect(),
            trials_per_sigma: 5,
            query_budget: 700,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub rotations: Vec<f64>,
    pub translations: Vec<(i64, i64)>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rotations: vec![-10.0, -5.0, 5.0, 10.0],
            translations: vec![(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1)],
        }
    }
}

impl AugmentationConfig {
    pub fn variants(&self) -> Vec<Augmentation> {
        self.rotations
            .iter()
            .map(|&r| Augmentation::Rotate(r))
            .chain(self.translations.iter().map(|&(dx, dy)| Augmentation::Translate(dx, dy)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadowConfig {
    pub family: Family,
    pub relabel_budget: usize,
    pub train: TrainConfig,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self {
            family: Family::CnnB,
            relabel_budget: 1000,
            train: TrainConfig {
                learning_rate: 5e-3,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub gaussian: GaussianConfig,
    pub augmentation: AugmentationConfig,
    pub shadow: ShadowConfig,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let g = &self.gaussian;
        if g.sigma_grid.is_empty() || g.trials_per_sigma == 0 || g.query_budget == 0 {
            return Err(Error::invalid("gaussian grid must be non-empty and counts >= 1"));
        }
        if g.sigma_grid.windows(2).any(|w| w[1] <= w[0]) || g.sigma_grid[0] < 0.0 {
            return Err(Error::invalid("gaussian sigma_grid must be increasing and >= 0"));
        }
        if self.augmentation.variants().is_empty() {
            return Err(Error::invalid("augmentation grid is empty"));
        }
        if self.shadow.relabel_budget == 0 {
            return Err(Error::invalid("shadow relabel_budget must be >= 1"));
        }
        self.shadow.train.validate()
    }
}

/// Per-sample baseline output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub sample_id: usize,
    pub score: f64,
    pub is_member: bool,
    pub queries: u64,
    /// Gaussian only: the budget ran out before the grid finished.
    pub budget_exhausted: bool,
}

/// Smallest sigma at which a majority of noisy copies change the target's
/// label; `sigma_max` if none does. Returns `(score, queries, exhausted)`.
pub fn gaussian_boundary_score(
    f: &TargetOracle,
    x: &Tensor,
    y: usize,
    cfg: &GaussianConfig,
    seed: u64,
) -> Result<(f64, u64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries = 0u64;
    let mut completed = None;
    for &sigma in &cfg.sigma_grid {
        if queries + cfg.trials_per_sigma as u64 > cfg.query_budget as u64 {
            let score = completed.unwrap_or(cfg.sigma_grid[0]);
            return Ok((score, queries, true));
        }
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut flips = 0;
        for _ in 0..cfg.trials_per_sigma {
            let data = x.data().iter().map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)).collect();
            let noisy = Tensor::new(x.shape().to_vec(), data)?;
            queries += 1;
            if f.query(&noisy)? != y {
                flips += 1;
            }
        }
        if 2 * flips > cfg.trials_per_sigma {
            return Ok((sigma, queries, false));
        }
        completed = Some(sigma);
    }
    Ok((*cfg.sigma_grid.last().expect("non-empty grid"), queries, false))
}

/// Number of augmented variants the target still labels `y`.
pub fn augmentation_attack_score(f: &TargetOracle, x: &Tensor, y: usize, cfg: &AugmentationConfig) -> Result<(usize, u64)> {
    let variants = cfg.variants();
    let mut kept = 0;
    for v in &variants {
        if f.query(&augment(x, *v))? == y {
            kept += 1;
        }
    }
    Ok((kept, variants.len() as u64))
}

pub fn gaussian_scores(f: &TargetOracle, panel: &[PanelSample], cfg: &GaussianConfig, seed: u64) -> Result<Vec<BaselineScore>> {
    panel
        .par_iter()
        .map(|s| {
            let (score, queries, exhausted) =
                gaussian_boundary_score(f, &s.image, s.label, cfg, mix(seed, &[s.sample_id as u64]))?;
            Ok(BaselineScore {
                sample_id: s.sample_id,
                score,
                is_member: s.is_member,
                queries,
                budget_exhausted: exhausted,
            })
        })
        .collect()
}

pub fn augmentation_scores(f: &TargetOracle, panel: &[PanelSample], cfg: &AugmentationConfig) -> Result<Vec<BaselineScore>> {
    panel
        .par_iter()
        .map(|s| {
            let (kept, queries) = augmentation_attack_score(f, &s.image, s.label, cfg)?;
            Ok(BaselineScore {
                sample_id: s.sample_id,
                score: kept as f64,
                is_member: s.is_member,
                queries,
                budget_exhausted: false,
            })
        })
        .collect()
}

/// Scores from an already trained shadow model: its softmax confidence in
/// each panel sample's true label. No target queries.
pub fn shadow_model_scores(shadow: &ModelHandle, panel: &[PanelSample]) -> Result<Vec<BaselineScore>> {
    panel
        .par_iter()
        .map(|s| {
            Ok(BaselineScore {
                sample_id: s.sample_id,
                score: softmax(&shadow.logits(&s.image)?)[s.label],
                is_member: s.is_member,
                queries: 0,
                budget_exhausted: false,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ShadowResult {
    /// Panel scores; their `queries` are 0 since scoring uses the shadow.
    pub scores: Vec<BaselineScore>,
    pub model: ModelHandle,
    /// One per relabelled shadow sample.
    pub relabel_queries: u64,
}

/// Relabels `shadow_data` with one target query per sample, trains a shadow
/// model of `cfg.family` on it and scores the panel with it.
pub fn shadow_transfer_scores(
    f: &TargetOracle,
    shadow_data: &LabeledDataset,
    cfg: &ShadowConfig,
    panel: &[PanelSample],
) -> Result<ShadowResult> {
    if shadow_data.is_empty() {
        return Err(Error::invalid("shadow dataset is empty"));
    }
    if shadow_data.len() > cfg.relabel_budget {
        return Err(Error::Budget(format!(
            "shadow dataset has {} samples but the relabel budget is {}",
            shadow_data.len(),
            cfg.relabel_budget
        )));
    }
    let labels: Vec<usize> = shadow_data
        .samples
        .par_iter()
        .map(|s| f.query(&s.image))
        .collect::<Result<_>>()?;
    let relabelled = LabeledDataset::new(
        format!("{}-relabelled", shadow_data.name),
        shadow_data.num_classes.max(f.num_classes()),
        shadow_data.input,
        shadow_data
            .samples
            .iter()
            .zip(labels)
            .map(|(s, label)| Sample {
                image: s.image.clone(),
                label,
            })
            .collect(),
    )?;
    let model = train(ArchSpec::new(cfg.family), &relabelled, &cfg.train)?;
    Ok(ShadowResult {
        scores: shadow_model_scores(&model, panel)?,
        model,
        relabel_queries: shadow_data.len() as u64,
    })
}

/// Member iff the trace's perturbation magnitude is at least `threshold`.
pub fn global_threshold_decisions(traces: &[AdvTrace], threshold: f64) -> Vec<MembershipDecision> {
    traces
        .iter()
        .map(|t| MembershipDecision {
            sample_id: t.sample_id,
            member: t.perturbation_linf >= threshold,
            shots: 0,
            queries: 0,
        })
        .collect()
}

/// Perturbation magnitudes as scores, for threshold sweeps.
pub fn magnitude_panel(traces: &[AdvTrace]) -> ScoredPanel {
    ScoredPanel::new(
        traces
            .iter()
            .map(|t| ScoredEntry {
                sample_id: t.sample_id,
                score: t.perturbation_linf,
                is_member: t.is_member,
            })
            .collect(),
    )
}

pub fn scores_panel(rows: &[BaselineScore]) -> ScoredPanel {
    ScoredPanel::new(
        rows.iter()
            .map(|r| ScoredEntry {
                sample_id: r.sample_id,
                score: r.score,
                is_member: r.is_member,
            })
            .collect(),
    )
}

/// CSV `sample_id,score,is_member,queries`.
pub fn scores_csv(rows: &[BaselineScore]) -> String {
    let mut s = String::from("sample_id,score,is_member,queries\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.sample_id, r.score, r.is_member, r.queries));
    }
    s
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::InputShape;

    fn constant_oracle(label: usize, classes: usize) -> TargetOracle {
        let mut logits = vec![0.0; classes];
        logits[label] = 3.0;
        let mut m = ModelHandle::zeroed(ArchSpec::new(Family::Mlp), InputShape::new(1, 4, 4), classes);
        let last = m.weights.len() - 1;
        m.weights[last] = Tensor::vector(logits);
        TargetOracle::new(Arc::new(m))
    }

    #[test]
    fn gaussian_constant_classifiers() {
        let cfg = GaussianConfig::default();
        let x = Tensor::full(&[1, 4, 4], 0.5);
        let keep = constant_oracle(2, 4);
        let (s, q, ex) = gaussian_boundary_score(&keep, &x, 2, &cfg, 1).unwrap();
        assert_eq!(s, *cfg.sigma_grid.last().unwrap());
        assert_eq!(q as usize, cfg.sigma_grid.len() * cfg.trials_per_sigma);
        assert!(!ex);
        let wrong = constant_oracle(1, 4);
        let (s, q, _) = gaussian_boundary_score(&wrong, &x, 2, &cfg, 1).unwrap();
        assert_eq!((s, q), (cfg.sigma_grid[0], cfg.trials_per_sigma as u64));
    }

    #[test]
    fn gaussian_respects_budget() {
        let cfg = GaussianConfig {
            query_budget: 12,
            ..GaussianConfig::default()
        };
        let x = Tensor::full(&[1, 4, 4], 0.5);
        let f = constant_oracle(0, 3);
        let (s, q, ex) = gaussian_boundary_score(&f, &x, 0, &cfg, 3).unwrap();
        assert!(ex);
        assert_eq!(q, 10);
        assert_eq!(s, cfg.sigma_grid[1]);
        assert_eq!(f.queries(), 10);
    }

    #[test]
    fn augmentation_examples() {
        let x = Tensor::full(&[1, 4, 4], 0.3);
        let identity = AugmentationConfig {
            rotations: vec![0.0],
            translations: vec![],
        };
        assert_eq!(augmentation_attack_score(&constant_oracle(1, 3), &x, 1, &identity).unwrap(), (1, 1));
        assert_eq!(augmentation_attack_score(&constant_oracle(0, 3), &x, 1, &identity).unwrap(), (0, 1));
        let full = AugmentationConfig::default();
        let n = full.variants().len();
        assert_eq!(augmentation_attack_score(&constant_oracle(1, 3), &x, 1, &full).unwrap(), (n, n as u64));
    }

    #[test]
    fn shadow_empty_and_over_budget_rejected() {
        let f = constant_oracle(0, 2);
        let empty = LabeledDataset::new("e", 2, InputShape::new(1, 4, 4), vec![]).unwrap();
        assert!(shadow_transfer_scores(&f, &empty, &ShadowConfig::default(), &[]).is_err());
        let one = LabeledDataset::new(
            "one",
            2,
            InputShape::new(1, 4, 4),
            vec![
                Sample { image: Tensor::zeros(&[1, 4, 4]), label: 0 },
                Sample { image: Tensor::zeros(&[1, 4, 4]), label: 1 },
            ],
        )
        .unwrap();
        let cfg = ShadowConfig {
            relabel_budget: 1,
            ..ShadowConfig::default()
        };
        assert!(matches!(shadow_transfer_scores(&f, &one, &cfg, &[]), Err(Error::Budget(_))));
        assert_eq!(f.queries(), 0);
    }

    #[test]
    fn global_threshold_extremes() {
        let t = |linf: f64, m: bool| AdvTrace {
            sample_id: 0,
            label: 0,
            is_member: m,
            tau: None,
            x_final: Tensor::zeros(&[1]),
            stop_stage: 1,
            stop_iteration: 1,
            exhausted: false,
            perturbation_linf: linf,
            validation_confidences: vec![],
            queries_used: 0,
        };
        let traces = vec![t(0.1, true), t(0.3, false), t(0.2, true)];
        assert!(global_threshold_decisions(&traces, 0.0).iter().all(|d| d.member));
        assert!(global_threshold_decisions(&traces, 0.31).iter().all(|d| !d.member));
    }
}
