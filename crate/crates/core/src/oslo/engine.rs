use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{aggregate_confidence, AdvTrace, AttackConfig, PanelSample, StopMode, Surrogates, TargetOracle};
use crate::error::{Error, Result};
use crate::rng::mix;
use crate::tensor::Tensor;
use crate::transfer::{effective_gradient, fgsm_step, AttackState};

/// Stopping rules watched during one trajectory. The pass ends once every
/// probe has fired, or after the last stage.
#[derive(Clone, Debug, Default)]
pub struct Probes<'a> {
    /// Thresholds on the aggregated validation confidence.
    pub taus: Vec<f64>,
    /// Fire when every validation model predicts a label other than y.
    pub label_flip: bool,
    /// Fire when the target itself stops predicting y. Queries the target
    /// on the clean input and after every iteration until it fires.
    pub target: Option<&'a TargetOracle>,
}

impl<'a> Probes<'a> {
    pub fn taus(taus: &[f64]) -> Self {
        Self {
            taus: taus.to_vec(),
            ..Self::default()
        }
    }

    fn for_config(cfg: &AttackConfig) -> Self {
        match cfg.stop_mode {
            StopMode::TauThreshold => Self::taus(&[cfg.tau]),
            StopMode::LabelFlip => Self {
                label_flip: true,
                ..Self::default()
            },
        }
    }
}

/// The adversarial example at the moment a probe fired.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub stage: usize,
    pub iteration: usize,
    pub exhausted: bool,
    pub x: Tensor,
    pub linf: f64,
    /// Per validation model softmax confidence of the true label.
    pub confidences: Vec<f64>,
    /// Target queries spent up to this point (target probe only).
    pub queries: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// One snapshot per probe tau, in the order given.
    pub tau_hits: Vec<Snapshot>,
    pub label_flip: Option<Snapshot>,
    pub target_flip: Option<Snapshot>,
    /// Iterations actually run.
    pub iterations: usize,
}

/// Runs the staged attack on one sample until all `probes` have fired.
///
/// Randomness (DI, Admix) is drawn from a generator seeded by
/// `(seed, sample_id)`, so the path does not depend on which probes are
/// watched: a run watching more thresholds passes through exactly the same
/// examples.
pub fn run_trajectory(
    sample: &PanelSample,
    sur: &Surrogates,
    cfg: &AttackConfig,
    probes: &Probes<'_>,
    seed: u64,
) -> Result<Trajectory> {
    cfg.validate()?;
    if sample.label >= sur.source.num_classes() {
        return Err(Error::invalid(format!("label {} out of range", sample.label)));
    }
    let x0 = &sample.image;
    let y = sample.label;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[sample.sample_id as u64]));
    let mut state = AttackState::new(x0.clone(), y);

    let mut tau_hits: Vec<Option<Snapshot>> = vec![None; probes.taus.len()];
    let mut label_flip = None;
    let mut target_flip = None;
    let mut queries = 0u64;

    let snapshot = |x: &Tensor, stage, iteration, exhausted, confidences: &[f64], queries| -> Result<Snapshot> {
        Ok(Snapshot {
            stage,
            iteration,
            exhausted,
            x: x.clone(),
            linf: x.linf_dist(x0)?,
            confidences: confidences.to_vec(),
            queries,
        })
    };

    if let Some(oracle) = probes.target {
        queries += 1;
        if oracle.query(x0)? != y {
            let conf: Vec<f64> = sur.validation.assess(x0, y)?.into_iter().map(|c| c.0).collect();
            target_flip = Some(snapshot(x0, 0, 0, false, &conf, queries)?);
        }
    }
    let done = |tau_hits: &[Option<Snapshot>], lf: &Option<Snapshot>, tf: &Option<Snapshot>| {
        tau_hits.iter().all(Option::is_some)
            && (!probes.label_flip || lf.is_some())
            && (probes.target.is_none() || tf.is_some())
    };

    let mut iterations = 0;
    let mut last_conf = Vec::new();
    'stages: for k in 1..=cfg.k {
        if done(&tau_hits, &label_flip, &target_flip) {
            break;
        }
        let r = cfg.radius(k);
        state.reset_momentum();
        for i in 1..=cfg.n {
            let g = effective_gradient(&sur.source, &mut state, &cfg.methods, &sur.admix_pool, &mut rng)?;
            let stepped = fgsm_step(&state, &g, cfg.alpha)?;
            let clipped = stepped
                .zip_map(x0, |v, o| v.clamp(o - r, o + r))?
                .clamp(0.0, 1.0);
            state.x_current = clipped;
            iterations += 1;

            let assess = sur.validation.assess(&state.x_current, y)?;
            let conf: Vec<f64> = assess.iter().map(|a| a.0).collect();
            let agg = aggregate_confidence(&conf, cfg.validation_rule);
            for (hit, &tau) in tau_hits.iter_mut().zip(&probes.taus) {
                if hit.is_none() && agg < tau {
                    *hit = Some(snapshot(&state.x_current, k, i, false, &conf, 0)?);
                }
            }
            if probes.label_flip && label_flip.is_none() && assess.iter().all(|a| a.1 != y) {
                label_flip = Some(snapshot(&state.x_current, k, i, false, &conf, 0)?);
            }
            if let (Some(oracle), None) = (probes.target, &target_flip) {
                queries += 1;
                if oracle.query(&state.x_current)? != y {
                    target_flip = Some(snapshot(&state.x_current, k, i, false, &conf, queries)?);
                }
            }
            last_conf = conf;
            if done(&tau_hits, &label_flip, &target_flip) {
                break 'stages;
            }
        }
    }

    let exhausted = || snapshot(&state.x_current, cfg.k, cfg.n, true, &last_conf, 0);
    let tau_hits = tau_hits
        .into_iter()
        .map(|h| h.map_or_else(exhausted, Ok))
        .collect::<Result<Vec<_>>>()?;
    let label_flip = if probes.label_flip {
        Some(label_flip.map_or_else(exhausted, Ok)?)
    } else {
        None
    };
    let target_flip = match (probes.target, target_flip) {
        (None, _) => None,
        (Some(_), Some(s)) => Some(s),
        (Some(_), None) => Some(Snapshot {
            queries,
            ..exhausted()?
        }),
    };
    Ok(Trajectory {
        tau_hits,
        label_flip,
        target_flip,
        iterations,
    })
}

/// Transferable adversarial example for one sample under `cfg.stop_mode`.
/// Issues no target queries.
pub fn generate_adversarial(sample: &PanelSample, sur: &Surrogates, cfg: &AttackConfig, seed: u64) -> Result<AdvTrace> {
    let probes = Probes::for_config(cfg);
    let t = run_trajectory(sample, sur, cfg, &probes, seed)?;
    Ok(match cfg.stop_mode {
        StopMode::TauThreshold => AdvTrace::from_snapshot(sample, Some(cfg.tau), &t.tau_hits[0]),
        StopMode::LabelFlip => AdvTrace::from_snapshot(sample, None, t.label_flip.as_ref().expect("probe set")),
    })
}

/// Trajectories for a whole panel, in panel order, computed in parallel.
pub fn run_panel(
    panel: &[PanelSample],
    sur: &Surrogates,
    cfg: &AttackConfig,
    probes: &Probes<'_>,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    panel
        .par_iter()
        .map(|s| run_trajectory(s, sur, cfg, probes, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::data::InputShape;
    use crate::models::{ArchSpec, Family, ModelHandle};
    use crate::oslo::{tests::constant_model, ValidationEnsemble};
    use crate::rng::stage_rng;
    use crate::transfer::{AdmixPool, SourceEnsemble, TransferMethodParams};
    use rand::Rng;

    fn random_model(seed: u64, fam: Family) -> Arc<ModelHandle> {
        let mut rng = stage_rng(seed, "engine-test");
        Arc::new(ModelHandle::init(ArchSpec::new(fam), InputShape::new(1, 8, 8), 4, &mut rng).unwrap())
    }

    fn sample(seed: u64, id: usize) -> PanelSample {
        let mut rng = stage_rng(seed, "engine-sample");
        PanelSample {
            sample_id: id,
            image: Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random::<f64>()).collect()).unwrap(),
            label: id % 4,
            is_member: id % 2 == 0,
        }
    }

    fn random_surrogates(seed: u64) -> Surrogates {
        Surrogates::new(
            SourceEnsemble::new(vec![random_model(seed, Family::CnnA), random_model(seed + 1, Family::Mlp)]).unwrap(),
            ValidationEnsemble::new(vec![random_model(seed + 2, Family::CnnB)]).unwrap(),
            AdmixPool::default(),
        )
        .unwrap()
    }

    fn small_cfg() -> AttackConfig {
        AttackConfig {
            k: 6,
            n: 3,
            alpha: 2.0 / 255.0,
            eps_max: 12.0 / 255.0,
            ..AttackConfig::default()
        }
    }

    #[test]
    fn tau_one_stops_after_first_step() {
        let sur = random_surrogates(1);
        let cfg = AttackConfig { tau: 1.0, ..small_cfg() };
        let t = generate_adversarial(&sample(2, 0), &sur, &cfg, 9).unwrap();
        assert_eq!((t.stop_stage, t.stop_iteration, t.exhausted), (1, 1, false));
        assert!(t.perturbation_linf <= cfg.alpha.min(cfg.eps_max / cfg.k as f64) + 1e-12);
    }

    #[test]
    fn tau_zero_never_stops() {
        let sur = random_surrogates(3);
        let cfg = AttackConfig { tau: 0.0, ..small_cfg() };
        let t = generate_adversarial(&sample(4, 1), &sur, &cfg, 9).unwrap();
        assert!(t.exhausted);
        assert_eq!(t.stop_stage, cfg.k);
        assert!(t.perturbation_linf <= cfg.eps_max + 1e-12);
    }

    #[test]
    fn flat_sources_leave_input_unchanged() {
        let flat = constant_model(&[0.0, 1.0, 0.0, 0.0]);
        let sur = Surrogates::new(
            SourceEnsemble::new(vec![flat.clone()]).unwrap(),
            ValidationEnsemble::new(vec![flat]).unwrap(),
            AdmixPool::default(),
        )
        .unwrap();
        let s = PanelSample {
            sample_id: 0,
            image: Tensor::full(&[1, 4, 4], 0.5),
            label: 1,
            is_member: true,
        };
        let t = generate_adversarial(&s, &sur, &AttackConfig { tau: 0.2, ..small_cfg() }, 0).unwrap();
        assert!(t.exhausted);
        assert_eq!(t.x_final, s.image);
    }

    #[test]
    fn ball_and_box_hold_at_every_stop() {
        let sur = random_surrogates(5);
        let cfg = small_cfg();
        for id in 0..6 {
            let s = sample(10 + id as u64, id);
            let taus = [0.9, 0.5, 0.3, 0.2, 0.1, 0.01, 0.0];
            let t = run_trajectory(&s, &sur, &cfg, &Probes::taus(&taus), 1).unwrap();
            for h in &t.tau_hits {
                assert!(h.linf <= cfg.radius(h.stage) + 1e-12, "{} > radius of stage {}", h.linf, h.stage);
                assert!(h.x.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
            // lower tau never stops earlier
            for w in t.tau_hits.windows(2) {
                assert!((w[0].stage, w[0].iteration) <= (w[1].stage, w[1].iteration) || w[1].exhausted);
            }
        }
    }

    #[test]
    fn single_stop_matches_multi_probe_pass() {
        let sur = random_surrogates(7);
        let mut cfg = small_cfg();
        cfg.methods = TransferMethodParams::default().with(&[
            crate::transfer::TransferMethod::Mi,
            crate::transfer::TransferMethod::Di,
            crate::transfer::TransferMethod::Ti,
        ]);
        let taus = [0.5, 0.25, 0.1];
        for id in 0..4 {
            let s = sample(20 + id as u64, id);
            let multi = run_trajectory(&s, &sur, &cfg, &Probes::taus(&taus), 3).unwrap();
            for (j, &tau) in taus.iter().enumerate() {
                let single = generate_adversarial(&s, &sur, &AttackConfig { tau, ..cfg.clone() }, 3).unwrap();
                assert_eq!(single.x_final, multi.tau_hits[j].x);
                assert_eq!(single.stop_stage, multi.tau_hits[j].stage);
                assert_eq!(single.stop_iteration, multi.tau_hits[j].iteration);
            }
        }
    }

    #[test]
    fn same_seed_same_examples() {
        let sur = random_surrogates(8);
        let mut cfg = small_cfg();
        cfg.methods = TransferMethodParams::default().with(&[crate::transfer::TransferMethod::Di]);
        let s = sample(30, 3);
        let a = generate_adversarial(&s, &sur, &cfg, 5).unwrap();
        let b = generate_adversarial(&s, &sur, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    /// Plain I-FGSM written out directly: mean input gradient over the
    /// source models, signed step, ball and box clip.
    fn direct_ifgsm(x: &Tensor, y: usize, models: &[Arc<ModelHandle>], alpha: f64, eps: f64, steps: usize) -> Tensor {
        let mut cur = x.clone();
        for _ in 0..steps {
            let mut g = vec![0.0; x.len()];
            for m in models {
                let (_, gm) = m.input_gradient(&cur, y).unwrap();
                for (a, b) in g.iter_mut().zip(gm.data()) {
                    *a += b / models.len() as f64;
                }
            }
            let data = cur
                .data()
                .iter()
                .zip(&g)
                .zip(x.data())
                .map(|((&c, &gv), &o)| {
                    let s = if gv > 0.0 { 1.0 } else if gv < 0.0 { -1.0 } else { 0.0 };
                    (c + alpha * s).clamp(o - eps, o + eps).clamp(0.0, 1.0)
                })
                .collect();
            cur = Tensor::new(x.shape().to_vec(), data).unwrap();
        }
        cur
    }

    #[test]
    fn plain_pipeline_is_ifgsm() {
        for case in 0..10u64 {
            let sur = random_surrogates(100 + 3 * case);
            let cfg = AttackConfig {
                k: 1,
                n: 5,
                alpha: 1.5 / 255.0,
                eps_max: 4.0 / 255.0,
                tau: 0.0,
                methods: TransferMethodParams::plain(),
                ..AttackConfig::default()
            };
            let s = sample(200 + case, case as usize);
            let t = generate_adversarial(&s, &sur, &cfg, case).unwrap();
            let direct = direct_ifgsm(&s.image, s.label, sur.source.models(), cfg.alpha, cfg.eps_max, cfg.n);
            for (a, b) in t.x_final.data().iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-12, "case {case}");
            }
        }
    }
}
