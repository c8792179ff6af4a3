use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, ExperimentConfig};
use super::svg::roc_svg;
use crate::analysis::{
    calibrate_large_eps, flip_study, matched_fraction_comparison, multishot_study, stop_mode_rows,
    uniform_budget_ablation, ComparisonReport, ShotRow,
};
use crate::baselines::{
    augmentation_scores, gaussian_scores, magnitude_panel, scores_csv, scores_panel, shadow_transfer_scores,
    BaselineScore,
};
use crate::data::{export_idx, load_idx_dir, make_split, synth_dataset, LabeledDataset, SplitPlan};
use crate::defenses::{defense_csv, train_defended, DefenseRow};
use crate::error::{Error, Result};
use crate::metrics::{perturbation_cdf, query_report, roc_points, MetricCurve, QueryRecord};
use crate::models::{encode_model, load_model, save_model, train, ModelHandle, TrainConfig};
use crate::oslo::{
    build_panel, decide, nonmember_samples, run_panel, sweep_archive, tau_archive, traces_from_jsonl,
    traces_to_jsonl, AdvTrace, MembershipDecision, PanelSample, Probes, Surrogates, TargetOracle,
    ValidationEnsemble,
};
use crate::rng::{mix, stage_seed};
use crate::transfer::{AdmixPool, SourceEnsemble};

/// Output file with its checksum at the time it was written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub wall_seconds: f64,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    /// Derived seed per named stage.
    pub stage_seeds: BTreeMap<String, u64>,
    /// SHA-256 of every saved model file.
    pub model_checksums: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    /// Keyed by path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
    pub failure: Option<StageRecord>,
}

impl RunManifest {
    pub fn artifact_list(&self) -> Vec<ArtifactRecord> {
        self.artifacts
            .iter()
            .map(|(p, s)| ArtifactRecord {
                path: p.clone(),
                sha256: s.clone(),
            })
            .collect()
    }

    /// Re-reads every listed artifact and compares checksums.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (rel, sum) in &self.artifacts {
            let bytes = std::fs::read(root.join(rel)).map_err(|_| Error::MissingArtifact(root.join(rel)))?;
            if hex(&Sha256::digest(&bytes)) != *sum {
                return Err(Error::Checksum(rel.clone()));
            }
        }
        Ok(())
    }
}

/// Per-attack entry of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub tpr_at_fpr_0001: f64,
    pub tpr_at_fpr_001: f64,
    pub max_precision_recall_ge_001: Option<f64>,
    pub queries: u64,
}

impl AttackMetrics {
    fn from_curve(curve: &MetricCurve, queries: u64) -> Self {
        Self {
            tpr_at_fpr_0001: curve.tpr_at_fpr(0.001),
            tpr_at_fpr_001: curve.tpr_at_fpr(0.01),
            max_precision_recall_ge_001: curve.max_precision_at_recall(0.01),
            queries,
        }
    }
}

/// `timings` holds deterministic work counts (trajectory iterations, target
/// queries); wall-clock seconds live in the manifest so the summary stays
/// byte-reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub metrics: BTreeMap<String, AttackMetrics>,
    pub timings: BTreeMap<String, u64>,
}

/// Everything the attacker and defender train.
#[derive(Clone, Debug)]
pub struct TrainedModels {
    pub target: Arc<ModelHandle>,
    pub sources: Vec<Arc<ModelHandle>>,
    pub validations: Vec<Arc<ModelHandle>>,
}

/// Output of the OSLO attack stage.
#[derive(Clone, Debug)]
pub struct OsloRun {
    pub taus: Vec<f64>,
    /// `archive[j][s]`: panel sample `s` stopped at `taus[j]`.
    pub archive: Vec<Vec<AdvTrace>>,
    pub label_flip: Vec<AdvTrace>,
    /// Target-side flip search, when enabled.
    pub target_flip: Option<Vec<AdvTrace>>,
    pub single_shot: Vec<MembershipDecision>,
    pub multishot: Vec<ShotRow>,
    pub iterations: u64,
}

/// One experiment's output directory and the stages that fill it. Each
/// stage reads what earlier stages wrote, so they can run as separate
/// processes.
pub struct Lab {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub manifest: RunManifest,
}

const DATA_IMAGES: &str = "data/images.idx";
const DATA_LABELS: &str = "data/labels.idx";
const SPLIT: &str = "data/split.json";
const ARCHIVE: &str = "attack/oslo_archive.jsonl";
const LABEL_FLIP: &str = "attack/label_flip.jsonl";
const TARGET_FLIP: &str = "attack/target_flip.jsonl";
const SINGLE_SHOT: &str = "attack/oslo_decisions.json";
const MULTISHOT: &str = "attack/multishot.json";
const ATTACK_STATS: &str = "attack/stats.json";
const QUERIES: &str = "queries.json";
const SWEEP: &str = "eval/oslo_sweep.json";
const DEFENSES: &str = "defenses/defense.csv";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct AttackStats {
    iterations: u64,
    label_flip_decisions: Vec<(bool, bool)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SweepRecord {
    taus: Vec<f64>,
    curve: MetricCurve,
    decisions: Vec<Vec<(bool, bool)>>,
}

/// Names accepted by `attack baseline`.
pub const BASELINES: [&str; 4] = ["gaussian", "augmentation", "shadow", "global-threshold"];

impl Lab {
    /// Opens `cfg.out_dir`, keeping an existing manifest only if it was
    /// written for the same configuration.
    pub fn open(cfg: ExperimentConfig) -> Result<Self> {
        let root = cfg.out_dir.clone();
        std::fs::create_dir_all(&root)?;
        let hash = cfg.hash();
        let manifest = match std::fs::read_to_string(root.join("manifest.json")) {
            Ok(text) => match serde_json::from_str::<RunManifest>(&text) {
                Ok(m) if m.config_hash == hash => m,
                _ => RunManifest::default(),
            },
            Err(_) => RunManifest::default(),
        };
        let mut lab = Self { cfg, root, manifest };
        lab.manifest.config_hash = hash;
        lab.manifest.seed = lab.cfg.seed;
        lab.manifest.failure = None;
        lab.write("config.toml", lab.cfg.to_toml().as_bytes())?;
        Ok(lab)
    }

    fn seed(&mut self, stage: &str) -> u64 {
        let s = stage_seed(self.cfg.seed, stage);
        self.manifest.stage_seeds.insert(stage.to_string(), s);
        s
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&p, bytes)?;
        self.manifest.artifacts.insert(rel.to_string(), hex(&Sha256::digest(bytes)));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.write(rel, s.as_bytes())
    }

    fn read(&self, rel: &str) -> Result<String> {
        std::fs::read_to_string(self.path(rel)).map_err(|_| Error::MissingArtifact(self.path(rel)))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T> {
        Ok(serde_json::from_str(&self.read(rel)?)?)
    }

    pub fn save_manifest(&self) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&self.manifest)?;
        s.push('\n');
        std::fs::write(self.path("manifest.json"), s)?;
        Ok(())
    }

    /// Runs `f` as a named stage, recording wall time or the failure.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = f(self);
        let rec = StageRecord {
            stage: name.to_string(),
            wall_seconds: t.elapsed().as_secs_f64(),
            ok: out.is_ok(),
            error: out.as_ref().err().map(|e| e.to_string()),
        };
        self.manifest.stages.retain(|s| s.stage != name);
        self.manifest.stages.push(rec.clone());
        if !rec.ok {
            self.manifest.failure = Some(rec);
        }
        self.save_manifest()?;
        out
    }

    // ---- data ----

    pub fn gen_data(&mut self) -> Result<(LabeledDataset, SplitPlan)> {
        let data = match self.cfg.dataset.idx_dir.clone() {
            Some(dir) => load_idx_dir(&dir)?,
            None => {
                let s = self.seed("data");
                synth_dataset(&self.cfg.dataset.synth, s)?
            }
        };
        let s = self.seed("split");
        let plan = make_split(data.len(), self.cfg.split, s)?;
        plan.check()?;
        let (img, lab) = (self.path(DATA_IMAGES), self.path(DATA_LABELS));
        std::fs::create_dir_all(img.parent().expect("has parent"))?;
        export_idx(&data, &img, &lab)?;
        for rel in [DATA_IMAGES, DATA_LABELS] {
            let bytes = std::fs::read(self.path(rel))?;
            self.manifest.artifacts.insert(rel.into(), hex(&Sha256::digest(&bytes)));
        }
        self.write_json(SPLIT, &plan)?;
        // reload so every later stage sees the 8-bit rounded pixels
        let data = load_idx_dir(&self.path("data"))?;
        Ok((data, plan))
    }

    pub fn load_data(&self) -> Result<(LabeledDataset, SplitPlan)> {
        let plan: SplitPlan = self.read_json(SPLIT)?;
        if !self.path(DATA_IMAGES).exists() {
            return Err(Error::MissingArtifact(self.path(DATA_IMAGES)));
        }
        let data = load_idx_dir(&self.path("data"))?;
        plan.check()?;
        Ok((data, plan))
    }

    // ---- models ----

    fn model_names(&self) -> Vec<(String, crate::models::ArchSpec, bool)> {
        let mut v = vec![("target".to_string(), self.cfg.target.arch(), false)];
        for (i, a) in self.cfg.source.archs().into_iter().enumerate() {
            v.push((format!("source-{i}-{}", a.family), a, true));
        }
        for (i, a) in self.cfg.validation.archs().into_iter().enumerate() {
            v.push((format!("validation-{i}-{}", a.family), a, true));
        }
        v
    }

    fn save_model(&mut self, name: &str, m: &ModelHandle) -> Result<()> {
        let rel = format!("models/{name}.bin");
        let p = self.path(&rel);
        std::fs::create_dir_all(p.parent().expect("has parent"))?;
        save_model(m, &p)?;
        let sum = hex(&Sha256::digest(encode_model(m)));
        self.manifest.model_checksums.insert(name.to_string(), sum.clone());
        self.manifest.artifacts.insert(rel, sum);
        Ok(())
    }

    fn train_cfg(&mut self, stage: &str, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: mix(self.seed(stage), &[base.seed]),
            ..base.clone()
        }
    }

    pub fn train_models(&mut self, data: &LabeledDataset, plan: &SplitPlan) -> Result<TrainedModels> {
        let target_set = data.subset(&plan.target_train);
        let surrogate_set = data.subset(&plan.surrogate_train);
        let mut models = Vec::new();
        for (name, arch, attacker) in self.model_names() {
            let (set, base) = if attacker {
                (&surrogate_set, self.cfg.surrogate_train.clone())
            } else {
                (&target_set, self.cfg.target.train.clone())
            };
            let tc = self.train_cfg(&format!("train/{name}"), &base);
            let m = train(arch, set, &tc)?;
            self.save_model(&name, &m)?;
            models.push(Arc::new(m));
        }
        Ok(self.split_models(models))
    }

    fn split_models(&self, mut models: Vec<Arc<ModelHandle>>) -> TrainedModels {
        let validations = models.split_off(1 + self.cfg.source.archs().len());
        let sources = models.split_off(1);
        TrainedModels {
            target: models.pop().expect("target first"),
            sources,
            validations,
        }
    }

    pub fn load_models(&self) -> Result<TrainedModels> {
        let models = self
            .model_names()
            .into_iter()
            .map(|(name, _, _)| {
                let p = self.path(&format!("models/{name}.bin"));
                if !p.exists() {
                    return Err(Error::MissingArtifact(p));
                }
                Ok(Arc::new(load_model(&p)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.split_models(models))
    }

    fn surrogates(&self, data: &LabeledDataset, plan: &SplitPlan, m: &TrainedModels) -> Result<Surrogates> {
        let pool = AdmixPool::new(
            plan.surrogate_train
                .iter()
                .map(|&i| (data.samples[i].image.clone(), data.samples[i].label))
                .collect(),
        );
        Surrogates::new(
            SourceEnsemble::new(m.sources.clone())?,
            ValidationEnsemble::new(m.validations.clone())?,
            pool,
        )
    }

    // ---- attacks ----

    fn record_queries(&mut self, rec: QueryRecord) -> Result<()> {
        let mut all: BTreeMap<String, QueryRecord> = self.read_json(QUERIES).unwrap_or_default();
        query_report(std::slice::from_ref(&rec))?;
        all.insert(rec.attack.clone(), rec);
        self.write_json(QUERIES, &all)
    }

    pub fn attack_oslo(&mut self, data: &LabeledDataset, plan: &SplitPlan, m: &TrainedModels) -> Result<OsloRun> {
        let sur = self.surrogates(data, plan, m)?;
        let panel = build_panel(data, plan);
        let n = panel.len() as u64;
        let taus = self.cfg.sweep_taus();
        let flip = TargetOracle::new(m.target.clone());
        let probes = Probes {
            taus: taus.clone(),
            label_flip: true,
            target: self.cfg.evaluation.flip_search.then_some(&flip),
        };
        let seed = self.seed("attack/oslo");
        let trajectories = run_panel(&panel, &sur, &self.cfg.attack, &probes, seed)?;
        let iterations: u64 = trajectories.iter().map(|t| t.iterations as u64).sum();
        let archive = tau_archive(&panel, &trajectories, &taus)?;
        let label_flip: Vec<AdvTrace> = panel
            .iter()
            .zip(&trajectories)
            .map(|(s, t)| AdvTrace {
                queries_used: 1,
                ..AdvTrace::from_snapshot(s, None, t.label_flip.as_ref().expect("probe set"))
            })
            .collect();
        let target_flip: Option<Vec<AdvTrace>> = self.cfg.evaluation.flip_search.then(|| {
            panel
                .iter()
                .zip(&trajectories)
                .map(|(s, t)| AdvTrace::from_snapshot(s, None, t.target_flip.as_ref().expect("probe set")))
                .collect()
        });

        // single shot at the configured tau: one query per sample
        let j = taus.iter().position(|t| *t == self.cfg.attack.tau).expect("attack tau merged in");
        let oracle = TargetOracle::new(m.target.clone());
        let single: Vec<MembershipDecision> = decide(&oracle, &archive[j])?
            .iter()
            .zip(&archive[j])
            .map(|(d, t)| MembershipDecision {
                sample_id: t.sample_id,
                member: d.0,
                shots: 1,
                queries: 1,
            })
            .collect();
        self.record_queries(QueryRecord {
            attack: "oslo".into(),
            per_sample: single.iter().map(|d| d.queries).collect(),
            audited: oracle.queries(),
            expected: Some(n),
            bound: None,
        })?;

        let lf_oracle = TargetOracle::new(m.target.clone());
        let lf_decisions = decide(&lf_oracle, &label_flip)?;
        self.record_queries(QueryRecord {
            attack: "oslo-label-flip".into(),
            per_sample: vec![1; panel.len()],
            audited: lf_oracle.queries(),
            expected: Some(n),
            bound: None,
        })?;

        let ms_oracle = TargetOracle::new(m.target.clone());
        let s = self.cfg.evaluation.max_shots;
        let multishot = multishot_study(&ms_oracle, &archive, s)?;
        self.record_queries(QueryRecord {
            attack: "oslo-multishot".into(),
            per_sample: multishot.iter().map(|r| r.queries).collect(),
            audited: ms_oracle.queries(),
            expected: Some(n * (s * (s + 1) / 2) as u64),
            bound: None,
        })?;

        if let Some(tf) = &target_flip {
            self.record_queries(QueryRecord {
                attack: "global-threshold".into(),
                per_sample: tf.iter().map(|t| t.queries_used).collect(),
                audited: flip.queries(),
                expected: None,
                bound: Some(n * (self.cfg.attack.k * self.cfg.attack.n + 1) as u64),
            })?;
            self.write(TARGET_FLIP, traces_to_jsonl(tf)?.as_bytes())?;
        }
        let flat: Vec<AdvTrace> = archive.iter().flatten().cloned().collect();
        self.write(ARCHIVE, traces_to_jsonl(&flat)?.as_bytes())?;
        self.write(LABEL_FLIP, traces_to_jsonl(&label_flip)?.as_bytes())?;
        self.write_json(SINGLE_SHOT, &single)?;
        self.write_json(MULTISHOT, &multishot)?;
        self.write_json(
            ATTACK_STATS,
            &AttackStats {
                iterations,
                label_flip_decisions: lf_decisions,
            },
        )?;
        Ok(OsloRun {
            taus,
            archive,
            label_flip,
            target_flip,
            single_shot: single,
            multishot,
            iterations,
        })
    }

    fn load_archive(&self) -> Result<Vec<Vec<AdvTrace>>> {
        let flat = traces_from_jsonl(&self.read(ARCHIVE)?)?;
        let taus = self.cfg.sweep_taus();
        if flat.len() % taus.len() != 0 {
            return Err(Error::Format("archive size is not a multiple of the tau count".into()));
        }
        let n = flat.len() / taus.len();
        let archive: Vec<Vec<AdvTrace>> = flat.chunks(n).map(|c| c.to_vec()).collect();
        if archive.iter().zip(&taus).any(|(lvl, t)| lvl.iter().any(|x| x.tau != Some(*t))) {
            return Err(Error::Format("archive taus disagree with the configuration".into()));
        }
        Ok(archive)
    }

    /// Replays the archived tau levels against the target: one query per
    /// sample and tau.
    pub fn sweep_tau(&mut self, target: &Arc<ModelHandle>) -> Result<MetricCurve> {
        let archive = self.load_archive()?;
        let oracle = TargetOracle::new(target.clone());
        let sweep = sweep_archive(&oracle, archive)?;
        let n: usize = sweep.archive.iter().map(|l| l.len()).sum();
        self.record_queries(QueryRecord {
            attack: "oslo-sweep".into(),
            per_sample: vec![1; n],
            audited: oracle.queries(),
            expected: Some(n as u64),
            bound: None,
        })?;
        self.write("eval/oslo_tau_curve.csv", sweep.curve.to_csv("tau").as_bytes())?;
        self.write_json(
            SWEEP,
            &SweepRecord {
                taus: self.cfg.sweep_taus(),
                curve: sweep.curve.clone(),
                decisions: sweep.decisions,
            },
        )?;
        Ok(sweep.curve)
    }

    pub fn attack_baseline(
        &mut self,
        name: &str,
        data: &LabeledDataset,
        plan: &SplitPlan,
        target: &Arc<ModelHandle>,
    ) -> Result<Vec<BaselineScore>> {
        let panel = build_panel(data, plan);
        let n = panel.len() as u64;
        let oracle = TargetOracle::new(target.clone());
        let bc = self.cfg.baselines.clone();
        let (scores, rec) = match name {
            "gaussian" => {
                let seed = self.seed("baseline/gaussian");
                let s = gaussian_scores(&oracle, &panel, &bc.gaussian, seed)?;
                let per: Vec<u64> = s.iter().map(|r| r.queries).collect();
                (s, (per, None, Some(n * bc.gaussian.query_budget as u64)))
            }
            "augmentation" => {
                let s = augmentation_scores(&oracle, &panel, &bc.augmentation)?;
                let per: Vec<u64> = s.iter().map(|r| r.queries).collect();
                (s, (per, Some(n * bc.augmentation.variants().len() as u64), None))
            }
            "shadow" => {
                let shadow_set = data.subset(&plan.surrogate_train);
                let mut sc = bc.shadow.clone();
                sc.train = self.train_cfg("baseline/shadow", &sc.train);
                let r = shadow_transfer_scores(&oracle, &shadow_set, &sc, &panel)?;
                self.save_model("shadow", &r.model)?;
                let per = vec![1; shadow_set.len()];
                (r.scores, (per, Some(r.relabel_queries), None))
            }
            "global-threshold" => {
                let traces = traces_from_jsonl(&self.read(TARGET_FLIP)?)?;
                let s: Vec<BaselineScore> = traces
                    .iter()
                    .map(|t| BaselineScore {
                        sample_id: t.sample_id,
                        score: t.perturbation_linf,
                        is_member: t.is_member,
                        queries: t.queries_used,
                        budget_exhausted: t.exhausted,
                    })
                    .collect();
                self.write(&format!("baselines/{name}.csv"), scores_csv(&s).as_bytes())?;
                return Ok(s);
            }
            other => {
                return Err(Error::invalid(format!(
                    "unknown baseline `{other}` (expected one of {})",
                    BASELINES.join(", ")
                )))
            }
        };
        self.record_queries(QueryRecord {
            attack: name.to_string(),
            per_sample: rec.0,
            audited: oracle.queries(),
            expected: rec.1,
            bound: rec.2,
        })?;
        self.write(&format!("baselines/{name}.csv"), scores_csv(&scores).as_bytes())?;
        Ok(scores)
    }

    fn load_scores(&self, name: &str) -> Result<Option<Vec<BaselineScore>>> {
        let p = self.path(&format!("baselines/{name}.csv"));
        if !p.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(p)?;
        let bad = || Error::Format(format!("baselines/{name}.csv"));
        let rows = text
            .lines()
            .skip(1)
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 4 {
                    return Err(bad());
                }
                Ok(BaselineScore {
                    sample_id: f[0].parse().map_err(|_| bad())?,
                    score: f[1].parse().map_err(|_| bad())?,
                    is_member: f[2].parse().map_err(|_| bad())?,
                    queries: f[3].parse().map_err(|_| bad())?,
                    budget_exhausted: false,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Some(rows))
    }

    // ---- defenses ----

    /// Retrains the target under every configured defense and replays the
    /// archived OSLO examples against each defended model.
    pub fn defend(&mut self, data: &LabeledDataset, plan: &SplitPlan) -> Result<Vec<DefenseRow>> {
        let archive = self.load_archive()?;
        let target_set = data.subset(&plan.target_train);
        let test_set = data.subset(&plan.holdout);
        let mut rows = Vec::new();
        let mut clip = BTreeMap::new();
        for setting in self.cfg.defenses.settings() {
            let tag = format!("defense/{}-{}", setting.kind.name(), setting.param);
            let base = self.cfg.target.train.clone();
            let tc = self.train_cfg(&tag, &base);
            let d = train_defended(self.cfg.target.arch(), &target_set, &tc, &setting, &test_set)?;
            let oracle = TargetOracle::new(Arc::new(d.model.clone()));
            let curve = sweep_archive(&oracle, archive.clone())?.curve;
            if !d.clip_norms.is_empty() {
                let max = d.clip_norms.iter().copied().fold(0.0, f64::max);
                clip.insert(tag.clone(), (d.clip_norms.len(), max));
            }
            self.save_model(&tag.replace('/', "-"), &d.model)?;
            rows.push(DefenseRow {
                defense: setting.kind,
                param: setting.param,
                test_acc: d.test_acc,
                tpr_at_1pct_fpr: curve.tpr_at_fpr(0.01),
            });
        }
        self.write(DEFENSES, defense_csv(&rows).as_bytes())?;
        self.write_json("defenses/dpsgd_clip_norms.json", &clip)?;
        Ok(rows)
    }

    // ---- evaluation ----

    /// Metrics for every attack whose outputs exist; writes `summary.json`.
    pub fn evaluate(&mut self) -> Result<Summary> {
        let sweep: SweepRecord = self.read_json(SWEEP)?;
        let stats: AttackStats = self.read_json(ATTACK_STATS)?;
        let queries: BTreeMap<String, QueryRecord> = self.read_json(QUERIES).unwrap_or_default();
        let q = |k: &str| queries.get(k).map_or(0, |r| r.audited);
        let mut metrics = BTreeMap::new();
        metrics.insert("oslo".to_string(), AttackMetrics::from_curve(&sweep.curve, q("oslo")));
        let mut curves = vec![("oslo".to_string(), sweep.curve.clone())];
        for name in BASELINES {
            if let Some(scores) = self.load_scores(name)? {
                let curve = roc_points(&scores_panel(&scores))?;
                self.write(&format!("eval/roc_{name}.csv"), curve.to_csv("threshold").as_bytes())?;
                metrics.insert(name.to_string(), AttackMetrics::from_curve(&curve, q(name)));
                curves.push((name.to_string(), curve));
            }
        }
        self.write("eval/roc.svg", roc_svg(&curves).as_bytes())?;
        let mut timings = BTreeMap::new();
        timings.insert("oslo_trajectory_iterations".to_string(), stats.iterations);
        timings.insert("target_queries_total".to_string(), queries.values().map(|r| r.audited).sum());
        let summary = Summary {
            config_hash: self.cfg.hash(),
            metrics,
            timings,
        };
        self.write_json("summary.json", &summary)?;
        Ok(summary)
    }

    // ---- analysis ----

    pub fn report(&mut self, data: &LabeledDataset, plan: &SplitPlan, m: &TrainedModels) -> Result<ComparisonReport> {
        let archive = self.load_archive()?;
        let sweep: SweepRecord = self.read_json(SWEEP)?;
        let stats: AttackStats = self.read_json(ATTACK_STATS)?;
        let label_flip = traces_from_jsonl(&self.read(LABEL_FLIP)?)?;
        let mut report = ComparisonReport {
            stop_modes: stop_mode_rows(&archive, &sweep.decisions, Some((&label_flip, &stats.label_flip_decisions)))?,
            multishot: self.read_json(MULTISHOT)?,
            ..Default::default()
        };
        if let Ok(text) = self.read(TARGET_FLIP) {
            let tf = traces_from_jsonl(&text)?;
            let mags: Vec<(f64, bool)> = tf.iter().map(|t| (t.perturbation_linf, t.is_member)).collect();
            let oslo: Vec<(f64, Vec<(bool, bool)>)> = sweep.taus.iter().copied().zip(sweep.decisions.clone()).collect();
            report.matched.push(matched_fraction_comparison(&oslo, &mags, self.cfg.evaluation.matched_fraction)?);
            report.flip = Some(flip_study(&tf)?);
            self.write("eval/perturbation_cdf.csv", perturbation_cdf(&mags)?.to_csv().as_bytes())?;
            let gt = roc_points(&magnitude_panel(&tf))?;
            self.write("eval/roc_global-threshold-magnitude.csv", gt.to_csv("threshold").as_bytes())?;
        }
        if self.cfg.evaluation.uniform_ablation {
            report.uniform = self.uniform_ablation(data, plan, m)?;
        }
        let summary: Option<Summary> = self.read_json("summary.json").ok();
        let mut md = String::from("# OSLO lab report\n\n");
        if let Some(s) = &summary {
            md.push_str(&attack_table(s));
        }
        md.push_str(&report.to_markdown());
        self.write("analysis/report.md", md.as_bytes())?;
        self.write("analysis/report.csv", report.to_csv().as_bytes())?;
        self.write_json("analysis/report.json", &report)?;
        Ok(report)
    }

    fn uniform_ablation(
        &mut self,
        data: &LabeledDataset,
        plan: &SplitPlan,
        m: &TrainedModels,
    ) -> Result<Vec<crate::analysis::UniformRow>> {
        let sur = self.surrogates(data, plan, m)?;
        let ev = self.cfg.evaluation.clone();
        let take = ev.uniform_calibration_size.min(plan.holdout.len());
        let calib: Vec<PanelSample> = nonmember_samples(data, &plan.holdout[..take]);
        let seed = self.seed("analysis/uniform");
        let (large, reached) = calibrate_large_eps(&calib, &sur, &self.cfg.attack, &ev.uniform_ladder, ev.uniform_fool_rate, seed)?;
        let grid = [large / 4.0, large / 2.0, large];
        let panel = build_panel(data, plan);
        let oracle = TargetOracle::new(m.target.clone());
        let rows = uniform_budget_ablation(&panel, &oracle, &sur, &self.cfg.attack, &grid, seed)?;
        self.record_queries(QueryRecord {
            attack: "uniform-ablation".into(),
            per_sample: vec![grid.len() as u64; panel.len()],
            audited: oracle.queries(),
            expected: Some((panel.len() * grid.len()) as u64),
            bound: None,
        })?;
        self.write_json(
            "analysis/uniform_grid.json",
            &serde_json::json!({ "large": large, "fool_rate_reached": reached, "grid": grid }),
        )?;
        Ok(rows)
    }
}

/// Markdown table of attacks at the fixed FPR caps.
pub fn attack_table(s: &Summary) -> String {
    let mut md = String::from(
        "## Attacks at fixed FPR\n\n| attack | TPR@0.1%FPR | TPR@1%FPR | max precision (recall >= 1%) | queries |\n|---|---|---|---|---|\n",
    );
    for (name, m) in &s.metrics {
        md.push_str(&format!(
            "| {name} | {:.4} | {:.4} | {} | {} |\n",
            m.tpr_at_fpr_0001,
            m.tpr_at_fpr_001,
            m.max_precision_recall_ge_001.map_or("n/a".into(), |v| format!("{v:.4}")),
            m.queries
        ));
    }
    md.push('\n');
    md
}

/// Runs every stage in order and returns the manifest. On failure the
/// partial manifest (with the failure record) is still written.
pub fn run_pipeline(cfg: ExperimentConfig) -> Result<RunManifest> {
    let mut lab = Lab::open(cfg)?;
    let (data, plan) = lab.stage("gen-data", |l| l.gen_data())?;
    let models = lab.stage("train", |l| l.train_models(&data, &plan))?;
    lab.stage("attack-oslo", |l| l.attack_oslo(&data, &plan, &models))?;
    lab.stage("sweep-tau", |l| l.sweep_tau(&models.target))?;
    for name in BASELINES {
        if name == "global-threshold" && !lab.cfg.evaluation.flip_search {
            continue;
        }
        lab.stage(&format!("baseline-{name}"), |l| l.attack_baseline(name, &data, &plan, &models.target))?;
    }
    if !lab.cfg.defenses.kinds.is_empty() {
        lab.stage("defend", |l| l.defend(&data, &plan))?;
    }
    lab.stage("evaluate", |l| l.evaluate())?;
    lab.stage("report", |l| l.report(&data, &plan, &models))?;
    lab.save_manifest()?;
    Ok(lab.manifest)
}
