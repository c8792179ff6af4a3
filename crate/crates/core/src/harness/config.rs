use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::BaselineConfig;
use crate::data::{SplitSizes, SynthSpec};
use crate::defenses::DefenseConfig;
use crate::error::{Error, Result};
use crate::models::{ArchSpec, Family, TrainConfig};
use crate::oslo::AttackConfig;

/// Synthetic generator settings, or a directory holding `images.idx` and
/// `labels.idx` to load instead.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub idx_dir: Option<PathBuf>,
    pub synth: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub family: Family,
    /// Family default when unset.
    pub width: Option<usize>,
    pub dropout: Option<f64>,
    pub train: TrainConfig,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            family: Family::CnnA,
            width: None,
            dropout: None,
            // a higher rate than the surrogates' pushes the target to fit
            // its training set completely
            train: TrainConfig {
                learning_rate: 3e-3,
                ..TrainConfig::default()
            },
        }
    }
}

impl TargetConfig {
    pub fn arch(&self) -> ArchSpec {
        let mut a = ArchSpec::new(self.family);
        if let Some(w) = self.width {
            a.width = w;
        }
        if let Some(d) = self.dropout {
            a.dropout = d;
        }
        a
    }
}

fn expand(families: &[Family], count: usize) -> Vec<ArchSpec> {
    families
        .iter()
        .flat_map(|&f| std::iter::repeat_n(ArchSpec::new(f), count))
        .collect()
}

/// Source ensemble: `count` models of every listed family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceConfig {
    pub families: Vec<Family>,
    pub count: usize,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            families: vec![Family::Mlp, Family::CnnB, Family::CnnD],
            count: 1,
        }
    }
}

impl SourceConfig {
    pub fn archs(&self) -> Vec<ArchSpec> {
        expand(&self.families, self.count)
    }
}

/// Validation ensemble: `count` models of every listed family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationConfig {
    pub families: Vec<Family>,
    pub count: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            families: vec![Family::CnnC],
            count: 3,
        }
    }
}

impl ValidationConfig {
    pub fn archs(&self) -> Vec<ArchSpec> {
        expand(&self.families, self.count)
    }
}

/// Evaluation and analysis knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Strictly decreasing; the attack tau is added if missing.
    pub taus: Vec<f64>,
    pub fpr_caps: Vec<f64>,
    pub max_shots: usize,
    pub matched_fraction: f64,
    /// Run the target-side flip search that feeds the global-threshold
    /// baseline and the perturbation study.
    pub flip_search: bool,
    /// Candidate budgets for the uniform-budget ablation, ascending.
    pub uniform_ladder: Vec<f64>,
    pub uniform_fool_rate: f64,
    pub uniform_calibration_size: usize,
    pub uniform_ablation: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            taus: vec![0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001, 0.0005, 0.0002, 0.0001],
            fpr_caps: vec![0.001, 0.01],
            max_shots: 3,
            matched_fraction: 0.15,
            flip_search: true,
            uniform_ladder: [4.0, 8.0, 16.0, 24.0, 32.0, 48.0, 64.0, 80.0].iter().map(|v| v / 255.0).collect(),
            uniform_fool_rate: 0.99,
            uniform_calibration_size: 100,
            uniform_ablation: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitSizes,
    pub target: TargetConfig,
    /// Training settings shared by source, validation and shadow models.
    pub surrogate_train: TrainConfig,
    pub source: SourceConfig,
    pub validation: ValidationConfig,
    pub attack: AttackConfig,
    pub evaluation: EvaluationConfig,
    pub baselines: BaselineConfig,
    pub defenses: DefenseConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            split: SplitSizes::default(),
            target: TargetConfig::default(),
            surrogate_train: TrainConfig {
                learning_rate: 5e-3,
                ..TrainConfig::default()
            },
            source: SourceConfig::default(),
            validation: ValidationConfig::default(),
            attack: AttackConfig::default(),
            evaluation: EvaluationConfig::default(),
            baselines: BaselineConfig::default(),
            defenses: DefenseConfig::default(),
        }
    }
}

fn at(path: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |e| match e {
        Error::InvalidArgument(m) => Error::config(path, m),
        other => other,
    }
}

impl ExperimentConfig {
    /// Parses TOML text; missing keys take their defaults, unknown keys and
    /// out-of-range values are errors naming the offending field.
    pub fn parse(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string().trim_end())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(dir) = &self.dataset.idx_dir {
            if dir.as_os_str().is_empty() {
                return Err(Error::config("dataset.idx_dir", "empty path"));
            }
        } else {
            self.dataset.synth.validate().map_err(at("dataset.synth"))?;
        }
        self.target.arch().validate().map_err(at("target"))?;
        self.target.train.validate().map_err(at("target.train"))?;
        self.surrogate_train.validate().map_err(at("surrogate_train"))?;
        let sets = [
            ("source", &self.source.families, self.source.count),
            ("validation", &self.validation.families, self.validation.count),
        ];
        for (name, families, count) in sets {
            if families.is_empty() || count == 0 {
                return Err(Error::config(name, "needs at least one family and count >= 1"));
            }
            if families.contains(&self.target.family) {
                return Err(Error::config(
                    format!("{name}.families"),
                    format!("target family {} must not appear in the attacker's models", self.target.family),
                ));
            }
        }
        if self.baselines.shadow.family == self.target.family {
            return Err(Error::config("baselines.shadow.family", "shadow must differ from the target family"));
        }
        if !(0.0..=1.0).contains(&self.attack.tau) {
            return Err(Error::config("attack.tau", format!("{} outside [0, 1]", self.attack.tau)));
        }
        self.attack.validate().map_err(at("attack"))?;
        let ev = &self.evaluation;
        if ev.taus.is_empty() || ev.taus.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("evaluation.taus", "must be a non-empty, strictly decreasing list"));
        }
        if ev.taus.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::config("evaluation.taus", "values must lie in [0, 1]"));
        }
        if ev.fpr_caps.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config("evaluation.fpr_caps", "values must lie in [0, 1]"));
        }
        if ev.max_shots == 0 || ev.max_shots > self.sweep_taus().len() {
            return Err(Error::config("evaluation.max_shots", "must be between 1 and the number of taus"));
        }
        if !(0.0..=1.0).contains(&ev.matched_fraction) {
            return Err(Error::config("evaluation.matched_fraction", "must lie in [0, 1]"));
        }
        if ev.uniform_ablation
            && (ev.uniform_ladder.is_empty()
                || ev.uniform_ladder.windows(2).any(|w| w[1] <= w[0])
                || ev.uniform_ladder.iter().any(|e| !(*e > 0.0 && *e <= 1.0)))
        {
            return Err(Error::config("evaluation.uniform_ladder", "must be non-empty, ascending, within (0, 1]"));
        }
        self.baselines.validate().map_err(at("baselines"))?;
        self.defenses.validate().map_err(at("defenses"))?;
        Ok(())
    }

    /// The evaluation tau list with the attack tau merged in, descending.
    pub fn sweep_taus(&self) -> Vec<f64> {
        let mut t = self.evaluation.taus.clone();
        if !t.contains(&self.attack.tau) {
            t.push(self.attack.tau);
            t.sort_by(|a, b| b.total_cmp(a));
        }
        t
    }

    /// SHA-256 over the canonical JSON form, ignoring `out_dir` so the same
    /// experiment hashes identically wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        let c = ExperimentConfig::parse("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn tau_range_error_names_field() {
        let e = ExperimentConfig::parse("[attack]\ntau = 1.5\n").unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "attack.tau"), "{e}");
    }

    #[test]
    fn unknown_key_rejected_with_path() {
        let e = ExperimentConfig::parse("[attack]\ntua = 0.1\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("tua"), "{msg}");
        let e = ExperimentConfig::parse("[dataset.synth]\nnoize = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("dataset.synth"), "{e}");
    }

    #[test]
    fn type_error_names_field() {
        let e = ExperimentConfig::parse("[split]\ntarget_train = \"many\"\n").unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "split.target_train"), "{e}");
    }

    #[test]
    fn validation_count_per_family() {
        let c = ExperimentConfig::parse("[validation]\ncount = 5\n").unwrap();
        assert_eq!(c.validation.archs().len(), 5);
        let c = ExperimentConfig::parse("[validation]\nfamilies = [\"cnn-c\", \"mlp\"]\ncount = 5\n").unwrap();
        assert_eq!(c.validation.archs().len(), 10);
    }

    #[test]
    fn target_family_in_attacker_set_rejected() {
        let e = ExperimentConfig::parse("[validation]\nfamilies = [\"cnn-a\"]\n").unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "validation.families"));
        let e = ExperimentConfig::parse("[target]\nfamily = \"mlp\"\n").unwrap_err();
        assert!(matches!(&e, Error::Config { path, .. } if path == "source.families"));
    }

    #[test]
    fn taus_must_decrease() {
        assert!(ExperimentConfig::parse("[evaluation]\ntaus = [0.01, 0.1]\n").is_err());
        assert!(ExperimentConfig::parse("[evaluation]\ntaus = [0.1, 0.1]\n").is_err());
        let c = ExperimentConfig::parse("[evaluation]\ntaus = [0.1, 0.001]\n").unwrap();
        assert_eq!(c.sweep_taus(), vec![0.1, 0.01, 0.001]);
    }

    #[test]
    fn round_trip_and_hash() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::parse(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let mut moved = c.clone();
        moved.out_dir = "elsewhere".into();
        assert_eq!(moved.hash(), c.hash());
        let mut other = c.clone();
        other.seed = 2;
        assert_ne!(other.hash(), c.hash());
    }
}
