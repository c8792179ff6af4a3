//! Defended target models: L2 and L1 weight decay, dropout, DP-SGD and PGD
//! adversarial training. A defended model is an ordinary [`ModelHandle`],
//! so the attack code path is unchanged.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{batch_loss_grads, train, train_with, ArchSpec, BatchGradient, Mode, ModelHandle, TrainConfig};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    L2,
    L1,
    Dropout,
    Dpsgd,
    AdvTrain,
}

impl DefenseKind {
    pub fn name(self) -> &'static str {
        match self {
            DefenseKind::L2 => "l2",
            DefenseKind::L1 => "l1",
            DefenseKind::Dropout => "dropout",
            DefenseKind::Dpsgd => "dpsgd",
            DefenseKind::AdvTrain => "adv-train",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PgdConfig {
    pub eps: f64,
    pub steps: usize,
    /// Step size; `None` means `eps / 4`.
    pub alpha: Option<f64>,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            eps: 4.0 / 255.0,
            steps: 7,
            alpha: None,
        }
    }
}

impl PgdConfig {
    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(self.eps / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eps) {
            return Err(Error::invalid("pgd eps must lie in [0, 1]"));
        }
        if self.alpha.is_some_and(|a| !(a > 0.0)) {
            return Err(Error::invalid("pgd alpha must be > 0"));
        }
        Ok(())
    }
}

/// The defense sweep: which defenses to run and the strength values for each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub kinds: Vec<DefenseKind>,
    pub l2: Vec<f64>,
    pub l1: Vec<f64>,
    pub dropout: Vec<f64>,
    pub dpsgd_clip: f64,
    pub dpsgd_noise: Vec<f64>,
    pub adv_train: PgdConfig,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kinds: vec![DefenseKind::Dropout, DefenseKind::Dpsgd],
            l2: vec![0.001, 0.005, 0.01],
            l1: vec![5e-6, 1e-5, 5e-5],
            dropout: vec![0.3, 0.5, 0.7],
            dpsgd_clip: 1.2,
            dpsgd_noise: vec![0.005, 0.01, 0.05],
            adv_train: PgdConfig::default(),
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l2.iter().chain(&self.l1).any(|v| *v < 0.0) {
            return Err(Error::invalid("weight decay strengths must be >= 0"));
        }
        if self.dropout.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::invalid("dropout rates must lie in [0, 1)"));
        }
        if !(self.dpsgd_clip > 0.0) || self.dpsgd_noise.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("dpsgd clip must be > 0 and noise >= 0"));
        }
        self.adv_train.validate()
    }

    /// Every `(kind, strength)` pair in the sweep, grid values ascending.
    pub fn settings(&self) -> Vec<DefenseSetting> {
        let mut out = Vec::new();
        for &kind in &self.kinds {
            let grid: Vec<f64> = match kind {
                DefenseKind::L2 => self.l2.clone(),
                DefenseKind::L1 => self.l1.clone(),
                DefenseKind::Dropout => self.dropout.clone(),
                DefenseKind::Dpsgd => self.dpsgd_noise.clone(),
                DefenseKind::AdvTrain => vec![self.adv_train.eps],
            };
            let mut grid = grid;
            grid.sort_by(f64::total_cmp);
            out.extend(grid.into_iter().map(|param| DefenseSetting {
                kind,
                param,
                dpsgd_clip: self.dpsgd_clip,
                pgd: PgdConfig {
                    eps: if kind == DefenseKind::AdvTrain { param } else { self.adv_train.eps },
                    ..self.adv_train
                },
            }));
        }
        out
    }
}

/// One defended training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseSetting {
    pub kind: DefenseKind,
    /// lambda, dropout rate, noise multiplier or PGD eps, by kind.
    pub param: f64,
    pub dpsgd_clip: f64,
    pub pgd: PgdConfig,
}

#[derive(Clone, Debug)]
pub struct DefendedModel {
    pub setting: DefenseSetting,
    pub model: ModelHandle,
    pub train_acc: f64,
    pub test_acc: f64,
    /// DP-SGD only: every per-example gradient norm after clipping.
    pub clip_norms: Vec<f64>,
}

/// Trains `arch` under `setting` and records train and test accuracy.
pub fn train_defended(
    arch: ArchSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    setting: &DefenseSetting,
    test: &LabeledDataset,
) -> Result<DefendedModel> {
    let mut clip_norms = Vec::new();
    let model = match setting.kind {
        DefenseKind::L2 => train(arch, data, &TrainConfig { weight_decay_l2: setting.param, ..cfg.clone() })?,
        DefenseKind::L1 => train(arch, data, &TrainConfig { weight_decay_l1: setting.param, ..cfg.clone() })?,
        DefenseKind::Dropout => train(arch.with_dropout(setting.param), data, cfg)?,
        DefenseKind::Dpsgd => {
            let mut g = DpSgdGradient::new(setting.dpsgd_clip, setting.param);
            let m = train_with(arch, data, cfg, &mut g)?;
            clip_norms = g.norms;
            m
        }
        DefenseKind::AdvTrain => train_with(arch, data, cfg, &mut AdvTrainGradient::new(setting.pgd))?,
    };
    let all = |d: &LabeledDataset| (0..d.len()).collect::<Vec<_>>();
    Ok(DefendedModel {
        setting: *setting,
        train_acc: model.accuracy(data, &all(data))?,
        test_acc: model.accuracy(test, &all(test))?,
        model,
        clip_norms,
    })
}

/// Clips each per-example gradient to L2 norm at most `clip`, sums them,
/// adds Gaussian noise of std `noise_multiplier * clip` per coordinate and
/// divides by the batch size. Also returns the post-clip norms.
pub fn dpsgd_step(
    per_example: &[Vec<Tensor>],
    clip: f64,
    noise_multiplier: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, Vec<f64>)> {
    if !(clip > 0.0) {
        return Err(Error::invalid("clip bound must be > 0"));
    }
    let first = per_example
        .first()
        .ok_or_else(|| Error::invalid("DP-SGD step on an empty batch"))?;
    let mut sum: Vec<Vec<f64>> = first.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut norms = Vec::with_capacity(per_example.len());
    for grads in per_example {
        let flat: Vec<f64> = grads.iter().flat_map(|t| t.data().iter().copied()).collect();
        let (clipped, norm) = clip_to(flat, clip);
        let mut it = clipped.into_iter();
        for acc in sum.iter_mut() {
            for a in acc.iter_mut() {
                *a += it.next().ok_or_else(|| Error::shape("per-example gradients differ in size"))?;
            }
        }
        norms.push(norm);
    }
    let n = per_example.len() as f64;
    let std = noise_multiplier * clip;
    let noise = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let out = sum
        .into_iter()
        .zip(first)
        .map(|(acc, t)| {
            let data = acc
                .into_iter()
                .map(|v| (v + if std > 0.0 { noise.sample(rng) } else { 0.0 }) / n)
                .collect();
            Tensor::new(t.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, norms))
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` to L2 norm at most `clip`. The norm of the scaled vector is
/// recomputed and, if rounding left it a hair above `clip`, shrunk again, so
/// the returned norm never exceeds the bound.
fn clip_to(mut v: Vec<f64>, clip: f64) -> (Vec<f64>, f64) {
    let mut norm = l2(&v);
    while norm > clip {
        let scale = clip / norm * (1.0 - 4.0 * f64::EPSILON);
        v.iter_mut().for_each(|x| *x *= scale);
        norm = l2(&v);
    }
    (v, norm)
}

/// Per-example gradients followed by [`dpsgd_step`].
pub struct DpSgdGradient {
    pub clip: f64,
    pub noise_multiplier: f64,
    /// Post-clip norms of every example seen so far.
    pub norms: Vec<f64>,
}

impl DpSgdGradient {
    pub fn new(clip: f64, noise_multiplier: f64) -> Self {
        Self {
            clip,
            noise_multiplier,
            norms: Vec::new(),
        }
    }
}

impl BatchGradient for DpSgdGradient {
    fn compute(
        &mut self,
        model: &ModelHandle,
        data: &LabeledDataset,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut total = 0.0;
        let mut per_example = Vec::with_capacity(batch.len());
        for &i in batch {
            let (x, y) = data.batch(&[i]);
            let (l, g) = batch_loss_grads(model, x, &y, rng)?;
            total += l;
            per_example.push(g);
        }
        let (update, norms) = dpsgd_step(&per_example, self.clip, self.noise_multiplier, rng)?;
        self.norms.extend(norms);
        Ok((total / batch.len() as f64, update))
    }
}

/// Mean cross-entropy of a `[B, C, H, W]` batch and its input gradient,
/// with dropout off.
fn batch_input_gradient(model: &ModelHandle, x: &Tensor, y: &[usize]) -> Result<(f64, Tensor)> {
    let tape = Tape::new();
    let params = model.bind(&tape, false);
    let leaf = tape.leaf(x.clone());
    let loss = model.forward(&params, leaf, Mode::Eval)?.cross_entropy(y)?;
    let l = loss.value().item();
    let mut g = tape.backward(loss)?;
    Ok((l, g.take(leaf)))
}

/// L-inf PGD from the clean point: `steps` signed-gradient ascent steps of
/// size `alpha`, each projected onto the eps-ball and the [0, 1] box.
/// Works on single inputs `[C, H, W]` and batches `[B, C, H, W]`.
pub fn pgd_attack(model: &ModelHandle, x: &Tensor, y: &[usize], cfg: &PgdConfig) -> Result<Tensor> {
    let dims = model.input.dims();
    let batch = if x.shape() == dims {
        x.reshape(&[1, dims[0], dims[1], dims[2]])?
    } else {
        x.clone()
    };
    let mut cur = batch.clone();
    if cfg.eps > 0.0 {
        let alpha = cfg.step_size();
        for _ in 0..cfg.steps {
            let (_, g) = batch_input_gradient(model, &cur, y)?;
            let stepped = cur.zip_map(&g, |v, g| v + alpha * crate::tensor::sign(g))?;
            cur = stepped
                .zip_map(&batch, |v, o| v.clamp(o - cfg.eps, o + cfg.eps))?
                .clamp(0.0, 1.0);
        }
    }
    cur.reshape(x.shape())
}

/// Result of one adversarial-training minibatch.
#[derive(Clone, Debug)]
pub struct AdvBatch {
    pub clean_loss: f64,
    pub adv_loss: f64,
    pub grads: Vec<Tensor>,
    pub x_adv: Tensor,
}

/// Inner PGD maximization on the batch, then weight gradients of the loss
/// on the adversarial batch (the outer minimization step is the caller's).
pub fn adv_train_batch(model: &ModelHandle, x: &Tensor, y: &[usize], pgd: &PgdConfig, rng: &mut ChaCha8Rng) -> Result<AdvBatch> {
    let (clean_loss, _) = batch_input_gradient(model, x, y)?;
    let x_adv = pgd_attack(model, x, y, pgd)?;
    let (adv_loss, _) = batch_input_gradient(model, &x_adv, y)?;
    let (_, grads) = batch_loss_grads(model, x_adv.clone(), y, rng)?;
    Ok(AdvBatch {
        clean_loss,
        adv_loss,
        grads,
        x_adv,
    })
}

pub struct AdvTrainGradient {
    pub pgd: PgdConfig,
}

impl AdvTrainGradient {
    pub fn new(pgd: PgdConfig) -> Self {
        Self { pgd }
    }
}

impl BatchGradient for AdvTrainGradient {
    fn compute(
        &mut self,
        model: &ModelHandle,
        data: &LabeledDataset,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Tensor>)> {
        let (x, y) = data.batch(batch);
        let b = adv_train_batch(model, &x, &y, &self.pgd, rng)?;
        Ok((b.adv_loss, b.grads))
    }
}

/// Sweep output row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub defense: DefenseKind,
    pub param: f64,
    pub test_acc: f64,
    pub tpr_at_1pct_fpr: f64,
}

/// CSV `defense,param,test_acc,tpr_at_1pct_fpr`.
pub fn defense_csv(rows: &[DefenseRow]) -> String {
    let mut s = String::from("defense,param,test_acc,tpr_at_1pct_fpr\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.defense.name(), r.param, r.test_acc, r.tpr_at_1pct_fpr));
    }
    s
}
