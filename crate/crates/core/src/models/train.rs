use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ArchSpec, Mode, ModelHandle, TrainMeta};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    SgdMomentum,
    Adam,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::SgdMomentum => "sgd-momentum",
            Optimizer::Adam => "adam",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay_l2: f64,
    pub weight_decay_l1: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            learning_rate: 1e-3,
            epochs: 60,
            batch_size: 128,
            weight_decay_l2: 1e-6,
            weight_decay_l1: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.weight_decay_l2 < 0.0 || self.weight_decay_l1 < 0.0 {
            return Err(Error::invalid("weight decay must be >= 0"));
        }
        Ok(())
    }
}

/// Supplies the loss and parameter gradients for one minibatch. Swapping the
/// implementation turns plain training into DP-SGD or adversarial training
/// without touching the optimizer loop.
pub trait BatchGradient {
    fn compute(
        &mut self,
        model: &ModelHandle,
        data: &LabeledDataset,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Tensor>)>;
}

/// Mean cross-entropy over the batch.
pub struct StandardGradient;

impl BatchGradient for StandardGradient {
    fn compute(
        &mut self,
        model: &ModelHandle,
        data: &LabeledDataset,
        batch: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, Vec<Tensor>)> {
        let (x, y) = data.batch(batch);
        batch_loss_grads(model, x, &y, rng)
    }
}

/// Loss and weight gradients for an explicit `[B, C, H, W]` batch.
pub(crate) fn batch_loss_grads(
    model: &ModelHandle,
    x: Tensor,
    y: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let params = model.bind(&tape, true);
    let xv = tape.constant(x);
    let loss = model.forward(&params, xv, Mode::Train(rng))?.cross_entropy(y)?;
    let l = loss.value().item();
    let mut g = tape.backward(loss)?;
    Ok((l, params.iter().map(|&p| g.take(p)).collect()))
}

enum OptState {
    Sgd { velocity: Vec<Vec<f64>> },
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: i32 },
}

impl OptState {
    fn new(kind: Optimizer, model: &ModelHandle) -> Self {
        let zeros = || model.weights.iter().map(|w| vec![0.0; w.len()]).collect::<Vec<_>>();
        match kind {
            Optimizer::SgdMomentum => OptState::Sgd { velocity: zeros() },
            Optimizer::Adam => OptState::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        }
    }

    fn step(&mut self, weights: &mut [Tensor], grads: &[Tensor], lr: f64) {
        const MOMENTUM: f64 = 0.9;
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        match self {
            OptState::Sgd { velocity } => {
                for ((w, g), vel) in weights.iter_mut().zip(grads).zip(velocity) {
                    for ((w, g), v) in w.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                        *v = MOMENTUM * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let (c1, c2) = (1.0 - B1.powi(*t), 1.0 - B2.powi(*t));
                for (((w, g), mm), vv) in weights.iter_mut().zip(grads).zip(m).zip(v) {
                    for (((w, g), m), v) in w.data_mut().iter_mut().zip(g.data()).zip(mm.iter_mut()).zip(vv.iter_mut()) {
                        *m = B1 * *m + (1.0 - B1) * g;
                        *v = B2 * *v + (1.0 - B2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Trains `arch` on all of `data` with plain minibatch cross-entropy.
pub fn train(arch: ArchSpec, data: &LabeledDataset, cfg: &TrainConfig) -> Result<ModelHandle> {
    train_with(arch, data, cfg, &mut StandardGradient)
}

/// Training loop with a pluggable gradient source. Initialization, batch
/// order and dropout masks all derive from `cfg.seed`, so a run is
/// bit-reproducible.
pub fn train_with(
    arch: ArchSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    grad: &mut dyn BatchGradient,
) -> Result<ModelHandle> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    data.validate()?;

    let mut init_rng = stage_rng(cfg.seed, "model/init");
    let mut order_rng = stage_rng(cfg.seed, "model/order");
    let mut noise_rng = stage_rng(cfg.seed, "model/noise");
    let mut model = ModelHandle::init(arch, data.input, data.num_classes, &mut init_rng)?;
    let mut opt = OptState::new(cfg.optimizer, &model);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, mut grads) = grad.compute(&model, data, batch, &mut noise_rng)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::Divergence { epoch, batch: bi, loss });
            }
            if cfg.weight_decay_l2 > 0.0 || cfg.weight_decay_l1 > 0.0 {
                for (g, w) in grads.iter_mut().zip(&model.weights) {
                    for (g, &w) in g.data_mut().iter_mut().zip(w.data()) {
                        *g += cfg.weight_decay_l2 * w + cfg.weight_decay_l1 * crate::tensor::sign(w);
                    }
                }
            }
            opt.step(&mut model.weights, &grads, cfg.learning_rate);
            total += loss * batch.len() as f64;
        }
        history.push(total / data.len() as f64);
    }

    model.meta = TrainMeta {
        optimizer: cfg.optimizer.name().into(),
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        seed: cfg.seed,
        loss_history: history,
    };
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{InputShape, Sample};
    use crate::models::Family;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    /// Two well-separated Gaussian blobs on a 1x4x4 canvas.
    fn blobs(seed: u64, n: usize) -> LabeledDataset {
        let mut rng = stage_rng(seed, "blobs");
        let noise = Normal::new(0.0, 0.05).unwrap();
        let samples = (0..n)
            .map(|i| {
                let label = i % 2;
                let centre: f64 = if label == 0 { 0.25 } else { 0.75 };
                let data = (0..16)
                    .map(|_| (centre + noise.sample(&mut rng) + rng.random_range(-0.01..0.01)).clamp(0.0, 1.0))
                    .collect();
                Sample {
                    image: Tensor::new(vec![1, 4, 4], data).unwrap(),
                    label,
                }
            })
            .collect();
        LabeledDataset::new("blobs", 2, InputShape::new(1, 4, 4), samples).unwrap()
    }

    fn quick(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.01,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(0, 80);
        let m = train(ArchSpec::new(Family::Mlp), &data, &quick(7)).unwrap();
        let all: Vec<usize> = (0..data.len()).collect();
        assert!(m.accuracy(&data, &all).unwrap() >= 0.99);
        assert_eq!(m.meta.loss_history.len(), 30);
    }

    #[test]
    fn same_seed_same_weights() {
        let data = blobs(1, 40);
        let a = train(ArchSpec::new(Family::Mlp), &data, &quick(7)).unwrap();
        let b = train(ArchSpec::new(Family::Mlp), &data, &quick(7)).unwrap();
        assert_eq!(a.weights, b.weights);
        let c = train(ArchSpec::new(Family::Mlp), &data, &quick(8)).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn sgd_momentum_also_learns() {
        let data = blobs(2, 80);
        let cfg = TrainConfig {
            optimizer: Optimizer::SgdMomentum,
            ..quick(3)
        };
        let m = train(ArchSpec::new(Family::Mlp), &data, &cfg).unwrap();
        let all: Vec<usize> = (0..data.len()).collect();
        assert!(m.accuracy(&data, &all).unwrap() >= 0.99);
    }

    #[test]
    fn divergence_is_reported() {
        let data = blobs(3, 40);
        let cfg = TrainConfig {
            optimizer: Optimizer::SgdMomentum,
            learning_rate: 1e200,
            ..quick(1)
        };
        let err = train(ArchSpec::new(Family::Mlp), &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    #[test]
    fn empty_data_rejected() {
        let data = LabeledDataset::new("empty", 2, InputShape::new(1, 4, 4), vec![]).unwrap();
        assert!(train(ArchSpec::new(Family::Mlp), &data, &quick(0)).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let data = blobs(4, 10);
        let cfg = TrainConfig {
            epochs: 0,
            ..quick(0)
        };
        assert!(train(ArchSpec::new(Family::Mlp), &data, &cfg).is_err());
    }
}
