//! Gradient update rules for transfer attacks over a source-model ensemble:
//! I-FGSM steps with optional momentum (MI), input diversity (DI),
//! translation-invariant smoothing (TI) and Admix input mixing.
//!
//! The loss is untargeted softmax cross-entropy on the true class, averaged
//! over source models (and Admix copies) before differentiation.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelHandle;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMethod {
    Mi,
    Di,
    Ti,
    Admix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferMethodParams {
    pub methods: BTreeSet<TransferMethod>,
    pub momentum_decay: f64,
    pub di_probability: f64,
    pub ti_kernel_radius: usize,
    pub admix_strength: f64,
    pub admix_count: usize,
}

impl Default for TransferMethodParams {
    fn default() -> Self {
        Self {
            methods: [TransferMethod::Mi].into_iter().collect(),
            momentum_decay: 1.0,
            di_probability: 0.5,
            ti_kernel_radius: 3,
            admix_strength: 0.2,
            admix_count: 3,
        }
    }
}

impl TransferMethodParams {
    /// Plain I-FGSM: no enhancements.
    pub fn plain() -> Self {
        Self {
            methods: BTreeSet::new(),
            momentum_decay: 0.0,
            ..Self::default()
        }
    }

    pub fn with(mut self, methods: &[TransferMethod]) -> Self {
        self.methods = methods.iter().copied().collect();
        self
    }

    pub fn has(&self, m: TransferMethod) -> bool {
        self.methods.contains(&m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.momentum_decay >= 0.0 && self.momentum_decay.is_finite()) {
            return Err(Error::invalid("momentum_decay must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.di_probability) {
            return Err(Error::invalid("di_probability must be in [0, 1]"));
        }
        if !(self.admix_strength >= 0.0 && self.admix_strength.is_finite()) {
            return Err(Error::invalid("admix_strength must be finite and >= 0"));
        }
        if self.has(TransferMethod::Admix) && self.admix_count == 0 {
            return Err(Error::invalid("admix_count must be >= 1 when Admix is enabled"));
        }
        Ok(())
    }
}

/// Models whose averaged loss supplies attack gradients.
#[derive(Clone, Debug)]
pub struct SourceEnsemble {
    models: Vec<Arc<ModelHandle>>,
}

impl SourceEnsemble {
    pub fn new(models: Vec<Arc<ModelHandle>>) -> Result<Self> {
        check_ensemble(&models, "source")?;
        Ok(Self { models })
    }

    pub fn models(&self) -> &[Arc<ModelHandle>] {
        &self.models
    }

    pub fn num_classes(&self) -> usize {
        self.models[0].num_classes
    }
}

pub(crate) fn check_ensemble(models: &[Arc<ModelHandle>], what: &str) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid(format!("{what} ensemble is empty")))?;
    if let Some(m) = models
        .iter()
        .find(|m| m.input != first.input || m.num_classes != first.num_classes)
    {
        return Err(Error::invalid(format!(
            "{what} ensemble mixes input shapes or class counts ({:?}/{} vs {:?}/{})",
            m.input, m.num_classes, first.input, first.num_classes
        )));
    }
    Ok(())
}

/// Per-sample loop state of the iterative attack.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackState {
    pub x_current: Tensor,
    pub momentum: Tensor,
    pub origin: Tensor,
    pub label: usize,
}

impl AttackState {
    pub fn new(origin: Tensor, label: usize) -> Self {
        Self {
            x_current: origin.clone(),
            momentum: Tensor::zeros(origin.shape()),
            origin,
            label,
        }
    }

    pub fn reset_momentum(&mut self) {
        self.momentum = Tensor::zeros(self.origin.shape());
    }
}

/// Images from classes other than the attacked label, for Admix.
#[derive(Clone, Debug, Default)]
pub struct AdmixPool {
    images: Vec<(Tensor, usize)>,
}

impl AdmixPool {
    pub fn new(images: Vec<(Tensor, usize)>) -> Self {
        Self { images }
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `count` random images whose label differs from `label`.
    pub fn draw(&self, label: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
        let eligible: Vec<&Tensor> = self
            .images
            .iter()
            .filter(|(_, l)| *l != label)
            .map(|(t, _)| t)
            .collect();
        if eligible.is_empty() {
            return Err(Error::invalid(format!(
                "Admix enabled but no pool image has a class other than {label}"
            )));
        }
        Ok((0..count)
            .map(|_| eligible[rng.random_range(0..eligible.len())].clone())
            .collect())
    }
}

/// `momentum * decay + g / max(||g||_1, 1e-12)`
pub fn mi_accumulate(momentum: &Tensor, g: &Tensor, decay: f64) -> Result<Tensor> {
    let norm = g.l1_norm().max(1e-12);
    momentum.zip_map(g, |m, g| decay * m + g / norm)
}

/// Gather map for one random resize-and-pad, or `None` for identity.
fn di_index(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Option<Vec<Option<usize>>> {
    if !(rng.random::<f64>() < p) {
        return None;
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let min_w = ((0.9 * w as f64).round() as usize).max(1);
    let sw = rng.random_range(min_w..=w);
    let sh = ((sw as f64 * h as f64 / w as f64).round() as usize).clamp(1, h);
    let top = rng.random_range(0..=h - sh);
    let left = rng.random_range(0..=w - sw);
    let mut index = vec![None; c * h * w];
    for ch in 0..c {
        for y in top..top + sh {
            let sy = (y - top) * h / sh;
            for x in left..left + sw {
                let sx = (x - left) * w / sw;
                index[(ch * h + y) * w + x] = Some((ch * h + sy) * w + sx);
            }
        }
    }
    Some(index)
}

/// With probability `p`, nearest-neighbour shrink to a random side in
/// `[0.9 W, W]` and zero-pad back at a random offset; otherwise identity.
pub fn di_transform(x: &Tensor, p: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    di_apply(x, p, &mut rng)
}

fn di_apply(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    match di_index(x.shape(), p, rng) {
        None => x.clone(),
        Some(index) => {
            let data = index.iter().map(|i| i.map_or(0.0, |j| x.data()[j])).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        }
    }
}

fn gaussian_kernel(radius: usize) -> Vec<f64> {
    let side = 2 * radius + 1;
    let sigma = radius as f64 / 3f64.sqrt();
    let mut k = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (dy, dx) = (y as f64 - radius as f64, x as f64 - radius as f64);
            k.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Convolves each channel of a `[C, H, W]` gradient with a normalized
/// Gaussian kernel (sigma = radius / sqrt 3), zero padded.
pub fn ti_smooth(g: &Tensor, radius: usize) -> Tensor {
    if radius == 0 {
        return g.clone();
    }
    g.convolve_planes(&gaussian_kernel(radius), radius)
        .expect("kernel side matches radius")
}

/// `clamp(x + strength * other, 0, 1)` for each image in `others`.
pub fn admix_mix(x: &Tensor, others: &[Tensor], strength: f64) -> Result<Vec<Tensor>> {
    if others.is_empty() {
        return Err(Error::invalid("Admix needs at least one image from another class"));
    }
    others
        .iter()
        .map(|o| Ok(x.zip_map(o, |a, b| a + strength * b)?.clamp(0.0, 1.0)))
        .collect()
}

/// `clamp(x + alpha * sign(g), 0, 1)`: one ascent step on the loss.
pub fn fgsm_step(state: &AttackState, g_effective: &Tensor, alpha: f64) -> Result<Tensor> {
    Ok(state
        .x_current
        .zip_map(g_effective, |x, g| x + alpha * crate::tensor::sign(g))?
        .clamp(0.0, 1.0))
}

/// Gradient of the mean cross-entropy over source models (and Admix copies)
/// with respect to `x`. DI and Admix randomness comes from `rng`.
pub fn ensemble_loss_grad(
    ens: &SourceEnsemble,
    x: &Tensor,
    y: usize,
    params: &TransferMethodParams,
    pool: &AdmixPool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let first = &ens.models[0];
    if x.shape() != first.input.dims() {
        return Err(Error::shape(format!(
            "attack input {:?} does not match model input {:?}",
            x.shape(),
            first.input.dims()
        )));
    }
    let [c, h, w] = first.input.dims();
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());

    let mut copies = Vec::new();
    if params.has(TransferMethod::Admix) {
        for other in pool.draw(y, params.admix_count, rng)? {
            copies.push(leaf.add_const(&other.map(|v| params.admix_strength * v))?.clamp(0.0, 1.0));
        }
    } else {
        copies.push(leaf);
    }

    let mut terms = Vec::with_capacity(copies.len() * ens.models.len());
    for copy in copies {
        let input = if params.has(TransferMethod::Di) {
            match di_index(x.shape(), params.di_probability, rng) {
                Some(index) => copy.gather(index, &[c, h, w])?,
                None => copy,
            }
        } else {
            copy
        };
        let batch = input.reshape(&[1, c, h, w])?;
        for m in &ens.models {
            let p = m.bind(&tape, false);
            terms.push(m.forward(&p, batch, crate::models::Mode::Eval)?.cross_entropy(&[y])?);
        }
    }
    let n = terms.len() as f64;
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    let loss = total.scale(1.0 / n);
    let mut g = tape.backward(loss)?;
    Ok(g.take(leaf))
}

/// Full per-iteration gradient pipeline: ensemble gradient, then TI
/// smoothing, then MI accumulation (which updates `state.momentum`).
pub fn effective_gradient(
    ens: &SourceEnsemble,
    state: &mut AttackState,
    params: &TransferMethodParams,
    pool: &AdmixPool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut g = ensemble_loss_grad(ens, &state.x_current, state.label, params, pool, rng)?;
    if params.has(TransferMethod::Ti) {
        g = ti_smooth(&g, params.ti_kernel_radius);
    }
    if params.has(TransferMethod::Mi) {
        state.momentum = mi_accumulate(&state.momentum, &g, params.momentum_decay)?;
        Ok(state.momentum.clone())
    } else {
        Ok(g)
    }
}
