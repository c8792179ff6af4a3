//! Small classifier families used as target, source, and validation models.

mod io;
mod train;

pub use io::{decode_model, encode_model, load_model, save_model, MODEL_FORMAT_VERSION};
pub(crate) use train::batch_loss_grads;
pub use train::{train, train_with, BatchGradient, Optimizer, StandardGradient, TrainConfig};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InputShape, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax, Tape, Tensor, Var};

/// Architecture families. Five are available so target, source and
/// validation sets can be chosen pairwise disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Two hidden fully connected layers.
    Mlp,
    /// Two 3x3 conv blocks, linear head.
    CnnA,
    /// Three 3x3 conv layers, linear head.
    CnnB,
    /// 5x5 stem, two more convs, hidden fc layer with dropout.
    CnnC,
    /// Two convs, global average pooling.
    CnnD,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Mlp, Family::CnnA, Family::CnnB, Family::CnnC, Family::CnnD];

    pub fn name(self) -> &'static str {
        match self {
            Family::Mlp => "mlp",
            Family::CnnA => "cnn-a",
            Family::CnnB => "cnn-b",
            Family::CnnC => "cnn-c",
            Family::CnnD => "cnn-d",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(code: u8) -> Option<Family> {
        Family::ALL.get(code as usize).copied()
    }

    pub fn default_width(self) -> usize {
        match self {
            Family::Mlp => 16,
            Family::CnnA => 12,
            Family::CnnB => 8,
            Family::CnnC => 6,
            Family::CnnD => 8,
        }
    }

    pub fn default_dropout(self) -> f64 {
        match self {
            Family::CnnC => 0.25,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown architecture family `{s}` (expected one of mlp, cnn-a, cnn-b, cnn-c, cnn-d)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub family: Family,
    /// Base channel count (conv families) or hidden-layer unit (mlp).
    pub width: usize,
    /// Dropout before the final linear layer, training only.
    pub dropout: f64,
}

impl ArchSpec {
    pub fn new(family: Family) -> Self {
        Self {
            family,
            width: family.default_width(),
            dropout: family.default_dropout(),
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("architecture width must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Parameter shapes in forward order (weights then bias per layer).
    pub fn param_shapes(&self, input: InputShape, classes: usize) -> Vec<Vec<usize>> {
        let w = self.width;
        let (c, h, wd) = (input.channels, input.height, input.width);
        let pooled2 = (h / 2 / 2) * (wd / 2 / 2);
        let conv = |co: usize, ci: usize, k: usize| vec![vec![co, ci, k, k], vec![co]];
        let fc = |i: usize, o: usize| vec![vec![i, o], vec![o]];
        let layers: Vec<Vec<Vec<usize>>> = match self.family {
            Family::Mlp => vec![fc(input.len(), 4 * w), fc(4 * w, 2 * w), fc(2 * w, classes)],
            Family::CnnA => vec![conv(w, c, 3), conv(2 * w, w, 3), fc(pooled2 * 2 * w, classes)],
            Family::CnnB => vec![
                conv(w, c, 3),
                conv(2 * w, w, 3),
                conv(2 * w, 2 * w, 3),
                fc(pooled2 * 2 * w, classes),
            ],
            Family::CnnC => vec![
                conv(w, c, 5),
                conv(2 * w, w, 3),
                conv(2 * w, 2 * w, 3),
                fc(pooled2 * 2 * w, 4 * w),
                fc(4 * w, classes),
            ],
            Family::CnnD => vec![conv(w, c, 5), conv(2 * w, w, 5), fc(2 * w, classes)],
        };
        layers.into_iter().flatten().collect()
    }
}

/// Forward-pass mode; dropout draws masks only in `Train`.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub optimizer: String,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Mean training loss per epoch.
    pub loss_history: Vec<f64>,
}

impl TrainMeta {
    pub fn untrained() -> Self {
        Self {
            optimizer: "none".into(),
            learning_rate: 0.0,
            epochs: 0,
            seed: 0,
            loss_history: Vec::new(),
        }
    }
}

/// A classifier with fixed weights. Immutable after training and `Sync`, so
/// it can be queried from many threads.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelHandle {
    pub arch: ArchSpec,
    pub input: InputShape,
    pub num_classes: usize,
    pub weights: Vec<Tensor>,
    pub meta: TrainMeta,
}

impl ModelHandle {
    /// He-uniform weights, zero biases.
    pub fn init(arch: ArchSpec, input: InputShape, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        if num_classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let need = match arch.family {
            Family::Mlp => 1,
            Family::CnnD => 2,
            _ => 4,
        };
        if input.height < need || input.width < need {
            return Err(Error::shape(format!("input {input:?} too small for {}", arch.family)));
        }
        let weights = arch
            .param_shapes(input, num_classes)
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    let bound = (6.0 / fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("shape product")
                }
            })
            .collect();
        Ok(Self {
            arch,
            input,
            num_classes,
            weights,
            meta: TrainMeta::untrained(),
        })
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeroed(arch: ArchSpec, input: InputShape, num_classes: usize) -> Self {
        let weights = arch
            .param_shapes(input, num_classes)
            .iter()
            .map(|s| Tensor::zeros(s))
            .collect();
        Self {
            arch,
            input,
            num_classes,
            weights,
            meta: TrainMeta::untrained(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::len).sum()
    }

    pub fn weight_l2_norm(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Records the weights on `tape`; `trainable` decides leaf vs constant.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        self.weights
            .iter()
            .map(|w| {
                if trainable {
                    tape.leaf(w.clone())
                } else {
                    tape.constant(w.clone())
                }
            })
            .collect()
    }

    /// Logits `[B, classes]` for a `[B, C, H, W]` batch.
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>, mode: Mode<'_>) -> Result<Var<'t>> {
        let xs = x.shape();
        let dims = self.input.dims();
        if xs.len() != 4 || xs[1..] != dims {
            return Err(Error::shape(format!(
                "model expects [B, {}, {}, {}] input, got {xs:?}",
                dims[0], dims[1], dims[2]
            )));
        }
        let b = xs[0];
        let p = params;
        let h = match self.arch.family {
            Family::Mlp => {
                let z = x.reshape(&[b, self.input.len()])?;
                let z = z.matmul(p[0])?.bias_add(p[1])?.relu();
                z.matmul(p[2])?.bias_add(p[3])?.relu()
            }
            Family::CnnA => {
                let z = x.conv2d(p[0], 1)?.bias_add(p[1])?.relu().max_pool2()?;
                let z = z.conv2d(p[2], 1)?.bias_add(p[3])?.relu().max_pool2()?;
                let n = z.value().len() / b;
                z.reshape(&[b, n])?
            }
            Family::CnnB => {
                let z = x.conv2d(p[0], 1)?.bias_add(p[1])?.relu().max_pool2()?;
                let z = z.conv2d(p[2], 1)?.bias_add(p[3])?.relu().max_pool2()?;
                let z = z.conv2d(p[4], 1)?.bias_add(p[5])?.relu();
                let n = z.value().len() / b;
                z.reshape(&[b, n])?
            }
            Family::CnnC => {
                let z = x.conv2d(p[0], 2)?.bias_add(p[1])?.relu().max_pool2()?;
                let z = z.conv2d(p[2], 1)?.bias_add(p[3])?.relu().max_pool2()?;
                let z = z.conv2d(p[4], 1)?.bias_add(p[5])?.relu();
                let n = z.value().len() / b;
                z.reshape(&[b, n])?.matmul(p[6])?.bias_add(p[7])?.relu()
            }
            Family::CnnD => {
                let z = x.conv2d(p[0], 2)?.bias_add(p[1])?.relu().max_pool2()?;
                let z = z.conv2d(p[2], 2)?.bias_add(p[3])?.relu();
                z.global_avg_pool()?
            }
        };
        let h = match mode {
            Mode::Train(rng) if self.arch.dropout > 0.0 => {
                let keep = 1.0 - self.arch.dropout;
                let shape = h.shape();
                let n = shape.iter().product();
                let mask = (0..n)
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                h.mul_const(&Tensor::new(shape, mask)?)?
            }
            _ => h,
        };
        let last = p.len();
        h.matmul(p[last - 2])?.bias_add(p[last - 1])
    }

    fn as_batch(&self, x: &Tensor) -> Result<Tensor> {
        let dims = self.input.dims();
        if x.shape() == dims {
            x.reshape(&[1, dims[0], dims[1], dims[2]])
        } else if x.shape().len() == 4 && x.shape()[1..] == dims {
            Ok(x.clone())
        } else {
            Err(Error::shape(format!("input shape {:?} does not match model input {:?}", x.shape(), dims)))
        }
    }

    /// Logit vector for one `[C, H, W]` input.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let batch = self.as_batch(x)?;
        if batch.shape()[0] != 1 {
            return Err(Error::shape("logits takes a single sample; use logits_batch"));
        }
        Ok(self.logits_batch(&batch)?.pop().expect("one row"))
    }

    /// Logit rows for a `[B, C, H, W]` batch.
    pub fn logits_batch(&self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        let batch = self.as_batch(batch)?;
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let x = tape.constant(batch);
        let out = self.forward(&params, x, Mode::Eval)?;
        let v = out.value();
        Ok(v.data().chunks(self.num_classes).map(<[f64]>::to_vec).collect())
    }

    /// Hard label; ties go to the lowest class index.
    pub fn predict_label(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    /// Softmax probabilities for one input.
    pub fn probabilities(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    /// Hard labels for a list of sample indices, evaluated in chunks.
    pub fn predict_indices(&self, data: &LabeledDataset, indices: &[usize]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(256) {
            let (x, _) = data.batch(chunk);
            out.extend(self.logits_batch(&x)?.iter().map(|r| argmax(r)));
        }
        Ok(out)
    }

    /// Fraction of `indices` classified correctly (0 for an empty set).
    pub fn accuracy(&self, data: &LabeledDataset, indices: &[usize]) -> Result<f64> {
        if indices.is_empty() {
            return Ok(0.0);
        }
        let preds = self.predict_indices(data, indices)?;
        let correct = preds
            .iter()
            .zip(indices)
            .filter(|(p, &i)| **p == data.samples[i].label)
            .count();
        Ok(correct as f64 / indices.len() as f64)
    }

    /// Mean cross-entropy on `(x, y)` and its gradient with respect to the
    /// input `x` (`[C, H, W]`). Weights are constants on the tape.
    pub fn input_gradient(&self, x: &Tensor, y: usize) -> Result<(f64, Tensor)> {
        let tape = Tape::new();
        let params = self.bind(&tape, false);
        let leaf = tape.leaf(x.clone());
        let dims = self.input.dims();
        let xb = leaf.reshape(&[1, dims[0], dims[1], dims[2]])?;
        let loss = self.forward(&params, xb, Mode::Eval)?.cross_entropy(&[y])?;
        let l = loss.value().item();
        let mut g = tape.backward(loss)?;
        Ok((l, g.take(leaf)))
    }
}
