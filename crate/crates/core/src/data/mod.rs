//! Datasets, the train/attack split protocol, and image augmentations.

mod augment;
mod idx;
mod split;
mod synth;

pub use augment::{augment, Augmentation};
pub use idx::{export_idx, load_idx_dataset, load_idx_dir, IDX_IMAGES_FILE, IDX_LABELS_FILE};
pub use split::{make_split, SplitPlan, SplitSizes};
pub use synth::{synth_dataset, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-sample image geometry `[channels, height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[channels, height, width]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub num_classes: usize,
    pub input: InputShape,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, num_classes: usize, input: InputShape, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            num_classes,
            input,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Checks label range, image shape and the `[0, 1]` value box.
    pub fn validate(&self) -> Result<()> {
        let dims = self.input.dims();
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.num_classes {
                return Err(Error::invalid(format!(
                    "sample {i}: label {} outside [0, {})",
                    s.label, self.num_classes
                )));
            }
            if s.image.shape() != dims {
                return Err(Error::shape(format!(
                    "sample {i}: image shape {:?}, expected {:?}",
                    s.image.shape(),
                    dims
                )));
            }
            if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("sample {i}: pixel outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            input: self.input,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Stacks the selected samples into a `[B, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.input.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
            labels.push(self.samples[i].label);
        }
        let [c, h, w] = self.input.dims();
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent sample shapes");
        (t, labels)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}
