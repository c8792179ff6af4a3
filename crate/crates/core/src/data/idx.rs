//! IDX (MNIST-style) import/export: big-endian u32 header, unsigned bytes.
//!
//! Images use magic `0x00000803` (`[n, h, w]`) or `0x00000804`
//! (`[n, c, h, w]`); labels use `0x00000801`.

use std::fs;
use std::path::Path;

use super::{InputShape, LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_FILE: &str = "images.idx";
pub const IDX_LABELS_FILE: &str = "labels.idx";

const UBYTE: u8 = 0x08;

fn read_header(bytes: &[u8], what: &str) -> Result<(usize, Vec<usize>, usize)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format(format!("{what}: bad IDX magic")));
    }
    if bytes[2] != UBYTE {
        return Err(Error::Format(format!("{what}: unsupported element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format(format!("{what}: truncated header")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(Error::Format(format!(
            "{what}: header declares {n} values, file holds {}",
            bytes.len().saturating_sub(header)
        )));
    }
    Ok((ndim, dims, header))
}

/// Loads an image/label IDX pair; pixel bytes are scaled to `[0, 1]`.
/// The class count is `max(label) + 1`.
pub fn load_idx_dataset(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let img = fs::read(images)?;
    let lab = fs::read(labels)?;
    let (ndim, dims, ih) = read_header(&img, "images")?;
    let input = match (ndim, dims.as_slice()) {
        (3, &[_, h, w]) => InputShape::new(1, h, w),
        (4, &[_, c, h, w]) => InputShape::new(c, h, w),
        _ => {
            return Err(Error::Format(format!(
                "images: expected 3 or 4 dimensions, got {ndim}"
            )))
        }
    };
    let (lndim, ldims, lh) = read_header(&lab, "labels")?;
    if lndim != 1 {
        return Err(Error::Format(format!("labels: expected 1 dimension, got {lndim}")));
    }
    let n = dims[0];
    if ldims[0] != n {
        return Err(Error::Format(format!(
            "label count {} does not match image count {n}",
            ldims[0]
        )));
    }
    let per = input.len();
    let labels = &lab[lh..];
    let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let samples = (0..n)
        .map(|i| {
            let px = &img[ih + i * per..ih + (i + 1) * per];
            Sample {
                image: Tensor::new(input.dims().to_vec(), px.iter().map(|&b| b as f64 / 255.0).collect())
                    .expect("dims match"),
                label: labels[i] as usize,
            }
        })
        .collect();
    let name = images
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    LabeledDataset::new(name, num_classes, input, samples)
}

/// Loads `images.idx` / `labels.idx` from a directory.
pub fn load_idx_dir(dir: &Path) -> Result<LabeledDataset> {
    load_idx_dataset(&dir.join(IDX_IMAGES_FILE), &dir.join(IDX_LABELS_FILE))
}

/// Writes an image/label IDX pair. Pixels are rounded to the nearest 1/255.
pub fn export_idx(ds: &LabeledDataset, images: &Path, labels: &Path) -> Result<()> {
    if ds.num_classes > 256 {
        return Err(Error::invalid("IDX labels are single bytes; at most 256 classes"));
    }
    let n = ds.len() as u32;
    let InputShape { channels, height, width } = ds.input;
    let mut img = Vec::with_capacity(20 + ds.len() * ds.input.len());
    if channels == 1 {
        img.extend_from_slice(&[0, 0, UBYTE, 3]);
        for d in [n, height as u32, width as u32] {
            img.extend_from_slice(&d.to_be_bytes());
        }
    } else {
        img.extend_from_slice(&[0, 0, UBYTE, 4]);
        for d in [n, channels as u32, height as u32, width as u32] {
            img.extend_from_slice(&d.to_be_bytes());
        }
    }
    for s in &ds.samples {
        img.extend(s.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&[0, 0, UBYTE, 1]);
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(ds.samples.iter().map(|s| s.label as u8));
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    Ok(())
}
