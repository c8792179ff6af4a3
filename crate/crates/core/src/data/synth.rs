use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{InputShape, LabeledDataset, Sample};
use crate::error::{Error, Result};
use crate::rng::stage_rng;
use crate::tensor::Tensor;

/// Generator parameters for the structured synthetic image set.
///
/// Each class owns a template made of a few soft line strokes. A sample
/// re-renders its class template through a random affine map and a smooth
/// displacement field, mixes in a faint stroke from another class, adds pixel
/// noise and is quantized to 8 bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Strokes per class template.
    pub strokes: usize,
    /// Stroke half-width (pixels, Gaussian profile sigma).
    pub stroke_sigma: f64,
    /// Max translation in pixels.
    pub shift: f64,
    /// Max rotation in degrees.
    pub rotation: f64,
    /// Std-dev of the smooth displacement field, pixels.
    pub elastic: f64,
    /// Pixel noise std-dev.
    pub noise: f64,
    /// Upper bound on the weight of a stroke borrowed from another class.
    pub confusion: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            per_class: 300,
            channels: 1,
            height: 16,
            width: 16,
            strokes: 3,
            stroke_sigma: 0.8,
            shift: 2.0,
            rotation: 20.0,
            elastic: 1.0,
            noise: 0.35,
            confusion: 0.7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(4..=10).contains(&self.num_classes) {
            return Err(Error::invalid(format!(
                "num_classes must be in [4, 10], got {}",
                self.num_classes
            )));
        }
        if self.per_class == 0 || self.channels == 0 || self.height < 4 || self.width < 4 {
            return Err(Error::invalid("per_class, channels must be >= 1 and image sides >= 4"));
        }
        if self.strokes == 0 {
            return Err(Error::invalid("strokes must be >= 1"));
        }
        for (name, v) in [
            ("stroke_sigma", self.stroke_sigma),
            ("shift", self.shift),
            ("rotation", self.rotation),
            ("elastic", self.elastic),
            ("noise", self.noise),
            ("confusion", self.confusion),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> InputShape {
        InputShape::new(self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug)]
struct Stroke {
    a: (f64, f64),
    b: (f64, f64),
    /// Per-channel intensity.
    tint: [f64; 3],
}

impl Stroke {
    fn dist2(&self, p: (f64, f64)) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        };
        let (cx, cy) = (self.a.0 + t * dx - p.0, self.a.1 + t * dy - p.1);
        cx * cx + cy * cy
    }
}

fn random_template(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<Stroke> {
    // Strokes live in normalized [-1, 1]^2 coordinates; keep a margin so the
    // augmentation does not push them off the canvas.
    (0..spec.strokes)
        .map(|_| {
            let mut pt = || (rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7));
            let a = pt();
            let b = pt();
            let tint = [
                rng.random_range(0.6..1.0),
                rng.random_range(0.6..1.0),
                rng.random_range(0.6..1.0),
            ];
            Stroke { a, b, tint }
        })
        .collect()
}

/// Bilinearly interpolated displacement field on a 4x4 control grid.
struct Field {
    grid: [[(f64, f64); 4]; 4],
}

impl Field {
    fn random(rng: &mut ChaCha8Rng, sigma: f64) -> Self {
        let normal = Normal::new(0.0, sigma.max(1e-12)).expect("valid sigma");
        let mut grid = [[(0.0, 0.0); 4]; 4];
        for row in grid.iter_mut() {
            for cell in row.iter_mut() {
                *cell = if sigma == 0.0 {
                    (0.0, 0.0)
                } else {
                    (normal.sample(rng), normal.sample(rng))
                };
            }
        }
        Self { grid }
    }

    /// `u, v` in `[0, 1]`.
    fn at(&self, u: f64, v: f64) -> (f64, f64) {
        let (gx, gy) = (u * 3.0, v * 3.0);
        let (x0, y0) = ((gx.floor() as usize).min(2), (gy.floor() as usize).min(2));
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(self.grid[y0][x0], self.grid[y0][x0 + 1], fx);
        let bot = lerp(self.grid[y0 + 1][x0], self.grid[y0 + 1][x0 + 1], fx);
        lerp(top, bot, fy)
    }
}

/// Deterministic class-structured image set (see [`SynthSpec`]).
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut trng = stage_rng(seed, "synth/templates");
    let templates: Vec<Vec<Stroke>> = (0..spec.num_classes).map(|_| random_template(&mut trng, spec)).collect();

    let mut rng = stage_rng(seed, "synth/samples");
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid sigma");
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    // pixels per normalized unit
    let scale = 0.5 * (h.min(w) as f64 - 1.0);
    let inv2s2 = 1.0 / (2.0 * spec.stroke_sigma.max(1e-6).powi(2));

    let mut samples = Vec::with_capacity(spec.num_classes * spec.per_class);
    for label in 0..spec.num_classes {
        for _ in 0..spec.per_class {
            let theta = rng.random_range(-spec.rotation..=spec.rotation).to_radians();
            let zoom = rng.random_range(0.85..1.15);
            let (tx, ty) = (
                rng.random_range(-spec.shift..=spec.shift),
                rng.random_range(-spec.shift..=spec.shift),
            );
            let field = Field::random(&mut rng, spec.elastic);
            let other = (label + rng.random_range(1..spec.num_classes)) % spec.num_classes;
            let borrowed = templates[other][rng.random_range(0..spec.strokes)];
            let borrowed_weight = rng.random_range(0.0..=spec.confusion);
            let gain = rng.random_range(0.7..1.0);

            let (sin, cos) = theta.sin_cos();
            let mut data = vec![0.0; c * h * w];
            for y in 0..h {
                for x in 0..w {
                    // pixel -> centered pixel coords, undo the sample warp,
                    // then map into template space
                    let (d0, d1) = field.at(x as f64 / (w - 1) as f64, y as f64 / (h - 1) as f64);
                    let px = x as f64 - 0.5 * (w - 1) as f64 - tx + d0;
                    let py = y as f64 - 0.5 * (h - 1) as f64 - ty + d1;
                    let rx = (cos * px + sin * py) / (zoom * scale);
                    let ry = (-sin * px + cos * py) / (zoom * scale);
                    let p = (rx, ry);
                    for ch in 0..c {
                        let mut v: f64 = 0.0;
                        for s in &templates[label] {
                            let d2 = s.dist2(p) * scale * scale;
                            v = v.max(s.tint[ch % 3] * (-d2 * inv2s2).exp());
                        }
                        let d2 = borrowed.dist2(p) * scale * scale;
                        v = v.max(borrowed_weight * borrowed.tint[ch % 3] * (-d2 * inv2s2).exp());
                        data[(ch * h + y) * w + x] = v * gain;
                    }
                }
            }
            for v in data.iter_mut() {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                *v = quantize((*v + n).clamp(0.0, 1.0));
            }
            samples.push(Sample {
                image: Tensor::new(vec![c, h, w], data)?,
                label,
            });
        }
    }
    LabeledDataset::new(format!("synth-c{}-s{seed}", spec.num_classes), spec.num_classes, spec.input_shape(), samples)
}

/// Snap to the 8-bit grid so IDX export is lossless.
fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_classes: 4,
            per_class: 50,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn balanced_labels() {
        let ds = synth_dataset(&small(), 1).unwrap();
        assert_eq!(ds.len(), 200);
        assert_eq!(ds.class_counts(), vec![50; 4]);
    }

    #[test]
    fn deterministic_bytes() {
        let a = synth_dataset(&small(), 1).unwrap();
        let b = synth_dataset(&small(), 1).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(&small(), 2).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn values_in_box() {
        let ds = synth_dataset(&small(), 3).unwrap();
        ds.validate().unwrap();
    }

    #[test]
    fn class_count_range_enforced() {
        let spec = SynthSpec {
            num_classes: 3,
            ..small()
        };
        assert!(synth_dataset(&spec, 0).is_err());
    }
}
