use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    /// Degrees, counter-clockwise about the image center.
    Rotate(f64),
    /// Pixel offsets `(dx, dy)`; vacated pixels are zero.
    Translate(i64, i64),
}

/// Applies `kind` to a `[C, H, W]` image with nearest-neighbour resampling.
pub fn augment(x: &Tensor, kind: Augmentation) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    match kind {
        Augmentation::Rotate(deg) => {
            let (sin, cos) = deg.to_radians().sin_cos();
            let (cy, cx) = (0.5 * (h as f64 - 1.0), 0.5 * (w as f64 - 1.0));
            for y in 0..h {
                for xx in 0..w {
                    // inverse map output pixel to its source
                    let (dx, dy) = (xx as f64 - cx, y as f64 - cy);
                    let sx = (cos * dx - sin * dy + cx).round();
                    let sy = (sin * dx + cos * dy + cy).round();
                    if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                        continue;
                    }
                    let (sx, sy) = (sx as usize, sy as usize);
                    for ch in 0..c {
                        out[(ch * h + y) * w + xx] = src[(ch * h + sy) * w + sx];
                    }
                }
            }
        }
        Augmentation::Translate(dx, dy) => {
            for y in 0..h as i64 {
                let sy = y - dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for xx in 0..w as i64 {
                    let sx = xx - dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    for ch in 0..c {
                        out[(ch * h + y as usize) * w + xx as usize] = src[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape").clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::new(vec![1, h, w], (0..h * w).map(|i| i as f64 / (h * w) as f64).collect()).unwrap()
    }

    #[test]
    fn rotate_zero_is_identity() {
        let x = ramp(5, 7);
        assert_eq!(augment(&x, Augmentation::Rotate(0.0)), x);
    }

    #[test]
    fn translate_round_trip_restores_interior() {
        let x = ramp(6, 6);
        let back = augment(&augment(&x, Augmentation::Translate(1, 0)), Augmentation::Translate(-1, 0));
        for y in 0..6 {
            for xx in 0..5 {
                assert_eq!(back.data()[y * 6 + xx], x.data()[y * 6 + xx]);
            }
        }
        assert_eq!(back.data()[5], 0.0);
    }

    #[test]
    fn four_quarter_turns_identity() {
        for side in [4, 5, 16] {
            let x = ramp(side, side);
            let mut y = x.clone();
            for _ in 0..4 {
                y = augment(&y, Augmentation::Rotate(90.0));
            }
            assert_eq!(y, x, "side {side}");
        }
    }

    #[test]
    fn output_stays_in_box() {
        let x = ramp(8, 8);
        for kind in [Augmentation::Rotate(33.0), Augmentation::Translate(3, -2)] {
            let y = augment(&x, kind);
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
