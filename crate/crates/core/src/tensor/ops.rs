//! Raw numeric kernels shared by forward and backward passes. All of them
//! accumulate into `out` rather than overwrite it.

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn matmul_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            *o += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn matmul_grad_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    /// Output index ranges `[lo, hi)` along one axis for kernel offset `kofs`,
    /// keeping the input coordinate in bounds.
    fn valid(&self, kofs: usize, input: usize, output: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kofs);
        let hi = (input + self.pad).saturating_sub(kofs).min(output);
        (lo, hi.max(lo))
    }

    /// Visits every unfolded row `(ci, ky, kx)` with its valid
    /// output spans. `f(row, oy, iy, ox0, ix0, len, ci)`.
    #[inline]
    fn for_each_span(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
        let (ho, wo) = (self.out_h(), self.out_w());
        for ci in 0..self.c_in {
            for ky in 0..self.k {
                let (oy0, oy1) = self.valid(ky, self.h, ho);
                for kx in 0..self.k {
                    let (ox0, ox1) = self.valid(kx, self.w, wo);
                    if ox1 <= ox0 {
                        continue;
                    }
                    let row = (ci * self.k + ky) * self.k + kx;
                    for oy in oy0..oy1 {
                        f(row, oy, oy + ky - self.pad, ox0, ox0 + kx - self.pad, ox1 - ox0, ci);
                    }
                }
            }
        }
    }
}

/// Unfolds image `b` of `x` into `[c_in * k * k, out_h * out_w]` columns.
fn im2col(x: &[f64], d: ConvDims, b: usize, cols: &mut [f64]) {
    let hw = d.out_h() * d.out_w();
    cols.fill(0.0);
    d.for_each_span(|row, oy, iy, ox0, ix0, len, ci| {
        let ibase = ((b * d.c_in + ci) * d.h + iy) * d.w + ix0;
        let cbase = row * hw + oy * d.out_w() + ox0;
        cols[cbase..cbase + len].copy_from_slice(&x[ibase..ibase + len]);
    });
}

/// Adds columns back onto image `b` of `out`; the adjoint of `im2col`.
fn col2im(cols: &[f64], d: ConvDims, b: usize, out: &mut [f64]) {
    let hw = d.out_h() * d.out_w();
    d.for_each_span(|row, oy, iy, ox0, ix0, len, ci| {
        let ibase = ((b * d.c_in + ci) * d.h + iy) * d.w + ix0;
        let cbase = row * hw + oy * d.out_w() + ox0;
        for (o, &c) in out[ibase..ibase + len].iter_mut().zip(&cols[cbase..cbase + len]) {
            *o += c;
        }
    });
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], d: ConvDims, out: &mut [f64]) {
    let (rows, hw) = (d.c_in * d.k * d.k, d.out_h() * d.out_w());
    let mut cols = vec![0.0; rows * hw];
    for b in 0..d.batch {
        im2col(x, d, b, &mut cols);
        let o = &mut out[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        matmul_acc(w, &cols, d.c_out, rows, hw, o);
    }
}

pub(crate) fn conv2d_grad_input(g: &[f64], w: &[f64], d: ConvDims, out: &mut [f64]) {
    let (rows, hw) = (d.c_in * d.k * d.k, d.out_h() * d.out_w());
    let mut cols = vec![0.0; rows * hw];
    for b in 0..d.batch {
        cols.fill(0.0);
        matmul_grad_b(w, &g[b * d.c_out * hw..(b + 1) * d.c_out * hw], d.c_out, rows, hw, &mut cols);
        col2im(&cols, d, b, out);
    }
}

pub(crate) fn conv2d_grad_weight(g: &[f64], x: &[f64], d: ConvDims, out: &mut [f64]) {
    let (rows, hw) = (d.c_in * d.k * d.k, d.out_h() * d.out_w());
    let mut cols = vec![0.0; rows * hw];
    for b in 0..d.batch {
        im2col(x, d, b, &mut cols);
        matmul_grad_a(&g[b * d.c_out * hw..(b + 1) * d.c_out * hw], &cols, d.c_out, rows, hw, out);
    }
}

/// 2x2 stride-2 max pooling over the trailing two axes of `[planes, h, w]`.
/// Returns the pooled values and the flat input index chosen for each output.
pub(crate) fn maxpool2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

/// Direct 2-D convolution of each `[h, w]` plane with a square
/// kernel of odd side `2r+1`, zero padded, same-size output.
pub(crate) fn smooth_planes(x: &[f64], planes: usize, h: usize, w: usize, kernel: &[f64], r: usize) -> Vec<f64> {
    let side = 2 * r + 1;
    let mut out = vec![0.0; x.len()];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ky in 0..side {
                    let iy = y as isize + ky as isize - r as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..side {
                        let ix = xx as isize + kx as isize - r as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += kernel[ky * side + kx] * x[base + iy as usize * w + ix as usize];
                    }
                }
                out[base + y * w + xx] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition with signed arithmetic, no span bookkeeping.
    fn conv_reference(x: &[f64], w: &[f64], d: ConvDims) -> Vec<f64> {
        let (ho, wo) = (d.out_h(), d.out_w());
        let mut out = vec![0.0; d.batch * d.c_out * ho * wo];
        for b in 0..d.batch {
            for co in 0..d.c_out {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..d.c_in {
                            for ky in 0..d.k {
                                for kx in 0..d.k {
                                    let iy = oy as isize + ky as isize - d.pad as isize;
                                    let ix = ox as isize + kx as isize - d.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                        continue;
                                    }
                                    acc += w[((co * d.c_in + ci) * d.k + ky) * d.k + kx]
                                        * x[((b * d.c_in + ci) * d.h + iy as usize) * d.w + ix as usize];
                                }
                            }
                        }
                        out[((b * d.c_out + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_reference() {
        for (pad, k) in [(0, 3), (1, 3), (2, 5), (1, 2)] {
            let d = ConvDims { batch: 2, c_in: 2, h: 5, w: 6, c_out: 3, k, pad };
            let x: Vec<f64> = (0..d.batch * d.c_in * d.h * d.w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
            let w: Vec<f64> = (0..d.c_out * d.c_in * k * k).map(|i| ((i * 3) % 5) as f64 * 0.5 - 1.0).collect();
            let mut out = vec![0.0; d.batch * d.c_out * d.out_h() * d.out_w()];
            conv2d_forward(&x, &w, d, &mut out);
            assert_eq!(out, conv_reference(&x, &w, d), "pad {pad} k {k}");
        }
    }

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn maxpool_picks_first_max() {
        let x = [1.0, 1.0, 0.0, 2.0, 1.0, 1.0, 3.0, 0.0];
        let (v, idx) = maxpool2(&x, 1, 2, 4);
        assert_eq!(v, vec![1.0, 3.0]);
        assert_eq!(idx, vec![0, 6]);
    }
}
