//! Raw numeric kernels shared by the tape ops and the decoder.

use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate range `[lo, hi)` of output positions whose tap `k`
    /// lands inside an axis of length `len`.
    fn valid_range(&self, k: usize, len: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.padding as isize;
        // need 0 <= o*s + off < len
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((len as isize - off + s - 1) / s).clamp(0, out as isize);
        (lo.min(out as isize) as usize, hi.max(0) as usize)
    }
}

/// Unfolds one `C x H x W` image into a `(C*K*K) x (OH*OW)` column matrix.
pub(crate) fn im2col<T: Float>(input: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let ncols = g.col_cols();
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.height, g.out_h);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.width, g.out_w);
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                dst.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if s == 1 {
                        let ix0 = ox_lo + kx - p;
                        out_row[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            out_row[ox] = src[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im<T: Float>(cols: &[T], g: &ConvGeom, input_grad: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut input_grad[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, g.height, g.out_h);
            for kx in 0..k {
                let (ox_lo, ox_hi) = g.valid_range(kx, g.width, g.out_w);
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in oy_lo..oy_hi {
                    let iy = oy * s + ky - p;
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let col_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * s + kx - p] += col_row[ox];
                    }
                }
            }
        }
    }
}

/// One output coordinate of a half-pixel-center bilinear resize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`.
    pub frac: f64,
}

/// Sampling taps along one axis (align-corners-false convention).
pub(crate) fn resize_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, frac }
        })
        .collect()
}

/// Resizes each `in_h x in_w` plane of `input` into `output`.
///
/// Interpolation is written in lerp form so a constant plane stays bitwise
/// constant.
pub(crate) fn resize_forward<T: Float>(
    input: &[T],
    planes: usize,
    (in_h, in_w): (usize, usize),
    ys: &[Tap],
    xs: &[Tap],
    output: &mut [T],
) {
    let (out_h, out_w) = (ys.len(), xs.len());
    for c in 0..planes {
        let src = &input[c * in_h * in_w..(c + 1) * in_h * in_w];
        let dst = &mut output[c * out_h * out_w..(c + 1) * out_h * out_w];
        for (oy, ty) in ys.iter().enumerate() {
            let ly = T::lit(ty.frac);
            let r0 = &src[ty.lo * in_w..(ty.lo + 1) * in_w];
            let r1 = &src[ty.hi * in_w..(ty.hi + 1) * in_w];
            for (ox, tx) in xs.iter().enumerate() {
                let lx = T::lit(tx.frac);
                let top = r0[tx.lo] + lx * (r0[tx.hi] - r0[tx.lo]);
                let bot = r1[tx.lo] + lx * (r1[tx.hi] - r1[tx.lo]);
                dst[oy * out_w + ox] = top + ly * (bot - top);
            }
        }
    }
}

pub(crate) fn resize_backward<T: Float>(
    grad_out: &[T],
    planes: usize,
    (in_h, in_w): (usize, usize),
    ys: &[Tap],
    xs: &[Tap],
    grad_in: &mut [T],
) {
    let (out_h, out_w) = (ys.len(), xs.len());
    let one = T::one();
    for c in 0..planes {
        let g = &grad_out[c * out_h * out_w..(c + 1) * out_h * out_w];
        let dst = &mut grad_in[c * in_h * in_w..(c + 1) * in_h * in_w];
        for (oy, ty) in ys.iter().enumerate() {
            let ly = T::lit(ty.frac);
            for (ox, tx) in xs.iter().enumerate() {
                let lx = T::lit(tx.frac);
                let v = g[oy * out_w + ox];
                dst[ty.lo * in_w + tx.lo] += v * (one - lx) * (one - ly);
                dst[ty.lo * in_w + tx.hi] += v * lx * (one - ly);
                dst[ty.hi * in_w + tx.lo] += v * (one - lx) * ly;
                dst[ty.hi * in_w + tx.hi] += v * lx * ly;
            }
        }
    }
}

pub fn sigmoid<T: Float>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `ln(e^a + e^b + e^c)`.
pub(crate) fn log_sum_exp3<T: Float>(a: T, b: T, c: T) -> T {
    let m = a.max(b).max(c);
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}
