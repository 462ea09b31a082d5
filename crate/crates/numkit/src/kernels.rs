//! Raw array kernels behind the tape operations.

use crate::scalar::Scalar;

/// Stride, dilation and zero-padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

impl ConvSpec {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }
}

/// Output length along one axis, or `None` when the window does not fit.
pub fn conv_output_len(input: usize, kernel: usize, spec: ConvSpec) -> Option<usize> {
    if spec.stride == 0 || spec.dilation == 0 || kernel == 0 {
        return None;
    }
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.padding;
    (padded >= span).then(|| (padded - span) / spec.stride + 1)
}

pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.spec.stride + k * self.spec.dilation) as isize - self.spec.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Unfolds one image `[C_in,H,W]` into `[C_in·kh·kw, Ho·Wo]`.
    pub fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let hw = self.col_cols();
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let out = &mut cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let sy = self.src(oy, ki, self.h);
                        for ox in 0..self.wo {
                            out[oy * self.wo + ox] = match (sy, self.src(ox, kj, self.w)) {
                                (Some(y), Some(x)) => plane[y * self.w + x],
                                _ => T::zero(),
                            };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters columns back, accumulating.
    pub fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let hw = self.col_cols();
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &mut image[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let src = &cols[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let Some(y) = self.src(oy, ki, self.h) else { continue };
                        for ox in 0..self.wo {
                            if let Some(x) = self.src(ox, kj, self.w) {
                                plane[y * self.w + x] = plane[y * self.w + x] + src[oy * self.wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv_forward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    batch: usize,
    c_out: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = c_out * g.col_cols();
    let mut out = vec![T::zero(); batch * out_sz];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.col_rows() * g.col_cols() }];
    for b in 0..batch {
        let img = &input[b * in_sz..(b + 1) * in_sz];
        let dst = &mut out[b * out_sz..(b + 1) * out_sz];
        let cols_ref: &[T] = if g.is_pointwise() {
            img
        } else {
            g.im2col(img, &mut cols);
            &cols
        };
        T::gemm(c_out, g.col_rows(), g.col_cols(), kernel, false, cols_ref, false, dst, false);
    }
    out
}

/// Returns `(d_input, d_kernel)`; either may be skipped.
pub(crate) fn conv_backward<T: Scalar>(
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    batch: usize,
    c_out: usize,
    g: &ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = c_out * g.col_cols();
    let (rows, hw) = (g.col_rows(), g.col_cols());
    let mut d_in = want_input.then(|| vec![T::zero(); batch * in_sz]);
    let mut d_k = want_kernel.then(|| vec![T::zero(); c_out * rows]);
    let mut cols = vec![T::zero(); rows * hw];
    let mut d_cols = vec![T::zero(); rows * hw];
    for b in 0..batch {
        let img = &input[b * in_sz..(b + 1) * in_sz];
        let go = &grad_out[b * out_sz..(b + 1) * out_sz];
        if let Some(dk) = d_k.as_mut() {
            let cols_ref: &[T] = if g.is_pointwise() {
                img
            } else {
                g.im2col(img, &mut cols);
                &cols
            };
            T::gemm(c_out, hw, rows, go, false, cols_ref, true, dk, true);
        }
        if let Some(di) = d_in.as_mut() {
            let dst = &mut di[b * in_sz..(b + 1) * in_sz];
            if g.is_pointwise() {
                T::gemm(rows, c_out, hw, kernel, true, go, false, dst, false);
            } else {
                T::gemm(rows, c_out, hw, kernel, true, go, false, &mut d_cols, false);
                g.col2im(&d_cols, dst);
            }
        }
    }
    (d_in, d_k)
}

/// Source index pairs and weights for bilinear upsampling along one axis
/// (half-pixel centers, edge clamped).
pub(crate) fn bilinear_taps(out_len: usize, in_len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
