//! im2col convolution kernels and 2×2 max pooling.
//!
//! Column layout: row `(c·kh + i)·kw + j`, column `oy·out_w + ox`, which is
//! the flattening order of a `[F × C × kh × kw]` weight tensor.

use super::ops::{gemm_into, mm, View};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Output extent of a sliding window, or `None` when it is not a positive integer.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = (input + 2 * padding).checked_sub(kernel)?;
    if stride == 0 || span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

impl ConvGeometry {
    pub fn resolve(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let ([n, c, h, wd], [f, wc, kh, kw]) = (x, w) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected x [N × C × H × W] and w [F × C × h × w], got {x:?} and {w:?}"),
            ));
        };
        if c != wc {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::geometry("conv2d", "stride must be positive"));
        }
        let out_h = output_extent(*h, *kh, stride, padding);
        let out_w = output_extent(*wd, *kw, stride, padding);
        let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
            return Err(Error::geometry(
                "conv2d",
                format!(
                    "input {h}×{wd}, kernel {kh}×{kw}, stride {stride}, padding {padding} \
                     gives a non-integral output extent"
                ),
            ));
        };
        Ok(Self {
            batch: *n,
            channels: *c,
            in_h: *h,
            in_w: *wd,
            filters: *f,
            kernel_h: *kh,
            kernel_w: *kw,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let area = self.out_area();
        for c in 0..self.channels {
            for i in 0..self.kernel_h {
                for j in 0..self.kernel_w {
                    let row = (c * self.kernel_h + i) * self.kernel_w + j;
                    for oy in 0..self.out_h {
                        let y = (oy * self.stride + i) as isize - self.padding as isize;
                        if y < 0 || y >= self.in_h as isize {
                            continue;
                        }
                        let src_row = (c * self.in_h + y as usize) * self.in_w;
                        let dst_row = row * area + oy * self.out_w;
                        for ox in 0..self.out_w {
                            let x = (ox * self.stride + j) as isize - self.padding as isize;
                            if x < 0 || x >= self.in_w as isize {
                                continue;
                            }
                            f(dst_row + ox, src_row + x as usize);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    col.fill(T::zero());
    g.for_each_tap(|dst, src| col[dst] = x[src]);
}

fn col2im_add<T: Scalar>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    g.for_each_tap(|src, dst| dx[dst] += col[src]);
}

/// Returns the output and, when `keep_cols`, every sample's column buffer.
pub(crate) fn forward<T: Scalar>(g: &ConvGeometry, x: &[T], w: &[T], keep_cols: bool) -> (Vec<T>, Vec<T>) {
    let (pl, area) = (g.patch_len(), g.out_area());
    let col_len = pl * area;
    let out_len = g.filters * area;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = if keep_cols {
        vec![T::zero(); g.batch * col_len]
    } else {
        vec![T::zero(); col_len]
    };
    let wv = View::new(w, g.filters, pl);
    for n in 0..g.batch {
        let col = if keep_cols {
            &mut cols[n * col_len..(n + 1) * col_len]
        } else {
            &mut cols[..]
        };
        im2col(g, &x[n * g.in_len()..(n + 1) * g.in_len()], col);
        gemm_into(
            wv,
            View::new(col, pl, area),
            T::zero(),
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    if !keep_cols {
        cols = Vec::new();
    }
    (out, cols)
}

pub(crate) fn backward<T: Scalar>(
    g: &ConvGeometry,
    w: &[T],
    cols: &[T],
    grad_out: &[T],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (pl, area) = (g.patch_len(), g.out_area());
    let col_len = pl * area;
    let out_len = g.filters * area;
    let mut dw = want_w.then(|| vec![T::zero(); g.filters * pl]);
    let mut dx = want_x.then(|| vec![T::zero(); g.batch * g.in_len()]);
    let wv = View::new(w, g.filters, pl);
    for n in 0..g.batch {
        let gy = View::new(&grad_out[n * out_len..(n + 1) * out_len], g.filters, area);
        if let Some(dw) = dw.as_mut() {
            let col = View::new(&cols[n * col_len..(n + 1) * col_len], pl, area);
            gemm_into(gy, col.t(), T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dcol = mm(wv.t(), gy);
            col2im_add(g, &dcol, &mut dx[n * g.in_len()..(n + 1) * g.in_len()]);
        }
    }
    (dx, dw)
}

/// 2×2/stride-2 max pool (floor semantics). Returns values, shape, and the
/// flat input index each output came from (first maximum wins ties).
pub(crate) fn maxpool2<T: Scalar>(shape: &[usize], x: &[T]) -> Result<(Vec<T>, Vec<usize>, Vec<usize>)> {
    let [n, c, h, w] = shape else {
        return Err(Error::shape("maxpool2d", format!("expected [N × C × H × W], got {shape:?}")));
    };
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(Error::geometry("maxpool2d", format!("input {h}×{w} is smaller than the 2×2 window")));
    }
    let planes = n * c;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut argmax = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((out, vec![*n, *c, oh, ow], argmax))
}
