//! Convolution kernels on raw NCHW buffers (im2col + GEMM).
//!
//! `conv_transpose2d` is implemented as the exact adjoint of `conv2d` with the
//! same kernel tensor, so both share one geometry description.

use super::tensor::{matmul, Real};
use crate::{Error, Result};

/// Geometry of a forward cross-correlation over a single image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                height + 2 * pad,
                width + 2 * pad
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (height + 2 * pad - kh) / stride + 1,
            out_w: (width + 2 * pad - kw) / stride + 1,
        })
    }

    /// Geometry for which a transposed convolution of an `in_h x in_w` map
    /// produces an image of `channels` planes.
    pub fn for_transpose(channels: usize, in_h: usize, in_w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        let full_h = (in_h - 1) * stride + kh;
        let full_w = (in_w - 1) * stride + kw;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape("padding consumes the whole transposed output"));
        }
        let g = Self::new(channels, full_h - 2 * pad, full_w - 2 * pad, kh, kw, stride, pad)?;
        debug_assert_eq!((g.out_h, g.out_w), (in_h, in_w));
        Ok(g)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

pub(crate) fn im2col<T: Real>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * ncols;
                for oh in 0..g.out_h {
                    let dst = &mut cols[row + oh * g.out_w..row + (oh + 1) * g.out_w];
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        *d = if iw < 0 || iw >= g.width as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-add of columns back into an image (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * ncols;
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let src = &cols[row + oh * g.out_w..row + (oh + 1) * g.out_w];
                    let dst = &mut plane[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, &v) in src.iter().enumerate() {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.width as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = W (O x CKK) * im2col(x[n])`.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], batch: usize, w: &[T], out_ch: usize, g: &ConvGeom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.col_rows() * g.col_cols()];
    let out_len = out_ch * g.col_cols();
    let mut out = vec![T::zero(); batch * out_len];
    for n in 0..batch {
        im2col(&x[n * g.image_len()..(n + 1) * g.image_len()], g, &mut cols);
        matmul(w, false, &cols, false, &mut out[n * out_len..(n + 1) * out_len], out_ch, g.col_rows(), g.col_cols(), false);
    }
    out
}

/// Gradients of `conv2d_forward` w.r.t. input and kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    batch: usize,
    w: &[T],
    out_ch: usize,
    g: &ConvGeom,
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let out_len = out_ch * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dx = want_input.then(|| vec![T::zero(); batch * g.image_len()]);
    let mut dw = want_kernel.then(|| vec![T::zero(); w.len()]);
    for n in 0..batch {
        let go = &grad_out[n * out_len..(n + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[n * g.image_len()..(n + 1) * g.image_len()], g, &mut cols);
            matmul(go, false, &cols, true, dw, out_ch, ncols, rows, true);
        }
        if let Some(dx) = dx.as_mut() {
            matmul(w, true, go, false, &mut cols, rows, out_ch, ncols, false);
            col2im(&cols, g, &mut dx[n * g.image_len()..(n + 1) * g.image_len()]);
        }
    }
    (dx, dw)
}

/// Transposed convolution with kernel laid out `in_ch x out_ch x kh x kw`;
/// `g` describes the conv2d from the output image back to the input map.
pub(crate) fn conv_transpose_forward<T: Real>(x: &[T], batch: usize, in_ch: usize, w: &[T], g: &ConvGeom) -> Vec<T> {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let in_len = in_ch * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); batch * g.image_len()];
    for n in 0..batch {
        matmul(w, true, &x[n * in_len..(n + 1) * in_len], false, &mut cols, rows, in_ch, ncols, false);
        col2im(&cols, g, &mut out[n * g.image_len()..(n + 1) * g.image_len()]);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose_backward<T: Real>(
    x: &[T],
    batch: usize,
    in_ch: usize,
    w: &[T],
    g: &ConvGeom,
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let rows = g.col_rows();
    let ncols = g.col_cols();
    let in_len = in_ch * ncols;
    let mut gcols = vec![T::zero(); rows * ncols];
    let mut dx = want_input.then(|| vec![T::zero(); batch * in_len]);
    let mut dw = want_kernel.then(|| vec![T::zero(); w.len()]);
    for n in 0..batch {
        im2col(&grad_out[n * g.image_len()..(n + 1) * g.image_len()], g, &mut gcols);
        if let Some(dx) = dx.as_mut() {
            matmul(w, false, &gcols, false, &mut dx[n * in_len..(n + 1) * in_len], in_ch, rows, ncols, false);
        }
        if let Some(dw) = dw.as_mut() {
            matmul(&x[n * in_len..(n + 1) * in_len], false, &gcols, true, dw, in_ch, ncols, rows, true);
        }
    }
    (dx, dw)
}
