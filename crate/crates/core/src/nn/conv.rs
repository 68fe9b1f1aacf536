//! 2-D convolution and transposed convolution on `[C, H, W]` images via
//! im2col and GEMM.

use super::graph::{BackCtx, Graph, Op, Var};
use super::scalar::{gemm, MatRef, Scalar};
use super::tensor::Tensor;
use super::TensorError;

/// Geometry of a strided convolution from an image plane of
/// `channels × h × w` to an output grid of `oh × ow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < kernel || w + 2 * pad < kernel || stride == 0 {
            return None;
        }
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        Some(Self { channels, h, w, kernel, stride, pad, oh, ow })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input row for kernel row `ky` at output row `oy`, or `None` in padding.
    #[inline]
    fn src_row(&self, ky: usize, oy: usize) -> Option<usize> {
        (oy * self.stride + ky).checked_sub(self.pad).filter(|&y| y < self.h)
    }

    /// Output columns `lo..hi` whose kernel column `kx` lands inside the
    /// image; the input column of `ox` is `ox * stride + kx - pad`.
    #[inline]
    fn col_span(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = self.pad.saturating_sub(kx).div_ceil(s);
        let hi = (self.w + self.pad).saturating_sub(kx).div_ceil(s).min(self.ow);
        (lo.min(hi), hi)
    }
}

pub(crate) fn im2col<T: Scalar>(geom: &ConvGeom, img: &[T]) -> Vec<T> {
    let k = geom.kernel;
    let ncol = geom.col_cols();
    let mut cols = vec![T::zero(); geom.col_rows() * ncol];
    for c in 0..geom.channels {
        let plane = &img[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = geom.col_span(kx);
                for oy in 0..geom.oh {
                    let Some(y) = geom.src_row(ky, oy) else { continue };
                    let src = &plane[y * geom.w..(y + 1) * geom.w];
                    let out = &mut dst[oy * geom.ow..(oy + 1) * geom.ow];
                    for ox in lo..hi {
                        out[ox] = src[ox * geom.stride + kx - geom.pad];
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(geom: &ConvGeom, cols: &[T], img: &mut [T]) {
    let k = geom.kernel;
    let ncol = geom.col_cols();
    for c in 0..geom.channels {
        let plane = &mut img[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let srcrow = &cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = geom.col_span(kx);
                for oy in 0..geom.oh {
                    let Some(y) = geom.src_row(ky, oy) else { continue };
                    let dst = &mut plane[y * geom.w..(y + 1) * geom.w];
                    let inp = &srcrow[oy * geom.ow..(oy + 1) * geom.ow];
                    for ox in lo..hi {
                        let x = ox * geom.stride + kx - geom.pad;
                        dst[x] = dst[x] + inp[ox];
                    }
                }
            }
        }
    }
}

fn err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// `x: [Ci, H, W]`, `w: [Co, Ci, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (&[ci, h, wd], &[co, ci2, k, k2]) = (xv.shape(), wv.shape()) else {
            return Err(err("conv2d", xv.shape(), wv.shape()));
        };
        if ci != ci2 || k != k2 || bv.len() != co {
            return Err(err("conv2d", xv.shape(), wv.shape()));
        }
        let geom = ConvGeom::new(ci, h, wd, k, stride, pad).ok_or_else(|| err("conv2d", xv.shape(), wv.shape()))?;
        let cols = im2col(&geom, xv.data());
        let n = geom.col_cols();
        let mut out = vec![T::zero(); co * n];
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.fill(bv.data()[o]);
        }
        gemm(MatRef::new(wv.data(), co, geom.col_rows()), MatRef::new(&cols, geom.col_rows(), n), &mut out, true);
        let rg = self.rg(x.0) || self.rg(w.0) || self.rg(b.0);
        let t = Tensor::new(vec![co, geom.oh, geom.ow], out)?;
        // cols are only needed for the weight gradient
        let cols = if self.rg(w.0) { cols } else { Vec::new() };
        self.push("conv2d", t, Op::Conv2d { x: x.0, w: w.0, b: b.0, geom, cols }, rg)
    }

    /// Transposed convolution. `x: [Ci, H, W]`, `w: [Ci, Co, k, k]`, `b: [Co]`;
    /// output spatial size `(H - 1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (&[ci, h, wd], &[ci2, co, k, k2]) = (xv.shape(), wv.shape()) else {
            return Err(err("conv_transpose2d", xv.shape(), wv.shape()));
        };
        if ci != ci2 || k != k2 || bv.len() != co || stride == 0 {
            return Err(err("conv_transpose2d", xv.shape(), wv.shape()));
        }
        let oh = ((h - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let ow = ((wd - 1) * stride + k).checked_sub(2 * pad).filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(err("conv_transpose2d", xv.shape(), wv.shape()));
        };
        // the adjoint conv maps the output plane back to the h × w grid
        let geom = ConvGeom::new(co, oh, ow, k, stride, pad)
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or_else(|| err("conv_transpose2d", xv.shape(), wv.shape()))?;
        let n = h * wd;
        let mut cols = vec![T::zero(); geom.col_rows() * n];
        gemm(MatRef::t(wv.data(), co * k * k, ci), MatRef::new(xv.data(), ci, n), &mut cols, false);
        let mut out = vec![T::zero(); co * oh * ow];
        col2im(&geom, &cols, &mut out);
        for (o, plane) in out.chunks_mut(oh * ow).enumerate() {
            let bias = bv.data()[o];
            plane.iter_mut().for_each(|v| *v = *v + bias);
        }
        let rg = self.rg(x.0) || self.rg(w.0) || self.rg(b.0);
        let t = Tensor::new(vec![co, oh, ow], out)?;
        self.push("conv_transpose2d", t, Op::ConvT2d { x: x.0, w: w.0, b: b.0, geom }, rg)
    }
}

impl<'g, 'a, T: Scalar> BackCtx<'g, 'a, T> {
    pub(crate) fn back_conv2d(&mut self, x: usize, w: usize, b: usize, geom: &ConvGeom, cols: &[T], g: &[T]) {
        let wv = self.val(w);
        let co = wv.shape()[0];
        let n = geom.col_cols();
        if let Some(db) = self.acc(b) {
            for (o, row) in g.chunks(n).enumerate() {
                db[o] = db[o] + T::from_f64(row.iter().map(|v| v.as_f64()).sum());
            }
        }
        if let Some(dw) = self.acc(w) {
            gemm(MatRef::new(g, co, n), MatRef::t(cols, n, geom.col_rows()), dw, true);
        }
        if self.acc(x).is_some() {
            let mut dcols = vec![T::zero(); geom.col_rows() * n];
            gemm(MatRef::t(wv.data(), geom.col_rows(), co), MatRef::new(g, co, n), &mut dcols, false);
            let dx = self.acc(x).unwrap();
            col2im(geom, &dcols, dx);
        }
    }

    pub(crate) fn back_conv_t2d(&mut self, x: usize, w: usize, b: usize, geom: &ConvGeom, g: &[T]) {
        let (xv, wv) = (self.val(x), self.val(w));
        let ci = xv.shape()[0];
        let n = geom.oh * geom.ow;
        let plane = geom.h * geom.w;
        if let Some(db) = self.acc(b) {
            for (o, p) in g.chunks(plane).enumerate() {
                db[o] = db[o] + T::from_f64(p.iter().map(|v| v.as_f64()).sum());
            }
        }
        let need_x = self.acc(x).is_some();
        let need_w = self.acc(w).is_some();
        if !need_x && !need_w {
            return;
        }
        let dcols = im2col(geom, g);
        if let Some(dw) = self.acc(w) {
            // dw[ci, co·k·k] += x[ci, n] · dcolsᵀ
            gemm(MatRef::new(xv.data(), ci, n), MatRef::t(&dcols, n, geom.col_rows()), dw, true);
        }
        if let Some(dx) = self.acc(x) {
            gemm(MatRef::new(wv.data(), ci, geom.col_rows()), MatRef::new(&dcols, geom.col_rows(), n), dx, true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let [ci, h, wd] = x.shape()[..] else { panic!() };
        let [co, _, k, _] = w.shape()[..] else { panic!() };
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        Tensor::from_fn(&[co, oh, ow], |idx| {
            let (o, rem) = (idx / (oh * ow), idx % (oh * ow));
            let (oy, ox) = (rem / ow, rem % ow);
            let mut s = b[o];
            for c in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let xx = (ox * stride + kx) as isize - pad as isize;
                        if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                            s += x.data()[(c * h + y as usize) * wd + xx as usize]
                                * w.data()[((o * ci + c) * k + ky) * k + kx];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn conv_matches_naive_loops() {
        let store = ParamStore::<f64>::new();
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0), (3, 2), (2, 2)] {
            let x = Tensor::from_fn(&[2, 6, 6], |i| ((i * 7 % 11) as f64 - 5.0) / 5.0);
            let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 5 % 13) as f64 - 6.0) / 6.0);
            let b = vec![0.1, -0.2, 0.3];
            let mut g = Graph::inference(&store);
            let xv = g.constant(x.clone());
            let wv = g.constant(w.clone());
            let bv = g.constant(Tensor::new(vec![3], b.clone()).unwrap());
            let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
            let expect = naive_conv(&x, &w, &b, stride, pad);
            assert_eq!(g.shape(y), expect.shape());
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn laplacian_kernel_zero_on_constant_interior() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::full(&[1, 6, 6], 0.7));
        let k = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
        let w = g.constant(Tensor::new(vec![1, 1, 3, 3], k.to_vec()).unwrap());
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with zero bias and shared weights.
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = Tensor::from_fn(&[2, 8, 8], |i| ((i * 3 % 7) as f64 - 3.0) / 3.0);
        let y = Tensor::from_fn(&[3, 4, 4], |i| ((i * 5 % 9) as f64 - 4.0) / 4.0);
        let w = Tensor::from_fn(&[3, 2, 4, 4], |i| ((i * 11 % 17) as f64 - 8.0) / 8.0);
        // conv weight [Co=3, Ci=2]; transposed takes [Ci_t=3, Co_t=2], same buffer.
        let (xv, yv, wv) = (g.constant(x.clone()), g.constant(y.clone()), g.constant(w));
        let b3 = g.constant(Tensor::zeros(&[3]));
        let b2 = g.constant(Tensor::zeros(&[2]));
        let cx = g.conv2d(xv, wv, b3, 2, 1).unwrap();
        let ty = g.conv_transpose2d(yv, wv, b2, 2, 1).unwrap();
        assert_eq!(g.shape(ty), &[2, 8, 8]);
        let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
