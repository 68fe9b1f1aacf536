//! Dense ops: linear algebra, elementwise maps, reductions and row plumbing.

use super::graph::{BackCtx, Graph, Op, Var};
use super::scalar::{gemm, MatRef, Scalar};
use super::tensor::Tensor;
use super::TensorError;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Exp,
    Ln,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Precomputed separable bilinear sampling of a box region.
#[derive(Clone, Debug)]
pub struct ResampleMap {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Per output row: (y0, y1, w0, w1).
    pub ys: Vec<(usize, usize, f64, f64)>,
    /// Per output column: (x0, x1, w0, w1).
    pub xs: Vec<(usize, usize, f64, f64)>,
}

impl ResampleMap {
    /// Bilinear crop of the inclusive pixel box `[lo, hi]` along one axis
    /// to `out` samples, half-pixel centers, clamped to the box.
    fn axis(lo: usize, hi: usize, out: usize) -> Vec<(usize, usize, f64, f64)> {
        let extent = (hi - lo + 1) as f64;
        let scale = extent / out as f64;
        (0..out)
            .map(|o| {
                let src = (lo as f64 + (o as f64 + 0.5) * scale - 0.5).clamp(lo as f64, hi as f64);
                let i0 = src.floor() as usize;
                let frac = src - i0 as f64;
                let i1 = (i0 + 1).min(hi);
                (i0, i1, 1.0 - frac, frac)
            })
            .collect()
    }

    /// `bbox` is `(x0, y0, x1, y1)`, inclusive.
    pub fn new(channels: usize, in_h: usize, in_w: usize, bbox: (usize, usize, usize, usize), out_h: usize, out_w: usize) -> Self {
        let (x0, y0, x1, y1) = bbox;
        Self {
            channels,
            in_h,
            in_w,
            out_h,
            out_w,
            ys: Self::axis(y0, y1, out_h),
            xs: Self::axis(x0, x1, out_w),
        }
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((k2, n))) = (av.dims2(), bv.dims2()) else {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        };
        if k != k2 {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(av.data(), m, k), MatRef::new(bv.data(), k, n), &mut out, false);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a: a.0, b: b.0 }, rg)
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push("add", t, Op::Add { a: a.0, b: b.0 }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push("sub", t, Op::Sub { a: a.0, b: b.0 }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push("mul", t, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    /// `x[r, :] + bias` for every row `r`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = *xv.shape().last().unwrap();
        if bv.len() != d {
            return Err(shape_err("add_row", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = xv.data().chunks(d).flat_map(|row| row.iter().zip(b).map(|(&u, &v)| u + v)).collect();
        let rg = self.rg(x.0) || self.rg(bias.0);
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_row", t, Op::AddRow { x: x.0, bias: bias.0 }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * s).collect())?;
        let rg = self.rg(x.0);
        self.push("scale", t, Op::Scale { x: x.0, s }, rg)
    }

    fn unary(&mut self, x: Var, kind: UnaryKind) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let f: fn(T) -> T = match kind {
            UnaryKind::Relu => |v| v.max(T::zero()),
            UnaryKind::Gelu => gelu,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Softplus => softplus,
            UnaryKind::Exp => |v| v.exp(),
            UnaryKind::Ln => |v| v.ln(),
        };
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        let name = match kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Exp => "exp",
            UnaryKind::Ln => "log",
        };
        let rg = self.rg(x.0);
        self.push(name, t, Op::Unary { x: x.0, kind }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryKind::Relu)
    }

    /// Tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryKind::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryKind::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryKind::Exp)
    }

    /// Natural logarithm.
    pub fn log(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryKind::Ln)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x.0);
        self.push("softmax", t, Op::Softmax { x: x.0 }, rg)
    }

    /// Row-wise layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *xv.shape().last().unwrap();
        if gv.len() != d || bv.len() != d {
            return Err(shape_err("layernorm", xv.shape(), gv.shape()));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = T::from_f64(rs);
            for c in 0..d {
                let h = T::from_f64((row[c].as_f64() - mean) * rs);
                xhat[r * d + c] = h;
                out[r * d + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("layernorm", t, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd }, rg)
    }

    /// Gather rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        let Some((v, d)) = tv.dims2() else {
            return Err(shape_err("embedding", tv.shape(), &[ids.len()]));
        };
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(TensorError::Index { op: "embedding", index: i, len: v });
            }
            out.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table.0);
        let t = Tensor::new(vec![ids.len(), d], out)?;
        self.push("embedding", t, Op::Embedding { table: table.0, ids: ids.to_vec() }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).sum_f64();
        let rg = self.rg(x.0);
        self.push("sum", Tensor::scalar(T::from_f64(s)), Op::Sum { x: x.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let s = xv.sum_f64() / xv.len() as f64;
        let rg = self.rg(x.0);
        self.push("mean", Tensor::scalar(T::from_f64(s)), Op::Mean { x: x.0 }, rg)
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let n = xv.len() as f64;
        let mean = xv.sum_f64() / n;
        let var = xv.data().iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        let rg = self.rg(x.0);
        self.push("variance", Tensor::scalar(T::from_f64(var)), Op::Variance { x: x.0 }, rg)
    }

    /// Mean over rows of `[n, d]`, giving `[d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let Some((n, d)) = xv.dims2() else {
            return Err(shape_err("mean_rows", xv.shape(), &[]));
        };
        let mut acc = vec![0.0f64; d];
        for r in 0..n {
            for (a, v) in acc.iter_mut().zip(xv.row(r)) {
                *a += v.as_f64();
            }
        }
        let out = acc.into_iter().map(|a| T::from_f64(a / n as f64)).collect();
        let rg = self.rg(x.0);
        self.push("mean_rows", Tensor::new(vec![d], out)?, Op::MeanRows { x: x.0 }, rg)
    }

    /// Stack 2-D tensors along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(parts[0]);
        let d = first.dims2().map(|(_, d)| d).ok_or_else(|| shape_err("concat", first.shape(), &[]))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            match v.dims2() {
                Some((r, dd)) if dd == d => {
                    rows += r;
                    data.extend_from_slice(v.data());
                }
                _ => return Err(shape_err("concat", first.shape(), v.shape())),
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        let ids = parts.iter().map(|p| p.0).collect();
        self.push("concat", Tensor::new(vec![rows, d], data)?, Op::ConcatRows { parts: ids }, rg)
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let Some((n, d)) = xv.dims2() else {
            return Err(shape_err("slice", xv.shape(), &[start, end]));
        };
        if start >= end || end > n {
            return Err(shape_err("slice", xv.shape(), &[start, end]));
        }
        let data = xv.data()[start * d..end * d].to_vec();
        let rg = self.rg(x.0);
        self.push("slice", Tensor::new(vec![end - start, d], data)?, Op::SliceRows { x: x.0, start }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let Some((n, d)) = xv.dims2() else {
            return Err(shape_err("transpose", xv.shape(), &[]));
        };
        let src = xv.data();
        let mut out = vec![T::zero(); n * d];
        for r in 0..n {
            for c in 0..d {
                out[c * n + r] = src[r * d + c];
            }
        }
        let rg = self.rg(x.0);
        self.push("transpose", Tensor::new(vec![d, n], out)?, Op::Transpose { x: x.0 }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x.0);
        self.push("reshape", t, Op::Reshape { x: x.0 }, rg)
    }

    /// Keep rows `0..keep`, write exact zeros to the rest.
    pub fn mask_rows(&mut self, x: Var, keep: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let Some((n, d)) = xv.dims2() else {
            return Err(shape_err("mask_rows", xv.shape(), &[keep]));
        };
        let keep = keep.min(n);
        let mut out = xv.data().to_vec();
        out[keep * d..].fill(T::zero());
        let rg = self.rg(x.0);
        self.push("mask_rows", Tensor::new(vec![n, d], out)?, Op::MaskRows { x: x.0, keep }, rg)
    }

    /// Bilinear crop-and-resize of a `[C, H, W]` image.
    pub fn resample(&mut self, x: Var, map: ResampleMap) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.shape() != [map.channels, map.in_h, map.in_w] {
            return Err(shape_err("resample", xv.shape(), &[map.channels, map.in_h, map.in_w]));
        }
        let src = xv.data();
        let mut out = vec![T::zero(); map.channels * map.out_h * map.out_w];
        for c in 0..map.channels {
            let plane = &src[c * map.in_h * map.in_w..(c + 1) * map.in_h * map.in_w];
            for (oy, &(y0, y1, wy0, wy1)) in map.ys.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in map.xs.iter().enumerate() {
                    let v = wy0 * (wx0 * plane[y0 * map.in_w + x0].as_f64() + wx1 * plane[y0 * map.in_w + x1].as_f64())
                        + wy1 * (wx0 * plane[y1 * map.in_w + x0].as_f64() + wx1 * plane[y1 * map.in_w + x1].as_f64());
                    out[(c * map.out_h + oy) * map.out_w + ox] = T::from_f64(v);
                }
            }
        }
        let shape = vec![map.channels, map.out_h, map.out_w];
        let rg = self.rg(x.0);
        self.push("resample", Tensor::new(shape, out)?, Op::Resample { x: x.0, map: Box::new(map) }, rg)
    }

    /// Elementwise clamp into `[lo, hi]`; zero gradient where clamped.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v.max(lo).min(hi)).collect())?;
        let rg = self.rg(x.0);
        self.push("clamp", t, Op::Clamp { x: x.0, lo, hi }, rg)
    }

    /// Forward value `value`, backward identity into `x` (straight-through).
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var, TensorError> {
        if self.value(x).shape() != value.shape() {
            return Err(shape_err("straight_through", self.value(x).shape(), value.shape()));
        }
        let rg = self.rg(x.0);
        self.push("straight_through", value, Op::PassThrough { x: x.0 }, rg)
    }

    // Composite helpers.

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// `Σ x_i c_i` against a constant weight vector.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var, TensorError> {
        let c = self.constant(weights);
        let p = self.mul(x, c)?;
        self.sum(p)
    }

    /// Weighted sum of scalar vars with constant coefficients.
    pub fn combine(&mut self, terms: &[(T, Var)]) -> Result<Var, TensorError> {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let s = self.scale(v, w)?;
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        match acc {
            Some(v) => Ok(v),
            None => Ok(self.scalar(T::zero())),
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += v.as_f64();
    }
    let inv = T::from_f64(1.0 / sum);
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

impl<'g, 'a, T: Scalar> BackCtx<'g, 'a, T> {
    pub(crate) fn back_matmul(&mut self, a: usize, b: usize, g: &[T]) {
        let (av, bv) = (self.val(a), self.val(b));
        let (m, k) = av.dims2().unwrap();
        let n = bv.dims2().unwrap().1;
        if let Some(da) = self.acc(a) {
            gemm(MatRef::new(g, m, n), MatRef::t(bv.data(), n, k), da, true);
        }
        if let Some(db) = self.acc(b) {
            gemm(MatRef::t(av.data(), k, m), MatRef::new(g, m, n), db, true);
        }
    }

    pub(crate) fn back_mul(&mut self, a: usize, b: usize, g: &[T]) {
        let (av, bv) = (self.val(a), self.val(b));
        if let Some(da) = self.acc(a) {
            for ((d, gv), y) in da.iter_mut().zip(g).zip(bv.data()) {
                *d = *d + *gv * *y;
            }
        }
        if let Some(db) = self.acc(b) {
            for ((d, gv), x) in db.iter_mut().zip(g).zip(av.data()) {
                *d = *d + *gv * *x;
            }
        }
    }

    pub(crate) fn back_add_row(&mut self, x: usize, bias: usize, g: &[T]) {
        self.add_to(x, g);
        if let Some(db) = self.acc(bias) {
            let d = db.len();
            for row in g.chunks(d) {
                for (a, v) in db.iter_mut().zip(row) {
                    *a = *a + *v;
                }
            }
        }
    }

    pub(crate) fn back_unary(&mut self, out: usize, x: usize, kind: UnaryKind, g: &[T]) {
        let (xv, yv) = (self.val(x), self.val(out));
        let Some(dx) = self.acc(x) else { return };
        for (i, d) in dx.iter_mut().enumerate() {
            let (xi, yi) = (xv.data()[i], yv.data()[i]);
            let local = match kind {
                UnaryKind::Relu => {
                    if xi > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                UnaryKind::Gelu => gelu_grad(xi),
                UnaryKind::Sigmoid => yi * (T::one() - yi),
                UnaryKind::Softplus => sigmoid(xi),
                UnaryKind::Exp => yi,
                UnaryKind::Ln => T::one() / xi,
            };
            *d = *d + g[i] * local;
        }
    }

    pub(crate) fn back_softmax(&mut self, out: usize, x: usize, g: &[T]) {
        let yv = self.val(out);
        let d = *yv.shape().last().unwrap();
        let Some(dx) = self.acc(x) else { return };
        for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(yv.data().chunks(d)) {
            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            let dot = T::from_f64(dot);
            for ((dd, gg), yy) in dr.iter_mut().zip(gr).zip(yr) {
                *dd = *dd + *yy * (*gg - dot);
            }
        }
    }

    pub(crate) fn back_layernorm(&mut self, x: usize, gamma: usize, beta: usize, xhat: &[T], rstd: &[T], g: &[T]) {
        let gv = self.val(gamma);
        let d = gv.len();
        if let Some(dg) = self.acc(gamma) {
            for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                for c in 0..d {
                    dg[c] = dg[c] + row_g[c] * row_h[c];
                }
            }
        }
        if let Some(db) = self.acc(beta) {
            for row_g in g.chunks(d) {
                for c in 0..d {
                    db[c] = db[c] + row_g[c];
                }
            }
        }
        if let Some(dx) = self.acc(x) {
            let inv_d = 1.0 / d as f64;
            for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for c in 0..d {
                    let dh = (row_g[c] * gv.data()[c]).as_f64();
                    s1 += dh;
                    s2 += dh * row_h[c].as_f64();
                }
                let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                let rs = rstd[r].as_f64();
                for c in 0..d {
                    let dh = (row_g[c] * gv.data()[c]).as_f64();
                    let v = rs * (dh - m1 - row_h[c].as_f64() * m2);
                    dx[r * d + c] = dx[r * d + c] + T::from_f64(v);
                }
            }
        }
    }

    pub(crate) fn back_embedding(&mut self, table: usize, ids: &[usize], g: &[T]) {
        let Some(dt) = self.acc(table) else { return };
        let d = g.len() / ids.len();
        for (r, &i) in ids.iter().enumerate() {
            for c in 0..d {
                dt[i * d + c] = dt[i * d + c] + g[r * d + c];
            }
        }
    }

    pub(crate) fn back_variance(&mut self, x: usize, g: &[T]) {
        let xv = self.val(x);
        let n = xv.len() as f64;
        let mean = xv.sum_f64() / n;
        let Some(dx) = self.acc(x) else { return };
        let s = g[0].as_f64() * 2.0 / n;
        for (d, v) in dx.iter_mut().zip(xv.data()) {
            *d = *d + T::from_f64(s * (v.as_f64() - mean));
        }
    }

    pub(crate) fn back_mean_rows(&mut self, x: usize, g: &[T]) {
        let (n, d) = self.val(x).dims2().unwrap();
        let Some(dx) = self.acc(x) else { return };
        let inv = T::from_f64(1.0 / n as f64);
        for r in 0..n {
            for c in 0..d {
                dx[r * d + c] = dx[r * d + c] + g[c] * inv;
            }
        }
    }

    pub(crate) fn back_concat_rows(&mut self, parts: &[usize], g: &[T]) {
        let mut off = 0;
        for &p in parts {
            let n = self.val(p).len();
            self.add_to(p, &g[off..off + n]);
            off += n;
        }
    }

    pub(crate) fn back_slice_rows(&mut self, x: usize, start: usize, g: &[T]) {
        let d = self.val(x).dims2().unwrap().1;
        if let Some(dx) = self.acc(x) {
            for (a, v) in dx[start * d..start * d + g.len()].iter_mut().zip(g) {
                *a = *a + *v;
            }
        }
    }

    pub(crate) fn back_transpose(&mut self, x: usize, g: &[T]) {
        let (n, d) = self.val(x).dims2().unwrap();
        if let Some(dx) = self.acc(x) {
            for r in 0..n {
                for c in 0..d {
                    dx[r * d + c] = dx[r * d + c] + g[c * n + r];
                }
            }
        }
    }

    pub(crate) fn back_mask_rows(&mut self, x: usize, keep: usize, g: &[T]) {
        let d = self.val(x).dims2().unwrap().1;
        if let Some(dx) = self.acc(x) {
            for (a, v) in dx[..keep * d].iter_mut().zip(&g[..keep * d]) {
                *a = *a + *v;
            }
        }
    }

    pub(crate) fn back_clamp(&mut self, x: usize, lo: T, hi: T, g: &[T]) {
        let xv = self.val(x).data();
        if let Some(dx) = self.acc(x) {
            for ((a, v), &xi) in dx.iter_mut().zip(g).zip(xv) {
                if xi > lo && xi < hi {
                    *a = *a + *v;
                }
            }
        }
    }

    pub(crate) fn back_resample(&mut self, x: usize, map: &ResampleMap, g: &[T]) {
        let Some(dx) = self.acc(x) else { return };
        let plane = map.in_h * map.in_w;
        for c in 0..map.channels {
            let dp = &mut dx[c * plane..(c + 1) * plane];
            for (oy, &(y0, y1, wy0, wy1)) in map.ys.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in map.xs.iter().enumerate() {
                    let go = g[(c * map.out_h + oy) * map.out_w + ox].as_f64();
                    for (yy, wy) in [(y0, wy0), (y1, wy1)] {
                        for (xx, wx) in [(x0, wx0), (x1, wx1)] {
                            let w = wy * wx;
                            if w != 0.0 {
                                let idx = yy * map.in_w + xx;
                                dp[idx] = dp[idx] + T::from_f64(go * w);
                            }
                        }
                    }
                }
            }
        }
    }
}
