//! Masked multi-head scaled dot-product attention.

use super::graph::{BackCtx, Graph, Op, Var};
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::TensorError;

/// Boolean attendance matrix, `true` where query row `i` may read key `j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self, TensorError> {
        let allow: Vec<bool> = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        let m = Self { rows, cols, allow };
        m.validate()?;
        Ok(m)
    }

    /// Every row may read every column.
    pub fn full(rows: usize, cols: usize) -> Self {
        Self { rows, cols, allow: vec![true; rows * cols] }
    }

    /// Standard lower-triangular mask.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i).expect("diagonal is always allowed")
    }

    /// Sequence `[prefix ∥ slots]`: prefix rows attend within the prefix;
    /// slot rows read the whole prefix plus slots of equal or earlier time.
    pub fn prefix_causal(prefix: usize, slots: usize) -> Self {
        let n = prefix + slots;
        Self::from_fn(n, n, |i, j| if i < prefix { j < prefix } else { j < prefix || j <= i })
            .expect("diagonal is always allowed")
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        for r in 0..self.rows {
            if !self.allow[r * self.cols..(r + 1) * self.cols].iter().any(|&a| a) {
                return Err(TensorError::AllMaskedRow { row: r });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }
}

pub(crate) struct AttnSaved<T> {
    q: usize,
    k: usize,
    v: usize,
    heads: usize,
    mask: AttentionMask,
    /// heads × nq × nk, zero where masked.
    probs: Vec<T>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// `q: [nq, d]`, `k, v: [nk, d]` → `[nq, d]`, heads split along `d`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &AttentionMask, heads: usize) -> Result<Var, TensorError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (Some((nq, d)), Some((nk, dk)), Some((nv, dv))) = (qv.dims2(), kv.dims2(), vv.dims2()) else {
            return Err(TensorError::Shape { op: "attention", lhs: qv.shape().to_vec(), rhs: kv.shape().to_vec() });
        };
        if d != dk || d != dv || nk != nv {
            return Err(TensorError::Shape { op: "attention", lhs: qv.shape().to_vec(), rhs: kv.shape().to_vec() });
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!("model dim {d} not divisible by {heads} heads")));
        }
        if mask.rows != nq || mask.cols != nk {
            return Err(TensorError::Shape { op: "attention_mask", lhs: vec![mask.rows, mask.cols], rhs: vec![nq, nk] });
        }
        mask.validate()?;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        let mut row = vec![T::zero(); nk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut max = T::neg_infinity();
                for j in 0..nk {
                    if mask.allowed(i, j) {
                        let kj = &kd[j * d + off..j * d + off + dh];
                        let s = qi.iter().zip(kj).fold(T::zero(), |acc, (a, b)| acc + *a * *b) * scale;
                        row[j] = s;
                        max = max.max(s);
                    }
                }
                let mut sum = 0.0f64;
                for j in 0..nk {
                    if mask.allowed(i, j) {
                        row[j] = (row[j] - max).exp();
                        sum += row[j].as_f64();
                    }
                }
                let inv = T::from_f64(1.0 / sum);
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..nk {
                    if mask.allowed(i, j) {
                        let pij = row[j] * inv;
                        p[j] = pij;
                        let vj = &vd[j * d + off..j * d + off + dh];
                        for (oo, vvv) in o.iter_mut().zip(vj) {
                            *oo = *oo + pij * *vvv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        let saved = AttnSaved { q: q.0, k: k.0, v: v.0, heads, mask: mask.clone(), probs };
        self.push("attention", Tensor::new(vec![nq, d], out)?, Op::Attention(Box::new(saved)), rg)
    }

    /// Saved attention weights of an attention output, head-major
    /// `[heads, nq, nk]`.
    pub fn attention_probs(&self, out: Var) -> Option<&[T]> {
        match &self.nodes[out.0].op {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }
}

impl<'g, 'a, T: Scalar> BackCtx<'g, 'a, T> {
    pub(crate) fn back_attention(&mut self, s: &AttnSaved<T>, g: &[T]) {
        let (qv, kv, vv) = (self.val(s.q), self.val(s.k), self.val(s.v));
        let (nq, d) = qv.dims2().unwrap();
        let nk = kv.dims2().unwrap().0;
        let dh = d / s.heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut dq = vec![T::zero(); nq * d];
        let mut dk = vec![T::zero(); nk * d];
        let mut dv = vec![T::zero(); nk * d];
        let mut dp = vec![T::zero(); nk];
        for h in 0..s.heads {
            let off = h * dh;
            for i in 0..nq {
                let p = &s.probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let go = &g[i * d + off..i * d + off + dh];
                let mut dot = T::zero();
                for j in 0..nk {
                    if s.mask.allowed(i, j) {
                        let vj = &vd[j * d + off..j * d + off + dh];
                        dp[j] = go.iter().zip(vj).fold(T::zero(), |acc, (a, b)| acc + *a * *b);
                        dot = dot + p[j] * dp[j];
                        let dvj = &mut dv[j * d + off..j * d + off + dh];
                        for (a, b) in dvj.iter_mut().zip(go) {
                            *a = *a + p[j] * *b;
                        }
                    }
                }
                for j in 0..nk {
                    if s.mask.allowed(i, j) {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        for c in 0..dh {
                            dq[i * d + off + c] = dq[i * d + off + c] + ds * kd[j * d + off + c];
                            dk[j * d + off + c] = dk[j * d + off + c] + ds * qd[i * d + off + c];
                        }
                    }
                }
            }
        }
        self.add_to(s.q, &dq);
        self.add_to(s.k, &dk);
        self.add_to(s.v, &dv);
    }
}
