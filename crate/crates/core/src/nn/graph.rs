use std::borrow::Cow;

use super::attention::AttnSaved;
use super::conv::ConvGeom;
use super::ops::{ResampleMap, UnaryKind};
use super::params::{GroupMask, Grads, ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::TensorError;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T> {
    Const,
    Param(ParamId),
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRow { x: usize, bias: usize },
    Scale { x: usize, s: T },
    Unary { x: usize, kind: UnaryKind },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<T> },
    ConvT2d { x: usize, w: usize, b: usize, geom: ConvGeom },
    Embedding { table: usize, ids: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
    Variance { x: usize },
    MeanRows { x: usize },
    ConcatRows { parts: Vec<usize> },
    SliceRows { x: usize, start: usize },
    Transpose { x: usize },
    Reshape { x: usize },
    PassThrough { x: usize },
    Clamp { x: usize, lo: T, hi: T },
    MaskRows { x: usize, keep: usize },
    Attention(Box<AttnSaved<T>>),
    Resample { x: usize, map: Box<ResampleMap> },
}

pub(crate) struct Node<'a, T: Scalar> {
    pub value: Cow<'a, Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Single-use tape. Ops execute eagerly and record what backward needs.
///
/// Parameters are borrowed from a [`ParamStore`]; only groups in the
/// `trainable` mask receive gradients.
pub struct Graph<'a, T: Scalar = f32> {
    store: &'a ParamStore<T>,
    trainable: GroupMask,
    pub(crate) nodes: Vec<Node<'a, T>>,
    checked: bool,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: GroupMask) -> Self {
        Self { store, trainable, nodes: Vec::new(), checked: false }
    }

    /// Inference-only tape: no parameter receives gradients.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self::new(store, GroupMask::NONE)
    }

    /// Scan every op output for NaN/Inf.
    pub fn checked(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Cow::Owned(t), op: Op::Const, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let e = self.store.entry(id);
        let requires_grad = self.trainable.contains(e.group);
        self.nodes.push(Node { value: Cow::Borrowed(&e.value), op: Op::Param(id), requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copy of the value with no tape history.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub(crate) fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>, TensorError> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut ctx = BackCtx { nodes: &self.nodes, grads: Vec::new() };
        ctx.grads.resize_with(loss.0 + 1, || None);
        let mut out = Grads::new(self.store.len());
        if !self.rg(loss.0) {
            return Ok(out);
        }
        ctx.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = ctx.grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if self.checked && g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            if let Op::Param(id) = node.op {
                out.add_raw(id, node.value.shape(), &g);
                continue;
            }
            ctx.dispatch(i, &g);
        }
        Ok(out)
    }
}

pub(crate) struct BackCtx<'g, 'a, T: Scalar> {
    pub nodes: &'g [Node<'a, T>],
    pub grads: Vec<Option<Vec<T>>>,
}

impl<'g, 'a, T: Scalar> BackCtx<'g, 'a, T> {
    pub fn val(&self, i: usize) -> &'g Tensor<T> {
        let nodes: &'g [Node<'a, T>] = self.nodes;
        &nodes[i].value
    }

    /// Gradient buffer of node `i`, or `None` if it needs no gradient.
    pub fn acc(&mut self, i: usize) -> Option<&mut [T]> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let n = self.nodes[i].value.len();
        Some(self.grads[i].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
    }

    pub fn add_to(&mut self, i: usize, g: &[T]) {
        if let Some(buf) = self.acc(i) {
            for (a, b) in buf.iter_mut().zip(g) {
                *a = *a + *b;
            }
        }
    }

    fn dispatch(&mut self, i: usize, g: &[T]) {
        let nodes = self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul { a, b } => self.back_matmul(*a, *b, g),
            Op::Add { a, b } => {
                self.add_to(*a, g);
                self.add_to(*b, g);
            }
            Op::Sub { a, b } => {
                self.add_to(*a, g);
                if let Some(buf) = self.acc(*b) {
                    for (d, v) in buf.iter_mut().zip(g) {
                        *d = *d - *v;
                    }
                }
            }
            Op::Mul { a, b } => self.back_mul(*a, *b, g),
            Op::AddRow { x, bias } => self.back_add_row(*x, *bias, g),
            Op::Scale { x, s } => {
                let s = *s;
                if let Some(buf) = self.acc(*x) {
                    for (d, v) in buf.iter_mut().zip(g) {
                        *d = *d + *v * s;
                    }
                }
            }
            Op::Unary { x, kind } => self.back_unary(i, *x, *kind, g),
            Op::Softmax { x } => self.back_softmax(i, *x, g),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                self.back_layernorm(*x, *gamma, *beta, xhat, rstd, g)
            }
            Op::Conv2d { x, w, b, geom, cols } => self.back_conv2d(*x, *w, *b, geom, cols, g),
            Op::ConvT2d { x, w, b, geom } => self.back_conv_t2d(*x, *w, *b, geom, g),
            Op::Embedding { table, ids } => self.back_embedding(*table, ids, g),
            Op::Sum { x } => {
                if let Some(buf) = self.acc(*x) {
                    buf.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(buf) = self.acc(*x) {
                    let s = g[0] / T::from_f64(buf.len() as f64);
                    buf.iter_mut().for_each(|d| *d = *d + s);
                }
            }
            Op::Variance { x } => self.back_variance(*x, g),
            Op::MeanRows { x } => self.back_mean_rows(*x, g),
            Op::ConcatRows { parts } => self.back_concat_rows(parts, g),
            Op::SliceRows { x, start } => self.back_slice_rows(*x, *start, g),
            Op::Transpose { x } => self.back_transpose(*x, g),
            Op::Reshape { x } | Op::PassThrough { x } => self.add_to(*x, g),
            Op::Clamp { x, lo, hi } => self.back_clamp(*x, *lo, *hi, g),
            Op::MaskRows { x, keep } => self.back_mask_rows(*x, *keep, g),
            Op::Attention(saved) => self.back_attention(saved, g),
            Op::Resample { x, map } => self.back_resample(*x, map, g),
        }
    }
}
