//! Parameterized building blocks. Each holds only [`ParamId`]s, so one
//! definition runs on any scalar type.

use rand::Rng;

use super::attention::AttentionMask;
use super::graph::{Graph, Var};
use super::params::{init, Group, ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::TensorError;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, group: Group, din: usize, dout: usize) -> Self {
        let w = store.add(format!("{name}.w"), group, init::fan_in(rng, &[din, dout], din, 1.0));
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[dout]));
        Self { w, b }
    }

    /// All-zero weights and bias.
    pub fn zeros<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: Group, din: usize, dout: usize) -> Self {
        let w = store.add(format!("{name}.w"), group, Tensor::zeros(&[din, dout]));
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: Group, d: usize) -> Self {
        let gamma = store.add(format!("{name}.g"), group, Tensor::full(&[d], T::one()));
        let beta = store.add(format!("{name}.b"), group, Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, TensorError> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layernorm(x, gm, bt)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan = cin * kernel * kernel;
        let w = store.add(format!("{name}.w"), group, init::fan_in(rng, &[cout, cin, kernel, kernel], fan, 2f64.sqrt()));
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: Group,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        // each output pixel sums about cin·(k/stride)² taps
        let fan = cin * (kernel / stride).max(1).pow(2);
        let w = store.add(format!("{name}.w"), group, init::fan_in(rng, &[cin, cout, kernel, kernel], fan, 2f64.sqrt()));
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var, TensorError> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
}

impl Block {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: Group,
        d: usize,
        heads: usize,
        hidden: usize,
        depth: usize,
    ) -> Self {
        let block = Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, d),
            wq: Linear::new(store, rng, &format!("{name}.q"), group, d, d),
            wk: Linear::new(store, rng, &format!("{name}.k"), group, d, d),
            wv: Linear::new(store, rng, &format!("{name}.v"), group, d, d),
            wo: Linear::new(store, rng, &format!("{name}.o"), group, d, d),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, d),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), group, d, hidden),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), group, hidden, d),
            heads,
        };
        // residual branches scaled down with depth
        let s = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
        for id in [block.wo.w, block.fc2.w] {
            let t = store.get_mut(id);
            for v in t.data_mut() {
                *v = *v * T::from_f64(s);
            }
        }
        block
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, mask: &AttentionMask) -> Result<Var, TensorError> {
        let h = self.ln1.forward(g, x)?;
        let q = self.wq.forward(g, h)?;
        let k = self.wk.forward(g, h)?;
        let v = self.wv.forward(g, h)?;
        let a = g.attention(q, k, v, mask, self.heads)?;
        let a = self.wo.forward(g, a)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h)?;
        let h = self.fc2.forward(g, h)?;
        g.add(x, h)
    }
}
