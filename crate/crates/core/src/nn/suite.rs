//! Randomized finite-difference fixtures covering every op on the tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::AttentionMask;
use super::gradcheck::{grad_check, GradCheckReport};
use super::graph::{Graph, Var};
use super::ops::ResampleMap;
use super::tensor::Tensor;
use super::TensorError;

type Build = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, TensorError>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks stay outside the stencil.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Contracts an op output against a fixed random probe so every output
/// coordinate contributes to the checked scalar.
fn probe(g: &mut Graph<'_, f64>, y: Var, c: &Tensor<f64>) -> Result<Var, TensorError> {
    let c = c.clone().reshaped(g.shape(y))?;
    g.weighted_sum(y, c)
}

fn case<F>(name: &'static str, inputs: Vec<Tensor<f64>>, out_len: usize, rng: &mut ChaCha8Rng, f: F) -> Case
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, TensorError> + 'static,
{
    let c = uniform(rng, &[out_len]);
    Case {
        name,
        inputs,
        build: Box::new(move |g, v| {
            let y = f(g, v)?;
            probe(g, y, &c)
        }),
    }
}

fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let n = r.random_range(2..5);
    let d = r.random_range(2..6);
    let k = r.random_range(2..5);
    let mut out = Vec::new();

    let ins = vec![uniform(r, &[n, k]), uniform(r, &[k, d])];
    out.push(case("matmul", ins, n * d, r, |g, v| g.matmul(v[0], v[1])));
    let ins = vec![uniform(r, &[n, d]), uniform(r, &[n, d])];
    out.push(case("add", ins, n * d, r, |g, v| g.add(v[0], v[1])));
    let ins = vec![uniform(r, &[n, d]), uniform(r, &[n, d])];
    out.push(case("sub", ins, n * d, r, |g, v| g.sub(v[0], v[1])));
    let ins = vec![uniform(r, &[n, d]), uniform(r, &[n, d])];
    out.push(case("mul", ins, n * d, r, |g, v| g.mul(v[0], v[1])));
    let ins = vec![uniform(r, &[n, d]), uniform(r, &[d])];
    out.push(case("add_row", ins, n * d, r, |g, v| g.add_row(v[0], v[1])));
    let s: f64 = r.random_range(-2.0..2.0);
    out.push(case("scale", vec![uniform(r, &[n, d])], n * d, r, move |g, v| g.scale(v[0], s)));
    out.push(case("relu", vec![off_zero(r, &[n, d])], n * d, r, |g, v| g.relu(v[0])));
    out.push(case("gelu", vec![uniform(r, &[n, d])], n * d, r, |g, v| g.gelu(v[0])));
    out.push(case("sigmoid", vec![uniform(r, &[n, d])], n * d, r, |g, v| g.sigmoid(v[0])));
    out.push(case("softplus", vec![uniform(r, &[n, d])], n * d, r, |g, v| g.softplus(v[0])));
    let pos = Tensor::from_fn(&[n, d], |_| r.random_range(0.2..2.0));
    out.push(case("log", vec![pos], n * d, r, |g, v| g.log(v[0])));
    out.push(case("exp", vec![uniform(r, &[n, d])], n * d, r, |g, v| g.exp(v[0])));
    // inputs in ±[0.1, 1) never sit on the ±0.5 bounds' stencil
    let mut xc = off_zero(r, &[n, d]);
    xc.data_mut().iter_mut().for_each(|v| {
        if (v.abs() - 0.5).abs() < 0.01 {
            *v *= 1.1
        }
    });
    out.push(case("clamp", vec![xc], n * d, r, |g, v| g.clamp(v[0], -0.5, 0.5)));
    out.push(case("softmax", vec![uniform(r, &[n, d])], n * d, r, |g, v| g.softmax(v[0])));
    // well-spread rows keep 1/std, and with it the stencil's curvature, moderate
    let mut x = uniform(r, &[n, d + 2]);
    x.data_mut().iter_mut().for_each(|v| *v *= 4.0);
    let ins = vec![x, uniform(r, &[d + 2]), uniform(r, &[d + 2])];
    out.push(case("layernorm", ins, n * (d + 2), r, |g, v| g.layernorm(v[0], v[1], v[2])));

    let (ci, co, hw) = (r.random_range(1..3), r.random_range(1..4), r.random_range(4..7));
    for stride in [1usize, 2] {
        let ins = vec![uniform(r, &[ci, hw, hw]), uniform(r, &[co, ci, 3, 3]), uniform(r, &[co])];
        let o = (hw + 2 - 3) / stride + 1;
        let name = if stride == 1 { "conv2d_s1" } else { "conv2d_s2" };
        out.push(case(name, ins, co * o * o, r, move |g, v| g.conv2d(v[0], v[1], v[2], stride, 1)));
    }
    let ins = vec![uniform(r, &[ci, 3, 3]), uniform(r, &[ci, co, 4, 4]), uniform(r, &[co])];
    out.push(case("conv_transpose2d", ins, co * 6 * 6, r, |g, v| g.conv_transpose2d(v[0], v[1], v[2], 2, 1)));

    let vocab = r.random_range(3..6);
    let ids: Vec<usize> = (0..n + 1).map(|_| r.random_range(0..vocab)).collect();
    let rows = ids.len();
    out.push(case("embedding", vec![uniform(r, &[vocab, d])], rows * d, r, move |g, v| g.embedding(v[0], &ids)));
    out.push(case("sum", vec![uniform(r, &[n, d])], 1, r, |g, v| g.sum(v[0])));
    out.push(case("mean", vec![uniform(r, &[n, d])], 1, r, |g, v| g.mean(v[0])));
    out.push(case("variance", vec![uniform(r, &[n, d])], 1, r, |g, v| g.variance(v[0])));
    out.push(case("mean_rows", vec![uniform(r, &[n, d])], d, r, |g, v| g.mean_rows(v[0])));
    let ins = vec![uniform(r, &[n, d]), uniform(r, &[2, d])];
    out.push(case("concat", ins, (n + 2) * d, r, |g, v| g.concat_rows(&[v[0], v[1]])));
    let ins = vec![uniform(r, &[n + 2, d])];
    out.push(case("slice", ins, n * d, r, move |g, v| g.slice_rows(v[0], 1, n + 1)));
    out.push(case("transpose", vec![uniform(r, &[n, d])], n * d, r, |g, v| g.transpose(v[0])));
    out.push(case("reshape", vec![uniform(r, &[n, d])], n * d, r, move |g, v| g.reshape(v[0], &[d, n])));
    let keep = r.random_range(0..=n);
    out.push(case("mask_rows", vec![uniform(r, &[n, d])], n * d, r, move |g, v| g.mask_rows(v[0], keep)));

    let (prefix, slots, heads) = (r.random_range(1..4), r.random_range(1..4), 2);
    let len = prefix + slots;
    let dm = 2 * r.random_range(1..4);
    let ins = vec![uniform(r, &[len, dm]), uniform(r, &[len, dm]), uniform(r, &[len, dm])];
    out.push(case("attention", ins, len * dm, r, move |g, v| {
        g.attention(v[0], v[1], v[2], &AttentionMask::prefix_causal(prefix, slots), heads)
    }));

    let (x0, y0) = (r.random_range(0..3), r.random_range(0..3));
    let (x1, y1) = (x0 + r.random_range(1..4), y0 + r.random_range(1..4));
    out.push(case("resample", vec![uniform(r, &[2, 6, 6])], 2 * 36, r, move |g, v| {
        g.resample(v[0], ResampleMap::new(2, 6, 6, (x0, y0, x1, y1), 6, 6))
    }));
    out
}

/// Runs every op fixture for `seed` with step `1e-4` and returns
/// `(op, report)` pairs.
pub fn check_all_ops(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>, TensorError> {
    cases(seed)
        .into_iter()
        .map(|c| grad_check(|g, v| (c.build)(g, v), &c.inputs, 1e-4).map(|r| (c.name, r)))
        .collect()
}

/// Names of all ops exercised by [`check_all_ops`].
pub fn op_names() -> Vec<&'static str> {
    cases(0).into_iter().map(|c| c.name).collect()
}
