//! The full single-image objective as one differentiable graph, and its
//! finite-difference check on small seeded models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::CodecConfig;
use crate::corpus::{vocab, BBox, Image, QuerySample};
use crate::dygen::{gaussian_noise, DygenConfig};
use crate::model::{DoveModel, ModelConfig, SampleOpts, NULL_QUERY};
use crate::nn::{grad_check_store, init, GradCheckReport, Graph, Group, GroupMask, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::objective::{eos_weights, qdove_eos_weights, query_loss_graph, rec_loss_graph, total_loss_graph, LossWeights};

/// EOS branch of one sample, normally decided against the threshold states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branch {
    pub above: bool,
    pub irr_below: bool,
}

/// Forward pass, reconstruction or query loss, the EOS term under `branch`
/// and the KL term when `noise` is given. Returns the total loss.
#[allow(clippy::too_many_arguments)]
pub fn composite_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    model: &DoveModel,
    w: &LossWeights,
    img: &Image,
    query: Option<&QuerySample>,
    gan: bool,
    lambda_eos: f64,
    branch: Branch,
    noise: Option<Tensor<T>>,
) -> Result<Var, TensorError> {
    let prefix: &[usize] = query.map_or(&NULL_QUERY, |q| &q.query_tokens);
    let f = model.forward(g, img, prefix, SampleOpts { budget: None, noise })?;
    let nets = model.nets(gan);
    let k = model.k();
    let (main, coeffs) = match query {
        None => {
            let r = rec_loss_graph(g, nets, f.x, f.x_hat, w)?;
            (r.total, eos_weights(k, f.m, branch.above))
        }
        Some(q) => {
            let r = query_loss_graph(g, nets, f.x, f.x_hat, &q.boxes, w)?;
            (r.total, qdove_eos_weights(k, f.m, branch.above, branch.irr_below))
        }
    };
    let (_, total) = total_loss_graph(g, main, f.gen.p_eos, &coeffs, f.kl, w, lambda_eos)?;
    Ok(total)
}

fn fixture_config(gaussian: bool) -> ModelConfig {
    ModelConfig {
        codec: CodecConfig { image_size: 16, latent_dim: 8, codebook_size: 8, base_channels: 4, ..Default::default() },
        dygen: DygenConfig { max_tokens: 4, model_dim: 8, heads: 2, layers: 1, decoder_layers: 1, gaussian, ..Default::default() },
        disc_width: 4,
    }
}

/// Finite-difference check of [`composite_loss`] on a seeded fixture. The
/// seed selects the variant: query or plain, GAN on or off, Gaussian or not,
/// and the EOS branch. Zero-initialized heads are randomized so EOS
/// decisions sit away from the gate, and every parameter is jittered off
/// the ReLU kinks of a fresh initialization.
pub fn check_composite(seed: u64, coords_per_param: Option<usize>) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = seed % 2 == 1;
    let gan = seed % 3 == 0;
    let cfg = fixture_config(gaussian);
    let mut store = ParamStore::<f64>::new();
    let model = DoveModel::build(&mut store, seed, cfg.clone())?;
    let heads = [Some(&model.gen.eos_head), model.gen.logvar_head.as_ref()];
    for h in heads.into_iter().flatten() {
        let t = init::normal(&mut rng, store.get(h.w).shape(), 0.3);
        store.set(h.w, t)?;
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let jitter: Tensor<f64> = init::normal(&mut rng, store.get(id).shape(), 0.02);
        store.get_mut(id).data_mut().iter_mut().zip(jitter.data()).for_each(|(v, j)| *v += j);
    }
    let n = cfg.codec.image_size;
    let data = (0..3 * n * n).map(|_| rng.random_range(0.05..0.95f32)).collect();
    let img = Image::new(n, n, data).map_err(|e| TensorError::Config(e.to_string()))?;
    let query = (seed % 4 < 2).then(|| {
        let (x0, y0) = (rng.random_range(0..n - 4), rng.random_range(0..n - 4));
        let b = BBox { x0, y0, x1: x0 + rng.random_range(3..n - x0), y1: y0 + rng.random_range(3..n - y0) };
        QuerySample { query_tokens: vec![rng.random_range(1..vocab::SIZE)], boxes: vec![b], image_id: seed }
    });
    let branch = Branch { above: rng.random_bool(0.5), irr_below: rng.random_bool(0.5) };
    let noise: Option<Tensor<f64>> = gaussian.then(|| gaussian_noise(seed, cfg.dygen.max_tokens, cfg.codec.latent_dim));
    let w = LossWeights { gan: 0.1, outside: 0.5, kl: 0.1, ..LossWeights::default() };
    grad_check_store(
        &store,
        GroupMask::of(&Group::ALL),
        |s, mask| {
            let mut g = Graph::new(s, mask).checked(mask != GroupMask::NONE);
            let l = composite_loss(&mut g, &model, &w, &img, query.as_ref(), gan, w.eos_max, branch, noise.clone())?;
            Ok((g, l))
        },
        1e-6,
        coords_per_param,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_gradients_match_finite_differences() {
        for seed in 0..6 {
            let r = check_composite(seed, Some(2)).unwrap();
            assert!(r.max_rel_error < 1e-3, "seed {seed}: {r:?}");
        }
    }
}
