//! Miniature VQ autoencoder: strided-conv encoder to a latent grid, a
//! nearest-neighbour codebook with straight-through gradients, a
//! transposed-conv decoder, a patch discriminator and a frozen perceptual
//! feature extractor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Image, CHANNELS};
use crate::nn::{init, Conv2d, ConvTranspose2d, Graph, Group, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub image_size: usize,
    /// Side of the square pixel patch behind one latent position; a power of two.
    pub patch: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    /// Width of the first encoder stage; later stages double it.
    pub base_channels: usize,
    /// Commitment weight.
    pub beta: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { image_size: 32, patch: 8, latent_dim: 64, codebook_size: 512, base_channels: 16, beta: 0.25 }
    }
}

impl CodecConfig {
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    /// `N_h`, the number of latent positions.
    pub fn grid_len(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    fn stages(&self) -> usize {
        self.patch.trailing_zeros() as usize
    }

    /// Output width of encoder stage `i`.
    fn width(&self, i: usize) -> usize {
        if i + 1 == self.stages() {
            self.latent_dim
        } else {
            self.base_channels << i
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if !self.patch.is_power_of_two() || self.patch < 2 {
            return Err(TensorError::Config(format!("patch {} must be a power of two >= 2", self.patch)));
        }
        if self.image_size == 0 || self.image_size % self.patch != 0 {
            return Err(TensorError::Config(format!("image size {} not a multiple of patch {}", self.image_size, self.patch)));
        }
        if self.codebook_size < 2 {
            return Err(TensorError::Config("codebook needs at least two rows".into()));
        }
        if self.latent_dim == 0 || self.base_channels == 0 {
            return Err(TensorError::Config("codec widths must be positive".into()));
        }
        Ok(())
    }
}

/// `[3, H, W]` tensor of an image.
pub fn image_tensor<T: Scalar>(img: &Image) -> Tensor<T> {
    let data = img.to_chw().into_iter().map(|v| T::from_f64(v as f64)).collect();
    Tensor::new(vec![CHANNELS, img.height(), img.width()], data).expect("image dims are positive")
}

/// Image from a `[3, H, W]` tensor, clamped to `[0, 1]`.
pub fn tensor_image<T: Scalar>(t: &Tensor<T>) -> Image {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let chw: Vec<f32> = t.data().iter().map(|v| v.as_f64() as f32).collect();
    Image::from_chw(h, w, &chw).expect("tensor shaped [3, H, W]")
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub encoder: Vec<Conv2d>,
    pub decoder: Vec<ConvTranspose2d>,
    pub codebook: ParamId,
}

/// Straight-through quantization result.
pub struct Quantized {
    pub indices: Vec<usize>,
    /// Forward value equals the snapped rows; gradient flows to the input as identity.
    pub out: Var,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
}

impl Codec {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, cfg: CodecConfig) -> Result<Self, TensorError> {
        cfg.validate()?;
        let s = cfg.stages();
        let mut encoder = Vec::with_capacity(s);
        let mut cin = CHANNELS;
        for i in 0..s {
            let cout = cfg.width(i);
            encoder.push(Conv2d::new(store, rng, &format!("codec.enc{i}"), Group::Codec, cin, cout, 3, 2, 1));
            cin = cout;
        }
        let mut decoder = Vec::with_capacity(s);
        for i in (0..s).rev() {
            let cout = if i == 0 { CHANNELS } else { cfg.width(i - 1) };
            decoder.push(ConvTranspose2d::new(store, rng, &format!("codec.dec{}", s - 1 - i), Group::Codec, cin, cout, 4, 2, 1));
            cin = cout;
        }
        let codebook = store.add("codec.codebook", Group::Codebook, init::normal(rng, &[cfg.codebook_size, cfg.latent_dim], 1.0));
        Ok(Self { cfg, encoder, decoder, codebook })
    }

    fn check_image<T: Scalar>(&self, g: &Graph<'_, T>, img: Var) -> Result<(), TensorError> {
        let want = [CHANNELS, self.cfg.image_size, self.cfg.image_size];
        if g.shape(img) != want {
            return Err(TensorError::Shape { op: "codec_input", lhs: g.shape(img).to_vec(), rhs: want.to_vec() });
        }
        Ok(())
    }

    /// `[3, H, W]` → `[N_h, d_c]`, positions in raster order.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<Var, TensorError> {
        self.check_image(g, img)?;
        let mut x = img;
        for (i, conv) in self.encoder.iter().enumerate() {
            x = conv.forward(g, x)?;
            if i + 1 < self.encoder.len() {
                x = g.relu(x)?;
            }
        }
        let x = g.reshape(x, &[self.cfg.latent_dim, self.cfg.grid_len()])?;
        g.transpose(x)
    }

    /// `[N_h, d_c]` → `[3, H, W]` in `[0, 1]`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: Var) -> Result<Var, TensorError> {
        let want = [self.cfg.grid_len(), self.cfg.latent_dim];
        if g.shape(grid) != want {
            return Err(TensorError::Shape { op: "codec_decode", lhs: g.shape(grid).to_vec(), rhs: want.to_vec() });
        }
        let side = self.cfg.grid_side();
        let x = g.transpose(grid)?;
        let mut x = g.reshape(x, &[self.cfg.latent_dim, side, side])?;
        for (i, conv) in self.decoder.iter().enumerate() {
            x = conv.forward(g, x)?;
            x = if i + 1 < self.decoder.len() { g.relu(x)? } else { g.sigmoid(x)? };
        }
        Ok(x)
    }

    /// Snaps every row of `grid` to its nearest codebook row (L2).
    pub fn quantize<T: Scalar>(&self, g: &mut Graph<'_, T>, grid: Var) -> Result<Quantized, TensorError> {
        let cb = g.param(self.codebook);
        let indices = nearest_rows(g.value(grid), g.value(cb))?;
        let q = g.embedding(cb, &indices)?;
        let grid_const = g.detach(grid);
        let q_const = g.detach(q);
        let codebook_loss = g.mse(q, grid_const)?;
        let commitment_loss = g.mse(grid, q_const)?;
        let snapped = g.value(q).clone();
        let out = g.straight_through(grid, snapped)?;
        Ok(Quantized { indices, out, codebook_loss, commitment_loss })
    }

    /// Inference-only encode of one image.
    pub fn encode_image(&self, store: &ParamStore<f32>, img: &Image) -> Result<Tensor<f32>, TensorError> {
        let mut g = Graph::inference(store);
        let x = g.constant(image_tensor(img));
        let h = self.encode(&mut g, x)?;
        Ok(g.value(h).clone())
    }

    /// Inference-only decode of one grid.
    pub fn decode_grid(&self, store: &ParamStore<f32>, grid: &Tensor<f32>) -> Result<Image, TensorError> {
        let mut g = Graph::inference(store);
        let x = g.constant(grid.clone());
        let y = self.decode(&mut g, x)?;
        Ok(tensor_image(g.value(y)))
    }

    /// Encode, quantize, decode.
    pub fn reconstruct(&self, store: &ParamStore<f32>, img: &Image) -> Result<Image, TensorError> {
        let mut g = Graph::inference(store);
        let x = g.constant(image_tensor(img));
        let h = self.encode(&mut g, x)?;
        let q = self.quantize(&mut g, h)?;
        let y = self.decode(&mut g, q.out)?;
        Ok(tensor_image(g.value(y)))
    }
}

/// Index of the nearest row of `codebook` for each row of `x`; ties go to
/// the lower index.
pub fn nearest_rows<T: Scalar>(x: &Tensor<T>, codebook: &Tensor<T>) -> Result<Vec<usize>, TensorError> {
    let (Some((n, d)), Some((v, d2))) = (x.dims2(), codebook.dims2()) else {
        return Err(TensorError::Shape { op: "quantize", lhs: x.shape().to_vec(), rhs: codebook.shape().to_vec() });
    };
    if d != d2 {
        return Err(TensorError::Shape { op: "quantize", lhs: x.shape().to_vec(), rhs: codebook.shape().to_vec() });
    }
    if v == 0 {
        return Err(TensorError::Config("empty codebook".into()));
    }
    Ok((0..n)
        .map(|i| {
            let xi = x.row(i);
            let mut best = (f64::INFINITY, 0);
            for k in 0..v {
                let dist: f64 = xi.iter().zip(codebook.row(k)).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            best.1
        })
        .collect())
}

/// Frozen copy of the first two encoder stages.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    pub layers: [Conv2d; 2],
}

impl PerceptualExtractor {
    /// Registers extractor parameters copied from the codec's current encoder.
    pub fn from_codec<T: Scalar>(store: &mut ParamStore<T>, codec: &Codec) -> Self {
        let mut copy = |i: usize| {
            let src = &codec.encoder[i];
            let w = store.add(format!("perc.l{i}.w"), Group::Extractor, store.get(src.w).clone());
            let b = store.add(format!("perc.l{i}.b"), Group::Extractor, store.get(src.b).clone());
            Conv2d { w, b, stride: src.stride, pad: src.pad }
        };
        let l0 = copy(0);
        let l1 = copy(1);
        Self { layers: [l0, l1] }
    }

    /// Overwrites the frozen weights with the codec's current encoder.
    pub fn refresh<T: Scalar>(&self, store: &mut ParamStore<T>, codec: &Codec) {
        for (dst, src) in self.layers.iter().zip(&codec.encoder) {
            let (w, b) = (store.get(src.w).clone(), store.get(src.b).clone());
            *store.get_mut(dst.w) = w;
            *store.get_mut(dst.b) = b;
        }
    }

    fn features<T: Scalar>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<[Var; 2], TensorError> {
        let a = self.layers[0].forward(g, img)?;
        let a = g.relu(a)?;
        let b = self.layers[1].forward(g, a)?;
        let b = g.relu(b)?;
        Ok([a, b])
    }

    /// Mean of the per-layer mean squared activation differences.
    pub fn distance<T: Scalar>(&self, g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var, TensorError> {
        let fa = self.features(g, a)?;
        let fb = self.features(g, b)?;
        let d0 = g.mse(fa[0], fb[0])?;
        let d1 = g.mse(fa[1], fb[1])?;
        let half = T::from_f64(0.5);
        g.combine(&[(half, d0), (half, d1)])
    }
}

/// Conv patch discriminator: image → `[1, H/4, W/4]` logits.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub layers: [Conv2d; 3],
}

impl Discriminator {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, width: usize) -> Self {
        let l0 = Conv2d::new(store, rng, "disc.l0", Group::Discriminator, CHANNELS, width, 3, 2, 1);
        let l1 = Conv2d::new(store, rng, "disc.l1", Group::Discriminator, width, 2 * width, 3, 2, 1);
        // zero head: a fresh discriminator sits at the symmetric point, logit 0
        let w = store.add("disc.l2.w", Group::Discriminator, Tensor::zeros(&[1, 2 * width, 3, 3]));
        let b = store.add("disc.l2.b", Group::Discriminator, Tensor::zeros(&[1]));
        Self { layers: [l0, l1, Conv2d { w, b, stride: 1, pad: 1 }] }
    }

    pub fn logits<T: Scalar>(&self, g: &mut Graph<'_, T>, img: Var) -> Result<Var, TensorError> {
        let x = self.layers[0].forward(g, img)?;
        let x = leaky(g, x)?;
        let x = self.layers[1].forward(g, x)?;
        let x = leaky(g, x)?;
        self.layers[2].forward(g, x)
    }

    /// `mean softplus(−D(real)) + mean softplus(D(fake))`.
    pub fn discriminator_loss<T: Scalar>(&self, g: &mut Graph<'_, T>, real: Var, fake: Var) -> Result<Var, TensorError> {
        let lr = self.logits(g, real)?;
        let nr = g.scale(lr, -T::one())?;
        let sr = g.softplus(nr)?;
        let a = g.mean(sr)?;
        let lf = self.logits(g, fake)?;
        let sf = g.softplus(lf)?;
        let b = g.mean(sf)?;
        g.add(a, b)
    }

    /// Non-saturating generator term `mean softplus(−D(fake))`.
    pub fn generator_loss<T: Scalar>(&self, g: &mut Graph<'_, T>, fake: Var) -> Result<Var, TensorError> {
        let lf = self.logits(g, fake)?;
        let n = g.scale(lf, -T::one())?;
        let s = g.softplus(n)?;
        g.mean(s)
    }
}

/// `max(x, 0.2·x)`, built from relu so it stays on the registered op set.
fn leaky<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var, TensorError> {
    let r = g.relu(x)?;
    let s = g.scale(r, T::from_f64(0.8))?;
    let l = g.scale(x, T::from_f64(0.2))?;
    g.add(s, l)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::GroupMask;

    fn build() -> (ParamStore<f32>, Codec) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let codec = Codec::new(&mut store, &mut rng, CodecConfig::default()).unwrap();
        (store, codec)
    }

    #[test]
    fn grid_shape_for_default_config() {
        let (store, codec) = build();
        let img = Image::filled(32, 32, [0.5, 0.2, 0.1]);
        let h = codec.encode_image(&store, &img).unwrap();
        assert_eq!(h.shape(), &[16, 64]);
        assert_eq!(h, codec.encode_image(&store, &img).unwrap());
    }

    #[test]
    fn encoder_rejects_wrong_size() {
        let (store, codec) = build();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(&[3, 24, 24]));
        assert!(matches!(codec.encode(&mut g, x), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn decode_stays_in_unit_range() {
        let (store, codec) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let grid = init::normal::<f32, _>(&mut rng, &[16, 64], 3.0);
            let img = codec.decode_grid(&store, &grid).unwrap();
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn two_row_codebook_nearest_neighbour() {
        let cb = Tensor::new(vec![2, 2], vec![0.0f64, 0.0, 1.0, 1.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.9, 0.8]).unwrap();
        assert_eq!(nearest_rows(&x, &cb).unwrap(), vec![1]);
        let exact = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(nearest_rows(&exact, &cb).unwrap(), vec![0]);
    }

    #[test]
    fn quantized_rows_are_exact_codebook_rows() {
        let (store, codec) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::inference(&store);
        let x = g.constant(init::normal(&mut rng, &[16, 64], 1.0));
        let q = codec.quantize(&mut g, x).unwrap();
        let cb = store.get(codec.codebook);
        for (r, &k) in q.indices.iter().enumerate() {
            assert_eq!(g.value(q.out).row(r), cb.row(k));
        }
    }

    #[test]
    fn straight_through_matches_unquantized_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let codec = Codec::new(&mut store, &mut rng, CodecConfig { codebook_size: 4, latent_dim: 8, ..Default::default() }).unwrap();
        let x = init::normal::<f64, _>(&mut rng, &[3, 8], 1.0);
        let c = init::normal::<f64, _>(&mut rng, &[24], 1.0);
        let grad_of = |quant: bool| {
            let mut s = store.clone();
            let id = s.add("x", Group::Generator, x.clone());
            let mut g = Graph::new(&s, GroupMask::of(&[Group::Generator]));
            let v = g.param(id);
            let y = if quant { codec.quantize(&mut g, v).unwrap().out } else { v };
            let l = g.weighted_sum(y, c.clone().reshaped(&[3, 8]).unwrap()).unwrap();
            g.backward(l).unwrap().get(id).unwrap().clone()
        };
        assert_eq!(grad_of(true), grad_of(false));
    }

    #[test]
    fn vq_loss_gradients_match_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let codec = Codec::new(&mut store, &mut rng, CodecConfig { codebook_size: 5, latent_dim: 4, ..Default::default() }).unwrap();
        let x = init::normal::<f64, _>(&mut rng, &[3, 4], 1.0);
        let xid = store.add("x", Group::Generator, x.clone());
        let mut g = Graph::new(&store, GroupMask::of(&[Group::Generator, Group::Codebook]));
        let v = g.param(xid);
        let q = codec.quantize(&mut g, v).unwrap();
        let l = g.combine(&[(1.0, q.codebook_loss), (0.25, q.commitment_loss)]).unwrap();
        let grads = g.backward(l).unwrap();
        let cb = store.get(codec.codebook);
        let n = 12.0;
        let mut want_cb = vec![0.0; 20];
        for (r, &k) in q.indices.iter().enumerate() {
            for c in 0..4 {
                let diff = cb.row(k)[c] - x.row(r)[c];
                let gx = grads.get(xid).unwrap().row(r)[c];
                assert!((gx - 0.25 * 2.0 * -diff / n).abs() < 1e-12);
                want_cb[k * 4 + c] += 2.0 * diff / n;
            }
        }
        let got = grads.get(codec.codebook).unwrap().data();
        assert!(got.iter().zip(&want_cb).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn fresh_discriminator_sits_at_log_two() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Discriminator::new(&mut store, &mut rng, 8);
        let mut g = Graph::inference(&store);
        let img = g.constant(Tensor::full(&[3, 32, 32], 0.4));
        let dl = d.discriminator_loss(&mut g, img, img).unwrap();
        let gl = d.generator_loss(&mut g, img).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((g.value(dl).item() - 2.0 * ln2).abs() < 1e-12);
        assert!((g.value(gl).item() - ln2).abs() < 1e-12);
    }

    #[test]
    fn perceptual_distance_properties() {
        let (mut store, codec) = build();
        let perc = PerceptualExtractor::from_codec(&mut store, &codec);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::from_fn(&[3, 32, 32], |_| rng.random_range(0.0..1.0));
        let noise = Tensor::<f32>::from_fn(&[3, 32, 32], |_| rng.random_range(-1.0..1.0));
        let dist = |x: &Tensor<f32>, y: &Tensor<f32>| {
            let mut g = Graph::inference(&store);
            let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
            let d = perc.distance(&mut g, xv, yv).unwrap();
            g.value(d).item()
        };
        assert_eq!(dist(&a, &a), 0.0);
        let mut prev = 0.0;
        for eps in [0.01f32, 0.05, 0.1, 0.3] {
            let b = Tensor::new(vec![3, 32, 32], a.data().iter().zip(noise.data()).map(|(p, n)| p + eps * n).collect()).unwrap();
            let d = dist(&a, &b);
            assert_eq!(d, dist(&b, &a));
            assert!(d > prev);
            prev = d;
        }
    }
}
