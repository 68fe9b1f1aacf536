//! The full tokenizer: codec, generator, token decoder, perceptual extractor
//! and discriminator sharing one parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{image_tensor, tensor_image, Codec, CodecConfig, Discriminator, PerceptualExtractor};
use crate::corpus::{vocab, Image};
use crate::dygen::{detect_eos, gaussian_noise, reparameterize, DygenConfig, GenOutput, Generator, TokenDecoder, TokenSequence};
use crate::nn::{Graph, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::objective::RecNets;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub dygen: DygenConfig,
    pub disc_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { codec: CodecConfig::default(), dygen: DygenConfig::default(), disc_width: 16 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        self.codec.validate()?;
        self.dygen.validate()?;
        if self.disc_width == 0 {
            return Err(TensorError::Config("disc_width must be positive".into()));
        }
        Ok(())
    }
}

pub const NULL_QUERY: [usize; 1] = [vocab::NULL];

/// How the token count of one forward pass is chosen.
#[derive(Clone, Debug, Default)]
pub struct SampleOpts<T: Scalar> {
    /// Force exactly this many slots, ignoring EOS.
    pub budget: Option<usize>,
    /// Reparameterization noise `[K, d_t]`; the Gaussian variant uses the
    /// mean when absent.
    pub noise: Option<Tensor<T>>,
}

/// Graph handles of one image's pass through the tokenizer.
pub struct Forward {
    pub x: Var,
    pub h_v: Var,
    pub gen: GenOutput,
    pub p_eos: Vec<f64>,
    pub eos_pos: Option<usize>,
    /// Slots kept: the budget, the EOS position, or `K`.
    pub m: usize,
    pub tokens: Var,
    pub grid: Var,
    pub x_hat: Var,
    pub kl: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct DoveModel {
    pub cfg: ModelConfig,
    pub codec: Codec,
    pub perc: PerceptualExtractor,
    pub disc: Discriminator,
    pub gen: Generator,
    pub dec: TokenDecoder,
}

impl DoveModel {
    /// Registers every parameter in a fixed order from one seed.
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, seed: u64, cfg: ModelConfig) -> Result<Self, TensorError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codec = Codec::new(store, &mut rng, cfg.codec.clone())?;
        let perc = PerceptualExtractor::from_codec(store, &codec);
        let disc = Discriminator::new(store, &mut rng, cfg.disc_width);
        let (d_c, n_h) = (cfg.codec.latent_dim, cfg.codec.grid_len());
        let gen = Generator::new(store, &mut rng, cfg.dygen.clone(), d_c, n_h)?;
        let dec = TokenDecoder::new(store, &mut rng, &cfg.dygen, d_c, n_h)?;
        Ok(Self { cfg, codec, perc, disc, gen, dec })
    }

    pub fn new(seed: u64, cfg: ModelConfig) -> Result<(Self, ParamStore<f32>), TensorError> {
        let mut store = ParamStore::new();
        let m = Self::build(&mut store, seed, cfg)?;
        Ok((m, store))
    }

    pub fn k(&self) -> usize {
        self.cfg.dygen.max_tokens
    }

    pub fn nets(&self, gan: bool) -> RecNets<'_> {
        RecNets { perc: &self.perc, disc: gan.then_some(&self.disc) }
    }

    /// Encode → generate → EOS → zero-mask → token decode → pixel decode.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        img: &Image,
        query: &[usize],
        opts: SampleOpts<T>,
    ) -> Result<Forward, TensorError> {
        let k = self.k();
        let x = g.constant(image_tensor(img));
        let h_v = self.codec.encode(g, x)?;
        let gen = self.gen.forward(g, h_v, query)?;
        let p_eos: Vec<f64> = g.value(gen.p_eos).data().iter().map(|v| v.as_f64()).collect();
        let eos_pos = detect_eos_f64(&p_eos, self.cfg.dygen.gate);
        let m = match opts.budget {
            Some(b) if (1..=k).contains(&b) => b,
            Some(b) => return Err(TensorError::Config(format!("budget {b} outside 1..={k}"))),
            None => eos_pos.unwrap_or(k),
        };
        let (slots, kl) = match (gen.logvar, opts.noise) {
            (Some(lv), Some(noise)) => {
                let (s, kl) = reparameterize(g, gen.slots, lv, m, noise)?;
                (s, Some(kl))
            }
            _ => (gen.slots, None),
        };
        let tokens = g.mask_rows(slots, m)?;
        let grid = self.dec.forward(g, tokens)?;
        let x_hat = self.codec.decode(g, grid)?;
        Ok(Forward { x, h_v, gen, p_eos, eos_pos, m, tokens, grid, x_hat, kl })
    }

    /// Noise for the Gaussian variant's training pass, `None` otherwise.
    pub fn training_noise<T: Scalar>(&self, seed: u64) -> Option<Tensor<T>> {
        self.cfg.dygen.gaussian.then(|| gaussian_noise(seed, self.k(), self.cfg.codec.latent_dim))
    }

    /// Token record for one image (Gaussian variant: the mean).
    pub fn tokens(&self, store: &ParamStore<f32>, img: &Image, query: &[usize]) -> Result<TokenSequence, TensorError> {
        let mut g = Graph::inference(store);
        let f = self.forward(&mut g, img, query, SampleOpts::default())?;
        Ok(sequence(&g, &f))
    }

    /// Reconstruction from the model's own EOS, or from a forced budget.
    pub fn reconstruct(
        &self,
        store: &ParamStore<f32>,
        img: &Image,
        query: &[usize],
        budget: Option<usize>,
    ) -> Result<(TokenSequence, Image), TensorError> {
        let mut g = Graph::inference(store);
        let f = self.forward(&mut g, img, query, SampleOpts { budget, noise: None })?;
        let mut seq = sequence(&g, &f);
        if budget.is_some() {
            seq.eos_pos = Some(f.m);
        }
        Ok((seq, tensor_image(g.value(f.x_hat))))
    }

    /// Pixel reconstruction from a stored token record.
    pub fn decode_tokens(&self, store: &ParamStore<f32>, seq: &TokenSequence) -> Result<Image, TensorError> {
        let grid = self.dec.decode_tokens(store, seq)?;
        self.codec.decode_grid(store, &grid)
    }
}

fn detect_eos_f64(p: &[f64], gate: f64) -> Option<usize> {
    let p32: Vec<f32> = p.iter().map(|&v| v as f32).collect();
    detect_eos(&p32, gate)
}

fn sequence(g: &Graph<'_, f32>, f: &Forward) -> TokenSequence {
    TokenSequence {
        eos_pos: f.eos_pos,
        p_eos: f.p_eos.iter().map(|&v| v as f32).collect(),
        slots: g.value(f.tokens).clone(),
    }
}
