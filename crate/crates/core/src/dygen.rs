//! Dynamic token generation: a transformer over `[H_v ∥ query ∥ K slots]`
//! whose slots see only earlier-or-equal timestamps, per-slot EOS heads,
//! zero-masking after the first EOS, and a non-autoregressive decoder that
//! maps the padded slots back to a latent grid.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab;
use crate::nn::{
    init, timestamp_table, AttentionMask, Block, Graph, Group, LayerNorm, Linear, ParamId, ParamStore, Scalar, Tensor,
    TensorError, Var,
};

pub const LOGVAR_MIN: f64 = -8.0;
pub const LOGVAR_MAX: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DygenConfig {
    /// `K`, the number of timestamp slots.
    pub max_tokens: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_layers: usize,
    /// EOS fires at the first slot with `p_eos > gate`.
    pub gate: f64,
    pub gaussian: bool,
}

impl Default for DygenConfig {
    fn default() -> Self {
        Self { max_tokens: 16, model_dim: 64, layers: 2, heads: 4, mlp_ratio: 2, decoder_layers: 2, gate: 0.5, gaussian: false }
    }
}

impl DygenConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |m: String| Err(TensorError::Config(m));
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 || self.model_dim % 2 != 0 {
            return bad(format!("model_dim {} must be even and divisible by heads {}", self.model_dim, self.heads));
        }
        if self.layers == 0 || self.decoder_layers == 0 || self.mlp_ratio == 0 {
            return bad("layer counts and mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.gate) {
            return bad(format!("gate {} outside [0, 1)", self.gate));
        }
        Ok(())
    }
}

/// First 1-based slot whose probability exceeds `gate`.
pub fn detect_eos(p_eos: &[f32], gate: f64) -> Option<usize> {
    p_eos.iter().position(|&p| p as f64 > gate).map(|i| i + 1)
}

/// Slots emitted for a sequence: the EOS position, or `K` when none fired.
pub fn effective_length(eos_pos: Option<usize>, k: usize) -> usize {
    eos_pos.unwrap_or(k)
}

/// Dynamic token buffer `D` with per-slot EOS probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub eos_pos: Option<usize>,
    pub p_eos: Vec<f32>,
    #[serde(with = "rows")]
    pub slots: Tensor<f32>,
}

mod rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::nn::Tensor;

    pub fn serialize<S: Serializer>(t: &Tensor<f32>, s: S) -> Result<S::Ok, S::Error> {
        let cols = t.shape()[1];
        let rows: Vec<&[f32]> = t.data().chunks(cols).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor<f32>, D::Error> {
        let rows = Vec::<Vec<f32>>::deserialize(d)?;
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(serde::de::Error::custom("ragged slot rows"));
        }
        let n = rows.len();
        Tensor::new(vec![n, cols], rows.concat()).map_err(serde::de::Error::custom)
    }
}

impl TokenSequence {
    pub fn k(&self) -> usize {
        self.slots.shape()[0]
    }

    pub fn len(&self) -> usize {
        effective_length(self.eos_pos, self.k())
    }

    pub fn is_empty(&self) -> bool {
        self.k() == 0
    }

    /// Whether every slot after `eos_pos` is exactly zero.
    pub fn invariant_holds(&self) -> bool {
        match self.eos_pos {
            None => true,
            Some(m) => self.slots.data()[m * self.slots.shape()[1]..].iter().all(|&v| v == 0.0),
        }
    }
}

/// Zeroes slots after `m` (1-based) and records `m`; `None` is the identity.
pub fn zero_mask(seq: &TokenSequence, m: Option<usize>) -> TokenSequence {
    let Some(m) = m else { return seq.clone() };
    let m = m.clamp(1, seq.k());
    let d = seq.slots.shape()[1];
    let mut slots = seq.slots.clone();
    slots.data_mut()[m * d..].fill(0.0);
    TokenSequence { eos_pos: Some(m), p_eos: seq.p_eos.clone(), slots }
}

/// Keeps exactly the first `budget` slots, ignoring any predicted EOS.
pub fn truncate_to_budget(seq: &TokenSequence, budget: usize) -> Result<TokenSequence, TensorError> {
    if budget == 0 || budget > seq.k() {
        return Err(TensorError::Config(format!("budget {budget} outside 1..={}", seq.k())));
    }
    Ok(zero_mask(seq, Some(budget)))
}

/// Graph outputs of one generator pass.
pub struct GenOutput {
    /// Token means `[K, d_t]`.
    pub slots: Var,
    pub eos_logits: Var,
    /// `[K, 1]` probabilities.
    pub p_eos: Var,
    /// Clamped log-variances `[K, d_t]` when the Gaussian head is enabled.
    pub logvar: Option<Var>,
    /// Residual stream after each block, full sequence.
    pub hidden: Vec<Var>,
    /// Row index of the first slot in the sequence.
    pub slot_start: usize,
}

/// The dynamic token generator `f_φ`.
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: DygenConfig,
    pub latent_dim: usize,
    pub grid_len: usize,
    pub in_proj: Linear,
    pub grid_pos: ParamId,
    pub query_embed: ParamId,
    pub prefix_pos: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub token_head: Linear,
    pub eos_head: Linear,
    pub logvar_head: Option<Linear>,
}

impl Generator {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: DygenConfig,
        latent_dim: usize,
        grid_len: usize,
    ) -> Result<Self, TensorError> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let gr = Group::Generator;
        let in_proj = Linear::new(store, rng, "gen.in", gr, latent_dim, d);
        let grid_pos = store.add("gen.grid_pos", gr, init::normal(rng, &[grid_len, d], 0.02));
        let query_embed = store.add("gen.query", gr, init::normal(rng, &[vocab::SIZE, d], 0.02));
        let prefix_pos = store.add("gen.prefix_pos", gr, init::normal(rng, &[vocab::MAX_PREFIX, d], 0.02));
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(store, rng, &format!("gen.b{i}"), gr, d, cfg.heads, d * cfg.mlp_ratio, cfg.layers))
            .collect();
        let ln_f = LayerNorm::new(store, "gen.ln_f", gr, d);
        let token_head = Linear::new(store, rng, "gen.token", gr, d, latent_dim);
        // zero head: p_eos = 0.5 everywhere before training
        let eos_head = Linear::zeros(store, "gen.eos", gr, d, 1);
        let logvar_head = cfg.gaussian.then(|| Linear::zeros(store, "gen.logvar", gr, d, latent_dim));
        Ok(Self { cfg, latent_dim, grid_len, in_proj, grid_pos, query_embed, prefix_pos, blocks, ln_f, token_head, eos_head, logvar_head })
    }

    pub fn eos_params(&self) -> [ParamId; 2] {
        [self.eos_head.w, self.eos_head.b]
    }

    fn check_query(&self, query: &[usize]) -> Result<(), TensorError> {
        if query.is_empty() || query.len() > vocab::MAX_PREFIX {
            return Err(TensorError::Config(format!("query prefix must have 1..={} tokens", vocab::MAX_PREFIX)));
        }
        Ok(())
    }

    /// `[H_v rows + prefix rows]`, the part every slot may read.
    fn prefix<T: Scalar>(&self, g: &mut Graph<'_, T>, h_v: Var, query: &[usize]) -> Result<Var, TensorError> {
        self.check_query(query)?;
        let want = [self.grid_len, self.latent_dim];
        if g.shape(h_v) != want {
            return Err(TensorError::Shape { op: "generate", lhs: g.shape(h_v).to_vec(), rhs: want.to_vec() });
        }
        let x = self.in_proj.forward(g, h_v)?;
        let pos = g.param(self.grid_pos);
        let x = g.add(x, pos)?;
        let table = g.param(self.query_embed);
        let q = g.embedding(table, query)?;
        let ptable = g.param(self.prefix_pos);
        let ppos = g.slice_rows(ptable, 0, query.len())?;
        let q = g.add(q, ppos)?;
        g.concat_rows(&[x, q])
    }

    /// One parallel pass with explicit slot inputs `[n_slots, d]`.
    pub fn forward_with_slots<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        h_v: Var,
        query: &[usize],
        slot_inputs: Tensor<T>,
    ) -> Result<GenOutput, TensorError> {
        let prefix = self.prefix(g, h_v, query)?;
        let p = g.shape(prefix)[0];
        let n = slot_inputs.shape()[0];
        let slots_in = g.constant(slot_inputs);
        let mut x = g.concat_rows(&[prefix, slots_in])?;
        let mask = AttentionMask::prefix_causal(p, n);
        let mut hidden = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(g, x, &mask)?;
            hidden.push(x);
        }
        let x = self.ln_f.forward(g, x)?;
        let s = g.slice_rows(x, p, p + n)?;
        let slots = self.token_head.forward(g, s)?;
        let eos_logits = self.eos_head.forward(g, s)?;
        let p_eos = g.sigmoid(eos_logits)?;
        let logvar = match &self.logvar_head {
            Some(h) => {
                let raw = h.forward(g, s)?;
                Some(g.clamp(raw, T::from_f64(LOGVAR_MIN), T::from_f64(LOGVAR_MAX))?)
            }
            None => None,
        };
        Ok(GenOutput { slots, eos_logits, p_eos, logvar, hidden, slot_start: p })
    }

    /// All `K` slots in a single pass; slot `i` carries timestamp `t = i`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, h_v: Var, query: &[usize]) -> Result<GenOutput, TensorError> {
        let inputs = timestamp_table(self.cfg.max_tokens, self.cfg.model_dim)?;
        self.forward_with_slots(g, h_v, query, inputs)
    }

    /// Reference path: slot `i` is produced by re-running the transformer on
    /// `[prefix ∥ slots 1..=i]` and reading the last row. Returns
    /// `(slot rows [K, d_t], p_eos [K])`.
    pub fn generate_sequential<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        h_v: &Tensor<T>,
        query: &[usize],
        k: usize,
    ) -> Result<(Tensor<T>, Vec<T>), TensorError> {
        if k == 0 || k > self.cfg.max_tokens {
            return Err(TensorError::Config(format!("K={k} outside 1..={}", self.cfg.max_tokens)));
        }
        let table = timestamp_table::<T>(k, self.cfg.model_dim)?;
        let d_t = self.latent_dim;
        let mut slots = Vec::with_capacity(k * d_t);
        let mut p = Vec::with_capacity(k);
        for i in 1..=k {
            let inputs = Tensor::new(vec![i, self.cfg.model_dim], table.data()[..i * self.cfg.model_dim].to_vec())?;
            let mut g = Graph::inference(store);
            let h = g.constant(h_v.clone());
            let out = self.forward_with_slots(&mut g, h, query, inputs)?;
            slots.extend_from_slice(g.value(out.slots).row(i - 1));
            p.push(g.value(out.p_eos).data()[i - 1]);
        }
        Ok((Tensor::new(vec![k, d_t], slots)?, p))
    }
}

/// Non-autoregressive decoder `g_φ`: full attention over
/// `[slots + timestamps ∥ N_h learned grid queries]`, read at the queries.
#[derive(Clone, Debug)]
pub struct TokenDecoder {
    pub k: usize,
    pub grid_len: usize,
    pub model_dim: usize,
    pub in_proj: Linear,
    pub grid_queries: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub out: Linear,
}

impl TokenDecoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &DygenConfig,
        latent_dim: usize,
        grid_len: usize,
    ) -> Result<Self, TensorError> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let gr = Group::TokenDecoder;
        let in_proj = Linear::new(store, rng, "dec.in", gr, latent_dim, d);
        let grid_queries = store.add("dec.queries", gr, init::normal(rng, &[grid_len, d], 0.02));
        let blocks = (0..cfg.decoder_layers)
            .map(|i| Block::new(store, rng, &format!("dec.b{i}"), gr, d, cfg.heads, d * cfg.mlp_ratio, cfg.decoder_layers))
            .collect();
        let ln_f = LayerNorm::new(store, "dec.ln_f", gr, d);
        let out = Linear::new(store, rng, "dec.out", gr, d, latent_dim);
        Ok(Self { k: cfg.max_tokens, grid_len, model_dim: d, in_proj, grid_queries, blocks, ln_f, out })
    }

    /// `[K, d_t]` (zero-masked) → `[N_h, d_c]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, slots: Var) -> Result<Var, TensorError> {
        let k = g.shape(slots)[0];
        if k != self.k {
            return Err(TensorError::Shape { op: "decode_tokens", lhs: g.shape(slots).to_vec(), rhs: vec![self.k] });
        }
        let x = self.in_proj.forward(g, slots)?;
        let ts = g.constant(timestamp_table(k, self.model_dim)?);
        let x = g.add(x, ts)?;
        let q = g.param(self.grid_queries);
        let mut x = g.concat_rows(&[x, q])?;
        let n = k + self.grid_len;
        let mask = AttentionMask::full(n, n);
        for b in &self.blocks {
            x = b.forward(g, x, &mask)?;
        }
        let x = self.ln_f.forward(g, x)?;
        let x = g.slice_rows(x, k, n)?;
        self.out.forward(g, x)
    }

    /// Inference-only decode of a token sequence (slots used as stored).
    pub fn decode_tokens(&self, store: &ParamStore<f32>, seq: &TokenSequence) -> Result<Tensor<f32>, TensorError> {
        let mut g = Graph::inference(store);
        let s = g.constant(seq.slots.clone());
        let y = self.forward(&mut g, s)?;
        Ok(g.value(y).clone())
    }
}

/// Standard-normal noise `[rows, cols]` from a seeded stream.
pub fn gaussian_noise<T: Scalar>(seed: u64, rows: usize, cols: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, cols], |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
}

/// `mean + exp(logvar / 2) ⊙ ε` on all slots, plus the closed-form KL to
/// `N(0, I)`, summed over dimensions and averaged over the first `keep` slots.
pub fn reparameterize<T: Scalar>(
    g: &mut Graph<'_, T>,
    mean: Var,
    logvar: Var,
    keep: usize,
    noise: Tensor<T>,
) -> Result<(Var, Var), TensorError> {
    let half = g.scale(logvar, T::from_f64(0.5))?;
    let std = g.exp(half)?;
    let eps = g.constant(noise);
    let scaled = g.mul(std, eps)?;
    let sample = g.add(mean, scaled)?;
    let m = g.slice_rows(mean, 0, keep)?;
    let lv = g.slice_rows(logvar, 0, keep)?;
    // ½ Σ_d (e^lv + μ² − 1 − lv), averaged over slots
    let dims = g.value(mean).shape()[1];
    let var = g.exp(lv)?;
    let m2 = g.mul(m, m)?;
    let a = g.add(var, m2)?;
    let b = g.sub(a, lv)?;
    let kl = g.sum(b)?;
    let kl = g.scale(kl, T::from_f64(0.5 / keep as f64))?;
    let offset = g.scalar(T::from_f64(-0.5 * dims as f64));
    let kl = g.add(kl, offset)?;
    Ok((sample, kl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GroupMask;

    fn build(seed: u64, cfg: DygenConfig) -> (ParamStore<f64>, Generator, TokenDecoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gen = Generator::new(&mut store, &mut rng, cfg.clone(), 16, 4).unwrap();
        let dec = TokenDecoder::new(&mut store, &mut rng, &cfg, 16, 4).unwrap();
        // break the zero EOS head so probabilities vary
        for id in gen.eos_params() {
            let t = init::normal(&mut rng, store.get(id).shape(), 0.5);
            store.set(id, t).unwrap();
        }
        (store, gen, dec)
    }

    fn small() -> DygenConfig {
        DygenConfig { max_tokens: 6, model_dim: 16, heads: 2, ..Default::default() }
    }

    #[test]
    fn eos_detection_cases() {
        assert_eq!(detect_eos(&[0.1, 0.9, 0.95], 0.5), Some(2));
        assert_eq!(detect_eos(&[0.1, 0.2, 0.3], 0.5), None);
        assert_eq!(detect_eos(&[0.6, 0.1], 0.5), Some(1));
        assert_eq!(detect_eos(&[0.5, 0.5], 0.5), None);
    }

    fn seq(k: usize, d: usize) -> TokenSequence {
        let slots = Tensor::from_fn(&[k, d], |i| i as f32 + 1.0);
        TokenSequence { eos_pos: None, p_eos: vec![0.2; k], slots }
    }

    #[test]
    fn zero_mask_cases() {
        let s = seq(8, 3);
        let z = zero_mask(&s, Some(3));
        assert_eq!(&z.slots.data()[..9], &s.slots.data()[..9]);
        assert!(z.slots.data()[9..].iter().all(|&v| v == 0.0));
        assert!(z.invariant_holds());
        assert_eq!(zero_mask(&s, None), s);
        assert_eq!(zero_mask(&z, Some(3)), z);
    }

    #[test]
    fn budget_truncation() {
        let s = seq(4, 2);
        assert_eq!(truncate_to_budget(&s, 4).unwrap().slots, s.slots);
        let one = truncate_to_budget(&s, 1).unwrap();
        assert_eq!(one.slots.data(), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(truncate_to_budget(&s, 0).is_err());
        assert!(truncate_to_budget(&s, 5).is_err());
    }

    #[test]
    fn token_json_shape() {
        let s = zero_mask(&seq(2, 2), Some(1));
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["eos_pos"], 1);
        assert_eq!(v["slots"], serde_json::json!([[1.0, 2.0], [0.0, 0.0]]));
        let back: TokenSequence = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn parallel_matches_sequential() {
        let (store, gen, _) = build(1, small());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = init::normal::<f64, _>(&mut rng, &[4, 16], 1.0);
        let mut g = Graph::inference(&store);
        let hv = g.constant(h.clone());
        let out = gen.forward(&mut g, hv, &[vocab::NULL]).unwrap();
        let (slots, p) = gen.generate_sequential(&store, &h, &[vocab::NULL], 6).unwrap();
        assert!(g.value(out.slots).max_abs_diff(&slots) <= 1e-5);
        let pp = g.value(out.p_eos).data();
        assert!(pp.iter().zip(&p).all(|(a, b)| (a - b).abs() <= 1e-5));
    }

    #[test]
    fn perturbing_slot_j_leaves_earlier_slots() {
        let (store, gen, _) = build(3, small());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = init::normal::<f64, _>(&mut rng, &[4, 16], 1.0);
        let base = timestamp_table::<f64>(6, 16).unwrap();
        let run = |inputs: Tensor<f64>| {
            let mut g = Graph::inference(&store);
            let hv = g.constant(h.clone());
            let o = gen.forward_with_slots(&mut g, hv, &[1, 9], inputs).unwrap();
            g.value(o.slots).clone()
        };
        let a = run(base.clone());
        for j in 0..6 {
            let mut p = base.clone();
            p.data_mut()[j * 16..(j + 1) * 16].iter_mut().for_each(|v| *v += 3.0);
            let b = run(p);
            assert_eq!(&a.data()[..j * 16], &b.data()[..j * 16]);
            assert_ne!(&a.data()[j * 16..], &b.data()[j * 16..]);
        }
    }

    #[test]
    fn post_eos_slots_do_not_reach_decoder() {
        let (store, _, dec) = build(5, small());
        let store32: ParamStore<f32> = store.cast();
        let s = TokenSequence { eos_pos: None, p_eos: vec![0.0; 6], slots: init::normal(&mut ChaCha8Rng::seed_from_u64(1), &[6, 16], 1.0) };
        let mut junk = s.clone();
        junk.slots.data_mut()[3 * 16..].iter_mut().for_each(|v| *v = 1e3);
        let a = dec.decode_tokens(&store32, &zero_mask(&s, Some(3))).unwrap();
        let b = dec.decode_tokens(&store32, &zero_mask(&junk, Some(3))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 16]);
    }

    #[test]
    fn masked_slots_get_no_gradient() {
        let (store, gen, dec) = build(7, small());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = init::normal::<f64, _>(&mut rng, &[4, 16], 1.0);
        let mut g = Graph::new(&store, GroupMask::of(&[Group::Generator, Group::TokenDecoder]));
        let hv = g.constant(h);
        let out = gen.forward(&mut g, hv, &[0]).unwrap();
        let masked = g.mask_rows(out.slots, 2).unwrap();
        let y = dec.forward(&mut g, masked).unwrap();
        let l = g.mean(y).unwrap();
        let grads = g.backward(l).unwrap();
        // eos head never enters this loss
        assert!(grads.get(gen.eos_head.w).is_none());
        assert!(grads.get(gen.token_head.w).is_some());
    }

    #[test]
    fn kl_is_zero_at_prior_and_sampling_respects_floor() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let mean = g.constant(Tensor::zeros(&[3, 4]));
        let lv = g.constant(Tensor::zeros(&[3, 4]));
        let (_, kl) = reparameterize(&mut g, mean, lv, 2, gaussian_noise(0, 3, 4)).unwrap();
        assert_eq!(g.value(kl).item(), 0.0);

        let mu = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1);
        let mean = g.constant(mu.clone());
        let lv = g.constant(Tensor::full(&[3, 4], LOGVAR_MIN));
        let noise = gaussian_noise::<f64>(1, 3, 4);
        let (s, _) = reparameterize(&mut g, mean, lv, 3, noise.clone()).unwrap();
        for ((o, m), e) in g.value(s).data().iter().zip(mu.data()).zip(noise.data()) {
            assert!((o - m).abs() <= (-4f64).exp() * e.abs() + 1e-15);
        }
    }

    #[test]
    fn kl_matches_closed_form_on_retained_slots() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let mu = Tensor::from_fn(&[3, 2], |i| 0.3 * i as f64 - 0.5);
        let lv = Tensor::from_fn(&[3, 2], |i| 0.2 * i as f64 - 0.4);
        let (mean, logvar) = (g.constant(mu.clone()), g.constant(lv.clone()));
        let (_, kl) = reparameterize(&mut g, mean, logvar, 2, gaussian_noise(3, 3, 2)).unwrap();
        let want: f64 = (0..4).map(|i| 0.5 * (lv.data()[i].exp() + mu.data()[i].powi(2) - 1.0 - lv.data()[i])).sum::<f64>() / 2.0;
        assert!((g.value(kl).item() - want).abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_mean_matches() {
        let (mu, lv) = (0.7f64, 0.4f64);
        let n = 10_000;
        let noise = gaussian_noise::<f64>(42, n, 1);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let mean = g.constant(Tensor::full(&[n, 1], mu));
        let logvar = g.constant(Tensor::full(&[n, 1], lv));
        let (s, _) = reparameterize(&mut g, mean, logvar, n, noise).unwrap();
        let emp = g.value(s).sum_f64() / n as f64;
        let sigma = (lv / 2.0).exp();
        assert!((emp - mu).abs() <= 3.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn k_limit_enforced() {
        let (store, gen, _) = build(1, small());
        let h = Tensor::zeros(&[4, 16]);
        assert!(gen.generate_sequential(&store, &h, &[0], 7).is_err());
    }
}
