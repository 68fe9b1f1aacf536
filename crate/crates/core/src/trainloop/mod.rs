//! Training orchestration: codec pretraining, joint DOVE training and
//! query-conditioned fine-tuning, with an optional alternating GAN step,
//! checkpoints and per-step metrics.
//!
//! A step runs in three phases. Per-sample forward tapes are built in
//! parallel; EOS branch decisions then run sequentially in sample order
//! against the shared threshold state; finally each tape adds its EOS term
//! and runs backward in parallel, and gradients are summed in sample order.

pub mod checkpoint;
mod composite;
pub mod metrics;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMeta};
pub use composite::{check_composite, composite_loss, Branch};
pub use metrics::{read_metrics, MetricsLog, MetricsRow, TimingRow};

use crate::codec::{image_tensor, CodecConfig};
use crate::dygen::DygenConfig;
use crate::corpus::{
    augment, entry_seed, generate_scene, sample_spec, AugmentConfig, BBox, CorpusError, CorpusParams, DatasetManifest, Image,
    QuerySample, Split,
};
use crate::model::{DoveModel, ModelConfig, SampleOpts, NULL_QUERY};
use crate::nn::{AdamConfig, Grads, Graph, Group, GroupMask, OptimState, ParamStore, Tensor, TensorError, Var};
use crate::objective::{
    eos_weights, lambda_eos_at, penalty, qdove_eos_weights, query_loss_graph, rec_loss_graph, total_loss_graph, LossReport, LossWeights,
    QueryValues, RecValues, ThresholdMode, ThresholdState,
};
use crate::par::Exec;
use crate::seeds::derive;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite {what} at {stage:?} step {step}")]
    Diverged { stage: Stage, step: usize, what: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Codec,
    Dove,
    Qdove,
}

impl Stage {
    fn salt(self) -> u64 {
        match self {
            Stage::Codec => 1,
            Stage::Dove => 2,
            Stage::Qdove => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::Dove => "dove",
            Stage::Qdove => "qdove",
        }
    }
}

const SALT_INIT: u64 = 0x1417;
const SALT_SCENE: u64 = 0x5CE7;
const SALT_AUGMENT: u64 = 0xA06;
const SALT_QUERY: u64 = 0x0E7;
const SALT_NOISE: u64 = 0x7015E;
const SALT_CODEBOOK: u64 = 0xC0DE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub optim: AdamConfig,
    pub batch_size: usize,
    pub codec_steps: usize,
    pub dove_steps: usize,
    pub qdove_steps: usize,
    pub threshold_mode: ThresholdMode,
    pub threshold_window: usize,
    pub freeze_codec: bool,
    /// Codec learning-rate multiplier during joint training.
    pub codec_lr_scale: f64,
    pub gan_enabled: bool,
    /// Probability of the "null" query per sample during query fine-tuning.
    pub null_query_prob: f64,
    pub corpus: CorpusParams,
    /// Training images from a manifest instead of the on-the-fly generator.
    pub train_manifest: Option<PathBuf>,
    pub augment: AugmentConfig,
    /// Held-out images scored at the end of each stage.
    pub eval_size: usize,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            optim: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            batch_size: 16,
            codec_steps: 2000,
            dove_steps: 5000,
            qdove_steps: 2000,
            threshold_mode: ThresholdMode::Window,
            threshold_window: 100,
            freeze_codec: false,
            codec_lr_scale: 0.1,
            gan_enabled: false,
            null_query_prob: 0.5,
            corpus: CorpusParams::default(),
            train_manifest: None,
            augment: AugmentConfig::default(),
            eval_size: 64,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// A configuration that runs all three stages in seconds: a 16×16 canvas,
    /// four token slots and a handful of steps per stage.
    pub fn smoke() -> Self {
        Self {
            model: ModelConfig {
                codec: CodecConfig { image_size: 16, latent_dim: 8, codebook_size: 16, base_channels: 4, ..Default::default() },
                dygen: DygenConfig { max_tokens: 4, model_dim: 16, heads: 2, layers: 1, decoder_layers: 1, ..Default::default() },
                disc_width: 4,
            },
            corpus: CorpusParams { canvas_size: 16, max_objects: 2, min_size: 3, max_size: 6, ..Default::default() },
            batch_size: 4,
            codec_steps: 6,
            dove_steps: 8,
            qdove_steps: 6,
            threshold_window: 4,
            eval_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.weights.validate()?;
        self.corpus.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.threshold_window == 0 {
            return bad("threshold_window must be positive");
        }
        if !(0.0..=1.0).contains(&self.null_query_prob) {
            return bad("null_query_prob must lie in [0, 1]");
        }
        if !(self.optim.lr > 0.0) || !(self.codec_lr_scale >= 0.0) {
            return bad("learning rates must be positive");
        }
        if self.corpus.canvas_size != self.model.codec.image_size {
            return bad("corpus canvas_size must equal model.codec.image_size");
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `dotted.key=value` overrides. Values parse as JSON, falling
    /// back to a plain string; unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, TrainError> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| TrainError::Config(format!("override `{o}` needs key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| TrainError::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn model_hash(&self) -> String {
        hash_json(&(&self.model, self.seed))
    }

    pub fn steps(&self, stage: Stage) -> usize {
        match stage {
            Stage::Codec => self.codec_steps,
            Stage::Dove => self.dove_steps,
            Stage::Qdove => self.qdove_steps,
        }
    }
}

fn hash_json<S: Serialize>(v: &S) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("serializes")))
}

/// Reference losses: plain reconstruction, in-box and out-of-box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub rec: ThresholdState,
    pub rel: ThresholdState,
    pub irr: ThresholdState,
}

impl Thresholds {
    pub fn new(mode: ThresholdMode, window: usize) -> Self {
        let s = ThresholdState::new(mode, window);
        Self { rec: s.clone(), rel: s.clone(), irr: s }
    }
}

/// One training or evaluation image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    pub image: Image,
    pub queries: Vec<QuerySample>,
    pub label: usize,
}

impl Sample {
    pub fn real_queries(&self) -> impl Iterator<Item = &QuerySample> {
        self.queries.iter().filter(|q| !q.is_null())
    }
}

/// A generated scene with its queries.
pub fn synth_sample(params: &CorpusParams, seed: u64) -> Result<Sample, CorpusError> {
    let spec = sample_spec(params, seed)?;
    let (image, queries) = generate_scene(&spec, seed)?;
    Ok(Sample { seed, image, queries, label: spec.object_count })
}

/// The first `n` held-out scenes under `seed`.
pub fn eval_samples(params: &CorpusParams, seed: u64, n: usize, exec: Exec) -> Result<Vec<Sample>, CorpusError> {
    exec.range(n, |i| synth_sample(params, entry_seed(seed, Split::Val, i))).into_iter().collect()
}

/// Samples of a manifest, materialized in entry order.
pub fn manifest_samples(m: &DatasetManifest, root: &Path, patch: usize, exec: Exec) -> Result<Vec<Sample>, CorpusError> {
    exec.range(m.len(), |i| {
        let e = &m.entries[i];
        Ok(Sample { seed: e.seed.unwrap_or(i as u64), image: m.image(i, root, patch)?, queries: e.queries.clone(), label: e.label })
    })
    .into_iter()
    .collect()
}

/// Summary written at the end of a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub steps: usize,
    pub heldout_mse: f64,
    pub heldout_psnr: f64,
    pub heldout_eos_mean: Option<f64>,
    pub param_hash: String,
}

/// Output of one computed (not yet applied) step.
pub struct StepResult {
    pub grads: Grads<f32>,
    pub disc_grads: Option<Grads<f32>>,
    pub row: MetricsRow,
    pub reports: Vec<LossReport>,
    pub eos: Vec<usize>,
}

enum Route {
    Plain(RecValues),
    Query(QueryValues),
}

struct Pass<'s> {
    g: Graph<'s, f32>,
    p_eos: Var,
    p: Vec<f64>,
    m: usize,
    main: Var,
    kl: Option<Var>,
    route: Route,
    fake: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: DoveModel,
    pub store: ParamStore<f32>,
    pub opt: OptimState,
    pub disc_opt: OptimState,
    pub stage: Stage,
    pub step: usize,
    pub thresholds: Thresholds,
    pub exec: Exec,
    manifest: Option<(DatasetManifest, PathBuf)>,
}

impl Trainer {
    /// Fresh parameters at the start of codec pretraining.
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let (model, store) = DoveModel::new(derive(&[cfg.seed, SALT_INIT]), cfg.model.clone())?;
        Self::assemble(cfg, model, store, Stage::Codec)
    }

    fn assemble(cfg: TrainConfig, model: DoveModel, store: ParamStore<f32>, stage: Stage) -> Result<Self, TrainError> {
        let manifest = match &cfg.train_manifest {
            Some(p) => {
                let m = DatasetManifest::load(p)?;
                if m.is_empty() {
                    return Err(TrainError::Config(format!("{}: empty manifest", p.display())));
                }
                let root = p.parent().map(Path::to_path_buf).unwrap_or_default();
                Some((m, root))
            }
            None => None,
        };
        let n = store.len();
        let opt = OptimState::new(cfg.optim, n, stage_groups(&cfg, stage));
        let disc_opt = OptimState::new(cfg.optim, n, vec![(Group::Discriminator, 1.0)]);
        let thresholds = Thresholds::new(cfg.threshold_mode, cfg.threshold_window);
        Ok(Self { cfg, model, store, opt, disc_opt, stage, step: 0, thresholds, exec: Exec::default(), manifest })
    }

    fn restore_params(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<(DoveModel, ParamStore<f32>), TrainError> {
        if ckpt.meta.model_hash != cfg.model_hash() {
            return Err(CheckpointError::ConfigMismatch { expected: cfg.model_hash(), found: ckpt.meta.model_hash.clone() }.into());
        }
        let (model, mut store) = DoveModel::new(derive(&[cfg.seed, SALT_INIT]), cfg.model.clone())?;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.entry(id).name.clone();
            let t = ckpt.tensor(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if t.shape() != store.get(id).shape() {
                let expected = store.get(id).shape().to_vec();
                return Err(CheckpointError::Shape { name, expected, found: t.shape().to_vec() }.into());
            }
            *store.get_mut(id) = t.clone();
        }
        Ok((model, store))
    }

    /// Starts `stage` from the parameters of a finished earlier stage.
    pub fn from_checkpoint(cfg: TrainConfig, ckpt: &Checkpoint, stage: Stage) -> Result<Self, TrainError> {
        cfg.validate()?;
        let (model, mut store) = Self::restore_params(&cfg, ckpt)?;
        if stage == Stage::Dove && ckpt.meta.stage == Stage::Codec {
            model.perc.refresh(&mut store, &model.codec);
        }
        let mut t = Self::assemble(cfg, model, store, stage)?;
        if stage == Stage::Qdove {
            t.thresholds.rec = ckpt.meta.thresholds.rec.clone();
        }
        Ok(t)
    }

    /// Continues exactly where `ckpt` stopped; the config must hash equal.
    pub fn resume(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        cfg.validate()?;
        if ckpt.meta.config_hash != cfg.hash() {
            return Err(CheckpointError::ConfigMismatch { expected: cfg.hash(), found: ckpt.meta.config_hash.clone() }.into());
        }
        let (model, store) = Self::restore_params(&cfg, ckpt)?;
        let stage = ckpt.meta.stage;
        let mut t = Self::assemble(cfg, model, store, stage)?;
        t.step = ckpt.meta.step;
        t.thresholds = ckpt.meta.thresholds.clone();
        t.opt.step = ckpt.meta.optim_step;
        t.disc_opt.step = ckpt.meta.disc_optim_step;
        for (prefix, opt) in [("opt", &mut t.opt), ("dopt", &mut t.disc_opt)] {
            for id in t.store.ids() {
                let name = &t.store.entry(id).name;
                opt.m[id.index()] = ckpt.tensor(&format!("{prefix}.m/{name}")).cloned();
                opt.v[id.index()] = ckpt.tensor(&format!("{prefix}.v/{name}")).cloned();
            }
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            self.store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect();
        for (prefix, opt) in [("opt", &self.opt), ("dopt", &self.disc_opt)] {
            for id in self.store.ids() {
                let name = &self.store.entry(id).name;
                if let Some(m) = &opt.m[id.index()] {
                    tensors.push((format!("{prefix}.m/{name}"), m.clone()));
                }
                if let Some(v) = &opt.v[id.index()] {
                    tensors.push((format!("{prefix}.v/{name}"), v.clone()));
                }
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                stage: self.stage,
                step: self.step,
                config_hash: self.cfg.hash(),
                model_hash: self.cfg.model_hash(),
                config: self.cfg.clone(),
                thresholds: self.thresholds.clone(),
                optim_step: self.opt.step,
                disc_optim_step: self.disc_opt.step,
            },
            tensors,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.steps(self.stage)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn trainable(&self) -> GroupMask {
        GroupMask::of(&self.opt.group_scale.iter().map(|(g, _)| *g).collect::<Vec<_>>())
    }

    fn sample_seed(&self, step: usize, i: usize) -> u64 {
        derive(&[self.cfg.seed, self.stage.salt(), step as u64, i as u64])
    }

    /// The batch of training step `step` (0-based) of the current stage.
    pub fn batch(&self, step: usize) -> Result<Vec<Sample>, TrainError> {
        let out = self.exec.range(self.cfg.batch_size, |i| -> Result<Sample, TrainError> {
            let s = self.sample_seed(step, i);
            let mut sample = match &self.manifest {
                Some((m, root)) => {
                    let idx = (derive(&[s, SALT_SCENE]) % m.len() as u64) as usize;
                    let e = &m.entries[idx];
                    let image = m.image(idx, root, self.cfg.model.codec.patch)?;
                    Sample { seed: s, image, queries: e.queries.clone(), label: e.label }
                }
                None => synth_sample(&self.cfg.corpus, derive(&[s, SALT_SCENE]))?,
            };
            if self.cfg.augment.enabled {
                let mut rng = ChaCha8Rng::seed_from_u64(derive(&[s, SALT_AUGMENT]));
                sample.image = augment(&sample.image, &self.cfg.augment, &mut rng);
            }
            Ok(sample)
        });
        out.into_iter().collect()
    }

    /// Computes the gradients and metrics of the next step without applying
    /// them. Threshold states are advanced in `thresholds`.
    pub fn compute_step(&self, thresholds: &mut Thresholds) -> Result<StepResult, TrainError> {
        let batch = self.batch(self.step)?;
        match self.stage {
            Stage::Codec => self.codec_step(&batch),
            Stage::Dove | Stage::Qdove => self.dove_step(&batch, thresholds),
        }
    }

    fn diverged(&self, what: &str) -> TrainError {
        TrainError::Diverged { stage: self.stage, step: self.step + 1, what: what.to_string() }
    }

    fn reduce(&self, parts: Vec<Grads<f32>>) -> Result<Grads<f32>, TrainError> {
        let mut total = Grads::new(self.store.len());
        for p in &parts {
            total.accumulate(p);
        }
        if !total.all_finite() {
            return Err(self.diverged("gradient"));
        }
        Ok(total)
    }

    fn codec_step(&self, batch: &[Sample]) -> Result<StepResult, TrainError> {
        let m = &self.model;
        let mask = self.trainable();
        let inv = 1.0 / batch.len() as f32;
        let beta = self.cfg.model.codec.beta as f32;
        let (gan, lg) = (self.cfg.gan_enabled, self.cfg.weights.gan as f32);
        let outs = self.exec.map(batch, |_, s| -> Result<_, TensorError> {
            let mut g = Graph::new(&self.store, mask);
            let x = g.constant(image_tensor(&s.image));
            let h = m.codec.encode(&mut g, x)?;
            let q = m.codec.quantize(&mut g, h)?;
            let xh = m.codec.decode(&mut g, q.out)?;
            let mse = g.mse(xh, x)?;
            let vq = g.combine(&[(1.0, q.codebook_loss), (beta, q.commitment_loss)])?;
            let mut terms = vec![(1.0, mse), (1.0, vq)];
            let gl = if gan { Some(m.disc.generator_loss(&mut g, xh)?) } else { None };
            if let Some(gl) = gl {
                terms.push((lg, gl));
            }
            let total = g.combine(&terms)?;
            let scaled = g.scale(total, inv)?;
            let grads = g.backward(scaled)?;
            let val = |v: Var| g.value(v).item() as f64;
            Ok((grads, [val(mse), val(vq), gl.map_or(0.0, val), val(total)], g.value(xh).clone(), x))
        });
        let mut grads = Vec::with_capacity(batch.len());
        let mut sums = [0.0f64; 4];
        let mut fakes = Vec::with_capacity(batch.len());
        for o in outs {
            let (gr, vals, fake, _) = o?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(self.diverged("loss"));
            }
            grads.push(gr);
            sums.iter_mut().zip(vals).for_each(|(a, v)| *a += v);
            fakes.push(fake);
        }
        let n = batch.len() as f64;
        let disc_grads = if gan { Some(self.disc_grads(batch, &fakes)?) } else { None };
        let row = MetricsRow {
            stage: self.stage,
            step: self.step + 1,
            loss_mse: Some(sums[0] / n),
            loss_vq: Some(sums[1] / n),
            loss_gan: gan.then(|| sums[2] / n),
            loss_total: sums[3] / n,
            ..empty_row(self.stage, self.step + 1)
        };
        Ok(StepResult { grads: self.reduce(grads)?, disc_grads, row, reports: Vec::new(), eos: Vec::new() })
    }

    fn disc_grads(&self, batch: &[Sample], fakes: &[Tensor<f32>]) -> Result<Grads<f32>, TrainError> {
        let inv = 1.0 / batch.len() as f32;
        let mask = GroupMask::of(&[Group::Discriminator]);
        let parts = self.exec.map(batch, |i, s| -> Result<Grads<f32>, TensorError> {
            let mut g = Graph::new(&self.store, mask);
            let real = g.constant(image_tensor(&s.image));
            let fake = g.constant(fakes[i].clone());
            let l = self.model.disc.discriminator_loss(&mut g, real, fake)?;
            let l = g.scale(l, inv)?;
            g.backward(l)
        });
        self.reduce(parts.into_iter().collect::<Result<_, _>>()?)
    }

    /// The query prefix and boxes used for sample `i` of the current step.
    pub fn choose_query(&self, sample: &Sample, i: usize) -> Option<QuerySample> {
        if self.stage != Stage::Qdove {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive(&[self.sample_seed(self.step, i), SALT_QUERY]));
        let real: Vec<&QuerySample> = sample.real_queries().collect();
        if rng.random_bool(self.cfg.null_query_prob) || real.is_empty() {
            return None;
        }
        Some(real[rng.random_range(0..real.len())].clone())
    }

    fn pass<'s>(&'s self, sample: &Sample, i: usize) -> Result<Pass<'s>, TensorError> {
        let m = &self.model;
        let mut g = Graph::new(&self.store, self.trainable());
        let query = self.choose_query(sample, i);
        let prefix: &[usize] = query.as_ref().map_or(&NULL_QUERY, |q| &q.query_tokens);
        let noise = m.training_noise(derive(&[self.sample_seed(self.step, i), SALT_NOISE]));
        let f = m.forward(&mut g, &sample.image, prefix, SampleOpts { budget: None, noise })?;
        let nets = m.nets(self.cfg.gan_enabled);
        let (main, route) = match &query {
            None => {
                let r = rec_loss_graph(&mut g, nets, f.x, f.x_hat, &self.cfg.weights)?;
                (r.total, Route::Plain(RecValues::read(&g, &r)))
            }
            Some(q) => {
                let r = query_loss_graph(&mut g, nets, f.x, f.x_hat, &q.boxes, &self.cfg.weights)?;
                (r.total, Route::Query(QueryValues::read(&g, &r)))
            }
        };
        let fake = g.value(f.x_hat).clone();
        Ok(Pass { p_eos: f.gen.p_eos, p: f.p_eos, m: f.m, main, kl: f.kl, route, fake, g })
    }

    fn dove_step(&self, batch: &[Sample], th: &mut Thresholds) -> Result<StepResult, TrainError> {
        let k = self.model.k();
        let w = &self.cfg.weights;
        let lambda_eos = match self.stage {
            Stage::Dove => lambda_eos_at(self.step, self.cfg.dove_steps, w),
            _ => w.eos_max,
        };
        let threshold = th.rec.mean();
        let mut passes = self.exec.map(batch, |i, s| self.pass(s, i)).into_iter().collect::<Result<Vec<_>, _>>()?;

        let mut reports = Vec::with_capacity(passes.len());
        let mut coeffs = Vec::with_capacity(passes.len());
        for p in &passes {
            let mut r = LossReport { lambda_eos, ..Default::default() };
            let c = match &p.route {
                Route::Plain(v) => {
                    if !v.rec.is_finite() {
                        return Err(self.diverged("reconstruction loss"));
                    }
                    r.threshold = th.rec.mean();
                    let above = th.rec.is_above(v.rec);
                    th.rec.update(v.rec);
                    (r.mse, r.perc, r.gan, r.rec) = (v.mse, v.perc, v.gan, v.rec);
                    eos_weights(k, p.m, above)
                }
                Route::Query(q) => {
                    if !q.qry.is_finite() || !q.irr.is_finite() {
                        return Err(self.diverged("query loss"));
                    }
                    r.threshold = th.rel.mean();
                    let rel_above = th.rel.is_above(q.rel_mean);
                    let irr_below = th.irr.mean().is_some_and(|t| q.irr < t);
                    th.rel.update(q.rel_mean);
                    th.irr.update(q.irr);
                    r.pen = Some(if irr_below { penalty(&p.p, p.m) } else { 0.0 });
                    r.query = Some(q.clone());
                    qdove_eos_weights(k, p.m, rel_above, irr_below)
                }
            };
            reports.push(r);
            coeffs.push(c);
        }

        let inv = 1.0 / batch.len() as f32;
        let outs = self.exec.map_mut(&mut passes, |i, p| -> Result<_, TensorError> {
            let (eos, total) = total_loss_graph(&mut p.g, p.main, p.p_eos, &coeffs[i], p.kl, w, lambda_eos)?;
            let scaled = p.g.scale(total, inv)?;
            let grads = p.g.backward(scaled)?;
            let kl = p.kl.map_or(0.0, |v| p.g.value(v).item() as f64);
            Ok((grads, p.g.value(eos).item() as f64, kl, p.g.value(total).item() as f64))
        });
        let mut grads = Vec::with_capacity(passes.len());
        for (r, o) in reports.iter_mut().zip(outs) {
            let (gr, eos, kl, total) = o?;
            if !total.is_finite() {
                return Err(self.diverged("total loss"));
            }
            (r.eos, r.kl, r.total) = (eos, kl, total);
            grads.push(gr);
        }
        let eos: Vec<usize> = passes.iter().map(|p| p.m).collect();
        let disc_grads = if self.cfg.gan_enabled {
            let fakes: Vec<Tensor<f32>> = passes.iter().map(|p| p.fake.clone()).collect();
            Some(self.disc_grads(batch, &fakes)?)
        } else {
            None
        };
        drop(passes);
        let row = summarize(self.stage, self.step + 1, &reports, &eos, threshold, lambda_eos, self.cfg.gan_enabled);
        Ok(StepResult { grads: self.reduce(grads)?, disc_grads, row, reports, eos })
    }

    fn init_codebook(&mut self, batch: &[Sample]) -> Result<(), TrainError> {
        let latents = self.exec.map(batch, |_, s| self.model.codec.encode_image(&self.store, &s.image));
        let mut rows: Vec<f32> = Vec::new();
        for l in latents {
            rows.extend_from_slice(l?.data());
        }
        let d = self.cfg.model.codec.latent_dim;
        let n = rows.len() / d;
        let mut rng = ChaCha8Rng::seed_from_u64(derive(&[self.cfg.seed, SALT_CODEBOOK]));
        let cb = self.store.get_mut(self.model.codec.codebook);
        let v = cb.shape()[0];
        for j in 0..v {
            let src = rng.random_range(0..n);
            for c in 0..d {
                let jitter: f64 = rng.sample(StandardNormal);
                cb.data_mut()[j * d + c] = rows[src * d + c] + (0.01 * jitter) as f32;
            }
        }
        Ok(())
    }

    /// Runs and applies one step.
    pub fn train_step(&mut self) -> Result<MetricsRow, TrainError> {
        if self.is_done() {
            return Err(TrainError::Config(format!("{} stage already finished", self.stage.name())));
        }
        if self.stage == Stage::Codec && self.step == 0 {
            let b = self.batch(0)?;
            self.init_codebook(&b)?;
        }
        let mut th = self.thresholds.clone();
        let res = self.compute_step(&mut th)?;
        let norm = self.opt.step(&mut self.store, &res.grads).map_err(|_| self.diverged("gradient"))?;
        let mut row = res.row;
        row.grad_norm = norm;
        if let Some(dg) = &res.disc_grads {
            self.disc_opt.step(&mut self.store, dg).map_err(|_| self.diverged("discriminator gradient"))?;
        }
        if let Some(e) = self.store.entries().iter().find(|e| e.value.data().iter().any(|v| !v.is_finite())) {
            return Err(self.diverged(&format!("parameter {}", e.name)));
        }
        self.thresholds = th;
        self.step += 1;
        Ok(row)
    }

    /// Trains to the end of the current stage, logging every step and
    /// saving periodic checkpoints under the log directory.
    pub fn run(&mut self, log: &mut MetricsLog) -> Result<(), TrainError> {
        self.run_until(self.total_steps(), log)
    }

    pub fn run_until(&mut self, step: usize, log: &mut MetricsLog) -> Result<(), TrainError> {
        while self.step < step.min(self.total_steps()) {
            let t0 = Instant::now();
            let row = self.train_step()?;
            log.push(row, t0.elapsed().as_secs_f64() * 1e3)?;
            let every = self.cfg.checkpoint_every;
            if let (Some(dir), true) = (log.dir(), every > 0 && self.step % every == 0) {
                self.checkpoint().save(dir.join(format!("{}-{:06}.ckpt", self.stage.name(), self.step)))?;
            }
        }
        Ok(())
    }

    /// Held-out reconstruction quality of the current stage's model.
    pub fn summary(&self) -> Result<StageSummary, TrainError> {
        let samples = eval_samples(&self.cfg.corpus, self.cfg.seed, self.cfg.eval_size, self.exec)?;
        let scored = self.exec.map(&samples, |_, s| -> Result<(f64, Option<usize>), TensorError> {
            if self.stage == Stage::Codec {
                let r = self.model.codec.reconstruct(&self.store, &s.image)?;
                Ok((image_mse(&s.image, &r), None))
            } else {
                let (seq, r) = self.model.reconstruct(&self.store, &s.image, &NULL_QUERY, None)?;
                Ok((image_mse(&s.image, &r), Some(seq.len())))
            }
        });
        let scored = scored.into_iter().collect::<Result<Vec<_>, _>>()?;
        let n = scored.len().max(1) as f64;
        let mse = scored.iter().map(|s| s.0).sum::<f64>() / n;
        let eos: Vec<usize> = scored.iter().filter_map(|s| s.1).collect();
        Ok(StageSummary {
            stage: self.stage,
            steps: self.step,
            heldout_mse: mse,
            heldout_psnr: crate::analysis::psnr_from_mse(mse),
            heldout_eos_mean: (!eos.is_empty()).then(|| eos.iter().sum::<usize>() as f64 / eos.len() as f64),
            param_hash: self.store.hash_groups(&Group::ALL),
        })
    }
}

/// Pixel MSE between two images of equal size.
pub fn image_mse(a: &Image, b: &Image) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n
}

fn stage_groups(cfg: &TrainConfig, stage: Stage) -> Vec<(Group, f64)> {
    match stage {
        Stage::Codec => vec![(Group::Codec, 1.0), (Group::Codebook, 1.0)],
        Stage::Dove | Stage::Qdove => {
            let mut g = vec![(Group::Generator, 1.0), (Group::TokenDecoder, 1.0)];
            if !cfg.freeze_codec {
                g.push((Group::Codec, cfg.codec_lr_scale));
            }
            g
        }
    }
}

fn empty_row(stage: Stage, step: usize) -> MetricsRow {
    MetricsRow {
        stage,
        step,
        loss_mse: None,
        loss_perc: None,
        loss_gan: None,
        loss_rec: None,
        loss_vq: None,
        loss_rel: None,
        loss_irr: None,
        loss_qry: None,
        loss_pen: None,
        loss_eos: None,
        loss_kl: None,
        loss_total: 0.0,
        loss_disc: None,
        threshold: None,
        lambda_eos: None,
        eos_mean: None,
        eos_min: None,
        eos_max: None,
        query_frac: None,
        grad_norm: 0.0,
    }
}

fn mean_of(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn summarize(
    stage: Stage,
    step: usize,
    reports: &[LossReport],
    eos: &[usize],
    threshold: Option<f64>,
    lambda_eos: f64,
    gan: bool,
) -> MetricsRow {
    let plain = || reports.iter().filter(|r| r.query.is_none());
    let query = || reports.iter().filter_map(|r| r.query.as_ref());
    let n = reports.len() as f64;
    MetricsRow {
        loss_mse: mean_of(plain().map(|r| r.mse)),
        loss_perc: mean_of(plain().map(|r| r.perc)),
        loss_gan: if gan { mean_of(plain().map(|r| r.gan)) } else { None },
        loss_rec: mean_of(plain().map(|r| r.rec)),
        loss_rel: mean_of(query().map(|q| q.rel_mean)),
        loss_irr: mean_of(query().map(|q| q.irr)),
        loss_qry: mean_of(query().map(|q| q.qry)),
        loss_pen: mean_of(reports.iter().filter_map(|r| r.pen)),
        loss_eos: mean_of(reports.iter().map(|r| r.eos)),
        loss_kl: mean_of(reports.iter().map(|r| r.kl)),
        loss_total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        threshold,
        lambda_eos: Some(lambda_eos),
        eos_mean: mean_of(eos.iter().map(|&m| m as f64)),
        eos_min: eos.iter().copied().min(),
        eos_max: eos.iter().copied().max(),
        query_frac: (stage == Stage::Qdove).then(|| query().count() as f64 / n),
        ..empty_row(stage, step)
    }
}

/// Pixel reconstruction and token count of `img` at the model's own EOS.
pub fn reconstruct_image(t: &Trainer, img: &Image, query: &[usize], budget: Option<usize>) -> Result<(usize, Image), TrainError> {
    let (seq, r) = t.model.reconstruct(&t.store, img, query, budget)?;
    Ok((seq.len(), r))
}

/// Box-restricted pixel MSE inside and outside the union of `boxes`.
pub fn region_mse(a: &Image, b: &Image, boxes: &[BBox]) -> (Option<f64>, Option<f64>) {
    let (h, w) = (a.height(), a.width());
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 0..w {
            let (pa, pb) = (a.pixel(y, x), b.pixel(y, x));
            let e: f64 = pa.iter().zip(pb).map(|(u, v)| (*u as f64 - v as f64).powi(2)).sum::<f64>() / 3.0;
            if boxes.iter().any(|bb| bb.contains(x, y)) {
                si += e;
                ni += 1;
            } else {
                so += e;
                no += 1;
            }
        }
    }
    ((ni > 0).then(|| si / ni as f64), (no > 0).then(|| so / no as f64))
}
