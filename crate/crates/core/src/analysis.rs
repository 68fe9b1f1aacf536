//! Measurements on trained tokenizers: token-length distribution, loss
//! versus token budget, complexity/length correlation, linear probes on
//! hidden states, PCA feature maps and PSNR.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{laplacian_variance, Image};
use crate::model::{DoveModel, SampleOpts};
use crate::nn::{AdamConfig, Graph, Group, GroupMask, Linear, OptimState, ParamStore, Tensor, TensorError};
use crate::par::Exec;
use crate::trainloop::{image_mse, Sample};

pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("correlation undefined: {0} has zero variance")]
    ZeroVariance(&'static str),
    #[error("{0}")]
    Invalid(String),
}

/// `10·log10(1/MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(x: &Image, y: &Image) -> f64 {
    psnr_from_mse(image_mse(x, y))
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn std_pop(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, AnalysisError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(AnalysisError::Invalid(format!("pearson needs two equal series of length >= 2, got {} and {}", x.len(), y.len())));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(AnalysisError::ZeroVariance("x"));
    }
    if syy == 0.0 {
        return Err(AnalysisError::ZeroVariance("y"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub k: usize,
    /// Emitted token count per image.
    pub lengths: Vec<usize>,
    /// `counts[m - 1]` images emitted `m` tokens.
    pub counts: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub min: usize,
    pub max: usize,
    pub distinct: usize,
}

impl LengthHistogram {
    pub fn from_lengths(k: usize, lengths: Vec<usize>) -> Self {
        let mut counts = vec![0; k];
        for &m in &lengths {
            counts[m - 1] += 1;
        }
        let f: Vec<f64> = lengths.iter().map(|&m| m as f64).collect();
        Self {
            k,
            mean: mean(&f),
            std: std_pop(&f),
            min: lengths.iter().copied().min().unwrap_or(0),
            max: lengths.iter().copied().max().unwrap_or(0),
            distinct: counts.iter().filter(|&&c| c > 0).count(),
            counts,
            lengths,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("length,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i + 1, c));
        }
        s
    }
}

/// Emitted token counts under `query` for every sample.
pub fn length_distribution(
    model: &DoveModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
    query: &[usize],
    exec: Exec,
) -> Result<LengthHistogram, AnalysisError> {
    let lens = exec.map(samples, |_, s| model.tokens(store, &s.image, query).map(|t| t.len()));
    Ok(LengthHistogram::from_lengths(model.k(), lens.into_iter().collect::<Result<_, _>>()?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub budget: usize,
    pub mean_mse: f64,
    pub median_mse: f64,
    pub mean_psnr: f64,
    pub median_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub samples: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn budgets(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.budget).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("budget,mean_mse,median_mse,mean_psnr,median_psnr\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.budget, r.mean_mse, r.median_mse, r.mean_psnr, r.median_psnr));
        }
        s
    }
}

/// Reconstruction error of the same samples at each forced budget.
pub fn budget_sweep(
    model: &DoveModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
    query: &[usize],
    budgets: &[usize],
    exec: Exec,
) -> Result<SweepReport, AnalysisError> {
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AnalysisError::Invalid("budgets must be non-empty and strictly increasing".into()));
    }
    if budgets[0] == 0 || *budgets.last().unwrap() > model.k() {
        return Err(AnalysisError::Invalid(format!("budgets must lie in 1..={}", model.k())));
    }
    let per_sample = exec.map(samples, |_, s| -> Result<Vec<f64>, TensorError> {
        budgets
            .iter()
            .map(|&b| model.reconstruct(store, &s.image, query, Some(b)).map(|(_, r)| image_mse(&s.image, &r)))
            .collect()
    });
    let per_sample = per_sample.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rows = budgets
        .iter()
        .enumerate()
        .map(|(j, &budget)| {
            let mses: Vec<f64> = per_sample.iter().map(|v| v[j]).collect();
            let ps: Vec<f64> = mses.iter().map(|&m| psnr_from_mse(m)).collect();
            SweepRow { budget, mean_mse: mean(&mses), median_mse: median(&mses), mean_psnr: mean(&ps), median_psnr: median(&ps) }
        })
        .collect();
    Ok(SweepReport { samples: samples.len(), rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub r: f64,
    pub complexity: Vec<f64>,
    pub lengths: Vec<usize>,
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("laplacian_variance,eos_pos\n");
        for (c, m) in self.complexity.iter().zip(&self.lengths) {
            s.push_str(&format!("{c},{m}\n"));
        }
        s
    }
}

/// Pearson correlation between Laplacian variance and emitted length.
pub fn complexity_correlation(
    model: &DoveModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
    query: &[usize],
    exec: Exec,
) -> Result<CorrelationReport, AnalysisError> {
    let hist = length_distribution(model, store, samples, query, exec)?;
    let complexity: Vec<f64> = exec.map(samples, |_, s| laplacian_variance(&s.image));
    let lens: Vec<f64> = hist.lengths.iter().map(|&m| m as f64).collect();
    let r = pearson(&complexity, &lens)?;
    Ok(CorrelationReport { r, complexity, lengths: hist.lengths })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            _ => Err(format!("unknown pooling `{s}` (expected mean or max)")),
        }
    }
}

/// Pooled generator hidden state of block `layer` (negative counts from
/// the end) over all `K` slot positions.
pub fn probe_features(
    model: &DoveModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
    query: &[usize],
    layer: isize,
    pooling: Pooling,
    exec: Exec,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let n_layers = model.gen.blocks.len() as isize;
    let li = if layer < 0 { n_layers + layer } else { layer };
    if !(0..n_layers).contains(&li) {
        return Err(AnalysisError::Invalid(format!("layer {layer} outside the generator's {n_layers} blocks")));
    }
    let feats = exec.map(samples, |_, s| -> Result<Vec<f64>, TensorError> {
        let mut g = Graph::inference(store);
        let f = model.forward(&mut g, &s.image, query, SampleOpts::default())?;
        let h = g.value(f.gen.hidden[li as usize]);
        let d = h.shape()[1];
        let k = model.k();
        let rows = (f.gen.slot_start..f.gen.slot_start + k).map(|r| h.row(r));
        let mut out = match pooling {
            Pooling::Mean => vec![0.0; d],
            Pooling::Max => vec![f64::NEG_INFINITY; d],
        };
        for row in rows {
            for (o, &v) in out.iter_mut().zip(row) {
                match pooling {
                    Pooling::Mean => *o += v as f64 / k as f64,
                    Pooling::Max => *o = o.max(v as f64),
                }
            }
        }
        Ok(out)
    });
    Ok(feats.into_iter().collect::<Result<_, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Hidden width of the optional MLP probe; `None` is a linear probe.
    pub hidden: Option<usize>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.05, hidden: None, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub pooling: Option<Pooling>,
    pub layer: Option<isize>,
    pub classes: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

fn standardizer(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = x[0].len();
    let n = x.len() as f64;
    let mu: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = x.iter().map(|r| (r[j] - mu[j]).powi(2)).sum::<f64>() / n;
            if v > 1e-12 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mu, sd)
}

fn design(x: &[Vec<f64>], mu: &[f64], sd: &[f64]) -> Tensor<f32> {
    let d = mu.len();
    Tensor::from_fn(&[x.len(), d], |i| ((x[i / d][i % d] - mu[i % d]) / sd[i % d]) as f32)
}

/// Trains a softmax classifier full-batch on standardized features and
/// reports train/validation accuracy.
pub fn linear_probe(
    train: (&[Vec<f64>], &[usize]),
    val: (&[Vec<f64>], &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult, AnalysisError> {
    let (xt, yt) = train;
    let (xv, yv) = val;
    if xt.is_empty() || xt.len() != yt.len() || xv.len() != yv.len() {
        return Err(AnalysisError::Invalid("probe needs matching non-empty features and labels".into()));
    }
    if classes < 2 || yt.iter().chain(yv).any(|&y| y >= classes) {
        return Err(AnalysisError::Invalid(format!("labels must lie in 0..{classes} with at least 2 classes")));
    }
    let distinct = {
        let mut s: Vec<usize> = yt.to_vec();
        s.sort_unstable();
        s.dedup();
        s.len()
    };
    if distinct < 2 {
        return Err(AnalysisError::Invalid("training split has a single class".into()));
    }
    let (mu, sd) = standardizer(xt);
    let (tt, tv) = (design(xt, &mu, &sd), design(xv, &mu, &sd));
    let d = mu.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f32>::new();
    let layers: Vec<Linear> = match cfg.hidden {
        None => vec![Linear::new(&mut store, &mut rng, "probe.out", Group::Generator, d, classes)],
        Some(h) => vec![
            Linear::new(&mut store, &mut rng, "probe.hidden", Group::Generator, d, h),
            Linear::new(&mut store, &mut rng, "probe.out", Group::Generator, h, classes),
        ],
    };
    let logits = |g: &mut Graph<'_, f32>, x: &Tensor<f32>| -> Result<_, TensorError> {
        let mut h = g.constant(x.clone());
        for (i, l) in layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    };
    let n = xt.len();
    let mut onehot = vec![0.0f32; n * classes];
    for (i, &y) in yt.iter().enumerate() {
        onehot[i * classes + y] = -1.0 / n as f32;
    }
    let target = Tensor::new(vec![n, classes], onehot)?;
    let adam = AdamConfig { lr: cfg.lr, clip: 0.0, ..AdamConfig::default() };
    let mut opt = OptimState::new(adam, store.len(), vec![(Group::Generator, 1.0)]);
    for _ in 0..cfg.epochs {
        let grads = {
            let mut g = Graph::new(&store, GroupMask::of(&[Group::Generator]));
            let z = logits(&mut g, &tt)?;
            let p = g.softmax(z)?;
            let eps = g.constant(Tensor::full(&[n, classes], 1e-12));
            let p = g.add(p, eps)?;
            let lp = g.log(p)?;
            let nll = g.weighted_sum(lp, target.clone())?;
            g.backward(nll)?
        };
        opt.step(&mut store, &grads)?;
    }
    let accuracy = |x: &Tensor<f32>, y: &[usize]| -> Result<f64, TensorError> {
        if y.is_empty() {
            return Ok(0.0);
        }
        let mut g = Graph::inference(&store);
        let z = logits(&mut g, x)?;
        let z = g.value(z);
        let hits = y
            .iter()
            .enumerate()
            .filter(|&(i, &yi)| {
                let row = z.row(i);
                let arg = (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                arg == yi
            })
            .count();
        Ok(hits as f64 / y.len() as f64)
    };
    Ok(ProbeResult { pooling: None, layer: None, classes, train_accuracy: accuracy(&tt, yt)?, val_accuracy: accuracy(&tv, yv)? })
}

/// Labels permuted deterministically, for chance-level controls.
pub fn shuffled(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// Eigenvalues of the covariance, descending.
    pub eigenvalues: Vec<f64>,
    /// Unit eigenvectors, one per row, matching `eigenvalues`.
    pub components: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl Pca {
    /// Principal axes of the rows of `x` (`n × d`).
    pub fn fit(x: &[Vec<f64>]) -> Result<Self, AnalysisError> {
        let n = x.len();
        if n < 2 {
            return Err(AnalysisError::Invalid("PCA needs at least two rows".into()));
        }
        let d = x[0].len();
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let c = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
        let cov = (c.transpose() * &c) / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let components = order.iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
        Ok(Self { eigenvalues, components, mean })
    }

    /// Coordinates of `row` on the first `k` components.
    pub fn project(&self, row: &[f64], k: usize) -> Vec<f64> {
        self.components[..k]
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((a, x), m)| a * (x - m)).sum())
            .collect()
    }
}

/// Which per-position features feed the PCA map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PcaSource {
    /// Token-decoder output grid (the codec decoder's input).
    DecoderGrid,
    /// Generator hidden states at the latent-grid positions after a block.
    GeneratorLayer(usize),
}

/// Top-3 PCA projection of per-position features, each component min-max
/// normalized to `[0, 1]`: rows are grid positions.
pub fn pca_rgb(features: &[Vec<f64>]) -> Result<Vec<[f64; 3]>, AnalysisError> {
    if features.len() < 3 {
        return Err(AnalysisError::Invalid(format!("PCA map needs at least 3 positions, got {}", features.len())));
    }
    let pca = Pca::fit(features)?;
    let proj: Vec<Vec<f64>> = features.iter().map(|r| pca.project(r, 3)).collect();
    let mut out = vec![[0.0; 3]; features.len()];
    for c in 0..3 {
        let lo = proj.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min);
        let hi = proj.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for (o, p) in out.iter_mut().zip(&proj) {
            o[c] = if span > 1e-12 { (p[c] - lo) / span } else { 0.0 };
        }
    }
    Ok(out)
}

/// Per-position features of `img` for the PCA map.
pub fn grid_features(
    model: &DoveModel,
    store: &ParamStore<f32>,
    img: &Image,
    query: &[usize],
    source: PcaSource,
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let mut g = Graph::inference(store);
    let f = model.forward(&mut g, img, query, SampleOpts::default())?;
    let t = match source {
        PcaSource::DecoderGrid => g.value(f.grid).clone(),
        PcaSource::GeneratorLayer(l) => {
            let h = f.gen.hidden.get(l).ok_or_else(|| AnalysisError::Invalid(format!("no generator block {l}")))?;
            let v = g.value(*h);
            let n = model.cfg.codec.grid_len();
            Tensor::new(vec![n, v.shape()[1]], v.data()[..n * v.shape()[1]].to_vec())?
        }
    };
    let n = t.shape()[0];
    Ok((0..n).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect())
}

/// RGB image of the top-3 principal components of `img`'s grid features,
/// nearest-neighbour upsampled to the input size.
pub fn pca_semantics(
    model: &DoveModel,
    store: &ParamStore<f32>,
    img: &Image,
    query: &[usize],
    source: PcaSource,
) -> Result<Image, AnalysisError> {
    let feats = grid_features(model, store, img, query, source)?;
    let rgb = pca_rgb(&feats)?;
    let side = model.cfg.codec.grid_side();
    let (h, w) = (img.height(), img.width());
    let mut out = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let p = rgb[(y * side / h) * side + x * side / w];
            out.set_pixel(y, x, [p[0] as f32, p[1] as f32, p[2] as f32]);
        }
    }
    Ok(out)
}

/// Images side by side, left to right.
pub fn hstack(images: &[Image]) -> Image {
    let h = images[0].height();
    let w: usize = images.iter().map(Image::width).sum();
    let mut out = Image::filled(h, w, [0.0; 3]);
    let mut x0 = 0;
    for img in images {
        for y in 0..h {
            for x in 0..img.width() {
                out.set_pixel(y, x0 + x, img.pixel(y, x));
            }
        }
        x0 += img.width();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_values() {
        assert_eq!(psnr_from_mse(0.0), 99.0);
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        let a = Image::filled(4, 4, [0.3, 0.3, 0.3]);
        assert_eq!(psnr(&a, &a), 99.0);
    }

    #[test]
    fn pearson_edges() {
        let x = [1.0, 2.0, 4.0, 8.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let nx: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &nx).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(AnalysisError::ZeroVariance("y"))));
    }

    #[test]
    fn histogram_counts() {
        let h = LengthHistogram::from_lengths(4, vec![1, 4, 4, 2]);
        assert_eq!(h.counts, vec![1, 1, 0, 2]);
        assert_eq!((h.mean, h.min, h.max, h.distinct), (2.75, 1, 4, 3));
        assert!(h.to_csv().starts_with("length,count\n1,1\n"));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
