//! Losses: reconstruction (MSE + perceptual + GAN), the windowed dynamic
//! threshold, the EOS loss with its two branches, the warmup schedule, and
//! the query-conditioned region losses with the early-termination penalty.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::codec::{image_tensor, Discriminator, PerceptualExtractor};
use crate::corpus::{BBox, Image, CHANNELS};
use crate::nn::{Graph, ParamStore, ResampleMap, Scalar, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mse: f64,
    pub perc: f64,
    pub gan: f64,
    pub rec: f64,
    pub eos_max: f64,
    pub warmup_fraction: f64,
    /// `λ_o`, weight of the reconstruction error outside all query boxes.
    pub outside: f64,
    /// `β`, KL weight for the Gaussian variant.
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mse: 1.0, perc: 0.1, gan: 5e-10, rec: 1.0, eos_max: 0.1, warmup_fraction: 0.5, outside: 1e-10, kl: 1e-3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TensorError> {
        let all = [self.mse, self.perc, self.gan, self.rec, self.eos_max, self.warmup_fraction, self.outside, self.kl];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(TensorError::Config("loss weights must be finite and non-negative".into()));
        }
        if self.warmup_fraction > 1.0 {
            return Err(TensorError::Config("warmup_fraction must be at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    Window,
    Ema,
}

/// Running reference loss: arithmetic mean of the last `window` values, or an
/// exponential average with `decay`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    pub mode: ThresholdMode,
    pub window: usize,
    pub decay: f64,
    buf: VecDeque<f64>,
    ema: Option<f64>,
}

impl ThresholdState {
    pub fn window(window: usize) -> Self {
        assert!(window > 0, "threshold window must be positive");
        Self { mode: ThresholdMode::Window, window, decay: 0.99, buf: VecDeque::with_capacity(window), ema: None }
    }

    pub fn ema(decay: f64) -> Self {
        Self { mode: ThresholdMode::Ema, window: 1, decay, buf: VecDeque::new(), ema: None }
    }

    pub fn new(mode: ThresholdMode, window: usize) -> Self {
        match mode {
            ThresholdMode::Window => Self::window(window),
            ThresholdMode::Ema => Self::ema(0.99),
        }
    }

    /// Current reference value; `None` before the first push.
    pub fn mean(&self) -> Option<f64> {
        match self.mode {
            ThresholdMode::Window if self.buf.is_empty() => None,
            ThresholdMode::Window => Some(self.buf.iter().sum::<f64>() / self.buf.len() as f64),
            ThresholdMode::Ema => self.ema,
        }
    }

    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.buf.iter().copied()
    }

    /// Whether `loss` is strictly above the current reference. An empty
    /// state behaves as a threshold of `-∞`, so the first sample is above.
    pub fn is_above(&self, loss: f64) -> bool {
        self.mean().is_none_or(|t| loss > t)
    }

    /// Pushes a loss and returns the updated reference.
    pub fn update(&mut self, loss: f64) -> f64 {
        assert!(loss.is_finite(), "threshold update with non-finite loss");
        match self.mode {
            ThresholdMode::Window => {
                if self.buf.len() == self.window {
                    self.buf.pop_front();
                }
                self.buf.push_back(loss);
            }
            ThresholdMode::Ema => {
                self.ema = Some(match self.ema {
                    None => loss,
                    Some(e) => self.decay * e + (1.0 - self.decay) * loss,
                });
            }
        }
        self.mean().expect("non-empty after push")
    }
}

/// Coefficients `c` such that the EOS loss is `Σ_i c_i · p_eos(i)`.
/// `m` is 1-based; `above` selects the branch.
pub fn eos_weights(k: usize, m: usize, above: bool) -> Vec<f64> {
    assert!((1..=k).contains(&m), "m={m} outside 1..={k}");
    let mut c = vec![0.0; k];
    if above {
        c[m - 1] = 1.0;
    } else {
        penalty_weights_into(&mut c, m);
    }
    c
}

fn penalty_weights_into(c: &mut [f64], m: usize) {
    if m > 1 {
        let w = -1.0 / (m - 1) as f64;
        c[..m - 1].iter_mut().for_each(|v| *v += w);
    }
}

fn dot(c: &[f64], p: &[f64]) -> f64 {
    c.iter().zip(p).map(|(a, b)| a * b).sum()
}

/// EOS loss for one sample; `threshold = None` counts as above.
pub fn eos_loss(p_eos: &[f64], m: usize, l_rec: f64, threshold: Option<f64>) -> f64 {
    let above = threshold.is_none_or(|t| l_rec > t);
    dot(&eos_weights(p_eos.len(), m, above), p_eos)
}

/// Coefficients of the query-conditioned EOS loss: the two-branch term on
/// `L_rel`, plus the early-termination reward when `L_irr` is below its own
/// reference.
pub fn qdove_eos_weights(k: usize, m: usize, rel_above: bool, irr_below: bool) -> Vec<f64> {
    let mut c = eos_weights(k, m, rel_above);
    if irr_below {
        penalty_weights_into(&mut c, m);
    }
    c
}

pub fn qdove_eos_loss(
    p_eos: &[f64],
    m: usize,
    l_rel: f64,
    rel_threshold: Option<f64>,
    l_irr: f64,
    irr_threshold: Option<f64>,
) -> f64 {
    let rel_above = rel_threshold.is_none_or(|t| l_rel > t);
    let irr_below = irr_threshold.is_some_and(|t| l_irr < t);
    dot(&qdove_eos_weights(p_eos.len(), m, rel_above, irr_below), p_eos)
}

/// `L_pen`: the averaged reward term alone.
pub fn penalty(p_eos: &[f64], m: usize) -> f64 {
    let mut c = vec![0.0; p_eos.len()];
    penalty_weights_into(&mut c, m);
    dot(&c, p_eos)
}

/// Linear ramp from 0 to `eos_max` over `warmup_fraction · total_steps`.
pub fn lambda_eos_at(step: usize, total_steps: usize, w: &LossWeights) -> f64 {
    let end = w.warmup_fraction * total_steps as f64;
    if end <= 0.0 || step as f64 >= end {
        w.eos_max
    } else {
        w.eos_max * step as f64 / end
    }
}

pub fn total_loss(l_rec: f64, l_eos: f64, lambda_rec: f64, lambda_eos: f64) -> f64 {
    lambda_rec * l_rec + lambda_eos * l_eos
}

/// Networks scored by the reconstruction loss besides pixel MSE.
#[derive(Clone, Copy, Debug)]
pub struct RecNets<'m> {
    pub perc: &'m PerceptualExtractor,
    /// GAN term is skipped when absent.
    pub disc: Option<&'m Discriminator>,
}

#[derive(Clone, Copy, Debug)]
pub struct RecParts {
    pub mse: Var,
    pub perc: Var,
    pub gan: Option<Var>,
    pub total: Var,
}

/// `λ_mse·MSE + λ_perc·perceptual + λ_gan·GAN` on `[3, H, W]` images.
pub fn rec_loss_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    nets: RecNets<'_>,
    x: Var,
    x_hat: Var,
    w: &LossWeights,
) -> Result<RecParts, TensorError> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(TensorError::Shape { op: "rec_loss", lhs: g.shape(x).to_vec(), rhs: g.shape(x_hat).to_vec() });
    }
    let mse = g.mse(x_hat, x)?;
    let perc = nets.perc.distance(g, x_hat, x)?;
    let mut terms = vec![(T::from_f64(w.mse), mse), (T::from_f64(w.perc), perc)];
    let gan = match nets.disc {
        Some(d) => {
            let l = d.generator_loss(g, x_hat)?;
            terms.push((T::from_f64(w.gan), l));
            Some(l)
        }
        None => None,
    };
    let total = g.combine(&terms)?;
    Ok(RecParts { mse, perc, gan, total })
}

/// Scalar values of a reconstruction loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecValues {
    pub mse: f64,
    pub perc: f64,
    pub gan: f64,
    pub rec: f64,
}

impl RecValues {
    pub fn read<T: Scalar>(g: &Graph<'_, T>, p: &RecParts) -> Self {
        Self {
            mse: g.value(p.mse).item().as_f64(),
            perc: g.value(p.perc).item().as_f64(),
            gan: p.gan.map_or(0.0, |v| g.value(v).item().as_f64()),
            rec: g.value(p.total).item().as_f64(),
        }
    }
}

/// Inference-only reconstruction loss between two images.
pub fn rec_loss(store: &ParamStore<f32>, nets: RecNets<'_>, x: &Image, x_hat: &Image, w: &LossWeights) -> Result<RecValues, TensorError> {
    let mut g = Graph::inference(store);
    let a = g.constant(image_tensor(x));
    let b = g.constant(image_tensor(x_hat));
    let p = rec_loss_graph(&mut g, nets, a, b, w)?;
    Ok(RecValues::read(&g, &p))
}

pub struct QueryParts {
    pub rel: Vec<RecParts>,
    pub rel_mean: Var,
    pub irr: Var,
    pub total: Var,
}

/// Per-pixel weights selecting pixels outside every box, normalized so that
/// the weighted sum of squared differences is their mean; `None` when the
/// boxes cover the canvas.
pub fn outside_weights(h: usize, w: usize, boxes: &[BBox]) -> Option<Vec<f64>> {
    let outside: Vec<bool> =
        (0..h * w).map(|i| !boxes.iter().any(|b| b.contains(i % w, i / w))).collect();
    let count = outside.iter().filter(|&&o| o).count();
    if count == 0 {
        return None;
    }
    let per = 1.0 / (count * CHANNELS) as f64;
    Some((0..CHANNELS).flat_map(|_| outside.iter().map(|&o| if o { per } else { 0.0 })).collect())
}

/// `mean_i L_rel^i + λ_o · L_irr`, where `L_rel^i` is the reconstruction
/// loss between both images cropped to box `i` and upsampled to the canvas,
/// and `L_irr` is the MSE over pixels outside all boxes (0 if none).
pub fn query_loss_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    nets: RecNets<'_>,
    x: Var,
    x_hat: Var,
    boxes: &[BBox],
    w: &LossWeights,
) -> Result<QueryParts, TensorError> {
    if boxes.is_empty() {
        return Err(TensorError::Config("query_loss needs at least one box".into()));
    }
    let shape = g.shape(x).to_vec();
    let [c, h, wd] = shape[..] else {
        return Err(TensorError::InvalidShape(shape));
    };
    let mut rel = Vec::with_capacity(boxes.len());
    for b in boxes {
        if !b.is_valid() || !b.within(h, wd) {
            return Err(TensorError::Config(format!("degenerate or out-of-canvas box {:?}", b.as_tuple())));
        }
        let map = ResampleMap::new(c, h, wd, b.as_tuple(), h, wd);
        let xa = g.resample(x, map.clone())?;
        let xb = g.resample(x_hat, map)?;
        rel.push(rec_loss_graph(g, nets, xa, xb, w)?);
    }
    let inv = T::from_f64(1.0 / rel.len() as f64);
    let terms: Vec<(T, Var)> = rel.iter().map(|p| (inv, p.total)).collect();
    let rel_mean = g.combine(&terms)?;
    let irr = match outside_weights(h, wd, boxes) {
        Some(ws) => {
            let d = g.sub(x_hat, x)?;
            let sq = g.mul(d, d)?;
            let ws = Tensor::new(shape.clone(), ws.into_iter().map(T::from_f64).collect())?;
            g.weighted_sum(sq, ws)?
        }
        None => g.scalar(T::zero()),
    };
    let total = g.combine(&[(T::one(), rel_mean), (T::from_f64(w.outside), irr)])?;
    Ok(QueryParts { rel, rel_mean, irr, total })
}

/// Scalar query-loss values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryValues {
    pub rel: Vec<f64>,
    pub rel_mean: f64,
    pub irr: f64,
    pub qry: f64,
}

impl QueryValues {
    pub fn read<T: Scalar>(g: &Graph<'_, T>, p: &QueryParts) -> Self {
        Self {
            rel: p.rel.iter().map(|r| g.value(r.total).item().as_f64()).collect(),
            rel_mean: g.value(p.rel_mean).item().as_f64(),
            irr: g.value(p.irr).item().as_f64(),
            qry: g.value(p.total).item().as_f64(),
        }
    }
}

pub fn query_loss(
    store: &ParamStore<f32>,
    nets: RecNets<'_>,
    x: &Image,
    x_hat: &Image,
    boxes: &[BBox],
    w: &LossWeights,
) -> Result<QueryValues, TensorError> {
    let mut g = Graph::inference(store);
    let a = g.constant(image_tensor(x));
    let b = g.constant(image_tensor(x_hat));
    let p = query_loss_graph(&mut g, nets, a, b, boxes, w)?;
    Ok(QueryValues::read(&g, &p))
}

/// `λ_rec·L + λ_eos·Σ_i c_i·p_eos(i) + β·KL` with the EOS coefficients `c`
/// held constant. Returns `(eos, total)`.
pub fn total_loss_graph<T: Scalar>(
    g: &mut Graph<'_, T>,
    main: Var,
    p_eos: Var,
    coeffs: &[f64],
    kl: Option<Var>,
    w: &LossWeights,
    lambda_eos: f64,
) -> Result<(Var, Var), TensorError> {
    let c = Tensor::new(vec![coeffs.len(), 1], coeffs.iter().map(|&v| T::from_f64(v)).collect())?;
    let eos = g.weighted_sum(p_eos, c)?;
    let mut terms = vec![(T::from_f64(w.rec), main), (T::from_f64(lambda_eos), eos)];
    if let Some(kl) = kl {
        terms.push((T::from_f64(w.kl), kl));
    }
    let total = g.combine(&terms)?;
    Ok((eos, total))
}

/// Loss values of one sample (or a batch mean of samples).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub perc: f64,
    pub gan: f64,
    pub rec: f64,
    pub eos: f64,
    pub kl: f64,
    pub total: f64,
    pub query: Option<QueryValues>,
    pub pen: Option<f64>,
    pub threshold: Option<f64>,
    pub lambda_eos: f64,
}

impl LossReport {
    /// `λ_rec·L + λ_eos·L_eos + β·KL`, with `L` the query loss when present.
    pub fn recompute_total(&self, w: &LossWeights) -> f64 {
        let main = self.query.as_ref().map_or(self.rec, |q| q.qry);
        total_loss(main, self.eos, w.rec, self.lambda_eos) + w.kl * self.kl
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_examples() {
        let mut t = ThresholdState::window(3);
        assert!(t.is_above(-1e300));
        for v in [1.0, 2.0, 3.0] {
            t.update(v);
        }
        assert_eq!(t.mean(), Some(2.0));
        assert_eq!(t.update(4.0), 3.0);
        assert_eq!(t.history().collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
        assert!(t.is_above(3.5) && !t.is_above(3.0));
    }

    #[test]
    fn ema_threshold() {
        let mut t = ThresholdState::ema(0.5);
        assert_eq!(t.update(2.0), 2.0);
        assert_eq!(t.update(4.0), 3.0);
    }

    #[test]
    fn eos_examples() {
        let p = [0.1, 0.2, 0.3];
        assert_eq!(eos_loss(&p, 3, 1.0, Some(0.5)), 0.3);
        assert!((eos_loss(&p, 3, 0.4, Some(0.5)) + 0.15).abs() < 1e-15);
        assert_eq!(eos_loss(&p, 1, 0.4, Some(0.5)), 0.0);
        assert_eq!(eos_loss(&p, 2, 0.5, Some(0.5)), -0.1);
        assert_eq!(eos_loss(&p, 3, 0.0, None), 0.3);
    }

    #[test]
    fn qdove_eos_examples() {
        let p = [0.2, 0.4];
        assert_eq!(qdove_eos_loss(&p, 2, 1.0, Some(0.5), 1.0, Some(0.5)), 0.4);
        assert!((qdove_eos_loss(&p, 2, 0.1, Some(0.5), 0.1, Some(0.5)) + 0.4).abs() < 1e-15);
        assert_eq!(qdove_eos_loss(&p, 1, 0.1, Some(0.5), 0.1, Some(0.5)), 0.0);
        assert!((penalty(&p, 2) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn warmup_schedule() {
        let w = LossWeights { eos_max: 0.2, warmup_fraction: 0.5, ..Default::default() };
        assert_eq!(lambda_eos_at(0, 100, &w), 0.0);
        assert_eq!(lambda_eos_at(25, 100, &w), 0.1);
        assert_eq!(lambda_eos_at(50, 100, &w), 0.2);
        assert_eq!(lambda_eos_at(90, 100, &w), 0.2);
        let none = LossWeights { warmup_fraction: 0.0, ..w };
        assert_eq!(lambda_eos_at(0, 100, &none), 0.2);
    }

    #[test]
    fn total_examples() {
        assert!((total_loss(0.5, -0.1, 1.0, 1.0) - 0.4).abs() < 1e-15);
        assert_eq!(total_loss(0.5, 7.0, 2.0, 0.0), 1.0);
    }

    #[test]
    fn outside_mask_counts() {
        let b = [BBox::new(0, 0, 1, 1)];
        let ws = outside_weights(4, 4, &b).unwrap();
        assert_eq!(ws.iter().filter(|&&v| v > 0.0).count(), 3 * 12);
        assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(outside_weights(4, 4, &[BBox::new(0, 0, 3, 3)]).is_none());
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(LossWeights { perc: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
