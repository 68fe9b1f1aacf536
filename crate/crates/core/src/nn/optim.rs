use serde::{Deserialize, Serialize};

use super::params::{Group, Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 1.0 }
    }
}

/// Bias-corrected Adam with global-norm clipping.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub cfg: AdamConfig,
    pub step: u64,
    /// First/second moments, allocated lazily per parameter.
    pub m: Vec<Option<Tensor<f32>>>,
    pub v: Vec<Option<Tensor<f32>>>,
    /// Learning-rate multiplier per group; groups absent here are never updated.
    pub group_scale: Vec<(Group, f64)>,
}

impl OptimState {
    pub fn new(cfg: AdamConfig, n_params: usize, group_scale: Vec<(Group, f64)>) -> Self {
        Self { cfg, step: 0, m: vec![None; n_params], v: vec![None; n_params], group_scale }
    }

    fn scale_for(&self, g: Group) -> Option<f64> {
        self.group_scale.iter().find(|(gg, _)| *gg == g).map(|(_, s)| *s)
    }

    /// Applies one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Grads<f32>) -> Result<f64, TensorError> {
        let next = self.step + 1;
        if !grads.all_finite() {
            return Err(TensorError::NonFiniteGradient { step: next });
        }
        let mut sq = 0.0;
        for (id, g) in grads.iter() {
            if self.scale_for(store.entry(id).group).is_some() {
                sq += g.sq_norm_f64();
            }
        }
        let norm = sq.sqrt();
        let divisor = if self.cfg.clip > 0.0 && norm > self.cfg.clip { norm / self.cfg.clip } else { 1.0 };
        self.step = next;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(next as i32);
        let bc2 = 1.0 - b2.powi(next as i32);
        for (id, g) in grads.iter() {
            let Some(scale) = self.scale_for(store.entry(id).group) else { continue };
            let lr = self.cfg.lr * scale;
            let ParamId(i) = id;
            let shape = g.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.get_mut(id);
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gc = *gv as f64 / divisor;
                let mn = b1 * *mv as f64 + (1.0 - b1) * gc;
                let vn = b2 * *vv as f64 + (1.0 - b2) * gc * gc;
                *mv = mn as f32;
                *vv = vn as f32;
                let upd = lr * (mn / bc1) / ((vn / bc2).sqrt() + self.cfg.eps);
                *pv = (*pv as f64 - upd) as f32;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f32) -> (ParamStore<f32>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Group::Generator, Tensor::scalar(w));
        (s, id)
    }

    fn grads_of(id: ParamId, n: usize, t: Tensor<f32>) -> Grads<f32> {
        let mut g = Grads::new(n);
        g.add_raw(id, &t.shape().to_vec(), t.data());
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = scalar_store(0.37);
        let mut opt = OptimState::new(AdamConfig::default(), 1, vec![(Group::Generator, 1.0)]);
        for _ in 0..5 {
            opt.step(&mut s, &grads_of(id, 1, Tensor::scalar(0.0))).unwrap();
        }
        assert_eq!(s.get(id).item(), 0.37);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(1.0);
        let cfg = AdamConfig { lr: 0.1, clip: 0.0, ..Default::default() };
        let mut opt = OptimState::new(cfg, 1, vec![(Group::Generator, 1.0)]);
        opt.step(&mut s, &grads_of(id, 1, Tensor::scalar(1.0))).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = 0.1 / (1 + 1e-8)
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get(id).item() as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn clipping_matches_prescaled_gradient() {
        let run = |g: [f32; 2]| {
            let mut s = ParamStore::new();
            let id = s.add("w", Group::Generator, Tensor::new(vec![2], vec![0.5, -0.25]).unwrap());
            let mut opt = OptimState::new(AdamConfig { lr: 0.01, clip: 1.0, ..Default::default() }, 1, vec![(Group::Generator, 1.0)]);
            let t = Tensor::new(vec![2], g.to_vec()).unwrap();
            opt.step(&mut s, &grads_of(id, 1, t)).unwrap();
            (s.get(id).clone(), opt.m[0].clone().unwrap())
        };
        let (p_big, m_big) = run([6.0, 8.0]);
        let (p_small, m_small) = run([0.6, 0.8]);
        assert!(m_big.max_abs_diff(&m_small) < 1e-8);
        assert!(p_big.max_abs_diff(&p_small) < 1e-8);
    }

    #[test]
    fn nan_gradient_aborts_with_step_index() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = OptimState::new(AdamConfig::default(), 1, vec![(Group::Generator, 1.0)]);
        opt.step(&mut s, &grads_of(id, 1, Tensor::scalar(0.5))).unwrap();
        let err = opt.step(&mut s, &grads_of(id, 1, Tensor::scalar(f32::NAN))).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient { step: 2 }));
    }

    #[test]
    fn groups_without_scale_are_frozen() {
        let mut s = ParamStore::new();
        let a = s.add("a", Group::Generator, Tensor::scalar(1.0f32));
        let b = s.add("b", Group::Discriminator, Tensor::scalar(1.0f32));
        let mut g = Grads::new(2);
        g.add_raw(a, &[1], &[1.0]);
        g.add_raw(b, &[1], &[1.0]);
        let mut opt = OptimState::new(AdamConfig::default(), 2, vec![(Group::Generator, 1.0)]);
        opt.step(&mut s, &g).unwrap();
        assert!(s.get(a).item() < 1.0);
        assert_eq!(s.get(b).item(), 1.0);
    }
}
