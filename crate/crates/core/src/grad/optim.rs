//! AdamW with decoupled weight decay, global-norm clipping and a warmup +
//! cosine learning-rate schedule.

use crate::scalar::Scalar;

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

pub struct AdamW<S: Scalar> {
    cfg: AdamWConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: i32,
}

impl<S: Scalar> AdamW<S> {
    pub fn new<P: Scalar>(store: &ParamStore<P>, cfg: AdamWConfig) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| vec![S::zero(); store.get(id).len()])
                .collect()
        };
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update: `p <- p (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Tensor<S>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (S::of(self.cfg.beta1), S::of(self.cfg.beta2));
        let bc1 = S::one() - b1.powi(self.t);
        let bc2 = S::one() - b2.powi(self.t);
        let lr_s = S::of(lr);
        let decay = S::one() - lr_s * S::of(self.cfg.weight_decay);
        let eps = S::of(self.cfg.eps);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] = p[i] * decay - lr_s * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| g.sq_norm())
        .sum::<S>()
        .sqrt()
        .to_f64_lossy();
    if max_norm > 0.0 && norm > max_norm {
        let c = S::of(max_norm / (norm + 1e-12));
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
    norm
}

/// Linear warmup over `warmup_frac` of `total` steps, then cosine decay to 0.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub peak_lr: f64,
    pub total: usize,
    pub warmup_frac: f64,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total.max(1) as f64;
        let warm = (self.warmup_frac * total).round();
        let s = step as f64;
        if s < warm {
            self.peak_lr * (s + 1.0) / warm
        } else {
            let progress = ((s - warm) / (total - warm).max(1.0)).clamp(0.0, 1.0);
            0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::vector(vec![v]));
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = one_param(0.7);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        for _ in 0..5 {
            opt.step(&mut s, &[Tensor::vector(vec![0.0])], 0.1);
        }
        assert_eq!(s.get(s.ids().next().unwrap()).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut s = one_param(1.0);
        let mut opt = AdamW::new(&s, AdamWConfig::default());
        opt.step(&mut s, &[Tensor::vector(vec![1.0])], 0.1);
        let p = s.get(s.ids().next().unwrap()).data()[0];
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p - expected).abs() < 1e-15, "{p} vs {expected}");
    }

    #[test]
    fn decoupled_decay_shrinks_by_factor() {
        let mut s = one_param(2.0);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(&s, cfg);
        opt.step(&mut s, &[Tensor::vector(vec![0.0])], 0.1);
        let p = s.get(s.ids().next().unwrap()).data()[0];
        assert!((p - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let s = CosineSchedule {
            peak_lr: 3e-4,
            total: 100,
            warmup_frac: 0.1,
        };
        assert!(s.lr(0) < s.lr(5));
        assert!((s.lr(9) - 3e-4).abs() < 1e-12);
        assert!((s.lr(10) - 3e-4).abs() < 1e-12);
        assert!(s.lr(50) < 3e-4);
        assert!(s.lr(100) < 1e-12);
        for k in 10..99 {
            assert!(s.lr(k + 1) <= s.lr(k));
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::<f64>::vector(vec![3.0, 4.0])];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0].sq_norm().sqrt() - 1.0).abs() < 1e-9);
    }
}
