//! AdamW, the warmup + cosine learning-rate schedule and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamW {
    /// One update of `param` in place. `step` is 1-based and drives bias
    /// correction. Decay is decoupled: `p -= lr * wd * p` before the Adam step,
    /// and only when `decay` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn update<T: Element>(
        &self,
        param: &mut Tensor<T>,
        grad: &Tensor<T>,
        m: &mut Tensor<T>,
        v: &mut Tensor<T>,
        step: u64,
        lr: f64,
        decay: bool,
    ) {
        debug_assert_eq!(param.shape(), grad.shape());
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let c1 = T::of(1.0 - self.beta1.powf(step as f64));
        let c2 = T::of(1.0 - self.beta2.powf(step as f64));
        let lr_t = T::of(lr);
        let eps = T::of(self.eps);
        let shrink = T::of(1.0 - lr * self.weight_decay);
        let iter = param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((p, &g), (m, v)) in iter {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            if decay {
                *p = *p * shrink;
            }
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Schedule parameters. `warmup_fraction` of `total_steps` ramps linearly from
/// zero, the rest follows a half cosine down to `lr_min`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(lr_max: f64, lr_min: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        Self {
            lr_max,
            lr_min,
            warmup_steps: (warmup_fraction * total_steps as f64).round() as u64,
            total_steps,
        }
    }
}

pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.lr_max * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.lr_max;
    }
    let t = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Global L2 norm over all gradients, accumulated in f64.
pub fn global_norm<'a, T: Element>(grads: impl IntoIterator<Item = &'a Tensor<T>>) -> f64 {
    grads
        .into_iter()
        .flat_map(|g| g.data())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients so their global norm is at most `max_norm` (no-op when
/// `max_norm <= 0`). Returns the norm before clipping.
pub fn clip_global_norm<'a, T: Element>(grads: impl IntoIterator<Item = &'a mut Tensor<T>>, max_norm: f64) -> f64 {
    let mut grads: Vec<&mut Tensor<T>> = grads.into_iter().collect();
    let norm = global_norm(grads.iter().map(|g| &**g));
    if max_norm > 0.0 && norm > max_norm {
        let k = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> Schedule {
        Schedule::new(1.5e-4, 1e-6, 0.2, 100)
    }

    #[test]
    fn schedule_endpoints() {
        let s = sched();
        assert_eq!(s.warmup_steps, 20);
        assert_eq!(lr_at(0, &s), 0.0);
        assert_eq!(lr_at(20, &s), 1.5e-4);
        assert!((lr_at(60, &s) - (1.5e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert!((lr_at(100, &s) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let mut p = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64 - 1.5);
        let before = p.clone();
        let (mut m, mut v) = (Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]));
        opt.update(&mut p, &Tensor::zeros(&[2, 2]), &mut m, &mut v, 1, 1e-3, true);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        let g = Tensor::<f64>::from_f64(&[3], &[0.5, -2.0, 1e-3]).unwrap();
        let mut p = Tensor::zeros(&[3]);
        let (mut m, mut v) = (Tensor::zeros(&[3]), Tensor::zeros(&[3]));
        opt.update(&mut p, &g, &mut m, &mut v, 1, 0.1, false);
        for (p, g) in p.data().iter().zip(g.data()) {
            let expect = -0.1 * g / (g.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-12, "{p} vs {expect}");
        }
    }

    #[test]
    fn decay_is_decoupled() {
        let opt = AdamW::default();
        let mut p = Tensor::<f64>::full(&[2, 2], 2.0);
        let (mut m, mut v) = (Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]));
        opt.update(&mut p, &Tensor::zeros(&[2, 2]), &mut m, &mut v, 1, 0.01, true);
        assert!(p.data().iter().all(|&x| x == 2.0 * (1.0 - 0.01 * 0.05)));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut a = Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap();
        let norm = clip_global_norm([&mut a], 1.0);
        assert_eq!(norm, 5.0);
        assert!((global_norm([&a]) - 1.0).abs() < 1e-12);
    }
}
