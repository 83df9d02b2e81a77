use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{contract, Result};
use crate::scalar::Scalar;

/// A component that owns named tensors.
pub trait Parameterized<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Digest of every owned tensor, in visiting order.
    fn checksum(&self) -> String {
        let mut all = Vec::new();
        self.visit(&mut |_, t| all.push(t.clone()));
        super::checksum(all.iter())
    }
}

/// Cosine-annealed learning rate from `lr_max` at step 0 to `lr_min`
/// at `total_steps`, held at `lr_min` afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.lr_min;
        }
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub schedule: CosineSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: u64) -> Self {
        Self {
            schedule: CosineSchedule {
                lr_max,
                lr_min,
                total_steps,
            },
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction and a cosine schedule.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> f64 {
        self.cfg.schedule.lr_at(self.step)
    }

    /// Applies one update to every trainable tensor carrying a gradient,
    /// then advances the schedule. Errors when no gradient is present.
    pub fn step(&mut self, groups: &mut [&mut dyn Parameterized<T>]) -> Result<()> {
        let mut any = false;
        for g in groups.iter() {
            g.visit(&mut |_, t| any |= t.requires_grad() && t.grad().is_some());
        }
        if !any {
            return Err(contract("optimizer step before backward: no gradients"));
        }
        let lr = self.current_lr();
        let t = (self.step + 1) as f64;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        let moments = &mut self.moments;
        for g in groups.iter_mut() {
            g.visit_mut(&mut |name, p| {
                if !p.requires_grad() {
                    return;
                }
                let Some(grad) = p.grad().map(|g| g.to_vec()) else {
                    return;
                };
                let (m, v) = moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
                let data = p.data_mut();
                for j in 0..data.len() {
                    let gj = grad[j].as_f64();
                    let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                    let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                    m[j] = T::of(mj);
                    v[j] = T::of(vj);
                    let update = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                    data[j] -= T::of(update);
                }
            });
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor<f64>);

    impl Parameterized<f64> for One {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
            f("w", &self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("w", &mut self.0)
        }
    }

    #[test]
    fn first_adam_step_is_sign_scaled() {
        let mut p = One(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap().trainable());
        p.0.accumulate_grad(&[0.3, -4.0, 1e-3]).unwrap();
        let mut opt = Adam::new(AdamConfig::new(0.01, 0.0, 10));
        opt.step(&mut [&mut p]).unwrap();
        let eps = 1e-8;
        let expect = [
            1.0 - 0.01 * 0.3 / (0.3 + eps),
            -2.0 + 0.01 * 4.0 / (4.0 + eps),
            0.5 - 0.01 * 1e-3 / (1e-3 + eps),
        ];
        for (a, b) in p.0.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn schedule_endpoints_and_range() {
        let s = CosineSchedule {
            lr_max: 0.1,
            lr_min: 0.001,
            total_steps: 50,
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(50) - 0.001).abs() < 1e-15);
        for k in 0..80 {
            let lr = s.lr_at(k);
            assert!((0.001 - 1e-15..=0.1).contains(&lr));
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = One(Tensor::new([2], vec![1.0, 2.0]).unwrap().trainable());
        p.0.accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0, 5));
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.0.data(), &[1.0, 2.0]);
    }

    #[test]
    fn step_before_backward_is_an_error() {
        let mut p = One(Tensor::new([2], vec![1.0, 2.0]).unwrap().trainable());
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.0, 5));
        assert!(matches!(
            opt.step(&mut [&mut p]),
            Err(crate::error::Error::Contract(_))
        ));
    }
}
