//! Adam with per-group step counts, and piecewise-linear learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for every parameter of a store, plus one step counter per group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub steps: [u64; 4],
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Adam {
            cfg,
            v: m.clone(),
            m,
            steps: [0; 4],
        }
    }

    pub fn group_steps(&self, group: ParamGroup) -> u64 {
        self.steps[group.as_u8() as usize]
    }

    /// One bias-corrected Adam update of every trainable parameter in `group`
    /// from the gradients currently held in `store`.
    pub fn step_group(&mut self, store: &mut ParamStore, group: ParamGroup, lr: f64) -> Result<()> {
        // parameters added after construction start with zero moments
        for (_, p) in store.iter().skip(self.m.len()) {
            self.m.push(Tensor::zeros(p.value.shape()));
            self.v.push(Tensor::zeros(p.value.shape()));
        }
        let ids = store.ids_in_group(group);
        for &id in &ids {
            let p = store.get(id);
            if !p.grad.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {}",
                    p.name
                )));
            }
        }
        let slot = group.as_u8() as usize;
        self.steps[slot] += 1;
        let t = self.steps[slot] as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from `init` to `peak` over `warmup_steps`, then linear
/// decay to `floor` at `total_steps`; constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrSchedule {
    pub init: f64,
    pub peak: f64,
    pub floor: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::constant(1e-3)
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule {
            init: lr,
            peak: lr,
            floor: lr,
            warmup_steps: 0,
            total_steps: 0,
        }
    }

    pub fn warmup_decay(init: f64, peak: f64, floor: f64, warmup: u64, total: u64) -> Self {
        LrSchedule {
            init,
            peak,
            floor,
            warmup_steps: warmup,
            total_steps: total,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in [self.init, self.peak, self.floor] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("learning rate {v} must be >= 0")));
            }
        }
        if self.total_steps > 0 && self.total_steps < self.warmup_steps {
            return Err(Error::Config(format!(
                "total_steps {} < warmup_steps {}",
                self.total_steps, self.warmup_steps
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        LrSchedule {
            init: self.init * factor,
            peak: self.peak * factor,
            floor: self.floor * factor,
            ..*self
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            let f = step as f64 / self.warmup_steps as f64;
            return self.init + f * (self.peak - self.init);
        }
        if step >= self.total_steps {
            return if self.total_steps > self.warmup_steps {
                self.floor
            } else {
                self.peak
            };
        }
        let f = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.peak + f * (self.floor - self.peak)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn one_param(v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", ParamGroup::Frame, Tensor::vector(v)).unwrap();
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = one_param(vec![1.0, -2.0]);
        let id = s.id("x").unwrap();
        s.get_mut(id).grad = Tensor::vector(vec![0.5, -3.0]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step_group(&mut s, ParamGroup::Frame, 0.1).unwrap();
        // m_hat = g, v_hat = g^2 => update = -lr * g / (|g| + eps)
        let x = s.value(id).data();
        assert_abs_diff_eq!(x[0], 1.0 - 0.1 * 0.5 / (0.5 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], -2.0 + 0.1 * 3.0 / (3.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn zero_grad_is_no_op() {
        let mut s = one_param(vec![1.0, 2.0]);
        let before = s.clone();
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step_group(&mut s, ParamGroup::Frame, 0.1).unwrap();
        assert_eq!(s.value(s.id("x").unwrap()), before.value(before.id("x").unwrap()));
    }

    #[test]
    fn non_finite_grad_aborts() {
        let mut s = one_param(vec![1.0]);
        let id = s.id("x").unwrap();
        s.get_mut(id).grad = Tensor::vector(vec![f64::NAN]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        assert!(matches!(
            adam.step_group(&mut s, ParamGroup::Frame, 0.1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn other_groups_untouched() {
        let mut s = one_param(vec![1.0]);
        let u = s.add("u", ParamGroup::Utterance, Tensor::vector(vec![3.0])).unwrap();
        s.get_mut(u).grad = Tensor::vector(vec![1.0]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step_group(&mut s, ParamGroup::Frame, 0.1).unwrap();
        assert_eq!(s.value(u).data(), &[3.0]);
        assert_eq!(adam.group_steps(ParamGroup::Utterance), 0);
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::warmup_decay(1e-6, 1e-4, 1e-6, 10_000, 100_000);
        assert_eq!(s.lr_at(0), 1e-6);
        assert_abs_diff_eq!(s.lr_at(10_000), 1e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(s.lr_at(100_000), 1e-6, epsilon = 1e-18);
        assert_abs_diff_eq!(s.lr_at(5_000), 0.5 * (1e-6 + 1e-4), epsilon = 1e-18);
        assert_eq!(LrSchedule::constant(3e-3).lr_at(77), 3e-3);
    }
}
