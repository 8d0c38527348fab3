use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Linear decay from the base rate to zero over `total_steps`, after an
/// optional linear warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(base_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("linear schedule needs total_steps > 0".into()));
        }
        if warmup_steps > total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {warmup_steps} exceeds total_steps {total_steps}"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps,
            total_steps,
        })
    }

    /// Rate applied by the update that follows `step` completed updates.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        let span = (self.total_steps - self.warmup_steps) as f64;
        if span == 0.0 {
            0.0
        } else {
            self.base_lr * remaining / span
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: usize,
}

/// Adam without weight decay, driven by a [`LinearSchedule`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub schedule: LinearSchedule,
    pub state: OptimizerState,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig, schedule: LinearSchedule) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            schedule,
            state: OptimizerState {
                first_moment: zeros.clone(),
                second_moment: zeros,
                step: 0,
            },
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.state.step)
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        let lr = self.schedule.lr_at(self.state.step);
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            if !p.requires_grad {
                continue;
            }
            let m = self.state.first_moment[i].data_mut();
            let v = self.state.second_moment[i].data_mut();
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                value[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add_full("theta", &[1], value);
        s.get_mut(id).grad = Tensor::full(&[1], grad);
        s
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut s = one_param(0.5, 1.0);
        let sched = LinearSchedule::new(2e-5, 0, 100).unwrap();
        let mut adam = Adam::new(&s, AdamConfig::default(), sched);
        adam.step(&mut s);
        // m_hat = 1, v_hat = 1 => delta = -lr / (1 + eps)
        let expect = 0.5 - 2e-5 / (1.0 + 1e-8);
        assert!((s.value(crate::tensor::ParamId(0)).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = one_param(0.5, 0.0);
        let mut adam = Adam::new(&s, AdamConfig::default(), LinearSchedule::new(1e-3, 0, 10).unwrap());
        adam.step(&mut s);
        assert_eq!(s.value(crate::tensor::ParamId(0)).item(), 0.5);
    }

    #[test]
    fn schedule_reaches_zero_and_freezes() {
        let sched = LinearSchedule::new(1e-3, 0, 4).unwrap();
        assert_eq!(sched.lr_at(0), 1e-3);
        assert_eq!(sched.lr_at(2), 5e-4);
        assert_eq!(sched.lr_at(4), 0.0);
        assert_eq!(sched.lr_at(9), 0.0);
        let mut s = one_param(0.5, 1.0);
        let mut adam = Adam::new(&s, AdamConfig::default(), sched);
        adam.state.step = 4;
        adam.step(&mut s);
        assert_eq!(s.value(crate::tensor::ParamId(0)).item(), 0.5);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let sched = LinearSchedule::new(1.0, 2, 6).unwrap();
        let lrs: Vec<f64> = (0..7).map(|t| sched.lr_at(t)).collect();
        assert_eq!(lrs, vec![0.0, 0.5, 1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn zero_total_steps_is_config_error() {
        assert!(matches!(LinearSchedule::new(1e-3, 0, 0), Err(Error::Config(_))));
    }
}
