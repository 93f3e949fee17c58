use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers follow the store's
/// parameter order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = |p: &crate::params::Parameter| Matrix::zeros(p.values.rows(), p.values.cols());
        Self {
            config,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients held in `store`. Fails
    /// without touching any value when a gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        for (i, p) in store.iter_mut().enumerate() {
            adam_update(
                p.values.data_mut(),
                p.grad.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                lr,
                self.config,
                self.step,
            );
        }
        Ok(())
    }
}

/// In-place Adam update of one parameter buffer at 1-based `step`.
pub fn adam_update(
    values: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    cfg: AdamConfig,
    step: u64,
) {
    debug_assert!(step >= 1);
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for j in 0..values.len() {
        let g = grads[j];
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[j] / bc1;
        let v_hat = v[j] / bc2;
        values[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Linear warmup to `peak` over `warmup` steps, then decay with the
/// inverse square root of the step.
pub fn inverse_sqrt_lr(step: u64, peak: f64, warmup: u64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    if step < warmup {
        peak * step / warmup
    } else {
        peak * (warmup / step).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamStore};
    use crate::rng::RngState;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = RngState::new(5);
        s.add("a", 2, 3, Init::Normal { std: 1.0 }, &mut rng).unwrap();
        s.add("b", 1, 4, Init::Normal { std: 1.0 }, &mut rng).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store();
        let before = s.clone();
        let mut opt = Adam::new(&s, AdamConfig::default());
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store();
        let before = s.clone();
        for p in s.iter_mut() {
            p.grad.data_mut().fill(0.37);
        }
        let mut opt = Adam::new(&s, AdamConfig::default());
        opt.step(&mut s, 1e-3).unwrap();
        for (a, b) in s.iter().zip(before.iter()) {
            for (x, y) in a.values.data().iter().zip(b.values.data()) {
                let moved = y - x;
                assert!((moved - 1e-3).abs() < 1e-10, "moved {moved}");
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store();
        let id = s.id("b").unwrap();
        s.get_mut(id).grad.data_mut()[2] = f64::NAN;
        let before = s.clone();
        let mut opt = Adam::new(&s, AdamConfig::default());
        match opt.step(&mut s, 0.1) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "b"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.iter().next(), before.iter().next());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = store();
            let mut opt = Adam::new(&s, AdamConfig::default());
            for step in 0..20 {
                for p in s.iter_mut() {
                    let vals: Vec<f64> = p.values.data().to_vec();
                    for (g, v) in p.grad.data_mut().iter_mut().zip(vals) {
                        *g = v * 0.5 + step as f64 * 0.01;
                    }
                }
                opt.step(&mut s, 0.01).unwrap();
            }
            s
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(b.iter()) {
            let xb: Vec<u64> = x.values.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.values.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn warmup_schedule_shape() {
        assert!((inverse_sqrt_lr(1, 1.0, 100) - 0.01).abs() < 1e-15);
        assert_eq!(inverse_sqrt_lr(100, 1.0, 100), 1.0);
        assert!((inverse_sqrt_lr(400, 1.0, 100) - 0.5).abs() < 1e-15);
    }
}
