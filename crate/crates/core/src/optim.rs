//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub name: String,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParameterStore<T>) -> Self {
        let moments = store
            .iter()
            .map(|e| Moments {
                name: e.name.clone(),
                m: Tensor::zeros(e.value.shape()),
                v: Tensor::zeros(e.value.shape()),
            })
            .collect();
        Self { cfg, step: 0, moments }
    }

    /// Restores saved state; moments must line up with the store.
    pub fn from_state(cfg: AdamWConfig, step: u64, moments: Vec<Moments<T>>, store: &ParameterStore<T>) -> Result<Self> {
        if moments.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} optimizer moments for {} parameters",
                moments.len(),
                store.len()
            )));
        }
        for (mo, e) in moments.iter().zip(store.iter()) {
            if mo.name != e.name || mo.m.shape() != e.value.shape() || mo.v.shape() != e.value.shape() {
                return Err(Error::InvalidArgument(format!(
                    "optimizer state for {:?} does not match parameter {:?}",
                    mo.name, e.name
                )));
            }
        }
        Ok(Self { cfg, step, moments })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[Moments<T>] {
        &self.moments
    }

    /// Applies one update from the gradients held in `store`. Frozen entries
    /// are skipped; any non-finite trainable gradient aborts the whole step
    /// before anything changes.
    pub fn step(&mut self, store: &mut ParameterStore<T>) -> Result<()> {
        if self.moments.len() != store.len() {
            return Err(Error::InvalidArgument("parameter store changed since optimizer creation".into()));
        }
        if let Some(bad) = store.iter().find(|e| !e.frozen && !e.grad.all_finite()) {
            return Err(Error::NonFiniteGradient(bad.name.clone()));
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one, lr, eps) = (T::one(), T::of(c.lr), T::of(c.eps));
        let decay = one - T::of(c.lr * c.weight_decay);
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        for (e, mo) in store.iter_mut().zip(&mut self.moments) {
            if e.frozen {
                continue;
            }
            let (theta, g) = (e.value.data_mut(), e.grad.data());
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for i in 0..theta.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                theta[i] = theta[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(theta: f64, grad: f64, frozen: bool) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::scalar(theta), frozen).unwrap();
        s.get_mut("p").unwrap().grad = Tensor::scalar(grad);
        s
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let cfg = AdamWConfig::default();
        let mut s = scalar_store(0.7, 1.0, false);
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let want = 0.7 - cfg.lr * 1.0 / (1.0 + cfg.eps) - cfg.lr * cfg.weight_decay * 0.7;
        assert!((s.value("p").unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn second_step_matches_recurrence() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut s = scalar_store(0.0, 2.0, false);
        let mut opt = AdamW::new(cfg, &s);
        opt.step(&mut s).unwrap();
        s.get_mut("p").unwrap().grad = Tensor::scalar(-1.0);
        opt.step(&mut s).unwrap();
        let (b1, b2) = (0.9f64, 0.999f64);
        let (m1, v1) = (0.1 * 2.0, 0.001 * 4.0);
        let th1 = -cfg.lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + cfg.eps);
        let (m2, v2) = (b1 * m1 + 0.1 * -1.0, b2 * v1 + 0.001 * 1.0);
        let th2 = th1 - cfg.lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + cfg.eps);
        assert!((s.value("p").unwrap().item() - th2).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut s = scalar_store(1.25, 0.0, false);
        let mut opt = AdamW::new(cfg, &s);
        for _ in 0..3 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.value("p").unwrap().item(), 1.25);
    }

    #[test]
    fn frozen_entries_untouched() {
        let mut s = scalar_store(0.3, 5.0, true);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.value("p").unwrap().item().to_bits(), 0.3f64.to_bits());
    }

    #[test]
    fn non_finite_gradient_aborts_before_any_change() {
        let mut s = scalar_store(0.3, 1.0, false);
        s.insert("q", Tensor::scalar(0.5), false).unwrap();
        s.get_mut("q").unwrap().grad = Tensor::scalar(f64::NAN);
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        assert!(matches!(opt.step(&mut s), Err(Error::NonFiniteGradient(n)) if n == "q"));
        assert_eq!(s.value("p").unwrap().item(), 0.3);
        assert_eq!(opt.step_count(), 0);
    }
}
