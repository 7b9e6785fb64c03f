//! Adam with polynomial learning-rate decay.

use std::collections::BTreeMap;

use crate::autodiff::GradMap;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// `lr₀ · (1 − t/T)^power`, clamped at zero past `T`.
pub fn poly_lr(lr0: f64, step: u64, total: u64, power: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (1.0 - step as f64 / total as f64).max(0.0);
    lr0 * frac.powf(power)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub power: f64,
    pub total_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, power: 0.9, total_steps: 1 }
    }
}

/// Moment estimates per parameter, plus the number of updates taken.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        let c = &config;
        if !(c.lr > 0.0) || !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) || !(c.eps > 0.0) {
            return Err(Error::config(format!("invalid Adam settings {config:?}")));
        }
        Ok(Self { config, state: AdamState::default() })
    }

    pub fn with_state(config: AdamConfig, state: AdamState) -> Result<Self> {
        let mut a = Self::new(config)?;
        a.state = state;
        Ok(a)
    }

    /// Learning rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        poly_lr(self.config.lr, self.state.step, self.config.total_steps, self.config.power)
    }

    /// One update of every parameter, in name order. Parameters without a
    /// gradient entry are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap) -> Result<f64> {
        let lr = self.current_lr();
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.state.step as i32 + 1;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = store.get(&name)?;
            if g.shape() != p.shape() {
                return Err(Error::shape(format!("gradient {:?} for `{name}` {:?}", g.shape(), p.shape())));
            }
            let m = self.state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let gd = g.data();
            let m_new: Vec<f64> = m.data().iter().zip(gd).map(|(m, g)| beta1 * m + (1.0 - beta1) * g).collect();
            let v_new: Vec<f64> = v.data().iter().zip(gd).map(|(v, g)| beta2 * v + (1.0 - beta2) * g * g).collect();
            let updated: Vec<f64> = p
                .data()
                .iter()
                .zip(m_new.iter().zip(&v_new))
                .map(|(p, (m, v))| p - lr * (m / c1) / ((v / c2).sqrt() + eps))
                .collect();
            let shape = p.shape().to_vec();
            *m = Tensor::new(&shape, m_new)?;
            *v = Tensor::new(&shape, v_new)?;
            store.set(&name, Tensor::new(&shape, updated)?)?;
        }
        self.state.step += 1;
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn schedule_formula() {
        let lr = poly_lr(1e-4, 50, 100, 0.9);
        assert!((lr - 1e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert_eq!(poly_lr(1e-4, 0, 100, 0.9), 1e-4);
        assert_eq!(poly_lr(1e-4, 150, 100, 0.9), 0.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias correction makes the first update exactly lr·sign(g)
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let w = tape.var("w", store.get("w").unwrap().clone()).unwrap();
        let sq = tape.square(w);
        let l = tape.sum(sq);
        let grads = tape.backward(l).unwrap();
        let mut adam = Adam::new(AdamConfig { lr: 0.1, eps: 1e-12, total_steps: 10, ..Default::default() }).unwrap();
        adam.step(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-9 && (w[1] + 0.9).abs() < 1e-9);
        assert_eq!(adam.state.step, 1);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(Adam::new(AdamConfig { lr: 0.0, ..Default::default() }).is_err());
        assert!(Adam::new(AdamConfig { beta2: 1.0, ..Default::default() }).is_err());
    }
}
