//! Adam with decoupled weight decay, heavy-ball momentum, and the warmup +
//! cosine schedule.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub shape: Vec<usize>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(shape: &[usize], cfg: AdamConfig) -> Self {
        let n = shape.iter().product();
        AdamState {
            shape: shape.to_vec(),
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// One bias-corrected Adam step with decoupled weight decay.
pub fn adam_update(param: &mut Tensor, grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    if param.shape() != state.shape.as_slice() || grad.len() != param.numel() {
        return Err(Error::shape(format!(
            "adam: param {:?}, state {:?}, grad of {}",
            param.shape(),
            state.shape,
            grad.len()
        )));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, g), m), v) in param.data_mut().iter_mut().zip(grad).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * (m_hat / (v_hat.sqrt() + state.eps) + state.weight_decay * *p);
    }
    Ok(())
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        Adam { states: store.iter().map(|(_, _, t)| AdamState::new(t.shape(), cfg)).collect() }
    }

    pub fn states(&self) -> &[AdamState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [AdamState] {
        &mut self.states
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.states.len() != store.len() {
            return Err(Error::shape("optimizer, store and gradients disagree on parameter count"));
        }
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), st) in ids.into_iter().zip(grads).zip(&mut self.states) {
            adam_update(store.get_mut(id), g, st, lr)?;
        }
        Ok(())
    }
}

/// Heavy-ball SGD: `v = beta v + g + wd p`, `p -= lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Momentum {
    pub beta: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(store: &ParamStore, beta: f64, weight_decay: f64) -> Self {
        Momentum { beta, weight_decay, velocity: store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.velocity.len() != store.len() {
            return Err(Error::shape("optimizer, store and gradients disagree on parameter count"));
        }
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), vel) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let p = store.get_mut(id);
            if g.len() != p.numel() {
                return Err(Error::shape(format!("momentum: gradient of {} for {} values", g.len(), p.numel())));
            }
            for ((x, g), v) in p.data_mut().iter_mut().zip(g).zip(vel.iter_mut()) {
                *v = self.beta * *v + g + self.weight_decay * *x;
                *x -= lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Adam(AdamConfig),
    Momentum { beta: f64, weight_decay: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam(AdamConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    Momentum(Momentum),
}

impl Optimizer {
    pub fn new(store: &ParamStore, cfg: OptimizerConfig) -> Self {
        match cfg {
            OptimizerConfig::Adam(c) => Optimizer::Adam(Adam::new(store, c)),
            OptimizerConfig::Momentum { beta, weight_decay } => Optimizer::Momentum(Momentum::new(store, beta, weight_decay)),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(store, grads, lr),
            Optimizer::Momentum(m) => m.step(store, grads, lr),
        }
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { peak_lr: 1.5e-4, warmup_steps: 40, total_steps: 1600, min_lr: 0.0 }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::invalid("warmup must be shorter than the schedule"));
        }
        if step > self.total_steps {
            return Err(Error::invalid(format!("step {step} beyond schedule of {}", self.total_steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        let progress = (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        Ok(self.min_lr + (self.peak_lr - self.min_lr) * cosine)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamConfig {
        AdamConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.0 }
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut st = AdamState::new(&[3], no_decay());
        adam_update(&mut p, &[0.0; 3], &mut st, 0.1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0)).unwrap();
        let mut opt = Optimizer::new(&store, OptimizerConfig::Momentum { beta: 0.5, weight_decay: 0.0 });
        opt.step(&mut store, &[vec![1.0]], 0.1).unwrap();
        opt.step(&mut store, &[vec![1.0]], 0.1).unwrap();
        // v = 1 then 1.5
        assert!((store.get(id).data()[0] - (1.0 - 0.1 - 0.15)).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2 on the first step, so the update is lr * g/(|g| + eps).
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(&[], no_decay());
        adam_update(&mut p, &[1.0], &mut st, 0.1).unwrap();
        let want = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn rejects_negative_lr_and_bad_shapes() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[2], no_decay());
        assert!(adam_update(&mut p, &[0.0; 2], &mut st, -1.0).is_err());
        assert!(adam_update(&mut p, &[0.0; 3], &mut st, 0.1).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule { peak_lr: 1.5e-4, warmup_steps: 40, total_steps: 1600, min_lr: 0.0 };
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(40).unwrap(), 1.5e-4);
        assert!(s.lr_at(1600).unwrap().abs() < 1e-20);
        assert!((s.lr_at(20).unwrap() - 0.75e-4).abs() < 1e-18);
        assert!(s.lr_at(1601).is_err());
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = LrSchedule { peak_lr: 1.0, warmup_steps: 5, total_steps: 50, min_lr: 0.1 };
        let lrs: Vec<f64> = (5..=50).map(|i| s.lr_at(i).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!((lrs.last().unwrap() - 0.1).abs() < 1e-15);
    }
}
