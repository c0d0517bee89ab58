//! Adam with a step-decay learning rate.

use crate::error::{Error, Result};
use crate::model::OptimizerState;
use crate::nn::ParamStore;
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs between learning-rate halvings.
    pub halving_period: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// LR patch side.
    pub patch: usize,
    pub seed: u64,
    /// Global gradient-norm bound, off when `None`.
    pub clip_norm: Option<f64>,
    pub augment: bool,
    /// Epochs between checkpoints, off when 0.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            halving_period: 200,
            steps_per_epoch: 1000,
            batch_size: 16,
            patch: 48,
            seed: 0,
            clip_norm: None,
            augment: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("eps", self.eps),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(Error::config("Adam betas must be below 1"));
        }
        for (name, v) in [
            ("halving_period", self.halving_period),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch_size", self.batch_size),
            ("patch", self.patch),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(())
    }

    pub fn epoch_of(&self, step: u64) -> u64 {
        step / self.steps_per_epoch as u64
    }

    pub fn lr_at_epoch(&self, epoch: u64) -> f64 {
        schedule(self.lr, epoch, self.halving_period as u64)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr_at_epoch(self.epoch_of(step))
    }
}

/// `base * 2^-floor(epoch / period)`.
pub fn schedule(base: f64, epoch: u64, period: u64) -> f64 {
    base * 0.5f64.powi((epoch / period).min(i32::MAX as u64) as i32)
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Element>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter().map(|v| v.as_f64() * v.as_f64()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for p in store.iter_mut() {
            if p.tensor.grad().is_some() {
                for g in p.tensor.grad_mut() {
                    *g = T::from_f64_lossy(g.as_f64() * k);
                }
            }
        }
    }
    norm
}

/// Bias-corrected Adam over every parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam<T: Element> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Updates every parameter; a non-finite gradient aborts before any
    /// change and names the parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(bad) = store
            .iter()
            .find(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.as_f64().is_finite())))
        {
            return Err(Error::numeric(format!("non-finite gradient in {}", bad.name)));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = p.tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            for (((w, g), m), v) in p.tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                let mn = b1 * m.as_f64() + (1.0 - b1) * g;
                let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = T::from_f64_lossy(mn);
                *v = T::from_f64_lossy(vn);
                let mhat = m.as_f64() / c1;
                let vhat = v.as_f64() / c2;
                *w = T::from_f64_lossy(w.as_f64() - lr * mhat / (vhat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

impl Adam<f32> {
    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_state(state: OptimizerState, store: &ParamStore<f32>, cfg: &TrainConfig) -> Result<Self> {
        let sizes: Vec<usize> = store.iter().map(|p| p.tensor.numel()).collect();
        let matches = |xs: &[Vec<f32>]| xs.len() == sizes.len() && xs.iter().zip(&sizes).all(|(x, &n)| x.len() == n);
        if !matches(&state.m) || !matches(&state.v) {
            return Err(Error::config("optimizer state does not match the model parameters"));
        }
        Ok(Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: state.t,
            m: state.m,
            v: state.v,
        })
    }
}
