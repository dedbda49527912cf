use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamKind, ParamStore};
use crate::error::{invalid, Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return invalid("softmax of an empty vector");
    }
    if v.iter().any(|x| !x.is_finite()) {
        return invalid("softmax input contains non-finite values");
    }
    Ok(softmax_masked(v))
}

/// Softmax that tolerates `-inf` entries (they get probability zero).
/// At least one entry must be finite.
pub(crate) fn softmax_masked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Learning rate of the inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64) -> Result<f64> {
    if step == 0 {
        return invalid("noam schedule is undefined at step 0");
    }
    if d_model == 0 || warmup == 0 {
        return invalid("noam schedule needs d_model >= 1 and warmup >= 1");
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// `λ · Σ|w|` over every [`ParamKind::Weight`] tensor; biases and gains are exempt.
pub fn l1_penalty(store: &ParamStore, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let total: f64 = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .map(|(_, p)| p.value.data().iter().map(|w| w.abs()).sum::<f64>())
        .sum();
    lambda * total
}

/// Adds the L1 subgradient `λ · sign(w)` to the gradient of every weight tensor.
pub fn add_l1_grad(store: &ParamStore, lambda: f64, grads: &mut Gradients) {
    if lambda == 0.0 {
        return;
    }
    for (id, p) in store.iter() {
        if p.kind != ParamKind::Weight {
            continue;
        }
        let g = grads.entry(store, id);
        for (gi, w) in g.data_mut().iter_mut().zip(p.value.data()) {
            if *w > 0.0 {
                *gi += lambda;
            } else if *w < 0.0 {
                *gi -= lambda;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    None,
    Noam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub warmup_steps: u64,
    pub d_model: usize,
    pub l1_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn constant(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            schedule: Schedule::None,
            warmup_steps: 0,
            d_model: 1,
            l1_factor: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn noam(d_model: usize, warmup_steps: u64) -> Self {
        Self { schedule: Schedule::Noam, warmup_steps, d_model, ..Self::constant(0.0) }
    }

    pub fn with_l1(mut self, l1_factor: f64) -> Self {
        self.l1_factor = l1_factor;
        self
    }
}

/// Adam with optional warmup/inverse-sqrt schedule.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if config.l1_factor < 0.0 || !config.l1_factor.is_finite() {
            return invalid("l1 factor must be finite and >= 0");
        }
        if config.schedule == Schedule::Noam && (config.warmup_steps == 0 || config.d_model == 0) {
            return invalid("noam schedule needs warmup_steps >= 1 and d_model >= 1");
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Ok(Self { config, step: 0, first: zeros.clone(), second: zeros })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate the next update will use.
    pub fn next_lr(&self) -> f64 {
        self.lr_at(self.step + 1)
    }

    fn lr_at(&self, step: u64) -> f64 {
        match self.config.schedule {
            Schedule::None => self.config.learning_rate,
            Schedule::Noam => noam_lr(step, self.config.d_model, self.config.warmup_steps)
                .expect("validated at construction"),
        }
    }

    /// Adds the configured L1 term to `grads`, then applies one Adam update.
    /// Parameters without a gradient are treated as having a zero gradient.
    /// Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore, grads: &mut Gradients) -> Result<f64> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} gradients / {} moment buffers for {} parameters",
                grads.len(),
                self.first.len(),
                store.len()
            )));
        }
        for (id, p) in store.iter() {
            if let Some(g) = grads.get(id) {
                if g.shape() != p.value.shape() {
                    return Err(Error::Shape(format!(
                        "gradient {:?} for parameter {} of shape {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    )));
                }
            }
        }
        add_l1_grad(store, self.config.l1_factor, grads);
        self.step += 1;
        let lr = self.lr_at(self.step);
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let bc1 = 1.0 - b1.powf(self.step as f64);
        let bc2 = 1.0 - b2.powf(self.step as f64);
        for (id, p) in store.iter_mut() {
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let g = grads.get(id).map(|t| t.data());
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}
