//! Named parameters with optimizer state, and the AdamW update.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{NnError, Tensor};

/// A trainable tensor with its first/second moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.numel();
        Parameter {
            name: name.into(),
            value,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// Ordered collection of parameters; iteration order is insertion order,
/// which keeps checkpoints and updates deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, param: Parameter) {
        assert!(
            !self.index.contains_key(&param.name),
            "duplicate parameter '{}'",
            param.name
        );
        self.index.insert(param.name.clone(), self.params.len());
        self.params.push(param);
    }

    /// Registers a tensor initialized uniformly in [-bound, bound] from
    /// the store's RNG stream.
    pub fn init_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(Parameter::new(name, Tensor::new(shape, data)));
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(Parameter::new(name, Tensor::zeros(shape)));
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        let i = *self.index.get(name)?;
        Some(&mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Deterministic RNG stream for initializing this store.
    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One AdamW step over every parameter in the store. Decoupled weight
/// decay is applied first (theta -= lr * wd * theta), then the
/// bias-corrected Adam update. Parameters absent from `grads` see a zero
/// gradient but still decay.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &HashMap<String, Vec<f64>>,
    cfg: &AdamWConfig,
) -> Result<(), NnError> {
    // Validate everything before mutating anything.
    for p in store.iter() {
        if let Some(g) = grads.get(&p.name) {
            if g.len() != p.value.numel() {
                return Err(NnError::ShapeMismatch {
                    op: "adamw_step",
                    detail: format!(
                        "gradient for '{}' has {} entries, parameter has {}",
                        p.name,
                        g.len(),
                        p.value.numel()
                    ),
                });
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    let zero: Vec<f64> = Vec::new();
    for p in store.iter_mut() {
        let g = grads.get(&p.name).unwrap_or(&zero);
        p.step += 1;
        let t = p.step as f64;
        let bc1 = 1.0 - cfg.beta1.powf(t);
        let bc2 = 1.0 - cfg.beta2.powf(t);
        for i in 0..p.value.numel() {
            let gi = g.get(i).copied().unwrap_or(0.0);
            p.value.data[i] -= cfg.lr * cfg.weight_decay * p.value.data[i];
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * gi;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = p.m[i] / bc1;
            let v_hat = p.v[i] / bc2;
            p.value.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
