use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use super::array::Array;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with gradient slots and Adam moments of identical shape.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    index: HashMap<String, usize>,
    values: Vec<Array>,
    grads: Vec<Array>,
    m: Vec<Array>,
    v: Vec<Array>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        let [r, c] = value.shape();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        self.values.push(value);
        self.grads.push(Array::zeros(r, c));
        self.m.push(Array::zeros(r, c));
        self.v.push(Array::zeros(r, c));
        Ok(ParamId(id))
    }

    /// Add a parameter drawn from `N(0, std^2)`.
    pub fn add_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.add(name, Array::from_vec(rows, cols, data)?)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Array {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.grads[id.0]
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// `grad[id] += scale * g`.
    pub fn accumulate(&mut self, id: ParamId, g: &Array, scale: f64) {
        let slot = &mut self.grads[id.0];
        debug_assert_eq!(slot.shape(), g.shape());
        for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
            *a += scale * b;
        }
    }

    /// Global L2 norm of all gradient slots.
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.scale_assign(s);
        }
    }

    /// One AdamW step: decoupled decay `p -= lr * wd * p`, then the
    /// bias-corrected Adam update from the current gradient slots.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for k in 0..self.values.len() {
            let p = self.values[k].data_mut();
            let g = self.grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for i in 0..p.len() {
                p[i] -= cfg.lr * cfg.weight_decay * p[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Array::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let (mut s, id) = single(0.7);
        s.adam_step(&AdamConfig { weight_decay: 0.0, ..Default::default() });
        assert_eq!(s.value(id).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let (mut s, id) = single(0.0);
        s.grad_mut(id).data_mut()[0] = 1.0;
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        s.adam_step(&cfg);
        // m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + eps)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let (mut s, id) = single(2.0);
        let cfg = AdamConfig { lr: 0.1, weight_decay: 0.01, ..Default::default() };
        s.adam_step(&cfg);
        assert!((s.value(id).item() - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn names_are_unique() {
        let (mut s, _) = single(1.0);
        assert!(s.add("w", Array::scalar(1.0)).is_err());
        assert_eq!(s.id("w"), Some(ParamId(0)));
        assert_eq!(s.grad(ParamId(0)).shape(), s.value(ParamId(0)).shape());
    }
}
