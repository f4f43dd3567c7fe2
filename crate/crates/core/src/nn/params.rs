use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor2D;
use crate::error::{Error, Result};
use crate::rng::{fnv1a, stream_rng, Stream};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor2D,
    pub grad: Tensor2D,
    /// Adam first moment.
    pub m: Tensor2D,
    /// Adam second moment.
    pub v: Tensor2D,
    pub frozen: bool,
}

/// Named parameters with gradient accumulators and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    /// Number of optimizer steps taken so far.
    pub step: u64,
}

/// How a new parameter is initialised.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))` with `(fan_in, fan_out) = (rows, cols)`.
    Glorot,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; the init stream is derived from `seed` and `name`.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init, seed: u64) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Tensor2D::zeros(rows, cols),
            Init::Glorot => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let mut rng = stream_rng(seed, Stream::Init, fnv1a(name.as_bytes()));
                let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor2D::raw(rows, cols, data)
            }
        };
        self.insert(name, value)
    }

    pub fn insert(&mut self, name: &str, value: Tensor2D) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name '{name}'")));
        }
        let (r, c) = value.shape();
        let id = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor2D::zeros(r, c),
            m: Tensor2D::zeros(r, c),
            v: Tensor2D::zeros(r, c),
            value,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2D {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().map(|p| p.grad.sum_sq()).sum::<f64>().sqrt()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Tensor2D) {
        self.params[id.0].grad.add_assign(g);
    }
}

/// One Adam update with bias correction for 1-based `step`; gradients are
/// zeroed afterwards. Frozen parameters keep their values and moments.
pub fn optimizer_step(store: &mut ParamStore, lr: f64, step: u64) {
    let step = step.max(1) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(step);
    let c2 = 1.0 - ADAM_BETA2.powi(step);
    for p in store.params.iter_mut() {
        if !p.frozen {
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((x, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        p.grad.fill(0.0);
    }
}

impl ParamStore {
    /// Advances the internal step counter and applies [`optimizer_step`].
    pub fn adam_step(&mut self, lr: f64) {
        self.step += 1;
        let step = self.step;
        optimizer_step(self, lr, step);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", 2, 2, Init::Glorot, 1).unwrap();
        assert!(s.add("w", 1, 1, Init::Zeros, 1).is_err());
    }

    #[test]
    fn glorot_bounds_and_per_name_streams() {
        let mut s = ParamStore::new();
        let a = s.add("a", 8, 8, Init::Glorot, 3).unwrap();
        let b = s.add("b", 8, 8, Init::Glorot, 3).unwrap();
        let bound = (6.0f64 / 16.0).sqrt();
        assert!(s.value(a).max_abs() <= bound);
        assert_ne!(s.value(a), s.value(b));
        let mut t = ParamStore::new();
        let a2 = t.add("a", 8, 8, Init::Glorot, 3).unwrap();
        assert_eq!(s.value(a), t.value(a2));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let w = s.insert("w", Tensor2D::filled(1, 3, 1.0)).unwrap();
        s.get_mut(w).grad = Tensor2D::from_vec(1, 3, vec![0.5, -2.0, 0.0]).unwrap();
        s.adam_step(0.01);
        let v = s.value(w).data();
        assert!((v[0] - 0.99).abs() < 1e-6);
        assert!((v[1] - 1.01).abs() < 1e-6);
        assert_eq!(v[2], 1.0);
        assert_eq!(s.grad(w).max_abs(), 0.0);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut s = ParamStore::new();
        let w = s.insert("w", Tensor2D::filled(1, 1, 1.0)).unwrap();
        s.set_frozen(w, true);
        s.get_mut(w).grad = Tensor2D::filled(1, 1, 3.0);
        s.adam_step(0.1);
        assert_eq!(s.value(w).data()[0], 1.0);
        assert_eq!(s.grad(w).data()[0], 0.0);
    }
}
