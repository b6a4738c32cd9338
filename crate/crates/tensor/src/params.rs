use std::collections::BTreeMap;

use crate::{Grads, Scalar, Tape, Tensor, TensorError, Var};

/// Named `f32` parameters, ordered by name so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<f32>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copy of every parameter whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        Self {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts (overwriting) every parameter of `other`.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// FNV-1a over names, shapes and raw bits of every parameter under `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, v) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            feed(k.as_bytes());
            for &d in v.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            for &x in v.data() {
                feed(&x.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Puts every parameter under `prefix` on the tape, trainable or frozen.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, prefix: &str, trainable: bool) -> BoundParams {
        let mut vars = BTreeMap::new();
        for (k, v) in self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let value = v.cast::<T>();
            let var = if trainable { tape.param(value) } else { tape.constant(value) };
            vars.insert(k.clone(), var);
        }
        BoundParams { vars }
    }
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var, TensorError> {
        self.vars.get(name).copied().ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    /// Binds an existing tape variable under `name`.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn extend(&mut self, other: BoundParams) {
        self.vars.extend(other.vars);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Gathers the gradient of every bound parameter that received one.
    pub fn gradients<T: Scalar>(&self, grads: &Grads<T>) -> BTreeMap<String, Tensor<f32>> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.cast::<f32>())))
            .collect()
    }
}

/// Sums per-sample gradients into a batch gradient.
pub fn accumulate_grads(acc: &mut BTreeMap<String, Tensor<f32>>, step: BTreeMap<String, Tensor<f32>>) {
    for (k, g) in step {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every parameter present in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor<f32>>) -> Result<(), TensorError> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name).ok_or_else(|| TensorError::MissingParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch(format!("gradient for {name}")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
