//! Named parameter storage shared by every trainable module.
//!
//! Parameters live in a flat [`ParamStore`] keyed by hierarchical names
//! (`dssn.stage0.attn.q.weight`, ...). Modules keep [`ParamId`] handles.
//! A [`Fwd`] context binds parameters onto a tape once per forward pass, so a
//! module invoked twice in one pass (the segmenter runs on both stages)
//! accumulates gradients from both uses into a single slot.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: ArrayD<T>,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: String, value: ArrayD<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            frozen: false,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.entries[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Mark every parameter whose name starts with `prefix` (un)frozen.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.frozen = frozen;
            }
        }
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Copy values from one parameter group onto another whose names share
    /// the same suffix after the prefix. Shapes must match exactly.
    pub fn copy_group_values(&mut self, src_prefix: &str, dst_prefix: &str) {
        let pairs: Vec<(usize, usize)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with(src_prefix))
            .map(|(src, e)| {
                let suffix = &e.name[src_prefix.len()..];
                let dst_name = format!("{dst_prefix}{suffix}");
                let dst = *self
                    .by_name
                    .get(&dst_name)
                    .unwrap_or_else(|| panic!("missing destination parameter {dst_name}"));
                (src, dst)
            })
            .collect();
        for (src, dst) in pairs {
            assert_eq!(
                self.entries[src].value.shape(),
                self.entries[dst].value.shape(),
                "copy_group_values shape mismatch for {}",
                self.entries[src].name
            );
            let v = self.entries[src].value.clone();
            self.entries[dst].value = v;
        }
    }

    /// Bit-exact digest of a parameter group, in creation order.
    pub fn group_checksum(&self, prefix: &str) -> String {
        let mut hasher = Sha256::new();
        for e in &self.entries {
            if !e.name.starts_with(prefix) {
                continue;
            }
            hasher.update(e.name.as_bytes());
            for &x in e.value.iter() {
                hasher.update(x.to_f64().to_bits().to_le_bytes());
            }
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Scoped builder used while constructing modules.
pub struct Init<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha12Rng,
    path: Vec<String>,
}

impl<'a, T: Scalar> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha12Rng) -> Self {
        Init {
            store,
            rng,
            path: Vec::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.path.push(name.to_string());
        let r = f(self);
        self.path.pop();
        r
    }

    fn full_name(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path.join("."), name)
        }
    }

    pub fn param(&mut self, name: &str, value: ArrayD<T>) -> ParamId {
        self.store.insert(self.full_name(name), value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, ArrayD::ones(IxDyn(shape)))
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let v = super::init::trunc_normal::<T>(self.rng, shape, std);
        self.param(name, v)
    }
}

/// One forward pass: a tape plus lazy parameter binding.
pub struct Fwd<'s, T: Scalar> {
    pub tape: Tape<T>,
    pub store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
    train: bool,
}

impl<'s, T: Scalar> Fwd<'s, T> {
    pub fn train(store: &'s ParamStore<T>) -> Self {
        Fwd {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            train: true,
        }
    }

    pub fn eval(store: &'s ParamStore<T>) -> Self {
        Fwd {
            tape: Tape::no_grad(),
            store,
            bound: vec![None; store.len()],
            train: false,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Bind a parameter onto the tape (cached per pass).
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let e = self.store.get(id);
        let needs = self.train && !e.frozen;
        let v = self.tape.leaf(e.value.clone(), needs);
        self.bound[id.0] = Some(v);
        v
    }

    /// Run backward from `loss` and collect per-parameter gradients.
    /// Unbound or frozen parameters get `None` (i.e. exactly zero).
    pub fn backward_params(&self, loss: Var) -> ParamGrads<T> {
        let mut grads = self.tape.backward(loss);
        let mut by_param = vec![None; self.store.len()];
        for (i, bound) in self.bound.iter().enumerate() {
            if let Some(var) = bound {
                by_param[i] = grads.take(*var);
            }
        }
        ParamGrads { by_param }
    }
}

/// Gradients keyed by [`ParamId`].
pub struct ParamGrads<T: Scalar> {
    pub by_param: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros(len: usize) -> Self {
        ParamGrads {
            by_param: (0..len).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.by_param.get(id.0).and_then(|g| g.as_ref())
    }

    /// `self += w * other`, used to combine micro-batch chunks.
    pub fn axpy(&mut self, w: T, other: &ParamGrads<T>) {
        assert_eq!(self.by_param.len(), other.by_param.len());
        for (dst, src) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(s) = src {
                match dst {
                    Some(d) => *d += &(s * w),
                    slot @ None => *slot = Some(s * w),
                }
            }
        }
    }

    /// Euclidean norm over all stored gradients, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0f64;
        for g in self.by_param.iter().flatten() {
            for &x in g.iter() {
                let v = x.to_f64();
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, w: T) {
        for g in self.by_param.iter_mut().flatten() {
            g.mapv_inplace(|x| x * w);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.by_param
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }

    /// L2 norm restricted to parameters whose name starts with `prefix`.
    pub fn group_norm(&self, store: &ParamStore<T>, prefix: &str) -> f64 {
        let mut acc = 0f64;
        for id in store.ids_with_prefix(prefix) {
            if let Some(g) = self.get(id) {
                for &x in g.iter() {
                    let v = x.to_f64();
                    acc += v * v;
                }
            }
        }
        acc.sqrt()
    }
}
