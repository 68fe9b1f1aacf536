use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::TensorError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameter ownership groups. Optimizers and freezing act per group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Codec,
    Codebook,
    Generator,
    TokenDecoder,
    Discriminator,
    Extractor,
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Codec,
        Group::Codebook,
        Group::Generator,
        Group::TokenDecoder,
        Group::Discriminator,
        Group::Extractor,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Set of groups whose parameters receive gradients on a tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GroupMask(u8);

impl GroupMask {
    pub const NONE: GroupMask = GroupMask(0);

    pub fn of(groups: &[Group]) -> Self {
        GroupMask(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn without(self, g: Group) -> Self {
        GroupMask(self.0 & !g.bit())
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<T>,
}

/// Named parameter tensors. Model structs hold only [`ParamId`]s into it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    entries: Vec<ParamEntry<T>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, group, value });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), TensorError> {
        let cur = &mut self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "param_set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *cur = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), group: e.group, value: e.value.cast() })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn count_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// SHA-256 over names and raw little-endian values of the selected groups.
    pub fn hash_groups(&self, groups: &[Group]) -> String {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| groups.contains(&e.group)) {
            h.update(e.name.as_bytes());
            for v in e.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Weight initializers.
pub mod init {
    use super::*;

    pub fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
    }

    /// Normal with std `gain / sqrt(fan_in)`.
    pub fn fan_in<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
        normal(rng, shape, gain / (fan_in as f64).sqrt())
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug)]
pub struct Grads<T = f32> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new(n_params: usize) -> Self {
        Self { slots: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.iter().all(Option::is_none)
    }

    pub(crate) fn add_raw(&mut self, id: ParamId, shape: &[usize], g: &[T]) {
        match &mut self.slots[id.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a = *a + *b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(shape.to_vec(), g.to_vec()).expect("grad shape"));
            }
        }
    }

    /// Elementwise sum, in call order.
    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (i, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.add_raw(ParamId(i), g.shape(), g.data());
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for t in self.slots.iter_mut().flatten() {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().flatten().map(|t| t.sq_norm_f64()).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|t| t.is_finite())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.slots.iter().enumerate().filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Drop gradients for parameters outside the mask.
    pub fn retain_groups(&mut self, store: &ParamStore<T>, mask: GroupMask) {
        for (i, slot) in self.slots.iter_mut().enumerate() {
            if !mask.contains(store.entries[i].group) {
                *slot = None;
            }
        }
    }
}
