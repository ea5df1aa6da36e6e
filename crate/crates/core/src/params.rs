//! Named parameter storage shared by layers, optimizers and checkpoints.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Parameter groups of the dual-encoder network. Freezing acts on groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "E_theta")]
    EncoderTheta,
    #[serde(rename = "E_phi")]
    EncoderPhi,
    #[serde(rename = "D_theta")]
    DecoderTheta,
    #[serde(rename = "head")]
    Head,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::EncoderTheta,
        Group::EncoderPhi,
        Group::DecoderTheta,
        Group::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::EncoderTheta => "E_theta",
            Group::EncoderPhi => "E_phi",
            Group::DecoderTheta => "D_theta",
            Group::Head => "head",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

pub struct ParamEntry<E: Element> {
    pub name: String,
    pub group: Group,
    pub value: Tensor<E>,
}

/// Flat, ordered store of every learnable tensor of a model.
pub struct ParamStore<E: Element> {
    entries: Vec<ParamEntry<E>>,
    frozen: BTreeSet<Group>,
}

impl<E: Element> fmt::Debug for ParamStore<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.entries.len())
            .field("values", &self.total_count())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Deep copy: the clone owns fresh leaves and shares no gradient slots.
impl<E: Element> Clone for ParamStore<E> {
    fn clone(&self) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    value: e.value.detach_with_grad(e.value.requires_grad()),
                })
                .collect(),
            frozen: self.frozen.clone(),
        }
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let tracked = !self.frozen.contains(&group);
        self.entries.push(ParamEntry {
            name,
            group,
            value: value.detach_with_grad(tracked),
        });
        ParamId(self.entries.len() - 1)
    }

    /// Glorot-style uniform tensor with limit sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64_lossy(rng.gen_range(-limit..=limit)))
            .collect();
        self.add(name, group, Tensor::from_vec(data, shape).expect("glorot shape"))
    }

    pub fn constant(
        &mut self,
        name: impl Into<String>,
        group: Group,
        shape: &[usize],
        value: f64,
    ) -> ParamId {
        self.add(name, group, Tensor::full(shape, E::from_f64_lossy(value)))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<E>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Replaces a parameter's values with a fresh leaf.
    pub fn set_values(&mut self, id: ParamId, data: Vec<E>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        let tracked = !self.frozen.contains(&entry.group);
        entry.value = Tensor::from_vec(data, entry.value.shape())?.requires_grad_(tracked);
        Ok(())
    }

    pub fn zero_grad(&self) {
        self.entries.iter().for_each(|e| e.value.zero_grad());
    }

    pub fn freeze(&mut self, group: Group) {
        self.frozen.insert(group);
        self.retrack();
    }

    pub fn unfreeze(&mut self, group: Group) {
        self.frozen.remove(&group);
        self.retrack();
    }

    pub fn set_frozen(&mut self, groups: impl IntoIterator<Item = Group>) {
        self.frozen = groups.into_iter().collect();
        self.retrack();
    }

    fn retrack(&mut self) {
        for e in &mut self.entries {
            let tracked = !self.frozen.contains(&e.group);
            if e.value.requires_grad() != tracked {
                e.value = e.value.detach_with_grad(tracked);
            }
        }
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen.contains(&group)
    }

    pub fn frozen_groups(&self) -> Vec<Group> {
        self.frozen.iter().copied().collect()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids()
            .filter(|id| !self.frozen.contains(&self.entries[id.0].group))
            .collect()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn group_count(&self, group: Group) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().iter().map(|&id| self.get(id).numel()).sum()
    }

    /// Hash of the exact bit patterns of a group's parameters.
    pub fn fingerprint(&self, group: Option<Group>) -> u64 {
        let mut h = DefaultHasher::new();
        for e in self.entries.iter().filter(|e| group.is_none_or(|g| e.group == g)) {
            e.name.hash(&mut h);
            for v in e.value.data() {
                v.to_f64_lossy().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn snapshot(&self) -> BTreeMap<String, Vec<E>> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.to_vec()))
            .collect()
    }

    /// Same parameters with element type `F`; frozen groups are kept.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        out.frozen = self.frozen.clone();
        for e in &self.entries {
            out.add(e.name.clone(), e.group, e.value.cast());
        }
        out
    }
}
