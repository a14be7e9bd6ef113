use serde::{Deserialize, Serialize};

use crate::ndcore::{Graph, Rng, Tensor, Var};

/// Ownership label of a trainable tensor.
///
/// `Joint` tensors (the shared projection of a fusion module) feed both
/// branches' gates and therefore belong to both fusion groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Branch0,
    Branch1,
    Joint,
    Gate0,
    Gate1,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Branch0 => "branch0",
            ParamGroup::Branch1 => "branch1",
            ParamGroup::Joint => "joint",
            ParamGroup::Gate0 => "gate0",
            ParamGroup::Gate1 => "gate1",
        }
    }

    /// The same label with modality indices exchanged.
    pub fn mirrored(self) -> Self {
        match self {
            ParamGroup::Branch0 => ParamGroup::Branch1,
            ParamGroup::Branch1 => ParamGroup::Branch0,
            ParamGroup::Gate0 => ParamGroup::Gate1,
            ParamGroup::Gate1 => ParamGroup::Gate0,
            ParamGroup::Joint => ParamGroup::Joint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Flat, slot-indexed list of every trainable tensor of a network.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        self.entries.len() - 1
    }

    pub fn push_init(&mut self, name: impl Into<String>, group: ParamGroup, shape: &[usize], fan_in: usize, rng: &mut Rng) -> usize {
        let t = crate::ndcore::init_fan_in(shape, fan_in, rng);
        self.push(name, group, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, slot: usize) -> &Tensor {
        &self.entries[slot].value
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor {
        &mut self.entries[slot].value
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.entries.iter().map(|e| e.value.shape()).collect()
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Register every tensor as a trainable leaf; returns vars by slot.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.entries.iter().enumerate().map(|(i, e)| g.param(i, e.value.clone())).collect()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Replace all values; shapes must match slot by slot.
    pub fn set_tensors(&mut self, values: Vec<Tensor>) {
        assert_eq!(values.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(values) {
            assert_eq!(e.value.shape(), v.shape(), "{}", e.name);
            e.value = v;
        }
    }

    pub fn slots_in(&self, groups: &[ParamGroup]) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| groups.contains(&e.group))
            .map(|(i, _)| i)
            .collect()
    }
}
