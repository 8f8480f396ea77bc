//! Named parameter storage shared by networks and optimizers, plus the
//! binder that registers parameters as tape leaves during a forward pass.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by the optimizer and differentiated through.
    Learnable,
    /// Persistent state (running statistics); never differentiated.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Flat arena of named tensors. Layers hold `ParamId` indices into it, so
/// the set can be iterated for optimizer steps and checkpointing without
/// walking the module tree.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, kind });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate()
    }

    pub fn learnable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Learnable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn learnable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Learnable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Copy of all learnable values, for restore after virtual steps.
    pub fn snapshot_learnable(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Learnable)
            .map(|(i, e)| (i, e.value.data().to_vec()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(ParamId, Vec<f64>)]) {
        for (id, data) in snapshot {
            self.entries[*id].value.data_mut().copy_from_slice(data);
        }
    }
}

/// Forward-pass options shared across layers.
#[derive(Debug, Clone, Copy)]
pub struct BindOpts {
    /// Register learnable parameters as differentiable leaves.
    pub track_weights: bool,
    /// Normalization layers use statistics of the current batch.
    pub training: bool,
    /// Collect running-statistic updates from this pass.
    pub update_stats: bool,
}

impl BindOpts {
    pub fn inference() -> Self {
        BindOpts { track_weights: false, training: false, update_stats: false }
    }

    pub fn training_step() -> Self {
        BindOpts { track_weights: true, training: true, update_stats: true }
    }
}

/// Lazily registers parameters on a tape, once each per forward pass, and
/// records which node represents which parameter so gradients can be
/// mapped back after `backward`.
pub struct TapeBind<'a> {
    pub tape: &'a mut Tape,
    params: &'a ParamSet,
    pub opts: BindOpts,
    bound: Vec<Option<NodeId>>,
    overrides: HashMap<ParamId, NodeId>,
    stat_updates: Vec<(ParamId, Vec<f64>)>,
}

impl<'a> TapeBind<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamSet, opts: BindOpts) -> Self {
        let bound = vec![None; params.len()];
        TapeBind { tape, params, opts, bound, overrides: HashMap::new(), stat_updates: Vec::new() }
    }

    /// Substitute an existing node for a parameter (gradient checking).
    pub fn override_param(&mut self, id: ParamId, node: NodeId) {
        self.overrides.insert(id, node);
    }

    pub fn node(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.overrides.get(&id) {
            return n;
        }
        if let Some(n) = self.bound[id] {
            return n;
        }
        let requires = self.opts.track_weights && self.params.kind(id) == ParamKind::Learnable;
        let n = self.tape.leaf(self.params.value(id).clone(), requires);
        self.bound[id] = Some(n);
        n
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        self.params.value(id)
    }

    pub fn push_stat_update(&mut self, id: ParamId, data: Vec<f64>) {
        if self.opts.update_stats {
            self.stat_updates.push((id, data));
        }
    }

    /// (ParamId, NodeId) pairs for every parameter bound this pass.
    pub fn bound_nodes(&self) -> Vec<(ParamId, NodeId)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|n| (i, n)))
            .collect()
    }

    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Vec<f64>)> {
        std::mem::take(&mut self.stat_updates)
    }
}
