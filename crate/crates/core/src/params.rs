//! Named parameter storage and the per-pass forward context.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Trainable,
    /// State such as batch-norm running moments.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    kind: ParamKind,
}

/// Ordered, uniquely named tensors making up a model's state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: layer naming is fixed at construction.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, value, kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.kind(id) == ParamKind::Trainable)
    }

    /// Number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything one forward pass needs: the tape, read access to the
/// parameters, and a sink for running-statistic updates.
pub struct Ctx<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    updates: Vec<(ParamId, Tensor)>,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: Graph, store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            graph,
            store,
            bound: vec![None; store.len()],
            mode,
            track_grads: true,
            updates: Vec::new(),
        }
    }

    /// A context whose parameters are constants (no gradient bookkeeping).
    pub fn inference(store: &'a ParamStore) -> Self {
        let mut ctx = Self::new(Graph::new(), store, Mode::Eval);
        ctx.track_grads = false;
        ctx
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let trainable = self.track_grads && self.store.kind(id) == ParamKind::Trainable;
        let v = self.graph.leaf(self.store.get(id).clone(), trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound[id.0]
    }

    pub fn push_update(&mut self, id: ParamId, value: Tensor) {
        self.updates.push((id, value));
    }

    pub fn take_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.updates)
    }

    /// Per-parameter gradients in store order; unused parameters get zeros.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        self.store
            .trainable()
            .map(|id| {
                let g = self
                    .bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape()));
                (id, g)
            })
            .collect()
    }
}

/// Apply running-statistic updates collected during a training pass.
pub fn apply_updates(store: &mut ParamStore, updates: Vec<(ParamId, Tensor)>) {
    for (id, value) in updates {
        *store.get_mut(id) = value;
    }
}
