//! Named parameter registry and the per-forward binding of parameters to tape leaves.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{ensure, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Accumulated gradient; `None` until the first accumulation.
    pub grad: Option<Tensor>,
    /// Running statistics and other buffers are stored but never optimized.
    pub trainable: bool,
}

/// Parameters keyed by canonical layer names, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        ensure!(!self.index.contains_key(&name), "duplicate parameter name {name:?}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.value.shape(), grad.shape());
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        ensure!(
            p.value.shape() == value.shape(),
            "parameter {:?} has shape {:?}, got {:?}",
            p.name,
            p.value.shape(),
            value.shape()
        );
        p.value = value;
        Ok(())
    }

    /// `(name, value)` pairs in registration order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }
}

/// Whether layers use batch statistics (and update running stats) or stored statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Binds store parameters to tape leaves for one forward pass and collects
/// side outputs (running-stat updates and named activations).
pub struct ForwardCtx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    mode: Mode,
    track_grads: bool,
    bound: RefCell<Vec<(ParamId, Var<'t>)>>,
    updates: RefCell<Vec<(ParamId, Tensor)>>,
    captures: RefCell<Vec<(String, Var<'t>)>>,
}

impl<'t, 's> ForwardCtx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            tape,
            store,
            mode,
            track_grads: true,
            bound: RefCell::default(),
            updates: RefCell::default(),
            captures: RefCell::default(),
        }
    }

    /// Parameters become constants; useful for inference and input-saliency passes.
    pub fn without_param_grads(mut self) -> Self {
        self.track_grads = false;
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some((_, v)) = self.bound.borrow().iter().find(|(p, _)| *p == id) {
            return *v;
        }
        let p = self.store.get(id);
        let var = self.tape.leaf(p.value.clone(), p.trainable && self.track_grads);
        self.bound.borrow_mut().push((id, var));
        var
    }

    /// Uses `var` for a parameter instead of a fresh leaf, so callers can
    /// differentiate with respect to their own inputs.
    pub fn bind(&self, id: ParamId, var: Var<'t>) -> Result<()> {
        let expected = self.store.get(id).value.shape();
        ensure!(
            var.shape() == expected,
            "cannot bind {:?}: shape {:?}, expected {:?}",
            self.store.get(id).name,
            var.shape(),
            expected
        );
        let mut bound = self.bound.borrow_mut();
        ensure!(
            bound.iter().all(|(p, _)| *p != id),
            "parameter {:?} is already bound",
            self.store.get(id).name
        );
        bound.push((id, var));
        Ok(())
    }

    pub(crate) fn push_update(&self, id: ParamId, value: Tensor) {
        self.updates.borrow_mut().push((id, value));
    }

    /// Records a named intermediate activation.
    pub fn capture(&self, name: impl Into<String>, var: Var<'t>) {
        self.captures.borrow_mut().push((name.into(), var));
    }

    pub fn finish(self) -> ForwardRecord<'t> {
        ForwardRecord {
            bound: self.bound.into_inner(),
            updates: self.updates.into_inner(),
            captures: self.captures.into_inner(),
        }
    }
}

/// What a forward pass left behind once the borrow of the store ends.
pub struct ForwardRecord<'t> {
    bound: Vec<(ParamId, Var<'t>)>,
    updates: Vec<(ParamId, Tensor)>,
    captures: Vec<(String, Var<'t>)>,
}

impl<'t> ForwardRecord<'t> {
    pub fn capture(&self, name: &str) -> Option<Var<'t>> {
        self.captures.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn captures(&self) -> &[(String, Var<'t>)] {
        &self.captures
    }

    /// The tape leaf a parameter was bound to, if the forward pass used it.
    pub fn bound(&self, id: ParamId) -> Option<Var<'t>> {
        self.bound.iter().find(|(p, _)| *p == id).map(|(_, v)| *v)
    }

    /// Adds the tape gradients of all bound parameters into the store.
    pub fn accumulate_grads(&self, store: &mut ParamStore) {
        for (id, var) in &self.bound {
            if let Some(g) = var.grad() {
                store.accumulate_grad(*id, &g);
            }
        }
    }

    /// Writes running-statistic updates produced in training mode.
    pub fn apply_updates(&self, store: &mut ParamStore) {
        for (id, value) in &self.updates {
            store.get_mut(*id).value = value.clone();
        }
    }
}
