use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
}

/// Flat, ordered collection of named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = vec![0.0; value.numel()];
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `±bound`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut StreamRng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(
            name,
            Tensor::new(shape.to_vec(), data).expect("shape matches"),
        )
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Snapshot entries in registration order.
    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Overwrites values from snapshot entries; names and shapes must match
    /// exactly, in any order.
    pub fn load_entries(&mut self, entries: Vec<(String, Tensor)>) -> Result<()> {
        if entries.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                entries.len()
            )));
        }
        for (name, t) in entries {
            let p = self
                .find_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if p.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }
}

/// One forward evaluation: a fresh tape plus the binding of parameters to
/// tape leaves. Parameters are bound lazily on first use.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    dropout_rng: Option<&'a mut StreamRng>,
    track_grads: bool,
}

impl<'a> Forward<'a> {
    /// Inference: dropout off, no gradient bookkeeping.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::build(store, None, false)
    }

    /// Deterministic pass that records gradients (used by gradient checks).
    pub fn eval_with_grads(store: &'a ParamStore) -> Self {
        Self::build(store, None, true)
    }

    /// Training: dropout draws from `rng`, gradients recorded.
    pub fn train(store: &'a ParamStore, rng: &'a mut StreamRng) -> Self {
        Self::build(store, Some(rng), true)
    }

    fn build(
        store: &'a ParamStore,
        dropout_rng: Option<&'a mut StreamRng>,
        track_grads: bool,
    ) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            dropout_rng,
            track_grads,
        }
    }

    pub fn training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .tape
            .leaf(self.store.get(id).value.clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Identity unless training.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.dropout_rng.as_deref_mut() {
            Some(rng) => self.tape.dropout(x, rate, rng, true),
            None => Ok(x),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Runs backward from `loss` and returns the gradient of every bound
    /// parameter, ready for [`ParamStore::accumulate`].
    pub fn backward(mut self, loss: Var) -> Result<ParamGrads> {
        self.tape.backward(loss)?;
        Ok(self.param_grads())
    }

    /// Gradients of bound parameters after the tape's backward pass.
    pub fn param_grads(&self) -> ParamGrads {
        let grads = self
            .bound
            .iter()
            .map(|slot| slot.and_then(|v| self.tape.grad(v).map(<[f64]>::to_vec)))
            .collect();
        ParamGrads(grads)
    }
}

/// Per-parameter gradients detached from their tape.
#[derive(Debug, Clone)]
pub struct ParamGrads(Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0[id.0].as_deref()
    }
}

impl ParamStore {
    /// Adds detached gradients into the stored `grad` buffers.
    pub fn accumulate(&mut self, grads: &ParamGrads) {
        for (p, g) in self.params.iter_mut().zip(&grads.0) {
            if let Some(g) = g {
                p.grad.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
    }
}
