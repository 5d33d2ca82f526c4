//! Named parameters, their gradients, and the optimizer that updates them.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Rc<Tensor<T>>,
    /// Frozen parameters never receive gradients and are never updated.
    pub trainable: bool,
}

/// Flat registry of every parameter of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            tensor: Rc::new(tensor),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != tensor.shape() {
            return Err(shape_err("param_set", p.tensor.shape(), tensor.shape()));
        }
        p.tensor = Rc::new(tensor);
        Ok(())
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.params[id.0].tensor)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.tensor(id).numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// Gradients of trainable parameters, accumulated over one or more backward
/// passes.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor<T>) {
        match self.grads.get_mut(&id) {
            Some(acc) => acc.add_assign(&g),
            None => {
                self.grads.insert(id, g);
            }
        }
    }

    pub fn merge(&mut self, other: Gradients<T>) {
        for (id, g) in other.grads {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn global_norm(&self) -> T {
        self.grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: u64,
    moments: BTreeMap<ParamId, (Vec<T>, Vec<T>)>,
    lr_scale: BTreeMap<ParamId, T>,
}

impl<T: Real> AdamW<T> {
    pub fn new(weight_decay: T) -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
            lr_scale: BTreeMap::new(),
        }
    }

    /// Multiplies the learning rate of one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: T) {
        self.lr_scale.insert(id, scale);
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of moment elements held (two per optimised parameter element).
    pub fn state_len(&self) -> usize {
        self.moments.values().map(|(m, v)| m.len() + v.len()).sum()
    }

    /// Applies one update. Gradients of frozen parameters are ignored.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: T) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            if !store.get(id).trainable {
                continue;
            }
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (alloc::vec![T::zero(); n], alloc::vec![T::zero(); n]));
            let w = store.tensor_mut(id);
            let lr = self.lr_scale.get(&id).map_or(lr, |&s| lr * s);
            let decay = T::one() - lr * self.weight_decay;
            for (i, (&gi, wi)) in g.data().iter().zip(w.data_mut()).enumerate() {
                m[i] = self.beta1 * m[i] + (T::one() - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (T::one() - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *wi = *wi * decay - lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
