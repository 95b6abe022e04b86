use std::collections::HashMap;

use rand::Rng;

use super::tape::{NormStats, ObservedStats, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Named trainable tensors plus named non-trainable buffers.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            buffer_names: Vec::new(),
            buffers: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str) -> Result<()> {
        if self.lookup.contains_key(name) || self.buffer_names.iter().any(|b| b == name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        Ok(())
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        self.claim(&name)?;
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        self.claim(&name)?;
        self.buffer_names.push(name);
        self.buffers.push(value);
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0]
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    /// Replace a value keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "param set",
                format!(
                    "`{}` is {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Same names and buffers in another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            buffer_names: self.buffer_names.clone(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    /// Overwrite every parameter with uniform noise in `[-bound, bound)`.
    pub fn randomize<R: Rng + ?Sized>(&mut self, bound: f64, rng: &mut R) {
        for v in &mut self.values {
            *v = Tensor::uniform(v.shape().to_vec(), bound, rng);
        }
    }

    /// Fold batchnorm observations into running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        for u in updates {
            let m = T::of(u.momentum);
            let keep = T::one() - m;
            for (r, &o) in self.buffers[u.mean.0].data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * o;
            }
            for (r, &o) in self.buffers[u.var.0].data_mut().iter_mut().zip(&u.stats.var) {
                *r = keep * *r + m * o;
            }
        }
    }
}

/// Pending running-statistics update from one training-mode batchnorm call.
pub struct BnUpdate<T> {
    pub mean: BufferId,
    pub var: BufferId,
    pub momentum: f64,
    pub stats: ObservedStats<T>,
}

/// Gradients per parameter plus batchnorm updates from one forward pass.
pub struct StepGrads<T> {
    pub loss: f64,
    pub grads: Vec<Option<Tensor<T>>>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// One forward pass over a [`ParamStore`].
///
/// Parameters enter the tape as leaves on first use. In training mode,
/// batchnorm layers normalize with batch statistics and queue running
/// updates; in eval mode they read the stored running statistics.
pub struct Session<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s ParamStore<T>,
    train: bool,
    leaves: Vec<Option<Var>>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'s, T: Real> Session<'s, T> {
    /// Gradient-tracking session.
    pub fn new(store: &'s ParamStore<T>, train: bool) -> Self {
        Session {
            tape: Tape::new(),
            store,
            train,
            leaves: vec![None; store.len()],
            bn_updates: Vec::new(),
        }
    }

    /// Forward-only session.
    pub fn inference(store: &'s ParamStore<T>, train: bool) -> Self {
        Session {
            tape: Tape::no_grad(),
            ..Self::new(store, train)
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.leaves[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), true);
        self.leaves[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    pub fn batch_norm(&mut self, x: Var, bn: &super::nn::BatchNorm1d) -> Result<Var> {
        let gamma = self.param(bn.gamma);
        let beta = self.param(bn.beta);
        if self.train {
            let (y, obs) = self.tape.batch_norm(x, gamma, beta, NormStats::Batch, bn.eps)?;
            if let Some(stats) = obs {
                self.bn_updates.push(BnUpdate {
                    mean: bn.running_mean,
                    var: bn.running_var,
                    momentum: bn.momentum,
                    stats,
                });
            }
            Ok(y)
        } else {
            let stats = NormStats::Running {
                mean: self.store.buffer(bn.running_mean).data(),
                var: self.store.buffer(bn.running_var).data(),
            };
            Ok(self.tape.batch_norm(x, gamma, beta, stats, bn.eps)?.0)
        }
    }

    /// Queued batchnorm updates, for forward-only training-mode passes.
    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Run the reverse pass and collect parameter gradients.
    pub fn backward(self, loss: Var) -> Result<StepGrads<T>> {
        let loss_value = self.tape.value(loss).item().as_f64();
        let mut g = self.tape.backward(loss)?;
        let grads = self
            .leaves
            .iter()
            .map(|leaf| leaf.and_then(|v| g.take(v)))
            .collect();
        Ok(StepGrads {
            loss: loss_value,
            grads,
            bn_updates: self.bn_updates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a.w", Tensor::zeros(vec![2])).unwrap();
        assert!(s.add("a.w", Tensor::zeros(vec![2])).is_err());
        assert!(s.add_buffer("a.w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn session_caches_leaves() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("p", Tensor::full(vec![3], 2.0)).unwrap();
        let mut sess = Session::new(&s, true);
        let a = sess.param(id);
        let b = sess.param(id);
        assert_eq!(a, b);
        let y = sess.tape.mul(a, b).unwrap();
        let l = sess.tape.sum(y).unwrap();
        let out = sess.backward(l).unwrap();
        assert_eq!(out.grads[0].as_ref().unwrap().data(), &[4.0, 4.0, 4.0]);
        assert_eq!(out.loss, 12.0);
    }
}
