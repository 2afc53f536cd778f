use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// A trainable tensor with its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

/// A non-trainable tensor (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer<S> {
    pub name: String,
    pub value: Tensor<S>,
}

/// Named parameters, buffers and optimizer state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    buffers: Vec<Buffer<S>>,
    step: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            step: 0,
        }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.into(),
            value,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<S>) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<S> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<S> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<S>] {
        &self.buffers
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

    /// Number of Adam updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Total trainable scalars. Buffers are not counted.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Places every parameter on `tape` as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Gradients for bound parameters, zero-filled where a parameter was unused.
    pub fn collect_grads(&self, bound: &[Var], grads: &Gradients<S>) -> Vec<Tensor<S>> {
        self.params
            .iter()
            .zip(bound)
            .map(|(p, &v)| grads.get_or_zeros(v, &p.value))
            .collect()
    }

    /// Copies values (not optimizer state) from another store with identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if self.params.len() != other.params.len() || self.buffers.len() != other.buffers.len() {
            return Err(Error::shape("ParamStore::copy_values_from", "layouts differ"));
        }
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.value = b.value.clone();
        }
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            a.value = b.value.clone();
        }
        Ok(())
    }

    pub(crate) fn push_raw(&mut self, param: Param<S>) {
        self.params.push(param);
    }

    pub(crate) fn push_raw_buffer(&mut self, buffer: Buffer<S>) {
        self.buffers.push(buffer);
    }
}

/// Adam hyper-parameters with inverse-time step-size decay `lr0 / (1 + decay * t)`, where
/// `t` counts previously applied updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr0: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn learning_rate(&self, step: u64) -> f64 {
        self.lr0 / (1.0 + self.decay * step as f64)
    }
}

/// Applies one Adam update and returns the step size used.
pub fn adam_step<S: Scalar>(store: &mut ParamStore<S>, grads: &[Tensor<S>], cfg: &AdamConfig) -> Result<f64> {
    if grads.len() != store.params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} gradients for {} parameters", grads.len(), store.params.len()),
        ));
    }
    let lr = cfg.learning_rate(store.step);
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
    let (one, eps) = (S::one(), S::of(cfg.eps));
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    let lr_s = S::of(lr);
    for (p, g) in store.params.iter_mut().zip(grads) {
        if g.shape() != p.value.shape() {
            return Err(Error::shape("adam_step", format!("{}: {:?} vs {:?}", p.name, g.shape(), p.value.shape())));
        }
        let (w, m, v) = (p.value.data_mut(), p.m.data_mut(), p.v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            w[i] -= lr_s * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(lr)
}
