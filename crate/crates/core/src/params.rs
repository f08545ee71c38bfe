//! Named parameters, their gradient accumulators and Adam state.

use std::collections::HashMap;
use std::sync::Arc;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone)]
pub struct Param<E: Element> {
    pub name: String,
    pub value: Arc<Tensor<E>>,
    pub grad: Tensor<E>,
    m: Tensor<E>,
    v: Tensor<E>,
}

/// Parameters in a stable registration order.
#[derive(Clone, Default)]
pub struct ParamStore<E: Element = f32> {
    params: Vec<Param<E>>,
    index: HashMap<String, usize>,
    step: u64,
    grads_ready: bool,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
            grads_ready: false,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<E>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.clone(),
            value: Arc::new(value),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        let id = self.params.len() - 1;
        self.index.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<E>> {
        self.params.iter()
    }

    pub fn get(&self, id: usize) -> &Param<E> {
        &self.params[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<E>> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn value(&self, id: usize) -> &Arc<Tensor<E>> {
        &self.params[id].value
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_value(&mut self, id: usize, value: Tensor<E>) -> Result<()> {
        let p = &mut self.params[id];
        if value.shape() != p.value.shape() {
            return Err(shape_err!(
                "parameter {} is {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            ));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(E::zero());
        }
        self.grads_ready = false;
    }

    /// Overwrite the gradient of one parameter.
    pub fn set_grad(&mut self, id: usize, grad: Tensor<E>) -> Result<()> {
        let p = &mut self.params[id];
        p.grad.check_same_shape(&grad)?;
        p.grad = grad;
        self.grads_ready = true;
        Ok(())
    }

    /// Record every parameter on `tape` as a tracked leaf, in store order.
    pub fn register(&self, tape: &mut Tape<E>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.param(Arc::clone(&p.value)))
            .collect()
    }

    /// Add the gradients of `vars` (as returned by [`register`](Self::register)).
    pub fn accumulate(&mut self, grads: &Gradients<E>, vars: &[Var]) -> Result<()> {
        if vars.len() != self.params.len() {
            return Err(invalid!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            ));
        }
        for (p, &v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = grads.wrt(v) {
                p.grad.add_assign(g)?;
            }
        }
        self.grads_ready = true;
        Ok(())
    }

    /// Parameters flattened in store order.
    pub fn flatten(&self) -> Vec<E> {
        self.params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<E> {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter().copied())
            .collect()
    }

    /// One Adam update with bias correction; advances the step counter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.grads_ready {
            return Err(Error::Optimizer(
                "adam_step called before gradients were populated".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2) = (E::of(cfg.beta1), E::of(cfg.beta2));
        let (lr, eps) = (E::of(cfg.lr), E::of(cfg.eps));
        let (c1, c2) = (E::of(1.0 / bc1), E::of(1.0 / bc2));
        for p in &mut self.params {
            let value = Arc::make_mut(&mut p.value);
            let w = value.data_mut();
            let (m, v, g) = (p.m.data_mut(), p.v.data_mut(), p.grad.data());
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (E::one() - b1) * g[i];
                v[i] = b2 * v[i] + (E::one() - b2) * g[i] * g[i];
                let mhat = m[i] * c1;
                let vhat = v[i] * c2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.grads_ready = false;
        Ok(())
    }
}
