//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Every operation computes its value immediately and appends a node holding
//! the inputs and whatever the backward rule needs. [`Tape::backward`] walks
//! the nodes in reverse order, so each node is visited once.
//!
//! The number of nodes alive across all tapes on the current thread is
//! tracked (see [`retained_nodes`]); this is how the memory cost of different
//! differentiation strategies is measured.

use std::cell::Cell;
use std::sync::Arc;

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, ConvGeom, GroupNormCache, Padding};
use crate::tensor::{Element, Tensor};

thread_local! {
    static LIVE_NODES: Cell<usize> = const { Cell::new(0) };
    static PEAK_NODES: Cell<usize> = const { Cell::new(0) };
}

/// Autodiff nodes currently held by tapes on this thread.
pub fn retained_nodes() -> usize {
    LIVE_NODES.with(Cell::get)
}

/// High-water mark of [`retained_nodes`] since the last [`reset_peak_nodes`].
pub fn peak_retained_nodes() -> usize {
    PEAK_NODES.with(Cell::get)
}

pub fn reset_peak_nodes() {
    PEAK_NODES.with(|p| p.set(retained_nodes()));
}

fn note_push() {
    let live = LIVE_NODES.with(|l| {
        let v = l.get() + 1;
        l.set(v);
        v
    });
    PEAK_NODES.with(|p| {
        if live > p.get() {
            p.set(live)
        }
    });
}

fn note_release(n: usize) {
    LIVE_NODES.with(|l| l.set(l.get() - n));
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of an operation computed outside the tape.
pub trait CustomBackward<E: Element> {
    /// Gradients for each input given the output value and its gradient.
    /// `needs[i]` tells whether input `i` requires a gradient.
    fn backward(
        &self,
        output: &Tensor<E>,
        grad_output: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>>;
}

enum Op<E: Element> {
    Leaf,
    Add(Var, Var),
    LinComb(Vec<(Var, E)>),
    MulScalar(Var, Var),
    Sum(Var),
    Relu(Var),
    Tanh(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: GroupNormCache<E>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        target: Arc<Vec<usize>>,
        probs: Tensor<E>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward<E>>,
    },
}

struct Node<E: Element> {
    value: Arc<Tensor<E>>,
    op: Op<E>,
    requires_grad: bool,
}

/// Recorded computation graph in topological (insertion) order.
pub struct Tape<E: Element = f32> {
    nodes: Vec<Node<E>>,
    consumed: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Drop for Tape<E> {
    fn drop(&mut self) {
        note_release(self.nodes.len());
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` received none.
    pub fn wrt_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<E> {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<E>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate<E: Element>(slot: &mut Option<Tensor<E>>, g: Tensor<E>) {
    match slot {
        Some(acc) => acc.add_assign(&g).expect("gradient shape"),
        None => *slot = Some(g),
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor<E>> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<E>>, op: Op<E>, requires_grad: bool) -> Var {
        note_push();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Tracked input; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Arc<Tensor<E>>) -> Var {
        self.push_arc(value, Op::Leaf, true)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Arc<Tensor<E>>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// `sum_i coef_i * x_i` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: &[(Var, E)]) -> Result<Var> {
        let (&(v0, c0), rest) = terms
            .split_first()
            .ok_or_else(|| invalid!("empty linear combination"))?;
        let mut out = self.value(v0).scale(c0);
        for &(v, c) in rest {
            out.axpy(c, self.value(v))?;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.any_grad(&vars);
        Ok(self.push(out, Op::LinComb(terms.to_vec()), rg))
    }

    /// `s * x` for a single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err!("mul_scalar factor must have one element"));
        }
        let v = self.value(x).scale(self.value(s).item());
        let rg = self.any_grad(&[x, s]);
        Ok(self.push(v, Op::MulScalar(x, s), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(E::zero()));
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        let rg = self.any_grad(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (v, geom) = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn group_norm(
        &mut self,
        input: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let (v, cache) = kernels::group_norm_forward(
            self.value(input),
            groups,
            self.value(gamma),
            self.value(beta),
            eps,
        )?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            v,
            Op::GroupNorm {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (v, argmax) = kernels::maxpool2_forward(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(v, Op::MaxPool2 { input, argmax }, rg))
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let v = kernels::upsample2_forward(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(v, Op::Upsample2(input), rg))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::concat_channels(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(v, Op::Concat(a, b), rg))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let v = kernels::slice_channels(self.value(input), start, len)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(v, Op::SliceChannels { input, start }, rg))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let v = kernels::softmax(self.value(input), axis)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(v, Op::Softmax { input, axis }, rg))
    }

    /// Mean per-pixel cross entropy; produces a single-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, target: Arc<Vec<usize>>) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy_forward(self.value(logits), &target)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(E::of(loss)),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Record an externally computed value with a custom backward rule.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        value: Tensor<E>,
        rule: Box<dyn CustomBackward<E>>,
    ) -> Var {
        let rg = self.any_grad(&inputs);
        self.push(value, Op::Custom { inputs, rule }, rg)
    }

    /// Gradients of a single-element `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<E>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, Tensor::ones(self.value(loss).shape()))
    }

    /// Vector-Jacobian product: propagate `seed` as the gradient of `output`.
    pub fn backward_with(&mut self, output: Var, seed: Tensor<E>) -> Result<Gradients<E>> {
        if self.consumed {
            return Err(Error::Autodiff(
                "backward called twice on the same recording".into(),
            ));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.value(output).shape()
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.apply_rule(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn apply_rule(&self, i: usize, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) -> Result<()> {
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if need(v) {
                        accumulate(&mut grads[v.0], g.clone());
                    }
                }
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    if need(v) {
                        accumulate(&mut grads[v.0], g.scale(c));
                    }
                }
            }
            Op::MulScalar(x, s) => {
                if need(*x) {
                    accumulate(&mut grads[x.0], g.scale(self.value(*s).item()));
                }
                if need(*s) {
                    let d = self.value(*x).dot(g)?;
                    accumulate(&mut grads[s.0], Tensor::scalar(E::of(d)));
                }
            }
            Op::Sum(x) => {
                if need(*x) {
                    accumulate(&mut grads[x.0], Tensor::full(self.value(*x).shape(), g.item()));
                }
            }
            Op::Relu(x) => {
                if need(*x) {
                    let d = self
                        .value(*x)
                        .zip_map(g, |a, d| if a > E::zero() { d } else { E::zero() })?;
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Tanh(x) => {
                if need(*x) {
                    let d = node.value.zip_map(g, |y, d| d * (E::one() - y * y))?;
                    accumulate(&mut grads[x.0], d);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    need(*input),
                    need(*kernel),
                    bias.is_some_and(need),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[input.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[kernel.0], dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(cache, self.value(*gamma), g);
                if need(*input) {
                    accumulate(&mut grads[input.0], dx);
                }
                if need(*gamma) {
                    accumulate(&mut grads[gamma.0], dgamma);
                }
                if need(*beta) {
                    accumulate(&mut grads[beta.0], dbeta);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if need(*input) {
                    let dx = kernels::maxpool2_backward(self.value(*input).shape(), argmax, g);
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::Upsample2(x) => {
                if need(*x) {
                    accumulate(&mut grads[x.0], kernels::upsample2_backward(g));
                }
            }
            Op::Concat(a, b) => {
                let ca = self.value(*a).shape()[1];
                let cb = self.value(*b).shape()[1];
                if need(*a) {
                    accumulate(&mut grads[a.0], kernels::slice_channels(g, 0, ca)?);
                }
                if need(*b) {
                    accumulate(&mut grads[b.0], kernels::slice_channels(g, ca, cb)?);
                }
            }
            Op::SliceChannels { input, start } => {
                if need(*input) {
                    let full = self.value(*input).shape();
                    let (b, c, h, w) = (full[0], full[1], full[2], full[3]);
                    let len = g.shape()[1];
                    let hw = h * w;
                    let mut dx = Tensor::zeros(full);
                    for bi in 0..b {
                        let dst = (bi * c + start) * hw;
                        let src = bi * len * hw;
                        dx.data_mut()[dst..dst + len * hw]
                            .copy_from_slice(&g.data()[src..src + len * hw]);
                    }
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::Softmax { input, axis } => {
                if need(*input) {
                    let dx = kernels::softmax_backward(&node.value, g, *axis);
                    accumulate(&mut grads[input.0], dx);
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                if need(*logits) {
                    let dx = kernels::cross_entropy_backward(probs, target, g.item());
                    accumulate(&mut grads[logits.0], dx);
                }
            }
            Op::Custom { inputs, rule } => {
                let needs: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                let out = rule.backward(&node.value, g, &needs)?;
                if out.len() != inputs.len() {
                    return Err(Error::Autodiff(format!(
                        "custom rule returned {} gradients for {} inputs",
                        out.len(),
                        inputs.len()
                    )));
                }
                for (&v, d) in inputs.iter().zip(out) {
                    if let (true, Some(d)) = (need(v), d) {
                        if d.shape() != self.value(v).shape() {
                            return Err(shape_err!(
                                "custom gradient {:?} for input {:?}",
                                d.shape(),
                                self.value(v).shape()
                            ));
                        }
                        accumulate(&mut grads[v.0], d);
                    }
                }
            }
        }
        Ok(())
    }
}
