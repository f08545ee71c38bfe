//! Gradients through ODE solves.
//!
//! [`adjoint_backward`] integrates the augmented system
//!
//! ```text
//! dh/dt = f(t, h),   da/dt = -a^T df/dh,   dg/dt = -a^T df/dtheta
//! ```
//!
//! backward from the forward endpoint. Each right-hand-side evaluation
//! records `f` on a private tape that is dropped immediately, so memory does
//! not depend on how many evaluations the forward solve needed.
//!
//! [`discretize_then_differentiate`] instead records the whole fixed-step
//! solve and backpropagates through it. Its memory grows with the number of
//! steps; it serves as an exact oracle for the discretized map.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::ode::{self, Method, NfeCounter, OdeFunc, SolveStats, SolverConfig};
use crate::tensor::{Element, Tensor};

/// A vector field whose parameters can be differentiated.
pub trait DiffOdeFunc<E: Element>: OdeFunc<E> {
    /// Parameters in flattening order.
    fn parameters(&self) -> &[Arc<Tensor<E>>];

    /// Record `f(t, h)` on `tape` using `params` (one var per parameter).
    fn record(&self, tape: &mut Tape<E>, t: f64, h: Var, params: &[Var]) -> Result<Var>;

    fn counter(&self) -> &NfeCounter;

    fn num_params(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

/// Evaluate `f` through a throwaway recording. Intended for
/// [`OdeFunc::eval`] implementations of [`DiffOdeFunc`] types.
pub fn eval_recorded<E: Element, F: DiffOdeFunc<E> + ?Sized>(
    f: &F,
    t: f64,
    h: &Tensor<E>,
) -> Result<Tensor<E>> {
    f.counter().bump();
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone(), false);
    let params: Vec<Var> = f
        .parameters()
        .iter()
        .map(|p| tape.constant(Arc::clone(p)))
        .collect();
    let out = f.record(&mut tape, t, hv, &params)?;
    Ok(tape.value(out).clone())
}

/// Result of [`vjp_f`].
#[derive(Clone, Debug)]
pub struct Vjp<E: Element> {
    pub value: Tensor<E>,
    /// `a^T df/dh`, shaped like `h`.
    pub a_dh: Tensor<E>,
    /// `a^T df/dtheta`, flat in parameter order.
    pub a_dtheta: Tensor<E>,
}

/// `f(t, h)` together with both vector-Jacobian products against `a`.
pub fn vjp_f<E: Element, F: DiffOdeFunc<E> + ?Sized>(
    f: &F,
    t: f64,
    h: &Tensor<E>,
    a: &Tensor<E>,
) -> Result<Vjp<E>> {
    if a.shape() != h.shape() {
        return Err(shape_err!("adjoint {:?} for state {:?}", a.shape(), h.shape()));
    }
    f.counter().bump();
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone(), true);
    let params: Vec<Var> = f
        .parameters()
        .iter()
        .map(|p| tape.param(Arc::clone(p)))
        .collect();
    let out = f.record(&mut tape, t, hv, &params)?;
    let value = tape.value(out).clone();
    let grads = tape.backward_with(out, a.clone())?;
    let a_dh = grads.wrt_or_zeros(hv, h.shape());
    let mut flat = Vec::with_capacity(f.num_params());
    for (v, p) in params.iter().zip(f.parameters()) {
        match grads.wrt(*v) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat_n(E::zero(), p.len())),
        }
    }
    let a_dtheta = Tensor::new(&[flat.len().max(1)], pad(flat))?;
    Ok(Vjp {
        value,
        a_dh,
        a_dtheta,
    })
}

fn pad<E: Element>(mut v: Vec<E>) -> Vec<E> {
    if v.is_empty() {
        v.push(E::zero());
    }
    v
}

/// State of the backward solve: `(h, a, g_theta)` packed into one vector.
#[derive(Clone, Debug)]
pub struct AugmentedState<E: Element> {
    pub h: Tensor<E>,
    pub a: Tensor<E>,
    pub g_theta: Tensor<E>,
}

impl<E: Element> AugmentedState<E> {
    fn pack(&self) -> Tensor<E> {
        Tensor::concat_flat(&[&self.h, &self.a, &self.g_theta])
    }

    fn unpack(z: &Tensor<E>, shape: &[usize], p: usize) -> Result<Self> {
        let n: usize = shape.iter().product();
        let mut parts = Tensor::split_flat(z.data(), &[shape, shape, &[p.max(1)]])?.into_iter();
        let (h, a, g) = (
            parts.next().expect("h"),
            parts.next().expect("a"),
            parts.next().expect("g"),
        );
        debug_assert_eq!(h.len(), n);
        Ok(Self { h, a, g_theta: g })
    }
}

struct AugmentedDynamics<'a, E: Element, F: ?Sized> {
    f: &'a F,
    shape: Vec<usize>,
    p: usize,
    counter: NfeCounter,
    _e: std::marker::PhantomData<E>,
}

impl<E: Element, F: DiffOdeFunc<E> + ?Sized> OdeFunc<E> for AugmentedDynamics<'_, E, F> {
    fn eval(&self, t: f64, z: &Tensor<E>) -> Result<Tensor<E>> {
        self.counter.bump();
        let s = AugmentedState::unpack(z, &self.shape, self.p)?;
        let v = vjp_f(self.f, t, &s.h, &s.a)?;
        let neg = |x: &Tensor<E>| x.map(|u| -u);
        Ok(Tensor::concat_flat(&[&v.value, &neg(&v.a_dh), &neg(&v.a_dtheta)]))
    }

    fn nfe(&self) -> usize {
        self.counter.get()
    }
}

/// Loss gradients at `t0` from the endpoint `h1` and `dL/dh1`.
///
/// Returns `(dL/dh0, dL/dtheta flat, stats)` where `stats` describes the
/// backward solve.
pub fn adjoint_backward<E: Element, F: DiffOdeFunc<E> + ?Sized>(
    f: &F,
    h1: &Tensor<E>,
    dl_dh1: &Tensor<E>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Tensor<E>, Tensor<E>, SolveStats)> {
    if h1.shape() != dl_dh1.shape() {
        return Err(shape_err!(
            "loss gradient {:?} for state {:?}",
            dl_dh1.shape(),
            h1.shape()
        ));
    }
    let p = f.num_params();
    let start = AugmentedState {
        h: h1.clone(),
        a: dl_dh1.clone(),
        g_theta: Tensor::zeros(&[p.max(1)]),
    };
    let dynamics = AugmentedDynamics {
        f,
        shape: h1.shape().to_vec(),
        p,
        counter: NfeCounter::default(),
        _e: std::marker::PhantomData,
    };
    let (z0, stats) = ode::solve(&dynamics, &start.pack(), t1, t0, cfg)?;
    let end = AugmentedState::unpack(&z0, h1.shape(), p)?;
    let mut g = end.g_theta;
    if p == 0 {
        g = Tensor::zeros(&[1]);
    }
    Ok((end.a, g, stats))
}

/// Record a fixed-step Euler or RK4 solve on `tape`.
pub fn record_fixed_solve<E: Element, F: DiffOdeFunc<E> + ?Sized>(
    f: &F,
    tape: &mut Tape<E>,
    h0: Var,
    params: &[Var],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<Var> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let dt = (t1 - t0) / n as f64;
    let e = E::of;
    let mut y = h0;
    for i in 0..n {
        let t = t0 + i as f64 * dt;
        y = match cfg.method {
            Method::Euler => {
                let k = f.record(tape, t, y, params)?;
                tape.lincomb(&[(y, E::one()), (k, e(dt))])?
            }
            Method::Rk4 => {
                let k1 = f.record(tape, t, y, params)?;
                let y2 = tape.lincomb(&[(y, E::one()), (k1, e(dt / 2.0))])?;
                let k2 = f.record(tape, t + dt / 2.0, y2, params)?;
                let y3 = tape.lincomb(&[(y, E::one()), (k2, e(dt / 2.0))])?;
                let k3 = f.record(tape, t + dt / 2.0, y3, params)?;
                let y4 = tape.lincomb(&[(y, E::one()), (k3, e(dt))])?;
                let k4 = f.record(tape, t + dt, y4, params)?;
                tape.lincomb(&[
                    (y, E::one()),
                    (k1, e(dt / 6.0)),
                    (k2, e(dt / 3.0)),
                    (k3, e(dt / 3.0)),
                    (k4, e(dt / 6.0)),
                ])?
            }
            Method::Dopri5 => {
                return Err(invalid!(
                    "only fixed-step solves can be recorded; use the adjoint for dopri5"
                ))
            }
        };
    }
    Ok(y)
}

/// Exact gradients of the discretized solve by backpropagating through a
/// fully recorded fixed-step integration. Returns `(dL/dh0, dL/dtheta flat)`.
pub fn discretize_then_differentiate<E: Element, F: DiffOdeFunc<E> + ?Sized>(
    f: &F,
    h0: &Tensor<E>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    dl_dh1: &Tensor<E>,
) -> Result<(Tensor<E>, Tensor<E>)> {
    if h0.shape() != dl_dh1.shape() {
        return Err(shape_err!("loss gradient {:?} for state {:?}", dl_dh1.shape(), h0.shape()));
    }
    let mut tape = Tape::new();
    let hv = tape.leaf(h0.clone(), true);
    let params: Vec<Var> = f
        .parameters()
        .iter()
        .map(|p| tape.param(Arc::clone(p)))
        .collect();
    let out = record_fixed_solve(f, &mut tape, hv, &params, t0, t1, cfg)?;
    let grads = tape.backward_with(out, dl_dh1.clone())?;
    let dh0 = grads.wrt_or_zeros(hv, h0.shape());
    let mut flat = Vec::with_capacity(f.num_params());
    for (v, p) in params.iter().zip(f.parameters()) {
        match grads.wrt(*v) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat_n(E::zero(), p.len())),
        }
    }
    let n = flat.len().max(1);
    Ok((dh0, Tensor::new(&[n], pad(flat))?))
}

/// `dh/dt = w * h` with a single scalar parameter `w`.
pub struct ScalarLinear<E: Element> {
    params: Vec<Arc<Tensor<E>>>,
    counter: NfeCounter,
}

impl<E: Element> ScalarLinear<E> {
    pub fn new(w: f64) -> Self {
        Self {
            params: vec![Arc::new(Tensor::scalar(E::of(w)))],
            counter: NfeCounter::default(),
        }
    }
}

impl<E: Element> OdeFunc<E> for ScalarLinear<E> {
    fn eval(&self, t: f64, h: &Tensor<E>) -> Result<Tensor<E>> {
        eval_recorded(self, t, h)
    }

    fn nfe(&self) -> usize {
        self.counter.get()
    }
}

impl<E: Element> DiffOdeFunc<E> for ScalarLinear<E> {
    fn parameters(&self) -> &[Arc<Tensor<E>>] {
        &self.params
    }

    fn record(&self, tape: &mut Tape<E>, _t: f64, h: Var, params: &[Var]) -> Result<Var> {
        tape.mul_scalar(h, params[0])
    }

    fn counter(&self) -> &NfeCounter {
        &self.counter
    }
}
