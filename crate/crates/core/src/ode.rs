//! Initial value solvers over tensor states: fixed-step Euler and RK4, and
//! the adaptive Dormand–Prince 5(4) pair with FSAL.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// A vector field `dh/dt = f(t, h)` that counts its evaluations.
pub trait OdeFunc<E: Element> {
    /// Evaluate the field; increments the evaluation counter by one.
    fn eval(&self, t: f64, h: &Tensor<E>) -> Result<Tensor<E>>;

    /// Evaluations since construction or the last counter reset.
    fn nfe(&self) -> usize;
}

/// Thread-safe evaluation counter.
#[derive(Debug, Default)]
pub struct NfeCounter(AtomicUsize);

impl NfeCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

impl Clone for NfeCounter {
    fn clone(&self) -> Self {
        Self(AtomicUsize::new(self.get()))
    }
}

/// [`OdeFunc`] backed by a closure.
pub struct FnOdeFunc<F> {
    f: F,
    counter: NfeCounter,
}

impl<F> FnOdeFunc<F> {
    pub fn new(f: F) -> Self {
        Self {
            f,
            counter: NfeCounter::default(),
        }
    }
}

impl<E, F> OdeFunc<E> for FnOdeFunc<F>
where
    E: Element,
    F: Fn(f64, &Tensor<E>) -> Tensor<E>,
{
    fn eval(&self, t: f64, h: &Tensor<E>) -> Result<Tensor<E>> {
        self.counter.bump();
        Ok((self.f)(t, h))
    }

    fn nfe(&self) -> usize {
        self.counter.get()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            "dopri5" => Ok(Method::Dopri5),
            _ => Err(invalid!("unknown solver method {s:?}")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
            Method::Dopri5 => "dopri5",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// Step count for the fixed-step methods.
    pub n_steps: usize,
    /// First trial step of the adaptive method; estimated from the field
    /// when `None` (see [`initial_step`]).
    pub initial_step: Option<f64>,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    /// Bound on attempted (accepted plus rejected) adaptive steps.
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::dopri5(1e-3)
    }
}

impl SolverConfig {
    /// Adaptive solver with `rtol = atol = tol`.
    pub fn dopri5(tol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            rtol: tol,
            atol: tol,
            n_steps: 1,
            initial_step: None,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 10.0,
            max_steps: 10_000,
        }
    }

    pub fn fixed(method: Method, n_steps: usize) -> Self {
        Self {
            method,
            n_steps,
            ..Self::dopri5(1e-3)
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.rtol = tol;
        self.atol = tol;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(invalid!("tolerances must be positive"));
        }
        if !(0.0 < self.min_factor && self.min_factor < 1.0 && 1.0 < self.max_factor) {
            return Err(invalid!("need 0 < min_factor < 1 < max_factor"));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return Err(invalid!("safety must lie in (0, 1]"));
        }
        if self.n_steps == 0 || self.max_steps == 0 {
            return Err(invalid!("step counts must be positive"));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(invalid!("initial step must be positive"));
            }
        }
        Ok(())
    }
}

/// Per-solve accounting.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub nfe: usize,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    pub final_step_size: f64,
}

/// RMS of `err_i / (atol + rtol * max(|y0_i|, |y1_i|))`; a step is accepted
/// when this is at most one.
pub fn error_norm<E: Element>(
    err: &Tensor<E>,
    y0: &Tensor<E>,
    y1: &Tensor<E>,
    rtol: f64,
    atol: f64,
) -> f64 {
    let n = err.len();
    let sum: f64 = err
        .data()
        .iter()
        .zip(y0.data())
        .zip(y1.data())
        .map(|((e, a), b)| {
            let scale = atol + rtol * a.as_f64().abs().max(b.as_f64().abs());
            let r = e.as_f64() / scale;
            r * r
        })
        .sum();
    (sum / n as f64).sqrt()
}

fn checked_eval<E: Element, F: OdeFunc<E> + ?Sized>(
    f: &F,
    t: f64,
    h: &Tensor<E>,
    stats: &mut SolveStats,
) -> Result<Tensor<E>> {
    let out = f.eval(t, h)?;
    stats.nfe += 1;
    if out.shape() != h.shape() {
        return Err(shape_err!(
            "vector field returned {:?} for state {:?}",
            out.shape(),
            h.shape()
        ));
    }
    Ok(out)
}

/// Integrate from `t0` to `t1` with the configured method.
pub fn solve<E: Element, F: OdeFunc<E> + ?Sized>(
    f: &F,
    h0: &Tensor<E>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Tensor<E>, SolveStats)> {
    match cfg.method {
        Method::Euler | Method::Rk4 => solve_fixed(f, h0, t0, t1, cfg),
        Method::Dopri5 => solve_dopri5(f, h0, t0, t1, cfg),
    }
}

/// Classical fixed-step Euler or RK4 with `cfg.n_steps` equal steps.
pub fn solve_fixed<E: Element, F: OdeFunc<E> + ?Sized>(
    f: &F,
    h0: &Tensor<E>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Tensor<E>, SolveStats)> {
    cfg.validate()?;
    let n = cfg.n_steps;
    let dt = (t1 - t0) / n as f64;
    let mut stats = SolveStats::default();
    let mut y = h0.clone();
    for i in 0..n {
        let t = t0 + i as f64 * dt;
        y = match cfg.method {
            Method::Euler => {
                let k = checked_eval(f, t, &y, &mut stats)?;
                Tensor::lincomb(&y, &[(dt, &k)])?
            }
            Method::Rk4 => {
                let k1 = checked_eval(f, t, &y, &mut stats)?;
                let y2 = Tensor::lincomb(&y, &[(dt / 2.0, &k1)])?;
                let k2 = checked_eval(f, t + dt / 2.0, &y2, &mut stats)?;
                let y3 = Tensor::lincomb(&y, &[(dt / 2.0, &k2)])?;
                let k3 = checked_eval(f, t + dt / 2.0, &y3, &mut stats)?;
                let y4 = Tensor::lincomb(&y, &[(dt, &k3)])?;
                let k4 = checked_eval(f, t + dt, &y4, &mut stats)?;
                Tensor::lincomb(
                    &y,
                    &[
                        (dt / 6.0, &k1),
                        (dt / 3.0, &k2),
                        (dt / 3.0, &k3),
                        (dt / 6.0, &k4),
                    ],
                )?
            }
            Method::Dopri5 => return Err(invalid!("solve_fixed does not run dopri5")),
        };
        if !y.all_finite() {
            return Err(Error::NonFinite(format!("fixed-step solve at t = {t}")));
        }
        stats.steps_accepted += 1;
    }
    stats.final_step_size = dt.abs();
    Ok((y, stats))
}

/// Dormand–Prince 5(4) tableau.
pub mod tableau {
    pub const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    pub const A: [&[f64]; 6] = [
        &[1.0 / 5.0],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
        &[
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
        ],
        &[
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ];
    /// Fifth-order weights (equal to the last row of `A`).
    pub const B5: [f64; 7] = [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ];
    pub const B4: [f64; 7] = [
        5179.0 / 57600.0,
        0.0,
        7571.0 / 16695.0,
        393.0 / 640.0,
        -92097.0 / 339200.0,
        187.0 / 2100.0,
        1.0 / 40.0,
    ];
}

fn rms_scaled<E: Element>(x: &Tensor<E>, y0: &Tensor<E>, cfg: &SolverConfig) -> f64 {
    let n = x.len().max(1) as f64;
    let s: f64 = x
        .data()
        .iter()
        .zip(y0.data())
        .map(|(v, y)| {
            let r = v.as_f64() / (cfg.atol + cfg.rtol * y.as_f64().abs());
            r * r
        })
        .sum();
    (s / n).sqrt()
}

/// Starting step from the usual two-derivative estimate, at the cost of one
/// extra evaluation. A vanishing field gets the whole span.
pub fn initial_step<E: Element, F: OdeFunc<E> + ?Sized>(
    f: &F,
    t0: f64,
    dir: f64,
    y0: &Tensor<E>,
    f0: &Tensor<E>,
    cfg: &SolverConfig,
    stats: &mut SolveStats,
) -> Result<f64> {
    let d0 = rms_scaled(y0, y0, cfg);
    let d1 = rms_scaled(f0, y0, cfg);
    if d1 == 0.0 {
        return Ok(f64::INFINITY);
    }
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = Tensor::lincomb(y0, &[(dir * h0, f0)])?;
    let f1 = checked_eval(f, t0 + dir * h0, &y1, stats)?;
    let d2 = rms_scaled(&f1.sub(f0)?, y0, cfg) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1))
}

/// Adaptive Dormand–Prince 5(4) with FSAL.
///
/// The first stage of each step reuses the last stage of the previous
/// accepted step, so a solve costs `1 + 6 * attempts` evaluations plus one
/// for the step estimate when no initial step is configured.
pub fn solve_dopri5<E: Element, F: OdeFunc<E> + ?Sized>(
    f: &F,
    h0: &Tensor<E>,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Tensor<E>, SolveStats)> {
    use tableau::{A, B4, B5, C};
    cfg.validate()?;
    let mut stats = SolveStats::default();
    let span = (t1 - t0).abs();
    if span == 0.0 {
        return Ok((h0.clone(), stats));
    }
    let dir = (t1 - t0).signum();
    let min_step = span * 1e-12;
    let mut t = t0;
    let mut y = h0.clone();
    let mut k1 = checked_eval(f, t, &y, &mut stats)?;
    let mut h = match cfg.initial_step {
        Some(h) => h,
        None => initial_step(f, t0, dir, &y, &k1, cfg, &mut stats)?,
    }
    .min(span);
    let mut last_rejected = false;
    let err_w: Vec<f64> = B5.iter().zip(&B4).map(|(a, b)| a - b).collect();

    loop {
        if stats.steps_accepted + stats.steps_rejected >= cfg.max_steps {
            return Err(Error::MaxSteps {
                max_steps: cfg.max_steps,
                t,
            });
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        let dt = dir * h;

        let mut ks: Vec<Tensor<E>> = Vec::with_capacity(7);
        ks.push(k1.clone());
        for (s, row) in A.iter().enumerate().take(5) {
            let terms: Vec<(f64, &Tensor<E>)> =
                row.iter().zip(&ks).map(|(&a, k)| (dt * a, k)).collect();
            let ys = Tensor::lincomb(&y, &terms)?;
            ks.push(checked_eval(f, t + C[s + 1] * dt, &ys, &mut stats)?);
        }
        let terms: Vec<(f64, &Tensor<E>)> = A[5].iter().zip(&ks).map(|(&a, k)| (dt * a, k)).collect();
        let y_new = Tensor::lincomb(&y, &terms)?;
        let t_new = if last { t1 } else { t + dt };
        let k7 = checked_eval(f, t_new, &y_new, &mut stats)?;
        ks.push(k7);

        let mut err = Tensor::zeros(y.shape());
        for (w, k) in err_w.iter().zip(&ks) {
            if *w != 0.0 {
                err.axpy(E::of(dt * w), k)?;
            }
        }
        let en = error_norm(&err, &y, &y_new, cfg.rtol, cfg.atol);

        if en.is_finite() && en <= 1.0 && y_new.all_finite() {
            stats.steps_accepted += 1;
            stats.final_step_size = h;
            t = t_new;
            y = y_new;
            k1 = ks.pop().expect("seven stages");
            if last {
                break;
            }
            let mut factor = if en == 0.0 {
                cfg.max_factor
            } else {
                (cfg.safety * en.powf(-0.2)).clamp(cfg.min_factor, cfg.max_factor)
            };
            if last_rejected {
                factor = factor.min(1.0);
            }
            last_rejected = false;
            h *= factor;
        } else {
            stats.steps_rejected += 1;
            last_rejected = true;
            let factor = if en.is_finite() {
                (cfg.safety * en.powf(-0.2)).clamp(cfg.min_factor, 1.0)
            } else {
                cfg.min_factor
            };
            h *= factor;
            if h < min_step {
                return Err(Error::NonFinite(format!(
                    "dopri5 step size underflow at t = {t} (error norm {en})"
                )));
            }
        }
    }
    Ok((y, stats))
}
