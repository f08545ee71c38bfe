//! Gradient oracles for a small ODE block and NFE benchmarks of a model.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unode_core::adjoint::{adjoint_backward, discretize_then_differentiate, DiffOdeFunc};
use unode_core::gradcheck::max_rel_error;
use unode_core::model::{Activation, ConvOdeFunc, Model};
use unode_core::ode::{self, Method, SolverConfig};
use unode_core::{Result, Tensor};

use crate::run::{predict, Dataset};

/// Gradient of `<w, h(1)>` for the block `f` starting at `h0`.
pub struct GradcheckProblem {
    pub f: ConvOdeFunc<f64>,
    pub h0: Tensor<f64>,
    pub w: Tensor<f64>,
}

impl GradcheckProblem {
    /// Two 3x3 convolutions over a `1 x channels x size x size` state.
    pub fn random(channels: usize, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [1, channels, size, size];
        let mut draw = |_: usize| rng.random_range(-1.0..1.0);
        let h0 = Tensor::from_fn(&shape, &mut draw);
        let w = Tensor::from_fn(&shape, &mut draw);
        Ok(Self {
            f: ConvOdeFunc::random(channels, true, seed ^ 0xF00D)?,
            h0,
            w,
        })
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.f = self.f.with_activation(activation);
        self
    }

    /// The same problem with every parameter of `f` set to zero.
    pub fn zeroed(mut self) -> Self {
        self.f = self.f.scaled(0.0);
        self
    }

    pub fn param_names() -> [&'static str; 8] {
        [
            "conv1.w", "conv1.b", "gn1.gamma", "gn1.beta", "conv2.w", "conv2.b", "gn2.gamma", "gn2.beta",
        ]
    }

    fn loss(&self, f: &ConvOdeFunc<f64>, h0: &Tensor<f64>, cfg: &SolverConfig) -> Result<f64> {
        let (h1, _) = ode::solve(f, h0, 0.0, 1.0, cfg)?;
        Ok(h1.data().iter().zip(self.w.data()).map(|(a, b)| a * b).sum())
    }

    /// Adjoint gradients `(dL/dh0, dL/dtheta)`.
    pub fn adjoint(&self, cfg: &SolverConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        let (h1, _) = ode::solve(&self.f, &self.h0, 0.0, 1.0, cfg)?;
        let (dh, dth, _) = adjoint_backward(&self.f, &h1, &self.w, 0.0, 1.0, cfg)?;
        Ok((dh.data().to_vec(), dth.data()[..self.f.num_params()].to_vec()))
    }

    /// Central differences of the solved loss.
    pub fn finite_differences(&self, cfg: &SolverConfig, step: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut dh = Vec::with_capacity(self.h0.len());
        let mut probe = self.h0.clone();
        for i in 0..probe.len() {
            let x = probe.data()[i];
            probe.data_mut()[i] = x + step;
            let up = self.loss(&self.f, &probe, cfg)?;
            probe.data_mut()[i] = x - step;
            let down = self.loss(&self.f, &probe, cfg)?;
            probe.data_mut()[i] = x;
            dh.push((up - down) / (2.0 * step));
        }
        let params: Vec<Tensor<f64>> = self.f.parameters().iter().map(|p| (**p).clone()).collect();
        let mut dth = Vec::with_capacity(self.f.num_params());
        for k in 0..params.len() {
            for i in 0..params[k].len() {
                let at = |v: f64| -> Result<f64> {
                    let mut ps: Vec<Arc<Tensor<f64>>> = params.iter().cloned().map(Arc::new).collect();
                    Arc::make_mut(&mut ps[k]).data_mut()[i] = v;
                    self.loss(&self.f.with_params(ps), &self.h0, cfg)
                };
                let x = params[k].data()[i];
                dth.push((at(x + step)? - at(x - step)?) / (2.0 * step));
            }
        }
        Ok((dh, dth))
    }

    /// Gradients through a recorded fixed-step RK4 solve.
    pub fn discretized(&self, steps: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let cfg = SolverConfig::fixed(Method::Rk4, steps);
        let (dh, dth) = discretize_then_differentiate(&self.f, &self.h0, 0.0, 1.0, &cfg, &self.w)?;
        Ok((dh.data().to_vec(), dth.data()[..self.f.num_params()].to_vec()))
    }

    /// Flat parameter-gradient ranges per parameter tensor.
    pub fn param_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.f
            .parameters()
            .iter()
            .map(|p| {
                let r = start..start + p.len();
                start = r.end;
                r
            })
            .collect()
    }
}

/// Per-entry relative error of a gradient against a reference. Entries are
/// compared relative to the larger magnitude, floored at `1e-3 * scale` so
/// that near-zero entries are judged on the scale of the whole gradient.
pub fn gradient_error(got: &[f64], reference: &[f64], scale: f64) -> f64 {
    max_rel_error(got, reference, (1e-3 * scale).max(f64::MIN_POSITIVE))
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    /// `tanh` for the gated smooth field, `relu` for the model's own block.
    pub block: String,
    pub oracle: String,
    pub wrt: String,
    pub rtol: f64,
    pub max_rel_error: f64,
    /// `None` for informational rows.
    pub pass: Option<bool>,
}

pub const GRADCHECK_THRESHOLD: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-4;
pub const RK4_STEPS: usize = 200;
pub const GRADCHECK_RTOLS: [f64; 2] = [1e-8, 1e-5];

/// Adjoint against central finite differences and against RK4
/// discretize-then-differentiate, for each tolerance, with respect to the
/// initial state, all parameters and each parameter tensor. `gated` marks
/// whether the rows count towards the verdict.
pub fn gradcheck(problem: &GradcheckProblem, rtols: &[f64], gated: bool) -> Result<Vec<GradcheckRow>> {
    let block = match problem.f.activation() {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
    };
    let mut rows = Vec::new();
    let disc = problem.discretized(RK4_STEPS)?;
    let ranges = problem.param_ranges();
    for &rtol in rtols {
        let cfg = SolverConfig::dopri5(rtol);
        let adj = problem.adjoint(&cfg)?;
        let fd = problem.finite_differences(&cfg, FD_STEP)?;
        for (oracle, reference) in [("finite-difference", &fd), ("rk4-discretized", &disc)] {
            let mut push = |wrt: &str, e: f64| {
                rows.push(GradcheckRow {
                    block: block.into(),
                    oracle: oracle.into(),
                    wrt: wrt.into(),
                    rtol,
                    max_rel_error: e,
                    pass: gated.then_some(e <= GRADCHECK_THRESHOLD),
                })
            };
            push("h0", gradient_error(&adj.0, &reference.0, max_abs(&reference.0)));
            let scale = max_abs(&reference.1);
            push("theta", gradient_error(&adj.1, &reference.1, scale));
            for (name, r) in GradcheckProblem::param_names().iter().zip(&ranges) {
                push(name, gradient_error(&adj.1[r.clone()], &reference.1[r.clone()], scale));
            }
        }
    }
    Ok(rows)
}

/// Tolerance of the converged adjoint used as the ReLU block's reference.
pub const TIGHT_RTOL: f64 = 1e-11;

/// Gated smooth-field rows at the tightest of [`GRADCHECK_RTOLS`], then
/// informational rows: the smooth field at the looser tolerances, and the
/// model's ReLU block against both oracles and against a converged adjoint.
pub fn default_gradcheck(seed: u64) -> Result<Vec<GradcheckRow>> {
    let smooth = GradcheckProblem::random(4, 8, seed)?.with_activation(Activation::Tanh);
    let mut rows = gradcheck(&smooth, &GRADCHECK_RTOLS[..1], true)?;
    rows.extend(gradcheck(&smooth, &GRADCHECK_RTOLS[1..], false)?);
    let relu = GradcheckProblem::random(4, 8, seed)?;
    rows.extend(gradcheck(&relu, &GRADCHECK_RTOLS[..1], false)?);
    let rtol = GRADCHECK_RTOLS[0];
    let adj = relu.adjoint(&SolverConfig::dopri5(rtol))?;
    let tight = relu.adjoint(&SolverConfig::dopri5(TIGHT_RTOL))?;
    for (wrt, got, reference) in [("h0", &adj.0, &tight.0), ("theta", &adj.1, &tight.1)] {
        rows.push(GradcheckRow {
            block: "relu".into(),
            oracle: format!("adjoint-rtol-{TIGHT_RTOL:e}"),
            wrt: wrt.into(),
            rtol,
            max_rel_error: gradient_error(got, reference, max_abs(reference)),
            pass: None,
        });
    }
    Ok(rows)
}

pub fn gradcheck_report(rows: &[GradcheckRow]) -> String {
    let mut s = String::from("block\toracle\twrt\trtol\tmax_rel_error\tresult\n");
    for r in rows {
        s += &format!(
            "{}\t{}\t{}\t{:e}\t{:e}\t{}\n",
            r.block,
            r.oracle,
            r.wrt,
            r.rtol,
            r.max_rel_error,
            match r.pass {
                Some(true) => "pass",
                Some(false) => "FAIL",
                None => "info",
            }
        );
    }
    s
}

/// A copy of `model` whose ODE blocks use tolerance `tol`.
pub fn with_tolerance(model: &Model<f32>, tol: f64) -> Result<Model<f32>> {
    let solver = model.config.solver.clone().unwrap_or_default().with_tol(tol);
    let mut m = Model::build(model.config.clone().with_solver(solver), 0)?;
    m.params = model.params.clone();
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NfeRow {
    pub name: String,
    pub per_block: Vec<usize>,
    pub total: usize,
}

/// Per-image NFE of single-image forward passes.
pub fn nfe_table(model: &Model<f32>, ds: &Dataset) -> Result<Vec<NfeRow>> {
    ds.names
        .iter()
        .zip(&ds.samples)
        .map(|(name, s)| {
            let p = predict(model, &s.image, false)?;
            Ok(NfeRow {
                name: name.clone(),
                per_block: p.nfe_per_block(),
                total: p.total_nfe(),
            })
        })
        .collect()
}

pub const SWEEP_TOLERANCES: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

/// Total NFE per image at each tolerance.
pub fn tolerance_sweep(model: &Model<f32>, ds: &Dataset, tols: &[f64]) -> Result<Vec<Vec<usize>>> {
    let models: Vec<Model<f32>> = tols.iter().map(|&t| with_tolerance(model, t)).collect::<Result<_>>()?;
    ds.samples
        .iter()
        .map(|s| {
            models
                .iter()
                .map(|m| Ok(predict(m, &s.image, false)?.total_nfe()))
                .collect()
        })
        .collect()
}

pub fn nfe_report(model: &Model<f32>, rows: &[NfeRow], sweep: &[Vec<usize>], tols: &[f64]) -> String {
    let mut s = String::from("name");
    for b in model.block_names() {
        s += &format!("\t{b}");
    }
    s += "\ttotal\n";
    for r in rows {
        s += &r.name;
        for n in &r.per_block {
            s += &format!("\t{n}");
        }
        s += &format!("\t{}\n", r.total);
    }
    s += "\nname";
    for t in tols {
        s += &format!("\ttol={t:e}");
    }
    s += "\n";
    for (r, totals) in rows.iter().zip(sweep) {
        s += &r.name;
        for n in totals {
            s += &format!("\t{n}");
        }
        s += "\n";
    }
    s
}
