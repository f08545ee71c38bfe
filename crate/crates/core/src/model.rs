//! U-Net, U-ResNet and U-Node.
//!
//! All three share one encoder-decoder skeleton: `levels - 1` encoder stages
//! (block, then 2x maxpool), a bottleneck block, and a mirrored decoder
//! (nearest 2x upsample, concat skip, block), followed by a 1x1 head.
//!
//! Blocks differ in their internals:
//!
//! - `Plain`: conv3x3 -> GN -> relu -> conv3x3 -> GN -> relu.
//! - `Residual`: 1x1 projection when channels change, then `h + f(h)`.
//! - `Ode`: same projection, then `h(1)` of `dh/dt = f(t, h)` from `h(0) = h`.
//!
//! `f` is the plain conv stack, optionally fed `t` as an extra constant
//! input channel.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{self, DiffOdeFunc};
use crate::autodiff::{CustomBackward, Tape, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::Padding;
use crate::ode::{self, Method, NfeCounter, OdeFunc, SolveStats, SolverConfig};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const GN_EPS: f64 = 1e-5;
pub const MAX_GROUPS: usize = 32;

/// Number of groups for group norm over `c` channels: the largest divisor of
/// `c` not above 32.
pub fn gn_groups(c: usize) -> usize {
    (1..=MAX_GROUPS.min(c)).rev().find(|g| c % g == 0).unwrap_or(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Plain,
    Residual,
    Ode,
}

impl FromStr for BlockKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "plain" => Ok(Self::Plain),
            "residual" => Ok(Self::Residual),
            "ode" => Ok(Self::Ode),
            _ => Err(invalid!("unknown block kind {s:?}")),
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Plain => "plain",
            Self::Residual => "residual",
            Self::Ode => "ode",
        })
    }
}

/// How gradients flow through ODE blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OdeGradient {
    /// Backward augmented solve; constant memory.
    Adjoint,
    /// Record the fixed-step solve on the tape (Euler/RK4 only).
    Discretize,
}

impl FromStr for OdeGradient {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adjoint" => Ok(Self::Adjoint),
            "discretize" => Ok(Self::Discretize),
            _ => Err(invalid!("unknown ode gradient mode {s:?}")),
        }
    }
}

impl fmt::Display for OdeGradient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adjoint => "adjoint",
            Self::Discretize => "discretize",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub levels: usize,
    /// Channel width per level, bottleneck last.
    pub widths: Vec<usize>,
    pub block_kind: BlockKind,
    /// Present iff `block_kind` is `Ode`.
    pub solver: Option<SolverConfig>,
    pub in_channels: usize,
    /// Full-mask head (2 classes) followed by the eroded-mask head.
    pub out_channels: usize,
    pub time_conditioning: bool,
    pub ode_gradient: OdeGradient,
}

pub fn doubling_widths(base: usize, levels: usize) -> Vec<usize> {
    (0..levels).map(|i| base << i).collect()
}

impl ArchConfig {
    fn with(kind: BlockKind, base: usize) -> Self {
        Self {
            levels: 5,
            widths: doubling_widths(base, 5),
            block_kind: kind,
            solver: (kind == BlockKind::Ode).then(|| SolverConfig::dopri5(1e-3)),
            in_channels: 3,
            out_channels: 4,
            time_conditioning: true,
            ode_gradient: OdeGradient::Adjoint,
        }
    }

    pub fn unet() -> Self {
        Self::with(BlockKind::Plain, 64)
    }

    pub fn uresnet() -> Self {
        Self::with(BlockKind::Residual, 16)
    }

    pub fn unode() -> Self {
        Self::with(BlockKind::Ode, 16)
    }

    /// Look up `unet`, `uresnet` or `unode`.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "unet" => Ok(Self::unet()),
            "uresnet" => Ok(Self::uresnet()),
            "unode" => Ok(Self::unode()),
            _ => Err(invalid!("unknown architecture {name:?}")),
        }
    }

    pub fn with_base(mut self, base: usize) -> Self {
        self.widths = doubling_widths(base, self.levels);
        self
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        let base = self.widths.first().copied().unwrap_or(1);
        self.levels = levels;
        self.widths = doubling_widths(base, levels);
        self
    }

    pub fn with_solver(mut self, solver: SolverConfig) -> Self {
        self.solver = Some(solver);
        self
    }

    pub fn with_kind(mut self, kind: BlockKind) -> Self {
        self.block_kind = kind;
        if kind == BlockKind::Ode {
            self.solver.get_or_insert_with(|| SolverConfig::dopri5(1e-3));
        } else {
            self.solver = None;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(invalid!("need at least 2 levels, got {}", self.levels));
        }
        if self.widths.len() != self.levels {
            return Err(invalid!(
                "{} widths for {} levels",
                self.widths.len(),
                self.levels
            ));
        }
        if self.widths.contains(&0) || self.in_channels == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        if self.out_channels != 4 {
            return Err(invalid!(
                "the dual 2-class head needs 4 output channels, got {}",
                self.out_channels
            ));
        }
        match (self.block_kind, &self.solver) {
            (BlockKind::Ode, Some(s)) => {
                s.validate()?;
                if self.ode_gradient == OdeGradient::Discretize && s.method == Method::Dopri5 {
                    return Err(invalid!("discretize gradients need a fixed-step method"));
                }
            }
            (BlockKind::Ode, None) => return Err(invalid!("ode blocks need a solver")),
            (_, Some(_)) => return Err(invalid!("solver given for a non-ode model")),
            _ => {}
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// `key=value` lines that [`ArchConfig::from_text`] reads back exactly.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let mut s = format!(
            "levels={}\nwidths={}\nblock_kind={}\nin_channels={}\nout_channels={}\ntime_conditioning={}\node_gradient={}\n",
            self.levels,
            widths.join(","),
            self.block_kind,
            self.in_channels,
            self.out_channels,
            self.time_conditioning,
            self.ode_gradient,
        );
        if let Some(c) = &self.solver {
            s += &format!(
                "solver.method={}\nsolver.rtol={:e}\nsolver.atol={:e}\nsolver.n_steps={}\nsolver.safety={:e}\nsolver.min_factor={:e}\nsolver.max_factor={:e}\nsolver.max_steps={}\n",
                c.method, c.rtol, c.atol, c.n_steps, c.safety, c.min_factor, c.max_factor, c.max_steps
            );
            if let Some(h) = c.initial_step {
                s += &format!("solver.initial_step={h:e}\n");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::unode();
        cfg.solver = None;
        let mut solver: Option<SolverConfig> = None;
        let num = |k: &str, v: &str| -> Result<f64> {
            v.parse().map_err(|_| invalid!("bad value for {k}: {v:?}"))
        };
        let int = |k: &str, v: &str| -> Result<usize> {
            v.parse().map_err(|_| invalid!("bad value for {k}: {v:?}"))
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid!("expected key=value, got {line:?}"))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(sk) = k.strip_prefix("solver.") {
                let s = solver.get_or_insert_with(SolverConfig::default);
                match sk {
                    "method" => s.method = v.parse()?,
                    "rtol" => s.rtol = num(k, v)?,
                    "atol" => s.atol = num(k, v)?,
                    "n_steps" => s.n_steps = int(k, v)?,
                    "safety" => s.safety = num(k, v)?,
                    "min_factor" => s.min_factor = num(k, v)?,
                    "max_factor" => s.max_factor = num(k, v)?,
                    "max_steps" => s.max_steps = int(k, v)?,
                    "initial_step" => s.initial_step = Some(num(k, v)?),
                    _ => return Err(invalid!("unknown key {k}")),
                }
                continue;
            }
            match k {
                "levels" => cfg.levels = int(k, v)?,
                "widths" => {
                    cfg.widths = v
                        .split(',')
                        .map(|w| int(k, w.trim()))
                        .collect::<Result<_>>()?
                }
                "block_kind" => cfg.block_kind = v.parse()?,
                "in_channels" => cfg.in_channels = int(k, v)?,
                "out_channels" => cfg.out_channels = int(k, v)?,
                "time_conditioning" => {
                    cfg.time_conditioning = v.parse().map_err(|_| invalid!("bad bool {v:?}"))?
                }
                "ode_gradient" => cfg.ode_gradient = v.parse()?,
                _ => return Err(invalid!("unknown key {k}")),
            }
        }
        cfg.solver = solver;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter ids of conv -> GN.
#[derive(Clone, Copy, Debug)]
struct ConvGn {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct Block {
    name: String,
    c_out: usize,
    proj: Option<(usize, usize)>,
    convs: [ConvGn; 2],
}

impl Block {
    /// The eight parameters of the conv stack, in `ConvOdeFunc` order.
    fn stack_ids(&self) -> [usize; 8] {
        let [a, b] = self.convs;
        [a.w, a.b, a.gamma, a.beta, b.w, b.b, b.gamma, b.beta]
    }
}

/// NFE record of one ODE block for every sample of a forward pass. The
/// batch is integrated as one state, so samples share their statistics;
/// forward single images for per-image counts.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTrace {
    pub block: String,
    pub per_sample: Vec<SolveStats>,
}

/// Total NFE per sample summed over blocks.
pub fn total_nfe(trace: &[BlockTrace]) -> Vec<usize> {
    let n = trace.first().map_or(0, |b| b.per_sample.len());
    (0..n)
        .map(|i| trace.iter().map(|b| b.per_sample[i].nfe).sum())
        .collect()
}

pub struct Model<E: Element = f32> {
    pub config: ArchConfig,
    pub params: ParamStore<E>,
    blocks: Vec<Block>,
    head: (usize, usize),
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform<E: Element>(&mut self, shape: &[usize], bound: f64) -> Tensor<E> {
        Tensor::from_fn(shape, |_| E::of(self.rng.random_range(-bound..=bound)))
    }

    fn conv<E: Element>(
        &mut self,
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Result<(usize, usize)> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        let w = store.insert(format!("{name}.w"), self.uniform(&[c_out, c_in, k, k], bound))?;
        let b = store.insert(format!("{name}.b"), self.uniform(&[c_out], bound))?;
        Ok((w, b))
    }

    fn conv_gn<E: Element>(
        &mut self,
        store: &mut ParamStore<E>,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<ConvGn> {
        let (w, b) = self.conv(store, name, c_in, c_out, 3)?;
        let gamma = store.insert(format!("{name}.gn.gamma"), Tensor::ones(&[c_out]))?;
        let beta = store.insert(format!("{name}.gn.beta"), Tensor::zeros(&[c_out]))?;
        Ok(ConvGn { w, b, gamma, beta })
    }
}

impl<E: Element> Model<E> {
    /// Build the network with parameters drawn from `seed`.
    pub fn build(config: ArchConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut store = ParamStore::new();
        let w = &config.widths;
        let l = config.levels;
        let tc = usize::from(config.time_conditioning);
        let mut blocks = Vec::new();
        let mut make = |store: &mut ParamStore<E>, name: String, c_in: usize, c_out: usize| -> Result<Block> {
            let (proj, first_in) = match config.block_kind {
                BlockKind::Plain => (None, c_in),
                _ => {
                    let p = if c_in != c_out {
                        Some(init.conv(store, &format!("{name}.proj"), c_in, c_out, 1)?)
                    } else {
                        None
                    };
                    (p, c_out + tc)
                }
            };
            let c1 = init.conv_gn(store, &format!("{name}.conv1"), first_in, c_out)?;
            let c2 = init.conv_gn(store, &format!("{name}.conv2"), c_out, c_out)?;
            Ok(Block {
                name,
                c_out,
                proj,
                convs: [c1, c2],
            })
        };
        let mut c = config.in_channels;
        for (i, &wi) in w.iter().enumerate().take(l - 1) {
            blocks.push(make(&mut store, format!("enc{i}"), c, wi)?);
            c = wi;
        }
        blocks.push(make(&mut store, "mid".into(), c, w[l - 1])?);
        for i in (0..l - 1).rev() {
            blocks.push(make(&mut store, format!("dec{i}"), w[i + 1] + w[i], w[i])?);
        }
        let head = init.conv(&mut store, "head", w[0], config.out_channels, 1)?;
        Ok(Self {
            config,
            params: store,
            blocks,
            head,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.count()
    }

    pub fn num_ode_blocks(&self) -> usize {
        if self.config.block_kind == BlockKind::Ode {
            self.blocks.len()
        } else {
            0
        }
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.name.as_str()).collect()
    }

    /// Vector field of block `i` using the current parameter values.
    pub fn ode_func(&self, i: usize) -> ConvOdeFunc<E> {
        let b = &self.blocks[i];
        let params = b
            .stack_ids()
            .iter()
            .map(|&id| Arc::clone(self.params.value(id)))
            .collect();
        ConvOdeFunc::new(params, b.c_out, self.config.time_conditioning)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = shape else {
            return Err(shape_err!("expected [B, C, H, W] input, got {shape:?}"));
        };
        let d = self.config.divisor();
        if *c != self.config.in_channels {
            return Err(shape_err!(
                "model takes {} input channels, got {c}",
                self.config.in_channels
            ));
        }
        if h % d != 0 || w % d != 0 || *h == 0 || *w == 0 {
            return Err(shape_err!(
                "input extents {h}x{w} must be positive multiples of {d}"
            ));
        }
        Ok(())
    }

    /// Record the network on `tape`. `vars` are the parameter vars in store
    /// order, as returned by [`ParamStore::register`].
    pub fn forward_on(
        &self,
        tape: &mut Tape<E>,
        x: Var,
        vars: &[Var],
    ) -> Result<(Var, Vec<BlockTrace>)> {
        self.check_input(tape.value(x).shape())?;
        if vars.len() != self.params.len() {
            return Err(invalid!("{} vars for {} parameters", vars.len(), self.params.len()));
        }
        let l = self.config.levels;
        let mut trace = Vec::new();
        let mut skips = Vec::new();
        let mut h = x;
        for i in 0..l - 1 {
            h = self.block(tape, i, h, vars, &mut trace)?;
            skips.push(h);
            h = tape.maxpool2(h)?;
        }
        h = self.block(tape, l - 1, h, vars, &mut trace)?;
        for i in l..self.blocks.len() {
            let up = tape.upsample2(h)?;
            let skip = skips.pop().expect("one skip per decoder block");
            let cat = tape.concat(up, skip)?;
            h = self.block(tape, i, cat, vars, &mut trace)?;
        }
        let (hw, hb) = self.head;
        let out = tape.conv2d(h, vars[hw], Some(vars[hb]), 1, Padding::Zero(0))?;
        Ok((out, trace))
    }

    fn block(
        &self,
        tape: &mut Tape<E>,
        index: usize,
        x: Var,
        vars: &[Var],
        trace: &mut Vec<BlockTrace>,
    ) -> Result<Var> {
        let b = &self.blocks[index];
        let ids = b.stack_ids();
        let pv: Vec<Var> = ids.iter().map(|&i| vars[i]).collect();
        if self.config.block_kind == BlockKind::Plain {
            return conv_stack(tape, x, &pv, None, Activation::Relu);
        }
        let h = match b.proj {
            Some((w, bias)) => tape.conv2d(x, vars[w], Some(vars[bias]), 1, Padding::Zero(0))?,
            None => x,
        };
        let f = self.ode_func(index);
        match self.config.block_kind {
            BlockKind::Residual => {
                let fh = f.record(tape, 0.0, h, &pv)?;
                tape.add(h, fh)
            }
            BlockKind::Ode => {
                let cfg = self.config.solver.as_ref().expect("validated");
                match self.config.ode_gradient {
                    OdeGradient::Discretize => {
                        let before = f.counter().get();
                        let out = adjoint::record_fixed_solve(&f, tape, h, &pv, 0.0, 1.0, cfg)?;
                        let nfe = f.counter().get() - before;
                        let n = tape.value(h).shape()[0];
                        let stats = SolveStats {
                            nfe,
                            steps_accepted: cfg.n_steps,
                            steps_rejected: 0,
                            final_step_size: 1.0 / cfg.n_steps as f64,
                        };
                        trace.push(BlockTrace {
                            block: b.name.clone(),
                            per_sample: vec![stats; n],
                        });
                        Ok(out)
                    }
                    OdeGradient::Adjoint => {
                        let (value, stats) = ode::solve(&f, tape.value(h), 0.0, 1.0, cfg)?;
                        let n = value.shape()[0];
                        trace.push(BlockTrace {
                            block: b.name.clone(),
                            per_sample: vec![stats; n],
                        });
                        let mut inputs = vec![h];
                        inputs.extend(&pv);
                        let rule = OdeBlockBackward {
                            f,
                            cfg: cfg.clone(),
                        };
                        Ok(tape.custom(inputs, value, Box::new(rule)))
                    }
                }
            }
            BlockKind::Plain => unreachable!(),
        }
    }

    /// Inference: logits and the NFE trace.
    pub fn forward(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Vec<BlockTrace>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.constant(Arc::clone(&p.value)))
            .collect();
        let (out, trace) = self.forward_on(&mut tape, xv, &vars)?;
        let logits = tape.value(out).clone();
        if !logits.all_finite() {
            return Err(Error::NonFinite("forward produced non-finite logits".into()));
        }
        Ok((logits, trace))
    }

    /// Forward, dual-head loss and backward. Gradients are added to the
    /// store's accumulators; returns the loss and the NFE trace.
    pub fn loss_and_grad(
        &mut self,
        x: &Tensor<E>,
        full: Arc<Vec<usize>>,
        eroded: Arc<Vec<usize>>,
    ) -> Result<(f64, Vec<BlockTrace>)> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let vars = self.params.register(&mut tape);
        let (logits, trace) = self.forward_on(&mut tape, xv, &vars)?;
        let loss = dual_head_loss(&mut tape, logits, full, eroded)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {value}")));
        }
        let grads = tape.backward(loss)?;
        self.params.accumulate(&grads, &vars)?;
        Ok((value, trace))
    }

    /// Dual-head loss without gradients.
    pub fn loss(&self, x: &Tensor<E>, full: Arc<Vec<usize>>, eroded: Arc<Vec<usize>>) -> Result<f64> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward(x)?;
        let lv = tape.leaf(logits, false);
        let loss = dual_head_loss(&mut tape, lv, full, eroded)?;
        Ok(tape.value(loss).item().as_f64())
    }

    /// Per-head softmax of the logits: channels `[p_bg, p_fg]` for the full
    /// mask followed by the same for the eroded mask.
    pub fn predict_probs(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Vec<BlockTrace>)> {
        let (logits, trace) = self.forward(x)?;
        Ok((head_softmax(&logits)?, trace))
    }
}

/// Softmax applied separately to channels 0..2 and 2..4.
pub fn head_softmax<E: Element>(logits: &Tensor<E>) -> Result<Tensor<E>> {
    use crate::kernels::{concat_channels, slice_channels, softmax};
    let a = softmax(&slice_channels(logits, 0, 2)?, 1)?;
    let b = softmax(&slice_channels(logits, 2, 2)?, 1)?;
    concat_channels(&a, &b)
}

/// Mean of the per-head cross entropies.
pub fn dual_head_loss<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    full: Arc<Vec<usize>>,
    eroded: Arc<Vec<usize>>,
) -> Result<Var> {
    let a = tape.slice_channels(logits, 0, 2)?;
    let b = tape.slice_channels(logits, 2, 2)?;
    let la = tape.cross_entropy(a, full)?;
    let lb = tape.cross_entropy(b, eroded)?;
    let half = E::of(0.5);
    tape.lincomb(&[(la, half), (lb, half)])
}

/// Nonlinearity after each group norm of a conv stack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
    /// Smooth variant for gradient checks.
    Tanh,
}

/// conv3x3 -> GN -> activation, twice. `params` holds eight vars: (w, b,
/// gamma, beta) per conv. `t` adds a constant time channel to the first conv
/// input.
fn conv_stack<E: Element>(
    tape: &mut Tape<E>,
    x: Var,
    params: &[Var],
    t: Option<f64>,
    act: Activation,
) -> Result<Var> {
    let mut h = x;
    if let Some(t) = t {
        let [b, _, hh, ww] = *tape.value(x).shape() else {
            return Err(shape_err!("expected rank-4 state"));
        };
        let tc = tape.leaf(Tensor::full(&[b, 1, hh, ww], E::of(t)), false);
        h = tape.concat(x, tc)?;
    }
    for p in params.chunks(4) {
        let c = tape.conv2d(h, p[0], Some(p[1]), 1, Padding::Zero(1))?;
        let channels = tape.value(c).shape()[1];
        let n = tape.group_norm(c, gn_groups(channels), p[2], p[3], GN_EPS)?;
        h = match act {
            Activation::Relu => tape.relu(n),
            Activation::Tanh => tape.tanh(n),
        };
    }
    Ok(h)
}

/// The block vector field `f(t, h)`.
pub struct ConvOdeFunc<E: Element> {
    params: Vec<Arc<Tensor<E>>>,
    channels: usize,
    time_conditioning: bool,
    activation: Activation,
    counter: NfeCounter,
}

impl<E: Element> ConvOdeFunc<E> {
    /// `params`: conv1 (w, b), GN1 (gamma, beta), conv2 (w, b), GN2 (gamma, beta).
    pub fn new(params: Vec<Arc<Tensor<E>>>, channels: usize, time_conditioning: bool) -> Self {
        Self {
            params,
            channels,
            time_conditioning,
            activation: Activation::Relu,
            counter: NfeCounter::default(),
        }
    }

    /// Random field with the model's initialization.
    pub fn random(channels: usize, time_conditioning: bool, seed: u64) -> Result<Self> {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut store = ParamStore::<E>::new();
        let c_in = channels + usize::from(time_conditioning);
        init.conv_gn(&mut store, "conv1", c_in, channels)?;
        init.conv_gn(&mut store, "conv2", channels, channels)?;
        let params = store.iter().map(|p| Arc::clone(&p.value)).collect();
        Ok(Self::new(params, channels, time_conditioning))
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// A copy with every parameter multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        let params = self
            .params
            .iter()
            .map(|p| Arc::new(p.scale(E::of(s))))
            .collect();
        self.with_params(params)
    }

    pub fn with_params(&self, params: Vec<Arc<Tensor<E>>>) -> Self {
        Self::new(params, self.channels, self.time_conditioning).with_activation(self.activation)
    }
}

impl<E: Element> OdeFunc<E> for ConvOdeFunc<E> {
    fn eval(&self, t: f64, h: &Tensor<E>) -> Result<Tensor<E>> {
        adjoint::eval_recorded(self, t, h)
    }

    fn nfe(&self) -> usize {
        self.counter.get()
    }
}

impl<E: Element> DiffOdeFunc<E> for ConvOdeFunc<E> {
    fn parameters(&self) -> &[Arc<Tensor<E>>] {
        &self.params
    }

    fn record(&self, tape: &mut Tape<E>, t: f64, h: Var, params: &[Var]) -> Result<Var> {
        if params.len() != 8 {
            return Err(invalid!("conv field takes 8 parameters, got {}", params.len()));
        }
        conv_stack(tape, h, params, self.time_conditioning.then_some(t), self.activation)
    }

    fn counter(&self) -> &NfeCounter {
        &self.counter
    }
}

struct OdeBlockBackward<E: Element> {
    f: ConvOdeFunc<E>,
    cfg: SolverConfig,
}

impl<E: Element> CustomBackward<E> for OdeBlockBackward<E> {
    fn backward(
        &self,
        output: &Tensor<E>,
        grad_output: &Tensor<E>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<E>>>> {
        let (dh, dtheta, _) =
            adjoint::adjoint_backward(&self.f, output, grad_output, 0.0, 1.0, &self.cfg)?;
        let shapes: Vec<&[usize]> = self.f.params.iter().map(|p| p.shape()).collect();
        let parts = Tensor::split_flat(&dtheta.data()[..self.f.num_params()], &shapes)?;
        let mut out = vec![needs[0].then_some(dh)];
        out.extend(parts.into_iter().zip(&needs[1..]).map(|(p, &need)| need.then_some(p)));
        Ok(out)
    }
}

/// Receptive field in pixels of one output pixel, by the recursion
/// `r += (k - 1) * j; j *= stride` over the encoder-decoder path. Upsampling
/// halves `j`. Each entry of `nfe_per_block` is how many times the
/// corresponding ODE block evaluates its field; missing entries count once.
pub fn receptive_field(config: &ArchConfig, nfe_per_block: &[usize]) -> usize {
    let mut r = 1.0f64;
    let mut j = 1.0f64;
    let n_blocks = 2 * config.levels - 1;
    let conv = |r: &mut f64, j: f64, k: usize| *r += (k as f64 - 1.0) * j;
    let block = |i: usize, r: &mut f64, j: f64| {
        let reps = match config.block_kind {
            BlockKind::Ode => nfe_per_block.get(i).copied().unwrap_or(1),
            _ => 1,
        };
        for _ in 0..2 * reps {
            conv(r, j, 3);
        }
    };
    for i in 0..n_blocks {
        if i >= config.levels {
            j /= 2.0;
        }
        block(i, &mut r, j);
        if i + 1 < config.levels {
            // 2x2 maxpool, stride 2
            r += j;
            j *= 2.0;
        }
    }
    r.round() as usize
}
