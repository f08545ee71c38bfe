use std::sync::Arc;

use proptest::prelude::*;
use unode_core::model::{ArchConfig, BlockKind, Model, OdeGradient};
use unode_core::ode::{Method, SolverConfig};
use unode_core::Tensor;

fn tiny(kind: BlockKind, levels: usize, base: usize) -> ArchConfig {
    ArchConfig::unode().with_kind(kind).with_levels(levels).with_base(base)
}

fn image(shape: &[usize], phase: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| (i as f64 * 0.61 + phase).sin())
}

/// Closed-form count: conv+GN is `9 c_in c_out + 3 c_out`; residual and ODE
/// blocks add a time channel and a 1x1 projection when widths change.
fn expected_params(c: &ArchConfig) -> usize {
    let conv_gn = |ci: usize, co: usize| 9 * ci * co + 3 * co;
    let tc = usize::from(c.time_conditioning);
    let block = |ci: usize, co: usize| match c.block_kind {
        BlockKind::Plain => conv_gn(ci, co) + conv_gn(co, co),
        _ => {
            let proj = if ci != co { ci * co + co } else { 0 };
            proj + conv_gn(co + tc, co) + conv_gn(co, co)
        }
    };
    let w = &c.widths;
    let l = c.levels;
    let mut total = 0;
    let mut ci = c.in_channels;
    for &wi in &w[..l] {
        total += block(ci, wi);
        ci = wi;
    }
    for i in 0..l - 1 {
        total += block(w[i + 1] + w[i], w[i]);
    }
    total + c.out_channels * w[0] + c.out_channels
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parameter_count_formula(levels in 2usize..6, base in 1usize..9, kind in 0usize..3, tc in any::<bool>()) {
        let kind = [BlockKind::Plain, BlockKind::Residual, BlockKind::Ode][kind];
        let mut c = tiny(kind, levels, base);
        c.time_conditioning = tc;
        let m = Model::<f32>::build(c.clone(), 0).unwrap();
        prop_assert_eq!(m.count_parameters(), expected_params(&c));
    }
}

#[test]
fn build_is_deterministic_in_the_seed() {
    let c = tiny(BlockKind::Ode, 3, 2);
    let a = Model::<f64>::build(c.clone(), 5).unwrap();
    let b = Model::<f64>::build(c.clone(), 5).unwrap();
    let d = Model::<f64>::build(c, 6).unwrap();
    assert_eq!(a.params.flatten(), b.params.flatten());
    assert_ne!(a.params.flatten(), d.params.flatten());
}

/// Zero every conv-stack parameter so each block's field vanishes.
fn zero_fields(m: &mut Model<f64>) {
    let ids: Vec<usize> = m
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| p.name.contains(".conv"))
        .map(|(i, _)| i)
        .collect();
    for id in ids {
        let shape = m.params.get(id).value.shape().to_vec();
        m.params.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
}

#[test]
fn vanishing_field_makes_blocks_identities() {
    let mut ode = Model::<f64>::build(tiny(BlockKind::Ode, 3, 2), 1).unwrap();
    let mut res = Model::<f64>::build(tiny(BlockKind::Residual, 3, 2), 1).unwrap();
    zero_fields(&mut ode);
    zero_fields(&mut res);
    let x = image(&[2, 3, 8, 8], 0.3);
    let (a, trace) = ode.forward(&x).unwrap();
    let (b, _) = res.forward(&x).unwrap();
    assert_eq!(a.data(), b.data());
    // one trial step covers the span: first evaluation plus six stages
    for t in &trace {
        assert!(t.per_sample.iter().all(|s| s.nfe == 7 && s.steps_accepted == 1), "{t:?}");
    }
}

#[test]
fn samples_do_not_interact() {
    let xs = [image(&[1, 3, 8, 8], 0.0), image(&[1, 3, 8, 8], 1.0).scale(3.0)];
    let joint = Tensor::stack_batch(&xs).unwrap();
    for kind in [BlockKind::Plain, BlockKind::Residual] {
        let m = Model::<f64>::build(tiny(kind, 3, 2), 2).unwrap();
        let (y, _) = m.forward(&joint).unwrap();
        for (i, x) in xs.iter().enumerate() {
            let (yi, _) = m.forward(x).unwrap();
            let d = y.batch_item(i).unwrap().sub(&yi).unwrap().max_abs();
            assert!(d < 1e-12, "{kind}: {d:e}");
        }
    }
    // the adaptive solve shares steps across the batch, so items agree only
    // up to a gap that closes with the tolerance
    let gaps: Vec<f64> = [1e-3, 1e-7, 1e-11]
        .iter()
        .map(|&tol| {
            let mut c = tiny(BlockKind::Ode, 3, 2);
            c.solver = Some(SolverConfig::dopri5(tol));
            let m = Model::<f64>::build(c, 2).unwrap();
            let (y, _) = m.forward(&joint).unwrap();
            (0..2)
                .map(|i| {
                    let (yi, _) = m.forward(&xs[i]).unwrap();
                    y.batch_item(i).unwrap().sub(&yi).unwrap().max_abs()
                })
                .fold(0.0, f64::max)
        })
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2] && gaps[2] < 1e-6, "{gaps:?}");
}

fn mode_gap(steps: usize) -> f64 {
    let mut c = tiny(BlockKind::Ode, 2, 2);
    c.solver = Some(SolverConfig::fixed(Method::Rk4, steps));
    let x = image(&[1, 3, 4, 4], 0.5);
    let full = Arc::new((0..16).map(|i| i % 2).collect::<Vec<_>>());
    let eroded = Arc::new((0..16).map(|i| usize::from(i % 5 == 0)).collect::<Vec<_>>());
    let mut disc = Model::<f64>::build(c.clone(), 4).unwrap();
    disc.config.ode_gradient = OdeGradient::Discretize;
    let mut adj = Model::<f64>::build(c, 4).unwrap();
    let (la, _) = disc.loss_and_grad(&x, full.clone(), eroded.clone()).unwrap();
    let (lb, _) = adj.loss_and_grad(&x, full, eroded).unwrap();
    assert!((la - lb).abs() < 1e-12);
    let (ga, gb) = (disc.params.flat_grads(), adj.params.flat_grads());
    let scale = ga.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ga.iter().zip(&gb).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

#[test]
fn gradient_modes_agree_as_steps_refine() {
    // the adjoint integrates the continuous backward system with the same
    // fixed-step solver, so it only approaches the exact discrete gradient
    let gaps = [mode_gap(2), mode_gap(8), mode_gap(32)];
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2] && gaps[2] < 1e-2, "{gaps:?}");
}


#[test]
fn checkpoint_restores_an_identical_model() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let c = tiny(BlockKind::Ode, 3, 2);
    let a = Model::<f32>::build(c.clone(), 21).unwrap();
    unode_core::checkpoint::save_store(&a.params, &path).unwrap();
    let mut b = Model::<f32>::build(c, 22).unwrap();
    unode_core::checkpoint::load_into_store(&mut b.params, &path).unwrap();
    let bits = |m: &Model<f32>| m.params.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    let x = Tensor::<f32>::from_fn(&[1, 3, 8, 8], |i| (i as f32 * 0.3).cos());
    assert_eq!(a.forward(&x).unwrap().0, b.forward(&x).unwrap().0);

    let mut other = Model::<f32>::build(tiny(BlockKind::Plain, 3, 2), 0).unwrap();
    assert!(unode_core::checkpoint::load_into_store(&mut other.params, &path).is_err());
}
