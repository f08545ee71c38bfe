use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unode_core::adjoint::{adjoint_backward, discretize_then_differentiate, DiffOdeFunc, ScalarLinear};
use unode_core::autodiff::{peak_retained_nodes, reset_peak_nodes};
use unode_core::gradcheck::{finite_diff_grad, max_rel_error};
use unode_core::model::{Activation, ConvOdeFunc};
use unode_core::ode::{solve, Method, SolverConfig};
use unode_core::{Result, Tensor};
use std::sync::Arc;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn smooth_field(channels: usize, seed: u64) -> ConvOdeFunc<f64> {
    ConvOdeFunc::random(channels, true, seed).unwrap().with_activation(Activation::Tanh)
}

/// `<w, h(1)>` for a field with the given flat parameters.
fn endpoint_loss(f: &ConvOdeFunc<f64>, theta: &[f64], h0: &Tensor<f64>, w: &Tensor<f64>, cfg: &SolverConfig) -> Result<f64> {
    let shapes: Vec<&[usize]> = f.parameters().iter().map(|p| p.shape()).collect();
    let params = Tensor::split_flat(theta, &shapes)?.into_iter().map(Arc::new).collect();
    let (h1, _) = solve(&f.with_params(params), h0, 0.0, 1.0, cfg)?;
    h1.dot(w)
}

fn flat_params(f: &ConvOdeFunc<f64>) -> Tensor<f64> {
    let parts: Vec<&Tensor<f64>> = f.parameters().iter().map(|p| p.as_ref()).collect();
    Tensor::concat_flat(&parts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scalar_linear_closed_form(w in -2.0f64..2.0, h0 in -2.0f64..2.0, a in -2.0f64..2.0) {
        let f = ScalarLinear::<f64>::new(w);
        let cfg = SolverConfig::dopri5(1e-10);
        let (h1, _) = solve(&f, &Tensor::scalar(h0), 0.0, 1.0, &cfg).unwrap();
        let (dh0, dw, _) = adjoint_backward(&f, &h1, &Tensor::scalar(a), 0.0, 1.0, &cfg).unwrap();
        let e = w.exp();
        prop_assert!((dh0.item() - a * e).abs() < 1e-7 * (1.0 + (a * e).abs()));
        prop_assert!((dw.item() - a * h0 * e).abs() < 1e-7 * (1.0 + (a * h0 * e).abs()));
    }
}

#[test]
fn adjoint_matches_finite_differences_on_a_smooth_field() {
    let f = smooth_field(2, 1);
    let h0 = random(&[1, 2, 4, 4], 2);
    let w = random(&[1, 2, 4, 4], 3);
    let cfg = SolverConfig::dopri5(1e-10);
    let (h1, _) = solve(&f, &h0, 0.0, 1.0, &cfg).unwrap();
    let (dh0, dtheta, _) = adjoint_backward(&f, &h1, &w, 0.0, 1.0, &cfg).unwrap();

    let theta = flat_params(&f);
    let fd_h = finite_diff_grad(|h| endpoint_loss(&f, theta.data(), h, &w, &cfg), &h0, 1e-4).unwrap();
    let fd_theta = finite_diff_grad(|th| endpoint_loss(&f, th.data(), &h0, &w, &cfg), &theta, 1e-4).unwrap();

    let floor = |g: &Tensor<f64>| 1e-3 * g.max_abs();
    let err_h = max_rel_error(dh0.data(), fd_h.data(), floor(&fd_h));
    let err_t = max_rel_error(dtheta.data(), fd_theta.data(), floor(&fd_theta));
    assert!(err_h < 1e-4, "h0 gradient error {err_h:e}");
    assert!(err_t < 1e-4, "theta gradient error {err_t:e}");
}

#[test]
fn discretized_gradient_is_exact_for_the_discrete_map() {
    let f = smooth_field(2, 4);
    let h0 = random(&[1, 2, 4, 4], 5);
    let w = random(&[1, 2, 4, 4], 6);
    for method in [Method::Euler, Method::Rk4] {
        let cfg = SolverConfig::fixed(method, 3);
        let (dh0, dtheta) = discretize_then_differentiate(&f, &h0, 0.0, 1.0, &cfg, &w).unwrap();
        let theta = flat_params(&f);
        let fd_h = finite_diff_grad(|h| endpoint_loss(&f, theta.data(), h, &w, &cfg), &h0, 1e-5).unwrap();
        let fd_theta = finite_diff_grad(|th| endpoint_loss(&f, th.data(), &h0, &w, &cfg), &theta, 1e-5).unwrap();
        let err_h = max_rel_error(dh0.data(), fd_h.data(), 1e-3 * fd_h.max_abs());
        let err_t = max_rel_error(dtheta.data(), fd_theta.data(), 1e-3 * fd_theta.max_abs());
        assert!(err_h < 1e-6 && err_t < 1e-6, "{method}: {err_h:e} {err_t:e}");
    }
}

#[test]
fn adjoint_and_discretized_gradients_converge_together() {
    let f = smooth_field(2, 7);
    let h0 = random(&[1, 2, 4, 4], 8);
    let w = random(&[1, 2, 4, 4], 9);
    let cfg = SolverConfig::dopri5(1e-10);
    let (h1, _) = solve(&f, &h0, 0.0, 1.0, &cfg).unwrap();
    let (adj_h, adj_t, _) = adjoint_backward(&f, &h1, &w, 0.0, 1.0, &cfg).unwrap();
    let errs: Vec<f64> = [4, 16, 64]
        .iter()
        .map(|&n| {
            let (dh, dt) = discretize_then_differentiate(&f, &h0, 0.0, 1.0, &SolverConfig::fixed(Method::Rk4, n), &w).unwrap();
            let a = max_rel_error(dh.data(), adj_h.data(), 1e-3 * adj_h.max_abs());
            let b = max_rel_error(dt.data(), adj_t.data(), 1e-3 * adj_t.max_abs());
            a.max(b)
        })
        .collect();
    // fourth order: each 4x refinement should cut the gap by about 256
    assert!(errs[2] < 1e-5, "{errs:?}");
    assert!(errs[0] > 100.0 * errs[1] && errs[1] > 100.0 * errs[2], "{errs:?}");
}

#[test]
fn adjoint_memory_does_not_grow_with_evaluations() {
    let f = ConvOdeFunc::<f64>::random(4, true, 10).unwrap().scaled(8.0);
    let h0 = random(&[1, 4, 8, 8], 11);
    let w = random(&[1, 4, 8, 8], 12);
    let mut peaks = vec![];
    let mut nfes = vec![];
    for tol in [1e-2, 1e-6] {
        let cfg = SolverConfig::dopri5(tol);
        let (h1, s) = solve(&f, &h0, 0.0, 1.0, &cfg).unwrap();
        reset_peak_nodes();
        let (_, _, back) = adjoint_backward(&f, &h1, &w, 0.0, 1.0, &cfg).unwrap();
        peaks.push(peak_retained_nodes());
        nfes.push(s.nfe + back.nfe);
    }
    assert_eq!(peaks[0], peaks[1], "nfe {nfes:?}");
    assert!(nfes[1] > 2 * nfes[0], "{nfes:?}");

    // recording the whole solve grows linearly with the step count
    let mut recorded = vec![];
    for n in [2, 4, 8] {
        reset_peak_nodes();
        discretize_then_differentiate(&f, &h0, 0.0, 1.0, &SolverConfig::fixed(Method::Rk4, n), &w).unwrap();
        recorded.push(peak_retained_nodes());
    }
    assert_eq!(recorded[2] - recorded[1], 2 * (recorded[1] - recorded[0]), "{recorded:?}");
    assert!(recorded[0] > peaks[0]);
}

#[test]
fn adjoint_rejects_dopri5_recording_and_shape_mismatch() {
    let f = smooth_field(2, 13);
    let h0 = random(&[1, 2, 4, 4], 14);
    let cfg = SolverConfig::dopri5(1e-3);
    assert!(discretize_then_differentiate(&f, &h0, 0.0, 1.0, &cfg, &h0).is_err());
    assert!(adjoint_backward(&f, &h0, &random(&[1, 2, 4, 2], 15), 0.0, 1.0, &cfg).is_err());
}
