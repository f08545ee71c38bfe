// Every tape operation against a naive forward oracle and central differences.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unode_core::autodiff::{Tape, Var};
use unode_core::gradcheck::{finite_diff_grad, max_rel_error};
use unode_core::kernels::{self, Padding};
use unode_core::{Result, Tensor};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Checks the vector-Jacobian product of `op` against finite differences of
/// `<seed, op(x)>` for every input.
fn check_op<F>(inputs: Vec<Tensor<f64>>, seed: u64, op: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let run = |xs: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let out = op(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, _, out) = run(&inputs).unwrap();
    let weights = random(tape.value(out).shape(), &mut rng);
    drop(tape);

    let (mut tape, vars, out) = run(&inputs).unwrap();
    let grads = tape.backward_with(out, weights.clone()).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt_or_zeros(vars[i], x.shape());
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.clone();
                xs[i] = probe.clone();
                let (tape, _, out) = run(&xs)?;
                tape.value(out).dot(&weights)
            },
            x,
            STEP,
        )
        .unwrap();
        let err = max_rel_error(analytic.data(), numeric.data(), 1e-3);
        assert!(err < TOL, "input {i}: rel error {err:e}");
    }
}

/// Direct cross-correlation loop.
fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: Padding) -> Tensor<f64> {
    let (n, ci, h, w) = x.dims4().unwrap();
    let (co, _, kh, kw) = k.dims4().unwrap();
    let p = pad.width();
    let ho = (h + 2 * p - kh) / stride + 1;
    let wo = (w + 2 * p - kw) / stride + 1;
    let reflect = |i: isize, len: usize| -> Option<usize> {
        let n = len as isize;
        match pad {
            _ if (0..n).contains(&i) => Some(i as usize),
            Padding::Zero(_) => None,
            Padding::Reflect(_) => Some(if i < 0 { -i } else { 2 * (n - 1) - i } as usize),
        }
    };
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for bi in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xo in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let sy = reflect((y * stride + dy) as isize - p as isize, h);
                                let sx = reflect((xo * stride + dx) as isize - p as isize, w);
                                if let (Some(sy), Some(sx)) = (sy, sx) {
                                    acc += x.data()[((bi * ci + c) * h + sy) * w + sx]
                                        * k.data()[((o * ci + c) * kh + dy) * kw + dx];
                                }
                            }
                        }
                    }
                    out.data_mut()[((bi * co + o) * ho + y) * wo + xo] = acc;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loop(
        n in 1usize..3, ci in 1usize..4, co in 1usize..4,
        h in 3usize..9, w in 3usize..9, k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, reflect in any::<bool>(), bias in any::<bool>(), seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // strided output must tile the padded extent exactly
        let (h, w) = if stride == 2 { (h | 1, w | 1) } else { (h, w) };
        let x = random(&[n, ci, h, w], &mut rng);
        let kern = random(&[co, ci, k, k], &mut rng);
        let b = random(&[co], &mut rng);
        let p = k / 2;
        let pad = if reflect { Padding::Reflect(p) } else { Padding::Zero(p) };
        let b = bias.then_some(&b);
        let (got, _) = kernels::conv2d_forward(&x, &kern, b, stride, pad).unwrap();
        let want = naive_conv(&x, &kern, b, stride, pad);
        prop_assert_eq!(got.shape(), want.shape());
        prop_assert!(max_rel_error(got.data(), want.data(), 1.0) < 1e-12);
    }

    #[test]
    fn group_norm_standardises_each_group(
        c in prop::sample::select(vec![2usize, 4, 6]), hw in 2usize..6, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = c / 2;
        let x = random(&[2, c, hw, hw], &mut rng).scale(3.0);
        let (y, _) = kernels::group_norm_forward(&x, groups, &Tensor::ones(&[c]), &Tensor::zeros(&[c]), 1e-12).unwrap();
        let n = 2 * hw * hw;
        for chunk in y.data().chunks(n) {
            let mean = chunk.iter().sum::<f64>() / n as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(k in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, k, 3, 3], &mut rng).scale(20.0);
        let y = kernels::softmax(&x, 1).unwrap();
        for b in 0..2 {
            for j in 0..9 {
                let s: f64 = (0..k).map(|c| y.data()[(b * k + c) * 9 + j]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad) in [(1, Padding::Zero(1)), (1, Padding::Reflect(1)), (2, Padding::Reflect(1)), (2, Padding::Zero(0))] {
        let inputs = vec![random(&[2, 3, 5, 7], &mut rng), random(&[4, 3, 3, 3], &mut rng), random(&[4], &mut rng)];
        check_op(inputs, 2, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad));
    }
}

#[test]
fn ragged_stride_rejected() {
    let x = Tensor::<f64>::zeros(&[1, 1, 6, 5]);
    let k = Tensor::zeros(&[1, 1, 3, 3]);
    assert!(kernels::conv2d_forward(&x, &k, None, 2, Padding::Zero(1)).is_err());
    assert!(kernels::conv2d_forward(&x, &Tensor::zeros(&[1, 1, 2, 2]), None, 1, Padding::Zero(0)).is_err());
}

#[test]
fn group_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for groups in [1, 2, 4] {
        let inputs = vec![random(&[2, 4, 3, 3], &mut rng), random(&[4], &mut rng), random(&[4], &mut rng)];
        check_op(inputs, 4, |t, v| t.group_norm(v[0], groups, v[1], v[2], 1e-5));
    }
}

#[test]
fn pooling_and_upsampling_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    check_op(vec![random(&[2, 2, 4, 6], &mut rng)], 6, |t, v| t.maxpool2(v[0]));
    check_op(vec![random(&[1, 3, 3, 2], &mut rng)], 7, |t, v| t.upsample2(v[0]));
}

#[test]
fn channel_plumbing_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random(&[2, 2, 3, 3], &mut rng);
    let b = random(&[2, 3, 3, 3], &mut rng);
    check_op(vec![a.clone(), b.clone()], 9, |t, v| t.concat(v[0], v[1]));
    check_op(vec![b.clone()], 10, |t, v| t.slice_channels(v[0], 1, 2));
    check_op(vec![a.clone(), a.clone(), a], 11, |t, v| t.lincomb(&[(v[0], 0.5), (v[1], -2.0), (v[2], 1.5)]));
}

#[test]
fn pointwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    // keep relu inputs away from the kink so differences stay one-sided
    let away = random(&[2, 2, 3, 3], &mut rng).map(|v| v + 0.2f64.copysign(v));
    check_op(vec![away], 13, |t, v| Ok(t.relu(v[0])));
    check_op(vec![random(&[2, 2, 3, 3], &mut rng).scale(2.0)], 14, |t, v| Ok(t.tanh(v[0])));
    check_op(vec![random(&[2, 3, 2, 2], &mut rng), random(&[1], &mut rng)], 15, |t, v| t.mul_scalar(v[0], v[1]));
    check_op(vec![random(&[2, 3, 2, 2], &mut rng)], 16, |t, v| Ok(t.sum(v[0])));
}

#[test]
fn softmax_and_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    check_op(vec![random(&[2, 3, 2, 2], &mut rng).scale(3.0)], 18, |t, v| t.softmax(v[0], 1));
    let target: Arc<Vec<usize>> = Arc::new((0..8).map(|i| i % 3).collect());
    check_op(vec![random(&[2, 3, 2, 2], &mut rng).scale(3.0)], 19, move |t, v| t.cross_entropy(v[0], target.clone()));
}

#[test]
fn cross_entropy_matches_log_softmax() {
    let logits = Tensor::<f64>::from_f64(&[1, 2, 1, 2], &[0.0, 1000.0, 1.0, 0.0]).unwrap();
    let (loss, _) = kernels::cross_entropy_forward(&logits, &[1, 0]).unwrap();
    // pixel 0: logits (0, 1), target 1; pixel 1: logits (1000, 0), target 0
    let want = 0.5 * ((1.0f64.exp() + 1.0).ln() - 1.0 + (1.0 + (-1000.0f64).exp()).ln());
    assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
    assert!(kernels::cross_entropy_forward(&logits, &[2, 0]).is_err());
}

#[test]
fn chained_graph_gradient() {
    // conv -> group norm -> relu -> pool -> upsample -> concat -> conv -> cross entropy
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let inputs = vec![
        random(&[1, 2, 4, 4], &mut rng),
        random(&[4, 2, 3, 3], &mut rng),
        random(&[2, 6, 1, 1], &mut rng),
    ];
    let target = Arc::new(vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 0, 1, 0, 1]);
    check_op(inputs, 21, move |t, v| {
        let gamma = t.leaf(Tensor::ones(&[4]), false);
        let beta = t.leaf(Tensor::full(&[4], 0.1), false);
        let h = t.conv2d(v[0], v[1], None, 1, Padding::Reflect(1))?;
        let h = t.group_norm(h, 2, gamma, beta, 1e-5)?;
        let h = t.tanh(h);
        let d = t.maxpool2(h)?;
        let u = t.upsample2(d)?;
        let c = t.concat(u, v[0])?;
        let logits = t.conv2d(c, v[2], None, 1, Padding::Zero(0))?;
        t.cross_entropy(logits, target.clone())
    });
}
