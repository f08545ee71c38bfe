use std::time::Instant;
use unode_core::kernels::*;
use unode_core::model::gn_groups;
use unode_core::*;
fn t<F: FnMut()>(name: &str, mut f: F) { let st = Instant::now(); for _ in 0..200 { f() } println!("{name}: {:.3}ms", st.elapsed().as_secs_f64() / 200.0 * 1e3); }
fn main() {
    let c = 8; let s = 64;
    let x = Tensor::<f32>::from_fn(&[1, c + 1, s, s], |i| (i % 13) as f32 / 13.0);
    let k = Tensor::<f32>::from_fn(&[c, c + 1, 3, 3], |i| (i % 7) as f32 / 7.0);
    let b = Tensor::<f32>::zeros(&[c]);
    t("conv fwd", || { conv2d_forward(&x, &k, Some(&b), 1, Padding::Zero(1)).unwrap(); });
    let (y, g) = conv2d_forward(&x, &k, Some(&b), 1, Padding::Zero(1)).unwrap();
    t("conv bwd", || { conv2d_backward(&g, &x, &k, &y, true, true, true); });
    let gm = Tensor::ones(&[c]); let bt = Tensor::zeros(&[c]);
    t("gn fwd", || { group_norm_forward(&y, gn_groups(c), &gm, &bt, 1e-5).unwrap(); });
    t("relu", || { y.map(|a| a.max(0.0)); });
    let a = vec![1.0f32; 8 * 81]; let bb = vec![1.0f32; 81 * 4096]; let mut cc = vec![0.0f32; 8 * 4096];
    t("sgemm 8x81x4096", || f32::gemm(8, 81, 4096, 1.0, &a, false, &bb, false, 0.0, &mut cc));
    let mut cc2 = vec![0.0f32; 8 * 81];
    t("sgemm dW 8x4096x81", || f32::gemm(8, 4096, 81, 1.0, &cc, false, &bb, true, 0.0, &mut cc2));
    let mut cc3 = vec![0.0f32; 81 * 8];
    t("sgemm dWt 81x4096x8", || f32::gemm(81, 4096, 8, 1.0, &bb, false, &cc, true, 0.0, &mut cc3));
    let a64 = vec![1.0f32; 64 * 576]; let b64 = vec![1.0f32; 576 * 64]; let mut c64 = vec![0.0f32; 64 * 64];
    t("sgemm 64x576x64", || f32::gemm(64, 576, 64, 1.0, &a64, false, &b64, false, 0.0, &mut c64));
    let a16 = vec![1.0f32; 16 * 153]; let b16 = vec![1.0f32; 153 * 1024]; let mut c16 = vec![0.0f32; 16 * 1024];
    t("sgemm 16x153x1024", || f32::gemm(16, 153, 1024, 1.0, &a16, false, &b16, false, 0.0, &mut c16));
    let bbt = vec![1.0f32; 4096 * 81];
    t("sgemm dW pretransposed", || f32::gemm(8, 4096, 81, 1.0, &cc, false, &bbt, false, 0.0, &mut cc2));
    t("dot dW", || {
        for r in 0..81 {
            let col = &bb[r * 4096..(r + 1) * 4096];
            for o in 0..8 {
                let d = &cc[o * 4096..(o + 1) * 4096];
                let mut acc = [0.0f32; 16];
                for (x, y) in col.chunks_exact(16).zip(d.chunks_exact(16)) {
                    for l in 0..16 { acc[l] += x[l] * y[l]; }
                }
                cc2[o * 81 + r] = acc.iter().sum();
            }
        }
    });
    t("sgemm dcols 81x8x4096", || f32::gemm(81, 8, 4096, 1.0, &a, true, &cc, false, 0.0, &mut bb.clone()));
}
#[allow(dead_code)]
fn more() {}
