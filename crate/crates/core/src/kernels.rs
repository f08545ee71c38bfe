//! Forward and backward kernels for the layer primitives.
//!
//! These work on plain tensors; [`crate::autodiff`] wires them into the tape.

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Element, Tensor};

/// Spatial padding applied before a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero(usize),
    /// Mirror about the edge pixel without repeating it (`dcb|abcd|cba`).
    Reflect(usize),
}

impl Padding {
    pub fn width(self) -> usize {
        match self {
            Padding::Zero(n) | Padding::Reflect(n) => n,
        }
    }
}

/// Source index for padded coordinate `i` (already shifted by the pad width),
/// or `None` where zero padding applies.
#[inline]
pub fn padded_index(i: isize, len: usize, padding: Padding) -> Option<usize> {
    let n = len as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match padding {
        Padding::Zero(_) => None,
        Padding::Reflect(_) => {
            let r = if i < 0 { -i } else { 2 * (n - 1) - i };
            debug_assert!((0..n).contains(&r));
            Some(r as usize)
        }
    }
}

/// Geometry of a 2-d convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: Padding,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [batch, c_in, h, w] = input[..] else {
            return Err(shape_err!("conv2d input must be rank 4, got {input:?}"));
        };
        let [c_out, kc, kh, kw] = kernel[..] else {
            return Err(shape_err!("conv2d kernel must be rank 4, got {kernel:?}"));
        };
        if kc != c_in {
            return Err(shape_err!(
                "conv2d kernel expects {kc} input channels, input has {c_in}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid!("conv2d kernel extents must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be positive"));
        }
        let n = padding.width();
        if n >= h || n >= w {
            return Err(invalid!("padding {n} must be smaller than extent {h}x{w}"));
        }
        let span_h = h + 2 * n;
        let span_w = w + 2 * n;
        if span_h < kh || span_w < kw {
            return Err(shape_err!("kernel {kh}x{kw} larger than padded input"));
        }
        if (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(invalid!(
                "stride {stride} does not divide padded extent {span_h}x{span_w} minus kernel"
            ));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out: (span_h - kh) / stride + 1,
            w_out: (span_w - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding.width() == 0
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source row (or column) per (kernel offset, output position).
    fn index_table(&self, kernel: usize, out: usize, len: usize) -> Vec<Option<usize>> {
        let n = self.padding.width() as isize;
        let mut t = Vec::with_capacity(kernel * out);
        for k in 0..kernel {
            for o in 0..out {
                let i = (o * self.stride + k) as isize - n;
                t.push(padded_index(i, len, self.padding));
            }
        }
        t
    }
}

/// A run of output columns reading consecutive source columns (`src` is
/// `None` for zero padding).
#[derive(Clone, Copy, Debug)]
struct Run {
    dst: usize,
    src: Option<usize>,
    len: usize,
}

/// Column runs for each horizontal kernel offset.
fn column_runs(g: &ConvGeom) -> Vec<Vec<Run>> {
    let table = g.index_table(g.kw, g.w_out, g.w);
    (0..g.kw)
        .map(|kx| {
            let mut runs: Vec<Run> = Vec::new();
            for (ox, &src) in table[kx * g.w_out..(kx + 1) * g.w_out].iter().enumerate() {
                if let Some(r) = runs.last_mut() {
                    let extends = match (r.src, src) {
                        (Some(a), Some(b)) => a + r.len == b,
                        (None, None) => true,
                        _ => false,
                    };
                    if extends {
                        r.len += 1;
                        continue;
                    }
                }
                runs.push(Run { dst: ox, src, len: 1 });
            }
            runs
        })
        .collect()
}

fn im2col<E: Element>(g: &ConvGeom, x: &[E], cols: &mut [E], rows: &[Option<usize>], runs: &[Vec<Run>]) {
    let p = g.p();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for (kx, kruns) in runs.iter().enumerate() {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let d = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    match rows[ky * g.h_out + oy] {
                        None => d.fill(E::zero()),
                        Some(sy) => {
                            let src = &plane[sy * g.w..(sy + 1) * g.w];
                            for r in kruns {
                                let out = &mut d[r.dst..r.dst + r.len];
                                match r.src {
                                    Some(s0) => out.copy_from_slice(&src[s0..s0 + r.len]),
                                    None => out.fill(E::zero()),
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<E: Element>(g: &ConvGeom, cols: &[E], dx: &mut [E], rows: &[Option<usize>], runs: &[Vec<Run>]) {
    let p = g.p();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for (kx, kruns) in runs.iter().enumerate() {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let Some(sy) = rows[ky * g.h_out + oy] else {
                        continue;
                    };
                    let s = &src[oy * g.w_out..(oy + 1) * g.w_out];
                    let dst = &mut plane[sy * g.w..(sy + 1) * g.w];
                    for r in kruns {
                        if let Some(s0) = r.src {
                            for (d, v) in dst[s0..s0 + r.len].iter_mut().zip(&s[r.dst..r.dst + r.len]) {
                                *d += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dot<E: Element>(x: &[E], y: &[E]) -> E {
    const L: usize = 16;
    let mut acc = [E::zero(); L];
    let xs = x.chunks_exact(L);
    let ys = y.chunks_exact(L);
    let tail: E = xs
        .remainder()
        .iter()
        .zip(ys.remainder())
        .map(|(a, b)| *a * *b)
        .sum();
    for (a, b) in xs.zip(ys) {
        for l in 0..L {
            acc[l] += a[l] * b[l];
        }
    }
    acc.iter().copied().sum::<E>() + tail
}

/// `c[m, n] += a[m, k] . b[n, k]^T` as row dot products; faster than the
/// blocked gemm when `k` is long and `m`, `n` are small. Rows are taken four
/// of `a` by two of `b` at a time so each loaded lane feeds several sums.
fn gemm_nt_dot<E: Element>(m: usize, n: usize, k: usize, a: &[E], b: &[E], c: &mut [E]) {
    const L: usize = 8;
    let kk = k / L * L;
    let mut i0 = 0;
    while i0 + 4 <= m {
        let mut j0 = 0;
        while j0 + 2 <= n {
            let ar: [&[E]; 4] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
            let br: [&[E]; 2] = std::array::from_fn(|s| &b[(j0 + s) * k..(j0 + s + 1) * k]);
            let mut acc = [[[E::zero(); L]; 2]; 4];
            for l in (0..kk).step_by(L) {
                let av: [&[E; L]; 4] = std::array::from_fn(|r| ar[r][l..l + L].try_into().expect("lane"));
                let bv: [&[E; L]; 2] = std::array::from_fn(|s| br[s][l..l + L].try_into().expect("lane"));
                for r in 0..4 {
                    for s in 0..2 {
                        for x in 0..L {
                            acc[r][s][x] += av[r][x] * bv[s][x];
                        }
                    }
                }
            }
            for r in 0..4 {
                for s in 0..2 {
                    let tail: E = ar[r][kk..].iter().zip(&br[s][kk..]).map(|(x, y)| *x * *y).sum();
                    c[(i0 + r) * n + j0 + s] += acc[r][s].iter().copied().sum::<E>() + tail;
                }
            }
            j0 += 2;
        }
        for j in j0..n {
            for i in i0..i0 + 4 {
                c[i * n + j] += dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
            }
        }
        i0 += 4;
    }
    for i in i0..m {
        for j in 0..n {
            c[i * n + j] += dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
        }
    }
}

/// Cross-correlation of `x` with `kernel` plus an optional per-channel bias.
pub fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<E>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(shape_err!("bias {:?} for {} output channels", b.shape(), g.c_out));
        }
    }
    let (k, p) = (g.k(), g.p());
    let in_stride = g.c_in * g.h * g.w;
    let mut out = vec![E::zero(); g.batch * g.c_out * p];
    let rows = g.index_table(g.kh, g.h_out, g.h);
    let cs = column_runs(&g);
    let scratch = if g.is_pointwise() { 0 } else { k * p };
    E::with_scratch(scratch, |cols| {
        for b in 0..g.batch {
            let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
            let ob = &mut out[b * g.c_out * p..(b + 1) * g.c_out * p];
            if let Some(bias) = bias {
                for (c, chunk) in ob.chunks_mut(p).enumerate() {
                    chunk.fill(bias.data()[c]);
                }
            }
            let beta = if bias.is_some() { E::one() } else { E::zero() };
            let src = if g.is_pointwise() {
                xb
            } else {
                im2col(&g, xb, cols, &rows, &cs);
                &cols[..]
            };
            E::gemm(g.c_out, k, p, E::one(), kernel.data(), false, src, false, beta, ob);
        }
    });
    let t = Tensor::new(&[g.batch, g.c_out, g.h_out, g.w_out], out)?;
    Ok((t, g))
}

/// Gradients of a convolution with respect to input, kernel and bias.
pub fn conv2d_backward<E: Element>(
    g: &ConvGeom,
    x: &Tensor<E>,
    kernel: &Tensor<E>,
    dy: &Tensor<E>,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>, Option<Tensor<E>>) {
    let (k, p) = (g.k(), g.p());
    let in_stride = g.c_in * g.h * g.w;
    let rows = g.index_table(g.kh, g.h_out, g.h);
    let cs = column_runs(g);
    let mut dx = want_dx.then(|| vec![E::zero(); x.len()]);
    let mut dw = want_dw.then(|| vec![E::zero(); kernel.len()]);
    let mut db = want_db.then(|| vec![E::zero(); g.c_out]);
    let scratch = if g.is_pointwise() { 0 } else { k * p };
    E::with_scratch(scratch, |cols| {
        for b in 0..g.batch {
            let xb = &x.data()[b * in_stride..(b + 1) * in_stride];
            let dyb = &dy.data()[b * g.c_out * p..(b + 1) * g.c_out * p];
            if let Some(db) = db.as_mut() {
                for (c, chunk) in dyb.chunks(p).enumerate() {
                    db[c] += chunk.iter().copied().sum::<E>();
                }
            }
            if let Some(dw) = dw.as_mut() {
                let src = if g.is_pointwise() {
                    xb
                } else {
                    im2col(g, xb, cols, &rows, &cs);
                    &cols[..]
                };
                gemm_nt_dot(g.c_out, k, p, dyb, src, dw);
            }
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx[b * in_stride..(b + 1) * in_stride];
                if g.is_pointwise() {
                    E::gemm(k, g.c_out, p, E::one(), kernel.data(), true, dyb, false, E::one(), dxb);
                } else {
                    E::gemm(k, g.c_out, p, E::one(), kernel.data(), true, dyb, false, E::zero(), cols);
                    col2im(g, cols, dxb, &rows, &cs);
                }
            }
        }
    });
    let wrap = |v: Option<Vec<E>>, shape: &[usize]| v.map(|d| Tensor::new(shape, d).expect("shape"));
    (
        wrap(dx, x.shape()),
        wrap(dw, kernel.shape()),
        wrap(db, &[g.c_out]),
    )
}

/// Saved statistics of a group-norm forward pass.
#[derive(Clone, Debug)]
pub struct GroupNormCache<E: Element> {
    pub xhat: Tensor<E>,
    pub inv_std: Vec<E>,
    pub groups: usize,
}

pub fn group_norm_forward<E: Element>(
    x: &Tensor<E>,
    groups: usize,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, GroupNormCache<E>)> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(invalid!("{c} channels not divisible into {groups} groups"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err!("group_norm affine parameters must have shape [{c}]"));
    }
    let hw = h * w;
    let cg = c / groups;
    let n = cg * hw;
    let mut xhat = vec![E::zero(); x.len()];
    let mut y = vec![E::zero(); x.len()];
    let mut inv_std = Vec::with_capacity(b * groups);
    for bi in 0..b {
        for gi in 0..groups {
            let off = (bi * c + gi * cg) * hw;
            let xs = &x.data()[off..off + n];
            let mean = xs.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(E::of(istd));
            let (mean_e, istd_e) = (E::of(mean), E::of(istd));
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (ga, be) = (gamma.data()[ch], beta.data()[ch]);
                for j in 0..hw {
                    let idx = off + ci * hw + j;
                    let xh = (x.data()[idx] - mean_e) * istd_e;
                    xhat[idx] = xh;
                    y[idx] = xh * ga + be;
                }
            }
        }
    }
    let shape = x.shape();
    Ok((
        Tensor::new(shape, y)?,
        GroupNormCache {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
            groups,
        },
    ))
}

pub fn group_norm_backward<E: Element>(
    cache: &GroupNormCache<E>,
    gamma: &Tensor<E>,
    dy: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (b, c, h, w) = dy.dims4().expect("rank 4");
    let hw = h * w;
    let groups = cache.groups;
    let cg = c / groups;
    let n = (cg * hw) as f64;
    let xhat = cache.xhat.data();
    let mut dx = vec![E::zero(); dy.len()];
    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    for bi in 0..b {
        for gi in 0..groups {
            let off = (bi * c + gi * cg) * hw;
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let ga = gamma.data()[ch];
                let (mut dg, mut dbt) = (E::zero(), E::zero());
                for j in 0..hw {
                    let idx = off + ci * hw + j;
                    let d = dy.data()[idx];
                    dg += d * xhat[idx];
                    dbt += d;
                    let dxh = (d * ga).as_f64();
                    sum_dxh += dxh;
                    sum_dxh_xh += dxh * xhat[idx].as_f64();
                }
                dgamma[ch] += dg;
                dbeta[ch] += dbt;
            }
            let istd = cache.inv_std[bi * groups + gi].as_f64();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let ga = gamma.data()[ch].as_f64();
                for j in 0..hw {
                    let idx = off + ci * hw + j;
                    let dxh = dy.data()[idx].as_f64() * ga;
                    let v = istd / n * (n * dxh - sum_dxh - xhat[idx].as_f64() * sum_dxh_xh);
                    dx[idx] = E::of(v);
                }
            }
        }
    }
    (
        Tensor::new(dy.shape(), dx).expect("shape"),
        Tensor::new(&[c], dgamma).expect("shape"),
        Tensor::new(&[c], dbeta).expect("shape"),
    )
}

/// 2x2 max pooling with stride 2; returns the flat argmax index per output.
pub fn maxpool2_forward<E: Element>(x: &Tensor<E>) -> Result<(Tensor<E>, Vec<u32>)> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid!("maxpool2d needs even extents, got {h}x{w}"));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    let d = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * w + 2 * ox;
                let mut best = i0;
                for idx in [i0 + 1, i0 + w, i0 + w + 1] {
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                y.push(d[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(&[b, c, ho, wo], y)?, arg))
}

pub fn maxpool2_backward<E: Element>(input_shape: &[usize], argmax: &[u32], dy: &Tensor<E>) -> Tensor<E> {
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dxd[i as usize] += g;
    }
    dx
}

pub fn upsample2_forward<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![E::zero(); b * c * ho * wo];
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut y[plane * ho * wo..(plane + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[oy * wo + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    Tensor::new(&[b, c, ho, wo], y)
}

pub fn upsample2_backward<E: Element>(dy: &Tensor<E>) -> Tensor<E> {
    let (b, c, ho, wo) = dy.dims4().expect("rank 4");
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = vec![E::zero(); b * c * h * w];
    for plane in 0..b * c {
        let src = &dy.data()[plane * ho * wo..(plane + 1) * ho * wo];
        let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(oy / 2) * w + ox / 2] += src[oy * wo + ox];
            }
        }
    }
    Tensor::new(&[b, c, h, w], dx).expect("shape")
}

/// Concatenate two `[B, C, H, W]` tensors along channels.
pub fn concat_channels<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (ba, ca, ha, wa) = a.dims4()?;
    let (bb, cb, hb, wb) = b.dims4()?;
    if ba != bb || ha != hb || wa != wb {
        return Err(shape_err!("concat {:?} with {:?}", a.shape(), b.shape()));
    }
    let (na, nb) = (ca * ha * wa, cb * hb * wb);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..ba {
        out.extend_from_slice(&a.data()[i * na..(i + 1) * na]);
        out.extend_from_slice(&b.data()[i * nb..(i + 1) * nb]);
    }
    Tensor::new(&[ba, ca + cb, ha, wa], out)
}

/// Channels `start..start + len` of a `[B, C, H, W]` tensor.
pub fn slice_channels<E: Element>(x: &Tensor<E>, start: usize, len: usize) -> Result<Tensor<E>> {
    let (b, c, h, w) = x.dims4()?;
    if len == 0 || start + len > c {
        return Err(invalid!("channel slice {start}..{} of {c}", start + len));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(b * len * hw);
    for i in 0..b {
        let off = (i * c + start) * hw;
        out.extend_from_slice(&x.data()[off..off + len * hw]);
    }
    Tensor::new(&[b, len, h, w], out)
}

/// Strides `(outer, axis_len, inner)` for iterating along `axis`.
pub fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(invalid!("axis {axis} out of range for {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn softmax<E: Element>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let mut y = x.clone();
    let yd = y.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let mut m = E::neg_infinity();
            for k in 0..len {
                m = m.max(yd[at(k)]);
            }
            let mut s = E::zero();
            for k in 0..len {
                let e = (yd[at(k)] - m).exp();
                yd[at(k)] = e;
                s += e;
            }
            for k in 0..len {
                yd[at(k)] = yd[at(k)] / s;
            }
        }
    }
    Ok(y)
}

pub fn softmax_backward<E: Element>(y: &Tensor<E>, dy: &Tensor<E>, axis: usize) -> Tensor<E> {
    let (outer, len, inner) = axis_layout(y.shape(), axis).expect("axis");
    let mut dx = Tensor::zeros(y.shape());
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: E = (0..len).map(|k| y.data()[at(k)] * dy.data()[at(k)]).sum();
            for k in 0..len {
                dx.data_mut()[at(k)] = y.data()[at(k)] * (dy.data()[at(k)] - dot);
            }
        }
    }
    dx
}

/// Mean per-pixel cross entropy of `[B, K, H, W]` logits against class
/// indices laid out `[B, H, W]`. Returns the loss and the softmax.
pub fn cross_entropy_forward<E: Element>(
    logits: &Tensor<E>,
    target: &[usize],
) -> Result<(f64, Tensor<E>)> {
    let (b, k, h, w) = logits.dims4()?;
    if target.len() != b * h * w {
        return Err(shape_err!(
            "target has {} entries, logits need {}",
            target.len(),
            b * h * w
        ));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= k) {
        return Err(invalid!("target class {bad} out of range for {k} classes"));
    }
    let probs = softmax(logits, 1)?;
    let hw = h * w;
    let mut loss = 0.0;
    for bi in 0..b {
        for j in 0..hw {
            let t = target[bi * hw + j];
            // log-softmax from the logits directly for accuracy
            let at = |c: usize| logits.data()[(bi * k + c) * hw + j].as_f64();
            let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (0..k).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
            loss += lse - at(t);
        }
    }
    Ok((loss / (b * hw) as f64, probs))
}

pub fn cross_entropy_backward<E: Element>(probs: &Tensor<E>, target: &[usize], dloss: E) -> Tensor<E> {
    let (b, k, h, w) = probs.dims4().expect("rank 4");
    let hw = h * w;
    let scale = dloss / E::of((b * hw) as f64);
    let mut dx = probs.scale(scale);
    for bi in 0..b {
        for j in 0..hw {
            let t = target[bi * hw + j];
            dx.data_mut()[(bi * k + t) * hw + j] -= scale;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_index_rule() {
        let p = Padding::Reflect(2);
        let got: Vec<_> = (-2..6).map(|i| padded_index(i, 4, p).unwrap()).collect();
        assert_eq!(got, vec![2, 1, 0, 1, 2, 3, 2, 1]);
        assert_eq!(padded_index(-1, 4, Padding::Zero(1)), None);
    }

    #[test]
    fn conv_geometry_errors() {
        assert!(ConvGeom::new(&[1, 1, 5, 5], &[1, 1, 2, 2], 1, Padding::Zero(0)).is_err());
        assert!(ConvGeom::new(&[1, 1, 5, 5], &[1, 2, 3, 3], 1, Padding::Zero(1)).is_err());
        assert!(ConvGeom::new(&[1, 1, 4, 4], &[1, 1, 3, 3], 1, Padding::Reflect(4)).is_err());
        // (6 + 2 - 3) = 5 not divisible by 2
        assert!(ConvGeom::new(&[1, 1, 6, 6], &[1, 1, 3, 3], 2, Padding::Zero(1)).is_err());
        let g = ConvGeom::new(&[1, 1, 7, 7], &[1, 1, 3, 3], 2, Padding::Zero(1)).unwrap();
        assert_eq!((g.h_out, g.w_out), (4, 4));
    }

    #[test]
    fn maxpool_rejects_odd() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert!(maxpool2_forward(&x).is_err());
    }

    #[test]
    fn upsample_adjoint_sums_blocks() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let y = upsample2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.data()[5], 0.0);
        assert_eq!(y.data()[6], 1.0);
        let dx = upsample2_backward(&Tensor::<f32>::ones(&[1, 1, 4, 4]));
        assert_eq!(dx.data(), &[4.0; 4]);
    }
}
