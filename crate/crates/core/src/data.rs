//! Synthetic gland images, file formats, preprocessing, augmentation and
//! test-time augmentation.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::seg::{connected_components, eroded_instances, LabeledMask};
use crate::tensor::{Element, Tensor};

/// An RGB image in `[0, 1]` (`[3, H, W]`) with its instance mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: LabeledMask,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: LabeledMask) -> Result<Self> {
        let [3, h, w] = *image.shape() else {
            return Err(shape_err!("image must be [3, H, W], got {:?}", image.shape()));
        };
        if (mask.width, mask.height) != (w, h) {
            return Err(shape_err!(
                "mask {}x{} for image {w}x{h}",
                mask.width,
                mask.height
            ));
        }
        Ok(Self { image, mask })
    }

    pub fn width(&self) -> usize {
        self.mask.width
    }

    pub fn height(&self) -> usize {
        self.mask.height
    }

    pub fn full_target(&self) -> Vec<bool> {
        self.mask.foreground()
    }

    pub fn eroded_target(&self, radius: usize) -> Vec<bool> {
        eroded_instances(&self.mask, radius)
    }
}

/// Per-sample generator seeded from `(seed, index)`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub const MAX_GLANDS: usize = 6;

/// A deformed ellipse: unit polar radius perturbed by two low harmonics.
#[derive(Clone, Copy, Debug)]
struct Gland {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    harm: [(f64, f64); 2],
}

/// Largest relative radius a gland can reach.
const MAX_BULGE: f64 = 1.2;

impl Gland {
    fn random(rng: &mut ChaCha8Rng, cx: f64, cy: f64, max_r: f64) -> Self {
        let r = max_r / MAX_BULGE;
        let a = rng.random_range(0.7 * r..=r);
        let b = rng.random_range(0.55 * a..=a);
        Self {
            cx,
            cy,
            a,
            b,
            angle: rng.random_range(0.0..PI),
            harm: [
                (rng.random_range(0.0..0.1), rng.random_range(0.0..2.0 * PI)),
                (rng.random_range(0.0..0.1), rng.random_range(0.0..2.0 * PI)),
            ],
        }
    }

    /// Normalized radius of `(x, y)`: inside when below 1.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let phi = v.atan2(u);
        let bulge = 1.0
            + self.harm[0].0 * (2.0 * phi + self.harm[0].1).cos()
            + self.harm[1].0 * (3.0 * phi + self.harm[1].1).cos();
        (u * u + v * v).sqrt() / bulge
    }
}

fn value_noise(rng: &mut ChaCha8Rng, size: usize) -> impl Fn(f64, f64) -> f64 {
    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let f = rng.random_range(0.05..0.4);
            let th = rng.random_range(0.0..2.0 * PI);
            (f * th.cos(), f * th.sin(), rng.random_range(0.0..2.0 * PI), rng.random_range(0.3..1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();
    let _ = size;
    move |x, y| waves.iter().map(|&(fx, fy, p, amp)| amp * (fx * x + fy * y + p).sin()).sum::<f64>() / norm
}

/// Draw one image with `1..=6` glands (uniform count).
///
/// Glands sit in distinct cells of a grid and stay one pixel inside their
/// cell, so separate glands are at least two pixels apart. With probability
/// `touching_fraction` (and at least two glands) one horizontal pair of cells
/// is merged and filled with two overlapping glands that split their
/// overlap by nearest center, so the pair shares a boundary.
pub fn synth_sample(rng: &mut ChaCha8Rng, size: usize, touching_fraction: f64) -> Result<Sample> {
    if size < 32 {
        return Err(invalid!("synthetic images need size >= 32, got {size}"));
    }
    let k = rng.random_range(1..=MAX_GLANDS);
    let g = (k as f64).sqrt().ceil() as usize;
    let cell = size as f64 / g as f64;
    let mut cells: Vec<usize> = (0..g * g).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.random_range(0..=i));
    }
    cells.truncate(k);
    let touching = k >= 2 && rng.random_bool(touching_fraction.clamp(0.0, 1.0));
    // (glands, region) groups; a touching pair shares one region
    let mut groups: Vec<Vec<Gland>> = Vec::new();
    let max_r = (cell / 2.0 - 1.5).min(size as f64 * 0.3);
    let mut used = vec![false; k];
    if touching {
        // find a cell whose right neighbour is free or also chosen
        let pos = |c: usize| (c % g, c / g);
        let mut pair = None;
        'outer: for i in 0..k {
            let (x, y) = pos(cells[i]);
            if x + 1 < g {
                for j in 0..k {
                    if j != i && pos(cells[j]) == (x + 1, y) {
                        pair = Some((i, j));
                        break 'outer;
                    }
                }
            }
        }
        if pair.is_none() {
            // move a second gland next to the first
            for i in 0..k {
                let (x, y) = pos(cells[i]);
                let right = y * g + x + 1;
                if x + 1 < g && !cells.contains(&right) {
                    let j = (i + 1) % k;
                    cells[j] = right;
                    pair = Some((i, j));
                    break;
                }
            }
        }
        if let Some((i, j)) = pair {
            used[i] = true;
            used[j] = true;
            let (x, y) = pos(cells[i]);
            let cx = (x as f64 + 1.0) * cell;
            let cy = (y as f64 + 0.5) * cell;
            let r = max_r.min(cell * 0.5 - 1.5);
            let d = rng.random_range(0.55..0.8) * r / MAX_BULGE;
            let mut a = Gland::random(rng, cx - d, cy, r);
            let mut b = Gland::random(rng, cx + d, cy, r);
            // keep the long axes near horizontal so the shapes overlap
            a.angle = rng.random_range(-0.3..0.3);
            b.angle = rng.random_range(-0.3..0.3);
            groups.push(vec![a, b]);
        }
    }
    for i in 0..k {
        if used[i] {
            continue;
        }
        let (x, y) = (cells[i] % g, cells[i] / g);
        let cx = (x as f64 + 0.5) * cell;
        let cy = (y as f64 + 0.5) * cell;
        let r = rng.random_range(0.6..=1.0) * max_r;
        let slack = (max_r - r).max(0.0);
        let ox = rng.random_range(-slack..=slack);
        let oy = rng.random_range(-slack..=slack);
        let gl = Gland::random(rng, cx + ox, cy + oy, r);
        groups.push(vec![gl]);
    }

    let mut labels = vec![0u32; size * size];
    let mut next = 0u32;
    for group in &groups {
        let base = next;
        next += group.len() as u32;
        for py in 0..size {
            for px in 0..size {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let best = group
                    .iter()
                    .enumerate()
                    .map(|(i, gl)| (i, gl.rho(x, y)))
                    .filter(|&(_, r)| r < 1.0)
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                if let Some((i, _)) = best {
                    labels[py * size + px] = base + 1 + i as u32;
                }
            }
        }
    }
    let mask = largest_components(&LabeledMask::from_raw(size, size, labels)?);

    let noise = value_noise(rng, size);
    let rim = eroded_instances(&mask, 2);
    let lumen = eroded_instances(&mask, 5);
    let tint = rng.random_range(-0.05..0.05);
    let mut img = Tensor::zeros(&[3, size, size]);
    let plane = size * size;
    for i in 0..plane {
        let (x, y) = ((i % size) as f64, (i / size) as f64);
        let n = noise(x, y);
        let mut c = if mask.labels[i] == 0 {
            [0.86 + 0.06 * n, 0.68 + 0.08 * n, 0.80 + 0.05 * n]
        } else if !rim[i] {
            [0.42, 0.22, 0.50]
        } else if lumen[i] {
            [0.48 + 0.03 * n, 0.30, 0.48]
        } else {
            [0.70 + 0.04 * n, 0.45 + 0.04 * n, 0.68]
        };
        for (ch, v) in c.iter_mut().enumerate() {
            let jitter: f64 = rng.random_range(-0.04..0.04);
            *v = (*v + jitter + if ch == 0 { tint } else { 0.0 }).clamp(0.0, 1.0);
            // 8-bit quantized so that image files reproduce samples exactly
            img.data_mut()[ch * plane + i] = ((*v * 255.0).round() / 255.0) as f32;
        }
    }
    Sample::new(img, mask)
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn generate_synthetic(seed: u64, n: usize, size: usize, touching_fraction: f64) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| synth_sample(&mut sample_rng(seed, i as u64), size, touching_fraction))
        .collect()
}

/// Keep only the largest 4-connected piece of every label, then compact.
pub fn largest_components(mask: &LabeledMask) -> LabeledMask {
    let (w, h) = (mask.width, mask.height);
    let mut labels = mask.labels.clone();
    for l in 1..=mask.count() as u32 {
        let bin: Vec<bool> = mask.labels.iter().map(|&v| v == l).collect();
        let cc = connected_components(&bin, w, h);
        if cc.count() <= 1 {
            continue;
        }
        let areas = cc.areas();
        // first largest piece in scan order
        let keep = (1..areas.len()).max_by_key(|&c| (areas[c], std::cmp::Reverse(c))).unwrap_or(1) as u32;
        for (v, &c) in labels.iter_mut().zip(&cc.labels) {
            if c != 0 && c != keep {
                *v = 0;
            }
        }
    }
    LabeledMask {
        width: w,
        height: h,
        labels,
    }
    .compacted()
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Mirror index `i` into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Bilinear resize of every channel (pixel centers aligned, edges clamped).
pub fn resize_bilinear<E: Element>(img: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let [c, h, w] = *img.shape() else {
        return Err(shape_err!("expected [C, H, W], got {:?}", img.shape()));
    };
    if out_h == 0 || out_w == 0 {
        return Err(invalid!("resize target must be positive"));
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, out_h), axis(w, out_w));
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let at = |y: usize, x: usize| p[y * w + x].as_f64();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(E::of(if fy == 0.0 { top } else { top * (1.0 - fy) + bot * fy }));
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Reflection pad `[C, H, W]` to `target`, splitting the border evenly (the
/// extra pixel of an odd split goes to the bottom/right).
pub fn reflect_pad<E: Element>(img: &Tensor<E>, target: (usize, usize)) -> Result<Tensor<E>> {
    let [c, h, w] = *img.shape() else {
        return Err(shape_err!("expected [C, H, W], got {:?}", img.shape()));
    };
    let (th, tw) = target;
    if h > th || w > tw {
        return Err(invalid!("image {h}x{w} exceeds target {th}x{tw}"));
    }
    let (top, left) = ((th - h) / 2, (tw - w) / 2);
    let src = img.data();
    let mut out = Vec::with_capacity(c * th * tw);
    for ch in 0..c {
        for y in 0..th {
            let sy = reflect_index(y as isize - top as isize, h);
            for x in 0..tw {
                let sx = reflect_index(x as isize - left as isize, w);
                out.push(src[(ch * h + sy) * w + sx]);
            }
        }
    }
    Tensor::new(&[c, th, tw], out)
}

/// Downscale by `scale_factor` (output extent `round(H / f)`), then reflect
/// pad to `target`.
pub fn preprocess<E: Element>(img: &Tensor<E>, scale_factor: f64, target: (usize, usize)) -> Result<Tensor<E>> {
    let [_, h, w] = *img.shape() else {
        return Err(shape_err!("expected [C, H, W], got {:?}", img.shape()));
    };
    if !(scale_factor > 0.0) {
        return Err(invalid!("scale factor must be positive"));
    }
    let oh = ((h as f64 / scale_factor).round() as usize).max(1);
    let ow = ((w as f64 / scale_factor).round() as usize).max(1);
    if oh > target.0 || ow > target.1 {
        return Err(invalid!(
            "downscaled image {oh}x{ow} exceeds target {}x{}",
            target.0,
            target.1
        ));
    }
    let small = if (oh, ow) == (h, w) {
        img.clone()
    } else {
        resize_bilinear(img, oh, ow)?
    };
    reflect_pad(&small, target)
}

// ---------------------------------------------------------------------------
// Augmentation

/// Apply `map(x, y) -> source (x, y)` to every channel of an image; sources
/// outside the image are clamped to the edge.
fn warp_image(img: &Tensor<f32>, map: impl Fn(f64, f64) -> (f64, f64), bilinear: bool) -> Tensor<f32> {
    let [c, h, w] = *img.shape() else { unreachable!() };
    let src = img.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x as f64, y as f64);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                out[(ch * h + y) * w + x] = if bilinear {
                    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
                    let at = |yy: usize, xx: usize| p[yy * w + xx] as f64;
                    let v = (at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx) * (1.0 - fy)
                        + (at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx) * fy;
                    v as f32
                } else {
                    p[sy.round() as usize * w + sx.round() as usize]
                };
            }
        }
    }
    Tensor::new(img.shape(), out).expect("same shape")
}

/// Nearest-neighbour warp of a label map; sources outside are background.
fn warp_mask(m: &LabeledMask, map: impl Fn(f64, f64) -> (f64, f64)) -> LabeledMask {
    let (w, h) = (m.width, m.height);
    let mut labels = vec![0u32; w * h];
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = map(x as f64, y as f64);
            let (rx, ry) = (sx.round(), sy.round());
            if rx >= 0.0 && ry >= 0.0 && rx < w as f64 && ry < h as f64 {
                labels[y * w + x] = m.labels[ry as usize * w + rx as usize];
            }
        }
    }
    LabeledMask {
        width: w,
        height: h,
        labels,
    }
}

fn warped(s: &Sample, map: impl Fn(f64, f64) -> (f64, f64) + Copy, bilinear: bool) -> Sample {
    Sample {
        image: warp_image(&s.image, map, bilinear),
        mask: largest_components(&warp_mask(&s.mask, map)),
    }
}

pub fn flip_horizontal(s: &Sample) -> Sample {
    let w = s.width() as f64;
    warped(s, |x, y| (w - 1.0 - x, y), false)
}

pub fn flip_vertical(s: &Sample) -> Sample {
    let h = s.height() as f64;
    warped(s, |x, y| (x, h - 1.0 - y), false)
}

/// Rotate by `k` quarter turns counter-clockwise; square images only for odd `k`.
pub fn rotate90(s: &Sample, k: usize) -> Result<Sample> {
    let (w, h) = (s.width() as f64, s.height() as f64);
    match k % 4 {
        0 => Ok(s.clone()),
        2 => Ok(warped(s, |x, y| (w - 1.0 - x, h - 1.0 - y), false)),
        _ if w != h => Err(invalid!("quarter turns need a square image")),
        1 => Ok(warped(s, |x, y| (w - 1.0 - y, x), false)),
        _ => Ok(warped(s, |x, y| (y, h - 1.0 - x), false)),
    }
}

/// Integer shift; the image border is replicated, the mask filled with background.
pub fn translate(s: &Sample, dx: i64, dy: i64) -> Sample {
    warped(s, |x, y| (x - dx as f64, y - dy as f64), false)
}

/// Rotation by `degrees` about the image center; bilinear image, nearest mask.
pub fn rotate(s: &Sample, degrees: f64) -> Sample {
    let (cx, cy) = ((s.width() as f64 - 1.0) / 2.0, (s.height() as f64 - 1.0) / 2.0);
    let (sn, cs) = degrees.to_radians().sin_cos();
    warped(
        s,
        |x, y| {
            let (u, v) = (x - cx, y - cy);
            (cs * u + sn * v + cx, -sn * u + cs * v + cy)
        },
        true,
    )
}

fn box_blur(f: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut n = 0.0;
                for d in -(r as isize)..=r as isize {
                    let (xx, yy) = if horizontal {
                        (x as isize + d, y as isize)
                    } else {
                        (x as isize, y as isize + d)
                    };
                    if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                        s += src[yy as usize * w + xx as usize];
                        n += 1.0;
                    }
                }
                out[y * w + x] = s / n;
            }
        }
        out
    };
    pass(&pass(f, true), false)
}

/// Smooth random displacement field with largest magnitude `amplitude`.
pub fn elastic_field(rng: &mut ChaCha8Rng, w: usize, h: usize, amplitude: f64, blur: usize) -> (Vec<f64>, Vec<f64>) {
    let mut draw = || -> Vec<f64> {
        let raw: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        box_blur(&box_blur(&raw, w, h, blur), w, h, blur)
    };
    let (mut fx, mut fy) = (draw(), draw());
    let peak = fx
        .iter()
        .zip(&fy)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0, f64::max);
    let s = if peak > 0.0 { amplitude / peak } else { 0.0 };
    fx.iter_mut().chain(fy.iter_mut()).for_each(|v| *v *= s);
    (fx, fy)
}

/// Elastic deformation by a displacement field (identical for image and mask).
pub fn elastic(s: &Sample, field: &(Vec<f64>, Vec<f64>)) -> Sample {
    let w = s.width();
    let (fx, fy) = field;
    warped(
        s,
        |x, y| {
            let i = y as usize * w + x as usize;
            (x + fx[i], y + fy[i])
        },
        true,
    )
}

/// Brightness, contrast and saturation factors applied to the image only.
pub fn color_jitter(s: &Sample, brightness: f64, contrast: f64, saturation: f64) -> Sample {
    let [_, h, w] = *s.image.shape() else { unreachable!() };
    let plane = h * w;
    let d = s.image.data();
    let mut px: Vec<[f64; 3]> = (0..plane)
        .map(|i| [d[i] as f64 * brightness, d[plane + i] as f64 * brightness, d[2 * plane + i] as f64 * brightness])
        .collect();
    let gray = |p: &[f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let mean = px.iter().map(gray).sum::<f64>() / plane as f64;
    for p in &mut px {
        for v in p.iter_mut() {
            *v = (*v - mean) * contrast + mean;
        }
        let g = gray(p);
        for v in p.iter_mut() {
            *v = (g + (*v - g) * saturation).clamp(0.0, 1.0);
        }
    }
    let mut out = vec![0.0f32; 3 * plane];
    for (i, p) in px.iter().enumerate() {
        for ch in 0..3 {
            out[ch * plane + i] = p[ch] as f32;
        }
    }
    Sample {
        image: Tensor::new(s.image.shape(), out).expect("same shape"),
        mask: s.mask.clone(),
    }
}

/// Ranges of the random augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub max_shift: i64,
    pub max_angle: f64,
    pub elastic_amplitude: f64,
    pub elastic_blur: usize,
    pub jitter: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift: 4,
            max_angle: 15.0,
            elastic_amplitude: 3.0,
            elastic_blur: 4,
            jitter: 0.2,
        }
    }
}

/// Random composition of translation, flips, quarter turns, a small
/// rotation, elastic deformation and colour jitter, drawn from `seed`.
pub fn augment(s: &Sample, seed: u64, cfg: &AugmentConfig) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = s.clone();
    let (dx, dy) = (
        rng.random_range(-cfg.max_shift..=cfg.max_shift),
        rng.random_range(-cfg.max_shift..=cfg.max_shift),
    );
    if dx != 0 || dy != 0 {
        out = translate(&out, dx, dy);
    }
    if rng.random_bool(0.5) {
        out = flip_horizontal(&out);
    }
    if rng.random_bool(0.5) {
        out = flip_vertical(&out);
    }
    let k = rng.random_range(0..4);
    if out.width() == out.height() && k != 0 {
        out = rotate90(&out, k).expect("square");
    }
    if rng.random_bool(0.5) && cfg.max_angle > 0.0 {
        out = rotate(&out, rng.random_range(-cfg.max_angle..=cfg.max_angle));
    }
    if rng.random_bool(0.5) && cfg.elastic_amplitude > 0.0 {
        let amp = rng.random_range(0.0..=cfg.elastic_amplitude);
        let field = elastic_field(&mut rng, out.width(), out.height(), amp, cfg.elastic_blur);
        out = elastic(&out, &field);
    }
    let j = cfg.jitter;
    let mut f = || rng.random_range(1.0 - j..=1.0 + j);
    let (b, c, sat) = (f(), f(), f());
    color_jitter(&out, b, c, sat)
}

// ---------------------------------------------------------------------------
// Test-time augmentation

/// Anything mapping `[B, C, H, W]` images to `[B, K, H, W]` probabilities.
pub trait Predictor<E: Element> {
    fn predict(&self, x: &Tensor<E>) -> Result<Tensor<E>>;
}

impl<E: Element, F: Fn(&Tensor<E>) -> Result<Tensor<E>>> Predictor<E> for F {
    fn predict(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self(x)
    }
}

/// Reverse the last (`horizontal`) or second-to-last axis of a rank-4 tensor.
pub fn flip4<E: Element>(x: &Tensor<E>, horizontal: bool) -> Result<Tensor<E>> {
    let (b, c, h, w) = x.dims4()?;
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    for plane in 0..b * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let sy = if horizontal { y } else { h - 1 - y };
            for xx in 0..w {
                let sx = if horizontal { w - 1 - xx } else { xx };
                out.push(p[sy * w + sx]);
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Mean of the predictions for the image and its horizontal and vertical
/// flips, each flipped back first. Three forward passes.
pub fn tta_predict<E: Element, P: Predictor<E> + ?Sized>(model: &P, x: &Tensor<E>) -> Result<Tensor<E>> {
    let p0 = model.predict(x)?;
    let ph = flip4(&model.predict(&flip4(x, true)?)?, true)?;
    let pv = flip4(&model.predict(&flip4(x, false)?)?, false)?;
    let third = 1.0 / 3.0;
    Tensor::lincomb(&p0.scale(E::of(third)), &[(third, &ph), (third, &pv)])
}

// ---------------------------------------------------------------------------
// Files

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("malformed header field".into()));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .expect("digits")
            .parse()
            .map_err(|_| Error::Format("header value out of range".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing separator after header".into()));
    }
    if fields[2] != 255 {
        return Err(Error::Format(format!("unsupported max value {}", fields[2])));
    }
    if fields[0] == 0 || fields[1] == 0 {
        return Err(Error::Format("zero image extent".into()));
    }
    Ok((fields[0], fields[1], pos + 1))
}

fn payload(bytes: &[u8], start: usize, n: usize) -> Result<&[u8]> {
    let end = start + n;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "truncated payload: {} of {n} bytes",
            bytes.len() - start
        )));
    }
    if bytes.len() > end {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(&bytes[start..end])
}

/// Binary pixmap of a `[3, H, W]` image (values rounded to 8 bits).
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let [3, h, w] = *img.shape() else {
        return Err(shape_err!("pixmap needs [3, H, W], got {:?}", img.shape()));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (w, h, start) = parse_header(bytes, b"P6")?;
    let p = payload(bytes, start, 3 * w * h)?;
    let mut data = vec![0.0f32; 3 * w * h];
    for i in 0..w * h {
        for ch in 0..3 {
            data[ch * w * h + i] = p[3 * i + ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Binary graymap with labels as gray values.
pub fn encode_pgm(mask: &LabeledMask) -> Result<Vec<u8>> {
    if mask.count() > 255 {
        return Err(Error::Format(format!(
            "{} labels do not fit in a graymap",
            mask.count()
        )));
    }
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.labels.iter().map(|&l| l as u8));
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabeledMask> {
    let (w, h, start) = parse_header(bytes, b"P5")?;
    let p = payload(bytes, start, w * h)?;
    LabeledMask::from_raw(w, h, p.iter().map(|&v| v as u32).collect())
}

pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f32>> {
    decode_ppm(&std::fs::read(path)?)
}

pub fn write_pgm(path: &Path, mask: &LabeledMask) -> Result<()> {
    std::fs::write(path, encode_pgm(mask)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<LabeledMask> {
    decode_pgm(&std::fs::read(path)?)
}

/// `image<TAB>mask` pairs; relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (img, mask) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!("{}:{}: expected image<TAB>mask", path.display(), n + 1))
            })?;
            pairs.push((dir.join(img), dir.join(mask)));
        }
        Ok(Self { pairs })
    }

    /// Write with paths relative to the manifest's directory.
    pub fn write(path: &Path, pairs: &[(String, String)]) -> Result<()> {
        let mut s = String::new();
        for (i, m) in pairs {
            s += &format!("{i}\t{m}\n");
        }
        std::fs::write(path, s)?;
        Ok(())
    }

    /// Load every pair, named by the image file stem.
    pub fn load(&self) -> Result<Vec<(String, Sample)>> {
        self.pairs
            .iter()
            .map(|(i, m)| {
                let name = i
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let s = Sample::new(read_ppm(i)?, read_pgm(m)?)?;
                Ok((name, s))
            })
            .collect()
    }
}
