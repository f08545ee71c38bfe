//! Instance masks, morphology, post-processing and the gland-challenge
//! object metrics (object Dice, detection F1, object Hausdorff).
//!
//! Connectivity is 4-neighbour throughout. Structuring elements are disks
//! `dx^2 + dy^2 <= r^2`.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{invalid, shape_err, Result};

/// Integer instance map: 0 is background, `1..=count` are instances.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl LabeledMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
        }
    }

    /// Wrap a label map without checking the instance invariants.
    pub fn from_raw(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(shape_err!(
                "{} labels for a {width}x{height} mask",
                labels.len()
            ));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    /// Wrap a label map and check that labels are contiguous from 1 and each
    /// forms a single 4-connected component.
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        let m = Self::from_raw(width, height, labels)?;
        let n = m.count();
        let mut seen = vec![false; n + 1];
        for &l in &m.labels {
            seen[l as usize] = true;
        }
        if seen[1..].iter().any(|s| !s) {
            return Err(invalid!("instance labels are not contiguous"));
        }
        let split = connected_components_by(&m.labels, width, height, |a, b| a == b && a != 0);
        let mut first = vec![None; n + 1];
        for (i, &l) in m.labels.iter().enumerate() {
            if l != 0 && *first[l as usize].get_or_insert(split[i]) != split[i] {
                return Err(invalid!("instance {l} is not 4-connected"));
            }
        }
        Ok(m)
    }

    /// Largest label, which is the instance count for compacted masks.
    pub fn count(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    /// Area per label, index 0 being background.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.count() + 1];
        for &l in &self.labels {
            a[l as usize] += 1;
        }
        a
    }

    /// Renumber labels to `1..=n` in order of first appearance in scan order.
    pub fn compacted(&self) -> Self {
        let mut map = vec![0u32; self.count() + 1];
        let mut next = 0;
        for &l in &self.labels {
            if l != 0 && map[l as usize] == 0 {
                next += 1;
                map[l as usize] = next;
            }
        }
        Self {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&l| map[l as usize]).collect(),
        }
    }
}

fn neighbours4(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// Component index (from 1, scan order) of each pixel, joining 4-neighbours
/// for which `same` holds; pixels with `same(v, v) == false` get 0.
fn connected_components_by<T: Copy>(
    values: &[T],
    w: usize,
    h: usize,
    same: impl Fn(T, T) -> bool,
) -> Vec<u32> {
    let mut out = vec![0u32; values.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..values.len() {
        if out[start] != 0 || !same(values[start], values[start]) {
            continue;
        }
        next += 1;
        out[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for j in neighbours4(i, w, h) {
                if out[j] == 0 && same(values[i], values[j]) {
                    out[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    out
}

/// 4-connected components of `binary`, labeled in scan order.
pub fn connected_components(binary: &[bool], width: usize, height: usize) -> LabeledMask {
    assert_eq!(binary.len(), width * height, "mask extent mismatch");
    LabeledMask {
        width,
        height,
        labels: connected_components_by(binary, width, height, |a, b| a && b),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Morph {
    Erode,
    Dilate,
}

/// Offsets of the disk of radius `r`.
pub fn disk(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut d = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                d.push((dx, dy));
            }
        }
    }
    d
}

/// Binary erosion or dilation with a disk. Pixels outside the image count as
/// set for erosion and unset for dilation, so `erode(m) == !dilate(!m)`.
pub fn morphology(mask: &[bool], width: usize, height: usize, op: Morph, radius: usize) -> Vec<bool> {
    assert_eq!(mask.len(), width * height, "mask extent mismatch");
    let offsets = disk(radius);
    let (w, h) = (width as isize, height as isize);
    let mut out = vec![false; mask.len()];
    for y in 0..h {
        for x in 0..w {
            let mut hit = offsets.iter().filter_map(|&(dx, dy)| {
                let (sx, sy) = (x + dx, y + dy);
                (sx >= 0 && sy >= 0 && sx < w && sy < h).then(|| mask[(sy * w + sx) as usize])
            });
            out[(y * w + x) as usize] = match op {
                Morph::Dilate => hit.any(|v| v),
                Morph::Erode => hit.all(|v| v),
            };
        }
    }
    out
}

/// Each instance eroded on its own, so touching instances come apart.
pub fn eroded_instances(mask: &LabeledMask, radius: usize) -> Vec<bool> {
    let offsets = disk(radius);
    let (w, h) = (mask.width as isize, mask.height as isize);
    let mut out = vec![false; mask.labels.len()];
    for y in 0..h {
        for x in 0..w {
            let l = mask.labels[(y * w + x) as usize];
            if l == 0 {
                continue;
            }
            out[(y * w + x) as usize] = offsets.iter().all(|&(dx, dy)| {
                let (sx, sy) = (x + dx, y + dy);
                !(sx >= 0 && sy >= 0 && sx < w && sy < h) || mask.labels[(sy * w + sx) as usize] == l
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PostprocessConfig {
    pub t_seed: f64,
    pub t_mask: f64,
    pub min_area: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            t_seed: 0.5,
            t_mask: 0.5,
            min_area: 16,
        }
    }
}

/// Instances from the full-mask and eroded-mask foreground probabilities.
///
/// Seeds are the components of `eroded > t_seed`. They grow one 4-neighbour
/// ring per round into `full > t_mask` until nothing changes; a pixel reached
/// by several seeds in the same round takes the lowest label. Foreground
/// components no seed reaches become instances of their own. Instances
/// smaller than `min_area` are dropped and the rest relabeled.
pub fn postprocess_instances(
    full_prob: &[f64],
    eroded_prob: &[f64],
    width: usize,
    height: usize,
    cfg: &PostprocessConfig,
) -> Result<LabeledMask> {
    let n = width * height;
    if full_prob.len() != n || eroded_prob.len() != n {
        return Err(shape_err!("probability maps do not match {width}x{height}"));
    }
    let fg: Vec<bool> = full_prob.iter().map(|&p| p > cfg.t_mask).collect();
    let seeds: Vec<bool> = eroded_prob.iter().map(|&p| p > cfg.t_seed).collect();
    let mut labels = connected_components(&seeds, width, height).labels;
    loop {
        let mut changed = false;
        let prev = labels.clone();
        for i in 0..n {
            if prev[i] != 0 || !fg[i] {
                continue;
            }
            if let Some(l) = neighbours4(i, width, height)
                .map(|j| prev[j])
                .filter(|&l| l != 0)
                .min()
            {
                labels[i] = l;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut next = labels.iter().copied().max().unwrap_or(0);
    let rest: Vec<bool> = (0..n).map(|i| fg[i] && labels[i] == 0).collect();
    let extra = connected_components(&rest, width, height);
    for (l, &e) in labels.iter_mut().zip(&extra.labels) {
        if e != 0 {
            *l = next + e;
        }
    }
    next += extra.count() as u32;
    let mut area = vec![0usize; next as usize + 1];
    for &l in &labels {
        area[l as usize] += 1;
    }
    for l in labels.iter_mut() {
        if area[*l as usize] < cfg.min_area {
            *l = 0;
        }
    }
    Ok(LabeledMask::from_raw(width, height, labels)?.compacted())
}

/// Per-image object scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectScores {
    pub object_dice: f64,
    pub f1: f64,
    pub hausdorff: f64,
}

/// Pixel counts of the overlap between each pair of labels.
struct Overlap {
    /// `table[i][j]`: pixels with pred label `i` and gt label `j` (0 included).
    table: Vec<Vec<usize>>,
    pred_area: Vec<usize>,
    gt_area: Vec<usize>,
}

fn check_extents(a: &LabeledMask, b: &LabeledMask) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(shape_err!(
            "masks are {}x{} and {}x{}",
            a.width,
            a.height,
            b.width,
            b.height
        ));
    }
    Ok(())
}

impl Overlap {
    fn new(pred: &LabeledMask, gt: &LabeledMask) -> Self {
        let (np, ng) = (pred.count(), gt.count());
        let mut table = vec![vec![0; ng + 1]; np + 1];
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            table[p as usize][g as usize] += 1;
        }
        Self {
            table,
            pred_area: pred.areas(),
            gt_area: gt.areas(),
        }
    }

    fn transposed(&self) -> Self {
        let np = self.table.len();
        let ng = self.table[0].len();
        let table = (0..ng)
            .map(|j| (0..np).map(|i| self.table[i][j]).collect())
            .collect();
        Self {
            table,
            pred_area: self.gt_area.clone(),
            gt_area: self.pred_area.clone(),
        }
    }

    /// Non-empty labels on the "pred" side.
    fn objects(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.pred_area.len()).filter(|&i| self.pred_area[i] > 0)
    }

    fn counterparts(&self) -> impl Iterator<Item = usize> + '_ {
        (1..self.gt_area.len()).filter(|&j| self.gt_area[j] > 0)
    }

    /// Counterpart of object `i` with the largest overlap. Ties go to the
    /// better `score`, then the lower label.
    fn best_match(&self, i: usize, score: impl Fn(usize) -> f64, higher_is_better: bool) -> Option<usize> {
        let mut best: Option<(usize, f64, usize)> = None;
        for j in self.counterparts() {
            let o = self.table[i][j];
            if o == 0 {
                continue;
            }
            let s = score(j);
            let better = match best {
                None => true,
                Some((bo, bs, _)) => {
                    o > bo || (o == bo && if higher_is_better { s > bs } else { s < bs })
                }
            };
            if better {
                best = Some((o, s, j));
            }
        }
        best.map(|b| b.2)
    }
}

fn dice(overlap: usize, a: usize, b: usize) -> f64 {
    2.0 * overlap as f64 / (a + b) as f64
}

/// One half of the object Dice sum: area-weighted Dice of each "pred"-side
/// object against its best-overlapping counterpart.
fn dice_half(ov: &Overlap) -> f64 {
    let total: usize = ov.objects().map(|i| ov.pred_area[i]).sum();
    let weighted: f64 = ov
        .objects()
        .map(|i| {
            let d = |j: usize| dice(ov.table[i][j], ov.pred_area[i], ov.gt_area[j]);
            ov.pred_area[i] as f64 * ov.best_match(i, d, true).map_or(0.0, d)
        })
        .sum();
    weighted / total as f64
}

/// Area-weighted, symmetrized per-object Dice. 1 when both masks are empty,
/// 0 when exactly one is.
pub fn object_dice(pred: &LabeledMask, gt: &LabeledMask) -> Result<f64> {
    check_extents(pred, gt)?;
    let ov = Overlap::new(pred, gt);
    match (ov.objects().next().is_some(), ov.counterparts().next().is_some()) {
        (false, false) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    Ok(0.5 * (dice_half(&ov) + dice_half(&ov.transposed())))
}

/// A prediction is a true positive when it covers more than half of some
/// ground-truth object; each ground-truth object is matched at most once.
pub fn detection_f1(pred: &LabeledMask, gt: &LabeledMask) -> Result<f64> {
    check_extents(pred, gt)?;
    let ov = Overlap::new(pred, gt);
    let np = ov.objects().count();
    let ng = ov.counterparts().count();
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for i in ov.objects() {
        for j in ov.counterparts() {
            let o = ov.table[i][j];
            if 2 * o > ov.gt_area[j] {
                pairs.push((o, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut pred_used = vec![false; ov.pred_area.len()];
    let mut gt_used = vec![false; ov.gt_area.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            tp += 1;
        }
    }
    let (fp, fneg) = (np - tp, ng - tp);
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

/// Boundary pixels `(x, y)` of each label: object pixels with a 4-neighbour
/// outside the object or on the image border.
fn boundaries(m: &LabeledMask) -> Vec<Vec<(i64, i64)>> {
    let mut out = vec![Vec::new(); m.count() + 1];
    let (w, h) = (m.width, m.height);
    for y in 0..h {
        for x in 0..w {
            let l = m.labels[y * w + x];
            if l == 0 {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || neighbours4(y * w + x, w, h).any(|j| m.labels[j] != l);
            if edge {
                out[l as usize].push((x as i64, y as i64));
            }
        }
    }
    out
}

fn dist2(a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)
}

/// Symmetric Hausdorff distance between two point sets.
pub fn hausdorff(a: &[(i64, i64)], b: &[(i64, i64)]) -> f64 {
    let directed = |p: &[(i64, i64)], q: &[(i64, i64)]| {
        p.iter()
            .map(|&u| q.iter().map(|&v| dist2(u, v)).min().unwrap_or(i64::MAX))
            .max()
            .unwrap_or(0)
    };
    (directed(a, b).max(directed(b, a)) as f64).sqrt()
}

fn min_distance(a: &[(i64, i64)], b: &[(i64, i64)]) -> i64 {
    a.iter()
        .flat_map(|&u| b.iter().map(move |&v| dist2(u, v)))
        .min()
        .unwrap_or(i64::MAX)
}

fn hausdorff_half(
    ov: &Overlap,
    own: &[Vec<(i64, i64)>],
    other: &[Vec<(i64, i64)>],
    diagonal: f64,
) -> f64 {
    let total: usize = ov.objects().map(|i| ov.pred_area[i]).sum();
    if total == 0 {
        return 0.0;
    }
    let weighted: f64 = ov
        .objects()
        .map(|i| {
            let hd = |j: usize| hausdorff(&own[i], &other[j]);
            let d = match ov.best_match(i, hd, false) {
                Some(j) => hd(j),
                None => {
                    // nearest counterpart by boundary distance, then the
                    // smaller Hausdorff distance, then the lower label
                    ov.counterparts()
                        .map(|j| (min_distance(&own[i], &other[j]), hd(j)))
                        .min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)))
                        .map_or(diagonal, |(_, h)| h)
                }
            };
            ov.pred_area[i] as f64 * d
        })
        .sum();
    weighted / total as f64
}

/// Area-weighted, symmetrized per-object Hausdorff distance between
/// boundaries. An object without an overlapping counterpart is compared with
/// the nearest one; with no counterparts at all it scores the image
/// diagonal. 0 when both masks are empty.
pub fn object_hausdorff(pred: &LabeledMask, gt: &LabeledMask) -> Result<f64> {
    check_extents(pred, gt)?;
    let ov = Overlap::new(pred, gt);
    let diagonal = ((pred.width.pow(2) + pred.height.pow(2)) as f64).sqrt();
    let (bp, bg) = (boundaries(pred), boundaries(gt));
    Ok(0.5 * (hausdorff_half(&ov, &bp, &bg, diagonal) + hausdorff_half(&ov.transposed(), &bg, &bp, diagonal)))
}

pub fn object_scores(pred: &LabeledMask, gt: &LabeledMask) -> Result<ObjectScores> {
    Ok(ObjectScores {
        object_dice: object_dice(pred, gt)?,
        f1: detection_f1(pred, gt)?,
        hausdorff: object_hausdorff(pred, gt)?,
    })
}

/// Arithmetic mean of each score.
pub fn mean_scores(rows: &[(String, ObjectScores)]) -> ObjectScores {
    let n = rows.len().max(1) as f64;
    let sum = |f: fn(&ObjectScores) -> f64| rows.iter().map(|(_, s)| f(s)).sum::<f64>() / n;
    ObjectScores {
        object_dice: sum(|s| s.object_dice),
        f1: sum(|s| s.f1),
        hausdorff: sum(|s| s.hausdorff),
    }
}

/// Comma-separated table with a trailing `mean` row.
pub fn metrics_table(rows: &[(String, ObjectScores)]) -> String {
    let mut s = String::from("name,object_dice,f1,hausdorff\n");
    let line = |s: &mut String, name: &str, r: &ObjectScores| {
        writeln!(s, "{name},{},{},{}", r.object_dice, r.f1, r.hausdorff).expect("string write");
    };
    for (name, r) in rows {
        line(&mut s, name, r);
    }
    line(&mut s, "mean", &mean_scores(rows));
    s
}

/// One `key=value` record per line, same content as [`metrics_table`].
pub fn metrics_records(rows: &[(String, ObjectScores)]) -> String {
    let mut s = String::new();
    let mean = mean_scores(rows);
    for (name, r) in rows.iter().map(|(n, r)| (n.as_str(), r)).chain([("mean", &mean)]) {
        writeln!(
            s,
            "name={name} object_dice={} f1={} hausdorff={}",
            r.object_dice, r.f1, r.hausdorff
        )
        .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: &[&str]) -> LabeledMask {
        let h = rows.len();
        let w = rows[0].len();
        let labels = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c.to_digit(10).unwrap()))
            .collect();
        LabeledMask::from_raw(w, h, labels).unwrap()
    }

    #[test]
    fn components_basic() {
        assert_eq!(connected_components(&[false; 9], 3, 3).count(), 0);
        let diag = [true, false, false, true];
        assert_eq!(connected_components(&diag, 2, 2).count(), 2);
    }

    #[test]
    fn new_checks_invariants() {
        assert!(LabeledMask::new(3, 1, vec![1, 0, 1]).is_err());
        assert!(LabeledMask::new(3, 1, vec![2, 2, 0]).is_err());
        assert!(LabeledMask::new(3, 1, vec![1, 1, 2]).is_ok());
    }

    #[test]
    fn single_pixel_morphology() {
        let mut m = vec![false; 25];
        m[12] = true;
        let e = morphology(&m, 5, 5, Morph::Erode, 1);
        assert!(e.iter().all(|v| !v));
        assert!(morphology(&e, 5, 5, Morph::Dilate, 1).iter().all(|v| !v));
        let d = morphology(&m, 5, 5, Morph::Dilate, 1);
        let on: Vec<usize> = (0..25).filter(|&i| d[i]).collect();
        assert_eq!(on, vec![7, 11, 12, 13, 17]);
    }

    #[test]
    fn detection_threshold() {
        // prediction covers 4 of 10 gt pixels
        let gt = mask(&["1111111111"]);
        let pred = mask(&["1111000000"]);
        assert_eq!(detection_f1(&pred, &gt).unwrap(), 0.0);
    }

    #[test]
    fn empty_cases() {
        let e = LabeledMask::empty(4, 4);
        let one = mask(&["0000", "0110", "0110", "0000"]);
        assert_eq!(object_dice(&e, &e).unwrap(), 1.0);
        assert_eq!(object_dice(&one, &e).unwrap(), 0.0);
        assert_eq!(detection_f1(&e, &e).unwrap(), 1.0);
        assert_eq!(detection_f1(&e, &one).unwrap(), 0.0);
        assert_eq!(object_hausdorff(&e, &e).unwrap(), 0.0);
        assert_eq!(object_hausdorff(&one, &one).unwrap(), 0.0);
    }

    #[test]
    fn shifted_pixel_hausdorff() {
        let a = mask(&["0100"]);
        let b = mask(&["0010"]);
        assert_eq!(object_hausdorff(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn postprocess_fallback_and_min_area() {
        let w = 8;
        let mut full = vec![0.0; 64];
        for y in 1..6 {
            for x in 1..6 {
                full[y * w + x] = 0.9;
            }
        }
        full[63] = 0.9;
        let cfg = PostprocessConfig {
            min_area: 2,
            ..Default::default()
        };
        let m = postprocess_instances(&full, &[0.0; 64], 8, 8, &cfg).unwrap();
        assert_eq!(m.count(), 1);
        assert_eq!(m.areas()[1], 25);
    }

    #[test]
    fn report_has_mean_row() {
        let s = ObjectScores {
            object_dice: 0.5,
            f1: 1.0,
            hausdorff: 2.0,
        };
        let t = ObjectScores {
            object_dice: 1.0,
            f1: 0.0,
            hausdorff: 4.0,
        };
        let table = metrics_table(&[("a".into(), s), ("b".into(), t)]);
        assert_eq!(table.lines().next(), Some("name,object_dice,f1,hausdorff"));
        assert_eq!(table.lines().last(), Some("mean,0.75,0.5,3"));
        assert_eq!(metrics_records(&[("a".into(), s)]).lines().count(), 2);
    }
}
