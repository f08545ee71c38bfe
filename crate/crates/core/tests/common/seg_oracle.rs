// Brute-force object metrics straight from the set definitions, plus a suite
// of small hand-drawn mask pairs. Shared by the seg tests and the acceptance
// target.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use unode_core::seg::LabeledMask;

type Px = (i64, i64);
type Objects = BTreeMap<u32, HashSet<Px>>;

/// Parse rows of `.` (background), `1`-`9` and `a`-`z` (labels 10..).
pub fn mask(rows: &[&str]) -> LabeledMask {
    try_mask(rows).unwrap_or_else(|| panic!("fixture is not a valid instance mask: {rows:?}"))
}

fn try_mask(rows: &[&str]) -> Option<LabeledMask> {
    let h = rows.len();
    let w = rows[0].len();
    let mut labels = Vec::with_capacity(w * h);
    for r in rows {
        assert_eq!(r.len(), w, "ragged fixture");
        for c in r.chars() {
            labels.push(match c {
                '.' => 0,
                '1'..='9' => c as u32 - '0' as u32,
                'a'..='z' => c as u32 - 'a' as u32 + 10,
                _ => panic!("bad fixture char {c:?}"),
            });
        }
    }
    LabeledMask::new(w, h, labels).ok()
}

fn objects(m: &LabeledMask) -> Objects {
    let mut out = Objects::new();
    for y in 0..m.height {
        for x in 0..m.width {
            let l = m.get(x, y);
            if l != 0 {
                out.entry(l).or_default().insert((x as i64, y as i64));
            }
        }
    }
    out
}

fn inter(a: &HashSet<Px>, b: &HashSet<Px>) -> usize {
    a.intersection(b).count()
}

fn dice(a: &HashSet<Px>, b: &HashSet<Px>) -> f64 {
    2.0 * inter(a, b) as f64 / (a.len() + b.len()) as f64
}

fn boundary(a: &HashSet<Px>, w: usize, h: usize) -> Vec<Px> {
    let mut out: Vec<Px> = a
        .iter()
        .copied()
        .filter(|&(x, y)| {
            let on_border = x == 0 || y == 0 || x + 1 == w as i64 || y + 1 == h as i64;
            on_border || [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !a.contains(&(x + dx, y + dy)))
        })
        .collect();
    out.sort();
    out
}

fn dist(a: Px, b: Px) -> f64 {
    (((a.0 - b.0).pow(2) + (a.1 - b.1).pow(2)) as f64).sqrt()
}

fn hd(a: &[Px], b: &[Px]) -> f64 {
    let directed = |p: &[Px], q: &[Px]| {
        p.iter()
            .map(|&u| q.iter().map(|&v| dist(u, v)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}

/// Counterparts of `a` with the largest non-zero overlap.
fn max_overlap<'a>(a: &HashSet<Px>, others: &'a Objects) -> Vec<&'a HashSet<Px>> {
    let best = others.values().map(|b| inter(a, b)).max().unwrap_or(0);
    if best == 0 {
        return vec![];
    }
    others.values().filter(|b| inter(a, b) == best).collect()
}

fn dice_half(own: &Objects, other: &Objects) -> f64 {
    let total: usize = own.values().map(HashSet::len).sum();
    let weighted: f64 = own
        .values()
        .map(|a| {
            let d = max_overlap(a, other).into_iter().map(|b| dice(a, b)).fold(0.0, f64::max);
            a.len() as f64 * d
        })
        .sum();
    weighted / total as f64
}

pub fn oracle_dice(pred: &LabeledMask, gt: &LabeledMask) -> f64 {
    let (p, g) = (objects(pred), objects(gt));
    match (p.is_empty(), g.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => 0.5 * (dice_half(&p, &g) + dice_half(&g, &p)),
    }
}

pub fn oracle_f1(pred: &LabeledMask, gt: &LabeledMask) -> f64 {
    let (p, g) = (objects(pred), objects(gt));
    match (p.is_empty(), g.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    // a gt object can be more than half covered by at most one prediction,
    // so the matching size is the number of predictions covering some object
    let tp = p.values().filter(|a| g.values().any(|b| 2 * inter(a, b) > b.len())).count();
    let (fp, fneg) = (p.len() - tp, g.len() - tp);
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

fn hausdorff_half(own: &Objects, other: &Objects, w: usize, h: usize) -> f64 {
    let total: usize = own.values().map(HashSet::len).sum();
    let diagonal = ((w * w + h * h) as f64).sqrt();
    if own.is_empty() {
        return 0.0;
    }
    let weighted: f64 = own
        .values()
        .map(|a| {
            let ba = boundary(a, w, h);
            let overlapping = max_overlap(a, other);
            let d = if !overlapping.is_empty() {
                overlapping.iter().map(|b| hd(&ba, &boundary(b, w, h))).fold(f64::INFINITY, f64::min)
            } else if other.is_empty() {
                diagonal
            } else {
                let gap = |b: &HashSet<Px>| {
                    let bb = boundary(b, w, h);
                    ba.iter().flat_map(|&u| bb.iter().map(move |&v| dist(u, v))).fold(f64::INFINITY, f64::min)
                };
                let nearest = other.values().map(gap).fold(f64::INFINITY, f64::min);
                other
                    .values()
                    .filter(|b| gap(b) == nearest)
                    .map(|b| hd(&ba, &boundary(b, w, h)))
                    .fold(f64::INFINITY, f64::min)
            };
            a.len() as f64 * d
        })
        .sum();
    weighted / total as f64
}

pub fn oracle_hausdorff(pred: &LabeledMask, gt: &LabeledMask) -> f64 {
    let (p, g) = (objects(pred), objects(gt));
    let (w, h) = (pred.width, pred.height);
    0.5 * (hausdorff_half(&p, &g, w, h) + hausdorff_half(&g, &p, w, h))
}

pub struct Fixture {
    pub name: &'static str,
    pub pred: LabeledMask,
    pub gt: LabeledMask,
}

fn fx(name: &'static str, pred: &[&str], gt: &[&str]) -> Fixture {
    Fixture {
        name,
        pred: mask(pred),
        gt: mask(gt),
    }
}

/// Hand-drawn prediction/ground-truth pairs, none larger than 16x16.
pub fn fixtures() -> Vec<Fixture> {
    vec![
        fx(
            "identical squares",
            &["......", ".11...", ".11...", "...22.", "...22.", "......"],
            &["......", ".11...", ".11...", "...22.", "...22.", "......"],
        ),
        fx(
            "disjoint objects",
            &["11....", "11....", "......", "......", "......", "......"],
            &["......", "......", "......", "......", "....11", "....11"],
        ),
        fx(
            "square split in halves",
            &["......", ".1122.", ".1122.", ".1122.", ".1122.", "......"],
            &["......", ".1111.", ".1111.", ".1111.", ".1111.", "......"],
        ),
        fx(
            "touching glands merged",
            &["........", ".111111.", ".111111.", ".111111.", "........"],
            &["........", ".111222.", ".111222.", ".111222.", "........"],
        ),
        fx(
            "touching glands separated",
            &["........", ".112222.", ".112222.", ".112222.", "........"],
            &["........", ".111222.", ".111222.", ".111222.", "........"],
        ),
        fx(
            "touching glands split off-centre vertically",
            &["1111....", "1111....", "2222....", "2222....", "2222....", "........"],
            &["1111....", "1111....", "1111....", "2222....", "2222....", "........"],
        ),
        fx(
            "forty percent coverage",
            &["..........", "..........", ".1111.....", "..........", ".........."],
            &["..........", "..........", ".111111111", "..........", ".........."],
        ),
        fx(
            "three gt two predictions",
            &["11..22....", "11..22....", "..........", "..........", ".........."],
            &["11..22..33", "11..22..33", "..........", "..........", ".........."],
        ),
        fx(
            "empty prediction",
            &["......", "......", "......", "......"],
            &["......", ".11...", ".11...", "......"],
        ),
        fx(
            "empty ground truth",
            &["......", "...11.", "...11.", "......"],
            &["......", "......", "......", "......"],
        ),
        fx("both empty", &["....", "....", "....", "...."], &["....", "....", "....", "...."]),
        fx(
            "pixel shifted right",
            &[".....", ".....", "...1.", ".....", "....."],
            &[".....", ".....", "..1..", ".....", "....."],
        ),
        fx(
            "square vs dilated square",
            &[
                ".........",
                "....1....",
                "..11111..",
                "..11111..",
                ".1111111.",
                "..11111..",
                "..11111..",
                "....1....",
                ".........",
            ],
            &[
                ".........",
                ".........",
                "..11111..",
                "..11111..",
                "..11111..",
                "..11111..",
                "..11111..",
                ".........",
                ".........",
            ],
        ),
        fx(
            "permuted labels",
            &["......", ".22...", ".22...", "...11.", "...11.", "......"],
            &["......", ".11...", ".11...", "...22.", "...22.", "......"],
        ),
        fx(
            "overlap tie between counterparts",
            &["........", "..1111..", "..1111..", "........"],
            &["........", "1111222.", "1111222.", "........"],
        ),
        fx(
            "unmatched far object",
            &[
                "11..........",
                "11..........",
                "............",
                "............",
                "............",
                ".........22.",
                ".........22.",
            ],
            &[
                "11..........",
                "11..........",
                "............",
                "....22......",
                "....22......",
                "............",
                "............",
            ],
        ),
        fx(
            "objects on the image border",
            &["111.", "111.", "....", "..22"],
            &["11..", "11..", "...2", "..22"],
        ),
        fx(
            "ring against filled disk",
            &[".......", ".11111.", ".1...1.", ".1...1.", ".1...1.", ".11111.", "......."],
            &[".......", ".11111.", ".11111.", ".11111.", ".11111.", ".11111.", "......."],
        ),
        fx(
            "l shape against bar",
            &["1.....", "1.....", "1.....", "1111..", "......"],
            &["......", "......", "......", "1111..", "......"],
        ),
        fx(
            "many small objects",
            &[
                "1.2.3.4.",
                "........",
                "5.6.7.8.",
                "........",
                "9.a.b.c.",
                "........",
            ],
            &[
                "1.2.....",
                "........",
                "3.4.5...",
                "........",
                "....6.7.",
                "........",
            ],
        ),
        fx(
            "oversegmented gland",
            &["........", ".112233.", ".112233.", ".445566.", ".445566.", "........"],
            &["........", ".111111.", ".111111.", ".111111.", ".111111.", "........"],
        ),
        fx(
            "three touching glands partially merged",
            &[
                "................",
                ".11111111.2222..",
                ".11111111.2222..",
                ".11111111.2222..",
                "................",
            ],
            &[
                "................",
                ".1111222233333..",
                ".1111222233333..",
                ".1111222233333..",
                "................",
            ],
        ),
        fx(
            "full 16x16 mixed scene",
            &[
                "................",
                ".1111.....222...",
                ".1111....22222..",
                ".1111.....222...",
                "................",
                "......33333.....",
                "......33333.....",
                "......33333.....",
                "................",
                ".44........555..",
                ".44........555..",
                "...........555..",
                "................",
                "......666666....",
                "......666666....",
                "................",
            ],
            &[
                "................",
                ".111......222...",
                ".111.....22222..",
                ".111......222...",
                ".111............",
                "......33344.....",
                "......33344.....",
                "......33344.....",
                "................",
                "...........555..",
                "...........555..",
                "...........555..",
                "................",
                "......666777....",
                "......666777....",
                "................",
            ],
        ),
        fx(
            "nearest of two unmatched counterparts",
            &["..........", "....11....", "....11....", "..........", ".........."],
            &["11........", "11........", "..........", "........22", "........22"],
        ),
    ]
}
