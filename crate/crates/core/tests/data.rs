use std::cell::Cell;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unode_core::data::*;
use unode_core::seg::LabeledMask;
use unode_core::{Result, Tensor};

/// Pairs of distinct labels that meet in the 8-neighbourhood.
fn touching_pairs(m: &LabeledMask) -> usize {
    let mut pairs = std::collections::BTreeSet::new();
    for y in 0..m.height {
        for x in 0..m.width {
            let a = m.get(x, y);
            if a == 0 {
                continue;
            }
            for (dx, dy) in [(1i64, 0i64), (0, 1), (1, 1), (1, -1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= m.width as i64 || ny >= m.height as i64 {
                    continue;
                }
                let b = m.get(nx as usize, ny as usize);
                if b != 0 && b != a {
                    pairs.insert((a.min(b), a.max(b)));
                }
            }
        }
    }
    pairs.len()
}

#[test]
fn generation_is_deterministic_and_prefix_stable() {
    let a = generate_synthetic(11, 6, 48, 0.3).unwrap();
    let b = generate_synthetic(11, 6, 48, 0.3).unwrap();
    let c = generate_synthetic(11, 3, 48, 0.3).unwrap();
    let d = generate_synthetic(12, 3, 48, 0.3).unwrap();
    assert_eq!(a, b);
    assert_eq!(&a[..3], &c[..]);
    assert_ne!(c, d);
}

#[test]
fn separate_glands_never_touch() {
    for s in generate_synthetic(3, 80, 64, 0.0).unwrap() {
        assert_eq!(touching_pairs(&s.mask), 0);
    }
}

#[test]
fn touching_fraction_controls_contacts() {
    let samples = generate_synthetic(4, 120, 64, 1.0).unwrap();
    let multi: Vec<_> = samples.iter().filter(|s| s.mask.count() >= 2).collect();
    let touching = multi.iter().filter(|s| touching_pairs(&s.mask) >= 1).count();
    assert!(touching * 10 >= multi.len() * 9, "{touching} of {}", multi.len());
    // only the one designated pair ever shares a boundary
    assert!(multi.iter().all(|s| touching_pairs(&s.mask) <= 1));
}

#[test]
fn gland_count_is_uniform_one_to_six() {
    let n = 600;
    let counts: Vec<usize> = generate_synthetic(5, n, 32, 0.3).unwrap().iter().map(|s| s.mask.count()).collect();
    assert!(counts.iter().all(|&c| (1..=MAX_GLANDS).contains(&c)), "{counts:?}");
    let mean = counts.iter().sum::<usize>() as f64 / n as f64;
    let sd = (35.0f64 / 12.0).sqrt() / (n as f64).sqrt();
    assert!((mean - 3.5).abs() < 3.0 * sd, "mean {mean}");
    for k in 1..=MAX_GLANDS {
        let seen = counts.iter().filter(|&&c| c == k).count() as f64;
        // binomial(n, 1/6) within four standard deviations
        let (e, s) = (n as f64 / 6.0, (n as f64 * 5.0 / 36.0).sqrt());
        assert!((seen - e).abs() < 4.0 * s, "count {k} seen {seen}");
    }
}

#[test]
fn samples_are_well_formed() {
    for s in generate_synthetic(6, 20, 40, 0.3).unwrap() {
        assert_eq!(s.image.shape(), &[3, 40, 40]);
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(s.mask, s.mask.compacted());
        assert_eq!(s.mask, largest_components(&s.mask));
    }
}

/// Explicit mirror tiling `abcd` -> `...cb|abcd|cba...`.
fn mirrored(n: usize, i: isize) -> usize {
    let period: Vec<usize> = (0..n).chain((1..n.saturating_sub(1)).rev()).collect();
    period[i.rem_euclid(period.len() as isize) as usize]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reflect_pad_matches_mirror_tiling(h in 2usize..7, w in 2usize..7, ph in 0usize..9, pw in 0usize..9) {
        let img = Tensor::<f64>::from_fn(&[2, h, w], |i| i as f64);
        let (th, tw) = (h + ph, w + pw);
        let out = reflect_pad(&img, (th, tw)).unwrap();
        let (top, left) = (ph / 2, pw / 2);
        for c in 0..2 {
            for y in 0..th {
                for x in 0..tw {
                    let sy = mirrored(h, y as isize - top as isize);
                    let sx = mirrored(w, x as isize - left as isize);
                    prop_assert_eq!(out.data()[(c * th + y) * tw + x], img.data()[(c * h + sy) * w + sx]);
                }
            }
        }
    }

    #[test]
    fn preprocess_keeps_unscaled_content_centred(h in 4usize..12, w in 4usize..12, pad in 0usize..6) {
        let img = Tensor::<f64>::from_fn(&[3, h, w], |i| (i as f64).sin());
        let out = preprocess(&img, 1.0, (h + pad, w + pad)).unwrap();
        let top = pad / 2;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let got = out.data()[(c * (h + pad) + y + top) * (w + pad) + x + top];
                    prop_assert_eq!(got, img.data()[(c * h + y) * w + x]);
                }
            }
        }
    }

    #[test]
    fn augmentation_never_adds_labels(seed in any::<u64>()) {
        let s = synth_sample(&mut sample_rng(seed, 0), 32, 0.5).unwrap();
        let a = augment(&s, seed ^ 0x5eed, &AugmentConfig::default());
        prop_assert_eq!(a.image.shape(), s.image.shape());
        prop_assert!(a.mask.count() <= s.mask.count());
        prop_assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn augmentation_is_seeded(seed in any::<u64>()) {
        let s = synth_sample(&mut sample_rng(1, 0), 32, 0.5).unwrap();
        let cfg = AugmentConfig::default();
        prop_assert_eq!(augment(&s, seed, &cfg), augment(&s, seed, &cfg));
    }
}

#[test]
fn downscale_halves_extent() {
    let img = Tensor::<f64>::from_fn(&[1, 8, 6], |i| i as f64);
    let out = preprocess(&img, 2.0, (4, 3)).unwrap();
    assert_eq!(out.shape(), &[1, 4, 3]);
    // factor two samples midway between source pixel pairs
    let at = |y: usize, x: usize| img.data()[y * 6 + x];
    let want = (at(2, 2) + at(2, 3) + at(3, 2) + at(3, 3)) / 4.0;
    assert!((out.data()[3 + 1] - want).abs() < 1e-12);
}

#[test]
fn flips_and_turns_are_involutions() {
    for s in generate_synthetic(7, 5, 32, 0.5).unwrap() {
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        assert_eq!(flip_vertical(&flip_vertical(&s)), s);
        assert_eq!(rotate90(&rotate90(&s, 1).unwrap(), 3).unwrap(), s);
        assert_eq!(rotate90(&rotate90(&s, 2).unwrap(), 2).unwrap(), s);
        let hv = flip_vertical(&flip_horizontal(&s));
        assert_eq!(hv.mask.count(), s.mask.count());
        assert_eq!(hv.image, rotate90(&s, 2).unwrap().image);
    }
}

#[test]
fn zero_deformations_are_identities() {
    let s = synth_sample(&mut sample_rng(8, 0), 32, 0.3).unwrap();
    let zero = (vec![0.0; 32 * 32], vec![0.0; 32 * 32]);
    assert_eq!(elastic(&s, &zero), s);
    assert_eq!(rotate(&s, 0.0), s);
    assert_eq!(translate(&s, 0, 0), s);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (fx, fy) = elastic_field(&mut rng, 32, 32, 0.0, 3);
    assert!(fx.iter().chain(&fy).all(|&v| v == 0.0));
    let jittered = color_jitter(&s, 1.0, 1.0, 1.0);
    assert_eq!(jittered.mask, s.mask);
    let d = jittered.image.sub(&s.image).unwrap().max_abs();
    assert!(d < 1e-6, "{d}");
}

#[test]
fn elastic_field_peak_is_the_amplitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (fx, fy) = elastic_field(&mut rng, 24, 20, 2.5, 3);
    let peak = fx.iter().zip(&fy).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max);
    assert!((peak - 2.5).abs() < 1e-12);
}

#[test]
fn translation_moves_the_mask() {
    let s = synth_sample(&mut sample_rng(10, 0), 32, 0.0).unwrap();
    let t = translate(&s, 3, -2);
    for y in 0..32usize {
        for x in 0..32usize {
            let (sx, sy) = (x as i64 - 3, y as i64 + 2);
            let inside = (0..32).contains(&sx) && (0..32).contains(&sy);
            let fg = inside && s.mask.get(sx as usize, sy as usize) != 0;
            assert_eq!(t.mask.get(x, y) != 0, fg, "({x}, {y})");
        }
    }
}

#[test]
fn image_files_roundtrip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth_sample(&mut sample_rng(12, 0), 48, 0.3).unwrap();
    let (ip, mp) = (dir.path().join("a.ppm"), dir.path().join("a.pgm"));
    write_ppm(&ip, &s.image).unwrap();
    write_pgm(&mp, &s.mask).unwrap();
    assert_eq!(read_ppm(&ip).unwrap(), s.image);
    assert_eq!(read_pgm(&mp).unwrap(), s.mask);

    let bytes = encode_ppm(&s.image).unwrap();
    assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_ppm(&long).is_err());
    assert!(decode_pgm(&bytes).is_err());
    let gm = encode_pgm(&s.mask).unwrap();
    assert!(decode_pgm(&gm[..gm.len() - 3]).is_err());
    assert!(decode_pgm(b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").is_err());
    assert!(decode_pgm(b"P5\n0 2\n255\n").is_err());
}

#[test]
fn manifest_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("imgs");
    std::fs::create_dir(&sub).unwrap();
    let samples = generate_synthetic(13, 3, 32, 0.3).unwrap();
    let mut pairs = vec![];
    for (i, s) in samples.iter().enumerate() {
        write_ppm(&sub.join(format!("s{i}.ppm")), &s.image).unwrap();
        write_pgm(&sub.join(format!("s{i}.pgm")), &s.mask).unwrap();
        pairs.push((format!("imgs/s{i}.ppm"), format!("imgs/s{i}.pgm")));
    }
    let path = dir.path().join("list.tsv");
    Manifest::write(&path, &pairs).unwrap();
    let loaded = Manifest::read(&path).unwrap().load().unwrap();
    assert_eq!(loaded.len(), 3);
    for (i, (name, s)) in loaded.iter().enumerate() {
        assert_eq!(name, &format!("s{i}"));
        assert_eq!(s, &samples[i]);
    }
    std::fs::write(&path, "no tab here\n").unwrap();
    assert!(Manifest::read(&path).is_err());
}

#[test]
fn tta_with_an_equivariant_model_is_the_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::<f64>::from_fn(&[2, 3, 5, 6], |_| rng.random_range(0.0..1.0));
    // pointwise maps commute with flips
    let calls = Cell::new(0);
    let model = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
        calls.set(calls.get() + 1);
        Ok(t.map(|v| v * v))
    };
    let got = tta_predict(&model, &x).unwrap();
    assert_eq!(calls.get(), 3);
    let d = got.sub(&x.map(|v| v * v)).unwrap().max_abs();
    assert!(d < 1e-15);
}

#[test]
fn tta_averages_flipped_predictions() {
    // a left-neighbour difference is not flip equivariant
    let model = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
        let w = t.dims4()?.3;
        Ok(Tensor::from_fn(t.shape(), |i| if i % w == 0 { 0.0 } else { t.data()[i] - t.data()[i - 1] }))
    };
    let x = Tensor::<f64>::from_fn(&[1, 1, 3, 4], |i| (i * i) as f64);
    let p0 = model(&x).unwrap();
    let ph = flip4(&model(&flip4(&x, true).unwrap()).unwrap(), true).unwrap();
    let pv = flip4(&model(&flip4(&x, false).unwrap()).unwrap(), false).unwrap();
    let got = tta_predict(&model, &x).unwrap();
    for i in 0..12 {
        let want = (p0.data()[i] + ph.data()[i] + pv.data()[i]) / 3.0;
        assert!((got.data()[i] - want).abs() < 1e-12);
    }
    assert_ne!(got, p0);
}

#[test]
fn flip4_reverses_one_axis() {
    let x = Tensor::<f64>::from_fn(&[1, 1, 2, 3], |i| i as f64);
    assert_eq!(flip4(&x, true).unwrap().data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    assert_eq!(flip4(&x, false).unwrap().data(), &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
}
