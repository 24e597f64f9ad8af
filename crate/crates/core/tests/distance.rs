mod common;

use maco_core::cpl::{build_cpl, decay_map, edt, DistanceGrid};
use maco_core::domain::{LabelGrid, GC, UNLABELED};
use proptest::prelude::*;
use rand::Rng;

fn brute_force(src: &[bool], h: usize, w: usize) -> Vec<f64> {
    let pts: Vec<(f64, f64)> = (0..h * w).filter(|&i| src[i]).map(|i| ((i / w) as f64, (i % w) as f64)).collect();
    (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as f64, (i % w) as f64);
            pts.iter()
                .map(|&(pr, pc)| ((r - pr).powi(2) + (c - pc).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[test]
fn matches_brute_force_on_random_grids() {
    let mut rng = common::rng(11);
    for _ in 0..200 {
        let density = rng.gen_range(0.001..0.2);
        let src: Vec<bool> = (0..32 * 32).map(|_| rng.gen_bool(density)).collect();
        let got = edt(&src, 32, 32);
        let want = brute_force(&src, 32, 32);
        for (a, b) in got.data.iter().zip(&want) {
            assert!(a == b || (a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }
}

proptest! {
    #[test]
    fn matches_brute_force_on_any_shape(h in 1usize..20, w in 1usize..20, bits in proptest::collection::vec(0u8..16, 400)) {
        let src: Vec<bool> = bits[..h * w].iter().map(|&b| b == 0).collect();
        let got = edt(&src, h, w);
        let want = brute_force(&src, h, w);
        for (a, b) in got.data.iter().zip(&want) {
            prop_assert!(a == b || (a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn distance_is_one_lipschitz(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let src: Vec<bool> = (0..16 * 16).map(|_| rng.gen_bool(0.05)).collect();
        prop_assume!(src.iter().any(|&s| s));
        let d = edt(&src, 16, 16).data;
        for r in 0..16 {
            for c in 0..15 {
                prop_assert!((d[r * 16 + c] - d[r * 16 + c + 1]).abs() <= 1.0 + 1e-12);
            }
        }
    }
}

#[test]
fn analytic_anchors() {
    let cutoff = -(0.05f64.ln()) / 0.1;
    assert!((cutoff - 29.9573).abs() < 1e-4);
    let half = 2f64.ln() / 0.1;
    assert!((half - 6.9315).abs() < 1e-4);

    let ds = vec![0.0, half, cutoff - 1e-6, cutoff, cutoff + 1e-6, 100.0];
    let d = DistanceGrid { height: 1, width: ds.len(), data: ds };
    let fg = decay_map(&d, 1, 0.1, 0.05).unwrap();
    assert_eq!(fg.data[0], 1.0);
    assert!((fg.data[1] - 0.5).abs() < 1e-12);
    assert!(fg.data[2] > 0.05);
    assert_eq!(fg.data[4], 0.0);
    assert_eq!(fg.data[5], 0.0);
    let gc = decay_map(&d, GC, 0.1, 0.05).unwrap();
    assert!((gc.data[1] - 0.5).abs() < 1e-12);
    assert!((gc.data[4] - 0.05).abs() < 1e-12);
    assert_eq!(gc.data[5], 0.05);
}

#[test]
fn cutoff_along_a_row() {
    // a single source at the left end of a 1 x 64 row
    let mut scr = LabelGrid::filled(8, 64, UNLABELED);
    scr.set(0, 0, 1);
    let st = build_cpl(&scr, 1, 0.1, 0.05).unwrap();
    let row = &st.classes[0].data[..64];
    assert_eq!(row[0], 1.0);
    assert!(row[29] > 0.0);
    assert_eq!(row[30], 0.0);
}

/// Per-pixel oracle for the pseudo labels.
fn oracle(scr: &LabelGrid, code: u8, decay: f64, floor: f64) -> Vec<f64> {
    let (h, w) = scr.dims();
    let src: Vec<bool> = scr.labels().iter().map(|&l| l == code).collect();
    brute_force(&src, h, w)
        .into_iter()
        .map(|d| {
            let e = (-decay * d).exp();
            if code == GC {
                e.max(floor)
            } else if e > floor {
                e
            } else {
                0.0
            }
        })
        .collect()
}

proptest! {
    #[test]
    fn pseudo_labels_match_oracle(seed in any::<u64>(), decay in 0.02f64..1.0, floor in 0.01f64..0.5) {
        let mut rng = common::rng(seed);
        let scr = common::random_scribble(&mut rng, 12, 17, 3);
        let st = build_cpl(&scr, 3, decay, floor).unwrap();
        for (i, map) in st.classes.iter().enumerate() {
            let want = oracle(&scr, i as u8 + 1, decay, floor);
            for (a, b) in map.data.iter().zip(&want) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
        let want = oracle(&scr, GC, decay, floor);
        for (a, b) in st.gc.data.iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
        for (p, &l) in scr.labels().iter().enumerate() {
            if (1..=3).contains(&l) {
                prop_assert_eq!(st.classes[l as usize - 1].data[p], 1.0);
            }
            if l == GC {
                prop_assert_eq!(st.gc.data[p], 1.0);
            }
        }
    }

    #[test]
    fn larger_decay_never_widens_support(seed in any::<u64>(), k1 in 0.02f64..1.0, k2 in 0.02f64..1.0) {
        let (lo, hi) = if k1 < k2 { (k1, k2) } else { (k2, k1) };
        let mut rng = common::rng(seed);
        let scr = common::random_scribble(&mut rng, 16, 16, 2);
        let a = build_cpl(&scr, 2, lo, 0.05).unwrap();
        let b = build_cpl(&scr, 2, hi, 0.05).unwrap();
        for (ma, mb) in a.classes.iter().zip(&b.classes) {
            prop_assert!(mb.support_area() <= ma.support_area());
            for (x, y) in ma.data.iter().zip(&mb.data) {
                prop_assert!(y <= x);
            }
        }
    }
}
