mod common;

use maco_core::cpl::build_cpl;
use maco_core::domain::{ImageGrid, LabelGrid, BG, GC, UNLABELED};
use maco_core::mcm::{apply_mask, gc_binary_mask, patch_weights, sample_mask, McmConfig};
use proptest::prelude::*;
use rand::Rng;

fn cfg(patch_size: usize) -> McmConfig {
    McmConfig { patch_size, ..McmConfig::default() }
}

#[test]
fn realized_count_is_exact() {
    let mut rng = common::rng(3);
    let scr = common::random_scribble(&mut rng, 64, 64, 3);
    let pg = patch_weights(&scr, &cfg(8)).unwrap();
    assert_eq!(pg.len(), 64);
    for tenth in 1..=9 {
        let phi = tenth as f64 / 10.0;
        let want = (phi * 64.0).round() as usize;
        for seed in 0..100 {
            let m = sample_mask(&pg, phi, &mut common::rng(seed)).unwrap();
            assert_eq!(m.masked_count(), want, "phi {phi}, seed {seed}");
        }
    }
}

#[test]
fn first_draw_frequency_follows_weights() {
    // one scribbled patch (weight 2) among three plain patches (weight 1)
    let mut scr = LabelGrid::filled(16, 16, UNLABELED);
    scr.set(2, 3, 1);
    let pg = patch_weights(&scr, &cfg(8)).unwrap();
    assert_eq!(pg.weights, vec![2.0, 1.0, 1.0, 1.0]);
    let mut rng = common::rng(99);
    let n = 100_000;
    let hits = (0..n).filter(|_| sample_mask(&pg, 0.25, &mut rng).unwrap().masked[0]).count();
    let freq = hits as f64 / n as f64;
    assert!((freq - 0.4).abs() <= 0.01, "frequency {freq}");
}

/// Independent weight oracle: scan each patch window directly.
fn weight_oracle(scr: &LabelGrid, p: usize, include_gc: bool, w_s: f64, w_o: f64) -> Vec<f64> {
    let (h, w) = scr.dims();
    let (rows, cols) = ((h + p - 1) / p, (w + p - 1) / p);
    let mut out = Vec::new();
    for pr in 0..rows {
        for pc in 0..cols {
            let mut hit = false;
            for r in pr * p..((pr + 1) * p).min(h) {
                for c in pc * p..((pc + 1) * p).min(w) {
                    let l = scr.get(r, c);
                    hit |= l != UNLABELED && l != BG && (l != GC || include_gc);
                }
            }
            out.push(if hit { w_s } else { w_o });
        }
    }
    out
}

proptest! {
    #[test]
    fn weights_match_oracle(seed in any::<u64>(), h in 8usize..40, w in 8usize..40, p in 1usize..12, include_gc in any::<bool>()) {
        let mut rng = common::rng(seed);
        let scr = common::random_scribble(&mut rng, h, w, 2);
        let c = McmConfig { patch_size: p, include_gc, w_s: 3.0, w_o: 1.5, ..McmConfig::default() };
        let pg = patch_weights(&scr, &c).unwrap();
        prop_assert_eq!(&pg.weights, &weight_oracle(&scr, p, include_gc, 3.0, 1.5));
        let total: f64 = pg.probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn masked_image_zeroes_exactly_masked_patches(seed in any::<u64>(), phi in 0.0f64..=1.0) {
        let mut rng = common::rng(seed);
        let scr = common::random_scribble(&mut rng, 20, 20, 2);
        let pg = patch_weights(&scr, &cfg(6)).unwrap();
        let data: Vec<f32> = (0..400).map(|_| rng.gen_range(0.1f32..1.0)).collect();
        let img = ImageGrid::new(20, 20, data.clone()).unwrap();
        let pm = sample_mask(&pg, phi, &mut rng).unwrap();
        prop_assert_eq!(pm.masked_count(), (phi * pg.len() as f64).round() as usize);
        let out = apply_mask(&img, &pm).unwrap();
        for r in 0..20 {
            for c in 0..20 {
                let v = out.get(r, c);
                if pm.is_pixel_masked(r, c) {
                    prop_assert_eq!(v, 0.0);
                } else {
                    prop_assert_eq!(v, data[r * 20 + c]);
                }
            }
        }
    }
}

#[test]
fn gc_mask_thresholds_at_half() {
    let mut rng = common::rng(5);
    let scr = common::random_scribble(&mut rng, 24, 24, 3);
    let st = build_cpl(&scr, 3, 0.1, 0.05).unwrap();
    let m = gc_binary_mask(&st.gc).unwrap();
    for (p, &v) in st.gc.data.iter().enumerate() {
        assert_eq!(m[p], v >= 0.5);
    }
    assert!(gc_binary_mask(&st.classes[0]).is_err());
}

#[test]
fn sampling_is_reproducible() {
    let mut rng = common::rng(8);
    let scr = common::random_scribble(&mut rng, 32, 32, 3);
    let pg = patch_weights(&scr, &cfg(4)).unwrap();
    let a = sample_mask(&pg, 0.5, &mut common::rng(77)).unwrap();
    let b = sample_mask(&pg, 0.5, &mut common::rng(77)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gc_mask_equals_distance_threshold() {
    use maco_core::cpl::edt;
    let mut rng = common::rng(6);
    for _ in 0..20 {
        let scr = common::random_scribble(&mut rng, 32, 32, 3);
        let st = build_cpl(&scr, 3, 0.1, 0.05).unwrap();
        let m = gc_binary_mask(&st.gc).unwrap();
        let d = edt(&scr.indicator(GC), 32, 32);
        let radius = 2f64.ln() / 0.1;
        for (p, &dist) in d.data.iter().enumerate() {
            assert_eq!(m[p], dist <= radius, "distance {dist}");
        }
    }
}

#[test]
fn masked_pixels_are_whole_patches() {
    let scr = LabelGrid::filled(32, 48, UNLABELED);
    let pg = patch_weights(&scr, &cfg(8)).unwrap();
    let img = ImageGrid::new(32, 48, vec![1.0; 32 * 48]).unwrap();
    for tenth in 0..=10 {
        let phi = tenth as f64 / 10.0;
        let pm = sample_mask(&pg, phi, &mut common::rng(tenth)).unwrap();
        let out = apply_mask(&img, &pm).unwrap();
        let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, (phi * 24.0).round() as usize * 64);
    }
}

#[test]
fn uniform_prediction_against_half_mask() {
    use maco_autodiff::{Graph, Tensor};
    use maco_core::mcm::{enhance, loss_en};
    let mut g = Graph::<f64>::new();
    let y = g.constant(Tensor::new(vec![1, 4, 4, 4], vec![0.25; 64]).unwrap());
    let mask: Vec<bool> = (0..16).map(|p| p < 8).collect();
    let y_e = enhance(&mut g, y, &[mask]).unwrap();
    let l = loss_en(&mut g, y, y_e).unwrap();
    assert!((g.scalar(l) - (1.0 - 0.5f64.sqrt())).abs() < 1e-6);
    assert!((g.scalar(l) - 0.29289).abs() < 1e-5);
}
