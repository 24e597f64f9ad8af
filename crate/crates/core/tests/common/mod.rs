#![allow(dead_code)]

use maco_autodiff::Tensor;
use maco_core::domain::{LabelGrid, BG, GC, UNLABELED};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub fn rng(seed: u64) -> Xoshiro256StarStar {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// Sparse random annotation with at least one pixel of every foreground
/// class and one GC pixel.
pub fn random_scribble(rng: &mut Xoshiro256StarStar, h: usize, w: usize, k: u8) -> LabelGrid {
    let mut s = LabelGrid::filled(h, w, UNLABELED);
    for r in 0..h {
        for c in 0..w {
            if rng.gen_bool(0.15) {
                let v = rng.gen_range(0..=k + 1);
                s.set(r, c, if v == k + 1 { GC } else if v == 0 { BG } else { v });
            }
        }
    }
    for code in (1..=k).chain([GC]) {
        s.set(rng.gen_range(0..h), rng.gen_range(0..w), code);
    }
    s
}

pub fn random_tensor(rng: &mut Xoshiro256StarStar, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Channel-wise softmax of `[B, C, H, W]` logits, computed directly.
pub fn softmax(logits: &Tensor<f64>) -> Vec<f64> {
    let [b, c, h, w] = logits.dims4();
    let hw = h * w;
    let x = logits.data();
    let mut out = vec![0.0; x.len()];
    for i in 0..b {
        for p in 0..hw {
            let idx = |ch: usize| (i * c + ch) * hw + p;
            let m = (0..c).map(|ch| x[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (x[idx(ch)] - m).exp()).sum();
            for ch in 0..c {
                out[idx(ch)] = (x[idx(ch)] - m).exp() / z;
            }
        }
    }
    out
}
