//! Forward and backward kernels for the image-shaped graph operations.
//!
//! Convolutions lower to gemm through an im2col buffer that is rebuilt in the
//! backward pass rather than kept alive on the tape.

use crate::scalar::{gemm, MatRef, Real};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

fn tensor<T: Real>(shape: Vec<usize>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("kernel output shape")
}

fn im2col<T: Real>(x: &[T], ci: usize, h: usize, w: usize, k: usize, col: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..ci {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * hw..(row + 1) * hw];
                // valid output columns: 0 <= x + kj - pad < w
                let x0 = pad.saturating_sub(kj);
                let x1 = (w + pad).saturating_sub(kj).min(w);
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + ki as isize - pad as isize;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x0].fill(T::zero());
                    drow[x0..x1].copy_from_slice(&srow[x0 + kj - pad..x1 + kj - pad]);
                    drow[x1..].fill(T::zero());
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], ci: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * hw..(row + 1) * hw];
                let x0 = pad.saturating_sub(kj);
                let x1 = (w + pad).saturating_sub(kj).min(w);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ki as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let crow = &src[y * w..(y + 1) * w];
                    for (d, &s) in prow[x0 + kj - pad..x1 + kj - pad].iter_mut().zip(&crow[x0..x1]) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &[T], k: usize) -> Tensor<T> {
    let [n, ci, h, wd] = x.dims4();
    let co = w.shape()[0];
    let hw = h * wd;
    let kk = ci * k * k;
    let mut out = vec![T::zero(); n * co * hw];
    let mut col = if k > 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
    for b in 0..n {
        let xb = &x.data()[b * ci * hw..(b + 1) * ci * hw];
        let src: &[T] = if k == 1 {
            xb
        } else {
            im2col(xb, ci, h, wd, k, &mut col);
            &col
        };
        let ob = &mut out[b * co * hw..(b + 1) * co * hw];
        for (c, &bv) in bias.iter().enumerate() {
            ob[c * hw..(c + 1) * hw].fill(bv);
        }
        gemm(T::one(), MatRef::new(w.data(), co, kk), MatRef::new(src, kk, hw), T::one(), ob);
    }
    tensor(vec![n, co, h, wd], out)
}

#[allow(clippy::type_complexity)]
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &[T],
    k: usize,
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let [n, ci, h, wd] = x.dims4();
    let co = w.shape()[0];
    let hw = h * wd;
    let kk = ci * k * k;
    let mut gw = vec![T::zero(); co * kk];
    let mut gb = vec![T::zero(); co];
    let mut gx = need_x.then(|| vec![T::zero(); n * ci * hw]);
    let mut col = if k > 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
    let mut dcol = if need_x { vec![T::zero(); kk * hw] } else { Vec::new() };
    for b in 0..n {
        let xb = &x.data()[b * ci * hw..(b + 1) * ci * hw];
        let gyb = &gy[b * co * hw..(b + 1) * co * hw];
        let src: &[T] = if k == 1 {
            xb
        } else {
            im2col(xb, ci, h, wd, k, &mut col);
            &col
        };
        gemm(T::one(), MatRef::new(gyb, co, hw), MatRef::new(src, kk, hw).t(), T::one(), &mut gw);
        for c in 0..co {
            gb[c] = gb[c] + gyb[c * hw..(c + 1) * hw].iter().copied().sum();
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * ci * hw..(b + 1) * ci * hw];
            if k == 1 {
                gemm(T::one(), MatRef::new(w.data(), co, kk).t(), MatRef::new(gyb, co, hw), T::one(), gxb);
            } else {
                gemm(T::one(), MatRef::new(w.data(), co, kk).t(), MatRef::new(gyb, co, hw), T::zero(), &mut dcol);
                col2im(&dcol, ci, h, wd, k, gxb);
            }
        }
    }
    (gx, gw, gb)
}

pub fn conv_t2_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &[T]) -> Tensor<T> {
    let [n, ci, h, wd] = x.dims4();
    let co = w.shape()[1];
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![T::zero(); n * co * oh * ow];
    let mut col = vec![T::zero(); co * 4 * hw];
    for b in 0..n {
        let xb = &x.data()[b * ci * hw..(b + 1) * ci * hw];
        gemm(T::one(), MatRef::new(w.data(), ci, co * 4).t(), MatRef::new(xb, ci, hw), T::zero(), &mut col);
        let ob = &mut out[b * co * oh * ow..(b + 1) * co * oh * ow];
        for c in 0..co {
            for di in 0..2 {
                for dj in 0..2 {
                    let row = &col[(c * 4 + di * 2 + dj) * hw..(c * 4 + di * 2 + dj + 1) * hw];
                    for i in 0..h {
                        let orow = &mut ob[c * oh * ow + (2 * i + di) * ow..];
                        for j in 0..wd {
                            orow[2 * j + dj] = row[i * wd + j] + bias[c];
                        }
                    }
                }
            }
        }
    }
    tensor(vec![n, co, oh, ow], out)
}

#[allow(clippy::type_complexity)]
pub fn conv_t2_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &[T],
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let [n, ci, h, wd] = x.dims4();
    let co = w.shape()[1];
    let hw = h * wd;
    let (oh, ow) = (2 * h, 2 * wd);
    let mut gw = vec![T::zero(); ci * co * 4];
    let mut gb = vec![T::zero(); co];
    let mut gx = need_x.then(|| vec![T::zero(); n * ci * hw]);
    let mut dcol = vec![T::zero(); co * 4 * hw];
    for b in 0..n {
        let gyb = &gy[b * co * oh * ow..(b + 1) * co * oh * ow];
        for c in 0..co {
            let plane = &gyb[c * oh * ow..(c + 1) * oh * ow];
            gb[c] = gb[c] + plane.iter().copied().sum();
            for di in 0..2 {
                for dj in 0..2 {
                    let row = &mut dcol[(c * 4 + di * 2 + dj) * hw..(c * 4 + di * 2 + dj + 1) * hw];
                    for i in 0..h {
                        let prow = &plane[(2 * i + di) * ow..];
                        for j in 0..wd {
                            row[i * wd + j] = prow[2 * j + dj];
                        }
                    }
                }
            }
        }
        let xb = &x.data()[b * ci * hw..(b + 1) * ci * hw];
        gemm(T::one(), MatRef::new(xb, ci, hw), MatRef::new(&dcol, co * 4, hw).t(), T::one(), &mut gw);
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * ci * hw..(b + 1) * ci * hw];
            gemm(T::one(), MatRef::new(w.data(), ci, co * 4), MatRef::new(&dcol, co * 4, hw), T::one(), gxb);
        }
    }
    (gx, gw, gb)
}

pub fn max_pool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [n, c, h, w] = x.dims4();
    assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    // first maximum wins ties
                    if data[idx] > data[best] {
                        best = idx;
                    }
                }
                out.push(data[best]);
                arg.push(best as u32);
            }
        }
    }
    (tensor(vec![n, c, oh, ow], out), arg)
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.dims4();
    let [nb, cb, hb, wb] = b.dims4();
    assert_eq!((n, h, w), (nb, hb, wb), "concat_channels: batch/spatial mismatch");
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (ca + cb) * hw);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        out.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    tensor(vec![n, ca + cb, h, w], out)
}

pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims4();
    let hw = h * w;
    let mut out = vec![T::zero(); x.numel()];
    let data = x.data();
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(data[base + ch * hw + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                let e = (data[base + ch * hw + p] - m).exp();
                out[base + ch * hw + p] = e;
                s = s + e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] = out[base + ch * hw + p] / s;
            }
        }
    }
    tensor(x.shape().to_vec(), out)
}

pub fn softmax_channels_backward<T: Real>(y: &Tensor<T>, gy: &[T]) -> Vec<T> {
    let [n, c, h, w] = y.dims4();
    let hw = h * w;
    let yd = y.data();
    let mut gx = vec![T::zero(); yd.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * hw + p;
                dot = dot + gy[i] * yd[i];
            }
            for ch in 0..c {
                let i = base + ch * hw + p;
                gx[i] = yd[i] * (gy[i] - dot);
            }
        }
    }
    gx
}

/// Saved state for normalization backward passes.
pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    kind: NormKind,
}

#[derive(Clone, Copy)]
enum NormKind {
    Group(usize),
    BatchTrain,
    BatchEval,
}

fn apply_affine<T: Real>(xhat: &[T], gamma: &[T], beta: &[T], dims: [usize; 4]) -> Vec<T> {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let mut out = vec![T::zero(); xhat.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for (o, &v) in out[off..off + hw].iter_mut().zip(&xhat[off..off + hw]) {
                *o = gamma[ch] * v + beta[ch];
            }
        }
    }
    out
}

pub fn group_norm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    groups: usize,
) -> (Tensor<T>, NormCache<T>) {
    let dims = x.dims4();
    let [n, c, h, w] = dims;
    assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible by {groups}");
    let len = c / groups * h * w;
    let eps = T::lit(NORM_EPS);
    let cnt = T::lit(len as f64);
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(n * groups);
    for (seg, dst) in x.data().chunks(len).zip(xhat.chunks_mut(len)) {
        let mean = seg.iter().copied().sum::<T>() / cnt;
        let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
        let is = T::one() / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(seg) {
            *d = (v - mean) * is;
        }
        inv_std.push(is);
    }
    let out = apply_affine(&xhat, gamma, beta, dims);
    (tensor(x.shape().to_vec(), out), NormCache { xhat, inv_std, kind: NormKind::Group(groups) })
}

#[allow(clippy::type_complexity)]
pub fn batch_norm_train_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> (Tensor<T>, NormCache<T>, Vec<(T, T)>) {
    let dims = x.dims4();
    let [n, c, h, w] = dims;
    let hw = h * w;
    let eps = T::lit(NORM_EPS);
    let cnt = T::lit((n * hw) as f64);
    let data = x.data();
    let mut xhat = vec![T::zero(); x.numel()];
    let mut inv_std = Vec::with_capacity(c);
    let mut moments = Vec::with_capacity(c);
    for ch in 0..c {
        let planes = || (0..n).map(move |b| (b * c + ch) * hw);
        let mean = planes().map(|o| data[o..o + hw].iter().copied().sum::<T>()).sum::<T>() / cnt;
        let var = planes()
            .map(|o| data[o..o + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>())
            .sum::<T>()
            / cnt;
        let is = T::one() / (var + eps).sqrt();
        for o in planes() {
            for i in o..o + hw {
                xhat[i] = (data[i] - mean) * is;
            }
        }
        inv_std.push(is);
        moments.push((mean, var));
    }
    let out = apply_affine(&xhat, gamma, beta, dims);
    (
        tensor(x.shape().to_vec(), out),
        NormCache { xhat, inv_std, kind: NormKind::BatchTrain },
        moments,
    )
}

pub fn batch_norm_eval_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
) -> (Tensor<T>, NormCache<T>) {
    let dims = x.dims4();
    let [n, c, h, w] = dims;
    let hw = h * w;
    let eps = T::lit(NORM_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
            }
        }
    }
    let out = apply_affine(&xhat, gamma, beta, dims);
    (tensor(x.shape().to_vec(), out), NormCache { xhat, inv_std, kind: NormKind::BatchEval })
}

/// `dx = inv_std / N * (N * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))`
/// over one normalization set.
fn normalize_set_backward<T: Real>(
    ranges: &[std::ops::Range<usize>],
    inv_std: T,
    dxhat: &[T],
    xhat: &[T],
    dx: &mut [T],
) {
    let count: usize = ranges.iter().map(|r| r.len()).sum();
    let cnt = T::lit(count as f64);
    let (mut s1, mut s2) = (T::zero(), T::zero());
    for r in ranges {
        for i in r.clone() {
            s1 = s1 + dxhat[i];
            s2 = s2 + dxhat[i] * xhat[i];
        }
    }
    for r in ranges {
        for i in r.clone() {
            dx[i] = inv_std / cnt * (cnt * dxhat[i] - s1 - xhat[i] * s2);
        }
    }
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn norm_backward<T: Real>(
    cache: &NormCache<T>,
    gamma: &[T],
    gy: &[T],
    dims: [usize; 4],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = dims;
    let hw = h * w;
    let xhat = &cache.xhat;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); gy.len()];
    for b in 0..n {
        for ch in 0..c {
            let o = (b * c + ch) * hw;
            for i in o..o + hw {
                dgamma[ch] = dgamma[ch] + gy[i] * xhat[i];
                dbeta[ch] = dbeta[ch] + gy[i];
                dxhat[i] = gy[i] * gamma[ch];
            }
        }
    }

    let mut dx = vec![T::zero(); gy.len()];
    match cache.kind {
        NormKind::Group(groups) => {
            let len = c / groups * hw;
            for (set, &is) in cache.inv_std.iter().enumerate() {
                let range = set * len..(set + 1) * len;
                normalize_set_backward(&[range], is, &dxhat, xhat, &mut dx);
            }
        }
        NormKind::BatchTrain => {
            for (ch, &is) in cache.inv_std.iter().enumerate() {
                let ranges: Vec<_> = (0..n)
                    .map(|b| {
                        let o = (b * c + ch) * hw;
                        o..o + hw
                    })
                    .collect();
                normalize_set_backward(&ranges, is, &dxhat, xhat, &mut dx);
            }
        }
        NormKind::BatchEval => {
            for b in 0..n {
                for ch in 0..c {
                    let o = (b * c + ch) * hw;
                    for i in o..o + hw {
                        dx[i] = dxhat[i] * cache.inv_std[ch];
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
