//! Exact Euclidean distance transform, exponential-decay pseudo labels and
//! the pseudo-label loss.

use maco_autodiff::{Graph, NodeId, Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::{ScribbleAnnotation, BG, GC};
use crate::error::{CoreError, Result};

/// Stand-in for "no source in this row/column" during the separable passes.
const FAR: f64 = 1e20;

pub const DEFAULT_DECAY: f64 = 0.1;
pub const DEFAULT_FLOOR: f64 = 0.05;
pub const LOG_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceGrid {
    pub height: usize,
    pub width: usize,
    /// Distance to the nearest source pixel, `+inf` when there is none.
    pub data: Vec<f64>,
}

/// Squared distance transform of a 1-D sampled function (lower envelope of parabolas).
fn envelope_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let meet = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf)
    };
    for q in 1..n {
        let mut s = meet(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = meet(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Exact Euclidean distance transform of a binary source grid.
pub fn edt(sources: &[bool], height: usize, width: usize) -> DistanceGrid {
    assert_eq!(sources.len(), height * width, "edt: source grid size");
    let mut sq: Vec<f64> = sources.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = height.max(width);
    let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..width {
        for r in 0..height {
            f[r] = sq[r * width + c];
        }
        envelope_1d(&f[..height], &mut d[..height], &mut v, &mut z);
        for r in 0..height {
            sq[r * width + c] = d[r];
        }
    }
    for row in sq.chunks_mut(width) {
        f[..width].copy_from_slice(row);
        envelope_1d(&f[..width], &mut d[..width], &mut v, &mut z);
        row.copy_from_slice(&d[..width]);
    }
    let data = sq
        .into_iter()
        .map(|s| if s >= FAR / 2.0 { f64::INFINITY } else { s.sqrt() })
        .collect();
    DistanceGrid { height, width, data }
}

/// Confidence map of one class; `code == GC` marks the global-category map.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousPseudoLabel {
    pub code: u8,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub decay: f64,
    pub floor: f64,
}

impl ContinuousPseudoLabel {
    pub fn is_gc(&self) -> bool {
        self.code == GC
    }

    /// Number of pixels with nonzero confidence.
    pub fn support_area(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }
}

fn check_decay(decay: f64, floor: f64) -> Result<()> {
    if !(decay > 0.0 && decay.is_finite()) {
        return Err(CoreError::Param(format!("decay must be positive, got {decay}")));
    }
    if !(floor > 0.0 && floor < 1.0) {
        return Err(CoreError::Param(format!("floor must lie in (0, 1), got {floor}")));
    }
    Ok(())
}

/// Applies the exponential decay to distances. Foreground maps are zero
/// wherever `e^{-kD}` does not exceed the floor; the GC map never drops
/// below the floor.
pub fn decay_map(d: &DistanceGrid, code: u8, decay: f64, floor: f64) -> Result<ContinuousPseudoLabel> {
    check_decay(decay, floor)?;
    let is_gc = code == GC;
    let data = d
        .data
        .iter()
        .map(|&dist| {
            let e = (-decay * dist).exp();
            if is_gc {
                e.max(floor)
            } else if e > floor {
                e
            } else {
                0.0
            }
        })
        .collect();
    Ok(ContinuousPseudoLabel { code, height: d.height, width: d.width, data, decay, floor })
}

/// One pseudo label per foreground class (codes `1..=K`) plus the GC map.
#[derive(Debug, Clone, PartialEq)]
pub struct CplStack {
    pub classes: Vec<ContinuousPseudoLabel>,
    pub gc: ContinuousPseudoLabel,
}

impl CplStack {
    pub fn num_foreground(&self) -> usize {
        self.classes.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.gc.height, self.gc.width)
    }
}

pub fn build_cpl(scr: &ScribbleAnnotation, num_foreground: usize, decay: f64, floor: f64) -> Result<CplStack> {
    check_decay(decay, floor)?;
    let (h, w) = scr.dims();
    let one = |code: u8| decay_map(&edt(&scr.indicator(code), h, w), code, decay, floor);
    let classes = (1..=num_foreground as u8).map(one).collect::<Result<Vec<_>>>()?;
    Ok(CplStack { classes, gc: one(GC)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConForm {
    /// `-cpl * y * ln(y)`, as printed.
    #[default]
    EntropyWeighted,
    /// `-cpl * ln(y)`.
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConOptions {
    pub form: ConForm,
    /// Supervise `1 - y_bg` with the GC map.
    pub gc_in_con: bool,
}

impl Default for ConOptions {
    fn default() -> Self {
        Self { form: ConForm::EntropyWeighted, gc_in_con: true }
    }
}

/// Pixels where any channel entering the loss is nonzero.
fn supervised_pixels(stack: &CplStack, gc_in_con: bool) -> usize {
    let hw = stack.gc.data.len();
    (0..hw)
        .filter(|&p| {
            stack.classes.iter().any(|c| c.data[p] > 0.0) || (gc_in_con && stack.gc.data[p] > 0.0)
        })
        .count()
}

/// Pseudo-label loss on `y` (`[B, K+1, H, W]`), averaged over batch items.
///
/// Per item: `-(1 / (|C| |N|)) Σ_c Σ_p cpl · y · ln(y + 1e-8)` (or
/// `cpl · ln(y + 1e-8)` for the cross-entropy form). Foreground class `c`
/// reads output channel `c`; the GC map reads `1 - y_bg`.
pub fn loss_con<T: Real>(g: &mut Graph<T>, y: NodeId, cpls: &[&CplStack], opts: ConOptions) -> Result<NodeId> {
    let [b, c, h, w] = g.value(y).dims4();
    if cpls.len() != b {
        return Err(CoreError::Shape(format!("{} pseudo-label stacks for a batch of {b}", cpls.len())));
    }
    for s in cpls {
        if s.num_foreground() + 1 != c || s.dims() != (h, w) {
            return Err(CoreError::Shape(format!(
                "pseudo labels ({} classes, {:?}) do not match prediction [{b}, {c}, {h}, {w}]",
                s.num_foreground(),
                s.dims()
            )));
        }
    }
    let n_channels = (c - 1) + opts.gc_in_con as usize;
    let scale: Vec<f64> = cpls
        .iter()
        .map(|s| match supervised_pixels(s, opts.gc_in_con) {
            0 => 0.0,
            n => 1.0 / (b as f64 * n_channels as f64 * n as f64),
        })
        .collect();
    if scale.iter().all(|&s| s == 0.0) {
        log::warn!("pseudo-label loss has no supervised pixels; contributing 0");
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let hw = h * w;
    let mut total: Option<NodeId> = None;
    let mut channels: Vec<(usize, bool)> = (1..c).map(|k| (k, false)).collect();
    if opts.gc_in_con {
        channels.push((BG as usize, true));
    }
    for (channel, is_gc) in channels {
        let mut weights = Vec::with_capacity(b * hw);
        for (s, &k) in cpls.iter().zip(&scale) {
            let map = if is_gc { &s.gc } else { &s.classes[channel - 1] };
            weights.extend(map.data.iter().map(|&v| T::lit(-v * k)));
        }
        let mut yc = g.select_channel(y, channel);
        if is_gc {
            yc = g.affine(yc, -T::one(), T::one());
        }
        let log = g.ln(yc, T::lit(LOG_EPS));
        let term = match opts.form {
            ConForm::EntropyWeighted => g.mul(yc, log),
            ConForm::CrossEntropy => log,
        };
        let weighted = g.mul_const(term, weights);
        let s = g.sum(weighted);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s),
        });
    }
    Ok(total.expect("at least one foreground channel"))
}
