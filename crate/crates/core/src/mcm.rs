//! Scribble-weighted patch masking, the GC-based binary mask and the two
//! cosine consistency losses.

use maco_autodiff::{Graph, NodeId, Real, Tensor};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cpl::{edt, ContinuousPseudoLabel};
use crate::domain::{ImageGrid, ScribbleAnnotation, BG, GC, UNLABELED};
use crate::error::{CoreError, Result};

pub const COS_EPS: f64 = 1e-8;
pub const GC_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmConfig {
    pub w_s: f64,
    pub w_o: f64,
    pub phi: f64,
    pub patch_size: usize,
    /// Let GC pixels mark a patch as scribbled.
    pub include_gc: bool,
}

impl Default for McmConfig {
    fn default() -> Self {
        Self { w_s: 2.0, w_o: 1.0, phi: 0.5, patch_size: 16, include_gc: false }
    }
}

impl McmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_o > 0.0 && self.w_s >= self.w_o && self.w_s.is_finite()) {
            return Err(CoreError::Param(format!(
                "need w_s >= w_o > 0, got w_s = {}, w_o = {}",
                self.w_s, self.w_o
            )));
        }
        check_phi(self.phi)?;
        if self.patch_size == 0 {
            return Err(CoreError::Param("patch size must be positive".into()));
        }
        Ok(())
    }
}

fn check_phi(phi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(CoreError::Param(format!("masking ratio {phi} outside [0, 1]")));
    }
    Ok(())
}

/// Patch tiling of a zero-padded image with per-patch sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
    pub scribbled: Vec<bool>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patch index of pixel `(r, c)`.
    pub fn patch_of(&self, r: usize, c: usize) -> usize {
        (r / self.patch) * self.cols + c / self.patch
    }
}

fn counts_for_weight(code: u8, include_gc: bool) -> bool {
    match code {
        UNLABELED | BG => false,
        GC => include_gc,
        _ => true,
    }
}

pub fn patch_weights(scr: &ScribbleAnnotation, cfg: &McmConfig) -> Result<PatchGrid> {
    cfg.validate()?;
    let (h, w) = scr.dims();
    let p = cfg.patch_size;
    let (rows, cols) = (h.div_ceil(p), w.div_ceil(p));
    let mut grid = PatchGrid {
        patch: p,
        rows,
        cols,
        height: h,
        width: w,
        weights: Vec::new(),
        probs: Vec::new(),
        scribbled: vec![false; rows * cols],
    };
    for r in 0..h {
        for c in 0..w {
            if counts_for_weight(scr.get(r, c), cfg.include_gc) {
                let i = grid.patch_of(r, c);
                grid.scribbled[i] = true;
            }
        }
    }
    grid.weights = grid.scribbled.iter().map(|&s| if s { cfg.w_s } else { cfg.w_o }).collect();
    let total: f64 = grid.weights.iter().sum();
    grid.probs = grid.weights.iter().map(|w| w / total).collect();
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchMask {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub height: usize,
    pub width: usize,
    pub phi: f64,
    pub masked: Vec<bool>,
}

impl PatchMask {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn is_pixel_masked(&self, r: usize, c: usize) -> bool {
        self.masked[(r / self.patch) * self.cols + c / self.patch]
    }

    /// Per-pixel 0/1 keep map (1 = visible).
    pub fn keep_map(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.push(if self.is_pixel_masked(r, c) { 0.0 } else { 1.0 });
            }
        }
        out
    }
}

/// Masks exactly `round(phi * P)` patches by sequential weighted draws
/// without replacement.
pub fn sample_mask<R: Rng + ?Sized>(pg: &PatchGrid, phi: f64, rng: &mut R) -> Result<PatchMask> {
    check_phi(phi)?;
    let n = pg.len();
    let count = (phi * n as f64).round() as usize;
    let mut masked = vec![false; n];
    if count > 0 {
        let mut dist = WeightedIndex::new(&pg.weights).map_err(|e| CoreError::Param(e.to_string()))?;
        for draw in 0..count {
            let i = dist.sample(rng);
            masked[i] = true;
            if draw + 1 < count {
                dist.update_weights(&[(i, &0.0)]).map_err(|e| CoreError::Param(e.to_string()))?;
            }
        }
    }
    Ok(PatchMask { patch: pg.patch, rows: pg.rows, cols: pg.cols, height: pg.height, width: pg.width, phi, masked })
}

/// Zeroes every pixel of the masked patches.
pub fn apply_mask(img: &ImageGrid, pm: &PatchMask) -> Result<ImageGrid> {
    if (img.height(), img.width()) != (pm.height, pm.width) {
        return Err(CoreError::Shape(format!(
            "image {}x{} vs mask {}x{}",
            img.height(),
            img.width(),
            pm.height,
            pm.width
        )));
    }
    let mut data = img.data().to_vec();
    apply_mask_in_place(&mut data, pm);
    ImageGrid::new(img.height(), img.width(), data)
}

pub fn apply_mask_in_place(data: &mut [f32], pm: &PatchMask) {
    for r in 0..pm.height {
        for c in 0..pm.width {
            if pm.is_pixel_masked(r, c) {
                data[r * pm.width + c] = 0.0;
            }
        }
    }
}

/// `1[cpl_gc >= 0.5]`.
pub fn gc_binary_mask(cpl_gc: &ContinuousPseudoLabel) -> Result<Vec<bool>> {
    if !cpl_gc.is_gc() {
        return Err(CoreError::Param(format!("channel {} is not the GC pseudo label", cpl_gc.code)));
    }
    Ok(cpl_gc.data.iter().map(|&v| v >= GC_THRESHOLD).collect())
}

/// `1[1 - y_bg >= 0.5]` from a predicted background channel.
pub fn prediction_fg_mask<T: Real>(bg_channel: &[T]) -> Vec<bool> {
    bg_channel.iter().map(|&v| 1.0 - v.as_f64() >= GC_THRESHOLD).collect()
}

/// Pixels enclosed by the GC contour (including the contour): everything a
/// 4-connected flood from the image border cannot reach without crossing GC.
pub fn gc_enclosed_region(scr: &ScribbleAnnotation) -> Vec<bool> {
    let (h, w) = scr.dims();
    let wall = scr.indicator(GC);
    let mut outside = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w)
        .filter(|&p| {
            let (r, c) = (p / w, p % w);
            (r == 0 || c == 0 || r == h - 1 || c == w - 1) && !wall[p]
        })
        .collect();
    for &p in &stack {
        outside[p] = true;
    }
    while let Some(p) = stack.pop() {
        let (r, c) = (p / w, p % w);
        let next = [
            (r > 0).then(|| p - w),
            (r + 1 < h).then(|| p + w),
            (c > 0).then(|| p - 1),
            (c + 1 < w).then(|| p + 1),
        ];
        for q in next.into_iter().flatten() {
            if !outside[q] && !wall[q] {
                outside[q] = true;
                stack.push(q);
            }
        }
    }
    outside.iter().map(|&o| !o).collect()
}

/// `1[e^{-k D} >= 0.5]` where `D` is the distance to the GC-enclosed region,
/// i.e. that region grown by `ln 2 / k` pixels.
pub fn gc_enclosed_mask(scr: &ScribbleAnnotation, decay: f64) -> Result<Vec<bool>> {
    if !(decay > 0.0 && decay.is_finite()) {
        return Err(CoreError::Param(format!("decay must be positive, got {decay}")));
    }
    if scr.count(GC) == 0 {
        return Err(CoreError::Param("annotation has no GC scribble".into()));
    }
    let (h, w) = scr.dims();
    let d = edt(&gc_enclosed_region(scr), h, w);
    Ok(d.data.iter().map(|&v| (-decay * v).exp() >= GC_THRESHOLD).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GcMaskSource {
    /// Threshold of the GC pseudo label: a band around the GC contour.
    #[default]
    Annotation,
    /// Threshold of the pseudo label of the region the GC contour encloses.
    Enclosed,
    /// Foreground of the current prediction, `1[1 - y_bg >= 0.5]`.
    PredictionFg,
}

/// Which channels of the enhanced prediction the mask acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EnhanceMode {
    /// Every channel, background included, is multiplied by the mask.
    #[default]
    AllChannels,
    /// Foreground channels are multiplied by the mask and the background
    /// channel becomes `y_bg` inside the mask and 1 outside, so the map stays
    /// a distribution.
    Foreground,
}

/// Multiplies every channel of `y` (`[B, C, H, W]`) by its item's binary mask.
pub fn enhance<T: Real>(g: &mut Graph<T>, y: NodeId, masks: &[Vec<bool>]) -> Result<NodeId> {
    enhance_with(g, y, masks, EnhanceMode::AllChannels)
}

pub fn enhance_with<T: Real>(g: &mut Graph<T>, y: NodeId, masks: &[Vec<bool>], mode: EnhanceMode) -> Result<NodeId> {
    let [b, c, h, w] = g.value(y).dims4();
    if masks.len() != b || masks.iter().any(|m| m.len() != h * w) {
        return Err(CoreError::Shape(format!("{} masks for prediction [{b}, {c}, {h}, {w}]", masks.len())));
    }
    let mut factor = Vec::with_capacity(b * c * h * w);
    let mut offset = Vec::with_capacity(b * c * h * w);
    for m in masks {
        for ch in 0..c {
            factor.extend(m.iter().map(|&k| if k { T::one() } else { T::zero() }));
            let fill = mode == EnhanceMode::Foreground && ch == BG as usize;
            offset.extend(m.iter().map(|&k| if fill && !k { T::one() } else { T::zero() }));
        }
    }
    let scaled = g.mul_const(y, factor);
    if mode == EnhanceMode::AllChannels {
        return Ok(scaled);
    }
    let offset = g.constant(Tensor::new(vec![b, c, h, w], offset)?);
    Ok(g.add(scaled, offset))
}

/// Batch mean of `1 - <a, b> / (|a| |b| + eps)` over flattened items.
fn cosine_loss<T: Real>(g: &mut Graph<T>, a: NodeId, b: NodeId, what: &str) -> Result<NodeId> {
    if g.shape(a) != g.shape(b) {
        return Err(CoreError::Shape(format!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    let batch = g.shape(a)[0];
    let ab = g.mul(a, b);
    let dot = g.sum_items(ab);
    let aa = g.mul(a, a);
    let aa = g.sum_items(aa);
    let bb = g.mul(b, b);
    let bb = g.sum_items(bb);
    if g.value(aa).data().iter().chain(g.value(bb).data()).any(|&v| v == T::zero()) {
        log::warn!("{what}: zero-norm operand; its items contribute 1");
    }
    let na = g.sqrt(aa);
    let nb = g.sqrt(bb);
    let den = g.mul(na, nb);
    let den = g.affine(den, T::one(), T::lit(COS_EPS));
    let cos = g.div(dot, den);
    let per_item = g.affine(cos, -T::one(), T::one());
    let total = g.sum(per_item);
    Ok(g.scale(total, T::lit(1.0 / batch as f64)))
}

/// Consistency between the masked-image prediction and the enhanced prediction.
pub fn loss_cc<T: Real>(g: &mut Graph<T>, y_m: NodeId, y_e: NodeId) -> Result<NodeId> {
    cosine_loss(g, y_m, y_e, "cc")
}

/// Consistency between the prediction and its enhanced version.
pub fn loss_en<T: Real>(g: &mut Graph<T>, y: NodeId, y_e: NodeId) -> Result<NodeId> {
    cosine_loss(g, y, y_e, "en")
}
