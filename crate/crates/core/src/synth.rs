//! Seeded synthetic phantoms with dense masks and emulated scribble annotations.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::cpl::edt;
use crate::domain::{ClassConfig, DenseMask, ImageGrid, LabelGrid, ScribbleAnnotation, BG, GC, UNLABELED};
use crate::error::{CoreError, Result};
use crate::mgrd;
use crate::rng::{stream, Purpose, Rng};

const MAX_LAYOUT_ATTEMPTS: usize = 100;
const MAX_WALK_RESTARTS: usize = 50;
const MIN_SCRIBBLE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// Disk (class 3) inside an annulus (class 2) with a crescent (class 1) beside it.
    Cardiac,
    /// Central ellipse (class 1) with a posterior crescent (class 2).
    Prostate,
}

impl Layout {
    pub fn classes(self) -> ClassConfig {
        match self {
            Layout::Cardiac => ClassConfig::cardiac(),
            Layout::Prostate => ClassConfig::prostate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub image_size: usize,
    pub layout: Layout,
    /// Mean intensity per class code; index 0 is the background outside the body.
    pub intensities: Vec<f32>,
    /// Mean intensity of the body ellipse behind the structures.
    pub body_intensity: f32,
    pub noise_sigma: f64,
    pub smooth_sigma: f64,
    /// Cardiac: LV radius. Prostate: central-gland semi-axis.
    pub inner_radius: f64,
    /// Cardiac: myocardium thickness. Prostate: peripheral-zone thickness.
    pub wall_thickness: f64,
    /// Cardiac only: RV disk radius and its center offset from the LV center.
    pub rv_radius: f64,
    pub rv_offset: f64,
    /// Nominal RV direction in radians, measured from +x toward +y (rows).
    pub rv_angle: f64,
    pub center_jitter: f64,
    /// Relative radius jitter, e.g. 0.1 for ±10%.
    pub radius_jitter: f64,
    pub rotation_jitter: f64,
    /// Minimum distance between any structure and the image border.
    pub margin: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            image_size: 64,
            layout: Layout::Cardiac,
            intensities: vec![0.05, 0.75, 0.3, 0.9],
            body_intensity: 0.5,
            noise_sigma: 0.08,
            smooth_sigma: 0.7,
            inner_radius: 7.0,
            wall_thickness: 5.0,
            rv_radius: 10.0,
            rv_offset: 14.0,
            rv_angle: PI,
            center_jitter: 3.0,
            radius_jitter: 0.1,
            rotation_jitter: 0.5,
            margin: 2,
        }
    }
}

impl PhantomParams {
    pub fn prostate() -> Self {
        Self {
            layout: Layout::Prostate,
            intensities: vec![0.05, 0.45, 0.8],
            body_intensity: 0.3,
            inner_radius: 9.0,
            wall_thickness: 5.0,
            rotation_jitter: 0.3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Param(m));
        let k = self.layout.classes().num_foreground();
        if self.intensities.len() != k + 1 {
            return fail(format!("{} intensities for {} classes plus background", self.intensities.len(), k));
        }
        if self.image_size < crate::domain::MIN_SIDE {
            return fail(format!("image size {} too small", self.image_size));
        }
        if !(0.0..1.0).contains(&self.radius_jitter) {
            return fail(format!("radius jitter {} outside [0, 1)", self.radius_jitter));
        }
        if self.wall_thickness * (1.0 - self.radius_jitter) < 2.0 {
            return fail("wall must stay at least 2 px thick to separate the inner structure".into());
        }
        if self.inner_radius <= 1.0 || self.noise_sigma < 0.0 || self.smooth_sigma < 0.0 {
            return fail("radii must exceed 1 px and sigmas must be non-negative".into());
        }
        if self.layout == Layout::Cardiac && (self.rv_offset <= 0.0 || self.rv_radius <= 0.0) {
            return fail("rv radius and offset must be positive".into());
        }
        Ok(())
    }

    /// Nominal per-class areas in pixels, indexed by class code minus one.
    pub fn analytic_areas(&self) -> Vec<f64> {
        let (r1, t) = (self.inner_radius, self.wall_thickness);
        let r2 = r1 + t;
        match self.layout {
            Layout::Cardiac => {
                let rv = PI * self.rv_radius * self.rv_radius
                    - lens_area(r2, self.rv_radius, self.rv_offset);
                vec![rv, PI * (r2 * r2 - r1 * r1), PI * r1 * r1]
            }
            Layout::Prostate => {
                let (a1, b1) = (r1, r1 * PROSTATE_ASPECT);
                let (a2, b2) = (a1 + t, b1 + t);
                // lower half of the outer ellipse minus the lower half of the inner one
                vec![PI * a1 * b1, 0.5 * PI * (a2 * b2 - a1 * b1)]
            }
        }
    }
}

const PROSTATE_ASPECT: f64 = 0.8;

/// Intersection area of two disks with radii `r`, `s` and center distance `d`.
fn lens_area(r: f64, s: f64, d: f64) -> f64 {
    if d >= r + s {
        return 0.0;
    }
    if d <= (r - s).abs() {
        let m = r.min(s);
        return PI * m * m;
    }
    let a = ((d * d + r * r - s * s) / (2.0 * d * r)).clamp(-1.0, 1.0).acos();
    let b = ((d * d + s * s - r * r) / (2.0 * d * s)).clamp(-1.0, 1.0).acos();
    let k = ((-d + r + s) * (d + r - s) * (d - r + s) * (d + r + s)).max(0.0).sqrt();
    r * r * a + s * s * b - 0.5 * k
}

fn jitter(rng: &mut Rng, range: f64) -> f64 {
    if range > 0.0 {
        rng.gen_range(-range..=range)
    } else {
        0.0
    }
}

fn scaled(rng: &mut Rng, value: f64, rel: f64) -> f64 {
    value * (1.0 + jitter(rng, rel))
}

fn draw_layout(p: &PhantomParams, rng: &mut Rng) -> Vec<u8> {
    let n = p.image_size;
    let mid = (n as f64 - 1.0) / 2.0;
    let mut labels = vec![BG; n * n];
    match p.layout {
        Layout::Cardiac => {
            let r_lv = scaled(rng, p.inner_radius, p.radius_jitter);
            let r_myo = r_lv + scaled(rng, p.wall_thickness, p.radius_jitter);
            let r_rv = scaled(rng, p.rv_radius, p.radius_jitter);
            let off = scaled(rng, p.rv_offset, p.radius_jitter);
            let theta = p.rv_angle + jitter(rng, p.rotation_jitter);
            let (dx, dy) = (theta.cos(), theta.sin());
            // centre the whole heart, not the LV
            let shift = (off + r_rv - r_myo) / 2.0;
            let cx = mid - shift * dx + jitter(rng, p.center_jitter);
            let cy = mid - shift * dy + jitter(rng, p.center_jitter);
            let (rx, ry) = (cx + off * dx, cy + off * dy);
            for r in 0..n {
                for c in 0..n {
                    let (x, y) = (c as f64, r as f64);
                    let d = (x - cx).hypot(y - cy);
                    labels[r * n + c] = if d <= r_lv {
                        3
                    } else if d <= r_myo {
                        2
                    } else if (x - rx).hypot(y - ry) <= r_rv {
                        1
                    } else {
                        BG
                    };
                }
            }
        }
        Layout::Prostate => {
            let a1 = scaled(rng, p.inner_radius, p.radius_jitter);
            let b1 = a1 * PROSTATE_ASPECT;
            let t = scaled(rng, p.wall_thickness, p.radius_jitter);
            let (a2, b2) = (a1 + t, b1 + t);
            let theta = jitter(rng, p.rotation_jitter);
            let cx = mid + jitter(rng, p.center_jitter);
            let cy = mid + jitter(rng, p.center_jitter);
            let (ct, st) = (theta.cos(), theta.sin());
            for r in 0..n {
                for c in 0..n {
                    let (x, y) = (c as f64 - cx, r as f64 - cy);
                    let (u, v) = (ct * x + st * y, -st * x + ct * y);
                    let inner = (u / a1).powi(2) + (v / b1).powi(2) <= 1.0;
                    let outer = (u / a2).powi(2) + (v / b2).powi(2) <= 1.0;
                    labels[r * n + c] = if inner {
                        1
                    } else if outer && v > 0.0 {
                        2
                    } else {
                        BG
                    };
                }
            }
        }
    }
    labels
}

fn layout_fits(labels: &[u8], n: usize, margin: usize, classes: usize) -> bool {
    let mut seen = vec![false; classes + 1];
    for r in 0..n {
        for c in 0..n {
            let l = labels[r * n + c] as usize;
            if l != BG as usize {
                seen[l] = true;
                if r < margin || c < margin || r + margin >= n || c + margin >= n {
                    return false;
                }
            }
        }
    }
    seen[1..].iter().all(|&s| s)
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(data: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (rr, cc) = if along_rows {
                        (r as isize, (c as isize + o).clamp(0, w as isize - 1))
                    } else {
                        ((r as isize + o).clamp(0, h as isize - 1), c as isize)
                    };
                    acc += kv * src[rr as usize * w + cc as usize];
                }
                out[r * w + c] = acc;
            }
        }
        out
    };
    let tmp = pass(data, true);
    pass(&tmp, false)
}

/// Image and dense mask for sample `index`, fully determined by `(seed, index)`.
pub fn generate_phantom(params: &PhantomParams, seed: u64, index: u64) -> Result<(ImageGrid, DenseMask)> {
    params.validate()?;
    let n = params.image_size;
    let k = params.layout.classes().num_foreground();
    let mut rng = stream(seed, index, Purpose::Phantom);
    let labels = (0..MAX_LAYOUT_ATTEMPTS)
        .map(|_| draw_layout(params, &mut rng))
        .find(|l| layout_fits(l, n, params.margin, k))
        .ok_or_else(|| {
            CoreError::Param(format!("no layout fits the frame after {MAX_LAYOUT_ATTEMPTS} attempts"))
        })?;
    let mid = (n as f64 - 1.0) / 2.0;
    let (ba, bb) = (0.45 * n as f64, 0.38 * n as f64);
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).expect("finite sigma");
    let mut raw = vec![0.0f64; n * n];
    for r in 0..n {
        for c in 0..n {
            let l = labels[r * n + c];
            let base = if l == BG {
                let inside = ((c as f64 - mid) / ba).powi(2) + ((r as f64 - mid) / bb).powi(2) <= 1.0;
                if inside {
                    params.body_intensity
                } else {
                    params.intensities[0]
                }
            } else {
                params.intensities[l as usize]
            };
            raw[r * n + c] = base as f64 + noise.sample(&mut rng);
        }
    }
    let smooth = gaussian_blur(&raw, n, n, params.smooth_sigma);
    let image = ImageGrid::new(n, n, smooth.into_iter().map(|v| v as f32).collect())?;
    Ok((image, DenseMask::new(n, n, labels)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScribbleSynthParams {
    /// Scribble length is `max(alpha * sqrt(area), 8)` pixels.
    pub alpha: f64,
    pub erosion_margin: usize,
    pub gc_margin: usize,
    pub include_background: bool,
    pub seed: u64,
}

impl Default for ScribbleSynthParams {
    fn default() -> Self {
        Self { alpha: 1.0, erosion_margin: 2, gc_margin: 4, include_background: false, seed: 42 }
    }
}

impl ScribbleSynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.erosion_margin < 1 {
            return Err(CoreError::Param("erosion margin must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(CoreError::Param(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn target_length(&self, area: usize) -> usize {
        (self.alpha * (area as f64).sqrt()).max(MIN_SCRIBBLE).round() as usize
    }
}

/// Distance from each region pixel to the nearest pixel outside the region,
/// with everything beyond the frame counted as outside.
fn inner_distance(region: &[bool], h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut outside = vec![true; ph * pw];
    for r in 0..h {
        for c in 0..w {
            outside[(r + 1) * pw + c + 1] = !region[r * w + c];
        }
    }
    let d = edt(&outside, ph, pw);
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        out.extend_from_slice(&d.data[(r + 1) * pw + 1..(r + 1) * pw + 1 + w]);
    }
    out
}

fn neighbors8(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (r, c) = ((p / w) as isize, (p % w) as isize);
    (-1isize..=1)
        .flat_map(move |dr| (-1isize..=1).map(move |dc| (dr, dc)))
        .filter(|&(dr, dc)| dr != 0 || dc != 0)
        .filter_map(move |(dr, dc)| {
            let (rr, cc) = (r + dr, c + dc);
            (rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize).then(|| rr as usize * w + cc as usize)
        })
}

/// One attempt of a momentum-biased self-avoiding walk. A step may not land
/// next to any earlier pixel except the current one, so the path stays one
/// pixel wide.
fn walk_once(allowed: &[bool], h: usize, w: usize, target: usize, start: usize, rng: &mut Rng) -> Vec<usize> {
    let mut on_path = vec![false; allowed.len()];
    let mut path = vec![start];
    on_path[start] = true;
    let mut heading: f64 = rng.gen_range(0.0..2.0 * PI);
    while path.len() < target {
        let cur = *path.last().expect("nonempty");
        let cands: Vec<usize> = neighbors8(cur, h, w)
            .filter(|&q| allowed[q] && !on_path[q])
            .filter(|&q| neighbors8(q, h, w).all(|n| n == cur || !on_path[n]))
            .collect();
        if cands.is_empty() {
            break;
        }
        let dir = |q: usize| {
            let dy = (q / w) as f64 - (cur / w) as f64;
            let dx = (q % w) as f64 - (cur % w) as f64;
            dy.atan2(dx)
        };
        let weights: Vec<f64> = cands.iter().map(|&q| (2.0 * (dir(q) - heading).cos()).exp()).collect();
        let pick = cands[WeightedIndex::new(&weights).expect("positive weights").sample(rng)];
        heading = dir(pick);
        on_path[pick] = true;
        path.push(pick);
    }
    path
}

/// Longest of up to `MAX_WALK_RESTARTS + 1` walks, stopping at the first that reaches `target`.
fn random_walk(allowed: &[bool], h: usize, w: usize, target: usize, rng: &mut Rng) -> Vec<usize> {
    let pool: Vec<usize> = (0..allowed.len()).filter(|&p| allowed[p]).collect();
    let mut best = Vec::new();
    for _ in 0..=MAX_WALK_RESTARTS {
        let start = pool[rng.gen_range(0..pool.len())];
        let path = walk_once(allowed, h, w, target, start, rng);
        if path.len() > best.len() {
            best = path;
        }
        if best.len() >= target {
            break;
        }
    }
    best
}

/// Axis-aligned ellipse around a pixel set, scaled until every pixel is inside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
}

impl Ellipse {
    pub fn fit(pixels: &[usize], w: usize) -> Option<Self> {
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for &p in pixels {
            let (r, c) = (p / w, p % w);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
        if pixels.is_empty() {
            return None;
        }
        let cy = (r0 + r1) as f64 / 2.0;
        let cx = (c0 + c1) as f64 / 2.0;
        let (ry, rx) = ((r1 - r0) as f64 / 2.0 + 0.5, (c1 - c0) as f64 / 2.0 + 0.5);
        let base = Self { cy, cx, ry, rx };
        let s = pixels
            .iter()
            .map(|&p| base.level((p / w) as f64, (p % w) as f64).sqrt())
            .fold(1.0f64, f64::max);
        Some(Self { ry: ry * s, rx: rx * s, ..base })
    }

    /// `((x - cx)/rx)² + ((y - cy)/ry)²`; at most 1 inside.
    pub fn level(&self, y: f64, x: f64) -> f64 {
        ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2)
    }

    /// Closed one-pixel-wide 8-connected contour in traversal order, or
    /// `None` if it leaves the frame.
    pub fn rasterize(&self, h: usize, w: usize) -> Option<Vec<usize>> {
        let steps = (16.0 * PI * self.rx.max(self.ry)).ceil() as usize;
        let mut pts: Vec<(isize, isize)> = Vec::with_capacity(steps);
        for i in 0..steps {
            let t = 2.0 * PI * i as f64 / steps as f64;
            let p = (
                (self.cy + self.ry * t.sin()).round() as isize,
                (self.cx + self.rx * t.cos()).round() as isize,
            );
            if pts.last() != Some(&p) {
                pts.push(p);
            }
        }
        while pts.len() > 1 && pts.first() == pts.last() {
            pts.pop();
        }
        let adjacent = |a: (isize, isize), b: (isize, isize)| (a.0 - b.0).abs() <= 1 && (a.1 - b.1).abs() <= 1;
        // drop corner pixels whose neighbours along the curve already touch
        loop {
            let n = pts.len();
            let Some(i) = (0..n).find(|&i| adjacent(pts[(i + n - 1) % n], pts[(i + 1) % n])) else {
                break;
            };
            if n <= 4 {
                break;
            }
            pts.remove(i);
        }
        let mut out = Vec::with_capacity(pts.len());
        for (r, c) in pts {
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                return None;
            }
            out.push(r as usize * w + c as usize);
        }
        Some(out)
    }
}

/// Emulated hand-drawn annotation of `mask`: one interior walk per
/// foreground class, a GC ellipse around the dilated foreground and, if
/// enabled, a background walk away from the foreground.
pub fn synthesize_scribbles(mask: &DenseMask, params: &ScribbleSynthParams, index: u64) -> Result<ScribbleAnnotation> {
    params.validate()?;
    let (h, w) = (mask.height(), mask.width());
    let mut rng = stream(params.seed, index, Purpose::Scribble);
    let mut out = LabelGrid::filled(h, w, UNLABELED);
    let labels = mask.labels();
    for code in 1..=mask.max_label() {
        let region: Vec<bool> = labels.iter().map(|&l| l == code).collect();
        let area = region.iter().filter(|&&b| b).count();
        if area == 0 {
            continue;
        }
        let depth = inner_distance(&region, h, w);
        let allowed: Vec<bool> = depth.iter().map(|&d| d > params.erosion_margin as f64).collect();
        let path = if allowed.iter().any(|&a| a) {
            random_walk(&allowed, h, w, params.target_length(area), &mut rng)
        } else {
            let mut best = 0;
            for p in 0..h * w {
                if depth[p] > depth[best] {
                    best = p;
                }
            }
            vec![best]
        };
        for p in path {
            out.labels_mut()[p] = code;
        }
    }
    let fg: Vec<bool> = labels.iter().map(|&l| l != BG).collect();
    if !fg.iter().any(|&b| b) {
        return Ok(out);
    }
    let to_fg = edt(&fg, h, w);
    let dilated: Vec<usize> = (0..h * w).filter(|&p| to_fg.data[p] <= params.gc_margin as f64).collect();
    let ellipse = Ellipse::fit(&dilated, w).expect("foreground present");
    let contour = ellipse
        .rasterize(h, w)
        .ok_or_else(|| CoreError::Data(format!("GC ellipse {ellipse:?} leaves the {h}x{w} frame")))?;
    for &p in &contour {
        out.labels_mut()[p] = GC;
    }
    if params.include_background {
        let near_gc: Vec<bool> = (0..h * w)
            .map(|p| out.labels()[p] == GC || neighbors8(p, h, w).any(|q| out.labels()[q] == GC))
            .collect();
        let everywhere = vec![true; h * w];
        let from_border = inner_distance(&everywhere, h, w);
        let allowed: Vec<bool> = (0..h * w)
            .map(|p| {
                to_fg.data[p] > params.gc_margin as f64
                    && !near_gc[p]
                    && from_border[p] > params.erosion_margin as f64
            })
            .collect();
        if allowed.iter().any(|&a| a) {
            let area = labels.iter().filter(|&&l| l == BG).count();
            for p in random_walk(&allowed, h, w, params.target_length(area), &mut rng) {
                out.labels_mut()[p] = BG;
            }
        }
    }
    Ok(out)
}

/// Centre crop or zero pad to `size × size`; the leading side gets the
/// smaller half of an odd difference.
pub fn crop_or_pad(img: &ImageGrid, size: usize) -> Vec<f32> {
    let (h, w) = (img.height(), img.width());
    let mut out = vec![0.0f32; size * size];
    let place = |src: usize| -> (isize, usize) {
        // offset of the source inside the target (negative when cropping)
        if src >= size {
            (-(((src - size) / 2) as isize), size)
        } else {
            (((size - src) / 2) as isize, src)
        }
    };
    let (ro, rn) = place(h);
    let (co, cn) = place(w);
    for r in 0..rn {
        for c in 0..cn {
            let (sr, sc) = ((r as isize - ro.min(0)) as usize, (c as isize - co.min(0)) as usize);
            let (tr, tc) = ((r as isize + ro.max(0)) as usize, (c as isize + co.max(0)) as usize);
            out[tr * size + tc] = img.get(sr, sc);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub image: ImageGrid,
    /// The input had zero variance and was replaced by zeros.
    pub degenerate: bool,
}

/// Crop/pad to `size`, then scale to zero mean and unit population variance.
pub fn preprocess(img: &ImageGrid, size: usize) -> Result<Preprocessed> {
    let data = crop_or_pad(img, size);
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 1e-12 * mean.abs().max(1.0) {
        log::warn!("constant image; emitting zeros");
        return Ok(Preprocessed { image: ImageGrid::zeros(size, size)?, degenerate: true });
    }
    let out = data.iter().map(|&v| ((v as f64 - mean) / sd) as f32).collect();
    Ok(Preprocessed { image: ImageGrid::new(size, size, out)?, degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub scribble: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
    #[serde(default = "ClassConfig::cardiac")]
    pub classes: ClassConfig,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(dir.as_ref().join(Self::FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        fs::write(dir.as_ref().join(Self::FILE), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[ManifestEntry]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(CoreError::Param(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub phantom: PhantomParams,
    pub scribble: ScribbleSynthParams,
    pub seed: u64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self { phantom: PhantomParams::default(), scribble: ScribbleSynthParams::default(), seed: 42 }
    }
}

/// Train/val/test sizes; train and val are rounded, test takes the rest.
pub fn split_counts(count: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|&r| !(r >= 0.0)) || total <= 0.0 {
        return Err(CoreError::Param(format!("bad split ratios {ratios:?}")));
    }
    let train = (count as f64 * ratios[0] / total).round() as usize;
    let val = ((count as f64 * ratios[1] / total).round() as usize).min(count - train.min(count));
    let train = train.min(count);
    Ok([train, val, count - train - val])
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.70, 0.15, 0.15];

/// Generates `count` samples under `dir` and writes the manifest.
pub fn write_dataset(dir: impl AsRef<Path>, count: usize, params: &DatasetParams, split: [f64; 3]) -> Result<Manifest> {
    if count < 10 {
        return Err(CoreError::Param(format!("dataset needs at least 10 samples, got {count}")));
    }
    let dir = dir.as_ref();
    let [n_train, n_val, _] = split_counts(count, split)?;
    for sub in ["images", "scribbles", "masks"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let size = params.phantom.image_size;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (img, mask) = generate_phantom(&params.phantom, params.seed, i as u64)?;
        let scr = synthesize_scribbles(&mask, &params.scribble, i as u64)?;
        let img = preprocess(&img, size)?.image;
        let rel = |sub: &str, stem: &str| -> (String, PathBuf) {
            let r = format!("{sub}/{stem}_{i:04}.mgrd");
            let full = dir.join(&r);
            (r, full)
        };
        let (ri, fi) = rel("images", "img");
        let (rs, fs_) = rel("scribbles", "scr");
        let (rm, fm) = rel("masks", "mask");
        mgrd::save_image(&img, fi)?;
        mgrd::save_labels(&scr, fs_)?;
        mgrd::save_labels(mask.grid(), fm)?;
        entries.push(ManifestEntry { image: ri, scribble: rs, mask: rm });
    }
    let test = entries.split_off(n_train + n_val);
    let val = entries.split_off(n_train);
    let manifest = Manifest { train: entries, val, test, classes: params.phantom.layout.classes() };
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lens_area_limits() {
        assert_eq!(lens_area(1.0, 1.0, 3.0), 0.0);
        assert!((lens_area(3.0, 1.0, 0.5) - PI).abs() < 1e-12);
        // two unit disks one radius apart: 2π/3 - √3/2
        let want = 2.0 * PI / 3.0 - 3f64.sqrt() / 2.0;
        assert!((lens_area(1.0, 1.0, 1.0) - want).abs() < 1e-12);
    }

    #[test]
    fn crop_and_pad_arithmetic() {
        let data: Vec<f32> = (0..70 * 60).map(|i| i as f32 + 1.0).collect();
        let img = ImageGrid::new(70, 60, data).unwrap();
        let out = crop_or_pad(&img, 64);
        for r in 0..64 {
            assert_eq!(out[r * 64], 0.0);
            assert_eq!(out[r * 64 + 1], 0.0);
            assert_eq!(out[r * 64 + 62], 0.0);
            assert_eq!(out[r * 64 + 63], 0.0);
            // row r of the output is source row r + 3; column 2 is source column 0
            assert_eq!(out[r * 64 + 2], img.get(r + 3, 0));
            assert_eq!(out[r * 64 + 61], img.get(r + 3, 59));
        }
    }

    #[test]
    fn constant_image_is_degenerate() {
        let img = ImageGrid::new(8, 8, vec![3.0; 64]).unwrap();
        let p = preprocess(&img, 8).unwrap();
        assert!(p.degenerate);
        assert!(p.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_counts_follow_ratios() {
        assert_eq!(split_counts(100, DEFAULT_SPLIT).unwrap(), [70, 15, 15]);
        assert_eq!(split_counts(100, [0.6, 0.2, 0.2]).unwrap(), [60, 20, 20]);
        assert_eq!(split_counts(10, [1.0, 0.0, 0.0]).unwrap(), [10, 0, 0]);
        assert!(split_counts(10, [-1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn ellipse_contour_is_thin_and_closed() {
        let e = Ellipse { cy: 20.0, cx: 20.0, ry: 8.0, rx: 12.0 };
        let c = e.rasterize(40, 40).unwrap();
        let n = c.len();
        for i in 0..n {
            let (a, b) = (c[i], c[(i + 1) % n]);
            let (dr, dc) = ((a / 40) as isize - (b / 40) as isize, (a % 40) as isize - (b % 40) as isize);
            assert!(dr.abs() <= 1 && dc.abs() <= 1 && (dr, dc) != (0, 0));
        }
        assert!(Ellipse { cy: 5.0, cx: 5.0, ry: 8.0, rx: 8.0 }.rasterize(40, 40).is_none());
    }
}
