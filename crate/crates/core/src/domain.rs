//! Grids, label maps and the label-space helpers shared by the rest of the crate.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub const BG: u8 = 0;
pub const GC: u8 = 254;
pub const UNLABELED: u8 = 255;

/// Minimum side length of an image.
pub const MIN_SIDE: usize = 8;

/// Single-channel intensity image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(CoreError::Shape(format!(
                "image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        check_len(height, width, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite(format!("image pixel {i}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.width + c]
    }
}

fn check_len(height: usize, width: usize, len: usize) -> Result<()> {
    if height * width != len {
        return Err(CoreError::Shape(format!(
            "{height}x{width} grid needs {} values, got {len}",
            height * width
        )));
    }
    Ok(())
}

/// Per-pixel class codes. Used both for sparse scribbles and dense masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelGrid {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        check_len(height, width, labels.len())?;
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, code: u8) -> Self {
        Self { height, width, labels: vec![code; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, code: u8) {
        self.labels[r * self.width + c] = code;
    }

    pub fn count(&self, code: u8) -> usize {
        self.labels.iter().filter(|&&l| l == code).count()
    }

    /// Binary grid of pixels carrying `code`.
    pub fn indicator(&self, code: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == code).collect()
    }
}

/// Sparse annotation: class codes on scribble pixels, [`UNLABELED`] elsewhere.
pub type ScribbleAnnotation = LabelGrid;

/// Dense ground truth: every pixel carries [`BG`] or a foreground class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseMask(LabelGrid);

impl DenseMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        Self::from_grid(LabelGrid::new(height, width, labels)?)
    }

    pub fn from_grid(grid: LabelGrid) -> Result<Self> {
        if let Some(&l) = grid.labels().iter().find(|&&l| l == UNLABELED || l == GC) {
            return Err(CoreError::Data(format!("dense mask contains sparse code {l}")));
        }
        Ok(Self(grid))
    }

    pub fn grid(&self) -> &LabelGrid {
        &self.0
    }

    pub fn into_grid(self) -> LabelGrid {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.0.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.0.get(r, c)
    }

    /// Largest class code present.
    pub fn max_label(&self) -> u8 {
        self.0.labels.iter().copied().max().unwrap_or(BG)
    }
}

/// Channel-major class probabilities for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

pub const PROB_SUM_TOL: f32 = 1e-5;

impl ProbMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || channels * height * width != data.len() {
            return Err(CoreError::Shape(format!(
                "{channels}x{height}x{width} map needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        let hw = height * width;
        for p in 0..hw {
            let mut sum = 0.0f32;
            for c in 0..channels {
                let v = data[c * hw + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(CoreError::Data(format!("probability {v} at channel {c}, pixel {p}")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(CoreError::Data(format!("pixel {p} channels sum to {sum}")));
            }
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let hw = self.height * self.width;
        &self.data[c * hw..(c + 1) * hw]
    }
}

/// Class names and reserved codes of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassConfig {
    /// Foreground class names; class `i + 1` is `foreground_classes[i]`.
    pub foreground_classes: Vec<String>,
    pub has_background_scribble: bool,
    pub bg: u8,
    pub gc: u8,
    pub unlabeled: u8,
}

impl ClassConfig {
    pub fn new(names: &[&str], has_background_scribble: bool) -> Result<Self> {
        let cfg = Self {
            foreground_classes: names.iter().map(|s| s.to_string()).collect(),
            has_background_scribble,
            bg: BG,
            gc: GC,
            unlabeled: UNLABELED,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// RV = 1, MYO = 2, LV = 3.
    pub fn cardiac() -> Self {
        Self::new(&["RV", "MYO", "LV"], false).expect("valid")
    }

    /// Central gland = 1, peripheral zone = 2.
    pub fn prostate() -> Self {
        Self::new(&["CG", "PZ"], false).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.foreground_classes.len();
        if k == 0 {
            return Err(CoreError::Param("at least one foreground class required".into()));
        }
        if self.bg == self.gc || self.bg == self.unlabeled || self.gc == self.unlabeled {
            return Err(CoreError::Param("reserved codes must be distinct".into()));
        }
        let top = k as u8;
        for code in [self.gc, self.unlabeled] {
            if code != self.bg && (1..=top).contains(&code) {
                return Err(CoreError::Param(format!("reserved code {code} collides with a class")));
            }
        }
        Ok(())
    }

    pub fn num_foreground(&self) -> usize {
        self.foreground_classes.len()
    }

    /// Network output channels: background plus every foreground class.
    pub fn num_outputs(&self) -> usize {
        self.num_foreground() + 1
    }

    pub fn foreground_codes(&self) -> impl Iterator<Item = u8> {
        1..=self.num_foreground() as u8
    }
}

pub fn one_hot(mask: &DenseMask, c_out: usize) -> Result<ProbMap> {
    let hw = mask.height() * mask.width();
    let mut data = vec![0.0f32; c_out * hw];
    for (p, &l) in mask.labels().iter().enumerate() {
        if l as usize >= c_out {
            return Err(CoreError::LabelOutOfRange { label: l, channels: c_out });
        }
        data[l as usize * hw + p] = 1.0;
    }
    ProbMap::new(c_out, mask.height(), mask.width(), data)
}

/// Per-pixel index of the largest channel. Ties go to the lowest index.
pub fn argmax_classes(p: &ProbMap) -> Result<DenseMask> {
    argmax_raw(p.channels, p.height, p.width, &p.data)
}

/// As [`argmax_classes`] on a raw channel-major slice.
pub fn argmax_raw(channels: usize, height: usize, width: usize, data: &[f32]) -> Result<DenseMask> {
    let hw = height * width;
    let mut labels = vec![BG; hw];
    for (p, out) in labels.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for c in 0..channels {
            let v = data[c * hw + p];
            if v.is_nan() {
                return Err(CoreError::NonFinite(format!("probability at channel {c}, pixel {p}")));
            }
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        *out = best as u8;
    }
    DenseMask::new(height, width, labels)
}

/// Dice overlap of one class. Both sets empty counts as a perfect score.
pub fn dice_score(pred: &DenseMask, gt: &DenseMask, class_id: u8) -> Result<f64> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(CoreError::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in pred.labels().iter().zip(gt.labels()) {
        let (px, py) = (x == class_id, y == class_id);
        a += px as usize;
        b += py as usize;
        both += (px && py) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_single_pixel() {
        let m = DenseMask::new(1, 1, vec![2]).unwrap();
        assert_eq!(one_hot(&m, 4).unwrap().data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn one_hot_background_only() {
        let m = DenseMask::new(2, 2, vec![0; 4]).unwrap();
        let p = one_hot(&m, 2).unwrap();
        assert_eq!(p.channel(0), &[1.0; 4]);
        assert_eq!(p.channel(1), &[0.0; 4]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        let m = DenseMask::new(1, 2, vec![0, 4]).unwrap();
        assert!(matches!(one_hot(&m, 4), Err(CoreError::LabelOutOfRange { label: 4, channels: 4 })));
    }

    #[test]
    fn argmax_picks_largest_and_breaks_ties_low() {
        let p = ProbMap::new(3, 1, 1, vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(argmax_classes(&p).unwrap().labels(), &[1]);
        let p = ProbMap::new(2, 1, 1, vec![0.5, 0.5]).unwrap();
        assert_eq!(argmax_classes(&p).unwrap().labels(), &[0]);
    }

    #[test]
    fn argmax_rejects_nan() {
        let err = argmax_raw(2, 1, 1, &[f32::NAN, 0.5]);
        assert!(matches!(err, Err(CoreError::NonFinite(_))));
    }

    #[test]
    fn dice_examples() {
        let a = DenseMask::new(2, 4, vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        let b = DenseMask::new(2, 4, vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let c = DenseMask::new(2, 4, vec![1, 1, 0, 0, 1, 1, 0, 0]).unwrap();
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(dice_score(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &b, 3).unwrap(), 1.0);
        let small = DenseMask::new(1, 8, vec![0; 8]).unwrap();
        assert!(dice_score(&a, &small, 1).is_err());
    }

    #[test]
    fn prob_map_rejects_bad_sums() {
        assert!(ProbMap::new(2, 1, 1, vec![0.5, 0.6]).is_err());
        assert!(ProbMap::new(2, 1, 1, vec![1.2, -0.2]).is_err());
    }

    #[test]
    fn image_rejects_small_or_nonfinite() {
        assert!(ImageGrid::new(4, 8, vec![0.0; 32]).is_err());
        let mut d = vec![0.0; 64];
        d[3] = f32::INFINITY;
        assert!(ImageGrid::new(8, 8, d).is_err());
    }

    #[test]
    fn class_config_codes() {
        let c = ClassConfig::cardiac();
        assert_eq!(c.num_outputs(), 4);
        assert_eq!(c.foreground_codes().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(ClassConfig::new(&[], false).is_err());
        let mut bad = c.clone();
        bad.gc = 2;
        assert!(bad.validate().is_err());
    }
}
