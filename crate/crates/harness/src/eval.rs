//! Per-class Dice of argmax predictions.

use maco_autodiff::{Tensor, UNet};
use maco_core::domain::{argmax_raw, dice_score, DenseMask};
use serde::Serialize;

use crate::data::Sample;
use crate::error::{HarnessError, Result};

const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiceTable {
    /// Mean Dice per foreground class (class `i + 1` at index `i`).
    pub per_class: Vec<f64>,
    /// Mean over foreground classes.
    pub mean: f64,
    /// Per image, per foreground class.
    pub per_image: Vec<Vec<f64>>,
}

/// Dice of ready-made predictions against ground truth.
pub fn dice_table(preds: &[DenseMask], gts: &[DenseMask], num_foreground: usize) -> Result<DiceTable> {
    if preds.is_empty() {
        return Err(HarnessError::Data("cannot evaluate an empty split".into()));
    }
    let mut per_image = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let row = (1..=num_foreground as u8)
            .map(|c| dice_score(p, g, c))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        per_image.push(row);
    }
    let n = per_image.len() as f64;
    let per_class: Vec<f64> = (0..num_foreground).map(|c| per_image.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    let mean = per_class.iter().sum::<f64>() / num_foreground as f64;
    Ok(DiceTable { per_class, mean, per_image })
}

/// Argmax class maps for every sample, in eval mode.
pub fn predict_masks(model: &UNet<f32>, samples: &[Sample]) -> Result<Vec<DenseMask>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let (h, w) = (chunk[0].image.height(), chunk[0].image.width());
        let data: Vec<f32> = chunk.iter().flat_map(|s| s.image.data().iter().copied()).collect();
        let x = Tensor::new(vec![chunk.len(), 1, h, w], data)?;
        let y = model.predict(&x)?;
        let c = y.shape()[1];
        for item in y.data().chunks(c * h * w) {
            out.push(argmax_raw(c, h, w, item)?);
        }
    }
    Ok(out)
}

pub fn evaluate(model: &UNet<f32>, samples: &[Sample]) -> Result<DiceTable> {
    if samples.is_empty() {
        return Err(HarnessError::Data("cannot evaluate an empty split".into()));
    }
    let preds = predict_masks(model, samples)?;
    let gts: Vec<DenseMask> = samples.iter().map(|s| s.mask.clone()).collect();
    dice_table(&preds, &gts, model.config().out_classes - 1)
}
