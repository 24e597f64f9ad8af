//! Loading a generated dataset split together with its derived per-sample data.

use std::path::Path;

use maco_core::cpl::{build_cpl, CplStack};
use maco_core::domain::{ClassConfig, DenseMask, ImageGrid, ScribbleAnnotation};
use maco_core::mcm::{gc_binary_mask, gc_enclosed_mask, patch_weights, GcMaskSource, McmConfig, PatchGrid};
use maco_core::mgrd;
use maco_core::CoreError;
use maco_core::scribble::{default_shrink_classes, shrink_scribble};
use maco_core::synth::{Manifest, ManifestEntry};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: ImageGrid,
    pub scribble: ScribbleAnnotation,
    pub mask: DenseMask,
}

/// A training sample with everything precomputed from its annotation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sample: Sample,
    pub cpl: CplStack,
    pub gc_mask: Vec<bool>,
    pub patches: PatchGrid,
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::load(dir).map_err(|e| HarnessError::Data(format!("{}: {e}", dir.display())))
}

fn load_entry(dir: &Path, e: &ManifestEntry) -> Result<Sample> {
    fn ctx<'a>(what: &'a str, path: &'a str) -> impl Fn(CoreError) -> HarnessError + 'a {
        move |err| HarnessError::Data(format!("{what} {path}: {err}"))
    }
    let image = mgrd::load_image(dir.join(&e.image)).map_err(ctx("image", &e.image))?;
    let scribble = mgrd::load_labels(dir.join(&e.scribble)).map_err(ctx("scribble", &e.scribble))?;
    let mask = mgrd::load_mask(dir.join(&e.mask)).map_err(ctx("mask", &e.mask))?;
    let dims = (image.height(), image.width());
    if scribble.dims() != dims || (mask.height(), mask.width()) != dims {
        return Err(HarnessError::Data(format!("{}: image, scribble and mask dims differ", e.image)));
    }
    Ok(Sample { image, scribble, mask })
}

pub fn load_split(dir: &Path, manifest: &Manifest, split: &str) -> Result<Vec<Sample>> {
    let entries = manifest.split(split).map_err(|e| HarnessError::Config(e.to_string()))?;
    entries.iter().map(|e| load_entry(dir, e)).collect()
}

pub struct PrepareOptions<'a> {
    pub classes: &'a ClassConfig,
    pub mcm: &'a McmConfig,
    pub decay: f64,
    pub floor: f64,
    pub shrink_ratio: f64,
    pub gc_mask_source: GcMaskSource,
}

pub fn prepare(samples: Vec<Sample>, opts: &PrepareOptions<'_>) -> Result<Vec<Prepared>> {
    samples
        .into_iter()
        .map(|mut sample| {
            if opts.shrink_ratio > 0.0 {
                let classes = default_shrink_classes(&sample.scribble);
                sample.scribble = shrink_scribble(&sample.scribble, opts.shrink_ratio, &classes)?;
            }
            let cpl = build_cpl(&sample.scribble, opts.classes.num_foreground(), opts.decay, opts.floor)?;
            let gc_mask = match opts.gc_mask_source {
                GcMaskSource::Enclosed => gc_enclosed_mask(&sample.scribble, opts.decay)?,
                _ => gc_binary_mask(&cpl.gc)?,
            };
            let patches = patch_weights(&sample.scribble, opts.mcm)?;
            Ok(Prepared { sample, cpl, gc_mask, patches })
        })
        .collect()
}
