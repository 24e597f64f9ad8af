//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use maco_autodiff::load_model;
use maco_core::cpl::{build_cpl, DEFAULT_DECAY, DEFAULT_FLOOR};
use maco_core::domain::GC;
use maco_core::mcm::{apply_mask, patch_weights, sample_mask, McmConfig};
use maco_core::mgrd::{self, Grid};
use maco_core::rng::{stream, Purpose};
use maco_core::scribble::{default_shrink_classes, scribble_stats, shrink_scribble};
use maco_core::synth::{synthesize_scribbles, write_dataset, DatasetParams, PhantomParams, ScribbleSynthParams};

use crate::config::TrainConfig;
use crate::data::{load_manifest, load_split};
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, predict_masks};
use crate::experiments::{ablate, decay_study, sensitivity, RunCache, DECAYS, SHRINK_RATIOS, TRAIN_FRACTIONS};
use crate::train::{train, BEST_MODEL};
use crate::viz;

#[derive(Debug, Parser)]
#[command(name = "maco", version, about = "Scribble-supervised segmentation lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LayoutArg {
    Cardiac,
    Prostate,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with scribbles and a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Train, validation and test ratios.
        #[arg(long, default_value = "70,15,15")]
        split: String,
        #[arg(long, value_enum, default_value = "cardiac")]
        layout: LayoutArg,
        /// Also draw a background scribble.
        #[arg(long)]
        background: bool,
    },
    /// Synthesize scribbles for a dense mask.
    GenScribbles {
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long)]
        background: bool,
    },
    /// Build continuous pseudo labels; writes a `[K + 1, H, W]` f32 grid (classes 1..K, then GC).
    MakeCpl {
        #[arg(long)]
        scribble: PathBuf,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = DEFAULT_DECAY)]
        decay: f64,
        #[arg(long, default_value_t = DEFAULT_FLOOR)]
        floor: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a scribble-weighted patch mask and apply it to an image.
    MakeMask {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        scribble: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        ws: f64,
        #[arg(long, default_value_t = 1.0)]
        wo: f64,
        #[arg(long, default_value_t = 0.5)]
        phi: f64,
        #[arg(long, default_value_t = 16)]
        patch: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Masked image output.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-pixel 0/1 mask output (1 = masked).
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for the predicted masks, one MGRD file per sample.
        #[arg(long)]
        save_preds: Option<PathBuf>,
    },
    /// Loss-term ablation (six rows).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shrink-ratio and training-size sensitivity.
    Sensitivity {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Pseudo-label decay study.
    DecayStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        decays: Option<Vec<f64>>,
    },
    /// Shrink the foreground strokes of a scribble file.
    Shrink {
        #[arg(long)]
        scribble: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a PGM of a scalar map or a PPM class overlay.
    Viz {
        /// Image under the overlay, or the scalar map when no labels are given.
        #[arg(long)]
        image: PathBuf,
        /// Label grid (scribble or mask) to overlay.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Channel of a multi-channel f32 grid to render as PGM.
        #[arg(long)]
        channel: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| HarnessError::Config(format!("split {s:?}: {e}")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| HarnessError::Config(format!("split {s:?} needs three ratios")))
}

fn data_err(path: &Path) -> impl Fn(maco_core::CoreError) -> HarnessError + '_ {
    move |e| HarnessError::Data(format!("{}: {e}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, count, size, seed, split, layout, background } => {
            let phantom = match layout {
                LayoutArg::Cardiac => PhantomParams::default(),
                LayoutArg::Prostate => PhantomParams::prostate(),
            };
            let params = DatasetParams {
                phantom: PhantomParams { image_size: size, ..phantom },
                scribble: ScribbleSynthParams { include_background: background, seed, ..ScribbleSynthParams::default() },
                seed,
            };
            let m = write_dataset(&out, count, &params, parse_split(&split)?)?;
            println!("wrote {} train, {} val, {} test samples to {}", m.train.len(), m.val.len(), m.test.len(), out.display());
        }
        Command::GenScribbles { mask, out, seed, index, alpha, background } => {
            let m = mgrd::load_mask(&mask).map_err(data_err(&mask))?;
            let params = ScribbleSynthParams { alpha, include_background: background, seed, ..ScribbleSynthParams::default() };
            let scr = synthesize_scribbles(&m, &params, index)?;
            mgrd::save_labels(&scr, &out)?;
            for (code, s) in scribble_stats(&scr) {
                println!("code {code}: {} pixels, {} components", s.pixels, s.components);
            }
        }
        Command::MakeCpl { scribble, classes, decay, floor, out } => {
            let scr = mgrd::load_labels(&scribble).map_err(data_err(&scribble))?;
            let st = build_cpl(&scr, classes, decay, floor)?;
            let (h, w) = st.dims();
            let data: Vec<f32> = st.classes.iter().chain([&st.gc]).flat_map(|c| c.data.iter().map(|&v| v as f32)).collect();
            Grid::from_f32(vec![classes + 1, h, w], data)?.save(&out)?;
            for c in st.classes.iter().chain([&st.gc]) {
                let name = if c.code == GC { "GC".to_string() } else { c.code.to_string() };
                println!("class {name}: support {} px", c.support_area());
            }
        }
        Command::MakeMask { image, scribble, ws, wo, phi, patch, seed, out, mask_out } => {
            let img = mgrd::load_image(&image).map_err(data_err(&image))?;
            let scr = mgrd::load_labels(&scribble).map_err(data_err(&scribble))?;
            let cfg = McmConfig { w_s: ws, w_o: wo, phi, patch_size: patch, ..McmConfig::default() };
            let pg = patch_weights(&scr, &cfg)?;
            let pm = sample_mask(&pg, phi, &mut stream(seed, 0, Purpose::Mask))?;
            mgrd::save_image(&apply_mask(&img, &pm)?, &out)?;
            if let Some(path) = mask_out {
                let bits: Vec<u8> = pm.keep_map().iter().map(|&k| if k == 0.0 { 1 } else { 0 }).collect();
                mgrd::save_labels(&maco_core::domain::LabelGrid::new(pm.height, pm.width, bits)?, path)?;
            }
            println!("masked {} of {} patches", pm.masked_count(), pg.len());
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let outcome = train(&cfg, &out)?;
            let best = outcome.rows.iter().find(|r| r.epoch == outcome.best_epoch).and_then(|r| r.val.as_ref());
            match best {
                Some(v) => println!("best epoch {} (val mean Dice {:.4}); checkpoint {}", outcome.best_epoch, v.mean, out.join(BEST_MODEL).display()),
                None => println!("trained {} epochs without validation", cfg.epochs),
            }
        }
        Command::Eval { model, data, split, save_preds } => {
            let net = load_model(&model).map_err(|e| HarnessError::Data(format!("{}: {e}", model.display())))?;
            let manifest = load_manifest(&data)?;
            let samples = load_split(&data, &manifest, &split)?;
            let t = evaluate(&net, &samples)?;
            if let Some(dir) = save_preds {
                std::fs::create_dir_all(&dir)?;
                for (i, p) in predict_masks(&net, &samples)?.into_iter().enumerate() {
                    mgrd::save_labels(&p.into_grid(), dir.join(format!("pred_{i:04}.mgrd")))?;
                }
            }
            println!("class,dice");
            for (i, d) in t.per_class.iter().enumerate() {
                println!("{},{:.4}", i + 1, d);
            }
            println!("mean,{:.4}", t.mean);
        }
        Command::Ablate { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let rows = ablate(&cfg, &RunCache::new(&out), &out.join("ablation.csv"))?;
            for r in rows {
                println!("{:<28} {:.2}", r.set.name(), r.result.test_mean * 100.0);
            }
        }
        Command::Sensitivity { config, out, ratios, fractions } => {
            let cfg = TrainConfig::load(&config)?;
            let ratios = ratios.unwrap_or(SHRINK_RATIOS.to_vec());
            let fractions = fractions.unwrap_or(TRAIN_FRACTIONS.to_vec());
            let rows = sensitivity(&cfg, &RunCache::new(&out), &ratios, &fractions, &out.join("sensitivity.csv"))?;
            for r in rows {
                println!("ratio {} fraction {}: {:.2}", r.shrink_ratio, r.train_fraction, r.result.test_mean * 100.0);
            }
        }
        Command::DecayStudy { config, out, decays } => {
            let cfg = TrainConfig::load(&config)?;
            let decays = decays.unwrap_or(DECAYS.to_vec());
            let rows = decay_study(&cfg, &RunCache::new(&out), &decays, &out)?;
            for r in rows {
                println!("decay {}: {:.2} (mean support {:.0} px)", r.decay, r.result.test_mean * 100.0, r.mean_support);
            }
        }
        Command::Shrink { scribble, ratio, out } => {
            let scr = mgrd::load_labels(&scribble).map_err(data_err(&scribble))?;
            let shrunk = shrink_scribble(&scr, ratio, &default_shrink_classes(&scr))?;
            mgrd::save_labels(&shrunk, &out)?;
            let before = scribble_stats(&scr);
            for (code, s) in scribble_stats(&shrunk) {
                println!("code {code}: {} -> {} pixels", before[&code].pixels, s.pixels);
            }
        }
        Command::Viz { image, labels, channel, out } => {
            let grid = Grid::load(&image).map_err(data_err(&image))?;
            let bytes = match labels {
                Some(l) => {
                    let lab = mgrd::load_labels(&l).map_err(data_err(&l))?;
                    viz::encode_overlay(&grid.into_image()?, &lab)?
                }
                None => scalar_pgm(grid, channel)?,
            };
            viz::write(&out, &bytes)?;
        }
    }
    Ok(())
}

/// A 2-D grid renders as-is; a `[C, H, W]` grid renders channel `channel`
/// (default 0). Float maps are taken as values in [0, 1].
fn scalar_pgm(grid: Grid, channel: Option<usize>) -> Result<Vec<u8>> {
    let dims = grid.dims.clone();
    let (c, h, w) = match dims.as_slice() {
        [h, w] => (1, *h, *w),
        [c, h, w] => (*c, *h, *w),
        _ => return Err(HarnessError::Data(format!("cannot render a grid of dims {dims:?}"))),
    };
    let ch = channel.unwrap_or(0);
    if ch >= c {
        return Err(HarnessError::Config(format!("channel {ch} out of range for {c} channels")));
    }
    let values: Vec<f64> = match &grid.data {
        mgrd::GridData::F32(v) if dims.len() == 2 => {
            let img = maco_core::domain::ImageGrid::new(h, w, v.clone())?;
            return viz::encode_image_pgm(&img);
        }
        mgrd::GridData::F32(v) => v[ch * h * w..(ch + 1) * h * w].iter().map(|&x| x as f64).collect(),
        mgrd::GridData::U8(v) => v[ch * h * w..(ch + 1) * h * w].iter().map(|&x| x as f64 / 255.0).collect(),
    };
    viz::encode_pgm(h, w, &values)
}
