//! The training loop: two forward passes through one network per step, the
//! weighted loss, Adam, periodic validation and best-checkpoint selection.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use maco_autodiff::io::encode_model;
use maco_autodiff::{backward_and_step, build_unet, AdamConfig, AdamState, Graph, Mode, NodeId, NormKind, Tensor, UNet};
use maco_core::cpl::{loss_con, CplStack};
use maco_core::domain::{ClassConfig, LabelGrid};
use maco_core::losses::{coefficient, loss_pce, loss_total, LossReport, LossSet, LossWeights, Term, TermNodes};
use maco_core::mcm::{apply_mask_in_place, enhance_with, loss_cc, loss_en, prediction_fg_mask, sample_mask, GcMaskSource};
use maco_core::rng::{stream, Purpose, Rng};
use rand::seq::SliceRandom;

use crate::config::{Supervision, TrainConfig};
use crate::data::{load_manifest, load_split, prepare, PrepareOptions, Prepared, Sample};
use crate::error::{HarnessError, Result};
use crate::eval::{evaluate, DiceTable};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_MODEL: &str = "best.mmdl";
pub const FINAL_MODEL: &str = "final.mmdl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss: LossReport,
    pub val: Option<DiceTable>,
}

pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub best_epoch: usize,
    pub best_model: UNet<f32>,
    pub classes: ClassConfig,
    pub out_dir: PathBuf,
}

/// Training data and validation data resolved from a config.
pub struct Datasets {
    pub classes: ClassConfig,
    pub train: Vec<Prepared>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_datasets(cfg: &TrainConfig) -> Result<Datasets> {
    let manifest = load_manifest(&cfg.data_dir)?;
    let classes = manifest.classes.clone();
    let mut train = load_split(&cfg.data_dir, &manifest, "train")?;
    if train.is_empty() {
        return Err(HarnessError::Data("training split is empty".into()));
    }
    let keep = ((train.len() as f64 * cfg.train_fraction).round() as usize).max(1);
    train.truncate(keep);
    let opts = PrepareOptions {
        classes: &classes,
        mcm: &cfg.mcm,
        decay: cfg.cpl_decay,
        floor: cfg.cpl_floor,
        shrink_ratio: cfg.shrink_ratio,
        gc_mask_source: cfg.gc_mask_source,
    };
    let train = prepare(train, &opts)?;
    let val = load_split(&cfg.data_dir, &manifest, "val")?;
    let test = load_split(&cfg.data_dir, &manifest, "test")?;
    Ok(Datasets { classes, train, val, test })
}

fn numerical(epoch: usize, step: usize) -> impl Fn(HarnessError) -> HarnessError {
    move |e| match e {
        HarnessError::Numerical(m) => HarnessError::Numerical(format!("epoch {epoch}, step {step}: {m}")),
        other => other,
    }
}

struct Step<'a> {
    cfg: &'a TrainConfig,
    weights: LossWeights,
    enabled: LossSet,
}

impl Step<'_> {
    fn coef(&self, t: Term) -> f64 {
        coefficient(t, &self.weights, &self.enabled)
    }

    fn needs_masked(&self) -> bool {
        self.coef(Term::Mpce) > 0.0 || self.coef(Term::Cc) > 0.0
    }

    /// One optimizer step on `batch`; `masks` holds the per-item masked images.
    fn run(
        &self,
        model: &mut UNet<f32>,
        opt: &mut AdamState<f32>,
        batch: &[&Prepared],
        masked: Option<Vec<f32>>,
    ) -> Result<LossReport> {
        let b = batch.len();
        let (h, w) = (batch[0].sample.image.height(), batch[0].sample.image.width());
        let x_data: Vec<f32> = batch.iter().flat_map(|p| p.sample.image.data().iter().copied()).collect();
        let mut g = Graph::<f32>::new();
        let params = model.bind(&mut g);
        let x = g.constant(Tensor::new(vec![b, 1, h, w], x_data)?);
        let fwd = model.forward(&mut g, &params, x, Mode::Train)?;
        let y = fwd.probs;
        let y_m = match masked {
            Some(data) => {
                let xm = g.constant(Tensor::new(vec![b, 1, h, w], data)?);
                Some(model.forward(&mut g, &params, xm, Mode::Train)?.probs)
            }
            None => None,
        };
        let (labels, include_bg): (Vec<&LabelGrid>, bool) = match self.cfg.supervision {
            Supervision::Scribble => (batch.iter().map(|p| &p.sample.scribble).collect(), self.cfg.pce_include_background),
            Supervision::Dense => (batch.iter().map(|p| p.sample.mask.grid()).collect(), true),
        };
        let pce = loss_pce(&mut g, y, &labels, include_bg)?;
        let mpce = match (self.coef(Term::Mpce) > 0.0, y_m) {
            (true, Some(ym)) => Some(loss_pce(&mut g, ym, &labels, include_bg)?),
            _ => None,
        };
        let y_e = if self.coef(Term::Cc) > 0.0 || self.coef(Term::En) > 0.0 {
            Some(self.enhanced(&mut g, y, batch)?)
        } else {
            None
        };
        let cc = match (self.coef(Term::Cc) > 0.0, y_m, y_e) {
            (true, Some(ym), Some(ye)) => Some(loss_cc(&mut g, ym, ye)?),
            _ => None,
        };
        let en = match (self.coef(Term::En) > 0.0, y_e) {
            (true, Some(ye)) => Some(loss_en(&mut g, y, ye)?),
            _ => None,
        };
        let con = if self.coef(Term::Con) > 0.0 {
            let stacks: Vec<&CplStack> = batch.iter().map(|p| &p.cpl).collect();
            Some(loss_con(&mut g, y, &stacks, self.cfg.con_options())?)
        } else {
            None
        };
        let terms = TermNodes { pce, mpce, cc, en, con };
        let (total, report) = loss_total(&mut g, &terms, &self.weights, &self.enabled)?;
        backward_and_step(&g, total, &params, model, opt)?;
        if model.config().norm == NormKind::Batch {
            model.absorb_moments(&fwd.moments);
        }
        Ok(report)
    }

    fn enhanced(&self, g: &mut Graph<f32>, y: NodeId, batch: &[&Prepared]) -> Result<NodeId> {
        let masks: Vec<Vec<bool>> = match self.cfg.gc_mask_source {
            GcMaskSource::Annotation | GcMaskSource::Enclosed => batch.iter().map(|p| p.gc_mask.clone()).collect(),
            GcMaskSource::PredictionFg => {
                let [_, c, h, w] = g.value(y).dims4();
                let hw = h * w;
                g.value(y).data().chunks(c * hw).map(|item| prediction_fg_mask(&item[..hw])).collect()
            }
        };
        Ok(enhance_with(g, y, &masks, self.cfg.enhance_mode)?)
    }
}

fn masked_batch(batch: &[&Prepared], indices: &[usize], cfg: &TrainConfig, rng: &mut Rng) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for (p, &idx) in batch.iter().zip(indices) {
        let pm = if cfg.fixed_mask {
            sample_mask(&p.patches, cfg.mcm.phi, &mut stream(cfg.seed, idx as u64, Purpose::Mask))?
        } else {
            sample_mask(&p.patches, cfg.mcm.phi, rng)?
        };
        let mut img = p.sample.image.data().to_vec();
        apply_mask_in_place(&mut img, &pm);
        out.extend(img);
    }
    Ok(out)
}

fn mean_report(acc: &LossReport, n: usize) -> LossReport {
    let k = 1.0 / n as f64;
    LossReport {
        pce: acc.pce * k,
        mpce: acc.mpce * k,
        cc: acc.cc * k,
        en: acc.en * k,
        con: acc.con * k,
        total: acc.total * k,
    }
}

fn accumulate(acc: &mut LossReport, r: &LossReport) {
    acc.pce += r.pce;
    acc.mpce += r.mpce;
    acc.cc += r.cc;
    acc.en += r.en;
    acc.con += r.con;
    acc.total += r.total;
}

pub fn csv_header(cfg: &TrainConfig, k: usize) -> String {
    let mut s = String::new();
    writeln!(s, "# config_hash={}", cfg.hash()).unwrap();
    writeln!(s, "# seed={}", cfg.seed).unwrap();
    writeln!(s, "# code_version={}", env!("CARGO_PKG_VERSION")).unwrap();
    let dice: Vec<String> = (1..=k).map(|c| format!("val_dice_{c}")).collect();
    writeln!(s, "epoch,pce,mpce,cc,en,con,total,{},val_mean", dice.join(",")).unwrap();
    s
}

fn csv_row(row: &MetricsRow, k: usize) -> String {
    let l = &row.loss;
    let mut s = format!("{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}", row.epoch, l.pce, l.mpce, l.cc, l.en, l.con, l.total);
    match &row.val {
        Some(v) => {
            for d in &v.per_class {
                write!(s, ",{d:.6}").unwrap();
            }
            write!(s, ",{:.6}", v.mean).unwrap();
        }
        None => s.push_str(&",".repeat(k + 1)),
    }
    s.push('\n');
    s
}

/// Trains from `cfg` and writes the config, metrics and checkpoints into `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = load_datasets(cfg)?;
    train_on(cfg, &data, out_dir)
}

pub fn train_on(cfg: &TrainConfig, data: &Datasets, out_dir: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), cfg.to_json())?;
    let k = data.classes.num_foreground();
    let mut model = build_unet::<f32>(&cfg.unet_config(data.classes.num_outputs()))?;
    let first = &data.train[0].sample.image;
    model.check_input(&[1, 1, first.height(), first.width()])?;
    let adam = AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() };
    let mut opt = AdamState::new(adam, model.params());
    let step = Step { cfg, weights: cfg.weights(), enabled: cfg.loss_set()? };
    let mut mask_rng = stream(cfg.seed, 0, Purpose::Mask);
    let mut csv = fs::File::create(out_dir.join(METRICS_FILE))?;
    csv.write_all(csv_header(cfg, k).as_bytes())?;
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, UNet<f32>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut global_step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, epoch as u64, Purpose::Shuffle));
        let mut acc = LossReport::default();
        let mut steps = 0;
        for idx in order.chunks(cfg.batch_size) {
            global_step += 1;
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &data.train[i]).collect();
            let masked = if step.needs_masked() {
                Some(masked_batch(&batch, idx, cfg, &mut mask_rng)?)
            } else {
                None
            };
            let report = step
                .run(&mut model, &mut opt, &batch, masked)
                .map_err(numerical(epoch, global_step))?;
            accumulate(&mut acc, &report);
            steps += 1;
        }
        let loss = mean_report(&acc, steps);
        let validate = !data.val.is_empty() && (epoch % cfg.eval_interval == 0 || epoch == cfg.epochs);
        let val = if validate { Some(evaluate(&model, &data.val)?) } else { None };
        if let Some(v) = &val {
            if best.as_ref().map_or(true, |(m, _, _)| v.mean > *m) {
                fs::write(out_dir.join(BEST_MODEL), encode_model(&model))?;
                best = Some((v.mean, epoch, model.clone()));
            }
        }
        log::info!(
            "epoch {epoch}: total {:.5} pce {:.5} val {}",
            loss.total,
            loss.pce,
            val.as_ref().map_or("-".to_string(), |v| format!("{:.4}", v.mean))
        );
        let row = MetricsRow { epoch, loss, val };
        csv.write_all(csv_row(&row, k).as_bytes())?;
        rows.push(row);
    }
    csv.sync_all()?;
    fs::write(out_dir.join(FINAL_MODEL), encode_model(&model))?;
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => {
            fs::write(out_dir.join(BEST_MODEL), encode_model(&model))?;
            (cfg.epochs, model)
        }
    };
    Ok(TrainOutcome { rows, best_epoch, best_model, classes: data.classes.clone(), out_dir: out_dir.to_path_buf() })
}

