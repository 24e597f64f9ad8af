//! Experiment grids: loss ablation, shrink/sample-count sensitivity and the
//! decay-factor study. Every training run is cached by config hash.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use maco_autodiff::load_model;
use maco_core::cpl::build_cpl;
use maco_core::losses::{LossSet, Term};
use maco_core::scribble::{connected_components, default_shrink_classes, shrink_scribble};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{load_manifest, load_split};
use crate::error::Result;
use crate::eval::evaluate;
use crate::train::{load_datasets, train_on, BEST_MODEL, CONFIG_FILE};

pub const RESULT_FILE: &str = "result.json";
pub const SHRINK_RATIOS: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
pub const TRAIN_FRACTIONS: [f64; 3] = [0.25, 0.5, 1.0];
pub const DECAYS: [f64; 4] = [0.05, 0.1, 0.2, 0.5];

/// Outcome of one training run: test Dice of the best-validation checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config_hash: String,
    pub best_epoch: usize,
    pub val_mean: f64,
    pub test_per_class: Vec<f64>,
    pub test_mean: f64,
    /// Wall time of training and test evaluation.
    #[serde(default)]
    pub seconds: f64,
}

/// Training runs stored under `root/runs/<config hash>`.
pub struct RunCache {
    root: PathBuf,
}

impl RunCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run_dir(&self, cfg: &TrainConfig) -> PathBuf {
        self.root.join("runs").join(cfg.hash())
    }

    fn cached(&self, cfg: &TrainConfig) -> Option<RunResult> {
        let dir = self.run_dir(cfg);
        let stored = fs::read_to_string(dir.join(CONFIG_FILE)).ok()?;
        if stored != cfg.to_json() {
            return None;
        }
        let text = fs::read_to_string(dir.join(RESULT_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    /// Trains `cfg` unless an identical run already finished.
    pub fn run(&self, cfg: &TrainConfig) -> Result<RunResult> {
        if let Some(r) = self.cached(cfg) {
            log::info!("reusing run {}", r.config_hash);
            return Ok(r);
        }
        cfg.validate()?;
        let dir = self.run_dir(cfg);
        log::info!("training run {} in {}", cfg.hash(), dir.display());
        let start = Instant::now();
        let data = load_datasets(cfg)?;
        let outcome = train_on(cfg, &data, &dir)?;
        let eval_on = if data.test.is_empty() { &data.val } else { &data.test };
        let test = evaluate(&outcome.best_model, eval_on)?;
        let val_mean = outcome
            .rows
            .iter()
            .find(|r| r.epoch == outcome.best_epoch)
            .and_then(|r| r.val.as_ref())
            .map_or(f64::NAN, |v| v.mean);
        let result = RunResult {
            config_hash: cfg.hash(),
            best_epoch: outcome.best_epoch,
            val_mean,
            test_per_class: test.per_class,
            test_mean: test.mean,
            seconds: start.elapsed().as_secs_f64(),
        };
        fs::write(dir.join(RESULT_FILE), serde_json::to_string_pretty(&result)?)?;
        Ok(result)
    }

    pub fn best_model_path(&self, cfg: &TrainConfig) -> PathBuf {
        self.run_dir(cfg).join(BEST_MODEL)
    }
}

/// `# key=value` lines heading every experiment CSV.
pub fn provenance(cfg: &TrainConfig) -> String {
    format!(
        "# config_hash={}\n# seed={}\n# code_version={}\n",
        cfg.hash(),
        cfg.seed,
        env!("CARGO_PKG_VERSION")
    )
}

fn dice_header(k: usize) -> String {
    (1..=k).map(|c| format!("dice_{c}")).collect::<Vec<_>>().join(",")
}

fn dice_cells(r: &RunResult) -> String {
    let cells: Vec<String> = r.test_per_class.iter().map(|d| format!("{:.4}", d * 100.0)).collect();
    format!("{},{:.4}", cells.join(","), r.test_mean * 100.0)
}

fn num_classes(cfg: &TrainConfig) -> Result<usize> {
    Ok(load_manifest(&cfg.data_dir)?.classes.num_foreground())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub set: LossSet,
    pub result: RunResult,
}

/// One run per loss subset, in the order of the paper's ablation table.
pub fn ablate(base: &TrainConfig, cache: &RunCache, out_csv: &Path) -> Result<Vec<AblationRow>> {
    ablate_sets(base, cache, &LossSet::ablation_rows(), out_csv)
}

pub fn ablate_sets(base: &TrainConfig, cache: &RunCache, sets: &[LossSet], out_csv: &Path) -> Result<Vec<AblationRow>> {
    let k = num_classes(base)?;
    let mut rows = Vec::new();
    for set in sets {
        let cfg = TrainConfig { enabled_losses: set.terms(), ..base.clone() };
        rows.push(AblationRow { set: *set, result: cache.run(&cfg)? });
    }
    let mut csv = provenance(base);
    let terms: Vec<&str> = Term::ALL.iter().map(|t| t.label()).collect();
    writeln!(csv, "row,{},{},mean,best_epoch,config_hash", terms.join(","), dice_header(k)).unwrap();
    for (i, r) in rows.iter().enumerate() {
        let marks: Vec<&str> = Term::ALL.iter().map(|&t| if r.set.contains(t) { "1" } else { "0" }).collect();
        writeln!(
            csv,
            "{},{},{},{},{}",
            i + 1,
            marks.join(","),
            dice_cells(&r.result),
            r.result.best_epoch,
            r.result.config_hash
        )
        .unwrap();
    }
    write_csv(out_csv, &csv)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub shrink_ratio: f64,
    pub train_fraction: f64,
    pub result: RunResult,
}

pub fn sensitivity(
    base: &TrainConfig,
    cache: &RunCache,
    ratios: &[f64],
    fractions: &[f64],
    out_csv: &Path,
) -> Result<Vec<SensitivityRow>> {
    let k = num_classes(base)?;
    let mut rows = Vec::new();
    for &r in ratios {
        let cfg = TrainConfig { shrink_ratio: r, ..base.clone() };
        rows.push(SensitivityRow { shrink_ratio: r, train_fraction: base.train_fraction, result: cache.run(&cfg)? });
    }
    for &f in fractions {
        let cfg = TrainConfig { train_fraction: f, ..base.clone() };
        rows.push(SensitivityRow { shrink_ratio: base.shrink_ratio, train_fraction: f, result: cache.run(&cfg)? });
    }
    let reference = rows
        .iter()
        .find(|r| r.shrink_ratio == 0.0 && r.train_fraction == base.train_fraction)
        .map(|r| r.result.test_mean);
    let mut csv = provenance(base);
    writeln!(csv, "shrink_ratio,train_fraction,{},mean,retention,config_hash", dice_header(k)).unwrap();
    for r in &rows {
        let retention = reference.map_or(String::new(), |m| format!("{:.4}", r.result.test_mean / m));
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.shrink_ratio,
            r.train_fraction,
            dice_cells(&r.result),
            retention,
            r.result.config_hash
        )
        .unwrap();
    }
    write_csv(out_csv, &csv)?;
    Ok(rows)
}

/// Removed-pixel accounting of one shrink ratio over a split.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkCheck {
    pub ratio: f64,
    /// Largest `|removed - ratio * n|` over samples and classes.
    pub max_count_error: f64,
    /// Touched components whose survivors are not one 8-connected piece.
    pub broken_components: usize,
}

pub fn check_shrink(cfg: &TrainConfig, split: &str, ratio: f64) -> Result<ShrinkCheck> {
    let manifest = load_manifest(&cfg.data_dir)?;
    let samples = load_split(&cfg.data_dir, &manifest, split)?;
    let mut max_err = 0.0f64;
    let mut broken = 0;
    for s in &samples {
        let classes = default_shrink_classes(&s.scribble);
        let out = shrink_scribble(&s.scribble, ratio, &classes)?;
        for &code in &classes {
            let n = s.scribble.count(code) as f64;
            let removed = n - out.count(code) as f64;
            max_err = max_err.max((removed - ratio * n).abs());
            for comp in connected_components(&s.scribble, code) {
                let survivors = comp.pixels.iter().filter(|&&p| out.labels()[p] == code).count();
                if survivors == 0 || survivors == comp.len() {
                    continue;
                }
                let mut masked = out.clone();
                for (p, l) in masked.labels_mut().iter_mut().enumerate() {
                    if !comp.pixels.contains(&p) {
                        *l = maco_core::domain::UNLABELED;
                    }
                }
                if connected_components(&masked, code).len() != 1 {
                    broken += 1;
                }
            }
        }
    }
    Ok(ShrinkCheck { ratio, max_count_error: max_err, broken_components: broken })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayRow {
    pub decay: f64,
    pub result: RunResult,
    pub mean_support: f64,
}

/// Foreground pseudo-label support area per training sample, one column per decay.
pub fn support_areas(cfg: &TrainConfig, decays: &[f64]) -> Result<Vec<Vec<usize>>> {
    let manifest = load_manifest(&cfg.data_dir)?;
    let k = manifest.classes.num_foreground();
    let samples = load_split(&cfg.data_dir, &manifest, "train")?;
    samples
        .iter()
        .map(|s| {
            decays
                .iter()
                .map(|&d| {
                    let st = build_cpl(&s.scribble, k, d, cfg.cpl_floor)?;
                    Ok(st.classes.iter().map(|c| c.support_area()).sum())
                })
                .collect()
        })
        .collect()
}

/// Whether every sample's support area strictly shrinks as the decay grows.
pub fn strictly_decreasing(areas: &[Vec<usize>]) -> bool {
    areas.iter().all(|row| row.windows(2).all(|w| w[1] < w[0]))
}

pub fn decay_study(base: &TrainConfig, cache: &RunCache, decays: &[f64], out_dir: &Path) -> Result<Vec<DecayRow>> {
    let k = num_classes(base)?;
    let areas = support_areas(base, decays)?;
    let mut rows = Vec::new();
    for (j, &d) in decays.iter().enumerate() {
        let cfg = TrainConfig { cpl_decay: d, ..base.clone() };
        let mean_support = areas.iter().map(|r| r[j] as f64).sum::<f64>() / areas.len().max(1) as f64;
        rows.push(DecayRow { decay: d, result: cache.run(&cfg)?, mean_support });
    }
    let mut csv = provenance(base);
    writeln!(csv, "decay,{},mean,mean_support_area,config_hash", dice_header(k)).unwrap();
    for r in &rows {
        writeln!(csv, "{},{},{:.2},{}", r.decay, dice_cells(&r.result), r.mean_support, r.result.config_hash).unwrap();
    }
    write_csv(&out_dir.join("decay_study.csv"), &csv)?;

    let mut support = provenance(base);
    let cols: Vec<String> = decays.iter().map(|d| format!("support_{d}")).collect();
    writeln!(support, "sample,{}", cols.join(",")).unwrap();
    for (i, row) in areas.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|a| a.to_string()).collect();
        writeln!(support, "{i},{}", cells.join(",")).unwrap();
    }
    write_csv(&out_dir.join("decay_support.csv"), &support)?;
    Ok(rows)
}

fn write_csv(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

/// Loads the best checkpoint of a cached run.
pub fn load_best(cache: &RunCache, cfg: &TrainConfig) -> Result<maco_autodiff::UNet<f32>> {
    Ok(load_model(cache.best_model_path(cfg))?)
}
