//! Training configuration. Every key has a default, so `{}` is a valid file.

use std::fs;
use std::path::{Path, PathBuf};

use maco_autodiff::{NormKind, UNetConfig};
use maco_core::cpl::{ConForm, ConOptions, DEFAULT_DECAY, DEFAULT_FLOOR};
use maco_core::losses::{LossSet, LossWeights, Term};
use maco_core::mcm::{EnhanceMode, GcMaskSource, McmConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Scribble annotations (the method under study).
    Scribble,
    /// Cross-entropy on dense masks, the fully supervised reference.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Batch,
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub norm: Norm,
    pub groups: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { depth: 3, base_channels: 8, norm: Norm::Group, groups: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub mcm: McmConfig,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub enabled_losses: Vec<Term>,
    pub pce_include_background: bool,
    pub cpl_decay: f64,
    pub cpl_floor: f64,
    pub con_form: ConForm,
    pub gc_in_con: bool,
    /// Region kept by the enhanced prediction; `annotation` thresholds the
    /// contour's pseudo label as printed, `enclosed` fills the contour first.
    pub gc_mask_source: GcMaskSource,
    /// `foreground` turns pixels outside the region into background targets;
    /// `all_channels` zeroes every channel there.
    pub enhance_mode: EnhanceMode,
    pub net: NetConfig,
    /// Validate every this many epochs (the last epoch is always validated).
    pub eval_interval: usize,
    /// Reuse one mask per training sample instead of resampling every step.
    pub fixed_mask: bool,
    pub supervision: Supervision,
    /// Fraction of every training scribble class removed before training.
    pub shrink_ratio: f64,
    /// Leading fraction of the training split that is used.
    pub train_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            data_dir: PathBuf::from("data"),
            epochs: 200,
            batch_size: 4,
            learning_rate: 1e-4,
            seed: 42,
            mcm: McmConfig::default(),
            lambda1: w.lambda1,
            lambda2: w.lambda2,
            lambda3: w.lambda3,
            lambda4: w.lambda4,
            enabled_losses: Term::ALL.to_vec(),
            pce_include_background: false,
            cpl_decay: DEFAULT_DECAY,
            cpl_floor: DEFAULT_FLOOR,
            con_form: ConForm::EntropyWeighted,
            gc_in_con: true,
            gc_mask_source: GcMaskSource::Enclosed,
            enhance_mode: EnhanceMode::Foreground,
            net: NetConfig::default(),
            eval_interval: 1,
            fixed_mask: false,
            supervision: Supervision::Scribble,
            shrink_ratio: 0.0,
            train_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return fail("epochs, batch_size and eval_interval must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.shrink_ratio) {
            return fail(format!("shrink_ratio {} outside [0, 1]", self.shrink_ratio));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return fail(format!("train_fraction {} outside (0, 1]", self.train_fraction));
        }
        self.mcm.validate()?;
        self.weights().validate()?;
        self.loss_set()?;
        if !(self.cpl_decay > 0.0) || !(self.cpl_floor > 0.0 && self.cpl_floor < 1.0) {
            return fail(format!("bad pseudo-label decay {} / floor {}", self.cpl_decay, self.cpl_floor));
        }
        self.unet_config(2).validate()?;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, lambda3: self.lambda3, lambda4: self.lambda4 }
    }

    pub fn loss_set(&self) -> Result<LossSet> {
        Ok(LossSet::from_terms(&self.enabled_losses)?)
    }

    pub fn con_options(&self) -> ConOptions {
        ConOptions { form: self.con_form, gc_in_con: self.gc_in_con }
    }

    pub fn unet_config(&self, out_classes: usize) -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            out_classes,
            depth: self.net.depth,
            base_channels: self.net.base_channels,
            norm: match self.net.norm {
                Norm::Batch => NormKind::Batch,
                Norm::Group => NormKind::Group,
            },
            groups: self.net.groups,
            seed: self.seed,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Hex SHA-256 of the canonical JSON encoding, truncated to 16 digits.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
