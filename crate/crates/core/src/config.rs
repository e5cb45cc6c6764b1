//! Run configuration: everything that determines a training run.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, Variant};
use crate::data::{DataConfig, DataSource, SyntheticSpec, DEFAULT_BATCH_SIZE};
use crate::distill::{KdConfig, TeacherStrategy};
use crate::error::{Error, Result};
use crate::scheduler::{default_hyper, PhaseHyper, PhaseName, PhaseSpec};
use crate::supernet::SupernetOptions;

pub const DEFAULT_EPOCH_SCALE: f64 = 1.0 / 30.0;

/// Replacement values for one phase; unset fields keep the reference values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseOverride {
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub n_subnets_per_step: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Predict with the weighted ensemble of every active exit instead of
    /// the deepest active exit alone.
    pub ensemble: bool,
    pub batch_size: usize,
    /// Training images used to re-estimate each subnet's batch-norm
    /// statistics before it is evaluated; 0 keeps the running statistics
    /// accumulated by the supernet, which mix every sampled subnet.
    pub bn_calibration_images: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ensemble: false,
            batch_size: 100,
            bn_calibration_images: 200,
        }
    }
}

fn default_variant() -> Variant {
    Variant::SeB
}

fn default_width() -> f64 {
    1.0
}

fn default_epoch_scale() -> f64 {
    DEFAULT_EPOCH_SCALE
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds weight initialization, subnet sampling and batch order.
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_width")]
    pub width_multiplier: f64,
    /// Explicit macro-architecture; replaces `variant` and
    /// `width_multiplier` when set.
    #[serde(default)]
    pub arch: Option<ArchSpec>,
    #[serde(default)]
    pub supernet: SupernetOptions,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub kd: KdConfig,
    #[serde(default)]
    pub teacher: TeacherStrategy,
    /// Multiplies every phase's epochs (rounded, at least one).
    #[serde(default = "default_epoch_scale")]
    pub epoch_scale: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Sample kernel, width and level per block and depth per stage.
    #[serde(default)]
    pub per_slot_sampling: bool,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub phases: BTreeMap<PhaseName, PhaseOverride>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reference settings: the unscaled phase table at batch 200.
    pub fn reference(seed: u64) -> Self {
        Self {
            seed,
            variant: Variant::SeB,
            width_multiplier: 1.0,
            arch: None,
            supernet: SupernetOptions::default(),
            data: DataConfig::default(),
            kd: KdConfig::default(),
            teacher: TeacherStrategy::Fixed,
            epoch_scale: 1.0,
            batch_size: DEFAULT_BATCH_SIZE,
            per_slot_sampling: false,
            eval: EvalConfig::default(),
            phases: BTreeMap::new(),
            output_dir: None,
        }
    }

    /// Desk-scale settings on the 8-class synthetic set: 400 training and
    /// 200 test images, scaled epochs and small batches.
    pub fn desk(seed: u64) -> Self {
        let mut cfg = Self::reference(seed);
        cfg.data = DataConfig {
            source: DataSource::Synthetic(SyntheticSpec {
                n_classes: 8,
                train_per_class: 50,
                test_per_class: 25,
                ..SyntheticSpec::default()
            }),
            val_fraction: 0.0,
            split_seed: seed,
            augment: false,
        };
        cfg.epoch_scale = DEFAULT_EPOCH_SCALE;
        cfg.batch_size = 20;
        cfg.eval.bn_calibration_images = 100;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Invalid(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("run config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epoch_scale > 0.0) {
            return Err(Error::Invalid(format!("epoch_scale must be > 0, got {}", self.epoch_scale)));
        }
        if self.batch_size == 0 || self.eval.batch_size == 0 {
            return Err(Error::Invalid("batch sizes must be positive".into()));
        }
        self.kd.validate()?;
        if let Some(arch) = &self.arch {
            arch.validate()?;
        }
        for (name, o) in &self.phases {
            if o.lr.is_some_and(|lr| !(lr > 0.0)) {
                return Err(Error::Invalid(format!("phase {name}: lr must be > 0")));
            }
            if o.epochs == Some(0) {
                return Err(Error::Invalid(format!("phase {name}: epochs must be > 0")));
            }
        }
        Ok(())
    }

    /// Architecture for a dataset with `n_classes` classes.
    pub fn arch_spec(&self, n_classes: usize) -> Result<ArchSpec> {
        let arch = match &self.arch {
            Some(a) => {
                if a.n_classes != n_classes {
                    return Err(Error::Invalid(format!(
                        "architecture has {} classes but the dataset has {n_classes}",
                        a.n_classes
                    )));
                }
                a.clone()
            }
            None => ArchSpec::new(self.variant, self.width_multiplier, n_classes),
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Reference values with this run's overrides, before epoch scaling.
    pub fn hyper(&self, name: PhaseName) -> PhaseHyper {
        let mut h = default_hyper(name);
        if let Some(o) = self.phases.get(&name) {
            h.lr = o.lr.unwrap_or(h.lr);
            h.epochs = o.epochs.unwrap_or(h.epochs);
            h.warmup_epochs = o.warmup_epochs.unwrap_or(h.warmup_epochs);
            h.n_subnets_per_step = o.n_subnets_per_step.unwrap_or(h.n_subnets_per_step);
        }
        h
    }

    /// Phases of the run after overrides and epoch scaling.
    pub fn phases(&self, arch: &ArchSpec) -> Vec<ScheduledPhase> {
        PhaseName::ALL
            .iter()
            .filter(|p| p.applies_to(arch))
            .map(|&name| {
                let h = self.hyper(name);
                ScheduledPhase {
                    spec: PhaseSpec::new(name, arch, h),
                    epochs: ((h.epochs as f64 * self.epoch_scale).round() as usize).max(1),
                    warmup_fraction: h.warmup_epochs.min(h.epochs) as f64 / h.epochs as f64,
                }
            })
            .collect()
    }
}

/// A phase as actually run: the unscaled spec, the scaled epoch count and
/// the share of iterations spent warming up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduledPhase {
    pub spec: PhaseSpec,
    pub epochs: usize,
    pub warmup_fraction: f64,
}
