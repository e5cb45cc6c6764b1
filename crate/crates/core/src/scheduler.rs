//! Progressive-shrinking phases: ordering per variant, unlocked value sets,
//! per-phase hyperparameters, subnet sampling, the LR schedule and the
//! gradient-accumulating train step.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, BlockChoice, GlobalChoice, StageChoice, SubnetConfig, RESOLUTIONS};
use crate::autograd::Tape;
use crate::data::resize_batch;
use crate::distill::{student_loss, KdConfig};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::supernet::Supernet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseName {
    Full,
    #[serde(rename = "EKS")]
    Eks,
    #[serde(rename = "EL1")]
    El1,
    #[serde(rename = "EL2")]
    El2,
    #[serde(rename = "EH1")]
    Eh1,
    #[serde(rename = "EH2")]
    Eh2,
    #[serde(rename = "EH3")]
    Eh3,
    #[serde(rename = "EH4")]
    Eh4,
    #[serde(rename = "ED1")]
    Ed1,
    #[serde(rename = "ED2")]
    Ed2,
    #[serde(rename = "EW1")]
    Ew1,
    #[serde(rename = "EW2")]
    Ew2,
}

impl PhaseName {
    /// Every phase in pipeline order.
    pub const ALL: [PhaseName; 12] = [
        PhaseName::Full,
        PhaseName::Eks,
        PhaseName::El1,
        PhaseName::El2,
        PhaseName::Eh1,
        PhaseName::Eh2,
        PhaseName::Eh3,
        PhaseName::Eh4,
        PhaseName::Ed1,
        PhaseName::Ed2,
        PhaseName::Ew1,
        PhaseName::Ew2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PhaseName::Full => "Full",
            PhaseName::Eks => "EKS",
            PhaseName::El1 => "EL1",
            PhaseName::El2 => "EL2",
            PhaseName::Eh1 => "EH1",
            PhaseName::Eh2 => "EH2",
            PhaseName::Eh3 => "EH3",
            PhaseName::Eh4 => "EH4",
            PhaseName::Ed1 => "ED1",
            PhaseName::Ed2 => "ED2",
            PhaseName::Ew1 => "EW1",
            PhaseName::Ew2 => "EW2",
        }
    }

    fn is_level(self) -> bool {
        matches!(self, PhaseName::El1 | PhaseName::El2)
    }

    fn is_height(self) -> bool {
        matches!(self, PhaseName::Eh1 | PhaseName::Eh2 | PhaseName::Eh3 | PhaseName::Eh4)
    }

    /// Whether the phase runs for `arch`.
    pub fn applies_to(self, arch: &ArchSpec) -> bool {
        (!self.is_level() || arch.parallel_blocks) && (!self.is_height() || arch.early_exits)
    }

    fn rank(self) -> usize {
        Self::ALL.iter().position(|&p| p == self).expect("listed")
    }
}

impl fmt::Display for PhaseName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhaseName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Invalid(format!("unknown phase {s:?}")))
    }
}

/// Training hyperparameters of one phase.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseHyper {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub n_subnets_per_step: usize,
}

/// The reference hyperparameter table.
pub fn default_hyper(name: PhaseName) -> PhaseHyper {
    let (lr, epochs, warmup_epochs, n_subnets_per_step) = match name {
        PhaseName::Full => (1.0e-3, 180, 0, 0),
        PhaseName::Eks => (3.0e-2, 120, 5, 1),
        PhaseName::El1 => (2.5e-3, 25, 0, 2),
        PhaseName::El2 => (7.5e-3, 120, 5, 2),
        PhaseName::Eh1 => (2.5e-3, 25, 0, 2),
        PhaseName::Eh2 => (7.5e-3, 60, 5, 2),
        PhaseName::Eh3 => (1.0e-2, 90, 5, 2),
        PhaseName::Eh4 => (3.0e-2, 120, 5, 2),
        PhaseName::Ed1 => (2.5e-3, 25, 0, 2),
        PhaseName::Ed2 => (7.5e-3, 120, 5, 2),
        PhaseName::Ew1 => (2.5e-3, 25, 0, 4),
        PhaseName::Ew2 => (7.5e-3, 120, 5, 4),
    };
    PhaseHyper {
        lr,
        epochs,
        warmup_epochs,
        n_subnets_per_step,
    }
}

/// Value sets available for sampling, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unlocked {
    pub resolution: Vec<usize>,
    pub kernel: Vec<usize>,
    pub level: Vec<u8>,
    pub height: Vec<usize>,
    pub depth: Vec<usize>,
    pub width: Vec<usize>,
}

impl Unlocked {
    /// Whether every set of `self` is contained in the matching set of `other`.
    pub fn is_subset_of(&self, other: &Unlocked) -> bool {
        fn sub<T: PartialEq>(a: &[T], b: &[T]) -> bool {
            a.iter().all(|x| b.contains(x))
        }
        sub(&self.resolution, &other.resolution)
            && sub(&self.kernel, &other.kernel)
            && sub(&self.level, &other.level)
            && sub(&self.height, &other.height)
            && sub(&self.depth, &other.depth)
            && sub(&self.width, &other.width)
    }

    /// Number of global choices: the product of the set sizes.
    pub fn cardinality(&self) -> usize {
        self.resolution.len()
            * self.kernel.len()
            * self.level.len()
            * self.height.len()
            * self.depth.len()
            * self.width.len()
    }
}

/// Value sets unlocked once phase `name` runs on `arch`. Level and height
/// stay at their maxima for variants without parallel blocks or exits.
pub fn unlocked_sets(name: PhaseName, arch: &ArchSpec) -> Unlocked {
    let at = |p: PhaseName| name.rank() >= p.rank();
    let kernel = if at(PhaseName::Eks) { vec![3, 5, 7] } else { vec![7] };
    let level = if !arch.parallel_blocks || !at(PhaseName::El1) {
        vec![7]
    } else if at(PhaseName::El2) {
        (1..=7).collect()
    } else {
        vec![3, 5, 6, 7]
    };
    let height = if !arch.early_exits {
        vec![5]
    } else {
        let unlocked = [PhaseName::Eh1, PhaseName::Eh2, PhaseName::Eh3, PhaseName::Eh4]
            .iter()
            .filter(|&&p| at(p))
            .count();
        (5 - unlocked..=5).collect()
    };
    let depth = if at(PhaseName::Ed2) {
        vec![2, 3, 4]
    } else if at(PhaseName::Ed1) {
        vec![3, 4]
    } else {
        vec![4]
    };
    let width = if at(PhaseName::Ew2) {
        vec![3, 4, 6]
    } else if at(PhaseName::Ew1) {
        vec![4, 6]
    } else {
        vec![6]
    };
    Unlocked {
        resolution: RESOLUTIONS.to_vec(),
        kernel,
        level,
        height,
        depth,
        width,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub name: PhaseName,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub n_subnets_per_step: usize,
    pub unlocked: Unlocked,
}

impl PhaseSpec {
    pub fn new(name: PhaseName, arch: &ArchSpec, hyper: PhaseHyper) -> Self {
        Self {
            name,
            lr: hyper.lr,
            epochs: hyper.epochs,
            warmup_epochs: hyper.warmup_epochs,
            n_subnets_per_step: hyper.n_subnets_per_step,
            unlocked: unlocked_sets(name, arch),
        }
    }

    pub fn hyper(&self) -> PhaseHyper {
        PhaseHyper {
            lr: self.lr,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            n_subnets_per_step: self.n_subnets_per_step,
        }
    }
}

/// Phases run for `arch`, in order, with the reference hyperparameters.
pub fn phase_sequence(arch: &ArchSpec) -> Vec<PhaseSpec> {
    PhaseName::ALL
        .iter()
        .filter(|p| p.applies_to(arch))
        .map(|&p| PhaseSpec::new(p, arch, default_hyper(p)))
        .collect()
}

/// Every global choice of the phase, lexicographic over (resolution, kernel,
/// level, height, depth, width). The full-network phase keeps only the
/// maximal choice at each resolution.
pub fn enumerate_space(phase: &PhaseSpec) -> Vec<GlobalChoice> {
    let u = &phase.unlocked;
    let mut out = Vec::with_capacity(u.cardinality());
    for &resolution in &u.resolution {
        for &kernel in &u.kernel {
            for &level in &u.level {
                for &height in &u.height {
                    for &depth in &u.depth {
                        for &expansion in &u.width {
                            out.push(GlobalChoice {
                                resolution,
                                kernel,
                                level,
                                height,
                                depth,
                                expansion,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Subnet configs of [`enumerate_space`].
pub fn enumerate_configs(phase: &PhaseSpec, arch: &ArchSpec) -> Vec<SubnetConfig> {
    enumerate_space(phase)
        .into_iter()
        .map(|g| SubnetConfig::uniform(arch, g))
        .collect()
}

fn pick<T: Copy>(set: &[T], rng: &mut ChaCha8Rng) -> Result<T> {
    set.choose(rng)
        .copied()
        .ok_or_else(|| Error::Internal("empty unlocked set".into()))
}

/// Uniform sample from the phase space at a fixed resolution. With
/// `per_slot`, kernel, width and level are drawn per block and depth per
/// stage; otherwise one value per dimension is shared by the whole net.
pub fn sample_config(
    unlocked: &Unlocked,
    arch: &ArchSpec,
    resolution: usize,
    per_slot: bool,
    rng: &mut ChaCha8Rng,
) -> Result<SubnetConfig> {
    if !per_slot {
        let g = GlobalChoice {
            resolution,
            kernel: pick(&unlocked.kernel, rng)?,
            level: pick(&unlocked.level, rng)?,
            height: pick(&unlocked.height, rng)?,
            depth: pick(&unlocked.depth, rng)?,
            expansion: pick(&unlocked.width, rng)?,
        };
        return Ok(SubnetConfig::uniform(arch, g));
    }
    let height = pick(&unlocked.height, rng)?;
    let mut stages = Vec::with_capacity(arch.n_stages());
    for s in &arch.stages {
        let depth = pick(&unlocked.depth, rng)?;
        let mut blocks = Vec::with_capacity(s.n_blocks);
        for _ in 0..s.n_blocks {
            blocks.push(BlockChoice {
                kernel: pick(&unlocked.kernel, rng)?,
                expansion: pick(&unlocked.width, rng)?,
                level_mask: pick(&unlocked.level, rng)?,
            });
        }
        stages.push(StageChoice { depth, blocks });
    }
    Ok(SubnetConfig {
        resolution,
        height,
        stages,
    })
}

/// Linear warmup from `lr / 100` to `lr`, then cosine annealing to 0,
/// indexed by iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_iters: usize,
    pub total_iters: usize,
}

impl LrSchedule {
    pub fn new(base: f64, warmup_epochs: usize, epochs: usize, iters_per_epoch: usize) -> Self {
        Self {
            base,
            warmup_iters: warmup_epochs.min(epochs) * iters_per_epoch,
            total_iters: epochs * iters_per_epoch,
        }
    }

    /// Schedule over `total_iters` whose first `warmup_fraction` of
    /// iterations (rounded) warm up.
    pub fn with_warmup_fraction(base: f64, warmup_fraction: f64, total_iters: usize) -> Self {
        Self {
            base,
            warmup_iters: ((total_iters as f64 * warmup_fraction).round() as usize).min(total_iters),
            total_iters,
        }
    }

    pub fn lr_at(&self, t: usize) -> f64 {
        let start = self.base / 100.0;
        if t < self.warmup_iters {
            return start + (self.base - start) * t as f64 / self.warmup_iters as f64;
        }
        let span = self.total_iters.saturating_sub(self.warmup_iters).max(1);
        let progress = ((t - self.warmup_iters) as f64 / span as f64).min(1.0);
        0.5 * self.base * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Per-step statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Mean loss over the sampled subnets.
    pub loss: f32,
    pub resolution: usize,
    pub configs: Vec<SubnetConfig>,
}

/// Adds the gradients of each config's student loss on `batch` to the
/// store and applies the batch-norm running-stat updates. Returns the loss
/// of every config.
pub fn accumulate_gradients(
    net: &mut Supernet,
    batch: &Tensor,
    labels: &[usize],
    configs: &[SubnetConfig],
    soft: Option<&Tensor>,
    kd: &KdConfig,
) -> Result<Vec<f32>> {
    let mut losses = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut tape = Tape::new(true);
        let x = tape.constant(batch.clone_value());
        let out = net.forward(&mut tape, x, cfg)?;
        let loss = student_loss(&mut tape, &out.logits, labels, soft, kd)?;
        losses.push(tape.value(loss).data()[0]);
        tape.backward(loss, &mut net.store)?;
        let updates = tape.take_bn_updates();
        net.store.apply_bn_updates(&updates);
    }
    Ok(losses)
}

/// Everything a train step needs besides the network and the data.
pub struct StepContext<'a> {
    pub phase: &'a PhaseSpec,
    pub kd: &'a KdConfig,
    /// Soft labels are computed on the resized batch.
    pub teacher: Option<&'a crate::distill::Teacher>,
    pub per_slot: bool,
}

/// One optimizer update: draws a resolution for the batch, samples
/// `max(1, n_subnets_per_step)` configs (the maximal one in the full-network
/// phase), accumulates their gradients and steps the optimizer once.
pub fn train_step(
    net: &mut Supernet,
    opt: &mut Sgd,
    batch: &Tensor,
    labels: &[usize],
    ctx: &StepContext<'_>,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let u = &ctx.phase.unlocked;
    let resolution = pick(&u.resolution, rng)?;
    let x = resize_batch(batch, resolution)?;
    let n = ctx.phase.n_subnets_per_step.max(1);
    let mut configs = Vec::with_capacity(n);
    for _ in 0..n {
        configs.push(if ctx.phase.name == PhaseName::Full {
            SubnetConfig::maximal(&net.arch, resolution)
        } else {
            sample_config(u, &net.arch, resolution, ctx.per_slot, rng)?
        });
    }
    let soft = match ctx.teacher {
        Some(t) if ctx.kd.kd_ratio > 0.0 => t.soft_labels(&x, ctx.kd)?,
        _ => None,
    };
    net.store.zero_grad();
    let losses = accumulate_gradients(net, &x, labels, &configs, soft.as_ref(), ctx.kd)?;
    opt.step(&mut net.store, lr as f32);
    let loss = losses.iter().sum::<f32>() / losses.len() as f32;
    Ok(StepStats {
        loss,
        resolution,
        configs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Variant;

    #[test]
    fn names_round_trip() {
        for p in PhaseName::ALL {
            assert_eq!(p.as_str().parse::<PhaseName>().unwrap(), p);
            let j = serde_json::to_string(&p).unwrap();
            assert_eq!(j, format!("\"{}\"", p.as_str()));
        }
    }

    #[test]
    fn lr_endpoints() {
        let s = LrSchedule::new(0.1, 1, 3, 10);
        assert!((s.lr_at(0) - 0.001).abs() < 1e-12);
        assert!((s.lr_at(10) - 0.1).abs() < 1e-12);
        assert!(s.lr_at(29) < 0.001);
    }

    #[test]
    fn height_unlocks_only_with_exits() {
        let se = ArchSpec::new(Variant::SeDp, 1.0, 10);
        assert_eq!(unlocked_sets(PhaseName::Ew2, &se).height, vec![5]);
        let ee = ArchSpec::new(Variant::EeB, 1.0, 10);
        assert_eq!(unlocked_sets(PhaseName::Eh1, &ee).height, vec![4, 5]);
        assert_eq!(unlocked_sets(PhaseName::Eh1, &ee).level, vec![7]);
    }
}
