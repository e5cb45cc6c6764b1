//! Concrete topology of one subnet: which blocks run, with which widths and
//! kernels, and under which tensor names their effective weights live.
//!
//! A plan is what an extracted standalone network is made of, and it is also
//! what the supernet executes for a given [`SubnetConfig`].

use serde::{Deserialize, Serialize};

use crate::arch::{Activation, ArchSpec, SubnetConfig, LEVEL_LIGHT, LEVEL_MB, LEVEL_POINTWISE, MAX_EXPANSION};
use crate::error::Result;
use crate::layers::se_reduce_width;

/// Inverted-bottleneck block (with or without residual).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MbPlan {
    pub prefix: String,
    pub stage: Option<usize>,
    pub in_channels: usize,
    pub hidden: usize,
    /// Hidden width of the maximal block in the supernet.
    pub max_hidden: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
    pub expand: bool,
    /// SE bottleneck width, when the block has SE.
    pub se_reduce: Option<usize>,
    pub residual: bool,
    /// Whether the supernet derives this block's weights elastically.
    pub elastic: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BlockPlan {
    Mb(MbPlan),
    /// Pointwise conv, BN, activation.
    Pointwise {
        prefix: String,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        activation: Activation,
    },
    /// Optional max-pool and channel-raising pointwise conv, then BN and activation.
    Light {
        prefix: String,
        in_channels: usize,
        out_channels: usize,
        downsample: bool,
        project: bool,
        activation: Activation,
    },
}

impl BlockPlan {
    pub fn prefix(&self) -> &str {
        match self {
            BlockPlan::Mb(m) => &m.prefix,
            BlockPlan::Pointwise { prefix, .. } | BlockPlan::Light { prefix, .. } => prefix,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelPlan {
    pub index: usize,
    /// Active blocks only; the level output is their mean.
    pub blocks: Vec<BlockPlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub index: usize,
    pub dense_skips: bool,
    pub levels: Vec<LevelPlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ExitKind {
    /// GAP, pointwise to the final width with hswish, classifier.
    Early { final_width: usize },
    /// Pointwise to the tail width with BN and hswish, GAP, pointwise to the
    /// final width with hswish, classifier.
    Tail { tail_width: usize, final_width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitPlan {
    pub prefix: String,
    /// Zero-based stage after which the exit is attached.
    pub after_stage: usize,
    pub in_channels: usize,
    pub kind: ExitKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetPlan {
    pub n_classes: usize,
    pub resolution: usize,
    pub head_channels: usize,
    pub head_block: MbPlan,
    pub stages: Vec<StagePlan>,
    pub exits: Vec<ExitPlan>,
}

pub fn stage_prefix(s: usize) -> String {
    format!("s{}", s + 1)
}

pub fn block_prefix(s: usize, level: usize) -> String {
    format!("s{}.l{}", s + 1, level)
}

pub fn exit_prefix(arch: &ArchSpec, s: usize) -> String {
    if s + 1 == arch.n_stages() {
        "tail".to_string()
    } else {
        format!("exit{}", s + 1)
    }
}

/// MB block for slot `(s, level)` at a given kernel/expansion.
pub fn mb_plan(arch: &ArchSpec, s: usize, level: usize, kernel: usize, expansion: usize) -> MbPlan {
    let spec = &arch.stages[s];
    let in_channels = if level == 0 { arch.stage_in(s) } else { arch.stage_out(s) };
    let out_channels = arch.stage_out(s);
    let stride = if level == 0 { spec.stride } else { 1 };
    let hidden = arch.hidden_width(s, expansion);
    MbPlan {
        prefix: format!("{}.mb", block_prefix(s, level)),
        stage: Some(s),
        in_channels,
        hidden,
        max_hidden: arch.hidden_width(s, MAX_EXPANSION),
        out_channels,
        kernel,
        stride,
        activation: spec.activation,
        expand: true,
        se_reduce: spec.se.then(|| se_reduce_width(hidden)),
        residual: stride == 1 && in_channels == out_channels,
        elastic: true,
    }
}

pub fn head_block(arch: &ArchSpec) -> MbPlan {
    let c = arch.channels(arch.head_channels);
    MbPlan {
        prefix: "head.mb".to_string(),
        stage: None,
        in_channels: c,
        hidden: c,
        max_hidden: c,
        out_channels: c,
        kernel: 3,
        stride: 1,
        activation: Activation::Relu,
        expand: false,
        se_reduce: None,
        residual: true,
        elastic: false,
    }
}

pub fn pointwise_block(arch: &ArchSpec, s: usize, level: usize) -> BlockPlan {
    let spec = &arch.stages[s];
    BlockPlan::Pointwise {
        prefix: format!("{}.pw", block_prefix(s, level)),
        in_channels: if level == 0 { arch.stage_in(s) } else { arch.stage_out(s) },
        out_channels: arch.stage_out(s),
        stride: if level == 0 { spec.stride } else { 1 },
        activation: spec.activation,
    }
}

pub fn light_block(arch: &ArchSpec, s: usize, level: usize) -> BlockPlan {
    let spec = &arch.stages[s];
    let in_channels = if level == 0 { arch.stage_in(s) } else { arch.stage_out(s) };
    let out_channels = arch.stage_out(s);
    BlockPlan::Light {
        prefix: format!("{}.light", block_prefix(s, level)),
        in_channels,
        out_channels,
        downsample: level == 0 && spec.stride == 2,
        project: in_channels != out_channels,
        activation: spec.activation,
    }
}

pub fn exit_plan(arch: &ArchSpec, s: usize) -> ExitPlan {
    let final_width = arch.channels(arch.final_channels);
    let kind = if s + 1 == arch.n_stages() {
        ExitKind::Tail {
            tail_width: arch.channels(arch.tail_channels),
            final_width,
        }
    } else {
        ExitKind::Early { final_width }
    };
    ExitPlan {
        prefix: exit_prefix(arch, s),
        after_stage: s,
        in_channels: arch.stage_out(s),
        kind,
    }
}

impl NetPlan {
    pub fn new(arch: &ArchSpec, cfg: &SubnetConfig) -> Result<Self> {
        arch.validate()?;
        cfg.validate(arch)?;
        let height = cfg.effective_height(arch);
        let mut stages = Vec::with_capacity(height);
        for s in 0..height {
            let depth = cfg.effective_depth(arch, s);
            let mut levels = Vec::with_capacity(depth);
            for level in 0..depth {
                let choice = cfg.stages[s].blocks[level];
                let mask = if arch.parallel_blocks { choice.level_mask } else { LEVEL_MB };
                let mut blocks = Vec::new();
                if mask & LEVEL_MB != 0 {
                    blocks.push(BlockPlan::Mb(mb_plan(arch, s, level, choice.kernel, choice.expansion)));
                }
                if mask & LEVEL_POINTWISE != 0 {
                    blocks.push(pointwise_block(arch, s, level));
                }
                if mask & LEVEL_LIGHT != 0 {
                    blocks.push(light_block(arch, s, level));
                }
                levels.push(LevelPlan { index: level, blocks });
            }
            stages.push(StagePlan {
                index: s,
                dense_skips: arch.dense_skips,
                levels,
            });
        }
        let exits = if arch.early_exits {
            (0..height).map(|s| exit_plan(arch, s)).collect()
        } else {
            vec![exit_plan(arch, arch.n_stages() - 1)]
        };
        Ok(Self {
            n_classes: arch.n_classes,
            resolution: cfg.resolution,
            head_channels: arch.channels(arch.head_channels),
            head_block: head_block(arch),
            stages,
            exits,
        })
    }

    /// Stage block plans in execution order (the head block is separate).
    pub fn blocks(&self) -> impl Iterator<Item = &BlockPlan> {
        self.stages
            .iter()
            .flat_map(|s| s.levels.iter().flat_map(|l| l.blocks.iter()))
    }
}
