//! Static description of a supernet variant and of one point in its elastic
//! space.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::round_up_8;

pub const ARCH_VERSION: u32 = 1;

pub const RESOLUTIONS: [usize; 3] = [48, 56, 64];
pub const KERNEL_SIZES: [usize; 3] = [3, 5, 7];
pub const EXPANSIONS: [usize; 3] = [3, 4, 6];
pub const DEPTHS: [usize; 3] = [2, 3, 4];
pub const MAX_KERNEL: usize = 7;
pub const MAX_EXPANSION: usize = 6;
pub const MAX_DEPTH: usize = 4;
pub const MAX_HEIGHT: usize = 5;

/// Level-mask bits: which of the three parallel blocks of a level are active.
pub const LEVEL_MB: u8 = 0b001;
pub const LEVEL_POINTWISE: u8 = 0b010;
pub const LEVEL_LIGHT: u8 = 0b100;
pub const LEVEL_ALL: u8 = 0b111;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Hswish,
}

/// One stage of the macro-architecture, with widths before the multiplier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub out_channels: usize,
    pub stride: usize,
    pub activation: Activation,
    pub se: bool,
    pub n_blocks: usize,
}

/// The eight supported combinations of structural flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "SE_B")]
    SeB,
    #[serde(rename = "SE_D")]
    SeD,
    #[serde(rename = "SE_P")]
    SeP,
    #[serde(rename = "SE_DP")]
    SeDp,
    #[serde(rename = "EE_B")]
    EeB,
    #[serde(rename = "EE_D")]
    EeD,
    #[serde(rename = "EE_P")]
    EeP,
    #[serde(rename = "EE_DP")]
    EeDp,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::SeB,
        Variant::SeD,
        Variant::SeP,
        Variant::SeDp,
        Variant::EeB,
        Variant::EeD,
        Variant::EeP,
        Variant::EeDp,
    ];

    /// `(early_exits, dense_skips, parallel_blocks)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Variant::SeB => (false, false, false),
            Variant::SeD => (false, true, false),
            Variant::SeP => (false, false, true),
            Variant::SeDp => (false, true, true),
            Variant::EeB => (true, false, false),
            Variant::EeD => (true, true, false),
            Variant::EeP => (true, false, true),
            Variant::EeDp => (true, true, true),
        }
    }

    pub fn from_flags(early_exits: bool, dense_skips: bool, parallel_blocks: bool) -> Self {
        *Self::ALL
            .iter()
            .find(|v| v.flags() == (early_exits, dense_skips, parallel_blocks))
            .expect("all eight flag combinations are variants")
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::SeB => "SE_B",
            Variant::SeD => "SE_D",
            Variant::SeP => "SE_P",
            Variant::SeDp => "SE_DP",
            Variant::EeB => "EE_B",
            Variant::EeD => "EE_D",
            Variant::EeP => "EE_P",
            Variant::EeDp => "EE_DP",
        }
    }

    /// Network name as used in result tables; the baseline keeps its
    /// original name.
    pub fn network_name(self) -> String {
        match self {
            Variant::SeB => "OFA_MBV3".to_string(),
            v => format!("{}_OFA_MBV3", v.short_name()),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        Self::ALL
            .iter()
            .copied()
            .find(|v| t == v.short_name() || t == v.network_name())
            .ok_or_else(|| Error::Arch(format!("unknown network variant {s:?}")))
    }
}

fn default_version() -> u32 {
    ARCH_VERSION
}

/// Static description of a supernet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    #[serde(default = "default_version")]
    pub arch_version: u32,
    pub width_multiplier: f64,
    pub dense_skips: bool,
    pub parallel_blocks: bool,
    pub early_exits: bool,
    pub n_classes: usize,
    pub head_channels: usize,
    pub tail_channels: usize,
    pub final_channels: usize,
    pub stages: Vec<StageSpec>,
}

fn stage(out_channels: usize, stride: usize, activation: Activation, se: bool) -> StageSpec {
    StageSpec {
        out_channels,
        stride,
        activation,
        se,
        n_blocks: 4,
    }
}

impl ArchSpec {
    /// The MobileNetV3-style macro-architecture with the variant's flags.
    pub fn new(variant: Variant, width_multiplier: f64, n_classes: usize) -> Self {
        use Activation::*;
        let (early_exits, dense_skips, parallel_blocks) = variant.flags();
        Self {
            arch_version: ARCH_VERSION,
            width_multiplier,
            dense_skips,
            parallel_blocks,
            early_exits,
            n_classes,
            head_channels: 16,
            tail_channels: 960,
            final_channels: 1280,
            stages: vec![
                stage(24, 2, Relu, false),
                stage(40, 2, Relu, true),
                stage(80, 2, Hswish, false),
                stage(112, 1, Hswish, true),
                stage(160, 2, Hswish, true),
            ],
        }
    }

    /// Reduced stage table for fast structural tests: `n_stages` stages of
    /// `n_blocks` blocks, `width`-channel outputs, small head and tail.
    pub fn miniature(variant: Variant, n_stages: usize, n_blocks: usize, width: usize, n_classes: usize) -> Self {
        let (early_exits, dense_skips, parallel_blocks) = variant.flags();
        let stages = (0..n_stages)
            .map(|i| StageSpec {
                out_channels: width,
                stride: if i % 2 == 0 { 2 } else { 1 },
                activation: if i % 2 == 0 {
                    Activation::Relu
                } else {
                    Activation::Hswish
                },
                se: i % 2 == 1,
                n_blocks,
            })
            .collect();
        Self {
            arch_version: ARCH_VERSION,
            width_multiplier: 1.0,
            dense_skips,
            parallel_blocks,
            early_exits,
            n_classes,
            head_channels: width,
            tail_channels: 2 * width,
            final_channels: 2 * width,
            stages,
        }
    }

    pub fn variant(&self) -> Variant {
        Variant::from_flags(self.early_exits, self.dense_skips, self.parallel_blocks)
    }

    pub fn network_name(&self) -> String {
        self.variant().network_name()
    }

    /// Width after applying the multiplier, rounded up to a multiple of 8.
    pub fn channels(&self, base: usize) -> usize {
        round_up_8(base as f64 * self.width_multiplier)
    }

    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_out(&self, s: usize) -> usize {
        self.channels(self.stages[s].out_channels)
    }

    pub fn stage_in(&self, s: usize) -> usize {
        if s == 0 {
            self.channels(self.head_channels)
        } else {
            self.stage_out(s - 1)
        }
    }

    /// Hidden width of an inverted-bottleneck block: out channels × expansion.
    pub fn hidden_width(&self, s: usize, expansion: usize) -> usize {
        self.stage_out(s) * expansion
    }

    pub fn validate(&self) -> Result<()> {
        if self.arch_version != ARCH_VERSION {
            return Err(Error::Arch(format!(
                "unsupported arch_version {} (expected {ARCH_VERSION})",
                self.arch_version
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Arch(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if !(self.width_multiplier == 1.0 || self.width_multiplier == 1.2) {
            return Err(Error::Arch(format!(
                "width multiplier must be 1.0 or 1.2, got {}",
                self.width_multiplier
            )));
        }
        if self.stages.is_empty() || self.stages.len() > MAX_HEIGHT {
            return Err(Error::Arch(format!(
                "expected 1..={MAX_HEIGHT} stages, got {}",
                self.stages.len()
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if !(1..=MAX_DEPTH).contains(&s.n_blocks) {
                return Err(Error::Arch(format!("stage {} has {} blocks", i + 1, s.n_blocks)));
            }
            if !(s.stride == 1 || s.stride == 2) {
                return Err(Error::Arch(format!("stage {} stride {}", i + 1, s.stride)));
            }
            if s.out_channels == 0 {
                return Err(Error::Arch(format!("stage {} has zero width", i + 1)));
            }
        }
        if self.head_channels == 0 || self.tail_channels == 0 || self.final_channels == 0 {
            return Err(Error::Arch("head and tail widths must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Arch(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let arch: ArchSpec = toml::from_str(s).map_err(|e| Error::Arch(e.to_string()))?;
        arch.validate()?;
        Ok(arch)
    }
}

/// Per-block elastic choices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockChoice {
    pub kernel: usize,
    pub expansion: usize,
    pub level_mask: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StageChoice {
    pub depth: usize,
    pub blocks: Vec<BlockChoice>,
}

/// One point of the elastic space.
///
/// Depth and height are clamped to the stage table: a stage with fewer than
/// `depth` blocks runs all of them, and a height above the stage count keeps
/// every stage.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubnetConfig {
    pub resolution: usize,
    pub height: usize,
    pub stages: Vec<StageChoice>,
}

/// One global value per elastic dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlobalChoice {
    pub resolution: usize,
    pub kernel: usize,
    pub level: u8,
    pub height: usize,
    pub depth: usize,
    pub expansion: usize,
}

impl GlobalChoice {
    pub fn maximal(resolution: usize) -> Self {
        Self {
            resolution,
            kernel: MAX_KERNEL,
            level: LEVEL_ALL,
            height: MAX_HEIGHT,
            depth: MAX_DEPTH,
            expansion: MAX_EXPANSION,
        }
    }
}

impl fmt::Display for GlobalChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "r{}-k{}-l{}-n{}-d{}-e{}",
            self.resolution, self.kernel, self.level, self.height, self.depth, self.expansion
        )
    }
}

impl FromStr for GlobalChoice {
    type Err = Error;

    /// Parses the display form, e.g. `r64-k7-l7-n5-d4-e6`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed choice {s:?}; expected e.g. r64-k7-l7-n5-d4-e6"));
        let parts: Vec<&str> = s.trim().split('-').collect();
        let tags = ["r", "k", "l", "n", "d", "e"];
        if parts.len() != tags.len() {
            return Err(bad());
        }
        let mut v = [0usize; 6];
        for ((p, tag), slot) in parts.iter().zip(tags).zip(&mut v) {
            *slot = p.strip_prefix(tag).and_then(|n| n.parse().ok()).ok_or_else(bad)?;
        }
        Ok(Self {
            resolution: v[0],
            kernel: v[1],
            level: u8::try_from(v[2]).map_err(|_| bad())?,
            height: v[3],
            depth: v[4],
            expansion: v[5],
        })
    }
}

impl SubnetConfig {
    pub fn uniform(arch: &ArchSpec, g: GlobalChoice) -> Self {
        let stages = arch
            .stages
            .iter()
            .map(|s| StageChoice {
                depth: g.depth,
                blocks: vec![
                    BlockChoice {
                        kernel: g.kernel,
                        expansion: g.expansion,
                        level_mask: g.level,
                    };
                    s.n_blocks
                ],
            })
            .collect();
        Self {
            resolution: g.resolution,
            height: g.height,
            stages,
        }
    }

    pub fn maximal(arch: &ArchSpec, resolution: usize) -> Self {
        Self::uniform(arch, GlobalChoice::maximal(resolution))
    }

    pub fn effective_height(&self, arch: &ArchSpec) -> usize {
        self.height.min(arch.n_stages())
    }

    pub fn effective_depth(&self, arch: &ArchSpec, s: usize) -> usize {
        self.stages[s].depth.min(arch.stages[s].n_blocks)
    }

    /// Whether block `b` of stage `s` is executed at all.
    pub fn block_active(&self, arch: &ArchSpec, s: usize, b: usize) -> bool {
        s < self.effective_height(arch) && b < self.effective_depth(arch, s)
    }

    pub fn validate(&self, arch: &ArchSpec) -> Result<()> {
        if !RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::Config(format!(
                "resolution {} not in {RESOLUTIONS:?}",
                self.resolution
            )));
        }
        if !(1..=MAX_HEIGHT).contains(&self.height) {
            return Err(Error::Config(format!("height {} not in 1..=5", self.height)));
        }
        if !arch.early_exits && self.height != MAX_HEIGHT {
            return Err(Error::Config(format!(
                "height {} requires early exits; single-exit networks use 5",
                self.height
            )));
        }
        if self.stages.len() != arch.n_stages() {
            return Err(Error::Config(format!(
                "{} stage entries for {} stages",
                self.stages.len(),
                arch.n_stages()
            )));
        }
        for (s, (sc, spec)) in self.stages.iter().zip(&arch.stages).enumerate() {
            if !DEPTHS.contains(&sc.depth) {
                return Err(Error::Config(format!("stage {} depth {} not in {DEPTHS:?}", s + 1, sc.depth)));
            }
            if sc.blocks.len() != spec.n_blocks {
                return Err(Error::Config(format!(
                    "stage {} has {} block entries for {} blocks",
                    s + 1,
                    sc.blocks.len(),
                    spec.n_blocks
                )));
            }
            for (b, bc) in sc.blocks.iter().enumerate() {
                if !KERNEL_SIZES.contains(&bc.kernel) {
                    return Err(Error::Config(format!(
                        "stage {} block {} kernel {} not in {KERNEL_SIZES:?}",
                        s + 1,
                        b + 1,
                        bc.kernel
                    )));
                }
                if !EXPANSIONS.contains(&bc.expansion) {
                    return Err(Error::Config(format!(
                        "stage {} block {} expansion {} not in {EXPANSIONS:?}",
                        s + 1,
                        b + 1,
                        bc.expansion
                    )));
                }
                if bc.level_mask == 0 || bc.level_mask > LEVEL_ALL {
                    return Err(Error::Config(format!(
                        "stage {} block {} level mask {} not in 1..=7",
                        s + 1,
                        b + 1,
                        bc.level_mask
                    )));
                }
                if !arch.parallel_blocks && bc.level_mask != LEVEL_ALL {
                    return Err(Error::Config(format!(
                        "level mask {} requires parallel blocks",
                        bc.level_mask
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_are_a_bijection() {
        let mut seen = std::collections::BTreeSet::new();
        for v in Variant::ALL {
            assert!(seen.insert(v.network_name()));
            assert_eq!(v.short_name().parse::<Variant>().unwrap(), v);
            assert_eq!(v.network_name().parse::<Variant>().unwrap(), v);
            let (e, d, p) = v.flags();
            assert_eq!(Variant::from_flags(e, d, p), v);
            let prefix = if e { "EE_" } else { "SE_" };
            assert!(v.short_name().starts_with(prefix));
        }
        assert_eq!(seen.len(), 8);
        assert_eq!(Variant::SeB.network_name(), "OFA_MBV3");
        assert_eq!(Variant::EeDp.network_name(), "EE_DP_OFA_MBV3");
        assert!("EE_X".parse::<Variant>().is_err());
    }

    #[test]
    fn width_multiplier_rounds_up_to_eight() {
        let arch = ArchSpec::new(Variant::SeB, 1.2, 10);
        let outs: Vec<_> = (0..5).map(|s| arch.stage_out(s)).collect();
        assert_eq!(outs, vec![32, 48, 96, 136, 192]);
        assert_eq!(arch.channels(16), 24);
        assert_eq!(arch.channels(960), 1152);
        assert_eq!(arch.channels(1280), 1536);

        let base = ArchSpec::new(Variant::SeB, 1.0, 10);
        let outs: Vec<_> = (0..5).map(|s| base.stage_out(s)).collect();
        assert_eq!(outs, vec![24, 40, 80, 112, 160]);
    }

    #[test]
    fn arch_toml_round_trip_carries_version() {
        let arch = ArchSpec::new(Variant::EeDp, 1.2, 200);
        let text = arch.to_toml().unwrap();
        assert!(text.contains("arch_version = 1"));
        assert_eq!(ArchSpec::from_toml(&text).unwrap(), arch);
        let bad = text.replace("arch_version = 1", "arch_version = 2");
        assert!(ArchSpec::from_toml(&bad).is_err());
    }

    #[test]
    fn config_validation_rejects_variant_mismatch() {
        let se = ArchSpec::new(Variant::SeB, 1.0, 10);
        let mut cfg = SubnetConfig::maximal(&se, 64);
        cfg.validate(&se).unwrap();
        cfg.height = 3;
        assert!(cfg.validate(&se).is_err());

        let mut cfg = SubnetConfig::maximal(&se, 64);
        cfg.stages[1].blocks[2].level_mask = 3;
        assert!(cfg.validate(&se).is_err());

        let p = ArchSpec::new(Variant::SeP, 1.0, 10);
        let mut cfg = SubnetConfig::maximal(&p, 64);
        cfg.stages[1].blocks[2].level_mask = 3;
        cfg.validate(&p).unwrap();
        cfg.stages[1].blocks[2].level_mask = 0;
        assert!(cfg.validate(&p).is_err());

        let mut cfg = SubnetConfig::maximal(&se, 60);
        assert!(cfg.validate(&se).is_err());
        cfg.resolution = 48;
        cfg.stages[0].blocks[0].kernel = 4;
        assert!(cfg.validate(&se).is_err());
    }
}
