//! Analytic parameter and multiply-accumulate counts of a subnet, computed
//! from the architecture alone.
//!
//! Parameters count convolution and linear weights, biases, SE layers and two
//! affine values per batch-norm channel. MACs count convolutions and linear
//! layers; batch norm, pooling and additions are free.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, SubnetConfig};
use crate::error::Result;
use crate::plan::{BlockPlan, ExitKind, MbPlan, NetPlan};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        self.params += o.params;
        self.macs += o.macs;
    }
}

fn conv(c_in: usize, c_out: usize, k: usize, groups: usize, out_hw: usize) -> Cost {
    let w = (c_out * (c_in / groups) * k * k) as u64;
    Cost {
        params: w,
        macs: w * (out_hw * out_hw) as u64,
    }
}

fn bn(c: usize) -> Cost {
    Cost {
        params: 2 * c as u64,
        macs: 0,
    }
}

fn linear(inp: usize, out: usize, bias: bool) -> Cost {
    let w = (inp * out) as u64;
    Cost {
        params: w + if bias { out as u64 } else { 0 },
        macs: w,
    }
}

fn down(hw: usize, stride: usize) -> usize {
    if stride == 2 {
        hw.div_ceil(2)
    } else {
        hw
    }
}

fn mb(m: &MbPlan, hw_in: usize) -> (Cost, usize) {
    let mut c = Cost::default();
    if m.expand {
        c += conv(m.in_channels, m.hidden, 1, 1, hw_in);
        c += bn(m.hidden);
    }
    let hw = down(hw_in, m.stride);
    c += conv(m.hidden, m.hidden, m.kernel, m.hidden, hw);
    c += bn(m.hidden);
    if let Some(r) = m.se_reduce {
        c += linear(m.hidden, r, true);
        c += linear(r, m.hidden, true);
    }
    c += conv(m.hidden, m.out_channels, 1, 1, hw);
    c += bn(m.out_channels);
    (c, hw)
}

fn block(b: &BlockPlan, hw_in: usize) -> (Cost, usize) {
    match b {
        BlockPlan::Mb(m) => mb(m, hw_in),
        BlockPlan::Pointwise {
            in_channels,
            out_channels,
            stride,
            ..
        } => {
            let hw = down(hw_in, *stride);
            let mut c = conv(*in_channels, *out_channels, 1, 1, hw);
            c += bn(*out_channels);
            (c, hw)
        }
        BlockPlan::Light {
            in_channels,
            out_channels,
            downsample,
            project,
            ..
        } => {
            let hw = if *downsample { hw_in.div_ceil(2) } else { hw_in };
            let mut c = bn(*out_channels);
            if *project {
                c += conv(*in_channels, *out_channels, 1, 1, hw);
            }
            (c, hw)
        }
    }
}

/// Cost of an executable plan.
pub fn plan_cost(plan: &NetPlan, n_classes: usize) -> Cost {
    let mut total = Cost::default();
    let mut hw = plan.resolution.div_ceil(2);
    total += conv(3, plan.head_channels, 3, 1, hw);
    total += bn(plan.head_channels);
    let (c, _) = mb(&plan.head_block, hw);
    total += c;
    for stage in &plan.stages {
        for level in &stage.levels {
            let mut out_hw = hw;
            for b in &level.blocks {
                let (c, o) = block(b, hw);
                total += c;
                out_hw = o;
            }
            hw = out_hw;
        }
        for e in plan.exits.iter().filter(|e| e.after_stage == stage.index) {
            let (fc_in, final_width) = match e.kind {
                ExitKind::Early { final_width } => (e.in_channels, final_width),
                ExitKind::Tail { tail_width, final_width } => {
                    total += conv(e.in_channels, tail_width, 1, 1, hw);
                    total += bn(tail_width);
                    (tail_width, final_width)
                }
            };
            total += linear(fc_in, final_width, false);
            total += linear(final_width, n_classes, true);
        }
    }
    total
}

/// Cost of subnet `cfg` of `arch`.
pub fn subnet_cost(arch: &ArchSpec, cfg: &SubnetConfig) -> Result<Cost> {
    let plan = NetPlan::new(arch, cfg)?;
    Ok(plan_cost(&plan, arch.n_classes))
}
