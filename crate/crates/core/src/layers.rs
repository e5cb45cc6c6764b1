//! Layer primitives built from tape operations.

use rand::Rng;

use crate::autograd::{BnInput, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Operands of one layer, already resident on a tape.
#[derive(Clone, Debug)]
pub enum LayerParams {
    Conv2d {
        weight: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    },
    BatchNorm(BnInput),
    Linear {
        weight: Var,
        bias: Option<Var>,
    },
    /// Squeeze-and-excitation: pool, reduce FC, ReLU, expand FC, hard-sigmoid gate.
    Se {
        reduce_w: Var,
        reduce_b: Var,
        expand_w: Var,
        expand_b: Var,
    },
}

impl LayerParams {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            LayerParams::Conv2d {
                weight,
                stride,
                padding,
                groups,
            } => tape.conv2d(x, *weight, *stride, *padding, *groups),
            LayerParams::BatchNorm(bn) => tape.batch_norm(x, bn.clone()),
            LayerParams::Linear { weight, bias } => tape.linear(x, *weight, *bias),
            LayerParams::Se {
                reduce_w,
                reduce_b,
                expand_w,
                expand_b,
            } => {
                let pooled = tape.global_avg_pool(x)?;
                let r = tape.linear(pooled, *reduce_w, Some(*reduce_b))?;
                let r = tape.relu(r);
                let e = tape.linear(r, *expand_w, Some(*expand_b))?;
                let gate = tape.hsigmoid(e);
                tape.channel_gate(x, gate)
            }
        }
    }
}

/// "Same" convolution with odd square kernel.
pub fn conv2d(tape: &mut Tape, x: Var, weight: Var, stride: usize, groups: usize) -> Result<Var> {
    let k = tape.shape(weight)[2];
    tape.conv2d(x, weight, stride, (k - 1) / 2, groups)
}

pub fn squeeze_excitation(
    tape: &mut Tape,
    x: Var,
    reduce: (Var, Var),
    expand: (Var, Var),
) -> Result<Var> {
    LayerParams::Se {
        reduce_w: reduce.0,
        reduce_b: reduce.1,
        expand_w: expand.0,
        expand_b: expand.1,
    }
    .apply(tape, x)
}

/// Rounds up to the next multiple of 8.
pub fn round_up_8(x: f64) -> usize {
    let v = (x / 8.0).ceil() as usize * 8;
    v.max(8)
}

/// Width of the SE bottleneck for `channels` gated channels (ratio 4).
pub fn se_reduce_width(channels: usize) -> usize {
    round_up_8(channels as f64 / 4.0)
}

/// Convolution weights `[c_out, c_in/groups, k, k]` ~ N(0, 2/fan_out).
pub fn init_conv<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let fan_out = shape[0] * shape[2] * shape[3];
    Tensor::randn(shape, (2.0 / fan_out as f32).sqrt(), rng)
}

/// Linear weights ~ N(0, 0.01²).
pub fn init_linear<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 0.01, rng)
}
