//! Executes a [`NetPlan`] on a tape, drawing weights from a [`WeightSource`].

use crate::arch::Activation;
use crate::autograd::{BnInput, Tape, Var};
use crate::error::Result;
use crate::layers;
use crate::plan::{BlockPlan, ExitKind, ExitPlan, LevelPlan, MbPlan, NetPlan};

/// Effective weights of one inverted-bottleneck block.
pub struct MbWeights {
    pub expand: Option<(Var, BnInput)>,
    pub depthwise: (Var, BnInput),
    /// `(reduce_w, reduce_b, expand_w, expand_b)`.
    pub se: Option<(Var, Var, Var, Var)>,
    pub project: (Var, BnInput),
}

/// Supplies effective tensors by name.
pub trait WeightSource {
    fn weight(&self, tape: &mut Tape, key: &str) -> Result<Var>;
    /// Batch norm whose tensors live under `prefix.{gamma,beta,mean,var}`.
    fn bn(&self, tape: &mut Tape, prefix: &str) -> Result<BnInput>;
    fn mb(&self, tape: &mut Tape, block: &MbPlan) -> Result<MbWeights>;
}

pub struct ForwardOutput {
    /// Logits `[batch, n_classes]` for every produced exit, shallowest first.
    pub logits: Vec<Var>,
    /// Prefixes of every executed block and exit, in order.
    pub executed: Vec<String>,
}

fn act(tape: &mut Tape, a: Activation, x: Var) -> Var {
    match a {
        Activation::Relu => tape.relu(x),
        Activation::Hswish => tape.hswish(x),
    }
}

pub fn run_mb(tape: &mut Tape, m: &MbPlan, w: MbWeights, x: Var) -> Result<Var> {
    let mut h = x;
    if let Some((ew, ebn)) = w.expand {
        h = tape.conv2d(h, ew, 1, 0, 1)?;
        h = tape.batch_norm(h, ebn)?;
        h = act(tape, m.activation, h);
    }
    let (dw, dbn) = w.depthwise;
    let k = tape.shape(dw)[2];
    h = tape.conv2d(h, dw, m.stride, (k - 1) / 2, m.hidden)?;
    h = tape.batch_norm(h, dbn)?;
    h = act(tape, m.activation, h);
    if let Some((rw, rb, xw, xb)) = w.se {
        h = layers::squeeze_excitation(tape, h, (rw, rb), (xw, xb))?;
    }
    let (pw, pbn) = w.project;
    h = tape.conv2d(h, pw, 1, 0, 1)?;
    h = tape.batch_norm(h, pbn)?;
    if m.residual {
        h = tape.add(h, x)?;
    }
    Ok(h)
}

pub fn run_block(tape: &mut Tape, src: &dyn WeightSource, b: &BlockPlan, x: Var) -> Result<Var> {
    match b {
        BlockPlan::Mb(m) => {
            let w = src.mb(tape, m)?;
            run_mb(tape, m, w, x)
        }
        BlockPlan::Pointwise {
            prefix,
            stride,
            activation,
            ..
        } => {
            let w = src.weight(tape, &format!("{prefix}.conv.w"))?;
            let bn = src.bn(tape, &format!("{prefix}.bn"))?;
            let h = tape.conv2d(x, w, *stride, 0, 1)?;
            let h = tape.batch_norm(h, bn)?;
            Ok(act(tape, *activation, h))
        }
        BlockPlan::Light {
            prefix,
            downsample,
            project,
            activation,
            ..
        } => {
            let mut h = x;
            if *downsample {
                h = tape.max_pool2(h)?;
            }
            if *project {
                let w = src.weight(tape, &format!("{prefix}.conv.w"))?;
                h = tape.conv2d(h, w, 1, 0, 1)?;
            }
            let bn = src.bn(tape, &format!("{prefix}.bn"))?;
            h = tape.batch_norm(h, bn)?;
            Ok(act(tape, *activation, h))
        }
    }
}

fn run_exit(tape: &mut Tape, src: &dyn WeightSource, e: &ExitPlan, x: Var) -> Result<Var> {
    let p = &e.prefix;
    let pooled = match e.kind {
        ExitKind::Early { .. } => tape.global_avg_pool(x)?,
        ExitKind::Tail { .. } => {
            let w = src.weight(tape, &format!("{p}.conv.w"))?;
            let bn = src.bn(tape, &format!("{p}.bn"))?;
            let h = tape.conv2d(x, w, 1, 0, 1)?;
            let h = tape.batch_norm(h, bn)?;
            let h = tape.hswish(h);
            tape.global_avg_pool(h)?
        }
    };
    let fc1 = src.weight(tape, &format!("{p}.fc1.w"))?;
    let h = tape.linear(pooled, fc1, None)?;
    let h = tape.hswish(h);
    let cw = src.weight(tape, &format!("{p}.classifier.w"))?;
    let cb = src.weight(tape, &format!("{p}.classifier.b"))?;
    tape.linear(h, cw, Some(cb))
}

/// Mean of the level's active blocks applied to `x`.
pub fn run_level(tape: &mut Tape, src: &dyn WeightSource, level: &LevelPlan, x: Var) -> Result<Var> {
    let mut outs = Vec::with_capacity(level.blocks.len());
    for b in &level.blocks {
        outs.push(run_block(tape, src, b, x)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    let c = 1.0 / outs.len() as f32;
    let terms: Vec<_> = outs.iter().map(|&o| (o, c)).collect();
    tape.lin_comb(&terms)
}

/// Runs `plan` on input `x` (`[batch, 3, r, r]`).
pub fn run(plan: &NetPlan, src: &dyn WeightSource, tape: &mut Tape, x: Var) -> Result<ForwardOutput> {
    let mut executed = Vec::new();
    let w = src.weight(tape, "head.conv.w")?;
    let bn = src.bn(tape, "head.bn")?;
    let mut h = tape.conv2d(x, w, 2, 1, 1)?;
    h = tape.batch_norm(h, bn)?;
    h = tape.hswish(h);
    let hw = src.mb(tape, &plan.head_block)?;
    h = run_mb(tape, &plan.head_block, hw, h)?;
    executed.push(plan.head_block.prefix.clone());

    let mut logits = Vec::new();
    let mut exits = plan.exits.iter().peekable();
    for stage in &plan.stages {
        let mut prev2: Option<Var> = None;
        let mut prev = h;
        for level in &stage.levels {
            let mut y = run_level(tape, src, level, prev)?;
            executed.extend(level.blocks.iter().map(|b| b.prefix().to_string()));
            if stage.dense_skips && level.index >= 2 {
                if let Some(skip) = prev2 {
                    y = tape.add(y, skip)?;
                }
            }
            prev2 = Some(prev);
            prev = y;
        }
        h = prev;
        while let Some(e) = exits.next_if(|e| e.after_stage == stage.index) {
            logits.push(run_exit(tape, src, e, h)?);
            executed.push(e.prefix.clone());
        }
    }
    Ok(ForwardOutput { logits, executed })
}
