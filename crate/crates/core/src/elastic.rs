//! Weight-sharing transformations: every subnet's effective weights are
//! derived from the supernet's maximal tensors by kernel transformation,
//! L1-ranked channel selection and truncation.

use std::collections::BTreeMap;

use crate::arch::{SubnetConfig, MAX_KERNEL};
use crate::autograd::{BnInput, BnStatTarget, Tape, Var};
use crate::error::{Error, Result};
use crate::exec::{self, ForwardOutput, MbWeights, WeightSource};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::plan::{MbPlan, NetPlan};
use crate::supernet::Supernet;
use crate::tensor::Tensor;

/// Store names of the kernel transformation matrices used by `block_prefix`.
pub fn transform_keys(per_block: bool, block_prefix: &str) -> (String, String) {
    if per_block {
        (
            format!("{block_prefix}.dw.7to5"),
            format!("{block_prefix}.dw.5to3"),
        )
    } else {
        ("transform.7to5".to_string(), "transform.5to3".to_string())
    }
}

/// Kernel transformation on a tape.
///
/// `kernel7` is `[c, 1, 7, 7]`; the 5×5 kernel is the centre crop of the 7×7
/// one, flattened and multiplied by `m75`, and the 3×3 kernel is obtained the
/// same way from the 5×5 result with `m53`.
pub fn transform_kernel_var(tape: &mut Tape, kernel7: Var, m75: Var, m53: Var, target: usize) -> Result<Var> {
    if !matches!(target, 3 | 5 | 7) {
        return Err(Error::Invalid(format!("kernel size {target} not in {{3, 5, 7}}")));
    }
    if target == 7 {
        return Ok(kernel7);
    }
    let shape = tape.shape(kernel7).to_vec();
    let lead: usize = shape[..shape.len() - 2].iter().product();
    let mut lead_shape = shape[..shape.len() - 2].to_vec();
    let mut step = |tape: &mut Tape, k: Var, to: usize, m: Var| -> Result<Var> {
        let crop = tape.center_crop(k, to)?;
        let flat = tape.reshape(crop, &[lead, to * to])?;
        let mixed = tape.linear(flat, m, None)?;
        lead_shape.truncate(shape.len() - 2);
        lead_shape.extend([to, to]);
        tape.reshape(mixed, &lead_shape)
    };
    let k5 = step(tape, kernel7, 5, m75)?;
    if target == 5 {
        return Ok(k5);
    }
    step(tape, k5, 3, m53)
}

/// Tensor-level kernel transformation (see [`transform_kernel_var`]).
pub fn transform_kernel(kernel7: &Tensor, m75: &Tensor, m53: &Tensor, target: usize) -> Result<Tensor> {
    let s = kernel7.shape();
    if s.len() < 2 || s[s.len() - 1] != MAX_KERNEL || s[s.len() - 2] != MAX_KERNEL {
        return Err(Error::Shape(format!("expected [..., 7, 7] kernel, got {s:?}")));
    }
    if m75.shape() != [25, 25] || m53.shape() != [9, 9] {
        return Err(Error::Shape(format!(
            "transform matrices must be 25x25 and 9x9, got {:?} and {:?}",
            m75.shape(),
            m53.shape()
        )));
    }
    let mut tape = Tape::new(false);
    let k = tape.constant(kernel7.clone_value());
    let a = tape.constant(m75.clone_value());
    let b = tape.constant(m53.clone_value());
    let out = transform_kernel_var(&mut tape, k, a, b, target)?;
    Ok(tape.value(out).clone_value())
}

/// Per-channel L1 norm over every axis but the first.
pub fn channel_l1(weight: &Tensor) -> Vec<f64> {
    let c = weight.shape()[0];
    let per = weight.numel() / c;
    weight
        .data()
        .chunks(per)
        .map(|ch| ch.iter().map(|&v| (v as f64).abs()).sum())
        .collect()
}

/// Indices of the `target_count` channels with the largest L1 norm (ties to
/// the lower index), returned in ascending index order.
pub fn select_channels(weight: &Tensor, target_count: usize) -> Result<Vec<usize>> {
    let c = weight.shape()[0];
    if target_count == 0 || target_count > c {
        return Err(Error::Invalid(format!(
            "cannot select {target_count} of {c} channels"
        )));
    }
    Ok(select_by_norms(&channel_l1(weight), target_count))
}

pub(crate) fn select_by_norms(norms: &[f64], target_count: usize) -> Vec<usize> {
    if target_count == norms.len() {
        return (0..norms.len()).collect();
    }
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let mut picked = order[..target_count].to_vec();
    picked.sort_unstable();
    picked
}

/// Draws effective weights for a [`SubnetConfig`] from the supernet's shared
/// maximal tensors.
pub struct SupernetSource<'a> {
    net: &'a Supernet,
    train: bool,
}

impl<'a> SupernetSource<'a> {
    pub fn new(net: &'a Supernet, train: bool) -> Self {
        Self { net, train }
    }

    fn id(&self, key: &str) -> Result<ParamId> {
        self.net
            .store
            .id(key)
            .ok_or_else(|| Error::Internal(format!("supernet has no parameter {key}")))
    }

    fn sliced_bn(&self, tape: &mut Tape, prefix: &str, sel: Option<&[usize]>) -> Result<BnInput> {
        let store = &self.net.store;
        let (g, b) = (self.id(&format!("{prefix}.gamma"))?, self.id(&format!("{prefix}.beta"))?);
        let (m, v) = (self.id(&format!("{prefix}.mean"))?, self.id(&format!("{prefix}.var"))?);
        let mut gamma = tape.param(store, g);
        let mut beta = tape.param(store, b);
        let full_mean = store.get(m).tensor.data();
        let full_var = store.get(v).tensor.data();
        let channels: Vec<usize> = match sel {
            Some(s) => s.to_vec(),
            None => (0..full_mean.len()).collect(),
        };
        if let Some(s) = sel {
            gamma = tape.gather(gamma, 0, s)?;
            beta = tape.gather(beta, 0, s)?;
        }
        Ok(BnInput {
            gamma,
            beta,
            running_mean: channels.iter().map(|&c| full_mean[c]).collect(),
            running_var: channels.iter().map(|&c| full_var[c]).collect(),
            target: self.train.then_some(BnStatTarget {
                mean: m,
                var: v,
                channels,
            }),
        })
    }

    /// Hidden channels used by an elastic block (ascending store indices).
    pub fn hidden_channels(&self, block: &MbPlan) -> Result<Vec<usize>> {
        let key = format!("{}.expand.w", block.prefix);
        let w = &self.net.store.get(self.id(&key)?).tensor;
        select_channels(w, block.hidden)
    }
}

impl WeightSource for SupernetSource<'_> {
    fn weight(&self, tape: &mut Tape, key: &str) -> Result<Var> {
        Ok(tape.param(&self.net.store, self.id(key)?))
    }

    fn bn(&self, tape: &mut Tape, prefix: &str) -> Result<BnInput> {
        self.sliced_bn(tape, prefix, None)
    }

    fn mb(&self, tape: &mut Tape, block: &MbPlan) -> Result<MbWeights> {
        let p = &block.prefix;
        let store = &self.net.store;
        if !block.elastic {
            let dw = self.weight(tape, &format!("{p}.dw.w"))?;
            return Ok(MbWeights {
                expand: None,
                depthwise: (dw, self.bn(tape, &format!("{p}.dw.bn"))?),
                se: None,
                project: (
                    self.weight(tape, &format!("{p}.project.w"))?,
                    self.bn(tape, &format!("{p}.project.bn"))?,
                ),
            });
        }
        let sel_vec = self.hidden_channels(block)?;
        let full = sel_vec.len() == block.max_hidden;
        let sel = (!full).then_some(sel_vec.as_slice());
        let gather0 = |tape: &mut Tape, v: Var| -> Result<Var> {
            match sel {
                Some(s) => tape.gather(v, 0, s),
                None => Ok(v),
            }
        };

        let ew = self.weight(tape, &format!("{p}.expand.w"))?;
        let ew = gather0(tape, ew)?;
        let ebn = self.sliced_bn(tape, &format!("{p}.expand.bn"), sel)?;

        let dw = self.weight(tape, &format!("{p}.dw.w"))?;
        let dw = gather0(tape, dw)?;
        let dw = if block.kernel == MAX_KERNEL {
            dw
        } else {
            let (k75, k53) = transform_keys(self.net.options.per_block_transforms, p);
            let m75 = tape.param(store, self.id(&k75)?);
            let m53 = tape.param(store, self.id(&k53)?);
            transform_kernel_var(tape, dw, m75, m53, block.kernel)?
        };
        let dbn = self.sliced_bn(tape, &format!("{p}.dw.bn"), sel)?;

        let se = match block.se_reduce {
            None => None,
            Some(r) => {
                let rw = self.weight(tape, &format!("{p}.se.reduce.w"))?;
                let rb = self.weight(tape, &format!("{p}.se.reduce.b"))?;
                let xw = self.weight(tape, &format!("{p}.se.expand.w"))?;
                let xb = self.weight(tape, &format!("{p}.se.expand.b"))?;
                let r_max = tape.shape(rw)[0];
                let head: Vec<usize> = (0..r).collect();
                let (rw, rb, xw) = if r == r_max {
                    (rw, rb, xw)
                } else {
                    (
                        tape.gather(rw, 0, &head)?,
                        tape.gather(rb, 0, &head)?,
                        tape.gather(xw, 1, &head)?,
                    )
                };
                let (rw, xw, xb) = match sel {
                    Some(s) => (tape.gather(rw, 1, s)?, tape.gather(xw, 0, s)?, tape.gather(xb, 0, s)?),
                    None => (rw, xw, xb),
                };
                Some((rw, rb, xw, xb))
            }
        };

        let pw = self.weight(tape, &format!("{p}.project.w"))?;
        let pw = match sel {
            Some(s) => tape.gather(pw, 1, s)?,
            None => pw,
        };
        let pbn = self.sliced_bn(tape, &format!("{p}.project.bn"), None)?;
        Ok(MbWeights {
            expand: Some((ew, ebn)),
            depthwise: (dw, dbn),
            se,
            project: (pw, pbn),
        })
    }
}

/// Effective tensors of one elastic block under `cfg`, keyed by their names
/// in the extracted network.
pub fn effective_block_weights(
    net: &Supernet,
    stage: usize,
    level: usize,
    cfg: &SubnetConfig,
) -> Result<BTreeMap<String, Tensor>> {
    cfg.validate(&net.arch)?;
    let choice = cfg
        .stages
        .get(stage)
        .and_then(|s| s.blocks.get(level))
        .ok_or_else(|| Error::Config(format!("no block slot s{}.l{level}", stage + 1)))?;
    let plan = crate::plan::mb_plan(&net.arch, stage, level, choice.kernel, choice.expansion);
    let src = SupernetSource::new(net, false);
    let mut tape = Tape::new(false);
    let w = src.mb(&mut tape, &plan)?;
    let mut out = BTreeMap::new();
    let p = &plan.prefix;
    let put_bn = |out: &mut BTreeMap<String, Tensor>, tape: &Tape, prefix: String, bn: &BnInput| {
        out.insert(format!("{prefix}.gamma"), tape.value(bn.gamma).clone_value());
        out.insert(format!("{prefix}.beta"), tape.value(bn.beta).clone_value());
        let c = bn.running_mean.len();
        out.insert(format!("{prefix}.mean"), Tensor::new(vec![c], bn.running_mean.clone()).expect("len"));
        out.insert(format!("{prefix}.var"), Tensor::new(vec![c], bn.running_var.clone()).expect("len"));
    };
    if let Some((ew, ebn)) = &w.expand {
        out.insert(format!("{p}.expand.w"), tape.value(*ew).clone_value());
        put_bn(&mut out, &tape, format!("{p}.expand.bn"), ebn);
    }
    out.insert(format!("{p}.dw.w"), tape.value(w.depthwise.0).clone_value());
    put_bn(&mut out, &tape, format!("{p}.dw.bn"), &w.depthwise.1);
    if let Some((rw, rb, xw, xb)) = w.se {
        out.insert(format!("{p}.se.reduce.w"), tape.value(rw).clone_value());
        out.insert(format!("{p}.se.reduce.b"), tape.value(rb).clone_value());
        out.insert(format!("{p}.se.expand.w"), tape.value(xw).clone_value());
        out.insert(format!("{p}.se.expand.b"), tape.value(xb).clone_value());
    }
    out.insert(format!("{p}.project.w"), tape.value(w.project.0).clone_value());
    put_bn(&mut out, &tape, format!("{p}.project.bn"), &w.project.1);
    Ok(out)
}

/// A self-contained network: a fixed plan and its own copied weights.
#[derive(Clone, Debug)]
pub struct StandaloneNet {
    pub plan: NetPlan,
    pub store: ParamStore,
}

/// Records every effective tensor a source hands out while executing a plan.
struct Recorder<'a> {
    inner: &'a dyn WeightSource,
    out: std::cell::RefCell<Vec<(String, ParamKind, Var)>>,
    stats: std::cell::RefCell<Vec<(String, Vec<f32>)>>,
}

impl Recorder<'_> {
    fn record_bn(&self, prefix: &str, bn: &BnInput) {
        let mut out = self.out.borrow_mut();
        out.push((format!("{prefix}.gamma"), ParamKind::BnScale, bn.gamma));
        out.push((format!("{prefix}.beta"), ParamKind::BnShift, bn.beta));
        let mut stats = self.stats.borrow_mut();
        stats.push((format!("{prefix}.mean"), bn.running_mean.clone()));
        stats.push((format!("{prefix}.var"), bn.running_var.clone()));
    }
}

fn kind_for(key: &str) -> ParamKind {
    if key.ends_with(".b") {
        ParamKind::Bias
    } else {
        ParamKind::Weight
    }
}

impl WeightSource for Recorder<'_> {
    fn weight(&self, tape: &mut Tape, key: &str) -> Result<Var> {
        let v = self.inner.weight(tape, key)?;
        self.out.borrow_mut().push((key.to_string(), kind_for(key), v));
        Ok(v)
    }

    fn bn(&self, tape: &mut Tape, prefix: &str) -> Result<BnInput> {
        let bn = self.inner.bn(tape, prefix)?;
        self.record_bn(prefix, &bn);
        Ok(bn)
    }

    fn mb(&self, tape: &mut Tape, block: &MbPlan) -> Result<MbWeights> {
        let w = self.inner.mb(tape, block)?;
        let p = &block.prefix;
        if let Some((ew, ebn)) = &w.expand {
            self.out.borrow_mut().push((format!("{p}.expand.w"), ParamKind::Weight, *ew));
            self.record_bn(&format!("{p}.expand.bn"), ebn);
        }
        self.out.borrow_mut().push((format!("{p}.dw.w"), ParamKind::Weight, w.depthwise.0));
        self.record_bn(&format!("{p}.dw.bn"), &w.depthwise.1);
        if let Some((rw, rb, xw, xb)) = w.se {
            let mut out = self.out.borrow_mut();
            out.push((format!("{p}.se.reduce.w"), ParamKind::Weight, rw));
            out.push((format!("{p}.se.reduce.b"), ParamKind::Bias, rb));
            out.push((format!("{p}.se.expand.w"), ParamKind::Weight, xw));
            out.push((format!("{p}.se.expand.b"), ParamKind::Bias, xb));
        }
        self.out.borrow_mut().push((format!("{p}.project.w"), ParamKind::Weight, w.project.0));
        self.record_bn(&format!("{p}.project.bn"), &w.project.1);
        Ok(w)
    }
}

/// Copies the subnet selected by `cfg` out of the supernet.
pub fn extract_subnet(net: &Supernet, cfg: &SubnetConfig) -> Result<StandaloneNet> {
    let plan = NetPlan::new(&net.arch, cfg)?;
    let inner = SupernetSource::new(net, false);
    let rec = Recorder {
        inner: &inner,
        out: Default::default(),
        stats: Default::default(),
    };
    let mut tape = Tape::new(false);
    let r = cfg.resolution;
    let x = tape.constant(Tensor::zeros(&[1, 3, r, r]));
    exec::run(&plan, &rec, &mut tape, x)?;
    let mut store = ParamStore::new();
    for (key, kind, v) in rec.out.into_inner() {
        store.insert(key, kind, tape.value(v).clone_value())?;
    }
    for (key, vals) in rec.stats.into_inner() {
        let n = vals.len();
        store.insert(key, ParamKind::Buffer, Tensor::new(vec![n], vals)?)?;
    }
    Ok(StandaloneNet { plan, store })
}

struct StandaloneSource<'a> {
    net: &'a StandaloneNet,
    train: bool,
}

impl StandaloneSource<'_> {
    fn id(&self, key: &str) -> Result<ParamId> {
        self.net
            .store
            .id(key)
            .ok_or_else(|| Error::Internal(format!("standalone network has no tensor {key}")))
    }
}

impl WeightSource for StandaloneSource<'_> {
    fn weight(&self, tape: &mut Tape, key: &str) -> Result<Var> {
        Ok(tape.param(&self.net.store, self.id(key)?))
    }

    fn bn(&self, tape: &mut Tape, prefix: &str) -> Result<BnInput> {
        let store = &self.net.store;
        let gamma = self.weight(tape, &format!("{prefix}.gamma"))?;
        let beta = self.weight(tape, &format!("{prefix}.beta"))?;
        let (m, v) = (self.id(&format!("{prefix}.mean"))?, self.id(&format!("{prefix}.var"))?);
        let running_mean = store.get(m).tensor.data().to_vec();
        let running_var = store.get(v).tensor.data().to_vec();
        let channels = (0..running_mean.len()).collect();
        Ok(BnInput {
            gamma,
            beta,
            running_mean,
            running_var,
            target: self.train.then_some(BnStatTarget { mean: m, var: v, channels }),
        })
    }

    fn mb(&self, tape: &mut Tape, block: &MbPlan) -> Result<MbWeights> {
        let p = &block.prefix;
        let expand = if block.expand {
            Some((
                self.weight(tape, &format!("{p}.expand.w"))?,
                self.bn(tape, &format!("{p}.expand.bn"))?,
            ))
        } else {
            None
        };
        let se = if block.se_reduce.is_some() {
            Some((
                self.weight(tape, &format!("{p}.se.reduce.w"))?,
                self.weight(tape, &format!("{p}.se.reduce.b"))?,
                self.weight(tape, &format!("{p}.se.expand.w"))?,
                self.weight(tape, &format!("{p}.se.expand.b"))?,
            ))
        } else {
            None
        };
        Ok(MbWeights {
            expand,
            depthwise: (
                self.weight(tape, &format!("{p}.dw.w"))?,
                self.bn(tape, &format!("{p}.dw.bn"))?,
            ),
            se,
            project: (
                self.weight(tape, &format!("{p}.project.w"))?,
                self.bn(tape, &format!("{p}.project.bn"))?,
            ),
        })
    }
}

impl StandaloneNet {
    /// Trainable parameter count (batch-norm running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<ForwardOutput> {
        let src = StandaloneSource {
            net: self,
            train: tape.is_train(),
        };
        exec::run(&self.plan, &src, tape, x)
    }

    /// Inference-mode logits for every exit.
    pub fn infer(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new(false);
        let x = tape.constant(batch.clone_value());
        let out = self.forward(&mut tape, x)?;
        Ok(out.logits.iter().map(|&v| tape.value(v).clone_value()).collect())
    }

    /// Replaces every batch-norm running statistic by the average of the
    /// batch statistics observed on `batches` in training mode.
    pub fn recalibrate_bn(&mut self, batches: &[Tensor]) -> Result<()> {
        if batches.is_empty() {
            return Ok(());
        }
        let mut sums: BTreeMap<ParamId, Vec<f64>> = BTreeMap::new();
        for batch in batches {
            let mut tape = Tape::new(true);
            let x = tape.constant(batch.clone_value());
            self.forward(&mut tape, x)?;
            for u in tape.take_bn_updates() {
                for (id, vals) in [(u.target.mean, &u.batch_mean), (u.target.var, &u.batch_var)] {
                    let acc = sums.entry(id).or_insert_with(|| vec![0.0; vals.len()]);
                    acc.iter_mut().zip(vals).for_each(|(a, &v)| *a += v as f64);
                }
            }
        }
        let n = batches.len() as f64;
        for (id, acc) in sums {
            let data = self.store.get_mut(id).tensor.data_mut();
            data.iter_mut().zip(&acc).for_each(|(d, a)| *d = (a / n) as f32);
        }
        Ok(())
    }
}
