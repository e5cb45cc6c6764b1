//! Knowledge distillation: multi-exit weighting, ensemble prediction and
//! soft labels, the KD loss, and teacher snapshots.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, SubnetConfig, MAX_HEIGHT};
use crate::autograd::{log_softmax_rows, softmax_rows, Tape, Target, Var};
use crate::elastic::{extract_subnet, StandaloneNet};
use crate::error::{Error, Result};
use crate::supernet::Supernet;
use crate::tensor::Tensor;

/// How exit weights are spread over the active exits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitWeighting {
    /// `w_i ∝ N - i + 1`: the shallowest exit weighs most.
    #[default]
    Desc,
    Uniform,
}

/// Normalized non-negative weights over `N` exits, shallowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitWeights(Vec<f32>);

impl ExitWeights {
    pub fn new(w: Vec<f32>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Invalid(format!("exit weights must be non-negative, got {w:?}")));
        }
        let s: f64 = w.iter().map(|&v| v as f64).sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("exit weights sum to {s}, not 1")));
        }
        Ok(Self(w))
    }

    pub fn desc(n: usize) -> Self {
        let total = (n * (n + 1) / 2) as f64;
        Self((1..=n).map(|i| ((n - i + 1) as f64 / total) as f32).collect())
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f32; n])
    }

    pub fn for_exits(weighting: ExitWeighting, n: usize) -> Self {
        match weighting {
            ExitWeighting::Desc => Self::desc(n),
            ExitWeighting::Uniform => Self::uniform(n),
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_len(what: &str, n: usize, w: &[f32]) -> Result<()> {
    if n != w.len() || n == 0 {
        return Err(Error::Invalid(format!(
            "{n} {what} for {} exit weights",
            w.len()
        )));
    }
    Ok(())
}

/// `Σ w_i · loss_i`.
pub fn aep_loss(exit_losses: &[f32], w: &[f32]) -> Result<f32> {
    check_len("exit losses", exit_losses.len(), w)?;
    Ok(exit_losses.iter().zip(w).map(|(l, w)| l * w).sum())
}

fn weighted_probs(exit_logits: &[Tensor], w: &[f32], temperature: f32) -> Result<(usize, usize, Vec<f32>)> {
    check_len("exit logits", exit_logits.len(), w)?;
    let (b, c) = exit_logits[0].dims2()?;
    let mut acc = vec![0.0f64; b * c];
    for (t, &wi) in exit_logits.iter().zip(w) {
        let (tb, tc) = t.dims2()?;
        if (tb, tc) != (b, c) {
            return Err(Error::Shape(format!("exit logits {:?} vs [{b}, {c}]", t.shape())));
        }
        let scaled: Vec<f32> = t.data().iter().map(|v| v / temperature).collect();
        for (a, p) in acc.iter_mut().zip(softmax_rows(&scaled, c)) {
            *a += wi as f64 * p as f64;
        }
    }
    Ok((b, c, acc.into_iter().map(|v| v as f32).collect()))
}

/// Per-example argmax of `Σ w_i · softmax(logits_i)` (ties to the lower class).
pub fn aep_predict(exit_logits: &[Tensor], w: &[f32]) -> Result<Vec<usize>> {
    if w.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Invalid(format!("exit weights must be non-negative, got {w:?}")));
    }
    let (_, c, p) = weighted_probs(exit_logits, w, 1.0)?;
    Ok(p.chunks(c).map(argmax).collect())
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `Σ w_i · softmax(logits_i / T)` with rows renormalized to sum to one.
pub fn ensemble_soft_labels(exit_logits: &[Tensor], w: &ExitWeights, temperature: f32) -> Result<Tensor> {
    let (b, c, mut p) = weighted_probs(exit_logits, w.as_slice(), temperature)?;
    for row in p.chunks_mut(c) {
        let s: f64 = row.iter().map(|&v| v as f64).sum();
        row.iter_mut().for_each(|v| *v = (*v as f64 / s) as f32);
    }
    Tensor::new(vec![b, c], p)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    /// Cross-entropy against the soft labels.
    #[default]
    CrossEntropy,
    /// KL divergence: cross-entropy minus the soft labels' entropy.
    Kl,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub kd_ratio: f32,
    pub temperature: f32,
    pub divergence: Divergence,
    pub exit_weighting: ExitWeighting,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            kd_ratio: 1.0,
            temperature: 1.0,
            divergence: Divergence::CrossEntropy,
            exit_weighting: ExitWeighting::Desc,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kd_ratio >= 0.0) {
            return Err(Error::Invalid(format!("kd_ratio must be >= 0, got {}", self.kd_ratio)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Invalid(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }
}

fn entropy(p: &Tensor) -> Result<f32> {
    let (b, _) = p.dims2()?;
    let h: f64 = p
        .data()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -(v as f64) * (v as f64).ln())
        .sum();
    Ok((h / b as f64) as f32)
}

/// `CE(student, labels) + kd_ratio · D(student, soft)` on the tape. The soft
/// term is skipped when `soft` is `None` or `kd_ratio` is zero.
pub fn kd_loss_var(tape: &mut Tape, logits: Var, labels: &[usize], soft: Option<&Tensor>, cfg: &KdConfig) -> Result<Var> {
    cfg.validate()?;
    let hard = tape.cross_entropy(logits, Target::Labels(labels))?;
    let Some(soft) = soft.filter(|_| cfg.kd_ratio > 0.0) else {
        return Ok(hard);
    };
    let t = cfg.temperature;
    let z = if t == 1.0 { logits } else { tape.scale(logits, 1.0 / t)? };
    let mut kd = tape.cross_entropy(z, Target::Soft(soft.data()))?;
    if cfg.divergence == Divergence::Kl {
        kd = tape.add_const(kd, -entropy(soft)?);
    }
    tape.lin_comb(&[(hard, 1.0), (kd, cfg.kd_ratio * t * t)])
}

/// Scalar KD loss (see [`kd_loss_var`]).
pub fn kd_loss(student_logits: &Tensor, labels: &[usize], soft_labels: &Tensor, kd_ratio: f32) -> Result<f32> {
    let cfg = KdConfig {
        kd_ratio,
        ..KdConfig::default()
    };
    let mut tape = Tape::new(false);
    let z = tape.constant(student_logits.clone_value());
    let l = kd_loss_var(&mut tape, z, labels, Some(soft_labels), &cfg)?;
    Ok(tape.value(l).data()[0])
}

/// Student objective over its active exits: the KD loss of every exit, each
/// against the same soft labels, combined with the configured exit weights.
pub fn student_loss(tape: &mut Tape, exit_logits: &[Var], labels: &[usize], soft: Option<&Tensor>, cfg: &KdConfig) -> Result<Var> {
    let w = ExitWeights::for_exits(cfg.exit_weighting, exit_logits.len());
    let mut terms = Vec::with_capacity(exit_logits.len());
    for (&z, &wi) in exit_logits.iter().zip(w.as_slice()) {
        terms.push((kd_loss_var(tape, z, labels, soft, cfg)?, wi));
    }
    if terms.len() == 1 {
        return Ok(terms[0].0);
    }
    tape.lin_comb(&terms)
}

/// Plain log-softmax cross-entropy of one row set against labels, used by
/// evaluation code that has no tape.
pub fn mean_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let (b, c) = logits.dims2()?;
    let ls = log_softmax_rows(logits.data(), c);
    let mut s = 0.0f64;
    for (i, &y) in labels.iter().enumerate().take(b) {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, n_classes: c });
        }
        s -= ls[i * c + y] as f64;
    }
    Ok((s / b as f64) as f32)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherStrategy {
    /// One snapshot after the first phase, kept for the whole run.
    #[default]
    Fixed,
    /// A fresh snapshot at the start of every later phase.
    Progressive,
}

/// Resolution at which the maximal teacher configuration is extracted; the
/// snapshot itself runs at any resolution.
const TEACHER_RESOLUTION: usize = 64;

/// The maximal configuration with every exit, as snapshotted for teaching.
pub fn teacher_config(arch: &ArchSpec) -> SubnetConfig {
    let mut cfg = SubnetConfig::maximal(arch, TEACHER_RESOLUTION);
    cfg.height = MAX_HEIGHT;
    cfg
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub strategy: TeacherStrategy,
    pub snapshot: Option<StandaloneNet>,
    pub extractions: usize,
}

impl Teacher {
    pub fn new(strategy: TeacherStrategy) -> Self {
        Self {
            strategy,
            snapshot: None,
            extractions: 0,
        }
    }

    /// Phase-boundary hook. Returns whether a new snapshot was extracted.
    pub fn update(&mut self, net: &Supernet, full_phase_completed: bool) -> Result<bool> {
        if !full_phase_completed {
            return Err(Error::Teacher(
                "teacher requested before the full-network phase completed".into(),
            ));
        }
        if self.strategy == TeacherStrategy::Fixed && self.snapshot.is_some() {
            return Ok(false);
        }
        self.snapshot = Some(extract_subnet(net, &teacher_config(&net.arch))?);
        self.extractions += 1;
        Ok(true)
    }

    /// Ensembled soft labels of the snapshot on `batch`, in inference mode.
    pub fn soft_labels(&self, batch: &Tensor, cfg: &KdConfig) -> Result<Option<Tensor>> {
        let Some(net) = &self.snapshot else {
            return Ok(None);
        };
        let logits = net.infer(batch)?;
        let w = ExitWeights::for_exits(cfg.exit_weighting, logits.len());
        ensemble_soft_labels(&logits, &w, cfg.temperature).map(Some)
    }
}
