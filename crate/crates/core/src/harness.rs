//! The training pipeline: phases in order with teacher updates, per-phase
//! evaluation sweeps and checkpoints, and bit-identical resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, GlobalChoice, SubnetConfig};
use crate::checkpoint::Checkpoint;
use crate::config::{EvalConfig, RunConfig};
use crate::cost::subnet_cost;
use crate::data::{augment_batch, load_dataset, make_batches, resize_batch, Dataset, Normalization, Splits};
use crate::distill::{aep_predict, argmax, teacher_config, ExitWeighting, ExitWeights, Teacher};
use crate::elastic::{extract_subnet, StandaloneNet};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::params::ParamKind;
use crate::plan::NetPlan;
use crate::report::{PhaseReport, RunReport, SubnetRecord, REPORT_SCHEMA_VERSION};
use crate::scheduler::{enumerate_space, train_step, LrSchedule, PhaseName, PhaseSpec, StepContext};
use crate::supernet::Supernet;
use crate::tensor::Tensor;

/// Everything besides tensors that a resumed run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: RunConfig,
    /// Index of the next phase to run.
    pub next_phase: usize,
    pub full_completed: bool,
    pub rng: ChaCha8Rng,
    pub reports: Vec<PhaseReport>,
    pub teacher_extractions: usize,
    pub optimizer_steps: u64,
    pub normalization: Normalization,
}

/// How much of the pipeline to run and where checkpoints live.
#[derive(Clone, Debug, Default)]
pub struct RunControl {
    /// Directory for per-phase checkpoints; none disables checkpointing.
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from the latest checkpoint in `checkpoint_dir`, if any.
    pub resume: bool,
    /// Stop after this many phases have completed in this invocation.
    pub max_phases: Option<usize>,
}

pub struct RunOutcome {
    pub net: Supernet,
    pub teacher: Teacher,
    pub report: RunReport,
    /// Whether every phase has run.
    pub completed: bool,
}

pub fn checkpoint_path(dir: &Path, index: usize, phase: PhaseName) -> PathBuf {
    dir.join(format!("phase-{index:02}-{phase}.ckpt"))
}

/// The checkpoint of the most advanced completed phase in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.starts_with("phase-") && name.ends_with(".ckpt")
        })
        .collect();
    found.sort();
    Ok(found.pop())
}

/// Writes the supernet, optimizer momenta, teacher snapshot and run state.
pub fn save_checkpoint(path: &Path, net: &Supernet, opt: &Sgd, teacher: &Teacher, state: &RunState) -> Result<()> {
    let phase = state.reports.last().map(|r| r.phase.to_string());
    let mut ck = Checkpoint::new(net.arch.clone(), phase, serde_json::to_value(state)?);
    ck.push_store("net", &net.store)?;
    for (id, p) in net.store.iter() {
        if let Some(Some(buf)) = opt.buffers.get(id.0) {
            let t = Tensor::new(p.tensor.shape().to_vec(), buf.clone())?;
            ck.push(format!("momentum/{}", p.name), ParamKind::Buffer, &t)?;
        }
    }
    if let Some(snap) = &teacher.snapshot {
        ck.push_store("teacher", &snap.store)?;
    }
    ck.save(path)
}

pub struct Restored {
    pub net: Supernet,
    pub opt: Sgd,
    pub teacher: Teacher,
    pub state: RunState,
}

pub fn load_checkpoint(path: &Path) -> Result<Restored> {
    let ck = Checkpoint::load(path)?;
    let state: RunState = serde_json::from_value(ck.manifest.state.clone()).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("run state: {e}"),
    })?;
    let arch = ck.manifest.arch.clone();
    let store = ck.store("net")?;
    let mut opt = Sgd {
        steps: state.optimizer_steps,
        buffers: vec![None; store.len()],
        ..Sgd::default()
    };
    for (id, p) in store.iter() {
        if let Some(t) = ck.tensor(&format!("momentum/{}", p.name)) {
            opt.buffers[id.0] = Some(t.into_data());
        }
    }
    let net = Supernet {
        arch: arch.clone(),
        options: state.config.supernet,
        store,
    };
    let mut teacher = Teacher::new(state.config.teacher);
    teacher.extractions = state.teacher_extractions;
    let tstore = ck.store("teacher")?;
    if !tstore.is_empty() {
        teacher.snapshot = Some(StandaloneNet {
            plan: NetPlan::new(&arch, &teacher_config(&arch))?,
            store: tstore,
        });
    }
    Ok(Restored {
        net,
        opt,
        teacher,
        state,
    })
}

fn predictions(logits: &[Tensor], eval: &EvalConfig, weighting: ExitWeighting) -> Result<Vec<usize>> {
    if eval.ensemble && logits.len() > 1 {
        let w = ExitWeights::for_exits(weighting, logits.len());
        return aep_predict(logits, w.as_slice());
    }
    let last = logits.last().ok_or_else(|| Error::Internal("network produced no exit".into()))?;
    let (_, c) = last.dims2()?;
    Ok(last.data().chunks(c).map(argmax).collect())
}

/// Test accuracy of one subnet, optionally after re-estimating its
/// batch-norm statistics on `calibration` (base-resolution batches).
pub fn evaluate_config(
    net: &Supernet,
    cfg: &SubnetConfig,
    test: &Dataset,
    calibration: &[Tensor],
    eval: &EvalConfig,
    weighting: ExitWeighting,
) -> Result<f64> {
    let mut sub = extract_subnet(net, cfg)?;
    if !calibration.is_empty() {
        let resized = calibration
            .iter()
            .map(|b| resize_batch(b, cfg.resolution))
            .collect::<Result<Vec<_>>>()?;
        sub.recalibrate_bn(&resized)?;
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..test.len()).collect();
    for chunk in idx.chunks(eval.batch_size.max(1)) {
        let (x, y) = test.batch(chunk)?;
        let x = resize_batch(&x, cfg.resolution)?;
        let logits = sub.infer(&x)?;
        let pred = predictions(&logits, eval, weighting)?;
        correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / test.len().max(1) as f64)
}

/// Base-resolution training batches used for batch-norm calibration.
pub fn calibration_batches(train: &Dataset, eval: &EvalConfig) -> Result<Vec<Tensor>> {
    let n = eval.bn_calibration_images.min(train.len());
    let idx: Vec<usize> = (0..n).collect();
    idx.chunks(eval.batch_size.max(1))
        .map(|c| train.batch(c).map(|(x, _)| x))
        .collect()
}

/// Accuracy and cost of every configuration of the phase space, in
/// enumeration order.
pub fn evaluate_sweep(
    net: &Supernet,
    phase: &PhaseSpec,
    test: &Dataset,
    calibration: &[Tensor],
    eval: &EvalConfig,
    weighting: ExitWeighting,
) -> Result<PhaseReport> {
    let records = enumerate_space(phase)
        .into_par_iter()
        .map(|g| {
            let cfg = SubnetConfig::uniform(&net.arch, g);
            let accuracy = evaluate_config(net, &cfg, test, calibration, eval, weighting)?;
            let cost = subnet_cost(&net.arch, &cfg)?;
            Ok(SubnetRecord {
                choice: g,
                accuracy,
                params: cost.params,
                macs: cost.macs,
                best: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let maximal = GlobalChoice::maximal(*phase.unlocked.resolution.iter().max().unwrap_or(&64));
    let maximal_accuracy = records
        .iter()
        .find(|r| r.choice == maximal)
        .map(|r| r.accuracy)
        .ok_or_else(|| Error::Internal("maximal configuration missing from sweep".into()))?;
    PhaseReport::new(phase.name, records, maximal_accuracy)
}

fn fresh_state(cfg: &RunConfig, normalization: Normalization) -> RunState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    RunState {
        config: cfg.clone(),
        next_phase: 0,
        full_completed: false,
        rng,
        reports: Vec::new(),
        teacher_extractions: 0,
        optimizer_steps: 0,
        normalization,
    }
}

fn run_report(arch: &ArchSpec, cfg: &RunConfig, state: &RunState) -> RunReport {
    RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        network: arch.network_name(),
        teacher: cfg.teacher,
        width_multiplier: arch.width_multiplier,
        arch: arch.clone(),
        config: cfg.clone(),
        normalization: state.normalization,
        phases: state.reports.clone(),
    }
}

/// Runs (or resumes) the pipeline described by `cfg`.
pub fn run_eps(cfg: &RunConfig, ctl: &RunControl) -> Result<RunOutcome> {
    cfg.validate()?;
    let splits = load_dataset(&cfg.data)?;
    run_eps_on(cfg, ctl, &splits)
}

/// [`run_eps`] on already loaded data.
pub fn run_eps_on(cfg: &RunConfig, ctl: &RunControl, splits: &Splits) -> Result<RunOutcome> {
    cfg.validate()?;
    let arch = cfg.arch_spec(splits.train.n_classes)?;
    let phases = cfg.phases(&arch);
    let resumed = match (&ctl.checkpoint_dir, ctl.resume) {
        (Some(dir), true) => latest_checkpoint(dir)?.map(|p| load_checkpoint(&p)).transpose()?,
        _ => None,
    };
    let (mut net, mut teacher, mut state) = match resumed {
        Some(r) => {
            if r.state.config != *cfg {
                return Err(Error::Invalid("checkpoint was written by a different run config".into()));
            }
            (r.net, r.teacher, r.state)
        }
        None => (
            Supernet::new(arch.clone(), cfg.supernet, cfg.seed)?,
            Teacher::new(cfg.teacher),
            fresh_state(cfg, splits.normalization),
        ),
    };
    let calibration = calibration_batches(&splits.train, &cfg.eval)?;
    let train = &splits.train;
    let iters_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut ran = 0usize;
    while state.next_phase < phases.len() {
        if ctl.max_phases.is_some_and(|m| ran >= m) {
            break;
        }
        let i = state.next_phase;
        let sp = &phases[i];
        let start = Instant::now();
        if i > 0 {
            teacher.update(&net, state.full_completed)?;
        }
        // every phase starts from a fresh optimizer
        let mut opt = Sgd::default();
        let total = sp.epochs * iters_per_epoch;
        let sched = LrSchedule::with_warmup_fraction(sp.spec.lr, sp.warmup_fraction, total);
        let ctx = StepContext {
            phase: &sp.spec,
            kd: &cfg.kd,
            teacher: (i > 0).then_some(&teacher),
            per_slot: cfg.per_slot_sampling,
        };
        let mut t = 0usize;
        let mut loss_sum = 0.0f64;
        for epoch in 0..sp.epochs {
            let mut epoch_loss = 0.0f64;
            let batches = make_batches(train.len(), cfg.batch_size, cfg.seed, (i * 10_000 + epoch) as u64);
            for b in &batches {
                let (mut x, y) = train.batch(b)?;
                if cfg.data.augment {
                    augment_batch(&mut x, &mut state.rng)?;
                }
                let stats = train_step(&mut net, &mut opt, &x, &y, &ctx, sched.lr_at(t), &mut state.rng)?;
                epoch_loss += stats.loss as f64;
                t += 1;
            }
            loss_sum += epoch_loss;
            log::info!(
                "{} epoch {}/{}: loss {:.4}",
                sp.spec.name,
                epoch + 1,
                sp.epochs,
                epoch_loss / batches.len().max(1) as f64
            );
        }
        if sp.spec.name == PhaseName::Full {
            state.full_completed = true;
        }
        let mut report = evaluate_sweep(&net, &sp.spec, &splits.test, &calibration, &cfg.eval, cfg.kd.exit_weighting)?;
        report.epochs = sp.epochs;
        report.iterations = t;
        report.mean_train_loss = loss_sum / t.max(1) as f64;
        report.wall_clock_s = start.elapsed().as_secs_f64();
        log::info!(
            "{} done: avg {:.2}% best {:.2}% maximal {:.2}% ({:.0}s)",
            sp.spec.name,
            100.0 * report.avg,
            100.0 * report.best,
            100.0 * report.maximal_accuracy,
            report.wall_clock_s
        );
        state.reports.push(report);
        state.next_phase = i + 1;
        state.teacher_extractions = teacher.extractions;
        state.optimizer_steps = opt.steps;
        if let Some(dir) = &ctl.checkpoint_dir {
            save_checkpoint(&checkpoint_path(dir, i, sp.spec.name), &net, &opt, &teacher, &state)?;
        }
        let report = run_report(&arch, cfg, &state);
        if let Some(dir) = &cfg.output_dir {
            report.write(dir)?;
        }
        ran += 1;
    }
    let completed = state.next_phase == phases.len();
    let report = run_report(&arch, cfg, &state);
    Ok(RunOutcome {
        net,
        teacher,
        report,
        completed,
    })
}

