//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod grad_cases;
pub mod table;

use ofa_core::autograd::{Tape, Var};
use ofa_core::error::Result;
use ofa_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f32 = 1e-3;
pub const FD_RTOL: f64 = 1e-3;
pub const FD_ATOL: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Random values at least `gap` away from every point in `kinks`.
pub fn away_from(shape: &[usize], kinks: &[f32], gap: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f32 = rng.gen_range(-4.0..4.0);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst element of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct FdReport {
    /// Largest `‖a - n‖ / max(‖a‖, ‖n‖)` over the inputs' gradient vectors.
    pub norm_rel: f64,
    /// Largest elementwise [`rel_err`].
    pub max_rel: f64,
    pub worst: (usize, usize, f64, f64),
    pub checked: usize,
}

impl FdReport {
    pub fn passes(&self) -> bool {
        self.norm_rel < FD_RTOL
    }
}

/// `|a - n| / max(|a|, |n|, atol)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_ATOL)
}

fn projected(tape: &Tape, out: Var, r: &[f64]) -> f64 {
    tape.value(out).data().iter().zip(r).map(|(&v, &w)| v as f64 * w).sum()
}

/// Compares the tape gradient of `Σ r·f(inputs)` (fixed random `r`) with
/// central differences for every element of every input.
///
/// `f` must build the same graph on any tape; `train` selects batch-norm mode.
pub fn gradcheck<F>(inputs: &[Tensor], train: bool, seed: u64, f: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(train);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut g = rng(seed);
    let r64: Vec<f64> = (0..tape.value(out).numel()).map(|_| g.gen_range(-1.0..1.0)).collect();
    let r32: Vec<f32> = r64.iter().map(|&v| v as f32).collect();
    let r64: Vec<f64> = r32.iter().map(|&v| v as f64).collect();
    let weighted = tape.mul_const(out, r32)?;
    let loss = tape.sum_all(weighted);
    let grads = tape.grads(loss)?;

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new(train);
        let vs: Vec<Var> = vals.iter().map(|v| t.constant(v.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(projected(&t, o, &r64))
    };
    let mut report = FdReport {
        norm_rel: 0.0,
        max_rel: 0.0,
        worst: (0, 0, 0.0, 0.0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
        for (e, &a) in analytic.iter().enumerate() {
            let x0 = inputs[i].data()[e];
            work[i].data_mut()[e] = x0 + FD_EPS;
            let up = eval(&work)?;
            work[i].data_mut()[e] = x0 - FD_EPS;
            let down = eval(&work)?;
            work[i].data_mut()[e] = x0;
            let h = (x0 + FD_EPS) as f64 - (x0 - FD_EPS) as f64;
            let numeric = (up - down) / h;
            let a = a as f64;
            let err = rel_err(a, numeric);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            report.checked += 1;
            if err > report.max_rel {
                report.max_rel = err;
                report.worst = (i, e, a, numeric);
            }
        }
        let norm_rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(FD_ATOL);
        report.norm_rel = report.norm_rel.max(norm_rel);
    }
    Ok(report)
}

/// Supernet whose every tensor is moved off its initialization, so weight
/// sharing, transforms and running statistics all affect the output.
pub fn perturbed_supernet(arch: ofa_core::ArchSpec, seed: u64) -> ofa_core::Supernet {
    use ofa_core::params::ParamKind;
    let mut net = ofa_core::Supernet::new(arch, ofa_core::SupernetOptions::default(), seed).unwrap();
    let mut g = rng(seed ^ 0x5eed);
    for (_, p) in net.store.iter_mut() {
        let name = p.name.clone();
        for v in p.tensor.data_mut() {
            *v = match p.kind {
                ParamKind::Buffer if name.ends_with(".var") => g.gen_range(0.5..1.5),
                ParamKind::Buffer => g.gen_range(-0.2..0.2),
                ParamKind::BnScale => g.gen_range(0.8..1.2),
                ParamKind::BnShift | ParamKind::Bias => g.gen_range(-0.1..0.1),
                ParamKind::Transform => *v + g.gen_range(-0.1..0.1),
                ParamKind::Weight => *v + 0.05 * g.gen_range(-1.0f32..1.0),
            };
        }
    }
    net
}

pub fn batch(n: usize, r: usize, seed: u64) -> Tensor {
    randn(&[n, 3, r, r], &mut rng(seed))
}

/// A run of every phase on a two-stage miniature and a 4-class synthetic
/// set, one epoch per phase.
pub fn mini_run(variant: ofa_core::Variant, teacher: ofa_core::distill::TeacherStrategy, seed: u64) -> ofa_core::config::RunConfig {
    use ofa_core::data::{DataConfig, DataSource, SyntheticSpec};
    let mut cfg = ofa_core::config::RunConfig::reference(seed);
    cfg.arch = Some(ofa_core::ArchSpec::miniature(variant, 2, 2, 8, 4));
    cfg.teacher = teacher;
    cfg.data = DataConfig {
        source: DataSource::Synthetic(SyntheticSpec {
            n_classes: 4,
            train_per_class: 10,
            test_per_class: 2,
            ..SyntheticSpec::default()
        }),
        val_fraction: 0.0,
        split_seed: seed,
        augment: false,
    };
    cfg.epoch_scale = 1e-3;
    cfg.batch_size = 10;
    cfg.eval.batch_size = 20;
    cfg.eval.bn_calibration_images = 8;
    cfg
}

/// Independent random choice for every elastic slot of `a`.
pub fn random_config(a: &ofa_core::ArchSpec, g: &mut impl Rng) -> ofa_core::SubnetConfig {
    let mut cfg = ofa_core::SubnetConfig::maximal(a, *[48, 56, 64].choose(g).unwrap());
    if a.early_exits {
        cfg.height = g.gen_range(1..=5);
    }
    for s in &mut cfg.stages {
        s.depth = g.gen_range(2..=4);
        for b in &mut s.blocks {
            *b = ofa_core::arch::BlockChoice {
                kernel: *[3, 5, 7].choose(g).unwrap(),
                expansion: *[3, 4, 6].choose(g).unwrap(),
                level_mask: if a.parallel_blocks { g.gen_range(1..=7) } else { 7 },
            };
        }
    }
    cfg
}
