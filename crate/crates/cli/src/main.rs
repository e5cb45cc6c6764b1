//! `ofa`: train, evaluate and inspect elastic supernets.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ofa_core::checkpoint::Checkpoint;
use ofa_core::config::RunConfig;
use ofa_core::cost::subnet_cost;
use ofa_core::data::load_dataset;
use ofa_core::distill::TeacherStrategy;
use ofa_core::elastic::extract_subnet;
use ofa_core::harness::{calibration_batches, evaluate_config, evaluate_sweep, load_checkpoint, run_eps, RunControl};
use ofa_core::params::ParamKind;
use ofa_core::report::{render_table, RunReport};
use ofa_core::scheduler::{enumerate_space, PhaseName, PhaseSpec};
use ofa_core::{ArchSpec, GlobalChoice, SubnetConfig, Variant};

#[derive(Parser)]
#[command(name = "ofa", version, about = "Elastic weight-sharing supernets with progressive shrinking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the progressive-shrinking pipeline.
    Train(TrainArgs),
    /// Evaluate a checkpoint over a phase's subnet space.
    Evaluate(EvaluateArgs),
    /// List the subnet choices of a phase.
    Enumerate(SpaceArgs),
    /// Extract a standalone subnet from a checkpoint.
    Extract(ExtractArgs),
    /// Parameter and multiply-accumulate counts of subnets.
    Cost(CostArgs),
    /// Render report files as one table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Scaled epochs on the 8-class synthetic set.
    Desk,
    /// The unscaled phase table.
    Reference,
}

#[derive(Clone, Copy, ValueEnum)]
enum TeacherArg {
    Fixed,
    Progressive,
}

#[derive(Args)]
struct TrainArgs {
    /// Run config (TOML); explicit flags take precedence over its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a preset instead of a config file.
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Network variant, e.g. SE_B or EE_DP.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    width_multiplier: Option<f64>,
    #[arg(long, value_enum)]
    teacher: Option<TeacherArg>,
    #[arg(long)]
    epoch_scale: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    kd_ratio: Option<f32>,
    /// Directory for reports and checkpoints.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Stop after this many phases.
    #[arg(long)]
    max_phases: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    checkpoint: PathBuf,
    /// Phase whose space is swept; defaults to the checkpoint's phase.
    #[arg(long)]
    phase: Option<PhaseName>,
    /// Evaluate one choice instead of the whole space.
    #[arg(long)]
    choice: Option<GlobalChoice>,
    /// Predict with the ensemble of every active exit.
    #[arg(long)]
    ensemble: bool,
    /// Re-estimate batch-norm statistics on this many training images.
    #[arg(long)]
    bn_calibration: Option<usize>,
}

#[derive(Args)]
struct ArchArgs {
    #[arg(long, default_value = "SE_B")]
    variant: Variant,
    #[arg(long, default_value_t = 1.0)]
    width_multiplier: f64,
    #[arg(long, default_value_t = 200)]
    n_classes: usize,
}

impl ArchArgs {
    fn arch(&self) -> Result<ArchSpec> {
        let a = ArchSpec::new(self.variant, self.width_multiplier, self.n_classes);
        a.validate()?;
        Ok(a)
    }
}

#[derive(Args)]
struct SpaceArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long)]
    phase: PhaseName,
    /// One JSON object per line instead of choice strings.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ExtractArgs {
    checkpoint: PathBuf,
    /// Choice such as r64-k7-l7-n5-d4-e6.
    #[arg(long)]
    choice: GlobalChoice,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    arch: ArchArgs,
    /// Single choice; otherwise every choice of `--phase`.
    #[arg(long, conflicts_with = "phase")]
    choice: Option<GlobalChoice>,
    #[arg(long)]
    phase: Option<PhaseName>,
}

#[derive(Args)]
struct ReportArgs {
    /// `report.json` files or directories containing one.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

fn train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.config, a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_toml(&text)?
        }
        (None, Some(Preset::Reference)) => RunConfig::reference(a.seed.unwrap_or(0)),
        (None, Some(Preset::Desk)) => RunConfig::desk(a.seed.unwrap_or(0)),
        (None, None) => match a.seed {
            Some(seed) => RunConfig::desk(seed),
            None => bail!("--seed is required without --config"),
        },
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(v) = a.width_multiplier {
        cfg.width_multiplier = v;
    }
    if let Some(t) = a.teacher {
        cfg.teacher = match t {
            TeacherArg::Fixed => TeacherStrategy::Fixed,
            TeacherArg::Progressive => TeacherStrategy::Progressive,
        };
    }
    if let Some(v) = a.epoch_scale {
        cfg.epoch_scale = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.kd_ratio {
        cfg.kd.kd_ratio = v;
    }
    if let Some(v) = &a.output {
        cfg.output_dir = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let ctl = RunControl {
        checkpoint_dir: cfg.output_dir.as_ref().map(|d| d.join("checkpoints")),
        resume: a.resume,
        max_phases: a.max_phases,
    };
    if let Some(dir) = &cfg.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    }
    let out = run_eps(&cfg, &ctl)?;
    print!("{}", render_table(std::slice::from_ref(&out.report)));
    if !out.completed {
        eprintln!("stopped after {} phases", out.report.phases.len());
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let r = load_checkpoint(&a.checkpoint)?;
    let cfg = &r.state.config;
    let splits = load_dataset(&cfg.data)?;
    let mut eval = cfg.eval.clone();
    eval.ensemble |= a.ensemble;
    if let Some(n) = a.bn_calibration {
        eval.bn_calibration_images = n;
    }
    let calibration = calibration_batches(&splits.train, &eval)?;
    if let Some(choice) = a.choice {
        let sub = SubnetConfig::uniform(&r.net.arch, choice);
        sub.validate(&r.net.arch)?;
        let acc = evaluate_config(&r.net, &sub, &splits.test, &calibration, &eval, cfg.kd.exit_weighting)?;
        println!("{choice}\t{:.4}", acc);
        return Ok(());
    }
    let phase = match a.phase {
        Some(p) => p,
        None => r.state.reports.last().map(|p| p.phase).context("checkpoint has no completed phase")?,
    };
    let spec = phase_spec(&r.net.arch, phase, cfg)?;
    let report = evaluate_sweep(&r.net, &spec, &splits.test, &calibration, &eval, cfg.kd.exit_weighting)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn phase_spec(arch: &ArchSpec, phase: PhaseName, cfg: &RunConfig) -> Result<PhaseSpec> {
    if !phase.applies_to(arch) {
        bail!("phase {phase} does not apply to {}", arch.network_name());
    }
    Ok(PhaseSpec::new(phase, arch, cfg.hyper(phase)))
}

fn enumerate(a: SpaceArgs) -> Result<()> {
    let arch = a.arch.arch()?;
    let spec = phase_spec(&arch, a.phase, &RunConfig::reference(0))?;
    for g in enumerate_space(&spec) {
        if a.json {
            println!("{}", serde_json::to_string(&g)?);
        } else {
            println!("{g}");
        }
    }
    Ok(())
}

fn extract(a: ExtractArgs) -> Result<()> {
    let r = load_checkpoint(&a.checkpoint)?;
    let cfg = SubnetConfig::uniform(&r.net.arch, a.choice);
    cfg.validate(&r.net.arch)?;
    let sub = extract_subnet(&r.net, &cfg)?;
    let state = serde_json::json!({ "subnet": cfg, "choice": a.choice.to_string() });
    let mut ck = Checkpoint::new(r.net.arch.clone(), None, state);
    ck.push_store("net", &sub.store)?;
    ck.save(&a.out)?;
    let trainable = sub.store.iter().filter(|(_, p)| p.kind != ParamKind::Buffer).count();
    println!(
        "{}: {} parameters in {} tensors -> {}",
        a.choice,
        sub.param_count(),
        trainable,
        a.out.display()
    );
    Ok(())
}

fn cost(a: CostArgs) -> Result<()> {
    let arch = a.arch.arch()?;
    let choices = match (a.choice, a.phase) {
        (Some(c), _) => vec![c],
        (None, Some(p)) => enumerate_space(&phase_spec(&arch, p, &RunConfig::reference(0))?),
        (None, None) => vec![GlobalChoice::maximal(64)],
    };
    println!("choice\tparams\tmacs");
    for g in choices {
        let cfg = SubnetConfig::uniform(&arch, g);
        cfg.validate(&arch)?;
        let c = subnet_cost(&arch, &cfg)?;
        println!("{g}\t{}\t{}", c.params, c.macs);
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut runs = Vec::new();
    for p in &a.reports {
        let path = if p.is_dir() { p.join("report.json") } else { p.clone() };
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        runs.push(RunReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    print!("{}", render_table(&runs));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Enumerate(a) => enumerate(a),
        Command::Extract(a) => extract(a),
        Command::Cost(a) => cost(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
