mod config;
mod export;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use flowlift::metrics::{MetricReport, Reduction};
use flowlift::ode::{Method, SolverConfig};
use flowlift::parallel::{init_threads, Parallelism};
use flowlift::pose::Dataset;
use flowlift::synth::make_dataset;
use flowlift::train::{evaluate, train_with, EvalConfig, FlowLifter, Variant};

use config::{required, ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "flowlift",
    version,
    about = "Multi-hypothesis 3D pose lifting with conditional flow matching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Sample hypotheses for a dataset and report metrics.
    Eval(EvalArgs),
    /// Write the learned adjacency or a sampling trajectory.
    #[command(subcommand)]
    Export(export::ExportCommand),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// One of full, no-condition, no-gcn, no-dropout, random-sampling, fixed-A.
    #[arg(long)]
    variant: Option<Variant>,
    /// Also moves the learning-rate decay to the same fraction of the run.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    hypotheses: Option<usize>,
    #[arg(long)]
    solver: Option<Method>,
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated step counts; one report each.
    #[arg(long, value_delimiter = ',')]
    sweep_steps: Vec<usize>,
    /// Comma-separated solvers; one report each.
    #[arg(long, value_delimiter = ',')]
    sweep_solver: Vec<Method>,
    #[arg(long, value_parser = parse_reduction)]
    reduction: Option<Reduction>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_reduction(s: &str) -> Result<Reduction, String> {
    match s {
        "best" => Ok(Reduction::Best),
        "mean" => Ok(Reduction::Mean),
        other => Err(format!("unknown reduction '{other}' (expected best or mean)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match std::env::var("FLOWLIFT_THREADS") {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                eprintln!("error: FLOWLIFT_THREADS must be a non-negative integer, got '{v}'");
                return ExitCode::from(2);
            }
        },
        Err(_) => 0,
    };
    init_threads(threads);
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Export(c) => export::run(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 config, 3 I/O or data, 4 divergence, 5 incompatible inputs.
fn exit_code(err: &anyhow::Error) -> u8 {
    use flowlift::Error as E;
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Parameter(_) | E::Usage(_) => 2,
                E::Io { .. } | E::Format { .. } | E::Data(_) | E::Generation(_) => 3,
                E::Divergence { .. } | E::Training { .. } => 4,
                E::Incompatible(_) | E::Dimension { .. } => 5,
                E::Alignment(_) => 1,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn out_dir(flag: Option<PathBuf>, cfg: &mut RunConfig) -> anyhow::Result<PathBuf> {
    let out = required(flag, &cfg.paths.out, "out")?;
    cfg.paths.out = Some(out.clone());
    Ok(out)
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(n) = a.samples {
        cfg.synth.sample_count = n;
    }
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    let out = out_dir(a.out, &mut cfg)?;
    cfg.synth.validate().map_err(|e| ConfigError(e.to_string()))?;
    cfg.echo(&out)?;
    let manifest = make_dataset(&cfg.synth, &out, Parallelism::Parallel)?;
    println!(
        "wrote {} samples to {} (ambiguous joints {:.3}, bimodal joints {:.3})",
        manifest.sample_count,
        out.display(),
        manifest.ambiguous_joint_fraction,
        manifest.bimodal_joint_fraction
    );
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.train.variant = v;
    }
    if let Some(e) = a.epochs {
        cfg.train = cfg.train.clone().with_epochs(e);
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let data = required(a.data, &cfg.paths.data, "data")?;
    cfg.paths.data = Some(data.clone());
    let out = out_dir(a.out, &mut cfg)?;
    cfg.train.validate().map_err(|e| ConfigError(e.to_string()))?;
    let dataset = Dataset::load(&data)?;
    cfg.echo(&out)?;
    let start = Instant::now();
    let result = train_with(&dataset, &cfg.train, Some(&out), Parallelism::Parallel, |l| {
        println!("epoch {:>4}  loss {:.6}  lr {:.1e}", l.epoch, l.mean_loss, l.lr);
    })?;
    let counts = result.model.parameter_counts();
    println!(
        "trained {} ({} encoder + {} flow parameters) in {:.1}s; checkpoint {}",
        cfg.train.variant,
        counts.encoder,
        counts.flow,
        start.elapsed().as_secs_f64(),
        out.join("model.fmck").display()
    );
    Ok(())
}

#[derive(Serialize)]
struct SweepEntry {
    method: Method,
    steps: usize,
    field_evaluations: usize,
    seconds_per_sample: f64,
    report: String,
    mpjpe_mm: f64,
    p_mpjpe_mm: f64,
    pck_percent: f64,
    cps: f64,
}

fn write_report(dir: &Path, stem: &str, report: &MetricReport, header: &str) -> anyhow::Result<()> {
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json, text + "\n").with_context(|| format!("writing {}", json.display()))?;
    let txt = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt, format!("{header}\n{}", report.table())).with_context(|| format!("writing {}", txt.display()))
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    let ev = &mut cfg.eval;
    if let Some(h) = a.hypotheses {
        ev.hypotheses = h;
    }
    if let Some(m) = a.solver {
        ev.solver.method = m;
    }
    if let Some(s) = a.steps {
        ev.solver.steps = s;
    }
    if let Some(r) = a.reduction {
        ev.reduction = r;
    }
    if let Some(s) = a.seed {
        ev.seed = s;
    }
    if ev.hypotheses == 0 {
        bail!(ConfigError("--hypotheses must be at least 1".into()));
    }
    let checkpoint = required(a.checkpoint, &cfg.paths.checkpoint, "checkpoint")?;
    cfg.paths.checkpoint = Some(checkpoint.clone());
    let data = required(a.data, &cfg.paths.data, "data")?;
    cfg.paths.data = Some(data.clone());
    let out = out_dir(a.out, &mut cfg)?;

    let methods = if a.sweep_solver.is_empty() {
        vec![cfg.eval.solver.method]
    } else {
        a.sweep_solver.clone()
    };
    let steps = if a.sweep_steps.is_empty() {
        vec![cfg.eval.solver.steps]
    } else {
        a.sweep_steps.clone()
    };
    for &s in &steps {
        SolverConfig {
            method: Method::Rk1,
            steps: s,
        }
        .validate()
        .map_err(|e| ConfigError(e.to_string()))?;
    }

    let model = FlowLifter::load(&checkpoint)?;
    let dataset = Dataset::load(&data)?;
    flowlift::train::check_compatible(&model, &dataset)?;
    cfg.echo(&out)?;
    println!(
        "method={} steps={} k={} hypotheses={} reduction={:?}",
        cfg.eval.solver.method, cfg.eval.solver.steps, model.config.k, cfg.eval.hypotheses, cfg.eval.reduction
    );

    let sweep = methods.len() > 1 || steps.len() > 1;
    let mut entries = Vec::new();
    for &method in &methods {
        for &s in &steps {
            let run = EvalConfig {
                solver: SolverConfig { method, steps: s },
                ..cfg.eval
            };
            let start = Instant::now();
            let result = evaluate(&model, &dataset, &run, Parallelism::Parallel)?;
            let wall = start.elapsed().as_secs_f64();
            let stem = if sweep {
                format!("report-{method}-{s}")
            } else {
                "report".to_string()
            };
            let per_sample = result.sampling_seconds / dataset.len() as f64;
            let header = format!(
                "{method}, {s} steps, {} field evaluations per trajectory, {per_sample:.4}s sampling per sample ({wall:.1}s wall)",
                result.field_evaluations
            );
            write_report(&out, &stem, &result.report, &header)?;
            println!("{header}\n{}", result.report.table());
            let r = &result.report;
            entries.push(SweepEntry {
                method,
                steps: s,
                field_evaluations: result.field_evaluations,
                seconds_per_sample: per_sample,
                report: format!("{stem}.json"),
                mpjpe_mm: r.mpjpe_mm,
                p_mpjpe_mm: r.p_mpjpe_mm,
                pck_percent: r.pck_percent,
                cps: r.cps,
            });
        }
    }
    if sweep {
        let path = out.join("sweep.json");
        let text = serde_json::to_string_pretty(&entries).expect("sweep serializes");
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
