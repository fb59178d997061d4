use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Subcommand};

use flowlift::ode::{write_trajectory, Method, SolverConfig};
use flowlift::parallel::stream_rng;
use flowlift::pose::Dataset;
use flowlift::train::FlowLifter;

use crate::config::ConfigError;

#[derive(Subcommand)]
pub enum ExportCommand {
    /// Adjacency matrix as CSV plus a grayscale PGM image.
    Adjacency(AdjacencyArgs),
    /// One sample's ODE trajectory as JSON Lines, one record per time step.
    Trajectory(TrajectoryArgs),
}

#[derive(Args)]
pub struct AdjacencyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for `adjacency.csv` and `adjacency.pgm`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
pub struct TrajectoryArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample id; defaults to the first sample.
    #[arg(long)]
    sample: Option<String>,
    /// Output `.jsonl` file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    hypotheses: usize,
    #[arg(long, default_value_t = Method::Rk2)]
    solver: Method,
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn run(cmd: ExportCommand) -> anyhow::Result<()> {
    match cmd {
        ExportCommand::Adjacency(a) => adjacency(a),
        ExportCommand::Trajectory(a) => trajectory(a),
    }
}

pub fn adjacency_csv(a: &[f32], j: usize) -> String {
    let mut s = String::new();
    for row in a.chunks(j) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

/// Binary 8-bit PGM with the value range mapped linearly onto 0..=255.
/// A constant matrix maps to mid gray.
pub fn adjacency_pgm(a: &[f32], j: usize) -> Vec<u8> {
    let lo = a.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = a.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out = format!("P5\n{j} {j}\n255\n").into_bytes();
    out.extend(a.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    out
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn adjacency(a: AdjacencyArgs) -> anyhow::Result<()> {
    let model = FlowLifter::load(&a.checkpoint)?;
    let Some(adj) = model.adjacency() else {
        return Err(ConfigError(format!("variant {} has no adjacency matrix", model.config.variant)).into());
    };
    let j = model.config.joints;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write(&a.out.join("adjacency.csv"), adjacency_csv(adj.data(), j).as_bytes())?;
    write(&a.out.join("adjacency.pgm"), &adjacency_pgm(adj.data(), j))?;
    println!("wrote {j}x{j} adjacency to {}", a.out.display());
    Ok(())
}

fn trajectory(a: TrajectoryArgs) -> anyhow::Result<()> {
    let model = FlowLifter::load(&a.checkpoint)?;
    let dataset = Dataset::load(&a.data)?;
    flowlift::train::check_compatible(&model, &dataset)?;
    let index = match &a.sample {
        Some(id) => dataset
            .samples
            .iter()
            .position(|s| &s.id == id)
            .ok_or_else(|| ConfigError(format!("no sample '{id}' in {}", a.data.display())))?,
        None if dataset.is_empty() => return Err(ConfigError("dataset is empty".into()).into()),
        None => 0,
    };
    let solver = SolverConfig {
        method: a.solver,
        steps: a.steps,
    };
    solver.validate().map_err(|e| ConfigError(e.to_string()))?;
    let s = &dataset.samples[index];
    let mut rng = stream_rng(a.seed, index as u64);
    let sampled = model.sample(&s.id, &s.heatmaps, a.hypotheses, solver, &mut rng, true, true)?;
    let traj = sampled.trajectory.expect("recorded");
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_trajectory(&a.out, &traj)?;
    println!(
        "wrote {} states of sample {} to {}",
        traj.times.len(),
        s.id,
        a.out.display()
    );
    Ok(())
}
