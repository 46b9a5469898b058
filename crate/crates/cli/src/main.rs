//! `multifocal` command line: planning numbers, depth filtering, retinal
//! renders, control-loop simulation, target analysis and the retinal oracle.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod target;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use multifocal::config::ScenarioConfig;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "multifocal", version, about = "Dense focal stack display toolkit")]
struct Cli {
    /// Scenario file (TOML). Without it every value is the prototype default.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for detector noise in `simulate`. Runs without a seed are noiseless.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plane counts, lens-range feasibility, field of view and duty factor.
    Plan(PlanArgs),
    /// Decompose a scene image and depth map into a focal stack.
    Filter(FilterArgs),
    /// Render retinal images of a focal stack at one or more eye focus values.
    Render(RenderArgs),
    /// Run the lens-tracking control loop and report throughput and depth error.
    Simulate(SimulateArgs),
    /// Measure spot diameters or the MTF of a rendered target.
    Analyze(AnalyzeArgs),
    /// Compare the retinal bandwidth oracle with the closed-form model.
    Oracle(OracleArgs),
    /// Generate a PSF-grid or slit target stack.
    Target(TargetArgs),
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Required retinal resolution in cycles per degree.
    #[arg(long, default_value_t = 30.0)]
    target_cpd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Direct,
    Linear,
    Opt,
}

#[derive(Debug, Args)]
struct FilterArgs {
    /// 8 or 16-bit grayscale or RGB raster.
    #[arg(long)]
    image: PathBuf,
    /// DFDM depth map in diopters.
    #[arg(long)]
    depth: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Linear)]
    method: Method,
    /// Also write a PNG preview of every plane.
    #[arg(long)]
    previews: bool,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Focal stack directory.
    #[arg(long)]
    stack: PathBuf,
    /// Comma-separated diopters, or `sweep:<near>:<far>:<steps>`. Defaults to
    /// the configured sweep.
    #[arg(long)]
    focus: Option<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Overrides `controller.duration_s`.
    #[arg(long)]
    duration_s: Option<f64>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Target directory written by `target`.
    #[arg(long)]
    target: PathBuf,
    /// Rendered image (`.dfpl` raster or PNG).
    #[arg(long)]
    image: PathBuf,
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Pupil diameters in millimetres.
    #[arg(long, value_delimiter = ',', default_values_t = [2.0, 3.0, 4.0, 5.0, 6.0])]
    pupil_mm: Vec<f64>,
    /// Eye focus mismatch from the plane in diopters.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.05, 0.5, 1.0, 2.0])]
    mismatch_diopter: Vec<f64>,
    /// Plane depths in diopters.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 2.0, 3.0, 4.0])]
    plane_diopter: Vec<f64>,
}

#[derive(Debug, Args)]
struct TargetArgs {
    #[command(subcommand)]
    kind: TargetKind,
}

#[derive(Debug, Subcommand)]
enum TargetKind {
    /// One square spot per plane on a grid set by the `[render]` section.
    Psf,
    /// A one-pixel vertical line on a single plane.
    Slit {
        /// 1-based plane index in the configured layout.
        #[arg(long, default_value_t = 5)]
        plane: usize,
        #[arg(long, default_value_t = 512)]
        width: usize,
        #[arg(long, default_value_t = 128)]
        height: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Plan(_) => "plan",
            Command::Filter(_) => "filter",
            Command::Render(_) => "render",
            Command::Simulate(_) => "simulate",
            Command::Analyze(_) => "analyze",
            Command::Oracle(_) => "oracle",
            Command::Target(_) => "target",
        }
    }
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    args: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    config: &'a ScenarioConfig,
}

fn write_manifest(out: &Path, command: &'static str, seed: Option<u64>, config: &ScenarioConfig) -> Result<()> {
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        args: std::env::args().skip(1).collect(),
        seed,
        config,
    };
    let path = out.join("run_manifest.toml");
    std::fs::write(&path, toml::to_string(&manifest)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => ScenarioConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => ScenarioConfig::default(),
    };
    let out = &cli.out;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_manifest(out, cli.command.name(), cli.seed, &config)?;
    match cli.command {
        Command::Plan(a) => commands::plan(&config, a.target_cpd),
        Command::Filter(a) => commands::filter(&config, out, &a.image, &a.depth, a.method, a.previews),
        Command::Render(a) => commands::render(&config, out, &a.stack, a.focus.as_deref()),
        Command::Simulate(a) => commands::simulate(&config, out, cli.seed, a.duration_s),
        Command::Analyze(a) => commands::analyze(out, &a.target, &a.image),
        Command::Oracle(a) => commands::oracle(&config, out, &a.pupil_mm, &a.mismatch_diopter, &a.plane_diopter),
        Command::Target(a) => match a.kind {
            TargetKind::Psf => target::psf(&config, out),
            TargetKind::Slit { plane, width, height } => target::slit(&config, out, plane, width, height),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
