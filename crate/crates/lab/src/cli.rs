//! Subcommands of the `timewarp` binary.

use std::fs;
use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use timewarp_core::experiment::{
    compare_result_sets, graph_from_log, read_log, read_results, run_experiment, ExperimentConfig, Variant,
    RESULTS_CSV,
};
use timewarp_core::graph::GraphFormat;

use crate::control::{self, ServiceOptions, DEFAULT_PORT};

#[derive(Debug, Parser)]
#[command(name = "timewarp", version, about = "Rewind-on-failure reinforcement learning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train baseline and timewarp agents over every budget and seed.
    Run(RunArgs),
    /// Compare two result sets written by `run`.
    Compare(CompareArgs),
    /// Print the state transition graph of one run.
    ExportGraph(ExportArgs),
    /// Host a live session behind a WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub parallelism: usize,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Reference run directory (or its results.csv).
    #[arg(long)]
    pub a: PathBuf,
    /// Candidate run directory (or its results.csv).
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "baseline")]
    pub variant_a: Variant,
    #[arg(long, default_value = "timewarp")]
    pub variant_b: Variant,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Dot,
    Json,
}

impl From<FormatArg> for GraphFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Dot => GraphFormat::Dot,
            FormatArg::Json => GraphFormat::Json,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// A runs.jsonl log.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum, default_value = "dot")]
    pub format: FormatArg,
    #[arg(long)]
    pub budget: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    pub host: IpAddr,
    /// Seed of the live session; defaults to the first configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "timewarp")]
    pub variant: Variant,
    #[arg(long, default_value_t = 50.0)]
    pub steps_per_second: f64,
    /// Start stepping immediately instead of waiting for a run command.
    #[arg(long)]
    pub running: bool,
    /// Append parameter changes to this runs.jsonl file.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

pub fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    match path {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn results_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(RESULTS_CSV)
    } else {
        p.to_path_buf()
    }
}

pub fn run(args: &RunArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let config = load_config(Some(&args.config))?;
    let rows = run_experiment(&config, &args.out, args.parallelism)?;
    writeln!(out, "{:>8} {:>9} {:>12} {:>14} {:>8}", "budget", "variant", "best_trial", "benchmark", "unique")?;
    for row in &rows {
        for (variant, summary) in [(Variant::Baseline, &row.baseline), (Variant::Timewarp, &row.timewarp)] {
            if let Some(s) = summary {
                writeln!(
                    out,
                    "{:>8} {:>9} {:>12.1} {:>14.1} {:>8.1}",
                    row.budget,
                    variant,
                    s.best_trial_steps.mean,
                    s.benchmark_trial_steps.mean,
                    s.unique_states.mean
                )?;
            }
        }
    }
    writeln!(out, "wrote {}", args.out.display())?;
    Ok(())
}

pub fn compare(args: &CompareArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let (pa, pb) = (results_path(&args.a), results_path(&args.b));
    let a = read_results(&pa).with_context(|| format!("reading {}", pa.display()))?;
    let b = read_results(&pb).with_context(|| format!("reading {}", pb.display()))?;
    let report = compare_result_sets(&a, args.variant_a, &b, args.variant_b)?;
    write!(out, "{report}")?;
    Ok(())
}

pub fn export_graph(args: &ExportArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let records = read_log(&args.run).with_context(|| format!("reading {}", args.run.display()))?;
    let Some(graph) = graph_from_log(&records, args.budget, args.variant, args.seed) else {
        bail!("no transition graph in {} matches the filters", args.run.display());
    };
    match &args.out {
        Some(path) => {
            let mut buf = Vec::new();
            graph.export(args.format.into(), &mut buf)?;
            fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
        }
        None => graph.export(args.format.into(), &mut { out })?,
    }
    Ok(())
}

pub async fn serve(args: &ServeArgs) -> anyhow::Result<()> {
    let config = load_config(args.config.as_deref())?;
    let options = ServiceOptions {
        seed: args.seed.or_else(|| config.seeds.first().copied()).unwrap_or(1),
        variant: args.variant,
        steps_per_second: args.steps_per_second,
        start_running: args.running,
        log_path: args.log.clone(),
    };
    let handle = control::start(&config, options, SocketAddr::new(args.host, args.port)).await?;
    println!("serving on {}", handle.ws_url());
    tokio::select! {
        result = handle.wait() => result,
        _ = tokio::signal::ctrl_c() => Ok(()),
    }
}
