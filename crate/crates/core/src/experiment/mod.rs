//! Training runs, benchmark trials and the budget x seed x variant matrix.

pub mod config;
pub mod metrics;
pub mod session;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::discretizer::discretize;
use crate::env::{self, initial_state};
use crate::error::{Error, Result};
use crate::graph::{GraphDocument, TransitionGraph};
use crate::timewarp::RewindEvent;

pub use config::ExperimentConfig;
pub use metrics::{aggregate, compare, AggregateRow, ComparisonReport, RunMetrics, Variant};
pub use session::{Session, SessionOptions};

pub const RESULTS_CSV: &str = "results.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const AGGREGATE_JSON: &str = "aggregate.json";
pub const RUNS_JSONL: &str = "runs.jsonl";

/// Everything one training run produced.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub agent: Agent,
    pub metrics: RunMetrics,
    pub graph: TransitionGraph,
    pub events: Vec<RewindEvent>,
}

/// Trains for exactly `budget` forward steps. Rewinds cost no budget; a
/// trial still running at the boundary is cut off there.
pub fn run_training(config: &ExperimentConfig, variant: Variant, budget: u64, seed: u64) -> Result<TrainingRun> {
    let mut session = Session::new(config, variant, seed, Some(budget), SessionOptions::default())?;
    while session.steps() < budget {
        session.step()?;
    }
    let metrics = session.metrics(budget, seed);
    let graph = session.graph().clone();
    let events = session.events().to_vec();
    Ok(TrainingRun { agent: session.into_agent(), metrics, graph, events })
}

/// Runs one trial from the initial state with learning and exploration off.
/// Returns the number of steps taken, the failing one included, capped at
/// `benchmark_cap`.
pub fn run_benchmark_trial(agent: &Agent, config: &ExperimentConfig) -> Result<u64> {
    let mut state = initial_state();
    while state.time_index < config.benchmark_cap {
        let cell = discretize(&state, &config.bounds, &config.physics)?;
        let outcome = env::step(&state, agent.greedy(cell), &config.physics)?;
        if outcome.failed {
            return Ok(outcome.next_state.time_index);
        }
        state = outcome.next_state;
    }
    Ok(config.benchmark_cap)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub events: Vec<RewindEvent>,
    pub graph: TransitionGraph,
}

pub fn run_cell(config: &ExperimentConfig, variant: Variant, budget: u64, seed: u64) -> Result<RunOutput> {
    let run = run_training(config, variant, budget, seed)?;
    let benchmark = run_benchmark_trial(&run.agent, config)?;
    Ok(RunOutput {
        metrics: RunMetrics { benchmark_trial_steps: benchmark, ..run.metrics },
        events: run.events,
        graph: run.graph,
    })
}

pub fn variants(config: &ExperimentConfig) -> Vec<Variant> {
    if config.timewarp_enabled {
        vec![Variant::Baseline, Variant::Timewarp]
    } else {
        vec![Variant::Baseline]
    }
}

/// Runs every budget x seed x variant cell. Both variants of a pair share
/// the seed. Output order is budget, then variant, then seed, regardless of
/// `parallelism`; a `parallelism` of 0 uses every core.
pub fn run_matrix(config: &ExperimentConfig, parallelism: usize) -> Result<Vec<RunOutput>> {
    config.validate()?;
    let mut cells = Vec::new();
    for &budget in &config.budgets {
        for variant in variants(config) {
            for &seed in &config.seeds {
                cells.push((budget, variant, seed));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        cells
            .par_iter()
            .map(|&(budget, variant, seed)| run_cell(config, variant, budget, seed))
            .collect()
    })
}

/// One line of `runs.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Run(RunMetrics),
    Rewind {
        budget: u64,
        variant: Variant,
        seed: u64,
        #[serde(flatten)]
        event: RewindEvent,
    },
    Graph {
        budget: u64,
        variant: Variant,
        seed: u64,
        #[serde(flatten)]
        graph: GraphDocument,
    },
    ParamChange {
        step: u64,
        name: String,
        value: serde_json::Value,
    },
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log record serializes")
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn flush(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct AggregateCsvRow {
    budget: u64,
    variant: Variant,
    runs: usize,
    best_trial_steps_mean: f64,
    best_trial_steps_std: Option<f64>,
    benchmark_trial_steps_mean: f64,
    benchmark_trial_steps_std: Option<f64>,
    unique_states_mean: f64,
    unique_states_std: Option<f64>,
    trial_count_mean: f64,
    rewind_count_mean: f64,
}

/// Writes `results.csv`, `aggregate.csv`, `aggregate.json` and `runs.jsonl`.
pub fn write_outputs(out_dir: &Path, runs: &[RunOutput]) -> Result<Vec<AggregateRow>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let path = out_dir.join(RESULTS_CSV);
    let mut csv = csv::Writer::from_writer(create(&path)?);
    for run in runs {
        csv.serialize(run.metrics)?;
    }
    csv.flush().map_err(|e| Error::io(&path, e))?;

    let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.metrics).collect();
    let rows = aggregate(&metrics);

    let path = out_dir.join(AGGREGATE_CSV);
    let mut csv = csv::Writer::from_writer(create(&path)?);
    for row in &rows {
        for variant in [Variant::Baseline, Variant::Timewarp] {
            if let Some(s) = row.summary(variant) {
                csv.serialize(AggregateCsvRow {
                    budget: row.budget,
                    variant,
                    runs: s.runs,
                    best_trial_steps_mean: s.best_trial_steps.mean,
                    best_trial_steps_std: s.best_trial_steps.std,
                    benchmark_trial_steps_mean: s.benchmark_trial_steps.mean,
                    benchmark_trial_steps_std: s.benchmark_trial_steps.std,
                    unique_states_mean: s.unique_states.mean,
                    unique_states_std: s.unique_states.std,
                    trial_count_mean: s.trial_count.mean,
                    rewind_count_mean: s.rewind_count.mean,
                })?;
            }
        }
    }
    csv.flush().map_err(|e| Error::io(&path, e))?;

    let path = out_dir.join(AGGREGATE_JSON);
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &rows)?;
    w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    flush(w, &path)?;

    let path = out_dir.join(RUNS_JSONL);
    let mut w = create(&path)?;
    for run in runs {
        let m = run.metrics;
        let mut lines = vec![LogRecord::Run(m)];
        lines.extend(run.events.iter().map(|&event| LogRecord::Rewind {
            budget: m.budget,
            variant: m.variant,
            seed: m.seed,
            event,
        }));
        lines.push(LogRecord::Graph {
            budget: m.budget,
            variant: m.variant,
            seed: m.seed,
            graph: run.graph.to_document(),
        });
        for line in lines {
            writeln!(w, "{}", line.to_line()).map_err(|e| Error::io(&path, e))?;
        }
    }
    flush(w, &path)?;
    Ok(rows)
}

/// Runs the full matrix and writes every output file into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path, parallelism: usize) -> Result<Vec<AggregateRow>> {
    let runs = run_matrix(config, parallelism)?;
    write_outputs(out_dir, &runs)
}

pub fn read_results(path: &Path) -> Result<Vec<RunMetrics>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file).deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

/// Selects the transition graph of one run from a `runs.jsonl` log. Unset
/// filters match anything; the first matching graph wins.
pub fn graph_from_log(
    records: &[LogRecord],
    budget: Option<u64>,
    variant: Option<Variant>,
    seed: Option<u64>,
) -> Option<TransitionGraph> {
    records.iter().find_map(|r| match r {
        LogRecord::Graph { budget: b, variant: v, seed: s, graph }
            if budget.is_none_or(|x| x == *b)
                && variant.is_none_or(|x| x == *v)
                && seed.is_none_or(|x| x == *s) =>
        {
            Some(TransitionGraph::from_document(graph))
        }
        _ => None,
    })
}

/// Splits results by variant and compares the candidate variant against the
/// reference one.
pub fn compare_result_sets(
    reference: &[RunMetrics],
    reference_variant: Variant,
    candidate: &[RunMetrics],
    candidate_variant: Variant,
) -> Result<ComparisonReport> {
    let pick = |runs: &[RunMetrics], v: Variant| runs.iter().filter(|r| r.variant == v).copied().collect::<Vec<_>>();
    compare(&pick(reference, reference_variant), &pick(candidate, candidate_variant))
}
