use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Timewarp,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Timewarp => "timewarp",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "timewarp" => Ok(Variant::Timewarp),
            other => Err(Error::InvalidParam(format!("unknown variant {other:?}"))),
        }
    }
}

/// One training run followed by its benchmark trial. Field order is the
/// `results.csv` column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub budget: u64,
    pub variant: Variant,
    pub seed: u64,
    pub best_trial_steps: u64,
    pub benchmark_trial_steps: u64,
    pub unique_states: u64,
    pub trial_count: u64,
    pub rewind_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent with fewer than two runs.
    pub std: Option<f64>,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: 0.0, std: None };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n >= 2).then(|| {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (n - 1) as f64).sqrt()
        });
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub runs: usize,
    pub best_trial_steps: Stat,
    pub benchmark_trial_steps: Stat,
    pub unique_states: Stat,
    pub trial_count: Stat,
    pub rewind_count: Stat,
}

impl VariantSummary {
    pub fn of(runs: &[&RunMetrics]) -> Self {
        let stat = |f: fn(&RunMetrics) -> u64| Stat::of(&runs.iter().map(|r| f(r) as f64).collect::<Vec<_>>());
        Self {
            runs: runs.len(),
            best_trial_steps: stat(|r| r.best_trial_steps),
            benchmark_trial_steps: stat(|r| r.benchmark_trial_steps),
            unique_states: stat(|r| r.unique_states),
            trial_count: stat(|r| r.trial_count),
            rewind_count: stat(|r| r.rewind_count),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub budget: u64,
    pub baseline: Option<VariantSummary>,
    pub timewarp: Option<VariantSummary>,
}

impl AggregateRow {
    pub fn summary(&self, variant: Variant) -> Option<&VariantSummary> {
        match variant {
            Variant::Baseline => self.baseline.as_ref(),
            Variant::Timewarp => self.timewarp.as_ref(),
        }
    }
}

/// Per-budget means and deviations across seeds, budgets ascending.
pub fn aggregate(runs: &[RunMetrics]) -> Vec<AggregateRow> {
    let budgets: BTreeSet<u64> = runs.iter().map(|r| r.budget).collect();
    budgets
        .into_iter()
        .map(|budget| {
            let pick = |variant: Variant| {
                let chosen: Vec<&RunMetrics> =
                    runs.iter().filter(|r| r.budget == budget && r.variant == variant).collect();
                (!chosen.is_empty()).then(|| VariantSummary::of(&chosen))
            };
            AggregateRow { budget, baseline: pick(Variant::Baseline), timewarp: pick(Variant::Timewarp) }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    BestTrialSteps,
    BenchmarkTrialSteps,
    UniqueStates,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::BestTrialSteps, Metric::BenchmarkTrialSteps, Metric::UniqueStates];

    pub fn of(self, run: &RunMetrics) -> u64 {
        match self {
            Metric::BestTrialSteps => run.best_trial_steps,
            Metric::BenchmarkTrialSteps => run.benchmark_trial_steps,
            Metric::UniqueStates => run.unique_states,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::BestTrialSteps => "best_trial_steps",
            Metric::BenchmarkTrialSteps => "benchmark_trial_steps",
            Metric::UniqueStates => "unique_states",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub reference_mean: f64,
    pub candidate_mean: f64,
    /// `candidate / reference`; 1 when both are zero, absent when only the
    /// reference is zero.
    pub ratio: Option<f64>,
}

impl MetricComparison {
    fn new(reference_mean: f64, candidate_mean: f64) -> Self {
        let ratio = if reference_mean == 0.0 {
            (candidate_mean == 0.0).then_some(1.0)
        } else {
            Some(candidate_mean / reference_mean)
        };
        Self { reference_mean, candidate_mean, ratio }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetComparison {
    pub budget: u64,
    pub best_trial_steps: MetricComparison,
    pub benchmark_trial_steps: MetricComparison,
    pub unique_states: MetricComparison,
}

impl BudgetComparison {
    pub fn metric(&self, metric: Metric) -> &MetricComparison {
        match metric {
            Metric::BestTrialSteps => &self.best_trial_steps,
            Metric::BenchmarkTrialSteps => &self.benchmark_trial_steps,
            Metric::UniqueStates => &self.unique_states,
        }
    }
}

/// One-sided paired sign test of "candidate > reference".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub budget: u64,
    pub metric: Metric,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub budgets: Vec<BudgetComparison>,
    /// Mean over budgets of `(ratio - 1) * 100`, per metric.
    pub best_trial_improvement_pct: f64,
    pub benchmark_improvement_pct: f64,
    pub unique_states_improvement_pct: f64,
    pub sign_tests: Vec<SignTest>,
}

/// Upper tail `P(X >= wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p_value(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut coeff = 1.0f64;
    let mut tail = 0.0f64;
    for k in 0..=n {
        if k > 0 {
            coeff = coeff * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            tail += coeff;
        }
    }
    tail / 2f64.powi(n as i32)
}

/// Compares a candidate result set against a reference one, budget by
/// budget, pairing runs by seed for the sign tests at the four largest
/// budgets.
pub fn compare(reference: &[RunMetrics], candidate: &[RunMetrics]) -> Result<ComparisonReport> {
    let budgets_of = |runs: &[RunMetrics]| runs.iter().map(|r| r.budget).collect::<BTreeSet<_>>();
    let budgets = budgets_of(reference);
    if budgets != budgets_of(candidate) {
        return Err(Error::MismatchedBudgets);
    }

    let mean = |runs: &[RunMetrics], budget: u64, metric: Metric| {
        let v: Vec<f64> = runs.iter().filter(|r| r.budget == budget).map(|r| metric.of(r) as f64).collect();
        Stat::of(&v).mean
    };
    let rows: Vec<BudgetComparison> = budgets
        .iter()
        .map(|&budget| {
            let cmp = |m| MetricComparison::new(mean(reference, budget, m), mean(candidate, budget, m));
            BudgetComparison {
                budget,
                best_trial_steps: cmp(Metric::BestTrialSteps),
                benchmark_trial_steps: cmp(Metric::BenchmarkTrialSteps),
                unique_states: cmp(Metric::UniqueStates),
            }
        })
        .collect();

    let improvement = |metric: Metric| {
        let ratios: Vec<f64> = rows.iter().filter_map(|r| r.metric(metric).ratio).collect();
        if ratios.is_empty() {
            0.0
        } else {
            ratios.iter().map(|r| (r - 1.0) * 100.0).sum::<f64>() / ratios.len() as f64
        }
    };

    let mut sign_tests = Vec::new();
    let largest: Vec<u64> = budgets.iter().rev().take(4).rev().copied().collect();
    for budget in largest {
        let by_seed = |runs: &[RunMetrics]| -> BTreeMap<u64, RunMetrics> {
            runs.iter().filter(|r| r.budget == budget).map(|r| (r.seed, *r)).collect()
        };
        let (a, b) = (by_seed(reference), by_seed(candidate));
        for metric in Metric::ALL {
            let (mut wins, mut losses, mut ties) = (0, 0, 0);
            for (seed, ra) in &a {
                if let Some(rb) = b.get(seed) {
                    match metric.of(rb).cmp(&metric.of(ra)) {
                        std::cmp::Ordering::Greater => wins += 1,
                        std::cmp::Ordering::Less => losses += 1,
                        std::cmp::Ordering::Equal => ties += 1,
                    }
                }
            }
            sign_tests.push(SignTest {
                budget,
                metric,
                wins,
                losses,
                ties,
                p_value: sign_test_p_value(wins, wins + losses),
            });
        }
    }

    Ok(ComparisonReport {
        best_trial_improvement_pct: improvement(Metric::BestTrialSteps),
        benchmark_improvement_pct: improvement(Metric::BenchmarkTrialSteps),
        unique_states_improvement_pct: improvement(Metric::UniqueStates),
        budgets: rows,
        sign_tests,
    })
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ratio = |c: &MetricComparison| c.ratio.map_or_else(|| "n/a".to_string(), |r| format!("{r:.3}"));
        writeln!(
            f,
            "{:>8}  {:>12} {:>12} {:>7}  {:>12} {:>12} {:>7}  {:>8} {:>8} {:>7}",
            "budget", "best(ref)", "best(cand)", "ratio", "bench(ref)", "bench(cand)", "ratio", "uniq(ref)", "uniq(cand)", "ratio"
        )?;
        for row in &self.budgets {
            let (b, m, u) = (&row.best_trial_steps, &row.benchmark_trial_steps, &row.unique_states);
            writeln!(
                f,
                "{:>8}  {:>12.1} {:>12.1} {:>7}  {:>12.1} {:>12.1} {:>7}  {:>8.1} {:>8.1} {:>7}",
                row.budget,
                b.reference_mean,
                b.candidate_mean,
                ratio(b),
                m.reference_mean,
                m.candidate_mean,
                ratio(m),
                u.reference_mean,
                u.candidate_mean,
                ratio(u)
            )?;
        }
        writeln!(f, "best trial improvement:      {:+.1}%", self.best_trial_improvement_pct)?;
        writeln!(f, "benchmark trial improvement: {:+.1}%", self.benchmark_improvement_pct)?;
        writeln!(f, "unique states improvement:   {:+.1}%", self.unique_states_improvement_pct)?;
        for t in &self.sign_tests {
            writeln!(
                f,
                "sign test budget={} {}: wins={} losses={} ties={} p={:.4}",
                t.budget,
                t.metric.name(),
                t.wins,
                t.losses,
                t.ties,
                t.p_value
            )?;
        }
        Ok(())
    }
}
