//! Seeded single runs and grid sweeps with accuracy-floor selection.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{report, FairnessReport};
use crate::prototypes::PrototypeEnsemble;
use crate::schedule::{select_threshold, Candidate, Selection, DEFAULT_LAMBDA_GRID};
use crate::store::EmbeddingDataset;
use crate::trainer::{predict, train, Method, TrainConfig, TrainOutcome, DEFAULT_JTT_GRID};

/// Where a run's prototypes come from.
#[derive(Debug, Clone)]
pub enum PrototypeSpec {
    Fixed(PrototypeEnsemble<f64>),
    /// Partition means over the labeled rows of `labeled`, reshuffled per seed.
    DataDriven {
        labeled: EmbeddingDataset,
        n_partitions: usize,
    },
}

impl PrototypeSpec {
    pub fn build(&self, seed: u64) -> Result<PrototypeEnsemble<f64>> {
        match self {
            PrototypeSpec::Fixed(e) => Ok(e.clone()),
            PrototypeSpec::DataDriven {
                labeled,
                n_partitions,
            } => PrototypeEnsemble::data_driven(labeled, *n_partitions, seed),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a EmbeddingDataset,
    pub validation: &'a EmbeddingDataset,
    pub test: &'a EmbeddingDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    /// Regularization threshold, or the up-weighting factor for `jtt`.
    pub param: f64,
    pub seed: u64,
    pub k_pairs: usize,
    pub validation: FairnessReport,
    pub test: FairnessReport,
}

/// Trains once and evaluates on validation and test.
pub fn run_once(
    splits: Splits<'_>,
    prototypes: Option<&PrototypeSpec>,
    config: &TrainConfig,
) -> Result<(TrainOutcome<f64>, RunResult)> {
    let ensemble = match (config.method.uses_prototypes(), prototypes) {
        (true, Some(spec)) => Some(spec.build(config.seed)?),
        (true, None) => {
            return Err(Error::MissingEnsemble {
                method: config.method.to_string(),
            })
        }
        (false, _) => None,
    };
    let outcome = train(splits.train, ensemble.as_ref(), config)?;
    let validation = report(&predict(&outcome.model, splits.validation)?)?;
    let test = report(&predict(&outcome.model, splits.test)?)?;
    let param = match config.method {
        Method::Plain => 0.0,
        Method::Jtt => config.jtt_lambda_up,
        Method::Dafair | Method::SemiDafair => config.lambda_threshold,
    };
    let result = RunResult {
        method: config.method,
        param,
        seed: config.seed,
        k_pairs: config.k_pairs,
        validation,
        test,
    };
    Ok((outcome, result))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepPlan {
    pub methods: Vec<Method>,
    pub lambda_grid: Vec<f64>,
    pub jtt_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub jobs: usize,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            methods: vec![Method::Dafair],
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            jtt_grid: DEFAULT_JTT_GRID.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub param: f64,
    pub runs: usize,
    pub validation_accuracy: f64,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSelection {
    pub method: Method,
    pub selection: Selection,
    pub row: SummaryRow,
    /// Relative test-gap reduction against the baseline, `1 - gap / baseline_gap`.
    pub gap_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub baseline: SummaryRow,
    pub rows: Vec<SummaryRow>,
    pub selections: Vec<MethodSelection>,
    pub runs: Vec<RunResult>,
}

impl SweepReport {
    pub fn selection(&self, method: Method) -> Option<&MethodSelection> {
        self.selections.iter().find(|s| s.method == method)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation over seeds.
pub fn summarize(method: Method, param: f64, runs: &[&RunResult]) -> SummaryRow {
    let acc: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
    let gap: Vec<f64> = runs
        .iter()
        .map(|r| r.test.tpr_gap_rms.unwrap_or(f64::NAN))
        .collect();
    let val: Vec<f64> = runs.iter().map(|r| r.validation.accuracy).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&acc);
    let (gap_mean, gap_std) = mean_std(&gap);
    SummaryRow {
        method,
        param,
        runs: runs.len(),
        validation_accuracy: mean_std(&val).0,
        accuracy_mean,
        accuracy_std,
        gap_mean,
        gap_std,
    }
}

fn grid_for(plan: &SweepPlan, method: Method) -> &[f64] {
    match method {
        Method::Jtt => &plan.jtt_grid,
        _ => &plan.lambda_grid,
    }
}

/// Runs the plain baseline and every `(method, grid value, seed)`
/// combination, then selects one grid value per method.
///
/// `prototypes_for` supplies the prototype source of each prototype method.
pub fn run_sweep(
    splits: Splits<'_>,
    prototypes_for: impl Fn(Method) -> Option<PrototypeSpec> + Sync,
    base: &TrainConfig,
    plan: &SweepPlan,
) -> Result<SweepReport> {
    if plan.seeds.is_empty() {
        return Err(Error::invalid("seeds", "seed list is empty"));
    }
    let mut configs = Vec::new();
    for &seed in &plan.seeds {
        configs.push(TrainConfig {
            method: Method::Plain,
            seed,
            ..base.clone()
        });
    }
    for &method in plan.methods.iter().filter(|m| **m != Method::Plain) {
        let grid = grid_for(plan, method);
        if grid.is_empty() {
            return Err(Error::invalid("grid", format!("empty grid for {method}")));
        }
        for &param in grid {
            for &seed in &plan.seeds {
                let mut c = TrainConfig {
                    method,
                    seed,
                    ..base.clone()
                };
                if method == Method::Jtt {
                    c.jtt_lambda_up = param;
                } else {
                    c.lambda_threshold = param;
                }
                configs.push(c);
            }
        }
    }
    let specs: Vec<Option<PrototypeSpec>> = plan
        .methods
        .iter()
        .map(|&m| if m.uses_prototypes() { prototypes_for(m) } else { None })
        .collect();
    let spec_for = |m: Method| {
        plan.methods
            .iter()
            .position(|&x| x == m)
            .and_then(|i| specs[i].as_ref())
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.jobs.max(1))
        .build()
        .map_err(|e| Error::invalid("jobs", e.to_string()))?;
    let mut runs: Vec<RunResult> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| run_once(splits, spec_for(c.method), c).map(|(_, r)| r))
            .collect::<Result<Vec<_>>>()
    })?;
    runs.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.param.total_cmp(&b.param))
            .then(a.seed.cmp(&b.seed))
    });

    let collect = |m: Method, p: f64| -> Vec<&RunResult> {
        runs.iter().filter(|r| r.method == m && r.param == p).collect()
    };
    let baseline = summarize(Method::Plain, 0.0, &collect(Method::Plain, 0.0));

    let mut rows = Vec::new();
    let mut selections = Vec::new();
    for &method in plan.methods.iter().filter(|m| **m != Method::Plain) {
        let method_rows: Vec<SummaryRow> = grid_for(plan, method)
            .iter()
            .map(|&p| summarize(method, p, &collect(method, p)))
            .collect();
        let candidates: Vec<Candidate> = method_rows
            .iter()
            .map(|r| Candidate {
                threshold: r.param,
                accuracy: r.validation_accuracy,
                gap: r.gap_mean,
            })
            .collect();
        let selection = select_threshold(&candidates, baseline.validation_accuracy)?;
        let row = method_rows
            .iter()
            .find(|r| r.param == selection.threshold)
            .cloned()
            .expect("selected from these rows");
        selections.push(MethodSelection {
            method,
            selection,
            gap_reduction: 1.0 - row.gap_mean / baseline.gap_mean,
            row,
        });
        rows.extend(method_rows);
    }
    Ok(SweepReport {
        baseline,
        rows,
        selections,
        runs,
    })
}

/// Aligned text rendering of a sweep summary. The gap column is shown in
/// percentage points; the JSON summary keeps the [0, 1] quantity.
pub fn render_table(report: &SweepReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<12} {:>8} {:>5} {:>9} {:>17} {:>17}",
        "method", "param", "runs", "val_acc", "test_acc", "tpr_gap_pct"
    );
    let line = |out: &mut String, r: &SummaryRow, mark: &str| {
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>5} {:>9.4} {:>8.4} ± {:<6.4} {:>8.2} ± {:<6.2}{}",
            r.method.to_string(),
            format!("{}", r.param),
            r.runs,
            r.validation_accuracy,
            r.accuracy_mean,
            r.accuracy_std,
            100.0 * r.gap_mean,
            100.0 * r.gap_std,
            mark
        );
    };
    line(&mut out, &report.baseline, "");
    for r in &report.rows {
        let selected = report
            .selection(r.method)
            .is_some_and(|s| s.selection.threshold == r.param);
        line(&mut out, r, if selected { "  <- selected" } else { "" });
    }
    for s in &report.selections {
        if !s.selection.qualified {
            let _ = writeln!(
                out,
                "{}: no qualifying threshold (fell back to most accurate value {})",
                s.method, s.selection.threshold
            );
        }
    }
    out
}
