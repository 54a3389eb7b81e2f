mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dafair_core::experiment::{render_table, run_once, run_sweep, PrototypeSpec, Splits, SweepPlan};
use dafair_core::metrics::{compare, ReportDelta};
use dafair_core::synthetic::{make_synthetic, write_synthetic, SyntheticParams};
use dafair_core::trainer::write_trace;
use dafair_core::{
    load_dataset, load_prototypes, predict, report, EmbeddingDataset, Ensemble, FairnessReport, Method, ModelRecord,
    PredictionLog,
};
use serde::Serialize;

use config::{Command, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "dafair", version, about = "Fairness-regularized classifiers over frozen text embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model and write its parameters, loss trace and prediction logs.
    Train(ExperimentArgs),
    /// Run the plain baseline and a threshold grid per method over several seeds.
    Sweep(ExperimentArgs),
    /// Report fairness metrics for one prediction log, or compare two.
    Evaluate(EvaluateArgs),
    /// Generate a seeded synthetic dataset with an injected group shortcut.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config (see README).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding train/, validation/, test/ and optionally
    /// prototypes.json, as written by make-synthetic.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    lambda_threshold: Option<f64>,
    #[arg(long)]
    k_pairs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// One prediction log, or two (before, after) to compare.
    #[arg(num_args = 0..=2)]
    logs: Vec<PathBuf>,
    /// Model file to evaluate instead of a log (requires --dataset).
    #[arg(long, requires = "dataset", conflicts_with = "logs")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    dataset: Option<PathBuf>,
    /// Print an aligned text table instead of JSON.
    #[arg(long)]
    table: bool,
    /// Also write the JSON output to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Strength of the group shortcut, in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    bias: f64,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DAFAIR_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Sweep(a) => cmd_sweep(&a),
        Cmd::Evaluate(a) => cmd_evaluate(&a),
        Cmd::MakeSynthetic(a) => cmd_make_synthetic(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn resolve(args: &ExperimentArgs, command: Command) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let overrides = Overrides {
        data: args.data.clone(),
        method: args.method,
        lambda_threshold: args.lambda_threshold,
        k_pairs: args.k_pairs,
        seed: args.seed,
        jobs: args.jobs,
        out: args.out.clone(),
    };
    config.apply(&overrides, command);
    config.validate(command)?;
    fs::create_dir_all(config.out_dir()).with_context(|| format!("creating {}", config.out_dir().display()))?;
    config.echo()?;
    Ok(config)
}

struct Data {
    train: EmbeddingDataset,
    validation: EmbeddingDataset,
    test: EmbeddingDataset,
}

impl Data {
    fn load(config: &ExperimentConfig) -> Result<Self> {
        let load = |p: &Option<PathBuf>| {
            let p = p.as_deref().expect("validated");
            load_dataset(p).with_context(|| format!("loading dataset {}", p.display()))
        };
        Ok(Self {
            train: load(&config.train)?,
            validation: load(&config.validation)?,
            test: load(&config.test)?,
        })
    }

    fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.train,
            validation: &self.validation,
            test: &self.test,
        }
    }
}

fn prototype_spec(config: &ExperimentConfig, data: &Data, method: Method) -> Result<Option<PrototypeSpec>> {
    match method {
        Method::Dafair => {
            let path = config.prototypes.as_deref().expect("validated");
            let file = load_prototypes(path, data.train.dim())
                .with_context(|| format!("loading prototypes {}", path.display()))?;
            Ok(Some(PrototypeSpec::Fixed(Ensemble::from_prototype_file(&file)?)))
        }
        Method::SemiDafair => {
            let labeled = match config.labels_per_group {
                Some(n) => data.train.with_group_label_budget(n),
                None => data.train.clone(),
            };
            Ok(Some(PrototypeSpec::DataDriven {
                labeled,
                n_partitions: config.n_partitions,
            }))
        }
        Method::Plain | Method::Jtt => Ok(None),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn warn_all(context: &str, r: &FairnessReport) {
    for w in &r.warnings {
        log::warn!("{context}: {w}");
    }
}

fn cmd_train(args: &ExperimentArgs) -> Result<()> {
    let config = resolve(args, Command::Train)?;
    let data = Data::load(&config)?;
    let spec = prototype_spec(&config, &data, config.training.method)?;
    log::info!("training {} with seed {}", config.training.method, config.training.seed);
    let (outcome, result) = run_once(data.splits(), spec.as_ref(), &config.training)?;

    let out = config.out_dir();
    write_json(&out.join("model.json"), &ModelRecord::from(&outcome.model))?;
    write_trace(&outcome.trace, out.join("trace.jsonl"))?;
    fs::create_dir_all(out.join("predictions"))?;
    for (name, ds) in [("train", &data.train), ("validation", &data.validation), ("test", &data.test)] {
        let log = predict(&outcome.model, ds)?;
        log.save(out.join("predictions").join(format!("{name}.json")))?;
        let r = report(&log)?;
        warn_all(name, &r);
        write_json(&out.join("reports").join(format!("{name}.json")), &r)?;
    }
    if let Some(n) = outcome.upweighted {
        log::info!("jtt upweighted {n} training rows");
    }
    emit(&(serde_json::to_string_pretty(&result)? + "\n"))?;
    Ok(())
}

fn cmd_sweep(args: &ExperimentArgs) -> Result<()> {
    let config = resolve(args, Command::Sweep)?;
    let data = Data::load(&config)?;
    let mut specs = Vec::new();
    for &m in &config.methods {
        specs.push((m, prototype_spec(&config, &data, m)?));
    }
    let plan = SweepPlan {
        methods: config.methods.clone(),
        lambda_grid: config.lambda_grid.clone(),
        jtt_grid: config.jtt_grid.clone(),
        seeds: config.seeds.clone(),
        jobs: config.jobs,
    };
    let lookup = |m: Method| specs.iter().find(|(x, _)| *x == m).and_then(|(_, s)| s.clone());
    let sweep = run_sweep(data.splits(), lookup, &config.training, &plan)?;

    let out = config.out_dir();
    for run in &sweep.runs {
        let dir = out.join("runs").join(format!("{}-{}-seed{}", run.method, run.param, run.seed));
        write_json(&dir.join("report.json"), run)?;
    }
    let table = render_table(&sweep);
    write_json(&out.join("summary.json"), &sweep)?;
    fs::write(out.join("summary.txt"), &table)?;
    for s in &sweep.selections {
        if !s.selection.qualified {
            log::warn!("{}: no qualifying threshold", s.method);
        }
    }
    emit(&table)
}

#[derive(Serialize)]
struct Comparison {
    before: FairnessReport,
    after: FairnessReport,
    delta: ReportDelta,
}

fn load_log(path: &Path) -> Result<PredictionLog> {
    PredictionLog::load(path).with_context(|| format!("loading prediction log {}", path.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

fn report_table(r: &FairnessReport) -> String {
    let rows = [
        ("accuracy", Some(r.accuracy)),
        ("tpr_gap_rms", r.tpr_gap_rms),
        ("independence", r.independence),
        ("separation", r.separation),
        ("sufficiency", r.sufficiency),
    ];
    rows.iter().map(|(k, v)| format!("{k:<14} {:>12}\n", fmt_opt(*v))).collect()
}

fn comparison_table(c: &Comparison) -> String {
    let rows = [
        ("accuracy", Some(c.before.accuracy), Some(c.after.accuracy), Some(c.delta.accuracy_change)),
        ("tpr_gap_rms", c.before.tpr_gap_rms, c.after.tpr_gap_rms, c.delta.tpr_gap_change),
        ("independence", c.before.independence, c.after.independence, c.delta.independence_change),
        ("separation", c.before.separation, c.after.separation, c.delta.separation_change),
        ("sufficiency", c.before.sufficiency, c.after.sufficiency, c.delta.sufficiency_change),
    ];
    let mut out = format!("{:<14} {:>12} {:>12} {:>12}\n", "metric", "before", "after", "delta");
    for (k, b, a, d) in rows {
        out += &format!("{k:<14} {:>12} {:>12} {:>12}\n", fmt_opt(b), fmt_opt(a), fmt_opt(d));
    }
    out += &format!("{:<14} {:>12}\n", "gap_reduction", fmt_opt(c.delta.gap_reduction));
    out
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (json, table) = match (&args.model, args.logs.as_slice()) {
        (Some(model), []) => {
            let dataset = args.dataset.as_deref().expect("required by clap");
            let text = fs::read_to_string(model).with_context(|| format!("reading model {}", model.display()))?;
            let record: ModelRecord =
                serde_json::from_str(&text).with_context(|| format!("parsing model {}", model.display()))?;
            let model = record.into_model::<f64>()?;
            let ds = load_dataset(dataset).with_context(|| format!("loading dataset {}", dataset.display()))?;
            let r = report(&predict(&model, &ds)?)?;
            warn_all("evaluate", &r);
            (serde_json::to_string_pretty(&r)?, report_table(&r))
        }
        (None, [one]) => {
            let r = report(&load_log(one)?)?;
            warn_all("evaluate", &r);
            (serde_json::to_string_pretty(&r)?, report_table(&r))
        }
        (None, [before, after]) => {
            let before = report(&load_log(before)?)?;
            let after = report(&load_log(after)?)?;
            let c = Comparison {
                delta: compare(&before, &after),
                before,
                after,
            };
            (serde_json::to_string_pretty(&c)?, comparison_table(&c))
        }
        _ => bail!("evaluate needs one or two prediction logs, or --model with --dataset"),
    };
    if let Some(out) = &args.out {
        fs::write(out, json.clone() + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    if args.table {
        emit(&table)
    } else {
        emit(&(json + "\n"))
    }
}

fn cmd_make_synthetic(args: &SyntheticArgs) -> Result<()> {
    let params = SyntheticParams::new(args.n, args.dim, args.bias, args.seed);
    let data = make_synthetic(&params)?;
    write_synthetic(&data, &args.out)?;
    log::info!("wrote synthetic data to {}", args.out.display());
    Ok(())
}
