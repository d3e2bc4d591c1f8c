//! End-to-end command-line pipeline: generate, aggregate, train, predict,
//! evaluate, strategize. Every command is deterministic given `--seed`.

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use std::path::PathBuf;

use crate::baselines::{self, BaselineFile};
use crate::gp::{self, GpModelFile, TrainedModel};
use crate::harness::{self, CvModel};
use crate::kernels::parse_kernel_spec;
use crate::market::{self, GeneratorKind, GridConfig, SyntheticSpec, Target};
use crate::strategy::{self, DayPanel, StrategyConfig, StrategyKind};
use crate::training::{self, InitStrategy, TrainConfig};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "agpm",
    about = "Spatial-temporal additive GP toolkit for ride-sourcing matching analysis",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a seeded market: order records plus the aggregated panel.
    Generate(GenerateArgs),
    /// Aggregate an order CSV into a demand/supply panel.
    Aggregate(AggregateArgs),
    /// Fit a model on a panel and save it as JSON.
    Train(TrainArgs),
    /// Predict a panel's target with a saved model.
    Predict(PredictArgs),
    /// Cross-validate a model family on a panel.
    Evaluate(EvaluateArgs),
    /// Run a relocation strategy on one panel day.
    Strategize(StrategizeArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic-market spec JSON; a small default market when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    orders_out: PathBuf,
    #[arg(long)]
    panel_out: PathBuf,
    /// Optionally write the grid geometry for later `aggregate` runs.
    #[arg(long)]
    config_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    #[arg(long)]
    orders: PathBuf,
    /// Grid geometry JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    panel_out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    panel: PathBuf,
    /// Kernel spec or preset name (AGPM1..AGPM5) for a GP model.
    #[arg(long, conflicts_with = "baseline")]
    kernel: Option<String>,
    /// Baseline family: pmq, spmq, or cdmf.
    #[arg(long)]
    baseline: Option<String>,
    #[arg(long, default_value = "matches")]
    target: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    restarts: usize,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Start every restart from a named hyperparameter preset
    /// (matching | pickup) instead of random initialization.
    #[arg(long)]
    init_preset: Option<String>,
    #[arg(long)]
    model_out: PathBuf,
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    panel: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    panel: PathBuf,
    /// Model family: agpm, pmq, spmq, or cdmf.
    #[arg(long)]
    model: String,
    /// Kernel spec or preset, required for `--model agpm`.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long, default_value = "matches")]
    target: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    restarts: usize,
    #[arg(long)]
    metrics_out: PathBuf,
    /// Pooled observed-vs-predicted scatter CSV.
    #[arg(long)]
    scatter_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StrategizeArgs {
    /// Saved GP model JSON.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    panel: PathBuf,
    /// Day index within the panel to evaluate.
    #[arg(long, default_value_t = 0)]
    day: usize,
    /// Strategy kind: QS, GS, or CS.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 10)]
    window_intervals: usize,
    #[arg(long, default_value_t = 0.10)]
    fraction: f64,
    #[arg(long, default_value_t = 100.0)]
    qs_threshold: f64,
    #[arg(long, default_value_t = 1.2)]
    gs_threshold: f64,
    #[arg(long, default_value_t = 100.0)]
    cs_threshold: f64,
    #[arg(long)]
    report_out: PathBuf,
    #[arg(long)]
    metrics_out: PathBuf,
}

fn default_spec() -> SyntheticSpec {
    SyntheticSpec {
        rows: 4,
        cols: 4,
        intervals: 20,
        n_days: 3,
        generator: GeneratorKind::Cdmf {
            params: crate::baselines::CdmfParams {
                a: 0.9,
                alpha: 0.6,
                beta: 0.4,
            },
        },
        noise_var: 0.05,
        start_date: chrono::NaiveDate::from_ymd_opt(2018, 12, 3).expect("valid date"),
        base_demand: 3.0,
        base_supply: 3.0,
        demand_bumps: vec![],
        supply_bumps: vec![],
        integer_counts: true,
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(value: &T, path: &PathBuf) -> Result<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

fn run_generate(args: &GenerateArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(path) => read_json(path)?,
        None => default_spec(),
    };
    let market = market::synthesize_market(args.seed, &spec)?;
    market::save_orders(&market.records, &args.orders_out)?;
    market::save_grid(&market.grid, &args.panel_out)?;
    if let Some(path) = &args.config_out {
        write_json(&market.grid.config, path)?;
    }
    println!(
        "generated {} orders over {} days",
        market.records.len(),
        market.grid.days.len()
    );
    Ok(())
}

fn run_aggregate(args: &AggregateArgs) -> Result<()> {
    let config: GridConfig = read_json(&args.config)?;
    let records = market::load_orders(&args.orders)?;
    let report = market::aggregate_orders(&records, &config)?;
    market::save_grid(&report.grid, &args.panel_out)?;
    println!(
        "aggregated {} records; dropped {} out-of-grid and {} out-of-horizon events; {} malformed",
        records.len(),
        report.dropped_out_of_grid,
        report.dropped_out_of_horizon,
        report.malformed.len()
    );
    for (idx, msg) in &report.malformed {
        eprintln!("record {idx}: {msg}");
    }
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let grid = market::load_grid(&args.panel, None)?;
    let target: Target = args.target.parse()?;
    let all_days: Vec<usize> = (0..grid.days.len()).collect();

    match (&args.kernel, &args.baseline) {
        (Some(kernel), None) => {
            let expr = parse_kernel_spec(kernel)?;
            let init = match &args.init_preset {
                Some(name) => {
                    InitStrategy::Preset(training::preset_theta(name)?.values().to_vec())
                }
                None => InitStrategy::LogUniformRandom,
            };
            let cfg = TrainConfig {
                restarts: args.restarts,
                max_iters: args.max_iters,
                seed: args.seed,
                init,
                ..Default::default()
            };
            let x = grid.inputs_for_days(&all_days);
            let y = grid.targets_for_days(&all_days, target);
            let report = training::optimize_hyperparams(&expr, &x, &y, &cfg)?;
            let theta =
                crate::kernels::ThetaVector::for_expr(&expr, report.best_theta.clone())?;
            let model = gp::fit_cache(&expr, &theta, x, y)?;
            write_json(&model.to_file(), &args.model_out)?;
            if let Some(path) = &args.report_out {
                write_json(&report, path)?;
            }
            println!("trained {} (lml {:.4})", expr, report.best_lml);
        }
        (None, Some(baseline)) => {
            if matches!(baseline.as_str(), "pmq" | "spmq") && target == Target::Pickups {
                return Err(Error::Incompatible(
                    "queueing baselines model order matching only; pickups are unsupported"
                        .into(),
                ));
            }
            let file = match baseline.as_str() {
                "pmq" => BaselineFile::Pmq {},
                "spmq" => {
                    let adjacency =
                        baselines::adjacency_index_lists(grid.config.rows, grid.config.cols);
                    let params = baselines::fit_spmq(&grid, &adjacency)?;
                    BaselineFile::Spmq { params }
                }
                "cdmf" => {
                    let mut samples = Vec::new();
                    for &d in &all_days {
                        let day = baselines::grid_day_series(&grid, d);
                        for z in 0..day.demand.len() {
                            let (r, c) =
                                (z / grid.config.cols + 1, z % grid.config.cols + 1);
                            for i in 0..day.demand[0].len() {
                                let cell = grid.cell(d, r, c, i + 1);
                                let obs = match target {
                                    Target::Matches => cell.matches,
                                    Target::Pickups => cell.pickups,
                                };
                                samples.push(((day.demand[z][i], day.supply[z][i]), obs));
                            }
                        }
                    }
                    BaselineFile::Cdmf {
                        params: baselines::fit_cdmf(&samples)?,
                    }
                }
                other => {
                    return Err(Error::Config(format!("unknown baseline '{other}'")))
                }
            };
            write_json(&file, &args.model_out)?;
            println!("trained {baseline} baseline");
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --kernel or --baseline".into(),
            ))
        }
    }
    Ok(())
}

enum AnyModel {
    Gp(Box<TrainedModel>),
    Baseline(BaselineFile),
}

fn load_model(path: &PathBuf) -> Result<AnyModel> {
    let value: Value = read_json(path)?;
    if value.get("kernel_spec").is_some() {
        let file: GpModelFile = serde_json::from_value(value)?;
        Ok(AnyModel::Gp(Box::new(TrainedModel::from_file(&file)?)))
    } else {
        Ok(AnyModel::Baseline(serde_json::from_value(value)?))
    }
}

fn run_predict(args: &PredictArgs) -> Result<()> {
    let grid = market::load_grid(&args.panel, None)?;
    let all_days: Vec<usize> = (0..grid.days.len()).collect();
    let (rows, cols, intervals) = (grid.config.rows, grid.config.cols, grid.intervals());

    // predictions aligned with (day, r, c, t) iteration order
    let predictions: Vec<f64> = match load_model(&args.model)? {
        AnyModel::Gp(model) => {
            let x = grid.inputs_for_days(&all_days);
            gp::predict_mean(&model, &x)?.iter().copied().collect()
        }
        AnyModel::Baseline(file) => {
            let per_day = match &file {
                BaselineFile::Pmq {} => baselines::predict_grid_pmq(&grid)?,
                BaselineFile::Spmq { params } => {
                    let adjacency = baselines::adjacency_index_lists(rows, cols);
                    baselines::predict_grid_spmq(&grid, params, &adjacency)?
                }
                BaselineFile::Cdmf { params } => {
                    let mut out = std::collections::BTreeMap::new();
                    for &d in &all_days {
                        let day = baselines::grid_day_series(&grid, d);
                        let mut series = vec![vec![0.0; intervals]; rows * cols];
                        for z in 0..rows * cols {
                            for i in 0..intervals {
                                series[z][i] = baselines::cdmf_predict(
                                    day.demand[z][i],
                                    day.supply[z][i],
                                    params,
                                )?;
                            }
                        }
                        out.insert(d, series);
                    }
                    out
                }
            };
            let mut flat = Vec::new();
            for &d in &all_days {
                for series in &per_day[&d] {
                    flat.extend_from_slice(series);
                }
            }
            flat
        }
    };

    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["day", "r", "c", "t", "predicted"])?;
    let mut row = 0;
    for day in &grid.days {
        for r in 1..=rows {
            for c in 1..=cols {
                for t in 1..=intervals {
                    w.write_record([
                        day.to_string(),
                        r.to_string(),
                        c.to_string(),
                        t.to_string(),
                        predictions[row].to_string(),
                    ])?;
                    row += 1;
                }
            }
        }
    }
    w.flush()?;
    println!("wrote {} predictions", predictions.len());
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let grid = market::load_grid(&args.panel, None)?;
    let target: Target = args.target.parse()?;
    let model = match args.model.as_str() {
        "agpm" => {
            let kernel = args.kernel.clone().ok_or_else(|| {
                Error::Config("--model agpm requires --kernel".into())
            })?;
            CvModel::Agpm {
                kernel,
                train: TrainConfig {
                    restarts: args.restarts,
                    seed: args.seed,
                    ..Default::default()
                },
            }
        }
        "pmq" => CvModel::Pmq,
        "spmq" => CvModel::Spmq,
        "cdmf" => CvModel::Cdmf,
        other => return Err(Error::Config(format!("unknown model family '{other}'"))),
    };
    let report = harness::cross_validate(&grid, &model, target)?;
    write_json(&report, &args.metrics_out)?;
    if let Some(path) = &args.scatter_out {
        harness::emit_scatter(&report.pooled_observed, &report.pooled_predicted, path)?;
    }
    println!(
        "averaged: mae {:.4} rmse {:.4} r2 {:.4} over {} folds",
        report.averaged.mae,
        report.averaged.rmse,
        report.averaged.r2,
        report.per_fold.len()
    );
    Ok(())
}

fn run_strategize(args: &StrategizeArgs) -> Result<()> {
    let grid = market::load_grid(&args.panel, None)?;
    let kind: StrategyKind = args.kind.parse()?;
    let AnyModel::Gp(model) = load_model(&args.model)? else {
        return Err(Error::Config(
            "strategize requires a GP model (gradients are undefined for baselines)".into(),
        ));
    };
    let panel = DayPanel::from_grid(&grid, args.day)?;
    let config = StrategyConfig {
        window_intervals: args.window_intervals,
        fraction: args.fraction,
        qs_threshold: args.qs_threshold,
        gs_threshold: args.gs_threshold,
        gs_no_donate_band: (1.0, args.gs_threshold),
        cs_threshold: args.cs_threshold,
    };
    let adjacency = baselines::adjacency_index_lists(grid.config.rows, grid.config.cols);
    let q0 = vec![0.0; panel.n_zones()];
    let outcome = strategy::evaluate_strategy(&model, &panel, &q0, kind, &config, &adjacency)?;
    outcome.write_report(&args.report_out)?;
    outcome.write_window_metrics(grid.config.rows, grid.config.cols, &args.metrics_out)?;
    println!(
        "{:?}: Q before {:.2}, after {:.2}",
        kind, outcome.queue_before.q_total, outcome.queue_after.q_total
    );
    Ok(())
}

/// Parse `argv` and run the requested subcommand.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(Error::Config(e.to_string())),
    };
    match &cli.command {
        Command::Generate(args) => run_generate(args),
        Command::Aggregate(args) => run_aggregate(args),
        Command::Train(args) => run_train(args),
        Command::Predict(args) => run_predict(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Strategize(args) => run_strategize(args),
    }
}
