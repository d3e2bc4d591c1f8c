//! Accuracy metrics, leave-one-day-out cross-validation over the four model
//! families, and plot-data emission.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::baselines;
use crate::gp;
use crate::kernels::parse_kernel_spec;
use crate::market::{ObservationGrid, Target};
use crate::training::{self, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
    pub n: usize,
}

/// MAE, RMSE and R-squared of predictions against observations. R-squared is
/// undefined for a constant observation vector.
pub fn compute_metrics(observed: &[f64], predicted: &[f64]) -> Result<Metrics> {
    if observed.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} observations vs {} predictions",
            observed.len(),
            predicted.len()
        )));
    }
    let n = observed.len();
    if n == 0 {
        return Err(Error::Data("metrics need at least one point".into()));
    }
    let nf = n as f64;
    let mae = observed
        .iter()
        .zip(predicted)
        .map(|(o, p)| (o - p).abs())
        .sum::<f64>()
        / nf;
    let sse = observed
        .iter()
        .zip(predicted)
        .map(|(o, p)| (o - p) * (o - p))
        .sum::<f64>();
    let rmse = (sse / nf).sqrt();
    let mean = observed.iter().sum::<f64>() / nf;
    let sst = observed.iter().map(|o| (o - mean) * (o - mean)).sum::<f64>();
    if sst == 0.0 {
        return Err(Error::Data(
            "R-squared undefined for constant observations".into(),
        ));
    }
    Ok(Metrics {
        mae,
        rmse,
        r2: 1.0 - sse / sst,
        n,
    })
}

/// One leave-one-day-out fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub held_out_day: String,
    pub training_days: Vec<String>,
}

/// Model family evaluated under cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_kind", rename_all = "lowercase")]
pub enum CvModel {
    Agpm { kernel: String, train: TrainConfig },
    Pmq,
    Spmq,
    Cdmf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldSpec>,
    pub per_fold: Vec<Metrics>,
    /// Arithmetic mean of the per-fold metric values.
    pub averaged: Metrics,
    /// Metrics over all held-out points pooled into one vector.
    pub pooled: Metrics,
    /// Pooled held-out observations/predictions in fold order, for scatter
    /// emission; not persisted.
    #[serde(skip)]
    pub pooled_observed: Vec<f64>,
    #[serde(skip)]
    pub pooled_predicted: Vec<f64>,
}

fn average_metrics(per_fold: &[Metrics]) -> Metrics {
    let k = per_fold.len() as f64;
    Metrics {
        mae: per_fold.iter().map(|m| m.mae).sum::<f64>() / k,
        rmse: per_fold.iter().map(|m| m.rmse).sum::<f64>() / k,
        r2: per_fold.iter().map(|m| m.r2).sum::<f64>() / k,
        n: per_fold.iter().map(|m| m.n).sum(),
    }
}

fn grid_target_series(
    grid: &ObservationGrid,
    day_idx: usize,
    target: Target,
) -> Vec<Vec<f64>> {
    let (rows, cols, t) = (grid.config.rows, grid.config.cols, grid.intervals());
    let mut out = vec![vec![0.0; t]; rows * cols];
    for z in 0..rows * cols {
        let (r, c) = (z / cols + 1, z % cols + 1);
        for i in 0..t {
            let cell = grid.cell(day_idx, r, c, i + 1);
            out[z][i] = match target {
                Target::Matches => cell.matches,
                Target::Pickups => cell.pickups,
            };
        }
    }
    out
}

fn flatten(series: &[Vec<f64>]) -> Vec<f64> {
    series.iter().flatten().copied().collect()
}

/// One prediction pass for a held-out day given the training-day indices.
fn fold_predictions(
    grid: &ObservationGrid,
    model: &CvModel,
    target: Target,
    train_days: &[usize],
    test_day: usize,
    fold_index: usize,
) -> Result<Vec<f64>> {
    match model {
        CvModel::Agpm { kernel, train } => {
            let expr = parse_kernel_spec(kernel)?;
            let x = grid.inputs_for_days(train_days);
            let y = grid.targets_for_days(train_days, target);
            let mut cfg = train.clone();
            // distinct, deterministic seeds per fold
            cfg.seed = cfg.seed.wrapping_add(fold_index as u64);
            let report = training::optimize_hyperparams(&expr, &x, &y, &cfg)?;
            let theta = crate::kernels::ThetaVector::for_expr(&expr, report.best_theta)?;
            let fitted = gp::fit_cache(&expr, &theta, x, y)?;
            let xstar = grid.inputs_for_days(&[test_day]);
            let mean = gp::predict_mean(&fitted, &xstar)?;
            Ok(mean.iter().copied().collect())
        }
        CvModel::Pmq => {
            if target == Target::Pickups {
                return Err(Error::Incompatible(
                    "PMQ models order matching only; pickups are unsupported".into(),
                ));
            }
            let day = baselines::grid_day_series(grid, test_day);
            let zeros = vec![0.0; day.demand.len()];
            Ok(flatten(&baselines::pmq_predict(&day, &zeros)?))
        }
        CvModel::Spmq => {
            if target == Target::Pickups {
                return Err(Error::Incompatible(
                    "SPMQ models order matching only; pickups are unsupported".into(),
                ));
            }
            let adjacency =
                baselines::adjacency_index_lists(grid.config.rows, grid.config.cols);
            let params = baselines::fit_spmq_on_days(grid, &adjacency, train_days)?;
            let day = baselines::grid_day_series(grid, test_day);
            let zeros = vec![0.0; day.demand.len()];
            Ok(flatten(&baselines::spmq_predict(
                &day, &params, &adjacency, &zeros,
            )?))
        }
        CvModel::Cdmf => {
            let mut samples = Vec::new();
            for &d in train_days {
                let day = baselines::grid_day_series(grid, d);
                let obs = grid_target_series(grid, d, target);
                for z in 0..day.demand.len() {
                    for i in 0..day.demand[0].len() {
                        samples.push(((day.demand[z][i], day.supply[z][i]), obs[z][i]));
                    }
                }
            }
            let params = baselines::fit_cdmf(&samples)?;
            let day = baselines::grid_day_series(grid, test_day);
            let mut out = Vec::new();
            for z in 0..day.demand.len() {
                for i in 0..day.demand[0].len() {
                    out.push(baselines::cdmf_predict(
                        day.demand[z][i],
                        day.supply[z][i],
                        &params,
                    )?);
                }
            }
            Ok(out)
        }
    }
}

/// Leave-one-day-out cross-validation: every day is held out exactly once,
/// the model is fitted on the remaining days, and per-fold metrics are both
/// averaged arithmetically and pooled over all held-out points.
pub fn cross_validate(
    grid: &ObservationGrid,
    model: &CvModel,
    target: Target,
) -> Result<CvReport> {
    let n_days = grid.days.len();
    if n_days < 2 {
        return Err(Error::Data(
            "cross-validation needs at least 2 panel days".into(),
        ));
    }
    let mut folds = Vec::new();
    let mut per_fold = Vec::new();
    let mut pooled_obs = Vec::new();
    let mut pooled_pred = Vec::new();
    for test_day in 0..n_days {
        let train_days: Vec<usize> = (0..n_days).filter(|d| *d != test_day).collect();
        let predicted = fold_predictions(grid, model, target, &train_days, test_day, test_day)?;
        let observed = flatten(&grid_target_series(grid, test_day, target));
        per_fold.push(compute_metrics(&observed, &predicted)?);
        folds.push(FoldSpec {
            held_out_day: grid.days[test_day].to_string(),
            training_days: train_days
                .iter()
                .map(|d| grid.days[*d].to_string())
                .collect(),
        });
        pooled_obs.extend(observed);
        pooled_pred.extend(predicted);
    }
    let averaged = average_metrics(&per_fold);
    let pooled = compute_metrics(&pooled_obs, &pooled_pred)?;
    Ok(CvReport {
        folds,
        per_fold,
        averaged,
        pooled,
        pooled_observed: pooled_obs,
        pooled_predicted: pooled_pred,
    })
}

/// Observed-vs-predicted scatter data: CSV `observed,predicted,on_diagonal`.
pub fn emit_scatter(observed: &[f64], predicted: &[f64], path: &Path) -> Result<()> {
    if observed.len() != predicted.len() {
        return Err(Error::Dimension(format!(
            "{} observations vs {} predictions",
            observed.len(),
            predicted.len()
        )));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["observed", "predicted", "on_diagonal"])?;
    for (o, p) in observed.iter().zip(predicted) {
        w.write_record([o.to_string(), p.to_string(), (o == p).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Convenience: posterior-mean predictions as a plain vector.
pub fn dvector_to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::CdmfParams;
    use crate::market::{synthesize_market, GeneratorKind, SyntheticSpec};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn metrics_perfect_fit() {
        let m = compute_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.r2), (0.0, 0.0, 1.0));
    }

    #[test]
    fn metrics_hand_example() {
        let m = compute_metrics(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.r2), (1.0, 1.0, 0.0));
    }

    #[test]
    fn metrics_mean_predictor_r2_zero() {
        let obs = [1.0, 4.0, 7.0, 2.0];
        let mean = obs.iter().sum::<f64>() / 4.0;
        let m = compute_metrics(&obs, &[mean; 4]).unwrap();
        assert!(m.r2.abs() < 1e-12);
    }

    #[test]
    fn metrics_invariants_on_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.gen_range(2..30);
            let obs: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            if let Ok(m) = compute_metrics(&obs, &pred) {
                assert!(m.mae <= m.rmse + 1e-12);
                assert!(m.r2 <= 1.0);
            }
        }
    }

    #[test]
    fn metrics_errors() {
        assert!(compute_metrics(&[1.0], &[1.0, 2.0]).is_err());
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[2.0, 2.0], &[1.0, 3.0]).is_err()); // constant observed
    }

    fn cdmf_grid(n_days: usize) -> crate::market::ObservationGrid {
        let spec = SyntheticSpec {
            rows: 3,
            cols: 3,
            intervals: 6,
            n_days,
            generator: GeneratorKind::Cdmf {
                params: CdmfParams {
                    a: 0.9,
                    alpha: 0.6,
                    beta: 0.4,
                },
            },
            noise_var: 0.05,
            start_date: chrono::NaiveDate::from_ymd_opt(2018, 12, 3).unwrap(),
            base_demand: 3.0,
            base_supply: 3.0,
            demand_bumps: vec![],
            supply_bumps: vec![],
            integer_counts: false,
        };
        synthesize_market(23, &spec).unwrap().grid
    }

    #[test]
    fn two_day_grid_yields_two_folds() {
        let grid = cdmf_grid(2);
        let report = cross_validate(&grid, &CvModel::Pmq, Target::Matches).unwrap();
        assert_eq!(report.folds.len(), 2);
        assert_eq!(report.per_fold.len(), 2);
        // every day held out exactly once, never in its own training set
        let mut held: Vec<&str> = report.folds.iter().map(|f| f.held_out_day.as_str()).collect();
        held.sort_unstable();
        held.dedup();
        assert_eq!(held.len(), 2);
        for f in &report.folds {
            assert!(!f.training_days.contains(&f.held_out_day));
        }
    }

    #[test]
    fn pmq_rejects_pickups() {
        let grid = cdmf_grid(2);
        assert!(cross_validate(&grid, &CvModel::Pmq, Target::Pickups).is_err());
        assert!(cross_validate(&grid, &CvModel::Spmq, Target::Pickups).is_err());
    }

    #[test]
    fn cdmf_cv_recovers_its_own_generator() {
        let grid = cdmf_grid(3);
        let report = cross_validate(&grid, &CvModel::Cdmf, Target::Matches).unwrap();
        assert!(
            report.averaged.r2 > 0.8,
            "CDMF self-fit R2 = {}",
            report.averaged.r2
        );
    }

    #[test]
    fn emit_scatter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scatter.csv");
        let obs = [1.0, 2.5, std::f64::consts::PI];
        let pred = [1.0, 2.0, 3.0];
        emit_scatter(&obs, &pred, &path).unwrap();
        let mut rdr = csv::Reader::from_path(&path).unwrap();
        let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 3);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.get(0).unwrap().parse::<f64>().unwrap(), obs[i]);
            assert_eq!(row.get(1).unwrap().parse::<f64>().unwrap(), pred[i]);
        }
        assert_eq!(rows[0].get(2).unwrap(), "true");
        assert_eq!(rows[1].get(2).unwrap(), "false");

        // empty input -> header only
        emit_scatter(&[], &[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
    }
}
