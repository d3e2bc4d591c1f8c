//! Analytical matching baselines: random perfect matching with queueing
//! (PMQ), its spatial extension with effective supply (SPMQ), and the
//! Cobb-Douglas matching function (CDMF), with their fitting procedures.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::market::ObservationGrid;
use crate::{Error, Result};

/// Cobb-Douglas matching function parameters: `g(x) = A (x^d)^alpha (x^s)^beta`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CdmfParams {
    pub a: f64,
    pub alpha: f64,
    pub beta: f64,
}

///// SPMQ effective-supply weights: `x~^s = a x^s + b sum_adjacent x^s`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SpmqParams {
    pub a: f64,
    pub b: f64,
}

/// One day's aligned per-zone demand/supply series.
#[derive(Debug, Clone)]
pub struct DaySeries {
    /// demand[zone][interval]
    pub demand: Vec<Vec<f64>>,
    /// supply[zone][interval]
    pub supply: Vec<Vec<f64>>,
}

impl DaySeries {
    fn check(&self) -> Result<(usize, usize)> {
        let zones = self.demand.len();
        if zones == 0 || self.supply.len() != zones {
            return Err(Error::Data("demand/supply zone counts differ".into()));
        }
        let t = self.demand[0].len();
        if self
            .demand
            .iter()
            .chain(self.supply.iter())
            .any(|s| s.len() != t)
        {
            return Err(Error::Data("interval counts differ across zones".into()));
        }
        Ok((zones, t))
    }
}

/// Roll the cumulative unserved demand forward one interval.
pub fn rollforward_cumulative_demand(
    prev_xcd: f64,
    prev_matches: f64,
    new_demand: f64,
) -> Result<f64> {
    if prev_xcd < 0.0 || prev_matches < 0.0 || new_demand < 0.0 {
        return Err(Error::Data("roll-forward inputs must be non-negative".into()));
    }
    Ok((prev_xcd - prev_matches).max(0.0) + new_demand)
}

/// Random perfect matching with queueing: matches = min(x^cd, x^s), rolling
/// the queue forward on the model's own predictions within the day.
pub fn pmq_predict(day: &DaySeries, initial_xcd: &[f64]) -> Result<Vec<Vec<f64>>> {
    let (zones, t) = day.check()?;
    if initial_xcd.len() != zones {
        return Err(Error::Data("initial queue length per zone required".into()));
    }
    let mut out = vec![vec![0.0; t]; zones];
    for z in 0..zones {
        let mut carried = initial_xcd[z];
        let mut prev_matches = 0.0;
        for i in 0..t {
            let xcd = rollforward_cumulative_demand(carried, prev_matches, day.demand[z][i])?;
            let m = xcd.min(day.supply[z][i]);
            out[z][i] = m;
            carried = xcd;
            prev_matches = m;
        }
    }
    Ok(out)
}

/// Spatial PMQ: PMQ with supply replaced by the effective supply.
pub fn spmq_predict(
    day: &DaySeries,
    params: &SpmqParams,
    adjacency: &[Vec<usize>],
    initial_xcd: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let (zones, t) = day.check()?;
    if adjacency.len() != zones {
        return Err(Error::Data("adjacency must cover every zone".into()));
    }
    let mut effective = vec![vec![0.0; t]; zones];
    for z in 0..zones {
        for i in 0..t {
            let adj: f64 = adjacency[z].iter().map(|&n| day.supply[n][i]).sum();
            effective[z][i] = params.a * day.supply[z][i] + params.b * adj;
        }
    }
    let eff_day = DaySeries {
        demand: day.demand.clone(),
        supply: effective,
    };
    pmq_predict(&eff_day, initial_xcd)
}

/// Demand/supply series for one panel day, zone-major.
pub fn grid_day_series(grid: &ObservationGrid, day_idx: usize) -> DaySeries {
    let zones = grid.config.rows * grid.config.cols;
    let t = grid.intervals();
    let mut demand = vec![vec![0.0; t]; zones];
    let mut supply = vec![vec![0.0; t]; zones];
    for z in 0..zones {
        let (r, c) = (z / grid.config.cols + 1, z % grid.config.cols + 1);
        for i in 0..t {
            let cell = grid.cell(day_idx, r, c, i + 1);
            demand[z][i] = cell.demand;
            supply[z][i] = cell.supply;
        }
    }
    DaySeries { demand, supply }
}

fn spmq_loss(
    grid: &ObservationGrid,
    adjacency: &[Vec<usize>],
    params: &SpmqParams,
    day_indices: &[usize],
) -> Result<f64> {
    let mut loss = 0.0;
    for &d in day_indices {
        let day = grid_day_series(grid, d);
        let zeros = vec![0.0; day.demand.len()];
        let pred = spmq_predict(&day, params, adjacency, &zeros)?;
        for z in 0..day.demand.len() {
            let (r, c) = (z / grid.config.cols + 1, z % grid.config.cols + 1);
            for i in 0..day.demand[0].len() {
                let obs = grid.cell(d, r, c, i + 1).matches;
                let e = obs - pred[z][i];
                loss += e * e;
            }
        }
    }
    Ok(loss)
}

/// Fit SPMQ weights by coordinate grid search over `{0, 0.05, ..., 2.0}`
/// followed by a local refinement pass; ties break toward smaller values.
pub fn fit_spmq(grid: &ObservationGrid, adjacency: &[Vec<usize>]) -> Result<SpmqParams> {
    let all: Vec<usize> = (0..grid.days.len()).collect();
    fit_spmq_on_days(grid, adjacency, &all)
}

/// [`fit_spmq`] restricted to a subset of panel days (cross-validation folds).
pub fn fit_spmq_on_days(
    grid: &ObservationGrid,
    adjacency: &[Vec<usize>],
    day_indices: &[usize],
) -> Result<SpmqParams> {
    if day_indices.is_empty() {
        return Err(Error::Data("empty observation grid".into()));
    }
    let mut best = SpmqParams { a: 0.0, b: 0.0 };
    let mut best_loss = f64::INFINITY;
    for ai in 0..=40 {
        for bi in 0..=40 {
            let p = SpmqParams {
                a: ai as f64 * 0.05,
                b: bi as f64 * 0.05,
            };
            let loss = spmq_loss(grid, adjacency, &p, day_indices)?;
            if loss < best_loss - 1e-12 {
                best_loss = loss;
                best = p;
            }
        }
    }
    // local refinement around the coarse optimum
    let mut step = 0.025;
    while step > 1e-4 {
        let mut improved = false;
        for (da, db) in [
            (step, 0.0),
            (-step, 0.0),
            (0.0, step),
            (0.0, -step),
        ] {
            let cand = SpmqParams {
                a: (best.a + da).max(0.0),
                b: (best.b + db).max(0.0),
            };
            let loss = spmq_loss(grid, adjacency, &cand, day_indices)?;
            if loss < best_loss - 1e-12 {
                best_loss = loss;
                best = cand;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    Ok(best)
}

/// Evaluate the Cobb-Douglas matching function with the `0^e = 0` convention
/// for positive exponents.
pub fn cdmf_predict(x_d: f64, x_s: f64, params: &CdmfParams) -> Result<f64> {
    if x_d < 0.0 || x_s < 0.0 {
        return Err(Error::Data("CDMF inputs must be non-negative".into()));
    }
    let pow = |base: f64, e: f64| -> Result<f64> {
        if base == 0.0 {
            if e > 0.0 {
                Ok(0.0)
            } else {
                Err(Error::Data(
                    "zero input with non-positive exponent is undefined".into(),
                ))
            }
        } else {
            Ok(base.powf(e))
        }
    };
    Ok(params.a * pow(x_d, params.alpha)? * pow(x_s, params.beta)?)
}

fn cdmf_loss(samples: &[((f64, f64), f64)], p: &CdmfParams) -> f64 {
    samples
        .iter()
        .map(|((d, s), y)| {
            let pred = cdmf_predict(*d, *s, p).unwrap_or(f64::INFINITY);
            let e = y - pred;
            e * e
        })
        .sum()
}

fn cdmf_loss_grad(samples: &[((f64, f64), f64)], p: &CdmfParams) -> [f64; 3] {
    let mut g = [0.0; 3];
    for ((d, s), y) in samples {
        let pred = match cdmf_predict(*d, *s, p) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let resid = pred - *y;
        // d(pred)/dA = pred / A; log factors appear for the exponents
        g[0] += 2.0 * resid * pred / p.a;
        if *d > 0.0 {
            g[1] += 2.0 * resid * pred * d.ln();
        }
        if *s > 0.0 {
            g[2] += 2.0 * resid * pred * s.ln();
        }
    }
    g
}

/// Fit CDMF parameters: ordinary least squares on logs over strictly
/// positive samples, then gradient refinement of the untransformed squared
/// loss over all samples.
pub fn fit_cdmf(samples: &[((f64, f64), f64)]) -> Result<CdmfParams> {
    let positive: Vec<_> = samples
        .iter()
        .filter(|((d, s), y)| *d > 0.0 && *s > 0.0 && *y > 0.0)
        .collect();
    if positive.len() < 3 {
        return Err(Error::Fit(format!(
            "CDMF fit needs at least 3 strictly positive samples, got {}",
            positive.len()
        )));
    }

    // OLS on log y = log A + alpha log d + beta log s
    let n = positive.len() as f64;
    let (mut sd, mut ss, mut sy) = (0.0, 0.0, 0.0);
    let (mut sdd, mut sds, mut sss) = (0.0, 0.0, 0.0);
    let (mut sdy, mut ssy) = (0.0, 0.0);
    for ((d, s), y) in &positive {
        let (ld, ls, ly) = (d.ln(), s.ln(), y.ln());
        sd += ld;
        ss += ls;
        sy += ly;
        sdd += ld * ld;
        sds += ld * ls;
        sss += ls * ls;
        sdy += ld * ly;
        ssy += ls * ly;
    }
    // normal equations for [logA, alpha, beta]
    let m = nalgebra::Matrix3::new(n, sd, ss, sd, sdd, sds, ss, sds, sss);
    let rhs = nalgebra::Vector3::new(sy, sdy, ssy);
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Fit("singular normal equations in CDMF log fit".into()))?;
    let mut p = CdmfParams {
        a: sol[0].exp(),
        alpha: sol[1],
        beta: sol[2],
    };

    // gradient descent with backtracking on the untransformed loss;
    // refinement never accepts a step that increases the loss
    let usable: Vec<((f64, f64), f64)> = samples
        .iter()
        .filter(|((d, _), _)| *d > 0.0 || p.alpha > 0.0)
        .filter(|((_, s), _)| *s > 0.0 || p.beta > 0.0)
        .cloned()
        .collect();
    let mut loss = cdmf_loss(&usable, &p);
    for _ in 0..500 {
        let g = cdmf_loss_grad(&usable, &p);
        let gnorm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if gnorm < 1e-10 {
            break;
        }
        let mut step = 1.0 / gnorm.max(1.0);
        let mut accepted = false;
        for _ in 0..40 {
            let cand = CdmfParams {
                a: (p.a - step * g[0]).max(1e-12),
                alpha: p.alpha - step * g[1],
                beta: p.beta - step * g[2],
            };
            let cand_loss = cdmf_loss(&usable, &cand);
            if cand_loss < loss {
                p = cand;
                loss = cand_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(p)
}

/// Serialized envelope shared with GP models via a model_kind discriminator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model_kind", rename_all = "lowercase")]
pub enum BaselineFile {
    Pmq {},
    Spmq { params: SpmqParams },
    Cdmf { params: CdmfParams },
}

/// Dense zone adjacency as index lists, row-major zone order.
pub fn adjacency_index_lists(rows: usize, cols: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 1..=rows {
        for c in 1..=cols {
            let neigh = crate::market::hex_neighbors_unchecked(r, c, rows, cols);
            out.push(
                neigh
                    .into_iter()
                    .map(|(nr, nc)| (nr - 1) * cols + (nc - 1))
                    .collect(),
            );
        }
    }
    out
}

/// Per-zone per-interval predictions for a whole grid, day by day.
pub fn predict_grid_pmq(grid: &ObservationGrid) -> Result<BTreeMap<usize, Vec<Vec<f64>>>> {
    let mut out = BTreeMap::new();
    for d in 0..grid.days.len() {
        let day = grid_day_series(grid, d);
        let zeros = vec![0.0; day.demand.len()];
        out.insert(d, pmq_predict(&day, &zeros)?);
    }
    Ok(out)
}

/// Per-zone per-interval SPMQ predictions for a whole grid.
pub fn predict_grid_spmq(
    grid: &ObservationGrid,
    params: &SpmqParams,
    adjacency: &[Vec<usize>],
) -> Result<BTreeMap<usize, Vec<Vec<f64>>>> {
    let mut out = BTreeMap::new();
    for d in 0..grid.days.len() {
        let day = grid_day_series(grid, d);
        let zeros = vec![0.0; day.demand.len()];
        out.insert(d, spmq_predict(&day, params, adjacency, &zeros)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_zone(demand: Vec<f64>, supply: Vec<f64>) -> DaySeries {
        DaySeries {
            demand: vec![demand],
            supply: vec![supply],
        }
    }

    #[test]
    fn rollforward_cases() {
        assert_eq!(rollforward_cumulative_demand(0.0, 0.0, 3.0).unwrap(), 3.0);
        assert_eq!(rollforward_cumulative_demand(3.0, 1.0, 4.0).unwrap(), 6.0);
        assert_eq!(rollforward_cumulative_demand(2.0, 5.0, 0.0).unwrap(), 0.0);
        assert!(rollforward_cumulative_demand(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pmq_hand_rollforward() {
        let day = one_zone(vec![3.0, 4.0], vec![1.0, 10.0]);
        let m = pmq_predict(&day, &[0.0]).unwrap();
        assert_eq!(m[0], vec![1.0, 6.0]);
    }

    #[test]
    fn pmq_min_rule_and_zero_supply() {
        let day = one_zone(vec![5.0], vec![3.0]);
        assert_eq!(pmq_predict(&day, &[0.0]).unwrap()[0], vec![3.0]);

        let day = one_zone(vec![2.0, 3.0, 1.0], vec![0.0, 0.0, 0.0]);
        let m = pmq_predict(&day, &[0.0]).unwrap();
        assert_eq!(m[0], vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn pmq_feasibility_invariant() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = 10;
            let demand: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..10.0)).collect();
            let supply: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..10.0)).collect();
            let day = one_zone(demand.clone(), supply.clone());
            let m = pmq_predict(&day, &[2.0]).unwrap();
            let mut carried: f64 = 2.0;
            let mut prev_m = 0.0;
            for i in 0..t {
                let xcd = (carried - prev_m).max(0.0) + demand[i];
                assert!(m[0][i] <= supply[i] + 1e-12);
                assert!(m[0][i] <= xcd + 1e-12);
                carried = xcd;
                prev_m = m[0][i];
            }
        }
    }

    #[test]
    fn spmq_reduces_to_pmq() {
        let day = DaySeries {
            demand: vec![vec![3.0, 4.0], vec![1.0, 2.0]],
            supply: vec![vec![1.0, 10.0], vec![2.0, 2.0]],
        };
        let adjacency = vec![vec![1], vec![0]];
        let p = SpmqParams { a: 1.0, b: 0.0 };
        let s = spmq_predict(&day, &p, &adjacency, &[0.0, 0.0]).unwrap();
        let m = pmq_predict(&day, &[0.0, 0.0]).unwrap();
        assert_eq!(s, m);
    }

    #[test]
    fn spmq_zero_weights_zero_matches() {
        let day = one_zone(vec![3.0, 4.0], vec![1.0, 10.0]);
        let p = SpmqParams { a: 0.0, b: 0.0 };
        let s = spmq_predict(&day, &p, &[vec![]], &[0.0]).unwrap();
        assert_eq!(s[0], vec![0.0, 0.0]);
    }

    #[test]
    fn spmq_neighbor_supply_counts() {
        let day = DaySeries {
            demand: vec![vec![5.0], vec![0.0]],
            supply: vec![vec![2.0], vec![4.0]],
        };
        let adjacency = vec![vec![1], vec![0]];
        let p = SpmqParams { a: 1.0, b: 0.5 };
        let s = spmq_predict(&day, &p, &adjacency, &[0.0, 0.0]).unwrap();
        assert_eq!(s[0][0], 4.0); // min(5, 2 + 0.5*4)
    }

    #[test]
    fn spmq_equals_pmq_on_effective_supply() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let t = 8;
        let day = DaySeries {
            demand: vec![
                (0..t).map(|_| rng.gen_range(0.0..10.0)).collect(),
                (0..t).map(|_| rng.gen_range(0.0..10.0)).collect(),
            ],
            supply: vec![
                (0..t).map(|_| rng.gen_range(0.0..10.0)).collect(),
                (0..t).map(|_| rng.gen_range(0.0..10.0)).collect(),
            ],
        };
        let adjacency = vec![vec![1], vec![0]];
        let p = SpmqParams { a: 1.3, b: 0.4 };
        let s = spmq_predict(&day, &p, &adjacency, &[0.0, 0.0]).unwrap();
        // definitional check: SPMQ is PMQ run on a = 1.3, b = 0.4 effective supply
        let effective: Vec<Vec<f64>> = (0..2)
            .map(|z| {
                (0..t)
                    .map(|i| {
                        p.a * day.supply[z][i]
                            + p.b
                                * adjacency[z]
                                    .iter()
                                    .map(|n| day.supply[*n][i])
                                    .sum::<f64>()
                    })
                    .collect()
            })
            .collect();
        let eff_day = DaySeries {
            demand: day.demand.clone(),
            supply: effective,
        };
        let m = pmq_predict(&eff_day, &[0.0, 0.0]).unwrap();
        assert_eq!(s, m);
    }

    #[test]
    fn cdmf_cases() {
        let p = CdmfParams {
            a: 1.0,
            alpha: 0.5,
            beta: 0.5,
        };
        assert_eq!(cdmf_predict(4.0, 9.0, &p).unwrap(), 6.0);
        assert_eq!(cdmf_predict(0.0, 9.0, &p).unwrap(), 0.0);
        let p2 = CdmfParams {
            a: 2.0,
            alpha: 1.0,
            beta: 0.0,
        };
        assert_eq!(cdmf_predict(3.0, 7.0, &p2).unwrap(), 6.0);
        let bad = CdmfParams {
            a: 1.0,
            alpha: 0.5,
            beta: -0.5,
        };
        assert!(cdmf_predict(1.0, 0.0, &bad).is_err());
    }

    #[test]
    fn cdmf_monotone() {
        let p = CdmfParams {
            a: 1.3,
            alpha: 0.6,
            beta: 0.4,
        };
        let mut prev = 0.0;
        for i in 1..20 {
            let v = cdmf_predict(i as f64, 5.0, &p).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn fit_cdmf_recovers_noise_free_params() {
        let truth = CdmfParams {
            a: 1.2,
            alpha: 0.6,
            beta: 0.4,
        };
        let mut samples = Vec::new();
        for d in 1..=8 {
            for s in 1..=8 {
                let y = cdmf_predict(d as f64, s as f64, &truth).unwrap();
                samples.push(((d as f64, s as f64), y));
            }
        }
        let fit = fit_cdmf(&samples).unwrap();
        assert!((fit.a - truth.a).abs() / truth.a < 0.01, "A = {}", fit.a);
        assert!((fit.alpha - truth.alpha).abs() / truth.alpha < 0.01);
        assert!((fit.beta - truth.beta).abs() / truth.beta < 0.01);
    }

    #[test]
    fn fit_cdmf_zero_beta() {
        let truth = CdmfParams {
            a: 1.0,
            alpha: 1.0,
            beta: 0.0,
        };
        let mut samples = Vec::new();
        for d in 1..=6 {
            for s in 1..=6 {
                samples.push(((d as f64, s as f64), d as f64));
            }
        }
        let _ = truth;
        let fit = fit_cdmf(&samples).unwrap();
        assert!(fit.beta.abs() < 0.02, "beta = {}", fit.beta);
    }

    #[test]
    fn fit_cdmf_rejects_all_zero_targets() {
        let samples: Vec<((f64, f64), f64)> =
            (1..10).map(|i| ((i as f64, i as f64), 0.0)).collect();
        assert!(fit_cdmf(&samples).is_err());
    }
}
