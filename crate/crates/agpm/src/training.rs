//! Maximum-marginal-likelihood hyperparameter estimation: multi-restart
//! limited-memory quasi-Newton ascent on L(log theta) with a backtracking
//! line search and log-space box bounds enforced by projection.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gp;
use crate::kernels::{KernelExpr, ThetaVector};
use crate::{Error, Result};

/// Per-slot raw bounds: variances get one range, length-scales and periods
/// another.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SlotBounds {
    pub low: f64,
    pub high: f64,
}

pub const VARIANCE_BOUNDS: SlotBounds = SlotBounds {
    low: 1e-6,
    high: 1e6,
};
pub const SCALE_BOUNDS: SlotBounds = SlotBounds {
    low: 1e-3,
    high: 1e4,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum InitStrategy {
    /// Draw log theta uniformly within the log bounds.
    LogUniformRandom,
    /// Start every restart from a fixed vector.
    Preset(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub rel_f_tol: f64,
    pub seed: u64,
    pub init: InitStrategy,
    /// Optional per-slot bound overrides; defaults derive from the slot kind.
    pub bounds: Option<Vec<SlotBounds>>,
    /// Slots excluded from optimization (kept at their initial value).
    pub frozen_slots: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            restarts: 3,
            max_iters: 200,
            grad_tol: 1e-5,
            rel_f_tol: 1e-6,
            seed: 0,
            init: InitStrategy::LogUniformRandom,
            bounds: None,
            frozen_slots: Vec::new(),
        }
    }
}

impl TrainConfig {
    fn validate(&self, expr: &KernelExpr) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be >= 1".into()));
        }
        if let Some(bounds) = &self.bounds {
            if bounds.len() != expr.theta_len() {
                return Err(Error::Config(format!(
                    "bounds length {} does not match theta length {}",
                    bounds.len(),
                    expr.theta_len()
                )));
            }
            if bounds.iter().any(|b| !(b.low < b.high) || b.low <= 0.0) {
                return Err(Error::Config("bounds require 0 < low < high".into()));
            }
        }
        if let InitStrategy::Preset(v) = &self.init {
            if v.len() != expr.theta_len() {
                return Err(Error::Config(format!(
                    "preset init length {} does not match theta length {}",
                    v.len(),
                    expr.theta_len()
                )));
            }
        }
        if self
            .frozen_slots
            .iter()
            .any(|&s| s >= expr.theta_len())
        {
            return Err(Error::Config("frozen slot index out of range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestartOutcome {
    pub init: Vec<f64>,
    pub final_lml: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_theta: Vec<f64>,
    pub best_lml: f64,
    pub per_restart: Vec<RestartOutcome>,
}

/// Default raw bounds per theta slot: variance slots (term variances and the
/// noise slot) vs scale slots (length-scales and periods).
pub fn default_bounds(expr: &KernelExpr) -> Vec<SlotBounds> {
    let mut bounds = Vec::with_capacity(expr.theta_len());
    for term in &expr.terms {
        bounds.push(VARIANCE_BOUNDS);
        for f in &term.factors {
            for _ in 0..f.family.param_count() {
                bounds.push(SCALE_BOUNDS);
            }
        }
    }
    bounds.push(VARIANCE_BOUNDS);
    bounds
}

struct Objective<'a> {
    expr: &'a KernelExpr,
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    frozen: &'a [usize],
    frozen_values: Vec<f64>,
}

impl Objective<'_> {
    fn theta_from_log(&self, w: &DVector<f64>) -> Vec<f64> {
        let mut theta: Vec<f64> = w.iter().map(|v| v.exp()).collect();
        for &s in self.frozen {
            theta[s] = self.frozen_values[s];
        }
        theta
    }

    /// Value and log-space gradient; frozen slots report zero gradient.
    fn eval(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let theta = ThetaVector::new(self.theta_from_log(w))?;
        let value = gp::log_marginal_likelihood(self.expr, &theta, self.x, self.y)?;
        let raw = gp::lml_gradient(self.expr, &theta, self.x, self.y)?;
        // chain rule: d/d(log t) = t * d/dt
        let mut grad = DVector::from_fn(raw.len(), |i, _| raw[i] * theta.values()[i]);
        for &s in self.frozen {
            grad[s] = 0.0;
        }
        Ok((value, grad))
    }

    fn value(&self, w: &DVector<f64>) -> Result<f64> {
        let theta = ThetaVector::new(self.theta_from_log(w))?;
        gp::log_marginal_likelihood(self.expr, &theta, self.x, self.y)
    }
}

fn project(w: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    for i in 0..w.len() {
        w[i] = w[i].clamp(lo[i], hi[i]);
    }
}

const LBFGS_MEMORY: usize = 8;

/// One restart: projected L-BFGS ascent with backtracking (sufficient
/// increase) from the given log-space start.
fn run_restart(
    obj: &Objective<'_>,
    w0: DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    cfg: &TrainConfig,
) -> Result<(DVector<f64>, RestartOutcome)> {
    let init_theta = obj.theta_from_log(&w0);
    let mut w = w0;
    project(&mut w, lo, hi);
    let (mut f, mut g) = obj.eval(&w)?;

    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..cfg.max_iters {
        iterations = iter + 1;
        if g.amax() < cfg.grad_tol {
            converged = true;
            break;
        }

        // two-loop recursion on the ascent direction
        let mut q = g.clone();
        let k = s_hist.len();
        let mut alphas = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / y_hist[i].dot(&s_hist[i]);
            alphas[i] = rho * s_hist[i].dot(&q);
            q -= &y_hist[i] * alphas[i];
        }
        if k > 0 {
            let gamma = s_hist[k - 1].dot(&y_hist[k - 1]) / y_hist[k - 1].dot(&y_hist[k - 1]);
            q *= gamma;
        }
        for i in 0..k {
            let rho = 1.0 / y_hist[i].dot(&s_hist[i]);
            let beta = rho * y_hist[i].dot(&q);
            q += &s_hist[i] * (alphas[i] - beta);
        }
        let mut dir = q;
        if dir.dot(&g) <= 0.0 {
            dir = g.clone();
        }

        // backtracking line search satisfying sufficient increase
        let c1 = 1e-4;
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut w_new = &w + &dir * step;
            project(&mut w_new, lo, hi);
            let actual_step = &w_new - &w;
            let predicted = g.dot(&actual_step);
            if actual_step.amax() == 0.0 {
                break;
            }
            match obj.value(&w_new) {
                Ok(f_new) if f_new >= f + c1 * predicted.max(0.0) && f_new > f - 1e-300 => {
                    if f_new >= f {
                        accepted = Some((w_new, f_new));
                        break;
                    }
                }
                _ => {}
            }
            step *= 0.5;
        }
        let Some((w_new, f_new)) = accepted else {
            converged = true; // no ascent step available within bounds
            break;
        };
        debug_assert!(f_new >= f, "line search must never decrease the objective");

        let (_, g_new) = obj.eval(&w_new)?;
        let s = &w_new - &w;
        let yv = &g_new - &g;
        // curvature check keeps the inverse-Hessian estimate well defined
        if s.dot(&yv) < -1e-12 * s.norm() * yv.norm() {
            if s_hist.len() == LBFGS_MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(yv);
        } else {
            s_hist.clear();
            y_hist.clear();
        }

        let rel_improve = (f_new - f).abs() / f.abs().max(1.0);
        w = w_new;
        g = g_new;
        let prev = f;
        f = f_new;
        if (f - prev).abs() <= cfg.rel_f_tol * prev.abs().max(1.0) && rel_improve <= cfg.rel_f_tol {
            converged = true;
            break;
        }
    }

    Ok((
        w,
        RestartOutcome {
            init: init_theta,
            final_lml: f,
            iterations,
            converged,
        },
    ))
}

/// Multi-restart maximum-marginal-likelihood estimation.
pub fn optimize_hyperparams(
    expr: &KernelExpr,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if x.nrows() < 2 {
        return Err(Error::Data("training requires at least 2 points".into()));
    }
    cfg.validate(expr)?;
    let p = expr.theta_len();
    let bounds = cfg.bounds.clone().unwrap_or_else(|| default_bounds(expr));
    let lo = DVector::from_fn(p, |i, _| bounds[i].low.ln());
    let hi = DVector::from_fn(p, |i, _| bounds[i].high.ln());

    let frozen_values = match &cfg.init {
        InitStrategy::Preset(v) => v.clone(),
        InitStrategy::LogUniformRandom => vec![1.0; p],
    };
    let obj = Objective {
        expr,
        x,
        y,
        frozen: &cfg.frozen_slots,
        frozen_values,
    };

    // starts drawn up front so restart results do not depend on scheduling
    let starts: Vec<DVector<f64>> = (0..cfg.restarts)
        .map(|r| match &cfg.init {
            InitStrategy::Preset(v) => DVector::from_fn(p, |i, _| v[i].ln()),
            InitStrategy::LogUniformRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(r as u64));
                DVector::from_fn(p, |i, _| rng.gen_range(lo[i]..hi[i]))
            }
        })
        .collect();

    #[cfg(feature = "parallel")]
    let runs: Vec<Result<(DVector<f64>, RestartOutcome)>> = starts
        .into_par_iter()
        .map(|w0| run_restart(&obj, w0, &lo, &hi, cfg))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let runs: Vec<Result<(DVector<f64>, RestartOutcome)>> = starts
        .into_iter()
        .map(|w0| run_restart(&obj, w0, &lo, &hi, cfg))
        .collect();

    let mut per_restart = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut failures = 0;
    for run in runs {
        match run {
            Ok((w, outcome)) => {
                let better = best
                    .as_ref()
                    .map(|(_, b)| outcome.final_lml > *b)
                    .unwrap_or(true);
                if better {
                    best = Some((w.clone(), outcome.final_lml));
                }
                per_restart.push(outcome);
            }
            Err(_) => failures += 1,
        }
    }
    let Some((w_best, best_lml)) = best else {
        return Err(Error::Fit(format!(
            "all {failures} restarts failed Cholesky at initialization"
        )));
    };
    Ok(TrainReport {
        best_theta: obj.theta_from_log(&w_best),
        best_lml,
        per_restart,
    })
}

/// Averaged fitted AGPM-5 hyperparameters for the two modeled processes,
/// layout `[sigma1^2, l1_rc, l1_t, l1_d, sigma2^2, l2_rc, l2_t, l2_s, noise]`.
pub fn preset_theta(name: &str) -> Result<ThetaVector> {
    let values = match name.to_ascii_lowercase().as_str() {
        "matching" => vec![5.4, 7.4, 20.9, 19.9, 1.6, 0.2, 41.9, 12.3, 5.1],
        "pickup" => vec![3.9, 1.0, 20.4, 29.5, 0.8, 0.2, 5.8, 1.3, 7.4],
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (expected 'matching' or 'pickup')"
            )))
        }
    };
    ThetaVector::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::log_marginal_likelihood;
    use crate::kernels::parse_kernel_spec;
    use rand_chacha::ChaCha8Rng;

    fn sample_se_data(seed: u64, n: usize, sigma2: f64, l: f64, noise: f64) -> (DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 5, |_, _| rng.gen_range(-3.0..3.0));
        let expr = parse_kernel_spec("SE(r,c,t,d,s)").unwrap();
        let theta = ThetaVector::for_expr(&expr, vec![sigma2, l, noise]).unwrap();
        let mut k = crate::kernels::gram_symmetric(&expr, &theta, &x).unwrap();
        for i in 0..n {
            k[(i, i)] += noise + 1e-10;
        }
        let chol = k.cholesky().unwrap();
        let z = DVector::from_fn(n, |_, _| {
            // Box-Muller from the same stream keeps the draw deterministic
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let y = chol.l() * z;
        (x, y)
    }

    #[test]
    fn recovers_likelihood_of_generating_theta() {
        let (x, y) = sample_se_data(42, 60, 2.0, 1.5, 0.1);
        let expr = parse_kernel_spec("SE(r,c,t,d,s)").unwrap();
        let theta_true = ThetaVector::for_expr(&expr, vec![2.0, 1.5, 0.1]).unwrap();
        let lml_true = log_marginal_likelihood(&expr, &theta_true, &x, &y).unwrap();
        // most random starts land on the "noise explains everything" plateau,
        // so give the search enough restarts to escape it
        let cfg = TrainConfig {
            restarts: 10,
            seed: 7,
            ..TrainConfig::default()
        };
        let report = optimize_hyperparams(&expr, &x, &y, &cfg).unwrap();
        assert!(
            report.best_lml >= lml_true - 1e-3,
            "best {} vs true {}",
            report.best_lml,
            lml_true
        );
    }

    #[test]
    fn zero_targets_drive_variance_down() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = DMatrix::from_fn(20, 5, |_, _| rng.gen_range(-2.0..2.0));
        let y = DVector::zeros(20);
        let expr = parse_kernel_spec("SE(r,c,t,d,s)").unwrap();
        let cfg = TrainConfig {
            restarts: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = optimize_hyperparams(&expr, &x, &y, &cfg).unwrap();
        let theta = ThetaVector::new(report.best_theta.clone()).unwrap();
        let model = crate::gp::fit_cache(&expr, &theta, x, y).unwrap();
        let xs = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-2.0..2.0));
        let mean = crate::gp::predict_mean(&model, &xs).unwrap();
        for v in mean.iter() {
            assert!(v.abs() < 1e-3);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = sample_se_data(9, 15, 1.0, 1.0, 0.2);
        let expr = parse_kernel_spec("SE(r,c,t,d,s)").unwrap();
        let cfg = TrainConfig {
            restarts: 3,
            max_iters: 30,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = optimize_hyperparams(&expr, &x, &y, &cfg).unwrap();
        let b = optimize_hyperparams(&expr, &x, &y, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn one_slot_optimum_matches_grid_scan() {
        let (x, y) = sample_se_data(21, 25, 1.5, 1.2, 0.2);
        let expr = parse_kernel_spec("SE(r,c,t,d,s)").unwrap();
        // optimize only the length-scale (slot 1)
        let preset = vec![1.5, 0.7, 0.2];
        let cfg = TrainConfig {
            restarts: 1,
            init: InitStrategy::Preset(preset.clone()),
            frozen_slots: vec![0, 2],
            ..TrainConfig::default()
        };
        let report = optimize_hyperparams(&expr, &x, &y, &cfg).unwrap();

        // 1000-point grid scan over the length-scale
        let mut best_l = 0.0;
        let mut best_val = f64::NEG_INFINITY;
        for i in 0..1000 {
            let l = 0.05 + 4.0 * i as f64 / 999.0;
            let theta = ThetaVector::for_expr(&expr, vec![1.5, l, 0.2]).unwrap();
            let v = log_marginal_likelihood(&expr, &theta, &x, &y).unwrap();
            if v > best_val {
                best_val = v;
                best_l = l;
            }
        }
        let grid_step = 4.0 / 999.0;
        assert!(
            (report.best_theta[1] - best_l).abs() <= grid_step,
            "optimizer {} vs grid {}",
            report.best_theta[1],
            best_l
        );
        assert_eq!(report.best_theta[0], 1.5);
        assert_eq!(report.best_theta[2], 0.2);
    }

    #[test]
    fn log_space_gradient_chain_rule() {
        let (x, y) = sample_se_data(33, 10, 1.0, 1.0, 0.3);
        let expr = parse_kernel_spec("SE(r,c,t,d,s)").unwrap();
        let theta = ThetaVector::for_expr(&expr, vec![1.3, 0.8, 0.25]).unwrap();
        let raw = gp::lml_gradient(&expr, &theta, &x, &y).unwrap();
        // finite differences in log space
        for slot in 0..3 {
            let h = 1e-6;
            let w: Vec<f64> = theta.values().iter().map(|v| v.ln()).collect();
            let mut up = w.clone();
            let mut dn = w.clone();
            up[slot] += h;
            dn[slot] -= h;
            let tu = ThetaVector::new(up.iter().map(|v| v.exp()).collect()).unwrap();
            let td = ThetaVector::new(dn.iter().map(|v| v.exp()).collect()).unwrap();
            let fu = log_marginal_likelihood(&expr, &tu, &x, &y).unwrap();
            let fd = log_marginal_likelihood(&expr, &td, &x, &y).unwrap();
            let num = (fu - fd) / (2.0 * h);
            let analytic = raw[slot] * theta.values()[slot];
            assert!(
                (analytic - num).abs() / num.abs().max(1e-8) < 1e-4,
                "slot {slot}: {analytic} vs {num}"
            );
        }
    }

    #[test]
    fn preset_vectors() {
        let m = preset_theta("matching").unwrap();
        assert_eq!(
            m.values(),
            &[5.4, 7.4, 20.9, 19.9, 1.6, 0.2, 41.9, 12.3, 5.1]
        );
        let p = preset_theta("pickup").unwrap();
        assert_eq!(p.values(), &[3.9, 1.0, 20.4, 29.5, 0.8, 0.2, 5.8, 1.3, 7.4]);
        assert!(preset_theta("other").is_err());
    }

    #[test]
    fn config_validation() {
        let expr = parse_kernel_spec("SE(r,c)").unwrap();
        let bad = TrainConfig {
            restarts: 0,
            ..TrainConfig::default()
        };
        let x = DMatrix::zeros(3, 5);
        let y = DVector::zeros(3);
        assert!(optimize_hyperparams(&expr, &x, &y, &bad).is_err());
        let bad_preset = TrainConfig {
            init: InitStrategy::Preset(vec![1.0]),
            ..TrainConfig::default()
        };
        assert!(optimize_hyperparams(&expr, &x, &y, &bad_preset).is_err());
    }
}
