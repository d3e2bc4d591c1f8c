//! Exact GP inference: marginal likelihood and its gradient, posterior
//! prediction, and predictive-mean input gradients with cached factorization
//! constants for O(n) mean / mean-gradient queries.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::{self, KernelExpr, ThetaVector};
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Jitter ladder multipliers applied to `trace(K)/n` when the bare
/// factorization fails.
const JITTER_LADDER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// Factorize `K + sigma_eps^2 I (+ jitter)` with a bounded jitter ladder.
/// Returns the factorization and the jitter actually applied.
fn factorize(k_noisy: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k_noisy.nrows();
    let tau = k_noisy.trace() / n as f64;
    for mult in JITTER_LADDER {
        let jitter = mult * tau;
        let mut m = k_noisy.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return Ok((chol, jitter));
        }
    }
    Err(Error::CholeskyFailed)
}

fn noisy_gram(expr: &KernelExpr, theta: &ThetaVector, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut k = kernels::gram_symmetric(expr, theta, x)?;
    let noise = theta.noise_variance();
    for i in 0..x.nrows() {
        k[(i, i)] += noise;
    }
    Ok(k)
}

/// Log marginal likelihood of the targets under the kernel plus noise.
pub fn log_marginal_likelihood(
    expr: &KernelExpr,
    theta: &ThetaVector,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "{} inputs vs {} targets",
            x.nrows(),
            y.len()
        )));
    }
    let (chol, _) = factorize(&noisy_gram(expr, theta, x)?)?;
    let alpha = chol.solve(y);
    let log_det_half: f64 = (0..x.nrows()).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    Ok(-0.5 * y.dot(&alpha) - log_det_half - 0.5 * x.nrows() as f64 * LN_2PI)
}

/// Gradient of the log marginal likelihood with respect to raw theta.
///
/// Uses the identity `dL/dtheta_j = 0.5 tr((alpha alpha^T - Kinv) dK/dtheta_j)`.
pub fn lml_gradient(
    expr: &KernelExpr,
    theta: &ThetaVector,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<Vec<f64>> {
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "{} inputs vs {} targets",
            x.nrows(),
            y.len()
        )));
    }
    let (chol, _) = factorize(&noisy_gram(expr, theta, x)?)?;
    let alpha = chol.solve(y);
    let kinv = chol.inverse();
    let grads = kernels::grad_theta(expr, theta, x)?;
    let n = x.nrows();
    let mut out = Vec::with_capacity(grads.len());
    for dk in &grads {
        // 0.5 * (alpha' dK alpha - tr(Kinv dK)) without forming alpha alpha'
        let quad = alpha.dot(&(dk * &alpha));
        let mut tr = 0.0;
        for i in 0..n {
            for j in 0..n {
                tr += kinv[(i, j)] * dk[(j, i)];
            }
        }
        out.push(0.5 * (quad - tr));
    }
    Ok(out)
}

/// A fitted GP with frozen training data and cached factorization constants.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    x: DMatrix<f64>,
    y: DVector<f64>,
    expr: KernelExpr,
    theta: ThetaVector,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    jitter_used: f64,
}

impl TrainedModel {
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn expr(&self) -> &KernelExpr {
        &self.expr
    }

    pub fn theta(&self) -> &ThetaVector {
        &self.theta
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }
}

/// Posterior mean with marginal variances or an optional full covariance.
#[derive(Debug, Clone)]
pub struct PredictiveDistribution {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

/// Factorize once, cache alpha, and freeze the model.
pub fn fit_cache(
    expr: &KernelExpr,
    theta: &ThetaVector,
    x: DMatrix<f64>,
    y: DVector<f64>,
) -> Result<TrainedModel> {
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "{} inputs vs {} targets",
            x.nrows(),
            y.len()
        )));
    }
    let (chol, jitter_used) = factorize(&noisy_gram(expr, theta, &x)?)?;
    let alpha = chol.solve(&y);
    Ok(TrainedModel {
        x,
        y,
        expr: expr.clone(),
        theta: theta.clone(),
        chol,
        alpha,
        jitter_used,
    })
}

/// Posterior prediction at query rows.
///
/// The reported variance is the variance of the latent function; pass
/// `include_noise = true` for observation-level intervals. Full covariance is
/// opt-in via `want_full_cov`.
pub fn predict(
    model: &TrainedModel,
    xstar: &DMatrix<f64>,
    want_full_cov: bool,
    include_noise: bool,
) -> Result<PredictiveDistribution> {
    let k_star = kernels::gram_matrix(&model.expr, &model.theta, xstar, &model.x)?;
    let mean = &k_star * &model.alpha;

    // v = L^{-1} K_{X,X*}
    let v = model.chol.l_dirty().solve_lower_triangular(&k_star.transpose()).ok_or_else(|| {
        Error::Dimension("triangular solve failed in predictive variance".into())
    })?;

    let m = xstar.nrows();
    let noise = if include_noise {
        model.theta.noise_variance()
    } else {
        0.0
    };
    let mut variance = DVector::zeros(m);
    for j in 0..m {
        let prior = kernels::eval_expr(
            &model.expr,
            &model.theta,
            &xstar.row(j).iter().copied().collect::<Vec<_>>(),
            &xstar.row(j).iter().copied().collect::<Vec<_>>(),
        )?;
        let reduction: f64 = v.column(j).iter().map(|a| a * a).sum();
        let mut var = prior - reduction;
        if var < 0.0 {
            if var > -1e-8 {
                var = 0.0;
            } else {
                return Err(Error::NegativeVariance(var));
            }
        }
        variance[j] = var + noise;
    }

    let covariance = if want_full_cov {
        let prior = kernels::gram_symmetric(&model.expr, &model.theta, xstar)?;
        let mut cov = prior - v.transpose() * &v;
        // keep the reported diagonal consistent with the clamped variances
        for j in 0..m {
            cov[(j, j)] = variance[j];
        }
        Some(cov)
    } else {
        None
    };

    Ok(PredictiveDistribution {
        mean,
        variance,
        covariance,
    })
}

/// Posterior means only, parallelized over query rows.
pub fn predict_mean(model: &TrainedModel, xstar: &DMatrix<f64>) -> Result<DVector<f64>> {
    let k_star = kernels::gram_matrix(&model.expr, &model.theta, xstar, &model.x)?;
    Ok(&k_star * &model.alpha)
}

/// Derivative of the posterior mean at `xstar` with respect to one input
/// dimension; O(n) per query given the cached alpha.
pub fn predictive_mean_gradient(model: &TrainedModel, xstar: &[f64], dim: usize) -> Result<f64> {
    let w = kernels::grad_input(&model.expr, &model.theta, xstar, &model.x, dim)?;
    Ok(w.iter().zip(model.alpha.iter()).map(|(a, b)| a * b).sum())
}

/// Predictive-mean gradients at many query rows.
pub fn predictive_mean_gradients(
    model: &TrainedModel,
    xstar: &DMatrix<f64>,
    dim: usize,
) -> Result<Vec<f64>> {
    let rows: Vec<Vec<f64>> = (0..xstar.nrows())
        .map(|i| xstar.row(i).iter().copied().collect())
        .collect();
    #[cfg(feature = "parallel")]
    {
        rows.par_iter()
            .map(|r| predictive_mean_gradient(model, r, dim))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        rows.iter()
            .map(|r| predictive_mean_gradient(model, r, dim))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

/// On-disk form of a trained GP; alpha and the factorization are recomputed
/// on load and verified against the invariants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpModelFile {
    pub kernel_spec: String,
    pub theta: Vec<f64>,
    pub n: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub jitter_used: f64,
}

impl TrainedModel {
    pub fn to_file(&self) -> GpModelFile {
        GpModelFile {
            kernel_spec: self.expr.to_string(),
            theta: self.theta.values().to_vec(),
            n: self.x.nrows(),
            x: (0..self.x.nrows())
                .flat_map(|i| self.x.row(i).iter().copied().collect::<Vec<_>>())
                .collect(),
            y: self.y.iter().copied().collect(),
            jitter_used: self.jitter_used,
        }
    }

    pub fn from_file(file: &GpModelFile) -> Result<Self> {
        let expr = kernels::parse_kernel_spec(&file.kernel_spec)?;
        let theta = ThetaVector::for_expr(&expr, file.theta.clone())?;
        if file.x.len() != file.n * kernels::INPUT_DIM || file.y.len() != file.n {
            return Err(Error::Data("model file shape mismatch".into()));
        }
        let x = DMatrix::from_row_slice(file.n, kernels::INPUT_DIM, &file.x);
        let y = DVector::from_column_slice(&file.y);
        let model = fit_cache(&expr, &theta, x, y)?;
        model.verify()?;
        Ok(model)
    }

    /// Check the reconstruction and alpha-residual invariants.
    pub fn verify(&self) -> Result<()> {
        let mut k = noisy_gram(&self.expr, &self.theta, &self.x)?;
        for i in 0..self.x.nrows() {
            k[(i, i)] += self.jitter_used;
        }
        let l = self.chol.l();
        let recon = &l * l.transpose();
        let rel = (&recon - &k).norm() / k.norm().max(1e-300);
        if rel > 1e-8 {
            return Err(Error::Data(format!(
                "Cholesky reconstruction relative error {rel}"
            )));
        }
        let resid = (&k * &self.alpha - &self.y).norm() / self.y.norm().max(1e-300);
        if resid > 1e-6 {
            return Err(Error::Data(format!("alpha residual relative error {resid}")));
        }
        Ok(())
    }
}
