//! Base kernels, shared-variance products, additive sums, covariance-matrix
//! assembly, and kernel derivatives with respect to hyperparameters and inputs.
//!
//! The input vector is `x = [x^r, x^c, x^t, x^d, x^s]` (zone row, zone column,
//! time index, demand, supply). A kernel expression is a sum of products of
//! base kernels over disjoint covariate blocks; each product carries a single
//! overall-shared variance and each factor evaluates at unit variance.

use nalgebra::DMatrix;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::{Error, Result};

/// Number of input dimensions: r, c, t, d, s.
pub const INPUT_DIM: usize = 5;

const COVARIATE_NAMES: [&str; INPUT_DIM] = ["r", "c", "t", "d", "s"];

/// Index of the supply covariate in the input vector.
pub const SUPPLY_DIM: usize = 4;
/// Index of the demand covariate in the input vector.
pub const DEMAND_DIM: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KernelFamily {
    Se,
    Pe,
    Ca,
    Ou,
    Bi,
}

impl KernelFamily {
    /// Number of non-variance hyperparameters carried by the family.
    pub fn param_count(self) -> usize {
        match self {
            KernelFamily::Se | KernelFamily::Ou => 1,
            KernelFamily::Pe => 2,
            KernelFamily::Ca | KernelFamily::Bi => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Se => "SE",
            KernelFamily::Pe => "PE",
            KernelFamily::Ca => "CA",
            KernelFamily::Ou => "OU",
            KernelFamily::Bi => "BI",
        }
    }
}

/// An ordered set of input-dimension indices one base kernel operates on.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CovariateBlock {
    pub dims: Vec<usize>,
}

impl CovariateBlock {
    pub fn new(mut dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Kernel("covariate block must be non-empty".into()));
        }
        dims.sort_unstable();
        for w in dims.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Kernel(format!(
                    "duplicate covariate '{}' within a base kernel",
                    COVARIATE_NAMES[w[0]]
                )));
            }
        }
        if *dims.last().unwrap() >= INPUT_DIM {
            return Err(Error::Kernel("covariate index out of range".into()));
        }
        Ok(CovariateBlock { dims })
    }

    pub fn name(&self) -> String {
        self.dims
            .iter()
            .map(|&d| COVARIATE_NAMES[d])
            .collect::<Vec<_>>()
            .join(",")
    }

    fn gather(&self, x: &[f64]) -> Vec<f64> {
        self.dims.iter().map(|&d| x[d]).collect()
    }
}

/// A unit-variance base kernel over one covariate block.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaseKernel {
    pub family: KernelFamily,
    pub block: CovariateBlock,
}

impl BaseKernel {
    pub fn new(family: KernelFamily, block: CovariateBlock) -> Result<Self> {
        if family == KernelFamily::Pe && block.dims.len() > 1 {
            return Err(Error::Kernel(
                "PE kernel is defined over a single covariate".into(),
            ));
        }
        Ok(BaseKernel { family, block })
    }
}

/// A product of base kernels carrying one overall-shared variance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProductKernel {
    pub factors: Vec<BaseKernel>,
}

impl ProductKernel {
    pub fn new(factors: Vec<BaseKernel>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::Kernel("product must have at least one factor".into()));
        }
        let mut seen = [false; INPUT_DIM];
        for f in &factors {
            for &d in &f.block.dims {
                if seen[d] {
                    return Err(Error::Kernel(format!(
                        "covariate '{}' appears in two factors of one product",
                        COVARIATE_NAMES[d]
                    )));
                }
                seen[d] = true;
            }
        }
        Ok(ProductKernel { factors })
    }

    /// Theta slots used by this term: shared variance plus factor params.
    pub fn param_count(&self) -> usize {
        1 + self
            .factors
            .iter()
            .map(|f| f.family.param_count())
            .sum::<usize>()
    }
}

/// A sum of shared-variance products; the full covariance function.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelExpr {
    pub terms: Vec<ProductKernel>,
}

impl KernelExpr {
    pub fn new(terms: Vec<ProductKernel>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Kernel("expression must have at least one term".into()));
        }
        Ok(KernelExpr { terms })
    }

    /// Total theta length: term slots plus one noise-variance slot.
    pub fn theta_len(&self) -> usize {
        self.terms.iter().map(|t| t.param_count()).sum::<usize>() + 1
    }

    /// Offset of each term's slot range in the flat theta layout.
    pub fn term_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.terms.len());
        let mut off = 0;
        for t in &self.terms {
            offsets.push(off);
            off += t.param_count();
        }
        offsets
    }

    /// True if `dim` is covered by some factor of some term.
    pub fn uses_dim(&self, dim: usize) -> bool {
        self.terms
            .iter()
            .any(|t| t.factors.iter().any(|f| f.block.dims.contains(&dim)))
    }
}

impl std::fmt::Display for KernelExpr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let terms: Vec<String> = self
            .terms
            .iter()
            .map(|t| {
                t.factors
                    .iter()
                    .map(|b| format!("{}({})", b.family.name(), b.block.name()))
                    .collect::<Vec<_>>()
                    .join("*")
            })
            .collect();
        write!(f, "{}", terms.join(" + "))
    }
}

/// Flat hyperparameter vector: for each term `[sigma_ov^2, factor params...]`
/// in term order, then the noise variance `sigma_eps^2` last.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThetaVector {
    values: Vec<f64>,
}

impl ThetaVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Hyperparameter(format!(
                "theta entries must be strictly positive and finite, got {v}"
            )));
        }
        Ok(ThetaVector { values })
    }

    pub fn for_expr(expr: &KernelExpr, values: Vec<f64>) -> Result<Self> {
        if values.len() != expr.theta_len() {
            return Err(Error::ThetaLayout {
                expected: expr.theta_len(),
                got: values.len(),
            });
        }
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn noise_variance(&self) -> f64 {
        *self.values.last().expect("theta is non-empty")
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check(&self, expr: &KernelExpr) -> Result<()> {
        if self.values.len() != expr.theta_len() {
            return Err(Error::ThetaLayout {
                expected: expr.theta_len(),
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Evaluate one unit-variance base kernel.
pub fn eval_base(family: KernelFamily, params: &[f64], a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "base kernel inputs of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if params.len() != family.param_count() {
        return Err(Error::Hyperparameter(format!(
            "{} kernel expects {} params, got {}",
            family.name(),
            family.param_count(),
            params.len()
        )));
    }
    if let Some(p) = params.iter().find(|p| !(**p > 0.0)) {
        return Err(Error::Hyperparameter(format!(
            "{} kernel parameter must be positive, got {p}",
            family.name()
        )));
    }
    Ok(match family {
        KernelFamily::Se => {
            let l = params[0];
            (-sq_dist(a, b) / (2.0 * l * l)).exp()
        }
        KernelFamily::Pe => {
            if a.len() != 1 {
                return Err(Error::Kernel(
                    "PE kernel is defined over a single covariate".into(),
                ));
            }
            let (l, gamma) = (params[0], params[1]);
            let s = ((a[0] - b[0]) / gamma).sin();
            (-2.0 * s * s / (l * l)).exp()
        }
        KernelFamily::Ou => {
            let l = params[0];
            (-sq_dist(a, b).sqrt() / l).exp()
        }
        KernelFamily::Ca => {
            if a == b {
                1.0
            } else {
                0.0
            }
        }
        KernelFamily::Bi => {
            if a.iter().all(|v| *v == 1.0) && b.iter().all(|v| *v == 1.0) {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// Unit-variance factor values of one product term at `(x, x2)`.
fn factor_values(term: &ProductKernel, params: &[f64], x: &[f64], x2: &[f64]) -> Result<Vec<f64>> {
    let mut vals = Vec::with_capacity(term.factors.len());
    let mut off = 0;
    for f in &term.factors {
        let np = f.family.param_count();
        let a = f.block.gather(x);
        let b = f.block.gather(x2);
        vals.push(eval_base(f.family, &params[off..off + np], &a, &b)?);
        off += np;
    }
    Ok(vals)
}

/// Evaluate the full expression (excluding the noise term).
pub fn eval_expr(expr: &KernelExpr, theta: &ThetaVector, x: &[f64], x2: &[f64]) -> Result<f64> {
    theta.check(expr)?;
    if x.len() != INPUT_DIM || x2.len() != INPUT_DIM {
        return Err(Error::Dimension(format!(
            "input vectors must have length {INPUT_DIM}"
        )));
    }
    let mut total = 0.0;
    let offsets = expr.term_offsets();
    for (term, &off) in expr.terms.iter().zip(&offsets) {
        let sigma2 = theta.values()[off];
        let vals = factor_values(term, &theta.values()[off + 1..off + term.param_count()], x, x2)?;
        total += sigma2 * vals.iter().product::<f64>();
    }
    Ok(total)
}

fn validate_inputs(x: &DMatrix<f64>) -> Result<()> {
    if x.ncols() != INPUT_DIM {
        return Err(Error::Dimension(format!(
            "input matrix must have {INPUT_DIM} columns, got {}",
            x.ncols()
        )));
    }
    Ok(())
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

/// Cross covariance matrix between two input sets (sequential path).
pub fn gram_matrix_seq(
    expr: &KernelExpr,
    theta: &ThetaVector,
    x: &DMatrix<f64>,
    x2: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    theta.check(expr)?;
    validate_inputs(x)?;
    validate_inputs(x2)?;
    let (n, m) = (x.nrows(), x2.nrows());
    let mut buf = vec![0.0; n * m];
    for i in 0..n {
        let xi = row(x, i);
        for j in 0..m {
            buf[i * m + j] = eval_expr(expr, theta, &xi, &row(x2, j))?;
        }
    }
    Ok(DMatrix::from_row_slice(n, m, &buf))
}

/// Cross covariance matrix, partitioned over rows.
#[cfg(feature = "parallel")]
pub fn gram_matrix_par(
    expr: &KernelExpr,
    theta: &ThetaVector,
    x: &DMatrix<f64>,
    x2: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    theta.check(expr)?;
    validate_inputs(x)?;
    validate_inputs(x2)?;
    let (n, m) = (x.nrows(), x2.nrows());
    let mut buf = vec![0.0; n * m];
    buf.par_chunks_mut(m)
        .enumerate()
        .try_for_each(|(i, out)| -> Result<()> {
            let xi = row(x, i);
            for (j, slot) in out.iter_mut().enumerate() {
                *slot = eval_expr(expr, theta, &xi, &row(x2, j))?;
            }
            Ok(())
        })?;
    Ok(DMatrix::from_row_slice(n, m, &buf))
}

/// Cross covariance matrix between two input sets.
pub fn gram_matrix(
    expr: &KernelExpr,
    theta: &ThetaVector,
    x: &DMatrix<f64>,
    x2: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    #[cfg(feature = "parallel")]
    {
        gram_matrix_par(expr, theta, x, x2)
    }
    #[cfg(not(feature = "parallel"))]
    {
        gram_matrix_seq(expr, theta, x, x2)
    }
}

/// Symmetric covariance matrix over one input set; each pair is computed once
/// and mirrored, so the result equals its transpose exactly.
pub fn gram_symmetric(
    expr: &KernelExpr,
    theta: &ThetaVector,
    x: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    theta.check(expr)?;
    validate_inputs(x)?;
    let n = x.nrows();
    let mut buf = vec![0.0; n * n];

    let fill_row = |i: usize, out: &mut [f64]| -> Result<()> {
        let xi = row(x, i);
        for (j, slot) in out.iter_mut().enumerate().skip(i) {
            *slot = eval_expr(expr, theta, &xi, &row(x, j))?;
        }
        Ok(())
    };

    #[cfg(feature = "parallel")]
    buf.par_chunks_mut(n)
        .enumerate()
        .try_for_each(|(i, out)| fill_row(i, out))?;
    #[cfg(not(feature = "parallel"))]
    for (i, out) in buf.chunks_mut(n).enumerate() {
        fill_row(i, out)?;
    }

    for i in 0..n {
        for j in 0..i {
            buf[i * n + j] = buf[j * n + i];
        }
    }
    Ok(DMatrix::from_row_slice(n, n, &buf))
}

/// Per-pair derivative of `k(x, x2) + sigma_eps^2 [x == x2 slot]` with respect
/// to every theta slot. The noise slot is handled by the caller (identity).
fn pair_theta_derivs(
    expr: &KernelExpr,
    theta: &ThetaVector,
    x: &[f64],
    x2: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let offsets = expr.term_offsets();
    for (term, &off) in expr.terms.iter().zip(&offsets) {
        let sigma2 = theta.values()[off];
        let params = &theta.values()[off + 1..off + term.param_count()];
        let vals = factor_values(term, params, x, x2)?;
        let product: f64 = vals.iter().product();
        out[off] = product;

        let mut poff = 0;
        let mut slot = off + 1;
        for (fi, f) in term.factors.iter().enumerate() {
            let np = f.family.param_count();
            if np > 0 {
                let others: f64 = vals
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != fi)
                    .map(|(_, v)| v)
                    .product();
                let a = f.block.gather(x);
                let b = f.block.gather(x2);
                let fval = vals[fi];
                match f.family {
                    KernelFamily::Se => {
                        let l = params[poff];
                        out[slot] = sigma2 * others * fval * sq_dist(&a, &b) / (l * l * l);
                    }
                    KernelFamily::Ou => {
                        let l = params[poff];
                        out[slot] = sigma2 * others * fval * sq_dist(&a, &b).sqrt() / (l * l);
                    }
                    KernelFamily::Pe => {
                        let (l, gamma) = (params[poff], params[poff + 1]);
                        let delta = a[0] - b[0];
                        let u = delta / gamma;
                        let s = u.sin();
                        out[slot] = sigma2 * others * fval * 4.0 * s * s / (l * l * l);
                        out[slot + 1] = sigma2
                            * others
                            * fval
                            * 2.0
                            * delta
                            * (2.0 * u).sin()
                            / (l * l * gamma * gamma);
                    }
                    KernelFamily::Ca | KernelFamily::Bi => unreachable!(),
                }
            }
            slot += np;
            poff += np;
        }
    }
    Ok(())
}

/// Derivative matrices of `K^F + sigma_eps^2 I` with respect to each theta
/// slot, noise slot last.
pub fn grad_theta(
    expr: &KernelExpr,
    theta: &ThetaVector,
    x: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>> {
    theta.check(expr)?;
    validate_inputs(x)?;
    let n = x.nrows();
    let p = theta.len();
    let mut mats: Vec<DMatrix<f64>> = (0..p).map(|_| DMatrix::zeros(n, n)).collect();
    let mut derivs = vec![0.0; p];
    for i in 0..n {
        let xi = row(x, i);
        for j in i..n {
            derivs.iter_mut().for_each(|d| *d = 0.0);
            pair_theta_derivs(expr, theta, &xi, &row(x, j), &mut derivs)?;
            for (slot, m) in mats.iter_mut().enumerate() {
                m[(i, j)] = derivs[slot];
                m[(j, i)] = derivs[slot];
            }
        }
    }
    // noise slot: identity
    let noise = mats.last_mut().expect("theta has a noise slot");
    noise.fill(0.0);
    noise.fill_diagonal(1.0);
    Ok(mats)
}

/// Derivative of `eval_expr(expr, theta, xstar, X_i)` with respect to
/// `xstar[dim]`, one entry per training row.
pub fn grad_input(
    expr: &KernelExpr,
    theta: &ThetaVector,
    xstar: &[f64],
    x: &DMatrix<f64>,
    dim: usize,
) -> Result<Vec<f64>> {
    theta.check(expr)?;
    validate_inputs(x)?;
    if xstar.len() != INPUT_DIM {
        return Err(Error::Dimension(format!(
            "query vector must have length {INPUT_DIM}"
        )));
    }
    if dim >= INPUT_DIM {
        return Err(Error::Dimension(format!("dimension index {dim} out of range")));
    }
    for term in &expr.terms {
        for f in &term.factors {
            if f.block.dims.contains(&dim)
                && !matches!(f.family, KernelFamily::Se | KernelFamily::Ou)
            {
                return Err(Error::GradientUnsupported(format!(
                    "input gradients are only defined for SE and OU factors; '{}' carries {}",
                    COVARIATE_NAMES[dim],
                    f.family.name()
                )));
            }
        }
    }

    let offsets = expr.term_offsets();
    let n = x.nrows();
    let mut out = vec![0.0; n];
    for (i, entry) in out.iter_mut().enumerate() {
        let xi = row(x, i);
        let mut total = 0.0;
        for (term, &off) in expr.terms.iter().zip(&offsets) {
            let Some((fi, factor)) = term
                .factors
                .iter()
                .enumerate()
                .find(|(_, f)| f.block.dims.contains(&dim))
            else {
                continue;
            };
            let sigma2 = theta.values()[off];
            let params = &theta.values()[off + 1..off + term.param_count()];
            let vals = factor_values(term, params, xstar, &xi)?;
            let term_value = sigma2 * vals.iter().product::<f64>();
            let poff: usize = term.factors[..fi]
                .iter()
                .map(|f| f.family.param_count())
                .sum();
            let l = params[poff];
            let weight = match factor.family {
                KernelFamily::Se => (xi[dim] - xstar[dim]) / (l * l),
                KernelFamily::Ou => {
                    let a = factor.block.gather(xstar);
                    let b = factor.block.gather(&xi);
                    let dist = sq_dist(&a, &b).sqrt();
                    if dist == 0.0 {
                        return Err(Error::GradientUnsupported(
                            "OU input gradient at zero block distance is undefined".into(),
                        ));
                    }
                    (xi[dim] - xstar[dim]) / (l * dist)
                }
                _ => unreachable!(),
            };
            total += term_value * weight;
        }
        *entry = total;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Kernel-spec grammar
// ---------------------------------------------------------------------------

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        Parser {
            bytes: text.as_bytes(),
            pos: 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            position: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn expect(&mut self, ch: u8) -> Result<()> {
        if self.peek() == Some(ch) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", ch as char)))
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(self.err("expected identifier"));
        }
        Ok(std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii slice")
            .to_string())
    }

    fn base(&mut self) -> Result<BaseKernel> {
        let name = self.ident()?;
        let family = match name.to_ascii_uppercase().as_str() {
            "SE" => KernelFamily::Se,
            "PE" => KernelFamily::Pe,
            "CA" => KernelFamily::Ca,
            "OU" => KernelFamily::Ou,
            "BI" => KernelFamily::Bi,
            other => return Err(self.err(format!("unknown kernel family '{other}'"))),
        };
        self.expect(b'(')?;
        let mut dims = Vec::new();
        loop {
            let cov = self.ident()?;
            let dim = COVARIATE_NAMES
                .iter()
                .position(|n| *n == cov.to_ascii_lowercase())
                .ok_or_else(|| self.err(format!("unknown covariate '{cov}'")))?;
            if dims.contains(&dim) {
                return Err(self.err(format!("duplicate covariate '{cov}'")));
            }
            dims.push(dim);
            match self.peek() {
                Some(b',') => {
                    self.pos += 1;
                }
                Some(b')') => {
                    self.pos += 1;
                    break;
                }
                _ => return Err(self.err("expected ',' or ')'")),
            }
        }
        if family == KernelFamily::Pe && dims.len() > 1 {
            return Err(self.err("PE kernel is defined over a single covariate"));
        }
        BaseKernel::new(family, CovariateBlock::new(dims)?)
    }

    fn product(&mut self) -> Result<ProductKernel> {
        let mut factors = vec![self.base()?];
        while self.peek() == Some(b'*') {
            self.pos += 1;
            factors.push(self.base()?);
        }
        let pos = self.pos;
        ProductKernel::new(factors).map_err(|e| Error::Parse {
            position: pos,
            message: e.to_string(),
        })
    }

    fn expr(&mut self) -> Result<KernelExpr> {
        let mut terms = vec![self.product()?];
        while self.peek() == Some(b'+') {
            self.pos += 1;
            terms.push(self.product()?);
        }
        if self.peek().is_some() {
            return Err(self.err("unexpected trailing input"));
        }
        KernelExpr::new(terms)
    }
}

/// Structural presets from the model comparison table.
fn preset_spec(name: &str) -> Option<&'static str> {
    match name.to_ascii_uppercase().as_str() {
        "AGPM1" => Some("SE(r,c,t,d,s)"),
        "AGPM2" => Some("SE(r,c,t)*SE(d,s)"),
        "AGPM3" => Some("SE(r,c)+SE(t)+SE(d)+SE(s)"),
        "AGPM4" => Some("SE(r,c)*SE(s)+SE(t)*SE(d)"),
        "AGPM5" => Some("SE(r,c)*SE(t)*SE(d)+SE(r,c)*SE(t)*SE(s)"),
        _ => None,
    }
}

/// Parse a kernel-spec string or a named preset (`AGPM1`..`AGPM5`).
pub fn parse_kernel_spec(text: &str) -> Result<KernelExpr> {
    let trimmed = text.trim();
    if let Some(expanded) = preset_spec(trimmed) {
        return Parser::new(expanded).expr();
    }
    Parser::new(text).expr()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn se_expr() -> KernelExpr {
        parse_kernel_spec("SE(r,c,t,d,s)").unwrap()
    }

    fn agpm5() -> KernelExpr {
        parse_kernel_spec("AGPM5").unwrap()
    }

    fn random_inputs(rng: &mut impl rand::Rng, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, INPUT_DIM, |_, _| rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn base_kernel_scalar_values() {
        // SE at zero distance
        assert_eq!(
            eval_base(KernelFamily::Se, &[1.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap(),
            1.0
        );
        // SE, l=2, distance 2
        assert_relative_eq!(
            eval_base(KernelFamily::Se, &[2.0], &[0.0], &[2.0]).unwrap(),
            (-0.5f64).exp(),
            max_relative = 1e-15
        );
        // PE with offset pi*gamma is periodic back to 1
        assert_relative_eq!(
            eval_base(KernelFamily::Pe, &[1.0, 1.0], &[std::f64::consts::PI], &[0.0]).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        // OU, l=1, distance 1
        assert_relative_eq!(
            eval_base(KernelFamily::Ou, &[1.0], &[0.0], &[1.0]).unwrap(),
            (-1.0f64).exp(),
            max_relative = 1e-15
        );
        // CA equality cases
        assert_eq!(eval_base(KernelFamily::Ca, &[], &[2.0], &[2.0]).unwrap(), 1.0);
        assert_eq!(eval_base(KernelFamily::Ca, &[], &[2.0], &[3.0]).unwrap(), 0.0);
        // BI both-one case
        assert_eq!(eval_base(KernelFamily::Bi, &[], &[1.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(eval_base(KernelFamily::Bi, &[], &[0.0], &[1.0]).unwrap(), 0.0);
    }

    #[test]
    fn base_kernel_errors() {
        assert!(eval_base(KernelFamily::Se, &[0.0], &[0.0], &[0.0]).is_err());
        assert!(eval_base(KernelFamily::Se, &[-1.0], &[0.0], &[0.0]).is_err());
        assert!(eval_base(KernelFamily::Se, &[1.0], &[0.0], &[0.0, 1.0]).is_err());
        assert!(eval_base(KernelFamily::Pe, &[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn agpm5_zero_distance_is_sum_of_variances() {
        let expr = agpm5();
        let theta = ThetaVector::for_expr(
            &expr,
            vec![5.4, 7.4, 20.9, 19.9, 1.6, 0.2, 41.9, 12.3, 5.1],
        )
        .unwrap();
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let v = eval_expr(&expr, &theta, &x, &x).unwrap();
        assert_relative_eq!(v, 7.0, max_relative = 1e-14);
    }

    #[test]
    fn expr_additivity() {
        let expr = agpm5();
        let theta = ThetaVector::for_expr(
            &expr,
            vec![5.4, 7.4, 20.9, 19.9, 1.6, 0.2, 41.9, 12.3, 5.1],
        )
        .unwrap();
        let t1 = KernelExpr::new(vec![expr.terms[0].clone()]).unwrap();
        let t2 = KernelExpr::new(vec![expr.terms[1].clone()]).unwrap();
        let th1 = ThetaVector::for_expr(&t1, vec![5.4, 7.4, 20.9, 19.9, 5.1]).unwrap();
        let th2 = ThetaVector::for_expr(&t2, vec![1.6, 0.2, 41.9, 12.3, 5.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_inputs(&mut rng, 3);
        let g = gram_symmetric(&expr, &theta, &x).unwrap();
        let g1 = gram_symmetric(&t1, &th1, &x).unwrap();
        let g2 = gram_symmetric(&t2, &th2, &x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(g[(i, j)], g1[(i, j)] + g2[(i, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn gram_symmetric_exact_transpose() {
        let expr = agpm5();
        let theta = ThetaVector::for_expr(
            &expr,
            vec![5.4, 7.4, 20.9, 19.9, 1.6, 0.2, 41.9, 12.3, 5.1],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_inputs(&mut rng, 8);
        let g = gram_symmetric(&expr, &theta, &x).unwrap();
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn gram_single_input_unit_variance() {
        let expr = se_expr();
        let theta = ThetaVector::for_expr(&expr, vec![1.0, 1.0, 0.1]).unwrap();
        let x = DMatrix::from_row_slice(1, 5, &[0.0, 0.0, 0.0, 0.0, 0.0]);
        let g = gram_matrix(&expr, &theta, &x, &x).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn gram_psd_with_jitter() {
        let expr = agpm5();
        let theta = ThetaVector::for_expr(
            &expr,
            vec![5.4, 7.4, 20.9, 19.9, 1.6, 0.2, 41.9, 12.3, 5.1],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_inputs(&mut rng, 50);
        let mut g = gram_symmetric(&expr, &theta, &x).unwrap();
        for i in 0..50 {
            g[(i, i)] += 1e-8;
        }
        assert!(g.cholesky().is_some());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        #[cfg(feature = "parallel")]
        {
            let expr = agpm5();
            let theta = ThetaVector::for_expr(
                &expr,
                vec![5.4, 7.4, 20.9, 19.9, 1.6, 0.2, 41.9, 12.3, 5.1],
            )
            .unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let x = random_inputs(&mut rng, 12);
            let x2 = random_inputs(&mut rng, 7);
            let s = gram_matrix_seq(&expr, &theta, &x, &x2).unwrap();
            let p = gram_matrix_par(&expr, &theta, &x, &x2).unwrap();
            assert_eq!(s, p);
        }
    }

    fn finite_diff_theta(
        expr: &KernelExpr,
        theta: &ThetaVector,
        x: &DMatrix<f64>,
        slot: usize,
    ) -> DMatrix<f64> {
        let h = 1e-6 * theta.values()[slot].abs().max(1.0);
        let mut up = theta.values().to_vec();
        let mut dn = theta.values().to_vec();
        up[slot] += h;
        dn[slot] -= h;
        let tu = ThetaVector::new(up).unwrap();
        let td = ThetaVector::new(dn).unwrap();
        let n = x.nrows();
        let mut ku = gram_symmetric(expr, &tu, x).unwrap();
        let kd = gram_symmetric(expr, &td, x).unwrap();
        // noise term enters the diagonal
        if slot == theta.len() - 1 {
            for i in 0..n {
                ku[(i, i)] += tu.noise_variance() - td.noise_variance();
            }
        }
        (ku - kd) / (2.0 * h)
    }

    #[test]
    fn grad_theta_matches_finite_differences() {
        let expr = parse_kernel_spec("SE(r,c)*PE(t)*OU(d) + SE(s)").unwrap();
        let theta =
            ThetaVector::for_expr(&expr, vec![2.0, 1.5, 0.7, 2.3, 1.1, 0.9, 3.0, 0.4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_inputs(&mut rng, 5);
        let grads = grad_theta(&expr, &theta, &x).unwrap();
        for slot in 0..theta.len() {
            let fd = finite_diff_theta(&expr, &theta, &x, slot);
            let num = (&grads[slot] - &fd).norm();
            let den = fd.norm().max(1e-12);
            assert!(
                num / den < 1e-5,
                "slot {slot}: relative Frobenius error {}",
                num / den
            );
        }
    }

    #[test]
    fn grad_theta_noise_slot_is_identity() {
        let expr = se_expr();
        let theta = ThetaVector::for_expr(&expr, vec![1.3, 0.8, 0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_inputs(&mut rng, 4);
        let grads = grad_theta(&expr, &theta, &x).unwrap();
        assert_eq!(grads.last().unwrap(), &DMatrix::identity(4, 4));
    }

    #[test]
    fn grad_theta_variance_slot_is_unit_gram() {
        let expr = se_expr();
        let theta = ThetaVector::for_expr(&expr, vec![2.5, 0.8, 0.2]).unwrap();
        let unit = ThetaVector::for_expr(&expr, vec![1.0, 0.8, 0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_inputs(&mut rng, 4);
        let grads = grad_theta(&expr, &theta, &x).unwrap();
        let g = gram_symmetric(&expr, &unit, &x).unwrap();
        assert_relative_eq!((&grads[0] - &g).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn grad_input_matches_finite_differences() {
        let expr = agpm5();
        let theta = ThetaVector::for_expr(
            &expr,
            vec![5.4, 7.4, 20.9, 19.9, 1.6, 0.2, 41.9, 12.3, 5.1],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_inputs(&mut rng, 6);
        let xstar = [0.3, -0.2, 0.5, 1.0, -0.7];
        for dim in 0..INPUT_DIM {
            let g = grad_input(&expr, &theta, &xstar, &x, dim).unwrap();
            let h = 1e-5;
            for i in 0..6 {
                let xi = row(&x, i);
                let mut up = xstar;
                let mut dn = xstar;
                up[dim] += h;
                dn[dim] -= h;
                let fd = (eval_expr(&expr, &theta, &up, &xi).unwrap()
                    - eval_expr(&expr, &theta, &dn, &xi).unwrap())
                    / (2.0 * h);
                let denom = fd.abs().max(1e-6);
                assert!(
                    (g[i] - fd).abs() / denom < 1e-4,
                    "dim {dim}, row {i}: {} vs {}",
                    g[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn grad_input_zero_at_coincident_point() {
        let expr = se_expr();
        let theta = ThetaVector::for_expr(&expr, vec![1.0, 1.0, 0.1]).unwrap();
        let x = DMatrix::from_row_slice(1, 5, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let g = grad_input(&expr, &theta, &[1.0, 2.0, 3.0, 4.0, 5.0], &x, 3).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn grad_input_absent_dim_is_zero() {
        let expr = parse_kernel_spec("SE(r,c)").unwrap();
        let theta = ThetaVector::for_expr(&expr, vec![1.0, 1.0, 0.1]).unwrap();
        let x = DMatrix::from_row_slice(2, 5, &[0.0; 10]);
        let g = grad_input(&expr, &theta, &[0.5; 5], &x, SUPPLY_DIM).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn grad_input_unsupported_family_errors() {
        let expr = parse_kernel_spec("PE(t)").unwrap();
        let theta = ThetaVector::for_expr(&expr, vec![1.0, 1.0, 1.0, 0.1]).unwrap();
        let x = DMatrix::from_row_slice(1, 5, &[0.0; 5]);
        assert!(grad_input(&expr, &theta, &[0.5; 5], &x, 2).is_err());
    }

    #[test]
    fn grad_input_ou_zero_distance_errors() {
        let expr = parse_kernel_spec("OU(d)").unwrap();
        let theta = ThetaVector::for_expr(&expr, vec![1.0, 1.0, 0.1]).unwrap();
        let x = DMatrix::from_row_slice(1, 5, &[0.0, 0.0, 0.0, 0.5, 0.0]);
        assert!(grad_input(&expr, &theta, &[9.0, 9.0, 9.0, 0.5, 9.0], &x, 3).is_err());
    }

    #[test]
    fn parse_presets() {
        let e1 = parse_kernel_spec("AGPM1").unwrap();
        assert_eq!(e1.terms.len(), 1);
        assert_eq!(e1.terms[0].factors.len(), 1);
        assert_eq!(e1.terms[0].factors[0].block.dims, vec![0, 1, 2, 3, 4]);

        let e5 = parse_kernel_spec("AGPM5").unwrap();
        assert_eq!(e5.terms.len(), 2);
        assert!(e5.terms.iter().all(|t| t.factors.len() == 3));
        assert_eq!(e5.theta_len(), 9);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            parse_kernel_spec("SE(r,r)"),
            Err(Error::Parse { .. })
        ));
        assert!(parse_kernel_spec("SE(r,c)*SE(c)").is_err());
        assert!(parse_kernel_spec("PE(r,c)").is_err());
        assert!(parse_kernel_spec("XX(r)").is_err());
        assert!(parse_kernel_spec("SE(r,c) +").is_err());
        assert!(parse_kernel_spec("SE(q)").is_err());
    }

    #[test]
    fn display_round_trips_through_parser() {
        for spec in ["AGPM1", "AGPM2", "AGPM3", "AGPM4", "AGPM5", "SE(r,c)*OU(t)+PE(d)"] {
            let e = parse_kernel_spec(spec).unwrap();
            let e2 = parse_kernel_spec(&e.to_string()).unwrap();
            assert_eq!(e, e2);
        }
    }

    proptest! {
        #[test]
        fn symmetry_and_bounds(
            xs in proptest::collection::vec(-5.0f64..5.0, INPUT_DIM),
            ys in proptest::collection::vec(-5.0f64..5.0, INPUT_DIM),
            s1 in 0.1f64..10.0,
            s2 in 0.1f64..10.0,
            l in 0.2f64..5.0,
        ) {
            let expr = agpm5();
            let theta = ThetaVector::for_expr(
                &expr,
                vec![s1, l, 2.0, 1.5, s2, 0.5, 3.0, 1.0, 0.1],
            ).unwrap();
            let a = eval_expr(&expr, &theta, &xs, &ys).unwrap();
            let b = eval_expr(&expr, &theta, &ys, &xs).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a >= 0.0);
            prop_assert!(a <= s1 + s2 + 1e-12);
            let diag = eval_expr(&expr, &theta, &xs, &xs).unwrap();
            prop_assert!((diag - (s1 + s2)).abs() < 1e-12);
        }

        #[test]
        fn block_isotropy(r in -4.0f64..4.0, c in -4.0f64..4.0, l in 0.3f64..4.0) {
            // swapping (r, c) preserves distance, so SE over the block is unchanged
            let expr = parse_kernel_spec("SE(r,c)").unwrap();
            let theta = ThetaVector::for_expr(&expr, vec![1.0, l, 0.1]).unwrap();
            let x1 = [r, c, 0.0, 0.0, 0.0];
            let x2 = [c, r, 0.0, 0.0, 0.0];
            let origin = [0.0; 5];
            let a = eval_expr(&expr, &theta, &x1, &origin).unwrap();
            let b = eval_expr(&expr, &theta, &x2, &origin).unwrap();
            prop_assert!((a - b).abs() < 1e-15);
        }
    }
}
