//! Penalized least squares in the truncated eigenbasis.
//!
//! The smoothing spline minimizes
//! `(1/2n) Σ (Y_i − f(X_i))² + (λ/2) J(f, f)` over `f = Σ b_ν φ_ν`, which
//! reduces to the normal equations `(ΦᵀΦ/n + λ diag ρ) b = ΦᵀY/n`.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::eigenbasis::{EigenSystem, FitConfig};
use crate::error::{Error, Result};

/// Observations `(X_i, Y_i)` with `X_i ∈ [0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::invalid(format!(
                "x has {} entries but y has {}",
                x.len(),
                y.len()
            )));
        }
        if x.len() < 2 {
            return Err(Error::invalid("a dataset needs at least two observations"));
        }
        if let Some(bad) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("x = {bad} outside [0, 1]")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("y must be finite"));
        }
        Ok(Dataset { x, y })
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Same design, new responses.
    pub fn with_y(&self, y: Vec<f64>) -> Result<Self> {
        Dataset::new(self.x.clone(), y)
    }

    /// Parses the `x,y` CSV format: a header line followed by one decimal
    /// pair per row.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
            .clone();
        if headers.len() != 2 || &headers[0] != "x" || &headers[1] != "y" {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header `x,y`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            });
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != 2 {
                return Err(Error::Parse { line, msg: format!("expected 2 fields, found {}", rec.len()) });
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::Parse { line, msg: format!("not a number: `{s}`") })
            };
            x.push(parse(&rec[0])?);
            y.push(parse(&rec[1])?);
        }
        Dataset::new(x, y)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_csv_str(&text)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("x,y\n");
        for (x, y) in self.x.iter().zip(&self.y) {
            out.push_str(&format!("{x:.17e},{y:.17e}\n"));
        }
        out
    }
}

/// Least-squares line `intercept + slope·x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// A fitted function `Σ b_ν φ_ν` tied to its basis and configuration.
#[derive(Debug, Clone)]
pub struct SplineEstimate<'a> {
    pub coefficients: Vec<f64>,
    pub cfg: FitConfig,
    pub basis: &'a EigenSystem,
}

/// Cached factorization of the normal matrix for one design and one λ.
///
/// Reusing it across many response vectors (Monte Carlo replicates, noiseless
/// fits) gives the same estimate as [`fit`] at the cost of one solve.
pub struct FitOperator<'a> {
    sys: &'a EigenSystem,
    cfg: FitConfig,
    phi: DMatrix<f64>,
    gram: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl<'a> FitOperator<'a> {
    pub fn new(x: &[f64], cfg: &FitConfig, sys: &'a EigenSystem) -> Result<Self> {
        let phi = sys.design_matrix(x);
        Self::from_design(phi, cfg, sys)
    }

    /// Builds the operator from a precomputed design matrix `Φ` (n × N).
    pub fn from_design(phi: DMatrix<f64>, cfg: &FitConfig, sys: &'a EigenSystem) -> Result<Self> {
        let n = phi.nrows();
        if n != cfg.n() {
            return Err(Error::invalid(format!(
                "configuration sample size {} differs from design size {n}",
                cfg.n()
            )));
        }
        let gram = phi.tr_mul(&phi) / n as f64;
        let chol = Self::factor(&gram, cfg, sys)?;
        Ok(FitOperator { sys, cfg: *cfg, phi, gram, chol })
    }

    fn factor(gram: &DMatrix<f64>, cfg: &FitConfig, sys: &EigenSystem) -> Result<Cholesky<f64, Dyn>> {
        let mut a = gram.clone();
        for (i, r) in sys.eigenvalues().iter().enumerate() {
            a[(i, i)] += cfg.lambda() * r;
        }
        let diag = a.diagonal();
        let ill = || Error::IllPosed("normal matrix is singular (design does not identify the unpenalized modes)".into());
        let chol = Cholesky::new(a).ok_or_else(ill)?;
        let l = chol.l_dirty();
        // Relative pivot: the share of each column not explained by earlier ones.
        let min_pivot = (0..l.nrows()).map(|i| l[(i, i)] * l[(i, i)] / diag[i]).fold(f64::INFINITY, f64::min);
        if !(min_pivot > 1e-10) {
            return Err(ill());
        }
        Ok(chol)
    }

    /// Same design, different λ.
    pub fn with_config(&self, cfg: &FitConfig) -> Result<FitOperator<'a>> {
        let chol = Self::factor(&self.gram, cfg, self.sys)?;
        Ok(FitOperator {
            sys: self.sys,
            cfg: *cfg,
            phi: self.phi.clone(),
            gram: self.gram.clone(),
            chol,
        })
    }

    pub fn cfg(&self) -> &FitConfig {
        &self.cfg
    }

    pub fn basis(&self) -> &'a EigenSystem {
        self.sys
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// `ΦᵀΦ / n`.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Coefficients of the penalized fit to responses `y`.
    pub fn solve(&self, y: &[f64]) -> Vec<f64> {
        let n = self.phi.nrows();
        let rhs = self.phi.tr_mul(&DVector::from_column_slice(y)) / n as f64;
        self.chol.solve(&rhs).as_slice().to_vec()
    }

    /// Linear smoother in coefficient space, `(ΦᵀΦ/n + λ diag ρ)⁻¹ Φᵀ / n`
    /// (N × n).
    pub fn coefficient_smoother(&self) -> DMatrix<f64> {
        let n = self.phi.nrows();
        self.chol.solve(&self.phi.transpose()) / n as f64
    }

    /// `tr A(λ)` for the hat matrix `A(λ) = Φ(ΦᵀΦ + nλ diag ρ)⁻¹Φᵀ`.
    pub fn hat_trace(&self) -> f64 {
        self.chol.solve(&self.gram).trace()
    }

    pub fn estimate(&self, y: &[f64]) -> SplineEstimate<'a> {
        SplineEstimate { coefficients: self.solve(y), cfg: self.cfg, basis: self.sys }
    }
}

/// Smoothing spline estimate `f̂_{n,λ}`.
pub fn fit<'a>(data: &Dataset, cfg: &FitConfig, sys: &'a EigenSystem) -> Result<SplineEstimate<'a>> {
    let op = FitOperator::new(data.x(), cfg, sys)?;
    Ok(op.estimate(data.y()))
}

/// Noiseless estimate `f̂ᴺᴸ`: the same fit with responses `f₀(X_i)`.
pub fn fit_noiseless<'a>(
    f0_values: &[f64],
    x: &[f64],
    cfg: &FitConfig,
    sys: &'a EigenSystem,
) -> Result<SplineEstimate<'a>> {
    if f0_values.len() != x.len() {
        return Err(Error::invalid("f0 values and design differ in length"));
    }
    let op = FitOperator::new(x, cfg, sys)?;
    Ok(op.estimate(f0_values))
}

/// `(P_λ g)_ν = λρ_ν / (1 + λρ_ν) · g_ν`.
pub fn apply_p_lambda(coeffs: &[f64], cfg: &FitConfig, sys: &EigenSystem) -> Vec<f64> {
    let lam = cfg.lambda();
    coeffs
        .iter()
        .zip(sys.eigenvalues())
        .map(|(g, r)| lam * r / (1.0 + lam * r) * g)
        .collect()
}

/// `⟨f, g⟩ = Σ (1 + λρ_ν) f_ν g_ν`.
pub fn rkhs_inner(f: &[f64], g: &[f64], cfg: &FitConfig, sys: &EigenSystem) -> f64 {
    let lam = cfg.lambda();
    f.iter()
        .zip(g)
        .zip(sys.eigenvalues())
        .map(|((a, b), r)| (1.0 + lam * r) * a * b)
        .sum()
}

pub fn rkhs_norm(coeffs: &[f64], cfg: &FitConfig, sys: &EigenSystem) -> f64 {
    rkhs_inner(coeffs, coeffs, cfg, sys).sqrt()
}

/// Roughness `J(f, f) = Σ ρ_ν f_ν²`.
pub fn penalty(coeffs: &[f64], sys: &EigenSystem) -> f64 {
    coeffs.iter().zip(sys.eigenvalues()).map(|(b, r)| r * b * b).sum()
}

/// Penalized log-likelihood `ℓ_{n,λ}(g) = −(1/2n) Σ (Y_i − g(X_i))² − (λ/2) J(g, g)`
/// for `g` given by its coefficients.
pub fn penalized_loglik(data: &Dataset, coeffs: &[f64], cfg: &FitConfig, sys: &EigenSystem) -> f64 {
    let n = data.len() as f64;
    let rss: f64 = data
        .x()
        .iter()
        .zip(data.y())
        .map(|(&x, &y)| {
            let r = y - sys.evaluate_coeffs(coeffs, x);
            r * r
        })
        .sum();
    -rss / (2.0 * n) - 0.5 * cfg.lambda() * penalty(coeffs, sys)
}

pub fn evaluate(est: &SplineEstimate<'_>, x: f64) -> f64 {
    est.basis.evaluate_coeffs(&est.coefficients, x)
}

/// Ordinary least-squares line, the maximum likelihood fit under a linear null.
pub fn ols_linear_fit(data: &Dataset) -> Result<LinearFit> {
    ols_line(data.x(), data.y())
}

pub(crate) fn ols_line(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    let n = x.len() as f64;
    let xbar = x.iter().sum::<f64>() / n;
    let ybar = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - xbar) * (a - xbar);
        sxy += (a - xbar) * (b - ybar);
    }
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if !(sxx > 1e-12 * n * scale * scale) {
        return Err(Error::DegenerateDesign("fewer than two distinct design points".into()));
    }
    let slope = sxy / sxx;
    Ok(LinearFit { intercept: ybar - slope * xbar, slope })
}
