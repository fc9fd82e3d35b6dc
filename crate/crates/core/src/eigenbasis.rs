//! Simultaneous eigen-systems of the design inner product `V` and the
//! `m`-th derivative penalty `J`, the λ-dependent reproducing kernel, and the
//! kernel constants derived from them.
//!
//! Everything downstream works in the eigen-coordinates: a function
//! `f = Σ b_ν φ_ν` is stored as its coefficient vector `b`, and
//! `⟨f, g⟩ = Σ (1 + λρ_ν) f_ν g_ν`.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};

use crate::bspline::BSplineDictionary;
use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;

/// Default number of grid points for supremum evaluations.
pub const DEFAULT_SUP_GRID: usize = 1001;

const TRIG_REFERENCE_POINTS: usize = 4096;
const CPHI_GRID: usize = 2001;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisSource {
    AnalyticTrigonometric,
    EmpiricalGram,
}

#[derive(Debug, Clone)]
enum Eigenfunctions {
    Trig,
    Spline {
        dict: BSplineDictionary,
        /// Column ν holds the dictionary coefficients of φ_ν.
        coef: DMatrix<f64>,
    },
}

/// Truncated eigen-system `(ρ_ν, φ_ν)`, `ν = 1..N`, stored zero-based.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    m: u32,
    eigenvalues: Vec<f64>,
    funcs: Eigenfunctions,
    c_phi: f64,
    source: BasisSource,
    ref_nodes: Vec<f64>,
    ref_weights: Vec<f64>,
}

/// Smoothing configuration. `h` is always derived from `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    m: u32,
    n: usize,
    lambda: f64,
}

impl FitConfig {
    pub fn new(m: u32, n: usize, lambda: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("m must be positive"));
        }
        if n < 2 {
            return Err(Error::invalid(format!("sample size n = {n} must be at least 2")));
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::invalid(format!("lambda = {lambda} must be positive and finite")));
        }
        Ok(FitConfig { m, n, lambda })
    }

    /// Builds the configuration with `λ = h^{2m}`.
    pub fn from_h(m: u32, n: usize, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::invalid(format!("h = {h} must be positive")));
        }
        let lambda = (0..2 * m).fold(1.0, |acc, _| acc * h);
        Self::new(m, n, lambda)
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn h(&self) -> f64 {
        self.lambda.powf(1.0 / (2.0 * self.m as f64))
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.m, self.n, lambda)
    }

    pub fn with_n(&self, n: usize) -> Result<Self> {
        Self::new(self.m, n, self.lambda)
    }
}

/// Default truncation for the analytic basis: `max(101, n)` rounded up to odd.
pub fn default_truncation(n: usize) -> usize {
    let t = n.max(101);
    if t % 2 == 0 {
        t + 1
    } else {
        t
    }
}

/// Options for [`build_empirical_basis_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EmpiricalOptions {
    /// Number of equally spaced breakpoints (endpoints included). Defaults to
    /// `4·⌈√n⌉`.
    pub breakpoints: Option<usize>,
}

/// Analytic trigonometric eigen-system: `φ_1 ≡ 1`, `φ_{2k} = √2 cos(2πkx)`,
/// `φ_{2k+1} = √2 sin(2πkx)`, `ρ_{2k} = ρ_{2k+1} = (2πk)^{2m}`.
pub fn build_trig_basis(m: u32, n_terms: usize) -> Result<EigenSystem> {
    if m == 0 {
        return Err(Error::invalid("m must be positive"));
    }
    if n_terms < 3 || n_terms % 2 == 0 {
        return Err(Error::invalid(format!(
            "trigonometric truncation must be odd and at least 3, got {n_terms}"
        )));
    }
    let mut eigenvalues = Vec::with_capacity(n_terms);
    eigenvalues.push(0.0);
    for k in 1..=(n_terms - 1) / 2 {
        let r = (2.0 * PI * k as f64).powi(2 * m as i32);
        eigenvalues.push(r);
        eigenvalues.push(r);
    }
    Ok(trig_system(m, eigenvalues, SQRT_2))
}

impl EigenSystem {
    /// Trigonometric eigenfunctions paired with caller-supplied eigenvalues.
    ///
    /// Useful for toy systems (a single flat eigenfunction, finite-rank
    /// spectra). Eigenvalues must be nonnegative and nondecreasing.
    pub fn trig_with_eigenvalues(m: u32, eigenvalues: Vec<f64>) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("m must be positive"));
        }
        if eigenvalues.is_empty() {
            return Err(Error::invalid("at least one eigenvalue required"));
        }
        if eigenvalues.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::invalid("eigenvalues must be finite and nonnegative"));
        }
        if eigenvalues.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::invalid("eigenvalues must be nondecreasing"));
        }
        let c_phi = if eigenvalues.len() > 1 { SQRT_2 } else { 1.0 };
        Ok(trig_system(m, eigenvalues, c_phi))
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn c_phi(&self) -> f64 {
        self.c_phi
    }

    pub fn source(&self) -> BasisSource {
        self.source
    }

    /// `φ_{idx+1}(x)`.
    pub fn phi(&self, idx: usize, x: f64) -> f64 {
        let mut buf = vec![0.0; self.len()];
        self.eval_all(x, &mut buf);
        buf[idx]
    }

    /// Writes `φ_1(x), …, φ_N(x)` into `out`.
    pub fn eval_all(&self, x: f64, out: &mut [f64]) {
        let n = self.len();
        debug_assert_eq!(out.len(), n);
        match &self.funcs {
            Eigenfunctions::Trig => {
                out[0] = 1.0;
                if n == 1 {
                    return;
                }
                let theta = 2.0 * PI * x;
                let (s1, c1) = theta.sin_cos();
                let (mut s, mut c) = (s1, c1);
                let mut idx = 1;
                let mut k = 1usize;
                while idx < n {
                    if k > 1 && k % 16 == 1 {
                        // Refresh the rotation to stop drift.
                        let (sk, ck) = (theta * k as f64).sin_cos();
                        s = sk;
                        c = ck;
                    }
                    out[idx] = SQRT_2 * c;
                    if idx + 1 < n {
                        out[idx + 1] = SQRT_2 * s;
                    }
                    idx += 2;
                    let (ns, nc) = (s * c1 + c * s1, c * c1 - s * s1);
                    s = ns;
                    c = nc;
                    k += 1;
                }
            }
            Eigenfunctions::Spline { dict, coef } => {
                let p = dict.degree();
                let mut vals = vec![0.0; p + 1];
                let first = dict.eval_nonzero(x, &mut vals);
                for (nu, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, v) in vals.iter().enumerate() {
                        acc += coef[(first + j, nu)] * v;
                    }
                    *o = acc;
                }
            }
        }
    }

    /// Design matrix `Φ_{iν} = φ_ν(x_i)`.
    pub fn design_matrix(&self, xs: &[f64]) -> DMatrix<f64> {
        let n = self.len();
        let mut phi = DMatrix::zeros(xs.len(), n);
        let mut buf = vec![0.0; n];
        for (i, &x) in xs.iter().enumerate() {
            self.eval_all(x, &mut buf);
            for (nu, v) in buf.iter().enumerate() {
                phi[(i, nu)] = *v;
            }
        }
        phi
    }

    /// Evaluates `Σ b_ν φ_ν(x)`.
    pub fn evaluate_coeffs(&self, coeffs: &[f64], x: f64) -> f64 {
        let mut buf = vec![0.0; self.len()];
        self.eval_all(x, &mut buf);
        buf.iter().zip(coeffs).map(|(p, b)| p * b).sum()
    }

    /// Fourier coefficients `V(g, φ_ν)` under the basis' reference measure
    /// (uniform quadrature for the analytic basis, the construction design
    /// for the empirical one).
    pub fn project<F: Fn(f64) -> f64>(&self, g: F) -> Vec<f64> {
        let n = self.len();
        let mut out = vec![0.0; n];
        let mut buf = vec![0.0; n];
        for (&t, &w) in self.ref_nodes.iter().zip(&self.ref_weights) {
            let gv = g(t) * w;
            self.eval_all(t, &mut buf);
            for (o, p) in out.iter_mut().zip(&buf) {
                *o += gv * p;
            }
        }
        out
    }

    /// Reference measure used by [`EigenSystem::project`].
    pub fn reference_measure(&self) -> (&[f64], &[f64]) {
        (&self.ref_nodes, &self.ref_weights)
    }

    /// Tabulates `φ_ν(x)²` on an equispaced grid for repeated `c_K` queries.
    pub fn diagonal_table(&self, grid_size: usize) -> KernelDiagonalTable {
        let n = self.len();
        let mut sq = Vec::with_capacity(grid_size * n);
        let mut buf = vec![0.0; n];
        for k in 0..grid_size {
            let x = k as f64 / (grid_size - 1) as f64;
            self.eval_all(x, &mut buf);
            sq.extend(buf.iter().map(|v| v * v));
        }
        KernelDiagonalTable {
            n_terms: n,
            squares: sq,
            eigenvalues: self.eigenvalues.clone(),
        }
    }
}

fn trig_system(m: u32, eigenvalues: Vec<f64>, c_phi: f64) -> EigenSystem {
    let q = TRIG_REFERENCE_POINTS;
    let ref_nodes = (0..q).map(|i| (i as f64 + 0.5) / q as f64).collect();
    EigenSystem {
        m,
        eigenvalues,
        funcs: Eigenfunctions::Trig,
        c_phi,
        source: BasisSource::AnalyticTrigonometric,
        ref_nodes,
        ref_weights: vec![1.0 / q as f64; q],
    }
}

/// Empirical eigen-system from a design, with default options.
pub fn build_empirical_basis(design: &[f64], m: u32, n_terms: usize) -> Result<EigenSystem> {
    build_empirical_basis_with(design, m, n_terms, EmpiricalOptions::default())
}

/// Solves the generalized eigenproblem `J c = ρ V c` over a clamped B-spline
/// dictionary, where `V` is the design-weighted Gram `(1/n) Σ B(X_i)B(X_i)ᵀ`
/// and `J` is the exact `m`-th derivative Gram. Returns the `n_terms`
/// smallest-ρ pairs, normalized to unit design norm.
pub fn build_empirical_basis_with(
    design: &[f64],
    m: u32,
    n_terms: usize,
    opts: EmpiricalOptions,
) -> Result<EigenSystem> {
    let n = design.len();
    if m == 0 {
        return Err(Error::invalid("m must be positive"));
    }
    if n_terms == 0 {
        return Err(Error::invalid("at least one eigen-pair required"));
    }
    if n < n_terms {
        return Err(Error::invalid(format!(
            "design has {n} points but {n_terms} eigen-pairs were requested"
        )));
    }
    if design.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::invalid("design points must lie in [0, 1]"));
    }
    let degree = (2 * m as usize - 1).max(3);
    let breaks = opts
        .breakpoints
        .unwrap_or(4 * (n as f64).sqrt().ceil() as usize)
        .max(2);
    let dict = BSplineDictionary::uniform(breaks, degree);
    let dim = dict.dim();
    if n_terms > dim {
        return Err(Error::invalid(format!(
            "requested {n_terms} eigen-pairs but the dictionary has dimension {dim}"
        )));
    }

    let mut vals = vec![0.0; degree + 1];
    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    for &x in design {
        let first = dict.eval_nonzero(x, &mut vals);
        for a in 0..=degree {
            for b in 0..=degree {
                gram[(first + a, first + b)] += vals[a] * vals[b];
            }
        }
    }
    gram /= n as f64;

    let (gl_x, gl_w) = gauss_legendre(degree + 1);
    let mut pen = DMatrix::<f64>::zeros(dim, dim);
    for w in dict.breakpoints().windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        for (gx, gw) in gl_x.iter().zip(&gl_w) {
            // Nudge off the breakpoint so the span lookup stays inside [lo, hi).
            let x = mid + half * gx;
            let first = dict.eval_derivative_nonzero(x, m as usize, &mut vals);
            for a in 0..=degree {
                for b in 0..=degree {
                    pen[(first + a, first + b)] += gw * half * vals[a] * vals[b];
                }
            }
        }
    }

    let chol = gram.clone().cholesky().ok_or_else(|| {
        Error::DegenerateDesign("design Gram of the spline dictionary is not positive definite".into())
    })?;
    let l = chol.l();
    let diag_min = (0..dim).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
    let diag_max = (0..dim).map(|i| l[(i, i)]).fold(0.0, f64::max);
    if !(diag_min > 1e-7 * diag_max) {
        return Err(Error::DegenerateDesign(
            "design Gram of the spline dictionary is numerically singular".into(),
        ));
    }
    // C = L⁻¹ J L⁻ᵀ
    let linv_j = l
        .solve_lower_triangular(&pen)
        .ok_or_else(|| Error::DegenerateDesign("triangular solve failed".into()))?;
    let c = l
        .solve_lower_triangular(&linv_j.transpose())
        .ok_or_else(|| Error::DegenerateDesign("triangular solve failed".into()))?;
    let c = (&c + c.transpose()) * 0.5;

    // The null space of J (polynomials of degree < m) is known exactly;
    // solve the eigenproblem only on its complement so that the
    // unpenalized modes are exact polynomials.
    let lt = l.transpose();
    let m0 = (m as usize).min(n_terms);
    let mut z = DMatrix::<f64>::zeros(dim, m as usize);
    for k in 0..m as usize {
        z.set_column(k, &DVector::from_vec(dict.monomial_coefficients(k)));
    }
    let q0 = (&lt * z).qr().q();
    let proj = DMatrix::<f64>::identity(dim, dim) - &q0 * q0.transpose();
    let pe = ((&proj + proj.transpose()) * 0.5).symmetric_eigen();
    let mut keep: Vec<usize> = (0..dim).collect();
    keep.sort_by(|&a, &b| pe.eigenvalues[b].total_cmp(&pe.eigenvalues[a]));
    let q1 = DMatrix::from_columns(
        &keep[..dim - m as usize].iter().map(|&i| pe.eigenvectors.column(i).into_owned()).collect::<Vec<_>>(),
    );
    let c1 = q1.transpose() * &c * &q1;
    let c1 = (&c1 + c1.transpose()) * 0.5;
    let eig = c1.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut coef = DMatrix::<f64>::zeros(dim, n_terms);
    let mut eigenvalues = Vec::with_capacity(n_terms);
    let columns = (0..m0)
        .map(|j| (0.0, q0.column(j).into_owned()))
        .chain(order.iter().map(|&i| (eig.eigenvalues[i].max(0.0), &q1 * eig.eigenvectors.column(i))));
    for (col, (r, u)) in columns.take(n_terms).enumerate() {
        eigenvalues.push(r);
        let mut v: DVector<f64> = lt
            .solve_upper_triangular(&u)
            .ok_or_else(|| Error::DegenerateDesign("triangular solve failed".into()))?;
        let pivot = v.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v = -v;
        }
        coef.set_column(col, &v);
    }
    // Clamp tiny negative round-off and restore monotonicity.
    for i in 1..eigenvalues.len() {
        if eigenvalues[i] < eigenvalues[i - 1] {
            eigenvalues[i] = eigenvalues[i - 1];
        }
    }

    let mut sys = EigenSystem {
        m,
        eigenvalues,
        funcs: Eigenfunctions::Spline { dict, coef },
        c_phi: 1.0,
        source: BasisSource::EmpiricalGram,
        ref_nodes: design.to_vec(),
        ref_weights: vec![1.0 / n as f64; n],
    };
    let mut buf = vec![0.0; n_terms];
    let mut sup = 0.0f64;
    let grid = (0..CPHI_GRID).map(|k| k as f64 / (CPHI_GRID - 1) as f64);
    for x in grid.chain(design.iter().copied()) {
        sys.eval_all(x, &mut buf);
        sup = buf.iter().fold(sup, |a, v| a.max(v.abs()));
    }
    sys.c_phi = sup;
    Ok(sys)
}

/// Cached `φ_ν(x_k)²` on an equispaced grid.
#[derive(Debug, Clone)]
pub struct KernelDiagonalTable {
    n_terms: usize,
    squares: Vec<f64>,
    eigenvalues: Vec<f64>,
}

impl KernelDiagonalTable {
    /// `max_k √(h·K(x_k, x_k))`.
    pub fn c_k(&self, cfg: &FitConfig) -> f64 {
        let lam = cfg.lambda();
        let shrink: Vec<f64> = self.eigenvalues.iter().map(|r| 1.0 / (1.0 + lam * r)).collect();
        let kmax = self
            .squares
            .chunks(self.n_terms)
            .map(|row| row.iter().zip(&shrink).map(|(p, s)| p * s).sum::<f64>())
            .fold(0.0, f64::max);
        (cfg.h() * kmax).sqrt()
    }
}

fn check_unit(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::invalid(format!("point {x} outside [0, 1]")))
    }
}

/// `K(x, y) = Σ_ν φ_ν(x) φ_ν(y) / (1 + λρ_ν)`.
pub fn kernel_eval(sys: &EigenSystem, cfg: &FitConfig, x: f64, y: f64) -> Result<f64> {
    check_unit(x)?;
    check_unit(y)?;
    let n = sys.len();
    let (mut px, mut py) = (vec![0.0; n], vec![0.0; n]);
    sys.eval_all(x, &mut px);
    sys.eval_all(y, &mut py);
    let lam = cfg.lambda();
    Ok(px
        .iter()
        .zip(&py)
        .zip(sys.eigenvalues())
        .map(|((a, b), r)| a * b / (1.0 + lam * r))
        .sum())
}

/// `c_K = sup_x √(h K(x,x))` over an equispaced grid of `grid_size` points.
pub fn c_k(sys: &EigenSystem, cfg: &FitConfig, grid_size: usize) -> Result<f64> {
    if grid_size < 101 {
        return Err(Error::invalid(format!("grid size {grid_size} below 101")));
    }
    Ok(sys.diagonal_table(grid_size).c_k(cfg))
}

/// `ρ_K = √(h Σ_ν (1 + λρ_ν)^{-2})`.
pub fn rho_k(sys: &EigenSystem, cfg: &FitConfig) -> f64 {
    rho_k_from_eigenvalues(sys.eigenvalues(), cfg)
}

pub(crate) fn rho_k_from_eigenvalues(eigenvalues: &[f64], cfg: &FitConfig) -> f64 {
    let lam = cfg.lambda();
    let s: f64 = eigenvalues.iter().map(|r| (1.0 + lam * r).powi(-2)).sum();
    (cfg.h() * s).sqrt()
}

/// `ζ_K = max_{ρ_ν > 0} λρ_ν / (1 + λρ_ν)`: the supremum of `λ^{-1}‖P_λ g‖²`
/// over `J(g, g) ≤ 1`, which decouples coordinate-wise in the eigenbasis.
pub fn zeta_k(sys: &EigenSystem, cfg: &FitConfig) -> Result<f64> {
    zeta_k_from_eigenvalues(sys.eigenvalues(), cfg)
}

pub(crate) fn zeta_k_from_eigenvalues(eigenvalues: &[f64], cfg: &FitConfig) -> Result<f64> {
    let lam = cfg.lambda();
    eigenvalues
        .iter()
        .filter(|r| **r > 0.0)
        .map(|r| lam * r / (1.0 + lam * r))
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or_else(|| Error::DegeneratePenalty("all eigenvalues are zero".into()))
}

/// `(1/n) Σ_ν 1 / (1 + λρ_ν)`, the null mean of `‖n⁻¹ Σ ε_i K_{X_i}‖²`.
pub fn trace_term(sys: &EigenSystem, cfg: &FitConfig) -> f64 {
    trace_term_from_eigenvalues(sys.eigenvalues(), cfg)
}

pub(crate) fn trace_term_from_eigenvalues(eigenvalues: &[f64], cfg: &FitConfig) -> f64 {
    let lam = cfg.lambda();
    eigenvalues.iter().map(|r| 1.0 / (1.0 + lam * r)).sum::<f64>() / cfg.n() as f64
}

/// Per-mode shrinkage factors `1 / (1 + λρ_ν)`.
pub fn shrinkage(sys: &EigenSystem, cfg: &FitConfig) -> Vec<f64> {
    let lam = cfg.lambda();
    sys.eigenvalues().iter().map(|r| 1.0 / (1.0 + lam * r)).collect()
}

/// RKHS weights `1 + λρ_ν`.
pub fn rkhs_weights(sys: &EigenSystem, cfg: &FitConfig) -> Vec<f64> {
    let lam = cfg.lambda();
    sys.eigenvalues().iter().map(|r| 1.0 + lam * r).collect()
}
