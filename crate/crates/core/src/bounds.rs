//! Closed-form finite-sample quantities: the entropy integral `Ψ`, `A(h, ε)`,
//! deviation radii, cutoffs and separation functions for the three test
//! regimes, remainder terms, smoothing-parameter selectors, the
//! effective-sample-size solver and the KRR penalty equation.
//!
//! Feasibility conditions of the underlying deviation inequalities are
//! reported as flags next to the value; they never turn into errors.

use crate::eigenbasis::{self, EigenSystem, FitConfig, KernelDiagonalTable, DEFAULT_SUP_GRID};
use crate::error::{Error, Result};
use crate::quadrature::integrate_adaptive;

pub const DEFAULT_C0: f64 = 1.0;

/// `τ = √(log 1.5)`.
pub fn tau() -> f64 {
    1.5f64.ln().sqrt()
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Kernel-dependent constants entering every bound.
///
/// `c_k`, `rho_k`, `zeta_k` and `trace_sum` depend on λ; they must be
/// recomputed whenever the smoothing parameter changes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConstants {
    pub c_k: f64,
    /// Packing-number constant of the unit Sobolev ball.
    pub c_0: f64,
    pub c_phi: f64,
    pub tau: f64,
    pub rho_k: f64,
    pub zeta_k: f64,
    pub m: u32,
    /// `Σ_ν 1/(1 + λρ_ν)`; the trace term is this divided by `n`.
    pub trace_sum: f64,
}

impl BoundConstants {
    pub fn new(m: u32, c_k: f64, rho_k: f64, zeta_k: f64, trace_sum: f64) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("m must be positive"));
        }
        for (name, v) in [("c_K", c_k), ("rho_K", rho_k), ("trace_sum", trace_sum)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(zeta_k > 0.0 && zeta_k <= 1.0) {
            return Err(Error::invalid(format!("zeta_K must lie in (0, 1], got {zeta_k}")));
        }
        Ok(BoundConstants { c_k, c_0: DEFAULT_C0, c_phi: 1.0, tau: tau(), rho_k, zeta_k, m, trace_sum })
    }

    pub fn with_c0(mut self, c_0: f64) -> Result<Self> {
        if !(c_0 > 0.0 && c_0.is_finite()) {
            return Err(Error::invalid(format!("c_0 must be positive, got {c_0}")));
        }
        self.c_0 = c_0;
        Ok(self)
    }

    pub fn with_c_phi(mut self, c_phi: f64) -> Self {
        self.c_phi = c_phi;
        self
    }

    /// All constants of `sys` at the λ of `cfg`, with `c_K` taken over the
    /// default sup grid.
    pub fn from_system(sys: &EigenSystem, cfg: &FitConfig, c_0: f64) -> Result<Self> {
        let table = sys.diagonal_table(DEFAULT_SUP_GRID);
        Self::from_table(&table, sys, cfg, c_0)
    }

    /// As [`from_system`](Self::from_system) with a precomputed kernel-diagonal table.
    pub fn from_table(table: &KernelDiagonalTable, sys: &EigenSystem, cfg: &FitConfig, c_0: f64) -> Result<Self> {
        let ev = sys.eigenvalues();
        let c_k = table.c_k(cfg);
        let rho_k = eigenbasis::rho_k_from_eigenvalues(ev, cfg);
        let zeta_k = eigenbasis::zeta_k_from_eigenvalues(ev, cfg)?;
        let trace_sum = eigenbasis::trace_term_from_eigenvalues(ev, cfg) * cfg.n() as f64;
        Ok(Self::new(cfg.m(), c_k, rho_k, zeta_k, trace_sum)?.with_c0(c_0)?.with_c_phi(sys.c_phi()))
    }

    pub fn trace(&self, n: usize) -> f64 {
        self.trace_sum / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    FirstOrder,
    SecondOrder,
    Composite,
}

impl Regime {
    /// `(a, b)` with `M = log(a/α)`, `L = log(b/β)`.
    pub fn budget_constants(self) -> (f64, f64) {
        match self {
            Regime::FirstOrder => (2.0, 2.0),
            Regime::SecondOrder => (15.0, 30.0),
            Regime::Composite => (24.0, 60.0),
        }
    }
}

/// Type I / Type II error levels converted to the log-scale budgets `M`, `L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBudget {
    pub alpha: f64,
    pub beta: f64,
    pub m_budget: f64,
    pub l_budget: f64,
    pub regime: Regime,
}

impl ErrorBudget {
    pub fn new(alpha: f64, beta: f64, regime: Regime) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        let (a, b) = regime.budget_constants();
        Ok(ErrorBudget { alpha, beta, m_budget: (a / alpha).ln(), l_budget: (b / beta).ln(), regime })
    }

    /// Type I error bound implied by `M`: `a·exp(−M)`.
    pub fn type1_bound(&self) -> f64 {
        self.regime.budget_constants().0 * (-self.m_budget).exp()
    }

    /// Type II error bound implied by `L`: `b·exp(−L)`.
    pub fn type2_bound(&self) -> f64 {
        self.regime.budget_constants().1 * (-self.l_budget).exp()
    }
}

/// A bound value together with whether the conditions of the inequality
/// behind it hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged {
    pub value: f64,
    pub feasible: bool,
}

/// `Ψ(r) = ∫₀^r √log(1 + exp(x^{-1/m})) dx`.
///
/// Computed after substituting `x = r s^{2m}`, which turns the endpoint
/// singularity into a polynomial factor.
pub fn psi_integral(r: f64, m: u32) -> f64 {
    if !(r > 0.0) {
        return 0.0;
    }
    let mm = m as f64;
    let scale = r.powf(-1.0 / mm);
    let f = |s: f64| {
        if s <= 0.0 {
            return if m == 1 { 2.0 * r * scale.sqrt() } else { 0.0 };
        }
        let z = scale / (s * s);
        2.0 * mm * r * s.powi(2 * m as i32 - 1) * softplus(z).sqrt()
    };
    integrate_adaptive(f, 0.0, 1.0, 1e-12 * (1.0 + r))
}

/// `A(h, ε)` of the empirical-process concentration inequality.
pub fn a_of_h(h: f64, eps: f64, k: &BoundConstants) -> f64 {
    if !(eps > 0.0) {
        return 0.0;
    }
    let m = k.m as f64;
    let e = (2.0 * m - 1.0) / 2.0;
    let s6 = 6f64.sqrt();
    let first = 32.0 * s6 / k.tau / k.c_k * k.c_0.powf(m) * h.powf(-e)
        * psi_integral(0.5 * k.c_k * k.c_0.powf(-m) * h.powf(e) * eps, k.m);
    let ln_z = (2.0 * k.c_0).ln() - (k.c_k.ln() + e * h.ln() + eps.ln()) / m;
    // ε·√softplus(z); for large z softplus(z) = z to double precision.
    let root = if ln_z > 5.0 {
        (eps.ln() + 0.5 * ln_z).exp()
    } else {
        eps * softplus(ln_z.exp()).sqrt()
    };
    first + 20.0 * s6 / k.tau * root
}

/// `A(h) = A(h, 2)`.
pub fn a_h(h: f64, k: &BoundConstants) -> f64 {
    a_of_h(h, 2.0, k)
}

/// `c_K² √M r h^{-1/2} A(h)`; the deviation bounds require this ≤ 1/2.
pub fn feasibility_prefactor(m_budget: f64, r: f64, cfg: &FitConfig, k: &BoundConstants) -> f64 {
    let h = cfg.h();
    k.c_k * k.c_k * m_budget.sqrt() * r / h.sqrt() * a_h(h, k)
}

fn radius(cfg: &FitConfig) -> f64 {
    (cfg.n() as f64 * cfg.h()).powf(-0.5)
}

/// `δₙ(M, r) = 2h^m + c_K(√(2M) r + (nh)^{-1/2})`.
pub fn delta_n(m_budget: f64, r: f64, cfg: &FitConfig, k: &BoundConstants) -> Flagged {
    let h = cfg.h();
    let value = 2.0 * h.powi(k.m as i32) + k.c_k * ((2.0 * m_budget).sqrt() * r + radius(cfg));
    Flagged { value, feasible: feasibility_prefactor(m_budget, r, cfg, k) <= 0.5 }
}

/// `γₙ(M, r) = c_K² √M r h^{-1/2} A(h) δₙ(M, r)`.
pub fn gamma_n(m_budget: f64, r: f64, cfg: &FitConfig, k: &BoundConstants) -> Flagged {
    let pre = feasibility_prefactor(m_budget, r, cfg, k);
    let d = delta_n(m_budget, r, cfg, k);
    Flagged { value: pre * d.value, feasible: d.feasible }
}

/// First-order cutoff `dₙ(M) = δₙ(M, (nh)^{-1/2})`.
pub fn first_order_cutoff(m_budget: f64, cfg: &FitConfig, k: &BoundConstants) -> Flagged {
    delta_n(m_budget, radius(cfg), cfg, k)
}

/// `ρₙ(M, L) = 4h^m + c_K(√(2M) + √(2L) + 2)(nh)^{-1/2}`.
pub fn first_order_separation(m_budget: f64, l_budget: f64, cfg: &FitConfig, k: &BoundConstants) -> Flagged {
    let h = cfg.h();
    let r = radius(cfg);
    let value = 4.0 * h.powi(k.m as i32) + k.c_k * ((2.0 * m_budget).sqrt() + (2.0 * l_budget).sqrt() + 2.0) * r;
    let feasible = feasibility_prefactor(m_budget.max(l_budget), r, cfg, k) <= 0.5;
    Flagged { value, feasible }
}

/// `h* = (c_K²(√log(2/α) + √log(2/β) + √2)² / (8m²n))^{1/(2m+1)}` as printed
/// for the first-order test.
///
/// This is the minimizer of `2h^m + c_K(√(2M)+√(2L)+2)(nh)^{-1/2}`; the
/// minimizer of [`first_order_separation`] itself is [`h_star_argmin`], which
/// is smaller by the factor `4^{-1/(2m+1)}`.
pub fn h_star(budget: &ErrorBudget, n: usize, k: &BoundConstants) -> f64 {
    h_star_with_denominator(budget, n, k, 8.0)
}

/// Exact minimizer over `h` of [`first_order_separation`].
pub fn h_star_argmin(budget: &ErrorBudget, n: usize, k: &BoundConstants) -> f64 {
    h_star_with_denominator(budget, n, k, 32.0)
}

fn h_star_with_denominator(budget: &ErrorBudget, n: usize, k: &BoundConstants, denom: f64) -> f64 {
    let m = k.m as f64;
    let s = budget.m_budget.sqrt() + budget.l_budget.sqrt() + 2f64.sqrt();
    (k.c_k * k.c_k * s * s / (denom * m * m * n as f64)).powf(1.0 / (2.0 * m + 1.0))
}

/// Remainder terms of the second-order expansion for the simple null.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Remainders {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
}

/// Remainder terms for the composite null.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeRemainders {
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    /// `1 − 1/n − √(M/n) − M/n > 0`; otherwise every term is `+∞`.
    pub feasible: bool,
}

/// Pieces shared by the simple and composite remainders.
struct Common {
    r0_no_r3: f64,
    r3: f64,
    lead: f64,
    sqrt_trace: f64,
}

fn common(mb: f64, cfg: &FitConfig, k: &BoundConstants, trace: f64, a_h: f64) -> Common {
    let n = cfg.n() as f64;
    let h = cfg.h();
    let ck = k.c_k;
    let sh = h.sqrt();
    let s2 = 2f64.sqrt();
    let q2 = 2f64.powf(0.25);
    let sm = mb.sqrt();
    let m34 = mb.powf(0.75);
    let part1 = (ck * ck / (s2 * n.powf(1.5) * h) + ck / (s2 * n.powf(1.5) * sh) + 6.0 * s2 * ck * ck / n.powf(2.5)) * sm;
    let part2 = (q2 * ck / (n.powf(1.75) * sh) + 8.0 * ck / (q2 * n.powf(1.25) * sh)) * m34;
    let part3 = (4.0 / n + 8.0 * ck * ck / (n.powf(1.5) * h) + 4.0 * ck * ck / (2.0 * n * n * h)) * mb;
    let d = 2.0 * h.powi(k.m as i32) + ck * ((2.0 * mb).sqrt() + 1.0) / (n * h).sqrt();
    let r3 = ck * ck * sm / n.sqrt() / h * a_h * d;
    Common {
        r0_no_r3: part1 + part2 + part3,
        r3,
        lead: 4.0 * k.rho_k / (n * sh) * sm,
        sqrt_trace: trace.sqrt(),
    }
}

/// `R₀,…,R₄` at budget `M` (or `L`), given the trace term and `A(h)`.
pub fn remainders_simple(mb: f64, cfg: &FitConfig, k: &BoundConstants, trace: f64, a_h: f64) -> Remainders {
    let n = cfg.n() as f64;
    let c = common(mb, cfg, k, trace, a_h);
    let r3 = c.r3;
    let r0 = c.r0_no_r3 + r3 * r3 * mb;
    let r1 = r0 + 2.0 * r3 * (c.sqrt_trace + c.lead + r0);
    let r4 = r3 * r3 + 2.0 * r3 * (1.0 + c.sqrt_trace + c.lead + r0);
    let r2 = 2.0 / n * (mb.powf(0.75) + mb) + r0 + r4;
    Remainders { r0, r1, r2, r3, r4 }
}

/// `R₀ᶜ,…,R₄ᶜ` at budget `M` (or `L`).
pub fn remainders_composite(mb: f64, cfg: &FitConfig, k: &BoundConstants, trace: f64, a_h: f64) -> CompositeRemainders {
    let n = cfg.n() as f64;
    let g = 1.0 - 1.0 / n - (mb / n).sqrt() - mb / n;
    if !(g > 0.0) {
        let inf = f64::INFINITY;
        return CompositeRemainders { r0: inf, r1: inf, r2: inf, r3: inf, r4: inf, feasible: false };
    }
    let c = common(mb, cfg, k, trace, a_h);
    let r3 = c.r3;
    let r0 = c.r0_no_r3 + r3 * r3 * mb;
    let r0c = c.r0_no_r3;
    let s2m = (2.0 * mb).sqrt();
    let r3c = 2.0 / n.sqrt() * (1.0 + 2.0 * s2m + mb).sqrt() / g.sqrt() + 4.0 * 2f64.sqrt() / n.sqrt() * mb.sqrt() / g;
    let r4c = 4.0 * (1.0 / n + s2m / n + mb / n) * (1.0 + 1.0 / g);
    let r1c = r0c + r4c + r3 * r3 + 2.0 * r3 * (c.sqrt_trace + c.lead + r0 + r3c);
    let s = r3 + r3c;
    let r2c = 2.0 / n * (mb.powf(0.75) + mb) + r0 + s * s + 2.0 * s * (1.0 + c.sqrt_trace + c.lead + r0);
    CompositeRemainders { r0: r0c, r1: r1c, r2: r2c, r3: r3c, r4: r4c, feasible: true }
}

fn second_order_feasible(mb: f64, cfg: &FitConfig, k: &BoundConstants, a_h: f64) -> bool {
    let n = cfg.n() as f64;
    let h = cfg.h();
    k.c_k * k.c_k * mb.sqrt() / n.sqrt() / h * a_h <= 0.5
}

fn leading_cutoff(mb: f64, cfg: &FitConfig, k: &BoundConstants) -> f64 {
    4.0 * k.rho_k / (cfg.n() as f64 * cfg.h().sqrt()) * mb.sqrt()
}

/// `dₙ(M, h) = 4ρ_K √M / (n√h) + R₁(M)`.
pub fn second_order_cutoff(mb: f64, cfg: &FitConfig, k: &BoundConstants) -> Flagged {
    let a = a_h(cfg.h(), k);
    let r = remainders_simple(mb, cfg, k, k.trace(cfg.n()), a);
    Flagged { value: leading_cutoff(mb, cfg, k) + r.r1, feasible: second_order_feasible(mb, cfg, k, a) }
}

/// `ρₙ(M, L, h) = √(ζ_K λ) + √(2L/n) + √(dₙ(M, h) + 2L/n + R₂(L))`.
pub fn second_order_separation(mb: f64, lb: f64, cfg: &FitConfig, k: &BoundConstants) -> Flagged {
    let n = cfg.n() as f64;
    let a = a_h(cfg.h(), k);
    let d = second_order_cutoff(mb, cfg, k);
    let r2 = remainders_simple(lb, cfg, k, k.trace(cfg.n()), a).r2;
    let value = (k.zeta_k * cfg.lambda()).sqrt() + (2.0 * lb / n).sqrt() + (d.value + 2.0 * lb / n + r2).sqrt();
    Flagged { value, feasible: d.feasible && second_order_feasible(lb, cfg, k, a) }
}

/// `dₙᶜᵒᵐ(M, h) = 4ρ_K √M / (n√h) + R₁ᶜ(M)`.
pub fn composite_cutoff(mb: f64, cfg: &FitConfig, k: &BoundConstants) -> Flagged {
    let a = a_h(cfg.h(), k);
    let r = remainders_composite(mb, cfg, k, k.trace(cfg.n()), a);
    Flagged {
        value: leading_cutoff(mb, cfg, k) + r.r1,
        feasible: r.feasible && second_order_feasible(mb, cfg, k, a),
    }
}

/// `ρₙᶜᵒᵐ(M, L, h) = √(ζ_K λ) + √(2L/n) + √(dₙᶜᵒᵐ(M, h) + 2L/n + R₂ᶜ(L))`.
pub fn composite_separation(mb: f64, lb: f64, cfg: &FitConfig, k: &BoundConstants) -> Flagged {
    let n = cfg.n() as f64;
    let a = a_h(cfg.h(), k);
    let d = composite_cutoff(mb, cfg, k);
    let r = remainders_composite(lb, cfg, k, k.trace(cfg.n()), a);
    let value = (k.zeta_k * cfg.lambda()).sqrt() + (2.0 * lb / n).sqrt() + (d.value + 2.0 * lb / n + r.r2).sqrt();
    Flagged { value, feasible: d.feasible && r.feasible && second_order_feasible(lb, cfg, k, a) }
}

/// Separation function with every remainder dropped:
/// `√(ζ_K λ) + √(2L/n) + √(4ρ_K √M/(n√h) + 2L/n)`.
pub fn leading_separation(mb: f64, lb: f64, cfg: &FitConfig, k: &BoundConstants) -> f64 {
    let n = cfg.n() as f64;
    (k.zeta_k * cfg.lambda()).sqrt() + (2.0 * lb / n).sqrt() + (leading_cutoff(mb, cfg, k) + 2.0 * lb / n).sqrt()
}

/// The two terms that set the second-order rate: `√(ζ_K λ) + √(4ρ_K √M/(n√h))`.
pub fn leading_two_term_separation(mb: f64, cfg: &FitConfig, k: &BoundConstants) -> f64 {
    (k.zeta_k * cfg.lambda()).sqrt() + leading_cutoff(mb, cfg, k).sqrt()
}

/// Which separation function [`select_h_fs`] minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SeparationForm {
    /// With all remainder terms.
    #[default]
    Full,
    /// Leading terms only ([`leading_separation`]).
    Leading,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectOptions {
    pub c_0: f64,
    pub grid_points: usize,
    pub h_max: f64,
    pub rel_tol: f64,
    pub sup_grid: usize,
    pub form: SeparationForm,
}

impl Default for SelectOptions {
    fn default() -> Self {
        SelectOptions {
            c_0: DEFAULT_C0,
            grid_points: 200,
            h_max: 0.9,
            rel_tol: 1e-4,
            sup_grid: DEFAULT_SUP_GRID,
            form: SeparationForm::Full,
        }
    }
}

/// Separation function over an `h` grid and its minimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationProfile {
    pub h_grid: Vec<f64>,
    pub rho_values: Vec<f64>,
    /// Whether the deviation-inequality conditions hold at each grid point.
    pub conditions_met: Vec<bool>,
    pub argmin_h: f64,
    pub min_rho: f64,
    pub regime: Regime,
}

/// Minimizes the second-order (or composite) separation function over `h`.
///
/// A log-spaced grid on `[n^{-1/m}, h_max]` locates the minimum, then a
/// golden-section search refines it between the neighbouring grid points.
/// Kernel constants are recomputed at every `h` since `λ = h^{2m}`.
pub fn select_h_fs(budget: &ErrorBudget, n: usize, sys: &EigenSystem, opts: &SelectOptions) -> Result<SeparationProfile> {
    if budget.regime == Regime::FirstOrder {
        return Err(Error::invalid("select_h_fs applies to the second-order and composite regimes"));
    }
    if opts.grid_points < 3 {
        return Err(Error::invalid("grid needs at least 3 points"));
    }
    let m = sys.m();
    let lo = (n as f64).powf(-1.0 / m as f64);
    if !(lo < opts.h_max) {
        return Err(Error::NoFeasibleH(format!("empty h range [{lo}, {}]", opts.h_max)));
    }
    let table = sys.diagonal_table(opts.sup_grid);
    let eval = |h: f64| -> Result<(f64, bool)> {
        let cfg = FitConfig::from_h(m, n, h)?;
        let k = BoundConstants::from_table(&table, sys, &cfg, opts.c_0)?;
        let (mb, lb) = (budget.m_budget, budget.l_budget);
        Ok(match (opts.form, budget.regime) {
            (SeparationForm::Leading, _) => (leading_separation(mb, lb, &cfg, &k), true),
            (SeparationForm::Full, Regime::Composite) => {
                let f = composite_separation(mb, lb, &cfg, &k);
                (f.value, f.feasible)
            }
            (SeparationForm::Full, _) => {
                let f = second_order_separation(mb, lb, &cfg, &k);
                (f.value, f.feasible)
            }
        })
    };
    let g = opts.grid_points;
    let (llo, lhi) = (lo.ln(), opts.h_max.ln());
    let mut h_grid = Vec::with_capacity(g + 1);
    let mut rho_values = Vec::with_capacity(g + 1);
    let mut conditions_met = Vec::with_capacity(g + 1);
    for i in 0..g {
        let h = (llo + (lhi - llo) * i as f64 / (g - 1) as f64).exp();
        let (v, ok) = eval(h)?;
        h_grid.push(h);
        rho_values.push(if v.is_finite() { v } else { f64::INFINITY });
        conditions_met.push(ok);
    }
    let best = argmin_first(&rho_values)
        .ok_or_else(|| Error::NoFeasibleH(format!("separation function is infinite on all of [{lo:.4}, {:.4}]", opts.h_max)))?;
    // Golden-section refinement in log h between the neighbours of the grid minimum.
    let a0 = h_grid[best.saturating_sub(1)].ln();
    let b0 = h_grid[(best + 1).min(g - 1)].ln();
    let f = |t: f64| eval(t.exp()).map(|(v, _)| if v.is_finite() { v } else { f64::INFINITY });
    let t_ref = golden_section(f, a0, b0, opts.rel_tol)?;
    let h_ref = t_ref.exp();
    let (v_ref, ok_ref) = eval(h_ref)?;
    if v_ref.is_finite() && !h_grid.contains(&h_ref) {
        let pos = h_grid.partition_point(|&x| x < h_ref);
        h_grid.insert(pos, h_ref);
        rho_values.insert(pos, v_ref);
        conditions_met.insert(pos, ok_ref);
    }
    let best = argmin_first(&rho_values).expect("finite minimum exists");
    Ok(SeparationProfile {
        argmin_h: h_grid[best],
        min_rho: rho_values[best],
        h_grid,
        rho_values,
        conditions_met,
        regime: budget.regime,
    })
}

/// Index of the smallest finite value, first occurrence on ties.
fn argmin_first(v: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, x) in v.iter().enumerate() {
        if x.is_finite() && best.map_or(true, |b| *x < v[b]) {
            best = Some(i);
        }
    }
    best
}

fn golden_section<F: Fn(f64) -> Result<f64>>(f: F, mut a: f64, mut b: f64, rel_tol: f64) -> Result<f64> {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    // Tolerance on log h is a relative tolerance on h.
    while (b - a).abs() > rel_tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }
    Ok(if fc <= fd { c } else { d })
}

/// `h** = ((4ρ_K/ζ_K)² M)^{1/(4m+1)} n^{-2/(4m+1)}`.
pub fn h_star_star(m_budget: f64, n: usize, k: &BoundConstants) -> f64 {
    let p = 4.0 * k.m as f64 + 1.0;
    let c = 4.0 * k.rho_k / k.zeta_k;
    (c * c * m_budget).powf(1.0 / p) * (n as f64).powf(-2.0 / p)
}

/// Right side of the effective-sample-size inequality at sample size `n`.
pub fn ess_rhs(n: f64, budget: &ErrorBudget, k: &BoundConstants) -> f64 {
    let m = k.m as f64;
    let p = 4.0 * m + 1.0;
    let z = k.zeta_k;
    let base = 4.0 * z * k.rho_k * budget.m_budget.sqrt() / n;
    let two_l = 2.0 * budget.l_budget / n;
    z.sqrt() * base.powf(2.0 * m / p) + two_l.sqrt() + (z * base.powf(4.0 * m / p) + two_l).sqrt()
}

pub const ESS_CAP: u64 = 1_000_000_000_000;

/// Smallest `n ≥ 2` whose separation bound falls below `‖f*‖`.
pub fn effective_sample_size(f_star_norm: f64, budget: &ErrorBudget, k: &BoundConstants) -> Result<u64> {
    if !(f_star_norm > 0.0 && f_star_norm.is_finite()) {
        return Err(Error::invalid(format!("‖f*‖ must be positive, got {f_star_norm}")));
    }
    let ok = |n: u64| ess_rhs(n as f64, budget, k) <= f_star_norm;
    if ok(2) {
        return Ok(2);
    }
    let mut hi = 4u64;
    while !ok(hi) {
        if hi >= ESS_CAP {
            return Err(Error::OutOfRange(format!(
                "‖f*‖ = {f_star_norm} needs more than {ESS_CAP} observations"
            )));
        }
        hi = (hi * 2).min(ESS_CAP);
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Solves `λ^{-2} Σ_ν (1 + λρ_ν)^{-2} = ζ_K² n² / (16M)` for λ by bisection
/// on `log λ`.
pub fn krr_lambda_star(eigenvalues: &[f64], n: f64, m_budget: f64, zeta_k: f64) -> Result<f64> {
    if eigenvalues.is_empty() {
        return Err(Error::invalid("no eigenvalues"));
    }
    if eigenvalues.iter().any(|r| r.is_nan() || *r < 0.0) {
        return Err(Error::invalid("eigenvalues must be nonnegative"));
    }
    if !(n > 0.0 && m_budget > 0.0 && zeta_k > 0.0) {
        return Err(Error::invalid("n, M and zeta_K must be positive"));
    }
    let log_target = 2.0 * (zeta_k * n).ln() - (16.0 * m_budget).ln();
    // log LHS − log target, strictly decreasing in log λ.
    let g = |t: f64| {
        let lam = t.exp();
        let s: f64 = eigenvalues.iter().map(|r| (1.0 + lam * r).powi(-2)).sum();
        -2.0 * t + s.ln() - log_target
    };
    let (mut lo, mut hi) = (-50.0f64, 50.0f64);
    while g(lo) < 0.0 {
        lo -= 50.0;
        if lo < -700.0 {
            return Err(Error::NoSolution { lo: lo.exp(), hi: hi.exp(), reason: "left side below target at smallest λ".into() });
        }
    }
    while g(hi) > 0.0 {
        hi += 50.0;
        if hi > 700.0 {
            return Err(Error::NoSolution { lo: lo.exp(), hi: hi.exp(), reason: "left side above target at largest λ".into() });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// Relative residual `LHS/RHS − 1` of the KRR penalty equation at λ.
pub fn krr_residual(eigenvalues: &[f64], n: f64, m_budget: f64, zeta_k: f64, lambda: f64) -> f64 {
    let s: f64 = eigenvalues.iter().map(|r| (1.0 + lambda * r).powi(-2)).sum();
    let log_lhs = -2.0 * lambda.ln() + s.ln();
    let log_rhs = 2.0 * (zeta_k * n).ln() - (16.0 * m_budget).ln();
    (log_lhs - log_rhs).exp_m1()
}
