//! Simulation models and replicated power studies.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::bounds::{self, ErrorBudget, Regime, SelectOptions, SeparationForm};
use crate::eigenbasis::{build_empirical_basis_with, EigenSystem, EmpiricalOptions, FitConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag, Stream};
use crate::spline::{ols_line, Dataset};
use crate::testing::{cutoff_from_sample, default_gcv_grid, gcv_select, NullModel, SecondOrderMode, TestContext, TestKind};

/// Reference-grid size for the study basis.
pub const STUDY_GRID: usize = 2000;
/// Default breakpoint count of the study basis.
pub const STUDY_BREAKPOINTS: usize = 48;
pub const DEFAULT_REPLICATES: usize = 500;
const MAX_RETRIES: u64 = 3;

/// `f₀(x) = 5(x² − x + 1/6)`.
pub fn f0(x: f64) -> f64 {
    5.0 * (x * x - x + 1.0 / 6.0)
}

fn draw(n: usize, seed: u64, mean: impl Fn(f64) -> f64) -> Dataset {
    let mut xs = Stream::new(&[seed], tag::DESIGN);
    let mut es = Stream::new(&[seed], tag::NOISE);
    let x: Vec<f64> = (0..n).map(|_| xs.uniform()).collect();
    let y: Vec<f64> = x.iter().map(|&t| mean(t) + es.normal()).collect();
    Dataset::new(x, y).expect("uniform design lies in (0, 1)")
}

/// `Y = f₀(X) + ½cX² + ε`, `X ~ U(0,1)`, `ε ~ N(0,1)`.
pub fn gen_simple(n: usize, c: f64, seed: u64) -> Dataset {
    draw(n, seed, |t| f0(t) + 0.5 * c * t * t)
}

/// `Y = 5X + c(X² − X + 1/6) + ε`.
pub fn gen_composite(n: usize, c: f64, seed: u64) -> Dataset {
    draw(n, seed, |t| 5.0 * t + c * (t * t - t + 1.0 / 6.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hypothesis {
    Simple,
    Composite,
}

impl Hypothesis {
    pub fn name(self) -> &'static str {
        match self {
            Hypothesis::Simple => "simple",
            Hypothesis::Composite => "composite",
        }
    }

    pub fn procedures(self) -> Vec<Procedure> {
        match self {
            Hypothesis::Simple => vec![Procedure::S1, Procedure::S2, Procedure::S3, Procedure::S4],
            Hypothesis::Composite => vec![Procedure::C1, Procedure::C2],
        }
    }
}

/// `S1`/`S2`: T̃ and PLRT at `h_FS`; `S3`/`S4`: the same at `h_GCV`.
/// `C1`: T̃ᶜᵒᵐ at `h_FS^com`; `C2`: PLRT against the fitted line at `h_GCV`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Procedure {
    S1,
    S2,
    S3,
    S4,
    C1,
    C2,
}

impl Procedure {
    pub fn name(self) -> &'static str {
        match self {
            Procedure::S1 => "s1",
            Procedure::S2 => "s2",
            Procedure::S3 => "s3",
            Procedure::S4 => "s4",
            Procedure::C1 => "c1",
            Procedure::C2 => "c2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "s1" => Procedure::S1,
            "s2" => Procedure::S2,
            "s3" => Procedure::S3,
            "s4" => Procedure::S4,
            "c1" => Procedure::C1,
            "c2" => Procedure::C2,
            other => return Err(Error::invalid(format!("unknown procedure '{other}'"))),
        })
    }

    fn hypothesis(self) -> Hypothesis {
        match self {
            Procedure::C1 | Procedure::C2 => Hypothesis::Composite,
            _ => Hypothesis::Simple,
        }
    }

    fn uses_fs(self) -> bool {
        matches!(self, Procedure::S1 | Procedure::S2 | Procedure::C1)
    }

    fn kind(self) -> TestKind {
        match self {
            Procedure::S1 | Procedure::S3 => TestKind::SecondOrder,
            Procedure::C1 => TestKind::Composite,
            _ => TestKind::Plrt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub hypothesis: Hypothesis,
    pub n_list: Vec<usize>,
    pub c_list: Vec<f64>,
    pub replicates: usize,
    pub alpha: f64,
    pub beta: f64,
    pub procedures: Vec<Procedure>,
    pub n_mc: usize,
    pub base_seed: u64,
    pub m: u32,
    pub breakpoints: usize,
    pub c_0: f64,
    pub mode: SecondOrderMode,
    /// Separation function minimized for `h_FS`.
    pub form: SeparationForm,
}

impl StudyConfig {
    /// The standard study design for `hypothesis`: n in {50, 100, 200, 300, 400}, c in {0, 1, 2, 3}, 500 replicates.
    pub fn standard(hypothesis: Hypothesis) -> Self {
        StudyConfig {
            hypothesis,
            n_list: vec![50, 100, 200, 300, 400],
            c_list: vec![0.0, 1.0, 2.0, 3.0],
            replicates: DEFAULT_REPLICATES,
            alpha: 0.05,
            beta: 0.05,
            procedures: hypothesis.procedures(),
            n_mc: crate::testing::DEFAULT_N_MC,
            base_seed: 2024,
            m: 2,
            breakpoints: STUDY_BREAKPOINTS,
            c_0: bounds::DEFAULT_C0,
            mode: SecondOrderMode::default(),
            form: SeparationForm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be at least 1"));
        }
        if self.n_list.is_empty() || self.c_list.is_empty() {
            return Err(Error::invalid("n_list and c_list must be nonempty"));
        }
        if let Some(n) = self.n_list.iter().find(|&&n| n < 10) {
            return Err(Error::invalid(format!("sample size {n} is too small; need n >= 10")));
        }
        if let Some(c) = self.c_list.iter().find(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("c = {c} is not finite")));
        }
        if self.procedures.is_empty() {
            return Err(Error::invalid("no procedures configured"));
        }
        if let Some(p) = self.procedures.iter().find(|p| p.hypothesis() != self.hypothesis) {
            return Err(Error::invalid(format!(
                "procedure {} does not apply to the {} hypothesis",
                p.name(),
                self.hypothesis.name()
            )));
        }
        if self.m == 0 {
            return Err(Error::invalid("m must be positive"));
        }
        if self.breakpoints < 2 {
            return Err(Error::invalid("the basis needs at least 2 breakpoints"));
        }
        ErrorBudget::new(self.alpha, self.beta, self.regime())?;
        if self.n_mc < 100 {
            return Err(Error::invalid(format!("N_mc must be at least 100, got {}", self.n_mc)));
        }
        Ok(())
    }

    fn regime(&self) -> Regime {
        match self.hypothesis {
            Hypothesis::Simple => Regime::SecondOrder,
            Hypothesis::Composite => Regime::Composite,
        }
    }

    /// Procedures in canonical column order, deduplicated.
    fn columns(&self) -> Vec<Procedure> {
        let mut p = self.procedures.clone();
        p.sort();
        p.dedup();
        p
    }
}

/// The study basis: empirical eigen-system for the uniform design, built on
/// a midpoint grid.
pub fn study_basis(m: u32, breakpoints: usize) -> Result<EigenSystem> {
    let grid: Vec<f64> = (0..STUDY_GRID).map(|i| (i as f64 + 0.5) / STUDY_GRID as f64).collect();
    let degree = (2 * m as usize - 1).max(3);
    let dim = breakpoints + degree - 1;
    build_empirical_basis_with(&grid, m, dim, EmpiricalOptions { breakpoints: Some(breakpoints) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub n: usize,
    pub c: f64,
    pub h_fs: f64,
    pub h_gcv_mean: f64,
    pub h_gcv_sd: f64,
    /// Rejection proportion per procedure, in [`StudyTable::procedures`] order.
    pub rp: Vec<f64>,
    pub completed: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyTable {
    pub hypothesis: Hypothesis,
    pub procedures: Vec<Procedure>,
    pub rows: Vec<StudyRow>,
    pub metadata: Vec<(String, String)>,
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl StudyTable {
    pub fn row(&self, n: usize, c: f64) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.n == n && r.c == c)
    }

    /// Rejection proportion of `p` in cell `(n, c)`.
    pub fn rp(&self, n: usize, c: f64, p: Procedure) -> Option<f64> {
        let j = self.procedures.iter().position(|q| *q == p)?;
        self.row(n, c).map(|r| r.rp[j])
    }

    pub fn to_csv(&self) -> String {
        let hcol = match self.hypothesis {
            Hypothesis::Simple => "h_fs",
            Hypothesis::Composite => "h_fs_com",
        };
        let mut out = format!("n,c,{hcol},h_gcv_mean,h_gcv_sd");
        for p in &self.procedures {
            let _ = write!(out, ",rp_{}", p.name());
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{},{},{}", r.n, fmt17(r.c), fmt17(r.h_fs), fmt17(r.h_gcv_mean), fmt17(r.h_gcv_sd));
            for v in &r.rp {
                let _ = write!(out, ",{}", fmt17(*v));
            }
            out.push('\n');
        }
        out
    }

    /// `key = value` lines.
    pub fn metadata_text(&self) -> String {
        self.metadata.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Outcome of one replicate: `h_GCV` (if computed) and one decision per
/// procedure.
struct Replicate {
    h_gcv: Option<f64>,
    reject: Vec<bool>,
}

struct Cell<'a> {
    cfg: &'a StudyConfig,
    sys: &'a EigenSystem,
    n: usize,
    c: f64,
    h_fs: Option<f64>,
    gcv_grid: &'a [f64],
}

impl Cell<'_> {
    fn data(&self, seed: u64) -> Dataset {
        match self.cfg.hypothesis {
            Hypothesis::Simple => gen_simple(self.n, self.c, seed),
            Hypothesis::Composite => gen_composite(self.n, self.c, seed),
        }
    }

    fn null(&self, data: &Dataset) -> Result<NullModel> {
        Ok(match self.cfg.hypothesis {
            Hypothesis::Simple => NullModel::simple(f0),
            Hypothesis::Composite => NullModel::Linear(ols_line(data.x(), data.y())?),
        })
    }

    /// Decisions for `procs` at one `h`, sharing a single set of MC draws.
    fn decide(&self, data: &Dataset, null: &NullModel, h: f64, procs: &[Procedure], mc_seed: u64) -> Result<Vec<bool>> {
        let fit_cfg = FitConfig::from_h(self.cfg.m, self.n, h)?;
        let ctx = TestContext::new(data.x(), null, &fit_cfg, self.sys, self.cfg.mode)?;
        let kinds: Vec<TestKind> = procs.iter().map(|p| p.kind()).collect();
        let sims = ctx.mc_null_statistics(&kinds, self.cfg.n_mc, mc_seed)?;
        kinds
            .iter()
            .zip(sims)
            .map(|(k, s)| {
                let cut = cutoff_from_sample(*k, s, self.cfg.alpha);
                let stat = ctx.statistic(data.y(), *k)?;
                if !stat.is_finite() {
                    return Err(Error::IllPosed("non-finite statistic".into()));
                }
                Ok(crate::testing::TestResult::decide(*k, stat, cut))
            })
            .collect()
    }

    fn attempt(&self, seed: u64, procs: &[Procedure]) -> Result<Replicate> {
        let data = self.data(seed);
        let null = self.null(&data)?;
        let (fs_procs, gcv_procs): (Vec<Procedure>, Vec<Procedure>) = procs.iter().partition(|p| p.uses_fs());
        let mut decisions = std::collections::BTreeMap::new();
        if !fs_procs.is_empty() {
            let h = self.h_fs.expect("h_FS computed when FS procedures are configured");
            let d = self.decide(&data, &null, h, &fs_procs, derive_seed(&[seed, tag::MC_FS]))?;
            decisions.extend(fs_procs.iter().copied().zip(d));
        }
        let mut h_gcv = None;
        if !gcv_procs.is_empty() {
            let template = FitConfig::new(self.cfg.m, self.n, self.gcv_grid[0])?;
            let lam = gcv_select(&data, self.gcv_grid, &template, self.sys)?;
            let h = lam.powf(1.0 / (2.0 * self.cfg.m as f64));
            let d = self.decide(&data, &null, h, &gcv_procs, derive_seed(&[seed, tag::MC_GCV]))?;
            decisions.extend(gcv_procs.iter().copied().zip(d));
            h_gcv = Some(h);
        }
        Ok(Replicate { h_gcv, reject: procs.iter().map(|p| decisions[p]).collect() })
    }

    /// Runs replicate `rep`, retrying with perturbed seeds on failure.
    fn replicate(&self, rep: usize, procs: &[Procedure]) -> Option<Replicate> {
        let key = [self.cfg.base_seed, self.n as u64, self.c.to_bits(), rep as u64];
        let mut seed = derive_seed(&key);
        for attempt in 0..=MAX_RETRIES {
            if attempt > 0 {
                let mut k = key.to_vec();
                k.push(attempt);
                seed = Stream::new(&k, tag::RETRY).next_u64();
            }
            if let Ok(r) = self.attempt(seed, procs) {
                return Some(r);
            }
        }
        None
    }
}

/// Runs every `(n, c)` cell of the study. Replicates run in parallel on the
/// current rayon pool; the table does not depend on the number of threads.
pub fn run_study(config: &StudyConfig) -> Result<StudyTable> {
    config.validate()?;
    let sys = study_basis(config.m, config.breakpoints)?;
    run_study_with_basis(config, &sys)
}

/// [`run_study`] with a caller-supplied eigen-system.
pub fn run_study_with_basis(config: &StudyConfig, sys: &EigenSystem) -> Result<StudyTable> {
    config.validate()?;
    if sys.m() != config.m {
        return Err(Error::invalid(format!("basis has m = {} but the study uses m = {}", sys.m(), config.m)));
    }
    let procs = config.columns();
    let budget = ErrorBudget::new(config.alpha, config.beta, config.regime())?;
    let select = SelectOptions { c_0: config.c_0, form: config.form, ..SelectOptions::default() };
    let needs_fs = procs.iter().any(|p| p.uses_fs());
    let h_fs: Vec<Option<f64>> = config
        .n_list
        .iter()
        .map(|&n| {
            if needs_fs {
                bounds::select_h_fs(&budget, n, sys, &select).map(|p| Some(p.argmin_h))
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;
    let gcv_grid = default_gcv_grid(config.m);

    let cells: Vec<Cell<'_>> = config
        .n_list
        .iter()
        .zip(&h_fs)
        .flat_map(|(&n, &h)| {
            config.c_list.iter().map(move |&c| (n, c, h))
        })
        .map(|(n, c, h_fs)| Cell { cfg: config, sys, n, c, h_fs, gcv_grid: &gcv_grid })
        .collect();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|i| (0..config.replicates).map(move |r| (i, r)))
        .collect();
    let results: Vec<Option<Replicate>> = jobs
        .par_iter()
        .map(|&(i, r)| cells[i].replicate(r, &procs))
        .collect();

    let mut rows = Vec::with_capacity(cells.len());
    let mut total_missing = 0usize;
    for (i, cell) in cells.iter().enumerate() {
        let reps: Vec<&Replicate> = results[i * config.replicates..(i + 1) * config.replicates]
            .iter()
            .flatten()
            .collect();
        let completed = reps.len();
        let missing = config.replicates - completed;
        total_missing += missing;
        let hs: Vec<f64> = reps.iter().filter_map(|r| r.h_gcv).collect();
        let (h_mean, h_sd) = mean_sd(&hs);
        let rp = (0..procs.len())
            .map(|j| {
                if completed == 0 {
                    f64::NAN
                } else {
                    reps.iter().filter(|r| r.reject[j]).count() as f64 / completed as f64
                }
            })
            .collect();
        rows.push(StudyRow {
            n: cell.n,
            c: cell.c,
            h_fs: cell.h_fs.unwrap_or(f64::NAN),
            h_gcv_mean: h_mean,
            h_gcv_sd: h_sd,
            rp,
            completed,
            missing,
        });
    }

    let list = |v: Vec<String>| v.join(",");
    let mut metadata = vec![
        ("hypothesis".to_string(), config.hypothesis.name().to_string()),
        ("n_list".into(), list(config.n_list.iter().map(|n| n.to_string()).collect())),
        ("c_list".into(), list(config.c_list.iter().map(|c| c.to_string()).collect())),
        ("replicates".into(), config.replicates.to_string()),
        ("alpha".into(), config.alpha.to_string()),
        ("beta".into(), config.beta.to_string()),
        ("procedures".into(), list(procs.iter().map(|p| p.name().to_string()).collect())),
        ("n_mc".into(), config.n_mc.to_string()),
        ("base_seed".into(), config.base_seed.to_string()),
        ("m".into(), config.m.to_string()),
        ("basis".into(), format!("{:?}", sys.source())),
        ("basis_terms".into(), sys.len().to_string()),
        ("breakpoints".into(), config.breakpoints.to_string()),
        ("c_0".into(), config.c_0.to_string()),
        ("second_order_mode".into(), format!("{:?}", config.mode)),
        ("separation_form".into(), format!("{:?}", config.form)),
        ("quantile".into(), "higher".into()),
        ("missing_total".into(), total_missing.to_string()),
    ];
    for r in &rows {
        metadata.push((format!("missing.n{}.c{}", r.n, r.c), r.missing.to_string()));
    }
    Ok(StudyTable { hypothesis: config.hypothesis, procedures: procs, rows, metadata })
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}
