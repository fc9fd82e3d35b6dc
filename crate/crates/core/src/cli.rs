//! The `nptest` command line.
//!
//! Every flag can also be supplied through `--config <file>`, a plain
//! `key = value` file whose keys are flag names (`n-mc` or `n_mc`). Values
//! given on the command line win over the file, which wins over built-in
//! defaults. Exit codes: 0 success, 2 input error, 3 infeasible
//! configuration, 4 numerical failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::parser::ValueSource;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::bounds::{self, BoundConstants, ErrorBudget, Regime, SelectOptions, SeparationForm};
use crate::eigenbasis::{build_empirical_basis_with, build_trig_basis, EigenSystem, EmpiricalOptions, FitConfig};
use crate::error::{Error, Result};
use crate::sim::{self, Hypothesis, Procedure, StudyConfig};
use crate::spline::Dataset;
use crate::testing::{self, Calibration, Evaluator, HSource, NullModel, RunOptions, SecondOrderMode, TestKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

/// Exit status for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::DegenerateDesign(_) => EXIT_INPUT,
        Error::NoFeasibleH(_) | Error::OutOfRange(_) => EXIT_INFEASIBLE,
        Error::IllPosed(_) | Error::NoSolution { .. } | Error::DegeneratePenalty(_) => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "nptest", version, about = "Finite-sample nonparametric tests for smoothing-spline regression")]
pub struct Cli {
    /// Worker threads [default: available cores]
    #[arg(long, global = true, env = "NPTEST_THREADS")]
    pub threads: Option<usize>,
    /// `key = value` file supplying values for any flag not given on the command line
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Test a null hypothesis on an `x,y` dataset
    Test(TestArgs),
    /// Separation profile over h and its minimizer
    SelectH(SelectArgs),
    /// Effective sample size for a given alternative norm
    Ess(EssArgs),
    /// Solve the kernel ridge regression penalty equation for lambda
    Krr(KrrArgs),
    /// Replicated power study
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisKind {
    /// Empirical spline eigen-system for the uniform design
    Grid,
    /// Empirical spline eigen-system for the observed design
    Design,
    /// Periodic trigonometric eigen-system
    Trig,
}

#[derive(Debug, Clone, Args)]
pub struct BasisArgs {
    /// Smoothness order (penalty on the m-th derivative)
    #[arg(long, default_value_t = 2)]
    pub m: u32,
    /// Eigen-system
    #[arg(long, value_enum, default_value_t = BasisKind::Grid)]
    pub basis: BasisKind,
    /// Spline breakpoints for the grid and design bases
    #[arg(long, default_value_t = sim::STUDY_BREAKPOINTS)]
    pub breakpoints: usize,
    /// Number of trigonometric terms (odd)
    #[arg(long, default_value_t = 101)]
    pub terms: usize,
}

impl BasisArgs {
    fn build(&self, design: Option<&[f64]>) -> Result<EigenSystem> {
        match self.basis {
            BasisKind::Grid => sim::study_basis(self.m, self.breakpoints),
            BasisKind::Trig => build_trig_basis(self.m, self.terms),
            BasisKind::Design => {
                let x = design.ok_or_else(|| Error::invalid("the design basis needs a dataset"))?;
                let degree = (2 * self.m as usize - 1).max(3);
                let dim = (self.breakpoints + degree - 1).min(x.len());
                build_empirical_basis_with(x, self.m, dim, EmpiricalOptions { breakpoints: Some(self.breakpoints) })
            }
        }
    }

    fn describe(&self, sys: &EigenSystem) -> String {
        let name = match self.basis {
            BasisKind::Grid => "grid",
            BasisKind::Design => "design",
            BasisKind::Trig => "trig",
        };
        format!("{name} ({} terms)", sys.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NullArg {
    Simple,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    First,
    Second,
    Composite,
    Plrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CalibrationArg {
    Closed,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Noiseless,
    Exact,
}

impl From<ModeArg> for SecondOrderMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Noiseless => SecondOrderMode::NoiselessFit,
            ModeArg::Exact => SecondOrderMode::ExactCoefficients,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormArg {
    Full,
    Leading,
}

impl From<FormArg> for SeparationForm {
    fn from(f: FormArg) -> Self {
        match f {
            FormArg::Full => SeparationForm::Full,
            FormArg::Leading => SeparationForm::Leading,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HypothesisArg {
    Simple,
    Composite,
}

impl From<HypothesisArg> for Hypothesis {
    fn from(h: HypothesisArg) -> Self {
        match h {
            HypothesisArg::Simple => Hypothesis::Simple,
            HypothesisArg::Composite => Hypothesis::Composite,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TestArgs {
    /// Dataset CSV with header `x,y`
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Null hypothesis
    #[arg(long, value_enum, default_value_t = NullArg::Simple)]
    pub null: NullArg,
    /// Null function for `--null simple`: `+`-separated terms among `zero`,
    /// `const:a`, `poly:a0,a1,...`, `sin:a,k` (a·sin 2πkx), `cos:a,k`, `study` (5(x²−x+1/6))
    #[arg(long, value_name = "SPEC")]
    pub f0: Option<String>,
    /// Test statistic
    #[arg(long, value_enum, default_value_t = KindArg::Second)]
    pub kind: KindArg,
    /// Smoothing parameter: `fs`, `gcv` or a positive number
    #[arg(long, default_value = "fs")]
    pub h: String,
    /// Cutoff calibration
    #[arg(long, value_enum, default_value_t = CalibrationArg::Mc)]
    pub calibration: CalibrationArg,
    /// Type I error level
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Type II error level
    #[arg(long, default_value_t = 0.05)]
    pub beta: f64,
    /// Monte Carlo seed
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Monte Carlo replicates for the cutoff
    #[arg(long, default_value_t = testing::DEFAULT_N_MC)]
    pub n_mc: usize,
    /// Concentration constant c_0
    #[arg(long, default_value_t = bounds::DEFAULT_C0)]
    pub c0: f64,
    /// How (I − P_λ)f₀ is formed in the second-order statistic
    #[arg(long, value_enum, default_value_t = ModeArg::Noiseless)]
    pub mode: ModeArg,
    /// Separation function minimized by `--h fs`
    #[arg(long, value_enum, default_value_t = FormArg::Full)]
    pub form: FormArg,
    /// Also write the machine-readable result row here
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub basis: BasisArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SelectArgs {
    /// Sample size
    #[arg(long)]
    pub n: usize,
    /// Hypothesis (selects the second-order or composite separation function)
    #[arg(long, value_enum, default_value_t = HypothesisArg::Simple)]
    pub hypothesis: HypothesisArg,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    pub beta: f64,
    /// Concentration constant c_0
    #[arg(long, default_value_t = bounds::DEFAULT_C0)]
    pub c0: f64,
    /// Points of the log-spaced h grid
    #[arg(long, default_value_t = 200)]
    pub grid_points: usize,
    /// Upper end of the h grid
    #[arg(long, default_value_t = 0.9)]
    pub h_max: f64,
    /// Separation function
    #[arg(long, value_enum, default_value_t = FormArg::Full)]
    pub form: FormArg,
    /// Write the profile CSV here instead of standard output
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub basis: BasisArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EssArgs {
    /// Norm of the alternative ‖f*‖
    #[arg(long)]
    pub norm: f64,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    pub beta: f64,
    /// ρ_K [default: computed from the basis at --h-ref]
    #[arg(long)]
    pub rho_k: Option<f64>,
    /// ζ_K [default: computed from the basis at --h-ref]
    #[arg(long)]
    pub zeta_k: Option<f64>,
    /// h at which the kernel constants are computed
    #[arg(long, default_value_t = 0.1)]
    pub h_ref: f64,
    #[command(flatten)]
    pub basis: BasisArgs,
}

#[derive(Debug, Clone, Args)]
pub struct KrrArgs {
    /// Eigenvalue regime: `poly:m` (ρ_ν = ν^{2m}), `finite:k` (k unit eigenvalues) or `gauss` (ρ_ν = e^{ν²})
    #[arg(long)]
    pub kernel: String,
    /// Sample size
    #[arg(long)]
    pub n: f64,
    /// Type I budget M
    #[arg(long = "M", id = "M", default_value_t = (15.0f64 / 0.05).ln())]
    pub m_budget: f64,
    /// ζ_K
    #[arg(long, default_value_t = 1.0)]
    pub zeta: f64,
    /// Number of eigenvalues for `poly:m`
    #[arg(long, default_value_t = 20_000)]
    pub terms: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = HypothesisArg::Simple)]
    pub hypothesis: HypothesisArg,
    /// Comma-separated sample sizes
    #[arg(long, default_value = "50,100,200,300,400")]
    pub n_list: String,
    /// Comma-separated signal strengths c
    #[arg(long, default_value = "0,1,2,3")]
    pub c_list: String,
    #[arg(long, default_value_t = sim::DEFAULT_REPLICATES)]
    pub replicates: usize,
    /// Base seed
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Comma-separated procedures [default: all for the hypothesis]
    #[arg(long)]
    pub procedures: Option<String>,
    /// Monte Carlo replicates per cutoff
    #[arg(long, default_value_t = testing::DEFAULT_N_MC)]
    pub n_mc: usize,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.05)]
    pub beta: f64,
    /// Concentration constant c_0
    #[arg(long, default_value_t = bounds::DEFAULT_C0)]
    pub c0: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Noiseless)]
    pub mode: ModeArg,
    /// Separation function minimized for h_FS
    #[arg(long, value_enum, default_value_t = FormArg::Full)]
    pub form: FormArg,
    /// Smoothness order
    #[arg(long, default_value_t = 2)]
    pub m: u32,
    /// Spline breakpoints of the study basis
    #[arg(long, default_value_t = sim::STUDY_BREAKPOINTS)]
    pub breakpoints: usize,
    /// Output CSV [default: standard output]; metadata goes to `<out>.meta`
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

/// Runs the command line with explicit output streams and returns the exit
/// status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match parse(args) {
        Ok(c) => c,
        Err(Parsed::Clap(e)) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
        Err(Parsed::Lib(e)) => {
            let _ = writeln!(err, "error: {e}");
            return exit_code(&e);
        }
    };
    let result = match cli.threads {
        Some(0) => Err(Error::invalid("--threads must be positive")),
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => {
                let (mut o, mut e) = (Vec::new(), Vec::new());
                let r = pool.install(|| dispatch(&cli.command, &mut o, &mut e));
                let _ = out.write_all(&o);
                let _ = err.write_all(&e);
                r
            }
            Err(e) => Err(Error::invalid(format!("cannot start {t} threads: {e}"))),
        },
        None => dispatch(&cli.command, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

enum Parsed {
    Clap(clap::Error),
    Lib(Error),
}

fn parse(mut args: Vec<OsString>) -> std::result::Result<Cli, Parsed> {
    let cmd = Cli::command();
    // First pass without required-argument checks: the file may supply them.
    let lenient = cmd
        .clone()
        .mut_subcommands(|s| s.mut_args(|a| a.required(false)))
        .subcommand_required(false);
    let matches = match lenient.try_get_matches_from(&args) {
        Ok(m) => m,
        Err(_) => return cmd.try_get_matches_from(&args).and_then(|m| Cli::from_arg_matches(&m)).map_err(Parsed::Clap),
    };
    if let (Some(path), Some(_)) = (matches.get_one::<PathBuf>("config"), matches.subcommand()) {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Parsed::Lib(Error::Io(format!("{}: {e}", path.display()))))?;
        let extra = config_args(&cmd, &matches, &text).map_err(Parsed::Lib)?;
        args.extend(extra);
    }
    let matches = cmd.try_get_matches_from(&args).map_err(Parsed::Clap)?;
    Cli::from_arg_matches(&matches).map_err(Parsed::Clap)
}

/// Parses a `key = value` file.
pub fn parse_config(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: format!("expected `key = value`, got '{line}'"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty key".into() });
        }
        entries.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(entries)
}

/// Flags contributed by the config file: one `--flag=value` per key not
/// already given on the command line.
fn config_args(cmd: &clap::Command, matches: &clap::ArgMatches, text: &str) -> Result<Vec<OsString>> {
    let (name, sub_matches) = matches
        .subcommand()
        .ok_or_else(|| Error::invalid("no subcommand given"))?;
    let sub = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let mut extra = Vec::new();
    for (line, key, value) in parse_config(text)? {
        let wanted = key.replace('_', "-");
        let arg = sub
            .get_arguments()
            .chain(cmd.get_arguments())
            .find(|a| a.get_long() == Some(wanted.as_str()) || a.get_id().as_str() == key);
        let arg = match arg {
            Some(a) if a.get_id() != "config" && a.get_long().is_some() => a,
            _ => {
                return Err(Error::Parse { line, msg: format!("unknown key '{key}' for `{name}`") });
            }
        };
        let id = arg.get_id().as_str();
        if sub_matches.value_source(id) != Some(ValueSource::CommandLine) {
            extra.push(OsString::from(format!("--{}={value}", arg.get_long().expect("long flag"))));
        }
    }
    Ok(extra)
}

fn dispatch(cmd: &Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Test(a) => cmd_test(a, out),
        Command::SelectH(a) => cmd_select_h(a, out, err),
        Command::Ess(a) => cmd_ess(a, out),
        Command::Krr(a) => cmd_krr(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
    }
}

fn io<T>(r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::Io(e.to_string()))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Seventeen significant digits.
fn g17(v: f64) -> String {
    format!("{v:.16e}")
}

fn f3(v: f64) -> String {
    if v == 0.0 || (1e-3..1e6).contains(&v.abs()) {
        format!("{v:.3}")
    } else {
        format!("{v:.3e}")
    }
}

/// Parses a null-function spec such as `poly:1,2+sin:0.5,1`.
pub fn parse_function(spec: &str) -> Result<Evaluator> {
    let mut terms: Vec<Evaluator> = Vec::new();
    for term in spec.split('+') {
        let term = term.trim();
        let (name, args) = term.split_once(':').unwrap_or((term, ""));
        let nums: Vec<f64> = if args.trim().is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::invalid(format!("bad number '{v}' in function spec '{term}'")))
                })
                .collect::<Result<_>>()?
        };
        let arity = |k: usize| {
            if nums.len() == k {
                Ok(())
            } else {
                Err(Error::invalid(format!("'{name}' takes {k} argument(s) in '{term}'")))
            }
        };
        let f: Evaluator = match name {
            "zero" => {
                arity(0)?;
                Arc::new(|_| 0.0)
            }
            "study" => {
                arity(0)?;
                Arc::new(sim::f0)
            }
            "const" => {
                arity(1)?;
                let a = nums[0];
                Arc::new(move |_| a)
            }
            "poly" => {
                if nums.is_empty() {
                    return Err(Error::invalid("'poly' needs at least one coefficient"));
                }
                let c = nums.clone();
                Arc::new(move |x| c.iter().rev().fold(0.0, |acc, a| acc * x + a))
            }
            "sin" | "cos" => {
                arity(2)?;
                let (a, k) = (nums[0], nums[1]);
                let w = 2.0 * std::f64::consts::PI * k;
                if name == "sin" {
                    Arc::new(move |x| a * (w * x).sin())
                } else {
                    Arc::new(move |x| a * (w * x).cos())
                }
            }
            other => return Err(Error::invalid(format!("unknown function '{other}' in spec '{spec}'"))),
        };
        terms.push(f);
    }
    Ok(Arc::new(move |x| terms.iter().map(|f| f(x)).sum()))
}

fn parse_h(s: &str) -> Result<HSource> {
    match s.trim() {
        "fs" => Ok(HSource::Fs),
        "gcv" => Ok(HSource::Gcv),
        v => match v.parse::<f64>() {
            Ok(h) if h > 0.0 && h.is_finite() => Ok(HSource::Fixed(h)),
            _ => Err(Error::invalid(format!("--h must be `fs`, `gcv` or a positive number, got '{v}'"))),
        },
    }
}

fn cmd_test(a: &TestArgs, out: &mut dyn Write) -> Result<()> {
    let data = Dataset::read_csv(&a.data)?;
    let h_source = parse_h(&a.h)?;
    let kind = match a.kind {
        KindArg::First => TestKind::FirstOrder,
        KindArg::Second => TestKind::SecondOrder,
        KindArg::Composite => TestKind::Composite,
        KindArg::Plrt => TestKind::Plrt,
    };
    let null = match (a.null, &a.f0) {
        (NullArg::Simple, Some(spec)) => NullModel::Simple(parse_function(spec)?),
        (NullArg::Simple, None) => return Err(Error::invalid("--null simple needs --f0")),
        (NullArg::Linear, Some(_)) => return Err(Error::invalid("--f0 applies only to --null simple")),
        (NullArg::Linear, None) => NullModel::linear(),
    };
    let regime = match (kind, a.null) {
        (TestKind::FirstOrder, _) => Regime::FirstOrder,
        (_, NullArg::Simple) => Regime::SecondOrder,
        (_, NullArg::Linear) => Regime::Composite,
    };
    let budget = ErrorBudget::new(a.alpha, a.beta, regime)?;
    let calibration = match a.calibration {
        CalibrationArg::Closed => Calibration::ClosedForm,
        CalibrationArg::Mc => Calibration::MonteCarlo,
    };
    let sys = a.basis.build(Some(data.x()))?;
    let select = SelectOptions { c_0: a.c0, form: a.form.into(), ..SelectOptions::default() };
    let opts = RunOptions { n_mc: a.n_mc, c_0: a.c0, mode: a.mode.into(), select, gcv_grid: None };
    let r = testing::run_test(&data, &null, kind, &budget, h_source, calibration, &opts, &sys, a.seed)?;

    let kind_name = match kind {
        TestKind::FirstOrder => "first-order",
        TestKind::SecondOrder => "second-order",
        TestKind::Composite => "composite",
        TestKind::Plrt => "plrt",
    };
    let h_name = match h_source {
        HSource::Fs => "fs",
        HSource::Gcv => "gcv",
        HSource::Fixed(_) => "fixed",
    };
    let mut rep = String::new();
    rep += &format!("test = {kind_name}, null = {}\n", if null.is_simple() { "simple" } else { "linear" });
    rep += &format!("n = {}, m = {}, basis = {}\n", data.len(), a.basis.m, a.basis.describe(&sys));
    rep += &format!("h = {} ({h_name}), lambda = {}\n", f3(r.cfg.h()), f3(r.cfg.lambda()));
    rep += &format!("statistic = {}\n", f3(r.statistic));
    match calibration {
        Calibration::MonteCarlo => {
            rep += &format!("cutoff = {} (monte-carlo, N_mc = {}, alpha = {})\n", f3(r.cutoff), a.n_mc, f3(a.alpha))
        }
        Calibration::ClosedForm => rep += &format!("cutoff = {} (closed-form, alpha = {})\n", f3(r.cutoff), f3(a.alpha)),
    }
    rep += &format!("reject={}\n", r.reject);
    let flags = if r.feasibility_flags.is_empty() { "none".to_string() } else { r.feasibility_flags.join(";") };
    rep += &format!("flags = {flags}\n");
    let sens_h = matches!(h_source, HSource::Fs);
    let sens_cut = calibration == Calibration::ClosedForm;
    if sens_h || sens_cut {
        rep += "c_0 sensitivity:\n";
        for c0 in [0.5, 1.0, 2.0] {
            let mut line = format!("  c_0 = {}:", f3(c0));
            if sens_h {
                let h = if kind == TestKind::FirstOrder {
                    testing::first_order_h(&budget, data.len(), &sys, c0)
                } else {
                    bounds::select_h_fs(&budget, data.len(), &sys, &SelectOptions { c_0: c0, ..select }).map(|p| p.argmin_h)
                };
                line += &format!(" h_fs = {}", h.map(f3).unwrap_or_else(|e| format!("unavailable ({e})")));
            }
            if sens_cut {
                let c = testing::closed_form_cutoff(kind, budget.m_budget, &r.cfg, &sys, c0)?;
                line += &format!(" cutoff = {}{}", f3(c.value), if c.feasible { "" } else { " (conditions violated)" });
            }
            rep += &line;
            rep.push('\n');
        }
    }
    let csv = format!(
        "statistic,cutoff,reject,h,flags\n{},{},{},{},{}\n",
        g17(r.statistic),
        g17(r.cutoff),
        r.reject,
        g17(r.cfg.h()),
        r.feasibility_flags.join(";")
    );
    io(write!(out, "{rep}\n{csv}"))?;
    if let Some(p) = &a.out {
        write_file(p, &csv)?;
    }
    Ok(())
}

fn cmd_select_h(a: &SelectArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let regime = match a.hypothesis {
        HypothesisArg::Simple => Regime::SecondOrder,
        HypothesisArg::Composite => Regime::Composite,
    };
    let budget = ErrorBudget::new(a.alpha, a.beta, regime)?;
    let sys = a.basis.build(None)?;
    let opts = SelectOptions {
        c_0: a.c0,
        grid_points: a.grid_points,
        h_max: a.h_max,
        form: a.form.into(),
        ..SelectOptions::default()
    };
    let p = bounds::select_h_fs(&budget, a.n, &sys, &opts)?;
    let mut csv = String::from("h,rho_n,feasible\n");
    for ((h, r), ok) in p.h_grid.iter().zip(&p.rho_values).zip(&p.conditions_met) {
        csv += &format!("{},{},{}\n", g17(*h), g17(*r), ok);
    }
    let i = p.h_grid.iter().position(|v| *v == p.argmin_h).expect("argmin on grid");
    let cfg = FitConfig::from_h(sys.m(), a.n, p.argmin_h)?;
    let k = BoundConstants::from_system(&sys, &cfg, a.c0)?;
    let first = ErrorBudget::new(a.alpha, a.beta, Regime::FirstOrder)?;
    let h_star = testing::first_order_h(&first, a.n, &sys, a.c0)?;
    let h_ss = bounds::h_star_star(budget.m_budget, a.n, &k);
    let mut summary = format!(
        "argmin: h = {}, rho_n = {}, feasible = {}\nh* (first order) = {}\nh** = {}\nc_0 sensitivity:\n",
        f3(p.argmin_h),
        f3(p.min_rho),
        p.conditions_met[i],
        f3(h_star),
        f3(h_ss)
    );
    for c0 in [0.5, 1.0, 2.0] {
        let q = bounds::select_h_fs(&budget, a.n, &sys, &SelectOptions { c_0: c0, ..opts })?;
        summary += &format!("  c_0 = {}: argmin h = {}, rho_n = {}\n", f3(c0), f3(q.argmin_h), f3(q.min_rho));
    }
    match &a.out {
        Some(path) => {
            write_file(path, &csv)?;
            io(out.write_all(summary.as_bytes()))?;
        }
        None => {
            io(out.write_all(csv.as_bytes()))?;
            io(err.write_all(summary.as_bytes()))?;
        }
    }
    Ok(())
}

fn cmd_ess(a: &EssArgs, out: &mut dyn Write) -> Result<()> {
    let budget = ErrorBudget::new(a.alpha, a.beta, Regime::SecondOrder)?;
    let k = match (a.rho_k, a.zeta_k) {
        (Some(r), Some(z)) => BoundConstants::new(a.basis.m, 1.0, r, z, 1.0)?,
        (r, z) => {
            let sys = a.basis.build(None)?;
            let cfg = FitConfig::from_h(a.basis.m, 100, a.h_ref)?;
            let base = BoundConstants::from_system(&sys, &cfg, 1.0)?;
            BoundConstants::new(a.basis.m, base.c_k, r.unwrap_or(base.rho_k), z.unwrap_or(base.zeta_k), base.trace_sum)?
        }
    };
    let n = bounds::effective_sample_size(a.norm, &budget, &k)?;
    let below = bounds::ess_rhs((n - 1) as f64, &budget, &k);
    let at = bounds::ess_rhs(n as f64, &budget, &k);
    io(write!(
        out,
        "norm = {}, m = {}, rho_K = {}, zeta_K = {}\nn = {n}\nrhs(n-1 = {}) = {}\nrhs(n = {n}) = {}\ncheck: rhs(n) <= norm < rhs(n-1) is {}\n",
        f3(a.norm),
        a.basis.m,
        f3(k.rho_k),
        f3(k.zeta_k),
        n - 1,
        f3(below),
        f3(at),
        at <= a.norm && (n == 2 || below > a.norm)
    ))
}

fn krr_eigenvalues(spec: &str, terms: usize) -> Result<(Vec<f64>, String)> {
    let (name, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let int = |what: &str| {
        arg.trim()
            .parse::<u32>()
            .ok()
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::invalid(format!("{what} needs a positive integer, got '{arg}'")))
    };
    Ok(match name {
        "poly" => {
            let m = int("poly:m")?;
            let ev = (1..=terms).map(|v| (v as f64).powi(2 * m as i32)).collect();
            let p = 4.0 * m as f64;
            (ev, format!("lambda* ~ n^{} (-4m/(4m+1))", f3(-p / (p + 1.0))))
        }
        "finite" => {
            let k = int("finite:k")?;
            (vec![1.0; k as usize], "lambda* ~ n^-1".to_string())
        }
        "gauss" if arg.is_empty() => {
            let ev = (1..=26).map(|v| ((v * v) as f64).exp()).collect();
            (ev, "lambda* ~ (log n)^{1/4} n^-1".to_string())
        }
        _ => return Err(Error::invalid(format!("unknown kernel '{spec}'; use poly:m, finite:k or gauss"))),
    })
}

fn cmd_krr(a: &KrrArgs, out: &mut dyn Write) -> Result<()> {
    let (ev, rate) = krr_eigenvalues(&a.kernel, a.terms)?;
    let lam = bounds::krr_lambda_star(&ev, a.n, a.m_budget, a.zeta)?;
    let res = bounds::krr_residual(&ev, a.n, a.m_budget, a.zeta, lam);
    io(write!(
        out,
        "kernel = {}, n = {}, M = {}, zeta_K = {}\nlambda* = {}\nresidual = {:.3e}\nrate: {rate}\n",
        a.kernel,
        f3(a.n),
        f3(a.m_budget),
        f3(a.zeta),
        f3(lam),
        res
    ))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| Error::invalid(format!("bad {what} entry '{}'", v.trim()))))
        .collect()
}

fn cmd_simulate(a: &SimulateArgs, out: &mut dyn Write) -> Result<()> {
    let hypothesis: Hypothesis = a.hypothesis.into();
    let procedures = match &a.procedures {
        Some(s) => s.split(',').map(Procedure::parse).collect::<Result<_>>()?,
        None => hypothesis.procedures(),
    };
    let cfg = StudyConfig {
        hypothesis,
        n_list: parse_list(&a.n_list, "n-list")?,
        c_list: parse_list(&a.c_list, "c-list")?,
        replicates: a.replicates,
        alpha: a.alpha,
        beta: a.beta,
        procedures,
        n_mc: a.n_mc,
        base_seed: a.seed,
        m: a.m,
        breakpoints: a.breakpoints,
        c_0: a.c0,
        mode: a.mode.into(),
        form: a.form.into(),
    };
    let table = sim::run_study(&cfg)?;
    let csv = table.to_csv();
    match &a.out {
        Some(path) => {
            write_file(path, &csv)?;
            let mut meta = path.as_os_str().to_owned();
            meta.push(".meta");
            write_file(Path::new(&meta), &table.metadata_text())?;
        }
        None => io(out.write_all(csv.as_bytes()))?,
    }
    Ok(())
}
