//! Finite-sample nonparametric testing for smoothing-spline regression.
//!
//! The crate is organised bottom-up:
//!
//! * [`eigenbasis`] builds the simultaneous eigen-system of the design inner
//!   product and the roughness penalty, and the kernel constants derived from it;
//! * [`spline`] fits penalized least squares in that basis;
//! * [`bounds`] holds the closed-form cutoffs, separation functions and
//!   smoothing-parameter formulas;
//! * [`testing`] computes the test statistics and calibrates them;
//! * [`sim`] runs replicated power studies;
//! * [`cli`] wires everything to the `nptest` binary.

pub mod bounds;
pub mod bspline;
pub mod cli;
pub mod eigenbasis;
pub mod error;
pub mod quadrature;
pub mod rng;
pub mod sim;
pub mod spline;
pub mod testing;

pub use eigenbasis::{build_empirical_basis, build_trig_basis, EigenSystem, FitConfig};
pub use error::{Error, Result};
