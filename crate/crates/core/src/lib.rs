//! Cardinality-constrained distributionally robust portfolio optimization.
//!
//! The library selects `k` of `N` assets and a portfolio over the selection
//! that minimizes worst-case expected loss over a moment ambiguity set
//! (mean within an ellipsoid around the sample mean, second moment bounded
//! by a multiple of the sample covariance). The worst-case loss of a given
//! selection is a semidefinite program; the selection itself is found by a
//! cutting-plane method whose subgradients come from the dual of that
//! program, solved in the dimension of the selection and then completed to
//! full dimension.
//!
//! Modules, bottom up:
//!
//! * [`numerics`] — dense symmetric kernels (Cholesky, eigenvalues).
//! * [`conic`] — a small interior-point solver for equality-constrained
//!   cone programs over nonnegative, second-order, and PSD blocks.
//! * [`model`] — problem data: moments, ambiguity parameters, piecewise
//!   linear utility, instance validation.
//! * [`lower_level`] — the per-selection worst-case program: reduced dual,
//!   completion ("lift") to full dimension, subgradient cuts, and primal
//!   portfolio recovery.
//! * [`upper_level`] — the cutting-plane master over selections, with an
//!   internal branch-and-bound for the master relaxation.
//! * [`baselines`] — cardinality-constrained mean-variance reference model.
//! * [`data_io`] — returns CSV and mean/sd/correlation flat files, result
//!   JSON.
//! * [`backtest`] — rolling-window evaluation of either strategy.
//! * [`synthetic`] — seeded random instance generator used by `verify`,
//!   benchmarks, and tests.

pub mod backtest;
pub mod baselines;
pub mod conic;
pub mod data_io;
pub mod lower_level;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod upper_level;

pub use backtest::{BacktestConfig, BacktestError, BacktestReport, Strategy, WindowRecord};
pub use baselines::{BaselineError, MeanVarianceSpec};
pub use conic::{ConeProgram, ConicSolution, IpmSettings, SolveStatus};
pub use data_io::{DataError, ReturnMatrix};
pub use lower_level::{
    Cut, LiftedDualSolution, LowerDualSolution, LowerLevelError, LowerPrimalSolution,
};
pub use model::{Instance, ModelError, Moments, Portfolio, Selection, UncertaintySet, UtilityPwl};
pub use numerics::SymMatrix;
pub use upper_level::{
    CutPlaneConfig, MasterMode, MasterState, SolveResult, Termination, TraceRecord,
    UpperLevelError,
};

