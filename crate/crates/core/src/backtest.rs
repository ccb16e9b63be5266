//! Rolling-horizon out-of-sample evaluation.
//!
//! Slides a training window over a return history: moments are estimated
//! on each training slice, the configured strategy solves for a portfolio,
//! and the weights are held fixed through the following testing slice,
//! recording the realized return ξ_mᵀx of every test period. The window
//! then advances by a fixed step; a window that would run past the end of
//! the data is skipped, not shortened. Weights used in a testing slice are
//! derived only from data strictly before it.
//!
//! Returns are used in the units of the data and compounded simply:
//! the cumulative figure is Π(1 + R_m) over all recorded test periods.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{first_quartile_return, solve_mean_variance, MeanVarianceSpec};
use crate::data_io::ReturnMatrix;
use crate::model::{build_utility_tangents, estimate_moments, Instance, Moments, UncertaintySet};
use crate::upper_level::{cutting_plane_solve, CutPlaneConfig, SolveResult};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("backtest needs at least {need} periods (training + testing), got {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("window lengths and step must all be at least 1")]
    DegenerateWindows,
}

/// Which optimizer picks the portfolio on each training window.
#[derive(Debug, Clone)]
pub enum Strategy {
    /// The worst-case-loss model. The ambiguity radius scale, curvature,
    /// and tangent grid follow the standard protocol; `gamma_scaled` G
    /// sets the regularization to G/√N per window.
    Robust {
        k: usize,
        gamma_scaled: f64,
        kappa1: f64,
        kappa2: f64,
        alpha: f64,
        /// Tangent touch points as fractions of the training μ_max.
        tangent_fractions: Vec<f64>,
    },
    /// The mean-variance comparator. With `required_return` unset the
    /// target is the lower quartile of each window's training means.
    MeanVariance {
        k: usize,
        required_return: Option<f64>,
        gamma_mv: Option<f64>,
    },
}

impl Strategy {
    /// Standard-protocol robust strategy: (κ1, κ2) = (1, 4), α = 10,
    /// tangents at 0, μ_max/2, and μ_max.
    pub fn robust(k: usize, gamma_scaled: f64) -> Self {
        Strategy::Robust {
            k,
            gamma_scaled,
            kappa1: 1.0,
            kappa2: 4.0,
            alpha: 10.0,
            tangent_fractions: vec![0.0, 0.5, 1.0],
        }
    }

    /// Mean-variance strategy with the quartile return rule.
    pub fn mean_variance(k: usize) -> Self {
        Strategy::MeanVariance {
            k,
            required_return: None,
            gamma_mv: None,
        }
    }
}

/// Rolling-window layout plus the strategy and its solver controls.
#[derive(Debug, Clone)]
pub struct BacktestConfig {
    /// Periods used to estimate moments before each rebalance.
    pub train_len: usize,
    /// Periods the solved weights are then held for.
    pub test_len: usize,
    /// Periods the window advances between rebalances.
    pub step: usize,
    pub strategy: Strategy,
    pub solver: CutPlaneConfig,
}

impl BacktestConfig {
    /// The standard layout: 156 training periods, 52 testing, advancing
    /// by 52.
    pub fn new(strategy: Strategy) -> Self {
        BacktestConfig {
            train_len: 156,
            test_len: 52,
            step: 52,
            strategy,
            solver: CutPlaneConfig::default(),
        }
    }
}

/// One rebalance: where its data came from and what was held.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowRecord {
    /// First period of the training slice.
    pub train_start: usize,
    /// First period of the testing slice; always `train_start +
    /// train_len`, so the audit that no testing data leaked into training
    /// is a pure index check.
    pub test_start: usize,
    pub selection: Vec<usize>,
    pub weights: Vec<f64>,
    /// The strategy's in-sample objective for this window.
    pub objective: f64,
    pub solve_time_s: f64,
}

/// Everything a rolling run produced. `returns` holds the realized
/// per-period portfolio returns of every completed window in order, and
/// `cumulative` is exactly `cumulative_return(&returns)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestReport {
    pub returns: Vec<f64>,
    pub cumulative: f64,
    pub windows: Vec<WindowRecord>,
    pub wall_time_s: f64,
    /// True when a window's solve failed and the run stopped early; the
    /// completed windows stay valid.
    pub partial: bool,
    /// The failure that ended a partial run.
    pub failure: Option<String>,
}

/// Simple compounding: Π over the series of (1 + R); the empty series
/// gives 1.
pub fn cumulative_return(returns: &[f64]) -> f64 {
    returns.iter().fold(1.0, |acc, r| acc * (1.0 + r))
}

fn solve_window(
    strategy: &Strategy,
    moments: &Moments,
    solver: &CutPlaneConfig,
) -> Result<SolveResult, String> {
    match strategy {
        Strategy::Robust {
            k,
            gamma_scaled,
            kappa1,
            kappa2,
            alpha,
            tangent_fractions,
        } => {
            let n = moments.mean().len();
            let mu_max = moments.mu_max();
            let points: Vec<f64> = tangent_fractions.iter().map(|f| f * mu_max).collect();
            let utility =
                build_utility_tangents(mu_max, *alpha, &points).map_err(|e| e.to_string())?;
            let instance = Instance {
                moments: moments.clone(),
                ambiguity: UncertaintySet {
                    kappa1: *kappa1,
                    kappa2: *kappa2,
                },
                utility,
                gamma: gamma_scaled / (n as f64).sqrt(),
                k: *k,
            };
            cutting_plane_solve(&instance, solver, None).map_err(|e| e.to_string())
        }
        Strategy::MeanVariance {
            k,
            required_return,
            gamma_mv,
        } => {
            let spec = MeanVarianceSpec {
                required_return: required_return.unwrap_or_else(|| first_quartile_return(moments)),
                moments: moments.clone(),
                k: *k,
                gamma_mv: *gamma_mv,
            };
            solve_mean_variance(&spec, solver).map_err(|e| e.to_string())
        }
    }
}

/// Runs the rolling evaluation. Each window trains on `train_len`
/// periods, holds the solved weights for the next `test_len` periods, and
/// advances by `step`; windows that would overrun the data are skipped. A
/// failed solve stops the run and flags the report partial, keeping the
/// windows already completed.
pub fn rolling_backtest(
    returns: &ReturnMatrix,
    config: &BacktestConfig,
) -> Result<BacktestReport, BacktestError> {
    if config.train_len < 1 || config.test_len < 1 || config.step < 1 {
        return Err(BacktestError::DegenerateWindows);
    }
    let m = returns.n_periods();
    let need = config.train_len + config.test_len;
    if m < need {
        return Err(BacktestError::InsufficientData { have: m, need });
    }
    let start = Instant::now();
    let mut report = BacktestReport {
        returns: Vec::new(),
        cumulative: 1.0,
        windows: Vec::new(),
        wall_time_s: 0.0,
        partial: false,
        failure: None,
    };
    let mut train_start = 0;
    while train_start + need <= m {
        let test_start = train_start + config.train_len;
        let window_result = estimate_moments(&returns.window(train_start, config.train_len))
            .map_err(|e| e.to_string())
            .and_then(|moments| solve_window(&config.strategy, &moments, &config.solver));
        let solved = match window_result {
            Ok(s) => s,
            Err(message) => {
                report.partial = true;
                report.failure = Some(format!("window at period {train_start}: {message}"));
                break;
            }
        };
        let weights = solved.portfolio.weights().to_vec();
        for p in 0..config.test_len {
            let row = returns.row(test_start + p);
            let realized: f64 = row.iter().zip(&weights).map(|(xi, w)| xi * w).sum();
            report.returns.push(realized);
        }
        report.windows.push(WindowRecord {
            train_start,
            test_start,
            selection: solved.selection.indices().to_vec(),
            weights,
            objective: solved.objective,
            solve_time_s: solved.wall_time_s,
        });
        train_start += config.step;
    }
    report.cumulative = cumulative_return(&report.returns);
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}
