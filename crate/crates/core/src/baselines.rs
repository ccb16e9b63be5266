//! The cardinality-constrained mean-variance comparator.
//!
//! Minimizes xᵀΣ̂x over long-only portfolios that reach a required mean
//! return, with the support confined to at most k assets. The selection
//! search reuses the cutting-plane engine: each candidate selection is
//! priced by a convex quadratic program on its support, and the program's
//! multipliers yield a valid underestimating cut for every other
//! selection. Unlike the robust objective, a selection here can be
//! infeasible — when every selected asset's mean falls short of the
//! target, the selection is excluded outright with a no-good row.
//!
//! Also provides the lower-quartile return rule used to pick the target
//! from the data itself.

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::conic::{self, Cone, ConeProgram, IpmSettings, SolveStatus};
use crate::lower_level::{Cut, LowerLevelError};
use crate::model::{ModelError, Moments, Portfolio, Selection};
use crate::numerics::{Cholesky, SymMatrix};
use crate::upper_level::{
    run_engine, CutPlaneConfig, EngineRun, Priced, SolveResult, UpperLevelError,
};

/// The mean-variance problem: minimize portfolio variance subject to a
/// floor on expected return and a cardinality cap on the support.
#[derive(Debug, Clone)]
pub struct MeanVarianceSpec {
    pub moments: Moments,
    /// The portfolio's mean return must reach this value.
    pub required_return: f64,
    /// At most this many assets may carry weight.
    pub k: usize,
    /// Optional ridge added to the covariance, `x ↦ xᵀ(Σ̂ + γI)x`.
    /// Default none: the plain model has no regularizer.
    pub gamma_mv: Option<f64>,
}

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(
        "required return {required} exceeds every asset mean (max {max_mean}): \
         no selection is feasible"
    )]
    GloballyInfeasible { required: f64, max_mean: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Upper(#[from] UpperLevelError),
}

/// Lower quartile of the mean-return entries, by inclusive linear
/// interpolation: the value at fractional rank 0.25·(N−1) on the sorted
/// entries. Used as a data-driven default for the required return.
pub fn first_quartile_return(moments: &Moments) -> f64 {
    let mut mu = moments.mean().to_vec();
    assert!(!mu.is_empty(), "quartile of an empty mean vector");
    mu.sort_by(f64::total_cmp);
    let rank = 0.25 * (mu.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    mu[lo] + (rank - lo as f64) * (mu[hi] - mu[lo])
}

/// Variance QP outcome on one support: full-dimension weights, objective
/// value, and the duality cut that underestimates every other selection.
struct SupportQp {
    weights: Vec<f64>,
    value: f64,
    cut: Cut,
}

/// Solves the variance QP on the given support and assembles the cut.
///
/// Feasibility is decided in closed form first: on the simplex the best
/// attainable mean is the largest selected entry, so the program is
/// feasible exactly when that entry reaches the target; otherwise `None`.
///
/// The cut comes from the program's multipliers: with ρ on the return row
/// and π on the budget row, the quantity ν_n = max(ρ·μ̂_n + π − 2(Mx)_n, 0)
/// prices the bound x_n ≤ z_n for an asset outside the support, and the
/// value function of the QP satisfies f(z) ≥ f(ẑ) − Σ_n ν_n (z_n − ẑ_n)
/// for every selection z by convexity in the right-hand side.
fn support_qp(
    mat: &SymMatrix,
    mu: &[f64],
    required: f64,
    sel: &Selection,
    settings: &IpmSettings,
) -> Result<Option<SupportQp>, UpperLevelError> {
    let idx = sel.indices();
    if !idx.iter().any(|&i| mu[i] >= required) {
        return Ok(None);
    }
    let m = idx.len();
    let chol = Cholesky::factor(&mat.principal_submatrix(idx))
        .expect("principal submatrices of a positive definite matrix are positive definite");

    let mut prog = ConeProgram::new();
    let b_q = prog.add_block(Cone::RotatedSoc(2 + m));
    let b_x = prog.add_block(Cone::NonNeg(m));
    let b_s = prog.add_block(Cone::NonNeg(1));
    prog.add_objective(prog.var(b_q, 0), 1.0);
    prog.add_row(&[(prog.var(b_q, 1), 1.0)], 1.0);
    for j in 0..m {
        // The head pair (u, v) with v = 1 dominates ‖w‖² = ‖Lᵀx‖² = xᵀMx.
        let mut terms = vec![(prog.var(b_q, 2 + j), 1.0)];
        for i in j..m {
            let l = chol.factor_entry(i, j);
            if l != 0.0 {
                terms.push((prog.var(b_x, i), -l));
            }
        }
        prog.add_row(&terms, 0.0);
    }
    let budget: Vec<(usize, f64)> = (0..m).map(|i| (prog.var(b_x, i), 1.0)).collect();
    let row_budget = prog.add_row(&budget, 1.0);
    let mut ret: Vec<(usize, f64)> = idx
        .iter()
        .enumerate()
        .map(|(i, &a)| (prog.var(b_x, i), mu[a]))
        .collect();
    ret.push((prog.var(b_s, 0), -1.0));
    let row_return = prog.add_row(&ret, required);

    let sol = conic::solve(&prog, settings)?;
    if sol.status != SolveStatus::Optimal {
        return Err(UpperLevelError::Lower(LowerLevelError::SolverFailure {
            selection: idx.to_vec(),
            status: sol.status,
        }));
    }

    let x_s = sol.block(b_x);
    let total: f64 = x_s.iter().sum();
    let n = mu.len();
    let mut weights = vec![0.0; n];
    for (i, &a) in idx.iter().enumerate() {
        weights[a] = x_s[i].max(0.0) / total;
    }
    let value = mat.quad_form(&weights);

    let rho = sol.dual_y[row_return].max(0.0);
    let pi = sol.dual_y[row_budget];
    let mx = mat.mat_vec(&weights);
    let mut gradient = vec![0.0; n];
    for a in 0..n {
        if !sel.contains(a) {
            let nu = (rho * mu[a] + pi - 2.0 * mx[a]).max(0.0);
            gradient[a] = -nu;
        }
    }
    Ok(Some(SupportQp {
        weights,
        value,
        cut: Cut {
            anchor: sel.clone(),
            value,
            gradient,
        },
    }))
}

/// Minimizes portfolio variance over all selections of at most k assets
/// whose best portfolio reaches the required return, to within
/// `config.epsilon`. Selections are priced by support QPs; feasible ones
/// contribute duality cuts, infeasible ones are excluded by no-good rows.
/// Runs in either master mode; `SolveResult.cuts` counts both families.
pub fn solve_mean_variance(
    spec: &MeanVarianceSpec,
    config: &CutPlaneConfig,
) -> Result<SolveResult, BaselineError> {
    let mu = spec.moments.mean();
    let n = mu.len();
    if spec.k < 1 || spec.k > n {
        return Err(ModelError::CardinalityOutOfRange { k: spec.k, n }.into());
    }
    if let Some(g) = spec.gamma_mv {
        if !(g > 0.0) {
            return Err(ModelError::NonPositiveGamma(g).into());
        }
    }
    let max_mean = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // A NaN target fails this comparison too and is rejected here.
    if !(spec.required_return <= max_mean) {
        return Err(BaselineError::GloballyInfeasible {
            required: spec.required_return,
            max_mean,
        });
    }
    let mut mat = spec.moments.covariance().clone();
    if let Some(g) = spec.gamma_mv {
        for i in 0..n {
            mat.add(i, i, g);
        }
    }
    Cholesky::factor(&mat).map_err(ModelError::from)?;

    let start = Instant::now();
    let deadline = start.checked_add(config.time_limit);

    // Enlarging the support can only lower the optimum, so the
    // full-universe QP floors every selection's value. It is feasible
    // because the target was just checked against the best mean.
    let full = support_qp(&mat, mu, spec.required_return, &Selection::all(n), &config.ipm)?
        .expect("the full universe reaches the required return");
    let floor = full.value;

    let mut memo: BTreeMap<Selection, Option<SupportQp>> = BTreeMap::new();
    memo.insert(Selection::all(n), Some(full));

    let run = EngineRun {
        n,
        k: spec.k,
        floor,
        config,
        deadline,
    };
    let mut price = |sel: &Selection| -> Result<Priced, UpperLevelError> {
        if !memo.contains_key(sel) {
            let qp = support_qp(&mat, mu, spec.required_return, sel, &config.ipm)?;
            memo.insert(sel.clone(), qp);
        }
        Ok(match &memo[sel] {
            Some(qp) => Priced::Feasible {
                cut: qp.cut.clone(),
            },
            None => Priced::Infeasible,
        })
    };
    let outcome = run_engine(&run, &mut price, &mut |_| {})?;

    let z_hat = match outcome.incumbent {
        Some(sel) => sel,
        // Reachable only when the budget expires before any feasible
        // candidate was priced: take the best-mean asset plus the lowest
        // indices, which is feasible by the global check above.
        None => {
            let best = (0..n).max_by(|&a, &b| mu[a].total_cmp(&mu[b])).unwrap();
            let mut indices = vec![best];
            indices.extend((0..n).filter(|&i| i != best).take(spec.k - 1));
            Selection::from_indices(n, &indices).expect("fallback indices are in range")
        }
    };
    if !memo.contains_key(&z_hat) {
        let qp = support_qp(&mat, mu, spec.required_return, &z_hat, &config.ipm)?;
        memo.insert(z_hat.clone(), qp);
    }
    let chosen = memo[&z_hat]
        .as_ref()
        .expect("the chosen selection was priced feasible");
    let objective = chosen.value;
    let portfolio = Portfolio::new(chosen.weights.clone()).map_err(ModelError::from)?;
    let gap = (outcome.upper.min(objective) - outcome.lower).max(0.0);
    Ok(SolveResult {
        selection: z_hat,
        portfolio,
        objective,
        gap,
        iterations: outcome.iterations,
        cuts: outcome.constraints,
        nodes: outcome.nodes,
        wall_time_s: start.elapsed().as_secs_f64(),
        mode: config.mode,
        termination: outcome.termination,
    })
}
