//! The worst-case loss of a fixed asset selection, and everything derived
//! from it.
//!
//! For a selection `z` of `k` assets, the worst-case expected loss is a
//! semidefinite program. Its dual can be posed entirely in the selected
//! coordinates — matrices of dimension k+1 instead of N+1 — because the
//! dropped coordinates of an optimal dual solution are recoverable from
//! the covariance's block structure ("lifting"). This module builds and
//! solves that reduced dual, lifts its solution back to full dimension
//! with a mandatory feasibility certificate, turns the lifted multipliers
//! into subgradient cuts for the selection master, and recovers the actual
//! portfolio weights by solving the primal on the support.
//!
//! The full-dimension dual is also available (`solve_full_dual`) as an
//! independent cross-check and for measuring what the reduction buys.

use crate::conic::{self, Cone, ConeProgram, ConicSolution, IpmSettings, SolveStatus};
use crate::model::{Instance, ModelError, Portfolio, Selection};
use crate::numerics::{Cholesky, NumericsError, SymMatrix};
use thiserror::Error;

/// Base feasibility tolerance every lifted solution must certify to, scaled
/// by the instance's data magnitude ([`lift_gate`]): the interior-point
/// solver converges to a relative accuracy, so residuals grow linearly with
/// the size of the moment entries and an absolute gate would reject
/// well-converged solutions on e.g. percent-squared covariance units.
const LIFT_TOL: f64 = 1e-7;

fn lift_gate(instance: &Instance) -> f64 {
    let sigma_max = instance.moments.covariance().max_abs();
    let slope_max = instance
        .utility
        .pieces()
        .iter()
        .map(|&(a, b)| a.abs().max(b.abs()))
        .fold(0.0, f64::max);
    let scale = instance
        .moments
        .mu_max()
        .abs()
        .max(instance.ambiguity.kappa2 * sigma_max)
        .max(slope_max);
    LIFT_TOL * (1.0 + scale)
}

/// Mixture weights at or below this are treated as the vanished-piece case:
/// the piece's matrix block and vector are zeroed instead of dividing by a
/// noise-level weight when completing the matrix blocks.
const ETA_FLOOR: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LowerLevelError {
    #[error("selection is over {got} assets but the instance has {expected}")]
    UniverseMismatch { got: usize, expected: usize },
    #[error("selection holds {got} assets, the instance requires exactly {expected}")]
    WrongCardinality { got: usize, expected: usize },
    #[error("conic solve for selection {selection:?} ended with status {status:?}")]
    SolverFailure {
        selection: Vec<usize>,
        status: SolveStatus,
    },
    #[error("completed dual solution failed certification: {constraint} off by {violation:.3e}")]
    LiftInfeasible {
        constraint: &'static str,
        violation: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Program(#[from] conic::ProgramError),
}

/// Optimal dual multipliers of the worst-case-loss program, in the
/// dimension it was solved in (k for the reduced program, N for the full
/// one). One matrix block and vector per utility piece, plus the shared
/// mean multiplier `lambda_z` and inequality offset `pi`.
#[derive(Debug, Clone)]
pub struct LowerDualSolution {
    pub omega_z: Vec<f64>,
    pub b_zz: Vec<SymMatrix>,
    pub beta_z: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
    pub lambda_z: Vec<f64>,
    pub pi: f64,
    pub f_prime: f64,
}

/// A reduced dual solution completed to full dimension: feasible for the
/// N-dimensional dual with the same objective value, certified by
/// [`certify_lift`]. `omega_bar` is the minimum-norm completion, which is
/// what makes the cuts built from it strong.
#[derive(Debug, Clone)]
pub struct LiftedDualSolution {
    pub omega_bar: Vec<f64>,
    pub b_bar: Vec<SymMatrix>,
    pub beta_bar: Vec<Vec<f64>>,
    pub eta: Vec<f64>,
    pub lambda_bar: Vec<f64>,
    pub pi: f64,
}

/// Primal solution of the worst-case-loss program on a support: the
/// portfolio (embedded back to length N) and the inner-problem multipliers,
/// which live in the support dimension.
#[derive(Debug, Clone)]
pub struct LowerPrimalSolution {
    /// Portfolio over all N assets; zero off the support.
    pub x: Portfolio,
    /// Multiplier blocks of the moment constraints, support-dimensional:
    /// `q_mat`/`q_vec`/`r` price the second-moment bound through the
    /// piecewise losses, `p_mat`/`p_vec`/`s` price the mean ellipsoid.
    pub p_mat: SymMatrix,
    pub q_mat: SymMatrix,
    pub p_vec: Vec<f64>,
    pub q_vec: Vec<f64>,
    pub r: f64,
    pub s: f64,
    pub objective: f64,
}

/// A linear underestimator of the selection objective: for every selection
/// `z`, f(z) ≥ value + gradientᵀ(z − anchor).
#[derive(Debug, Clone)]
pub struct Cut {
    pub anchor: Selection,
    pub value: f64,
    pub gradient: Vec<f64>,
}

impl Cut {
    /// The bound this cut imposes at another selection.
    pub fn bound_at(&self, z: &Selection) -> f64 {
        let in_z: f64 = z.indices().iter().map(|&i| self.gradient[i]).sum();
        let in_anchor: f64 = self
            .anchor
            .indices()
            .iter()
            .map(|&i| self.gradient[i])
            .sum();
        self.value + in_z - in_anchor
    }
}

/// Worst violations of a completed dual solution, one field per constraint
/// family. Inequalities report their most negative slack or eigenvalue,
/// equalities their largest absolute residual.
#[derive(Debug, Clone, Copy)]
pub struct LiftReport {
    /// min over assets of ω̄ − Σ slope·β̄ − π (must be ≥ 0).
    pub ineq_slack_min: f64,
    /// Largest entry error in the second-moment balance equation.
    pub second_moment_residual: f64,
    /// Largest entry error in Σβ̄ = λ̄ + μ̂.
    pub mean_residual: f64,
    /// |Ση − 1|.
    pub mass_residual: f64,
    /// Smallest eigenvalue over the per-piece blocks [[B̄, β̄], [β̄ᵀ, η]].
    pub piece_min_eig: f64,
    /// Smallest eigenvalue of [[Σ̂, λ̄], [λ̄ᵀ, κ1]].
    pub ellipsoid_min_eig: f64,
    /// Smallest eigenvalue of κ2Σ̂ − Σ (1/η)(β̄−ημ̂)(β̄−ημ̂)ᵀ over active
    /// pieces — the slack that lets the matrix completion absorb its
    /// remainder.
    pub completion_min_eig: f64,
}

impl LiftReport {
    /// Name and magnitude of the worst violation (0 when fully feasible).
    pub fn worst(&self) -> (&'static str, f64) {
        let entries = [
            ("piecewise-loss inequality", (-self.ineq_slack_min).max(0.0)),
            ("second-moment equation", self.second_moment_residual),
            ("mean equation", self.mean_residual),
            ("mixture-weight equation", self.mass_residual),
            ("piece block semidefiniteness", (-self.piece_min_eig).max(0.0)),
            (
                "mean-ellipsoid block semidefiniteness",
                (-self.ellipsoid_min_eig).max(0.0),
            ),
            ("completion remainder", (-self.completion_min_eig).max(0.0)),
        ];
        entries
            .into_iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
    }

    pub fn within(&self, tol: f64) -> bool {
        self.worst().1 <= tol
    }
}

fn check_selection(instance: &Instance, z: &Selection) -> Result<(), LowerLevelError> {
    if z.n_assets() != instance.n_assets() {
        return Err(LowerLevelError::UniverseMismatch {
            got: z.n_assets(),
            expected: instance.n_assets(),
        });
    }
    if z.cardinality() != instance.k {
        return Err(LowerLevelError::WrongCardinality {
            got: z.cardinality(),
            expected: instance.k,
        });
    }
    Ok(())
}

fn support_moments(instance: &Instance, z: &Selection) -> (Vec<f64>, SymMatrix) {
    let idx = z.indices();
    let mu = idx.iter().map(|&i| instance.moments.mean()[i]).collect();
    let sigma = instance.moments.covariance().principal_submatrix(idx);
    (mu, sigma)
}

/// Block indices of a built dual program, for solution extraction.
struct DualBlocks {
    omega: usize,
    pi: usize,
    slack: usize,
    pieces: usize,
    gram: usize,
    /// Whether the mean-ellipsoid constraint was encoded as a whitened
    /// second-order cone instead of a pinned PSD block.
    soc_gram: bool,
}

/// Builds the dual of the worst-case-loss program over data of dimension
/// `d`, maximizing (negated into the solver's minimization form)
///
/// −(γ/2)·Σ_{support} ω² − Σ_ℓ η⁽ℓ⁾b⁽ℓ⁾ + π
///
/// subject to ω ≥ Σ slope·β + π on the support coordinates, the moment
/// balance equations, and semidefiniteness of the per-piece blocks and the
/// mean-ellipsoid block. Only support coordinates of ω are variables: the
/// rest are absent from the objective and their inequalities never bind,
/// so they are reconstructed after the solve instead.
///
/// The mean-ellipsoid block [[Σ̂, λ], [λᵀ, κ1]] has all entries but λ
/// fixed. `soc_gram` replaces it by the equivalent ‖L⁻¹λ‖ ≤ √κ1 with
/// Σ̂ = LLᵀ, trading d(d+1)/2 pinning rows for one — the difference
/// between minutes and hours at d ≈ 100. The reduced program (d = k,
/// small) keeps the plain PSD form.
fn build_dual_program(
    mu: &[f64],
    sigma: &SymMatrix,
    support: &[usize],
    pieces: &[(f64, f64)],
    gamma: f64,
    kappa1: f64,
    kappa2: f64,
    soc_gram: bool,
) -> Result<(ConeProgram, DualBlocks), LowerLevelError> {
    let d = mu.len();
    let m = support.len();
    let l = pieces.len();
    let mut p = ConeProgram::new();
    let omega = p.add_block(Cone::Free(m));
    let pi = p.add_block(Cone::Free(1));
    let epi = p.add_block(Cone::RotatedSoc(m + 2));
    let slack = p.add_block(Cone::NonNeg(m));
    let first_piece = p.add_block(Cone::Psd(d + 1));
    for _ in 1..l {
        p.add_block(Cone::Psd(d + 1));
    }
    let gram = if soc_gram {
        p.add_block(Cone::Soc(d + 1))
    } else {
        p.add_block(Cone::Psd(d + 1))
    };

    p.add_objective(p.var(epi, 0), gamma / 2.0);
    for (piece, &(_, b)) in pieces.iter().enumerate() {
        p.add_objective_psd(first_piece + piece, d, d, b);
    }
    p.add_objective(p.var(pi, 0), -1.0);

    // Epigraph t ≥ ‖ω‖²: tie the rotated cone's vector part to ω, pin its
    // second head coordinate to 1.
    for j in 0..m {
        p.add_row(&[(p.var(omega, j), 1.0), (p.var(epi, 2 + j), -1.0)], 0.0);
    }
    p.add_row(&[(p.var(epi, 1), 1.0)], 1.0);

    // ω_i − Σ_ℓ a⁽ℓ⁾β_i⁽ℓ⁾ − π − s_i = 0 on the support.
    for (j, &sj) in support.iter().enumerate() {
        let mut terms = vec![
            (p.var(omega, j), 1.0),
            (p.var(pi, 0), -1.0),
            (p.var(slack, j), -1.0),
        ];
        for (piece, &(a, _)) in pieces.iter().enumerate() {
            let (coord, factor) = p.psd_entry(first_piece + piece, sj, d);
            terms.push((coord, -a * factor));
        }
        p.add_row(&terms, 0.0);
    }

    // Σ_ℓ B_ij − μ_i·Σβ_j − μ_j·Σβ_i = κ2Σ_ij − μ_iμ_j, upper triangle.
    // On the diagonal the two β terms merge into −2μ_iΣβ_i.
    for i in 0..d {
        for j in i..d {
            let mut terms = Vec::with_capacity(3 * l);
            for piece in 0..l {
                let block = first_piece + piece;
                let (cb, fb) = p.psd_entry(block, i, j);
                terms.push((cb, fb));
                let (cj, fj) = p.psd_entry(block, j, d);
                terms.push((cj, -mu[i] * fj));
                let (ci, fi) = p.psd_entry(block, i, d);
                terms.push((ci, -mu[j] * fi));
            }
            p.add_row(&terms, kappa2 * sigma.get(i, j) - mu[i] * mu[j]);
        }
    }

    // Σ_ℓ β_i⁽ℓ⁾ − λ_i = μ_i, with λ either a PSD border column or L·u.
    let chol = if soc_gram {
        Some(Cholesky::factor(sigma)?)
    } else {
        None
    };
    for i in 0..d {
        let mut terms = Vec::with_capacity(l + 1 + i);
        for piece in 0..l {
            let (coord, factor) = p.psd_entry(first_piece + piece, i, d);
            terms.push((coord, factor));
        }
        match &chol {
            Some(chol) => {
                for j in 0..=i {
                    terms.push((p.var(gram, 1 + j), -chol.factor_entry(i, j)));
                }
            }
            None => {
                let (coord, factor) = p.psd_entry(gram, i, d);
                terms.push((coord, -factor));
            }
        }
        p.add_row(&terms, mu[i]);
    }

    // Mixture weights sum to one.
    let eta_terms: Vec<(usize, f64)> = (0..l)
        .map(|piece| {
            let (coord, factor) = p.psd_entry(first_piece + piece, d, d);
            (coord, factor)
        })
        .collect();
    p.add_row(&eta_terms, 1.0);

    // Fixed part of the mean-ellipsoid block.
    if soc_gram {
        p.add_row(&[(p.var(gram, 0), 1.0)], kappa1.sqrt());
    } else {
        for i in 0..d {
            for j in i..d {
                let (coord, factor) = p.psd_entry(gram, i, j);
                p.add_row(&[(coord, factor)], sigma.get(i, j));
            }
        }
        let (corner, factor) = p.psd_entry(gram, d, d);
        p.add_row(&[(corner, factor)], kappa1);
    }

    let blocks = DualBlocks {
        omega,
        pi,
        slack,
        pieces: first_piece,
        gram,
        soc_gram,
    };
    Ok((p, blocks))
}

fn reduced_dual_parts(
    instance: &Instance,
    z: &Selection,
) -> Result<(ConeProgram, DualBlocks), LowerLevelError> {
    instance.validate()?;
    check_selection(instance, z)?;
    let (mu_s, sigma_ss) = support_moments(instance, z);
    let k = z.cardinality();
    let support: Vec<usize> = (0..k).collect();
    build_dual_program(
        &mu_s,
        &sigma_ss,
        &support,
        instance.utility.pieces(),
        instance.gamma,
        instance.ambiguity.kappa1,
        instance.ambiguity.kappa2,
        false,
    )
}

/// The selection-dimension dual as a cone program: every matrix block has
/// dimension k+1 regardless of N.
pub fn build_reduced_dual(
    instance: &Instance,
    z: &Selection,
) -> Result<ConeProgram, LowerLevelError> {
    reduced_dual_parts(instance, z).map(|(program, _)| program)
}

fn ensure_optimal(
    sol: ConicSolution,
    z: &Selection,
) -> Result<ConicSolution, LowerLevelError> {
    if sol.status == SolveStatus::Optimal {
        Ok(sol)
    } else {
        Err(LowerLevelError::SolverFailure {
            selection: z.indices().to_vec(),
            status: sol.status,
        })
    }
}

/// Pulls the dual multipliers out of a solved reduced program of data
/// dimension `d`, where every coordinate is on the support.
fn extract_dual(sol: &ConicSolution, blocks: &DualBlocks, d: usize, l: usize) -> LowerDualSolution {
    debug_assert!(!blocks.soc_gram);
    let body: Vec<usize> = (0..d).collect();
    let mut b_zz = Vec::with_capacity(l);
    let mut beta_z = Vec::with_capacity(l);
    let mut eta = Vec::with_capacity(l);
    for piece in 0..l {
        let block = sol.psd_block(blocks.pieces + piece);
        b_zz.push(block.principal_submatrix(&body));
        beta_z.push((0..d).map(|i| block.get(i, d)).collect());
        eta.push(block.get(d, d));
    }
    let gram = sol.psd_block(blocks.gram);
    let lambda_z = (0..d).map(|i| gram.get(i, d)).collect();

    LowerDualSolution {
        omega_z: sol.block(blocks.omega).to_vec(),
        b_zz,
        beta_z,
        eta,
        lambda_z,
        pi: sol.block(blocks.pi)[0],
        f_prime: -sol.primal_objective,
    }
}

/// Solves the reduced dual for `z`. The returned multipliers and value are
/// in the selection's dimension; identical inputs give bit-identical
/// outputs.
pub fn solve_lower(
    instance: &Instance,
    z: &Selection,
    settings: &IpmSettings,
) -> Result<LowerDualSolution, LowerLevelError> {
    let (program, blocks) = reduced_dual_parts(instance, z)?;
    let sol = ensure_optimal(conic::solve(&program, settings)?, z)?;
    Ok(extract_dual(
        &sol,
        &blocks,
        z.cardinality(),
        instance.utility.num_pieces(),
    ))
}

/// Solves the dual at full dimension N — no reduction, matrices of
/// dimension N+1 — as a cross-check on the reduced path and a measure of
/// what the reduction saves. For the all-assets selection this is exactly
/// the reduced program, so both paths agree bit-for-bit there.
pub fn solve_full_dual(
    instance: &Instance,
    z: &Selection,
    settings: &IpmSettings,
) -> Result<LowerDualSolution, LowerLevelError> {
    if z.is_full() {
        return solve_lower(instance, z, settings);
    }
    instance.validate()?;
    check_selection(instance, z)?;
    let n = instance.n_assets();
    let pieces = instance.utility.pieces();
    let (program, blocks) = build_dual_program(
        instance.moments.mean(),
        instance.moments.covariance(),
        z.indices(),
        pieces,
        instance.gamma,
        instance.ambiguity.kappa1,
        instance.ambiguity.kappa2,
        true,
    )?;
    let sol = ensure_optimal(conic::solve(&program, settings)?, z)?;

    let l = pieces.len();
    let body: Vec<usize> = (0..n).collect();
    let mut b_zz = Vec::with_capacity(l);
    let mut beta_z: Vec<Vec<f64>> = Vec::with_capacity(l);
    let mut eta = Vec::with_capacity(l);
    for piece in 0..l {
        let block = sol.psd_block(blocks.pieces + piece);
        b_zz.push(block.principal_submatrix(&body));
        beta_z.push((0..n).map(|i| block.get(i, n)).collect());
        eta.push(block.get(n, n));
    }
    let chol = Cholesky::factor(instance.moments.covariance())?;
    let u = &sol.block(blocks.gram)[1..];
    let lambda_z = (0..n)
        .map(|i| (0..=i).map(|j| chol.factor_entry(i, j) * u[j]).sum())
        .collect();
    let pi = sol.block(blocks.pi)[0];

    let omega_block = sol.block(blocks.omega);
    let mut omega = vec![0.0; n];
    for (j, &sj) in z.indices().iter().enumerate() {
        omega[sj] = omega_block[j];
    }
    for i in z.complement() {
        let tied: f64 = pieces
            .iter()
            .enumerate()
            .map(|(piece, &(a, _))| a * beta_z[piece][i])
            .sum();
        omega[i] = (tied + pi).max(0.0);
    }

    Ok(LowerDualSolution {
        omega_z: omega,
        b_zz,
        beta_z,
        eta,
        lambda_z,
        pi,
        f_prime: -sol.primal_objective,
    })
}

/// Completes a reduced dual solution to full dimension.
///
/// The vector parts extend through the covariance's cross blocks:
/// β̄ off-support is Σ̂_CS Σ̂_SS⁻¹(β − ημ̂_S) + ημ̂_C, λ̄ likewise, and ω̄
/// off-support is the minimum-norm choice [Σ slope·β̄ + π]₊. The matrix
/// blocks are rebuilt as (1/η)β̄β̄ᵀ per active piece — vanished pieces
/// (η ≤ 1e-9) are zeroed — with the balance equation's remainder, itself
/// positive semidefinite, absorbed into the first piece's block. The
/// result is certified feasible to a data-scaled tolerance before being
/// returned.
pub fn lift(
    instance: &Instance,
    z: &Selection,
    sol: &LowerDualSolution,
) -> Result<LiftedDualSolution, LowerLevelError> {
    check_selection(instance, z)?;
    let n = instance.n_assets();
    let k = z.cardinality();
    let l = sol.eta.len();
    debug_assert_eq!(sol.omega_z.len(), k);
    let support = z.indices();
    let complement = z.complement();
    let mean = instance.moments.mean();
    let cov = instance.moments.covariance();
    let (mu_s, sigma_ss) = support_moments(instance, z);
    let chol = Cholesky::factor(&sigma_ss)?;

    let cross = |weights: &[f64], c: usize| -> f64 {
        support
            .iter()
            .enumerate()
            .map(|(j, &sj)| cov.get(c, sj) * weights[j])
            .sum()
    };

    let mut beta_bar = vec![vec![0.0; n]; l];
    for piece in 0..l {
        let eta = sol.eta[piece];
        if eta <= ETA_FLOOR {
            continue;
        }
        for (j, &sj) in support.iter().enumerate() {
            beta_bar[piece][sj] = sol.beta_z[piece][j];
        }
        let centered: Vec<f64> = (0..k)
            .map(|j| sol.beta_z[piece][j] - eta * mu_s[j])
            .collect();
        let weights = chol.solve(&centered);
        for &c in &complement {
            beta_bar[piece][c] = cross(&weights, c) + eta * mean[c];
        }
    }

    let lambda_weights = chol.solve(&sol.lambda_z);
    let mut lambda_bar = vec![0.0; n];
    for (j, &sj) in support.iter().enumerate() {
        lambda_bar[sj] = sol.lambda_z[j];
    }
    for &c in &complement {
        lambda_bar[c] = cross(&lambda_weights, c);
    }

    let pieces = instance.utility.pieces();
    let mut omega_bar = vec![0.0; n];
    for (j, &sj) in support.iter().enumerate() {
        omega_bar[sj] = sol.omega_z[j];
    }
    for &c in &complement {
        let tied: f64 = pieces
            .iter()
            .enumerate()
            .map(|(piece, &(a, _))| a * beta_bar[piece][c])
            .sum();
        omega_bar[c] = (tied + sol.pi).max(0.0);
    }

    let beta_sum: Vec<f64> = (0..n)
        .map(|i| beta_bar.iter().map(|b| b[i]).sum())
        .collect();
    let kappa2 = instance.ambiguity.kappa2;
    let mut remainder = SymMatrix::from_fn(n, |i, j| {
        kappa2 * cov.get(i, j) - mean[i] * mean[j]
            + mean[i] * beta_sum[j]
            + beta_sum[i] * mean[j]
    });
    let mut b_bar = vec![SymMatrix::zeros(n); l];
    for piece in 0..l {
        let eta = sol.eta[piece];
        if eta <= ETA_FLOOR {
            continue;
        }
        b_bar[piece].add_outer(1.0 / eta, &beta_bar[piece]);
        remainder.add_scaled(-1.0, &b_bar[piece]);
    }
    b_bar[0].add_scaled(1.0, &remainder);

    let lifted = LiftedDualSolution {
        omega_bar,
        b_bar,
        beta_bar,
        eta: sol.eta.clone(),
        lambda_bar,
        pi: sol.pi,
    };
    let report = certify_lift(instance, &lifted)?;
    if report.within(lift_gate(instance)) {
        Ok(lifted)
    } else {
        let (constraint, violation) = report.worst();
        Err(LowerLevelError::LiftInfeasible {
            constraint,
            violation,
        })
    }
}

/// Recomputes every full-dimension dual constraint on a completed solution
/// from the instance data alone. `lift` calls this internally; it is
/// public so tests can certify against independently reconstructed data.
pub fn certify_lift(
    instance: &Instance,
    lifted: &LiftedDualSolution,
) -> Result<LiftReport, LowerLevelError> {
    let n = instance.n_assets();
    let l = lifted.eta.len();
    let mean = instance.moments.mean();
    let cov = instance.moments.covariance();
    let pieces = instance.utility.pieces();
    let kappa1 = instance.ambiguity.kappa1;
    let kappa2 = instance.ambiguity.kappa2;

    let mut ineq_slack_min = f64::INFINITY;
    for i in 0..n {
        let tied: f64 = pieces
            .iter()
            .enumerate()
            .map(|(piece, &(a, _))| a * lifted.beta_bar[piece][i])
            .sum();
        ineq_slack_min = ineq_slack_min.min(lifted.omega_bar[i] - tied - lifted.pi);
    }

    let beta_sum: Vec<f64> = (0..n)
        .map(|i| lifted.beta_bar.iter().map(|b| b[i]).sum())
        .collect();
    let mut second_moment_residual = 0.0f64;
    for i in 0..n {
        for j in i..n {
            let lhs: f64 = lifted.b_bar.iter().map(|b| b.get(i, j)).sum();
            let rhs = kappa2 * cov.get(i, j) - mean[i] * mean[j]
                + mean[i] * beta_sum[j]
                + beta_sum[i] * mean[j];
            second_moment_residual = second_moment_residual.max((lhs - rhs).abs());
        }
    }

    let mut mean_residual = 0.0f64;
    for i in 0..n {
        mean_residual =
            mean_residual.max((beta_sum[i] - lifted.lambda_bar[i] - mean[i]).abs());
    }

    let mass_residual = (lifted.eta.iter().sum::<f64>() - 1.0).abs();

    let mut piece_min_eig = f64::INFINITY;
    for piece in 0..l {
        let block = SymMatrix::from_fn(n + 1, |i, j| match (i == n, j == n) {
            (false, false) => lifted.b_bar[piece].get(i, j),
            (false, true) => lifted.beta_bar[piece][i],
            (true, false) => lifted.beta_bar[piece][j],
            (true, true) => lifted.eta[piece],
        });
        piece_min_eig = piece_min_eig.min(crate::numerics::min_eigenvalue(&block)?);
    }

    let ellipsoid = SymMatrix::from_fn(n + 1, |i, j| match (i == n, j == n) {
        (false, false) => cov.get(i, j),
        (false, true) => lifted.lambda_bar[i],
        (true, false) => lifted.lambda_bar[j],
        (true, true) => kappa1,
    });
    let ellipsoid_min_eig = crate::numerics::min_eigenvalue(&ellipsoid)?;

    let mut completion = cov.scaled(kappa2);
    for piece in 0..l {
        let eta = lifted.eta[piece];
        if eta <= ETA_FLOOR {
            continue;
        }
        let centered: Vec<f64> = (0..n)
            .map(|i| lifted.beta_bar[piece][i] - eta * mean[i])
            .collect();
        completion.add_outer(-1.0 / eta, &centered);
    }
    let completion_min_eig = crate::numerics::min_eigenvalue(&completion)?;

    Ok(LiftReport {
        ineq_slack_min,
        second_moment_residual,
        mean_residual,
        mass_residual,
        piece_min_eig,
        ellipsoid_min_eig,
        completion_min_eig,
    })
}

/// Objective value of the full-dimension dual at a completed solution:
/// −(γ/2)·Σ_{i∈z} ω̄_i² − Σ_ℓ η⁽ℓ⁾b⁽ℓ⁾ + π. Off-support ω̄ entries do not
/// contribute — the selection mask multiplies them away.
pub fn dual_objective(instance: &Instance, z: &Selection, lifted: &LiftedDualSolution) -> f64 {
    let quad: f64 = z
        .indices()
        .iter()
        .map(|&i| lifted.omega_bar[i] * lifted.omega_bar[i])
        .sum();
    let mixture: f64 = instance
        .utility
        .pieces()
        .iter()
        .zip(&lifted.eta)
        .map(|(&(_, b), &eta)| eta * b)
        .sum();
    -instance.gamma / 2.0 * quad - mixture + lifted.pi
}

/// The subgradient cut anchored at `z`: gradient −(γ/2)·ω̄∘ω̄, every entry
/// nonpositive, so the cut rewards adding assets and never penalizes them.
pub fn subgradient_cut(
    instance: &Instance,
    z: &Selection,
    lifted: &LiftedDualSolution,
    f_value: f64,
) -> Cut {
    let half_gamma = instance.gamma / 2.0;
    let gradient = lifted
        .omega_bar
        .iter()
        .map(|&w| -half_gamma * w * w)
        .collect();
    Cut {
        anchor: z.clone(),
        value: f_value,
        gradient,
    }
}

/// Solves the primal worst-case-loss program on the support of `z_hat` and
/// embeds the weights into full dimension. The multiplier blocks stay in
/// the support dimension.
///
/// The program (support dimension k, minimizing) is (1/2γ)x̃ᵀx̃ +
/// (κ2Σ̂−μ̂μ̂ᵀ)•Q + r + Σ̂•P − 2μ̂ᵀp + κ1·s over x̃ on the simplex, with
/// p = −q/2 − Qμ̂ and two PSD families: per piece [[Q, q/2 + aℓx̃/2],
/// [·, r + bℓ]] and the mean block [[P, p],[pᵀ, s]].
///
/// Rather than posing this as a second cone program, the optimum is read
/// off the dual side of the reduced dual solve, whose row multipliers are
/// exactly these variables: each piece block here is a dual-slack block of
/// that solve (same Q and r for every piece, borders differing by the
/// slopes times x̃/2), the mean block is the pinned block's dual slack,
/// and x̃ is the dual slack of the inequality rows. That matters for
/// accuracy: the shared-multiplier structure makes this program's optimal
/// face degenerate, and solving it directly stalls an interior-point
/// method an order of magnitude short of the feasibility the invariants
/// need, while dual slacks of the well-behaved reduced solve are interior
/// cone points — semidefinite to machine precision — with p = −q/2 − Qμ̂
/// holding by construction.
pub fn recover_portfolio(
    instance: &Instance,
    z_hat: &Selection,
    settings: &IpmSettings,
) -> Result<LowerPrimalSolution, LowerLevelError> {
    let (program, blocks) = reduced_dual_parts(instance, z_hat)?;
    let sol = ensure_optimal(conic::solve(&program, settings)?, z_hat)?;

    let (mu_s, sigma_ss) = support_moments(instance, z_hat);
    let k = z_hat.cardinality();
    let (_, b1) = instance.utility.pieces()[0];
    let kappa1 = instance.ambiguity.kappa1;
    let kappa2 = instance.ambiguity.kappa2;
    let body: Vec<usize> = (0..k).collect();

    // x̃ multiplies the inequality rows; its dual slack is nonnegative by
    // cone membership and sums to one only to solver tolerance, so
    // normalize before building the portfolio.
    let x_raw = sol.block_dual_slack(blocks.slack).to_vec();
    let total: f64 = x_raw.iter().sum();
    let x_s: Vec<f64> = x_raw.iter().map(|v| v / total).collect();
    let mut weights = vec![0.0; instance.n_assets()];
    for (j, &sj) in z_hat.indices().iter().enumerate() {
        weights[sj] = x_s[j];
    }

    let piece_slack = sol.psd_dual_slack(blocks.pieces);
    let q_mat = piece_slack.principal_submatrix(&body);
    let r = piece_slack.get(k, k) - b1;
    let mean_slack = sol.psd_dual_slack(blocks.gram);
    let p_mat = mean_slack.principal_submatrix(&body);
    let p_vec: Vec<f64> = (0..k).map(|i| mean_slack.get(i, k)).collect();
    let s = mean_slack.get(k, k);
    let q_vec: Vec<f64> = (0..k)
        .map(|i| {
            let q_mu: f64 = (0..k).map(|j| q_mat.get(i, j) * mu_s[j]).sum();
            -2.0 * (q_mu + p_vec[i])
        })
        .collect();

    let mut objective = x_s.iter().map(|v| v * v).sum::<f64>() / (2.0 * instance.gamma)
        + r
        + kappa1 * s;
    for i in 0..k {
        objective -= 2.0 * mu_s[i] * p_vec[i];
        for j in 0..k {
            objective += (kappa2 * sigma_ss.get(i, j) - mu_s[i] * mu_s[j]) * q_mat.get(i, j)
                + sigma_ss.get(i, j) * p_mat.get(i, j);
        }
    }

    Ok(LowerPrimalSolution {
        x: Portfolio::new(weights)?,
        p_mat,
        q_mat,
        p_vec,
        q_vec,
        r,
        s,
        objective,
    })
}

/// Residuals of the six stationarity conditions tying a completed dual
/// solution to a recovered primal, with the eliminated multipliers
/// substituted back (the mean-block multiplier is Σ̂ itself, the linear one
/// is −2Σβ̄, the inequality one is ω̄ minus its tied part). Entries one and
/// four are identically zero under that substitution and reported anyway
/// for completeness.
pub fn kkt_residuals(
    instance: &Instance,
    z: &Selection,
    lifted: &LiftedDualSolution,
    primal: &LowerPrimalSolution,
) -> [f64; 6] {
    let n = instance.n_assets();
    let mean = instance.moments.mean();
    let cov = instance.moments.covariance();
    let kappa2 = instance.ambiguity.kappa2;
    let beta_sum: Vec<f64> = (0..n)
        .map(|i| lifted.beta_bar.iter().map(|b| b[i]).sum())
        .collect();

    let mut second_moment = 0.0f64;
    for i in 0..n {
        for j in i..n {
            let lhs: f64 = lifted.b_bar.iter().map(|b| b.get(i, j)).sum();
            let rhs = kappa2 * cov.get(i, j) - mean[i] * mean[j]
                + mean[i] * beta_sum[j]
                + beta_sum[i] * mean[j];
            second_moment = second_moment.max((lhs - rhs).abs());
        }
    }

    let mut mean_link = 0.0f64;
    for i in 0..n {
        mean_link = mean_link.max(2.0 * (beta_sum[i] - mean[i] - lifted.lambda_bar[i]).abs());
    }

    let mass = (1.0 - lifted.eta.iter().sum::<f64>()).abs();

    let mut gradient_x = 0.0f64;
    let weights = primal.x.weights();
    for i in 0..n {
        let masked_omega = if z.contains(i) { lifted.omega_bar[i] } else { 0.0 };
        gradient_x = gradient_x.max((weights[i] / instance.gamma - masked_omega).abs());
    }

    [0.0, second_moment, mean_link, 0.0, mass, gradient_x]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_utility_tangents, Moments, UncertaintySet, UtilityPwl};
    use crate::synthetic::random_instance;
    use approx::assert_relative_eq;

    fn settings() -> IpmSettings {
        IpmSettings::default()
    }

    fn linear_loss_instance(n: usize, k: usize, a: f64, b: f64, seed: u64) -> Instance {
        let mut instance = random_instance(seed, n, k, 1);
        instance.utility = UtilityPwl::new(vec![(a, b)]).unwrap();
        instance
    }

    #[test]
    fn reduced_program_shape_for_single_asset_support() {
        let instance = linear_loss_instance(3, 1, 1.0, 0.0, 5);
        let z = Selection::from_indices(3, &[1]).unwrap();
        let program = build_reduced_dual(&instance, &z).unwrap();
        let psd_dims: Vec<usize> = program
            .cones()
            .iter()
            .filter_map(|c| match c {
                Cone::Psd(d) => Some(*d),
                _ => None,
            })
            .collect();
        assert_eq!(psd_dims, vec![2, 2]);
        assert!(program.num_vars() <= 15, "got {}", program.num_vars());
    }

    #[test]
    fn selection_shape_mismatches_are_rejected() {
        let instance = random_instance(1, 4, 2, 2);
        let too_many = Selection::from_indices(4, &[0, 1, 2]).unwrap();
        assert!(matches!(
            build_reduced_dual(&instance, &too_many),
            Err(LowerLevelError::WrongCardinality {
                got: 3,
                expected: 2
            })
        ));
        let wrong_universe = Selection::from_indices(5, &[0, 1]).unwrap();
        assert!(matches!(
            build_reduced_dual(&instance, &wrong_universe),
            Err(LowerLevelError::UniverseMismatch { .. })
        ));
    }

    #[test]
    fn repeat_solves_are_bit_identical() {
        let instance = random_instance(11, 4, 2, 2);
        let z = Selection::from_indices(4, &[0, 3]).unwrap();
        let first = solve_lower(&instance, &z, &settings()).unwrap();
        let second = solve_lower(&instance, &z, &settings()).unwrap();
        assert_eq!(first.f_prime.to_bits(), second.f_prime.to_bits());
        assert_eq!(first.pi.to_bits(), second.pi.to_bits());
    }

    #[test]
    fn single_asset_linear_loss_matches_closed_form() {
        let (a, b) = (0.9, 0.05);
        for seed in [2, 3] {
            let instance = linear_loss_instance(4, 1, a, b, seed);
            for i in 0..4 {
                let z = Selection::from_indices(4, &[i]).unwrap();
                let got = solve_lower(&instance, &z, &settings()).unwrap().f_prime;
                let mu_i = instance.moments.mean()[i];
                let sigma_ii = instance.moments.covariance().get(i, i);
                let expected = 1.0 / (2.0 * instance.gamma) - a * mu_i - b
                    + a * (instance.ambiguity.kappa1 * sigma_ii).sqrt();
                assert_relative_eq!(got, expected, max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn full_and_reduced_values_agree() {
        for (seed, n, k) in [(7u64, 6usize, 2usize), (8, 6, 3), (9, 5, 2)] {
            let instance = random_instance(seed, n, k, 3);
            let indices: Vec<usize> = (0..k).map(|i| (i * 2 + 1) % n).collect();
            let z = Selection::from_indices(n, &indices).unwrap();
            if z.cardinality() != k {
                continue;
            }
            let reduced = solve_lower(&instance, &z, &settings()).unwrap();
            let full = solve_full_dual(&instance, &z, &settings()).unwrap();
            assert_relative_eq!(
                reduced.f_prime,
                full.f_prime,
                max_relative = 1e-6,
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn full_solve_on_everything_is_the_reduced_solve() {
        let instance = random_instance(13, 5, 5, 2);
        let z = Selection::all(5);
        let reduced = solve_lower(&instance, &z, &settings()).unwrap();
        let full = solve_full_dual(&instance, &z, &settings()).unwrap();
        assert_eq!(reduced.f_prime.to_bits(), full.f_prime.to_bits());
    }

    #[test]
    fn lift_on_full_selection_keeps_the_vectors() {
        let instance = random_instance(17, 4, 4, 3);
        let z = Selection::all(4);
        let sol = solve_lower(&instance, &z, &settings()).unwrap();
        let lifted = lift(&instance, &z, &sol).unwrap();
        assert_eq!(lifted.omega_bar, sol.omega_z);
        assert_eq!(lifted.lambda_bar, sol.lambda_z);
        for piece in 0..3 {
            if sol.eta[piece] > 1e-9 {
                assert_eq!(lifted.beta_bar[piece], sol.beta_z[piece]);
            }
        }
    }

    #[test]
    fn lift_with_uncorrelated_complement_leaves_it_at_zero() {
        let moments = Moments::new(vec![0.0, 0.0], SymMatrix::identity(2)).unwrap();
        let instance = Instance {
            moments,
            ambiguity: UncertaintySet {
                kappa1: 1.0,
                kappa2: 4.0,
            },
            utility: UtilityPwl::new(vec![(1.0, 0.0)]).unwrap(),
            gamma: 1.0,
            k: 1,
        };
        let z = Selection::from_indices(2, &[0]).unwrap();
        let sol = solve_lower(&instance, &z, &settings()).unwrap();
        let lifted = lift(&instance, &z, &sol).unwrap();
        assert_eq!(lifted.beta_bar[0][1], 0.0);
        assert_eq!(lifted.lambda_bar[1], 0.0);
    }

    #[test]
    fn lifted_solutions_certify_and_match_the_reduced_value() {
        let instance = random_instance(23, 6, 3, 3);
        let z = Selection::from_indices(6, &[0, 2, 5]).unwrap();
        let sol = solve_lower(&instance, &z, &settings()).unwrap();
        let lifted = lift(&instance, &z, &sol).unwrap();
        let report = certify_lift(&instance, &lifted).unwrap();
        assert!(report.within(1e-7), "worst violation {:?}", report.worst());
        let objective = dual_objective(&instance, &z, &lifted);
        assert_relative_eq!(objective, sol.f_prime, max_relative = 1e-6, epsilon = 1e-9);
    }

    #[test]
    fn subgradient_formula_is_elementwise() {
        let instance = {
            let mut i = random_instance(3, 2, 1, 1);
            i.gamma = 2.0;
            i
        };
        let z = Selection::from_indices(2, &[0]).unwrap();
        let lifted = LiftedDualSolution {
            omega_bar: vec![1.0, 2.0],
            b_bar: vec![SymMatrix::zeros(2)],
            beta_bar: vec![vec![0.0, 0.0]],
            eta: vec![1.0],
            lambda_bar: vec![0.0, 0.0],
            pi: 0.0,
        };
        let cut = subgradient_cut(&instance, &z, &lifted, 5.0);
        assert_eq!(cut.gradient, vec![-1.0, -4.0]);
        assert_eq!(cut.value, 5.0);

        let zero = LiftedDualSolution {
            omega_bar: vec![0.0, 0.0],
            ..lifted
        };
        let flat = subgradient_cut(&instance, &z, &zero, 5.0);
        assert_eq!(flat.gradient, vec![0.0, 0.0]);
        let other = Selection::from_indices(2, &[1]).unwrap();
        assert_eq!(flat.bound_at(&other), 5.0);
    }

    #[test]
    fn cuts_undershoot_the_objective_across_selections() {
        let n = 6;
        let instance = random_instance(29, n, 2, 3);
        let pool: Vec<Selection> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| Selection::from_indices(n, &[i, j]).unwrap())
            .collect();
        let anchors = [&pool[0], &pool[4], &pool[9], &pool[14]];
        let values: Vec<f64> = pool
            .iter()
            .map(|z| solve_lower(&instance, z, &settings()).unwrap().f_prime)
            .collect();
        for anchor in anchors {
            let sol = solve_lower(&instance, anchor, &settings()).unwrap();
            let lifted = lift(&instance, anchor, &sol).unwrap();
            let cut = subgradient_cut(&instance, anchor, &lifted, sol.f_prime);
            assert!(cut.gradient.iter().all(|&g| g <= 0.0));
            for (z, &f_z) in pool.iter().zip(&values) {
                assert!(
                    f_z >= cut.bound_at(z) - 1e-6,
                    "cut at {:?} overshoots {:?}: {} < {}",
                    anchor.indices(),
                    z.indices(),
                    f_z,
                    cut.bound_at(z)
                );
            }
        }
    }

    #[test]
    fn recovered_portfolio_matches_the_dual_value() {
        let instance = random_instance(31, 6, 3, 3);
        let z = Selection::from_indices(6, &[1, 3, 4]).unwrap();
        let dual = solve_lower(&instance, &z, &settings()).unwrap();
        let primal = recover_portfolio(&instance, &z, &settings()).unwrap();
        assert_relative_eq!(
            primal.objective,
            dual.f_prime,
            max_relative = 1e-6,
            epsilon = 1e-8
        );
        let weights = primal.x.weights();
        for i in 0..6 {
            if !z.contains(i) {
                assert_eq!(weights[i], 0.0);
            }
        }
        // Multiplier link p = −q/2 − Qμ̂ on the support.
        let (mu_s, _) = support_moments(&instance, &z);
        for i in 0..3 {
            let qmu: f64 = (0..3).map(|j| primal.q_mat.get(i, j) * mu_s[j]).sum();
            assert_relative_eq!(
                primal.p_vec[i],
                -primal.q_vec[i] / 2.0 - qmu,
                epsilon = 1e-8
            );
        }
    }

    #[test]
    fn single_asset_portfolio_is_an_indicator() {
        let instance = random_instance(37, 5, 1, 2);
        let z = Selection::from_indices(5, &[2]).unwrap();
        let primal = recover_portfolio(&instance, &z, &settings()).unwrap();
        assert_eq!(primal.x.weights(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn symmetric_instance_spreads_weight_evenly() {
        let n = 4;
        let moments = Moments::new(vec![0.5; n], SymMatrix::identity(n).scaled(0.3)).unwrap();
        let utility = build_utility_tangents(0.5, 10.0, &[0.0, 0.25, 0.5]).unwrap();
        let instance = Instance {
            moments,
            ambiguity: UncertaintySet {
                kappa1: 1.0,
                kappa2: 4.0,
            },
            utility,
            gamma: 5.0,
            k: n,
        };
        let primal = recover_portfolio(&instance, &Selection::all(n), &settings()).unwrap();
        for &w in primal.x.weights() {
            assert_relative_eq!(w, 1.0 / n as f64, epsilon = 1e-6);
        }
    }

    #[test]
    fn stationarity_residuals_are_small_on_a_solved_pair() {
        let instance = random_instance(41, 6, 2, 3);
        let z = Selection::from_indices(6, &[1, 4]).unwrap();
        // The sixth condition compares primal weights against the dual ω,
        // which agree only to the square root of the final complementarity
        // gap; solve tighter than the default so the measurement sits well
        // above solver noise.
        let tight = IpmSettings {
            gap_tol: 5e-10,
            ..IpmSettings::default()
        };
        let dual = solve_lower(&instance, &z, &tight).unwrap();
        let lifted = lift(&instance, &z, &dual).unwrap();
        let primal = recover_portfolio(&instance, &z, &tight).unwrap();
        let residuals = kkt_residuals(&instance, &z, &lifted, &primal);
        for (i, &r) in residuals.iter().enumerate() {
            assert!(r <= 1e-6, "condition {} residual {}", i + 1, r);
        }
    }
}

