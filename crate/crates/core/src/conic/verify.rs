//! Independent certificate checking.
//!
//! Everything here recomputes residuals directly from the user's program
//! data and the returned solution — none of the solver's internal scaled
//! quantities are trusted. This is what tests (and the command-line
//! `verify` path) lean on to confirm a solve actually solved the problem
//! it was given.

use crate::numerics::{min_eigenvalue, norm2};

use super::{unsvec, Cone, ConeProgram, ConicSolution, SolveStatus, SQRT2};

/// Residuals of a claimed solution or certificate, all absolute ∞-norms.
///
/// The meaning of each field depends on the status being verified:
/// for `Optimal` (and `IterLimit`) they are the usual KKT residuals and
/// `gap = |cᵀx − bᵀy|`; for `Infeasible`, `dual_residual` measures the
/// Farkas condition `Aᵀy + s = 0` and `gap = |bᵀy − 1|`; for `Unbounded`,
/// `primal_residual` measures the ray condition `Ax = 0` and
/// `gap = |cᵀx + 1|`.
#[derive(Debug, Clone, Copy)]
pub struct CertificateReport {
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    /// Worst violation of cone membership across all primal and dual
    /// blocks (0 when everything is inside its cone).
    pub worst_cone_violation: f64,
}

impl CertificateReport {
    /// True when every residual is within `tol`.
    pub fn within(&self, tol: f64) -> bool {
        self.primal_residual <= tol
            && self.dual_residual <= tol
            && self.gap <= tol
            && self.worst_cone_violation <= tol
    }
}

pub fn verify_certificate(program: &ConeProgram, sol: &ConicSolution) -> CertificateReport {
    let n = program.num_vars();
    let x = &sol.primal;
    let y = &sol.dual_y;
    let s = &sol.dual_slack;

    let mut ax_res = 0.0_f64; // ‖Ax − b‖∞ or ‖Ax‖∞ for rays
    let mut ax_ray = 0.0_f64;
    for row in program.rows() {
        let mut acc = 0.0;
        for &(c, v) in &row.terms {
            acc += v * x[c];
        }
        ax_res = ax_res.max((acc - row.rhs).abs());
        ax_ray = ax_ray.max(acc.abs());
    }

    let mut aty = vec![0.0_f64; n];
    for (p, row) in program.rows().iter().enumerate() {
        for &(c, v) in &row.terms {
            aty[c] += v * y[p];
        }
    }
    let c_obj = program.objective();
    let mut dual_res = 0.0_f64; // ‖Aᵀy + s − c‖∞
    let mut dual_ray = 0.0_f64; // ‖Aᵀy + s‖∞
    for j in 0..n {
        dual_res = dual_res.max((aty[j] + s[j] - c_obj[j]).abs());
        dual_ray = dual_ray.max((aty[j] + s[j]).abs());
    }

    let pobj: f64 = (0..n).map(|j| c_obj[j] * x[j]).sum();
    let dobj: f64 = program
        .rows()
        .iter()
        .enumerate()
        .map(|(p, row)| row.rhs * y[p])
        .sum();

    let (primal_residual, dual_residual, gap) = match sol.status {
        SolveStatus::Infeasible => (0.0, dual_ray, (dobj - 1.0).abs()),
        SolveStatus::Unbounded => (ax_ray, 0.0, (pobj + 1.0).abs()),
        _ => (ax_res, dual_res, (pobj - dobj).abs()),
    };

    let mut worst = 0.0_f64;
    for (b, cone) in program.cones().iter().enumerate() {
        let off = program.block_offset(b);
        let len = cone.len();
        let xb = &x[off..off + len];
        let sb = &s[off..off + len];
        worst = worst.max(primal_violation(*cone, xb));
        worst = worst.max(dual_violation(*cone, sb));
    }

    CertificateReport {
        primal_residual,
        dual_residual,
        gap,
        worst_cone_violation: worst,
    }
}

fn soc_violation(v: &[f64]) -> f64 {
    (norm2(&v[1..]) - v[0]).max(0.0)
}

fn primal_violation(cone: Cone, v: &[f64]) -> f64 {
    match cone {
        Cone::Free(_) => 0.0,
        Cone::NonNeg(_) => v.iter().fold(0.0_f64, |a, &t| a.max(-t)).max(0.0),
        Cone::Soc(_) => soc_violation(v),
        Cone::RotatedSoc(len) => {
            // Rotate onto the plain second-order cone and measure there.
            let mut p = vec![0.0; len];
            p[0] = (v[0] + v[1]) / SQRT2;
            p[1] = (v[0] - v[1]) / SQRT2;
            for i in 2..len {
                p[i] = SQRT2 * v[i];
            }
            soc_violation(&p)
        }
        Cone::Psd(d) => {
            let m = unsvec(d, v);
            match min_eigenvalue(&m) {
                Ok(e) => (-e).max(0.0),
                Err(_) => f64::INFINITY,
            }
        }
    }
}

fn dual_violation(cone: Cone, v: &[f64]) -> f64 {
    match cone {
        // The dual of a free block is {0}.
        Cone::Free(_) => v.iter().fold(0.0_f64, |a, &t| a.max(t.abs())),
        Cone::RotatedSoc(len) => {
            // The dual slack rotates with the inverse isometry.
            let mut p = vec![0.0; len];
            p[0] = (v[0] + v[1]) / SQRT2;
            p[1] = (v[0] - v[1]) / SQRT2;
            for i in 2..len {
                p[i] = v[i] / SQRT2;
            }
            soc_violation(&p)
        }
        // The remaining cones are self-dual.
        other => primal_violation(other, v),
    }
}
