//! A small dense conic interior-point solver.
//!
//! Problems are stated in the standard equality form
//!
//! ```text
//!     minimize    cᵀx
//!     subject to  A x = b,   x ∈ K,
//! ```
//!
//! where `K` is a product of free, nonnegative, second-order, rotated
//! second-order, and PSD blocks. PSD blocks are stored in packed symmetric
//! ("svec") form: `d(d+1)/2` coordinates with off-diagonal entries scaled
//! by √2, so the coordinate inner product of two packed blocks equals the
//! matrix inner product `A • B`.
//!
//! The algorithm is a Nesterov–Todd scaled predictor-corrector path
//! follower on the homogeneous self-dual embedding, so primal or dual
//! infeasibility comes out as a certificate rather than a crash. Newton
//! systems are assembled densely and solved through a Schur complement on
//! the constraints; problem sizes here are small enough that sparsity
//! exploitation would be wasted effort. The solver is deliberately
//! deterministic: identical inputs take an identical sequence of floating
//! point operations, so re-solves reproduce results bit for bit.

mod cones;
mod ipm;
mod verify;

pub use verify::{verify_certificate, CertificateReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::SymMatrix;

pub const SQRT2: f64 = std::f64::consts::SQRT_2;

/// One variable block of a cone program.
///
/// `RotatedSoc(n)` is `{(u, v, w) : u ≥ 0, v ≥ 0, u·v ≥ ‖w‖²}` with
/// `w ∈ R^{n-2}`; internally it is rotated onto an ordinary second-order
/// block before solving.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cone {
    Free(usize),
    NonNeg(usize),
    Soc(usize),
    RotatedSoc(usize),
    Psd(usize),
}

impl Cone {
    /// Number of scalar coordinates the block occupies.
    pub fn len(&self) -> usize {
        match *self {
            Cone::Free(n) | Cone::NonNeg(n) | Cone::Soc(n) | Cone::RotatedSoc(n) => n,
            Cone::Psd(d) => d * (d + 1) / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Packed index of entry `(i, j)` of a symmetric `d x d` matrix stored
/// row-wise by its lower triangle.
pub fn svec_index(i: usize, j: usize) -> usize {
    let (r, c) = if i >= j { (i, j) } else { (j, i) };
    r * (r + 1) / 2 + c
}

/// Packs a symmetric matrix into svec coordinates.
pub fn svec(m: &SymMatrix) -> Vec<f64> {
    let d = m.dim();
    let mut v = vec![0.0; d * (d + 1) / 2];
    for i in 0..d {
        for j in 0..=i {
            v[i * (i + 1) / 2 + j] = if i == j {
                m.get(i, i)
            } else {
                SQRT2 * m.get(i, j)
            };
        }
    }
    v
}

/// Unpacks svec coordinates into a symmetric matrix.
pub fn unsvec(d: usize, v: &[f64]) -> SymMatrix {
    assert_eq!(v.len(), d * (d + 1) / 2);
    SymMatrix::from_fn(d, |i, j| {
        let x = v[svec_index(i, j)];
        if i == j {
            x
        } else {
            x / SQRT2
        }
    })
}

/// One linear equality row: sparse coefficients over flat coordinates.
#[derive(Debug, Clone)]
pub struct EqRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("block {0} has invalid dimension: {1}")]
    BadDimension(usize, String),
    #[error("row {row} references coordinate {coord}, but the program has {ncoords} coordinates")]
    BadCoordinate {
        row: usize,
        coord: usize,
        ncoords: usize,
    },
    #[error("row {0} has no coefficients")]
    EmptyRow(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("program has no equality rows")]
    NoRows,
}

/// An equality-form cone program. Build with [`ConeProgram::new`] plus the
/// `add_*` methods; coordinates are addressed flat, with helpers to map a
/// block-local index or a PSD matrix entry onto the flat space.
#[derive(Debug, Clone)]
pub struct ConeProgram {
    cones: Vec<Cone>,
    offsets: Vec<usize>,
    nvars: usize,
    objective: Vec<f64>,
    rows: Vec<EqRow>,
}

impl ConeProgram {
    pub fn new() -> Self {
        ConeProgram {
            cones: Vec::new(),
            offsets: Vec::new(),
            nvars: 0,
            objective: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Appends a block and returns its index.
    pub fn add_block(&mut self, cone: Cone) -> usize {
        self.offsets.push(self.nvars);
        self.nvars += cone.len();
        self.objective.resize(self.nvars, 0.0);
        self.cones.push(cone);
        self.cones.len() - 1
    }

    pub fn cones(&self) -> &[Cone] {
        &self.cones
    }

    pub fn num_vars(&self) -> usize {
        self.nvars
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[EqRow] {
        &self.rows
    }

    pub fn objective(&self) -> &[f64] {
        &self.objective
    }

    pub fn block_offset(&self, block: usize) -> usize {
        self.offsets[block]
    }

    /// Flat index of coordinate `i` of `block`.
    pub fn var(&self, block: usize, i: usize) -> usize {
        debug_assert!(i < self.cones[block].len());
        self.offsets[block] + i
    }

    /// Flat coordinate and coefficient factor representing the scalar entry
    /// `(i, j)` of a PSD block's matrix: a linear term `t · X_ij` becomes
    /// coefficient `t * factor` on the returned coordinate.
    pub fn psd_entry(&self, block: usize, i: usize, j: usize) -> (usize, f64) {
        match self.cones[block] {
            Cone::Psd(d) => {
                debug_assert!(i < d && j < d);
                let factor = if i == j { 1.0 } else { 1.0 / SQRT2 };
                (self.offsets[block] + svec_index(i, j), factor)
            }
            _ => panic!("psd_entry on a non-PSD block"),
        }
    }

    /// Adds `c` to the objective coefficient of a flat coordinate.
    pub fn add_objective(&mut self, var: usize, c: f64) {
        self.objective[var] += c;
    }

    /// Adds `c · X_ij` to the objective for a PSD block.
    pub fn add_objective_psd(&mut self, block: usize, i: usize, j: usize, c: f64) {
        let (v, f) = self.psd_entry(block, i, j);
        self.add_objective(v, c * f);
    }

    /// Adds an equality row `Σ terms = rhs`; duplicate coordinates are
    /// summed.
    pub fn add_row(&mut self, terms: &[(usize, f64)], rhs: f64) -> usize {
        let mut sorted: Vec<(usize, f64)> = terms.to_vec();
        sorted.sort_by_key(|&(c, _)| c);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(sorted.len());
        for (c, v) in sorted {
            match merged.last_mut() {
                Some((lc, lv)) if *lc == c => *lv += v,
                _ => merged.push((c, v)),
            }
        }
        merged.retain(|&(_, v)| v != 0.0);
        self.rows.push(EqRow { terms: merged, rhs });
        self.rows.len() - 1
    }

    /// Structural well-formedness. Solvers call this first; it catches
    /// malformed indices and non-finite data, not infeasibility.
    pub fn validate(&self) -> Result<(), ProgramError> {
        for (b, cone) in self.cones.iter().enumerate() {
            let ok = match *cone {
                Cone::Free(n) | Cone::NonNeg(n) => n >= 1,
                Cone::Soc(n) => n >= 2,
                Cone::RotatedSoc(n) => n >= 3,
                Cone::Psd(d) => d >= 1,
            };
            if !ok {
                return Err(ProgramError::BadDimension(b, format!("{cone:?}")));
            }
        }
        if self.rows.is_empty() {
            return Err(ProgramError::NoRows);
        }
        if self.objective.iter().any(|v| !v.is_finite()) {
            return Err(ProgramError::NonFinite("objective"));
        }
        for (r, row) in self.rows.iter().enumerate() {
            if row.terms.is_empty() {
                return Err(ProgramError::EmptyRow(r));
            }
            if !row.rhs.is_finite() || row.terms.iter().any(|&(_, v)| !v.is_finite()) {
                return Err(ProgramError::NonFinite("row coefficients"));
            }
            for &(c, _) in &row.terms {
                if c >= self.nvars {
                    return Err(ProgramError::BadCoordinate {
                        row: r,
                        coord: c,
                        ncoords: self.nvars,
                    });
                }
            }
        }
        Ok(())
    }
}

impl Default for ConeProgram {
    fn default() -> Self {
        Self::new()
    }
}

/// Interior-point settings. The regularization value is added to the
/// Newton system diagonal; if a factorization still breaks down the solve
/// is retried once with `1e-8` before giving up.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IpmSettings {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iterations: usize,
    pub static_reg: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        IpmSettings {
            feas_tol: 1e-8,
            gap_tol: 1e-8,
            max_iterations: 200,
            static_reg: 1e-10,
        }
    }
}

impl IpmSettings {
    pub fn validate(&self) -> Result<(), ProgramError> {
        let ok = self.feas_tol > 0.0
            && self.gap_tol > 0.0
            && self.max_iterations > 0
            && self.static_reg >= 0.0
            && self.feas_tol.is_finite()
            && self.gap_tol.is_finite()
            && self.static_reg.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ProgramError::NonFinite("settings"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    /// Primal-dual optimal within the recorded tolerances.
    Optimal,
    /// Primal infeasible; `dual_y`/`dual_slack` hold a Farkas certificate.
    Infeasible,
    /// Dual infeasible (primal unbounded); `primal` holds an improving ray.
    Unbounded,
    /// Iteration limit reached without a conclusive state.
    IterLimit,
    /// The Newton system could not be solved even after the regularization
    /// retry, or the iterates degenerated.
    NumericFailure,
}

/// Solver output. For `Optimal`, `primal`, `dual_y`, and `dual_slack` are
/// the de-homogenized primal/dual pair; for `Infeasible`/`Unbounded` they
/// carry the normalized certificate instead.
#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub primal: Vec<f64>,
    pub dual_y: Vec<f64>,
    pub dual_slack: Vec<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// Complementarity `x̂ᵀŝ` of the returned pair.
    pub complementarity_gap: f64,
    pub iterations: usize,
    /// Tolerances the run was checked against, echoed for downstream
    /// consumers that need to reason about solution quality.
    pub feas_tol: f64,
    pub gap_tol: f64,
    cones: Vec<Cone>,
    offsets: Vec<usize>,
}

impl ConicSolution {
    pub fn block(&self, b: usize) -> &[f64] {
        let start = self.offsets[b];
        &self.primal[start..start + self.cones[b].len()]
    }

    pub fn block_dual_slack(&self, b: usize) -> &[f64] {
        let start = self.offsets[b];
        &self.dual_slack[start..start + self.cones[b].len()]
    }

    /// Matrix value of a PSD block.
    pub fn psd_block(&self, b: usize) -> SymMatrix {
        match self.cones[b] {
            Cone::Psd(d) => unsvec(d, self.block(b)),
            _ => panic!("psd_block on a non-PSD block"),
        }
    }

    /// Matrix value of a PSD block's dual slack. Like the primal blocks,
    /// dual slacks are interior cone iterates, so the matrix is positive
    /// semidefinite to machine precision — equality residuals, not cone
    /// membership, carry the solver tolerance.
    pub fn psd_dual_slack(&self, b: usize) -> SymMatrix {
        match self.cones[b] {
            Cone::Psd(d) => unsvec(d, self.block_dual_slack(b)),
            _ => panic!("psd_dual_slack on a non-PSD block"),
        }
    }

    pub fn cones(&self) -> &[Cone] {
        &self.cones
    }
}

/// Solves a cone program. Numeric trouble in the Newton systems triggers
/// one retry with heavier regularization before reporting
/// [`SolveStatus::NumericFailure`].
pub fn solve(program: &ConeProgram, settings: &IpmSettings) -> Result<ConicSolution, ProgramError> {
    program.validate()?;
    settings.validate()?;
    match ipm::solve_once(program, settings, settings.static_reg) {
        Some(sol) => Ok(sol),
        None => {
            let retry_reg = 1e-8_f64.max(settings.static_reg);
            match ipm::solve_once(program, settings, retry_reg) {
                Some(sol) => Ok(sol),
                None => Ok(ipm::failure_solution(program, settings)),
            }
        }
    }
}
