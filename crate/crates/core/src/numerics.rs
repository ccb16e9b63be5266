//! Dense symmetric linear algebra shared by the conic solver and the
//! lifting step: Cholesky factorization, positive-definite solves, and
//! symmetric eigenvalues (Householder tridiagonalization + implicit QL).
//!
//! Everything here is sequential and allocation-explicit so that repeated
//! solves of the same problem are bit-identical.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix is not positive definite: pivot {pivot:.6e} at index {index} is below tolerance {tolerance:.6e}")]
    NotPositiveDefinite {
        index: usize,
        pivot: f64,
        tolerance: f64,
    },
    #[error("symmetric QL iteration failed to converge")]
    EigenNoConvergence,
}

/// Dense symmetric matrix, full row-major storage. Constructors symmetrize,
/// and `set` writes both triangles, so the two triangles never disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    a: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix {
            n,
            a: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.a[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from a callback on (row, col); the strict upper triangle is
    /// mirrored from the lower one, so `f` is only consulted for i >= j.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let v = f(i, j);
                m.a[i * n + j] = v;
                m.a[j * n + i] = v;
            }
        }
        m
    }

    /// Builds from a full row-major slice, averaging the two triangles.
    pub fn from_rows(n: usize, rows: &[f64]) -> Self {
        assert_eq!(rows.len(), n * n, "row data must be n*n");
        Self::from_fn(n, |i, j| 0.5 * (rows[i * n + j] + rows[j * n + i]))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.n + j] = v;
        self.a[j * self.n + i] = v;
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.set(i, j, self.get(i, j) + v);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.a
    }

    pub fn mat_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            y[i] = dot(&self.a[i * self.n..(i + 1) * self.n], x);
        }
        y
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(&self.mat_vec(x), x)
    }

    /// Frobenius inner product `self • other`.
    pub fn dot(&self, other: &SymMatrix) -> f64 {
        assert_eq!(self.n, other.n);
        dot(&self.a, &other.a)
    }

    pub fn scaled(&self, c: f64) -> SymMatrix {
        SymMatrix {
            n: self.n,
            a: self.a.iter().map(|v| v * c).collect(),
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &SymMatrix) {
        assert_eq!(self.n, other.n);
        for (x, y) in self.a.iter_mut().zip(other.a.iter()) {
            *x += c * y;
        }
    }

    /// Rank-one update `self += c * v vᵀ`.
    pub fn add_outer(&mut self, c: f64, v: &[f64]) {
        assert_eq!(v.len(), self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                self.a[i * self.n + j] += c * v[i] * v[j];
            }
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.a[i * self.n + i]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Principal submatrix on the given (strictly increasing) index set.
    pub fn principal_submatrix(&self, idx: &[usize]) -> SymMatrix {
        SymMatrix::from_fn(idx.len(), |i, j| self.get(idx[i], idx[j]))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        s += x * y;
    }
    s
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cholesky factor `L` (lower triangular) of a positive definite matrix.
///
/// Pivots are required to stay above `1e-12 * max(diagonal)`; anything
/// smaller is reported as [`NumericsError::NotPositiveDefinite`] rather
/// than silently producing a garbage factor.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(m: &SymMatrix) -> Result<Self, NumericsError> {
        let n = m.n;
        let mut l = m.a.clone();
        let max_diag = (0..n).fold(0.0_f64, |acc, i| acc.max(l[i * n + i]));
        let tol = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
        factor_lower_in_place(&mut l, n, tol)?;
        // Zero the upper triangle so the factor can be read back directly.
        for i in 0..n {
            for j in i + 1..n {
                l[i * n + j] = 0.0;
            }
        }
        Ok(Cholesky { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Entry `L[i][j]` (zero above the diagonal).
    pub fn factor_entry(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.n + j]
    }

    /// The full row-major `n x n` buffer holding `L` (upper triangle zero).
    pub fn lower(&self) -> &[f64] {
        &self.l
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, x: &mut [f64]) {
        lower_solve_in_place(&self.l, self.n, x);
    }

    /// Solves `Lᵀ y = b` in place.
    pub fn solve_lower_transpose_in_place(&self, x: &mut [f64]) {
        lower_transpose_solve_in_place(&self.l, self.n, x);
    }

    /// Solves `L Lᵀ x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        lower_solve_in_place(&self.l, self.n, x);
        lower_transpose_solve_in_place(&self.l, self.n, x);
    }

    /// Applies `Lᵀ x` (used to map between whitened and original coordinates).
    pub fn lt_mat_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0; n];
        for i in 0..n {
            // Column i of L = row i of Lᵀ truncated to j >= i.
            for j in i..n {
                y[i] += self.l[j * n + i] * x[j];
            }
        }
        y
    }
}

/// Solves `A x = b` for symmetric positive definite `A`.
pub fn solve_posdef(a: &SymMatrix, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    Ok(Cholesky::factor(a)?.solve(b))
}

pub fn lower_solve_in_place(l: &[f64], n: usize, x: &mut [f64]) {
    for i in 0..n {
        let s = dot(&l[i * n..i * n + i], &x[..i]);
        x[i] = (x[i] - s) / l[i * n + i];
    }
}

pub fn lower_transpose_solve_in_place(l: &[f64], n: usize, x: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= l[j * n + i] * x[j];
        }
        x[i] = s / l[i * n + i];
    }
}

/// Unblocked in-place Cholesky on the lower triangle of a full row-major
/// buffer. The upper triangle is left untouched.
fn factor_lower_in_place(a: &mut [f64], n: usize, pivot_tol: f64) -> Result<(), NumericsError> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for t in 0..j {
            d -= a[j * n + t] * a[j * n + t];
        }
        if !(d > pivot_tol) {
            return Err(NumericsError::NotPositiveDefinite {
                index: j,
                pivot: d,
                tolerance: pivot_tol,
            });
        }
        let ljj = d.sqrt();
        a[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for t in 0..j {
                s -= a[i * n + t] * a[j * n + t];
            }
            a[i * n + j] = s / ljj;
        }
    }
    Ok(())
}

const CHOL_BLOCK: usize = 128;

/// What to do with a pivot that is not safely positive: report failure
/// (the right answer for genuinely indefinite data) or clamp it to a
/// floor and keep going (dynamic regularization for interior-point Schur
/// systems, whose trailing diagonals legitimately shrink toward zero).
#[derive(Clone, Copy)]
enum PivotPolicy<'f> {
    Strict(f64),
    Clamp(f64),
    ClampPerColumn(&'f [f64]),
}

impl PivotPolicy<'_> {
    fn apply(self, d: f64, index: usize, clamped: &mut usize) -> Result<f64, NumericsError> {
        match self {
            PivotPolicy::Strict(tol) => {
                if d > tol {
                    Ok(d)
                } else {
                    Err(NumericsError::NotPositiveDefinite {
                        index,
                        pivot: d,
                        tolerance: tol,
                    })
                }
            }
            PivotPolicy::Clamp(floor) => {
                if d >= floor {
                    Ok(d)
                } else {
                    *clamped += 1;
                    Ok(floor)
                }
            }
            PivotPolicy::ClampPerColumn(floors) => {
                if d >= floors[index] {
                    Ok(d)
                } else {
                    *clamped += 1;
                    Ok(floors[index])
                }
            }
        }
    }
}

/// Blocked in-place Cholesky (lower triangle, row-major) for the large
/// Schur complements assembled by the interior-point solver. The trailing
/// update runs through `matrixmultiply`, which is where essentially all of
/// the time goes on big systems.
pub fn factor_spd_blocked(a: &mut [f64], n: usize) -> Result<(), NumericsError> {
    let max_diag = (0..n).fold(0.0_f64, |acc, i| acc.max(a[i * n + i]));
    let tol = 1e-12 * max_diag.max(f64::MIN_POSITIVE);
    factor_blocked_impl(a, n, PivotPolicy::Strict(tol)).map(|_| ())
}

/// [`factor_spd_blocked`] with pivot clamping instead of failure: any
/// pivot below `floor` is raised to it. Never fails; returns how many
/// pivots were clamped. `floor` must be positive.
pub fn factor_spd_clamped(a: &mut [f64], n: usize, floor: f64) -> usize {
    match factor_blocked_impl(a, n, PivotPolicy::Clamp(floor)) {
        Ok(clamped) => clamped,
        Err(_) => unreachable!("clamped factorization cannot fail"),
    }
}

/// [`factor_spd_clamped`] with one floor per column. When the diagonal
/// spreads over many orders of magnitude, a single global floor sized to
/// the largest entry destroys pivots that are perfectly healthy relative
/// to their own column; per-column floors only intervene where a column
/// has genuinely lost its rank.
pub fn factor_spd_clamped_columns(a: &mut [f64], n: usize, floors: &[f64]) -> usize {
    debug_assert_eq!(floors.len(), n);
    match factor_blocked_impl(a, n, PivotPolicy::ClampPerColumn(floors)) {
        Ok(clamped) => clamped,
        Err(_) => unreachable!("clamped factorization cannot fail"),
    }
}

fn factor_blocked_impl(a: &mut [f64], n: usize, policy: PivotPolicy) -> Result<usize, NumericsError> {
    let mut clamped = 0usize;
    let mut j0 = 0;
    while j0 < n {
        let jb = CHOL_BLOCK.min(n - j0);
        let j1 = j0 + jb;
        // Diagonal block, unblocked.
        for j in j0..j1 {
            let mut d = a[j * n + j];
            for t in j0..j {
                d -= a[j * n + t] * a[j * n + t];
            }
            let d = policy.apply(d, j, &mut clamped)?;
            let ljj = d.sqrt();
            a[j * n + j] = ljj;
            for i in j + 1..j1 {
                let mut s = a[i * n + j];
                for t in j0..j {
                    s -= a[i * n + t] * a[j * n + t];
                }
                a[i * n + j] = s / ljj;
            }
        }
        // Panel solve: rows below the block against L11ᵀ.
        for i in j1..n {
            for j in j0..j1 {
                let mut s = a[i * n + j];
                for t in j0..j {
                    s -= a[i * n + t] * a[j * n + t];
                }
                a[i * n + j] = s / a[j * n + j];
            }
        }
        // Trailing update A22 -= L21 L21ᵀ, lower triangle via row tiles.
        let mut i0 = j1;
        while i0 < n {
            let ib = CHOL_BLOCK.min(n - i0);
            let cols = i0 + ib - j1; // update columns j1 .. i0+ib
            unsafe {
                matrixmultiply::dgemm(
                    ib,
                    jb,
                    cols,
                    -1.0,
                    a.as_ptr().add(i0 * n + j0),
                    n as isize,
                    1,
                    a.as_ptr().add(j1 * n + j0),
                    1,
                    n as isize,
                    1.0,
                    a.as_mut_ptr().add(i0 * n + j1),
                    n as isize,
                    1,
                );
            }
            i0 += ib;
        }
        j0 = j1;
    }
    Ok(clamped)
}

/// Forward + backward substitution against a factor stored by
/// [`factor_spd_blocked`].
pub fn spd_solve_in_place(l: &[f64], n: usize, x: &mut [f64]) {
    lower_solve_in_place(l, n, x);
    lower_transpose_solve_in_place(l, n, x);
}

/// All eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &SymMatrix) -> Result<Vec<f64>, NumericsError> {
    let (d, _) = sym_eigen_impl(m, false)?;
    Ok(d)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &SymMatrix) -> Result<f64, NumericsError> {
    if m.dim() == 0 {
        return Ok(0.0);
    }
    Ok(sym_eigenvalues(m)?[0])
}

/// Full symmetric eigendecomposition `A = Q diag(d) Qᵀ`.
///
/// Returns eigenvalues ascending and eigenvectors as the *columns* of the
/// returned row-major `n x n` buffer.
pub fn sym_eigen(m: &SymMatrix) -> Result<(Vec<f64>, Vec<f64>), NumericsError> {
    let (d, q) = sym_eigen_impl(m, true)?;
    Ok((d, q.expect("vectors requested")))
}

fn sym_eigen_impl(
    m: &SymMatrix,
    vectors: bool,
) -> Result<(Vec<f64>, Option<Vec<f64>>), NumericsError> {
    let n = m.n;
    if n == 0 {
        return Ok((Vec::new(), if vectors { Some(Vec::new()) } else { None }));
    }
    let mut z = m.a.clone();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut z, n, &mut d, &mut e, vectors);
    ql_implicit(&mut d, &mut e, if vectors { Some(&mut z) } else { None }, n)?;
    // Sort ascending, permuting vector columns alongside.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap());
    let sorted_d: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let q = if vectors {
        let mut q = vec![0.0; n * n];
        for (new_col, &old_col) in order.iter().enumerate() {
            for r in 0..n {
                q[r * n + new_col] = z[r * n + old_col];
            }
        }
        Some(q)
    } else {
        None
    };
    Ok((sorted_d, q))
}

/// Householder reduction to tridiagonal form. With `accumulate` the input
/// buffer is overwritten by the orthogonal transformation; otherwise only
/// `d` (diagonal) and `e` (subdiagonal, `e[0] = 0`) are meaningful.
fn tridiagonalize(a: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64], accumulate: bool) {
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = a[i * n..i * n + i].iter().map(|v| v.abs()).sum();
            if scale == 0.0 {
                e[i] = a[i * n + l];
            } else {
                for k in 0..=l {
                    a[i * n + k] /= scale;
                    h += a[i * n + k] * a[i * n + k];
                }
                let f = a[i * n + l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i * n + l] = f - g;
                let mut fsum = 0.0;
                for j in 0..=l {
                    if accumulate {
                        a[j * n + i] = a[i * n + j] / h;
                    }
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[j * n + k] * a[i * n + k];
                    }
                    for k in j + 1..=l {
                        g += a[k * n + j] * a[i * n + k];
                    }
                    e[j] = g / h;
                    fsum += e[j] * a[i * n + j];
                }
                let hh = fsum / (h + h);
                for j in 0..=l {
                    let f = a[i * n + j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[j * n + k] -= f * e[k] + g * a[i * n + k];
                    }
                }
            }
        } else {
            e[i] = a[i * n + l];
        }
        d[i] = h;
    }
    if accumulate {
        d[0] = 0.0;
    }
    e[0] = 0.0;
    for i in 0..n {
        if accumulate {
            if d[i] != 0.0 {
                for j in 0..i {
                    let mut g = 0.0;
                    for k in 0..i {
                        g += a[i * n + k] * a[k * n + j];
                    }
                    for k in 0..i {
                        a[k * n + j] -= g * a[k * n + i];
                    }
                }
            }
            d[i] = a[i * n + i];
            a[i * n + i] = 1.0;
            for j in 0..i {
                a[j * n + i] = 0.0;
                a[i * n + j] = 0.0;
            }
        } else {
            d[i] = a[i * n + i];
        }
    }
}

/// Implicit QL with Wilkinson shifts on a tridiagonal matrix; rotations are
/// accumulated into the columns of `z` when present.
fn ql_implicit(
    d: &mut [f64],
    e: &mut [f64],
    mut z: Option<&mut [f64]>,
    n: usize,
) -> Result<(), NumericsError> {
    if n <= 1 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 64 {
                return Err(NumericsError::EigenNoConvergence);
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            let sign_r = if g >= 0.0 { r } else { -r };
            g = d[m] - d[l] + e[l] / (g + sign_r);
            let (mut s, mut c) = (1.0, 1.0);
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                if let Some(zz) = z.as_deref_mut() {
                    for k in 0..n {
                        f = zz[k * n + i + 1];
                        zz[k * n + i + 1] = s * zz[k * n + i] + c * f;
                        zz[k * n + i] = c * zz[k * n + i] - s * f;
                    }
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cholesky_of_known_two_by_two() {
        // [[4,2],[2,3]] factors as [[2,0],[1,sqrt(2)]].
        let m = SymMatrix::from_rows(2, &[4.0, 2.0, 2.0, 3.0]);
        let c = Cholesky::factor(&m).unwrap();
        assert!((c.factor_entry(0, 0) - 2.0).abs() < 1e-14);
        assert!((c.factor_entry(1, 0) - 1.0).abs() < 1e-14);
        assert!((c.factor_entry(1, 1) - 2.0_f64.sqrt()).abs() < 1e-14);
        assert_eq!(c.factor_entry(0, 1), 0.0);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = SymMatrix::from_rows(2, &[1.0, 2.0, 2.0, 1.0]);
        match Cholesky::factor(&m) {
            Err(NumericsError::NotPositiveDefinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
    }

    #[test]
    fn solve_posdef_matches_direct_inverse() {
        let m = SymMatrix::from_rows(3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = [1.0, -2.0, 0.5];
        let x = solve_posdef(&m, &b).unwrap();
        let r = m.mat_vec(&x);
        for i in 0..3 {
            assert!((r[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn min_eigenvalue_of_diagonal() {
        let m = SymMatrix::from_fn(3, |i, j| {
            if i == j {
                [3.0, 1.0, 2.0][i]
            } else {
                0.0
            }
        });
        assert!((min_eigenvalue(&m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_of_two_by_two() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let m = SymMatrix::from_rows(2, &[2.0, 1.0, 1.0, 2.0]);
        let vals = sym_eigenvalues(&m).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-12);
        assert!((vals[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let m = SymMatrix::from_rows(
            4,
            &[
                4.0, 1.0, -0.5, 0.2, 1.0, 3.0, 0.3, -0.1, -0.5, 0.3, 2.5, 0.4, 0.2, -0.1, 0.4, 1.5,
            ],
        );
        let (d, q) = sym_eigen(&m).unwrap();
        let n = 4;
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for t in 0..n {
                    v += q[i * n + t] * d[t] * q[j * n + t];
                }
                assert!(
                    (v - m.get(i, j)).abs() < 1e-12,
                    "reconstruction mismatch at ({i},{j})"
                );
            }
        }
        // Columns orthonormal.
        for c1 in 0..n {
            for c2 in 0..n {
                let mut v = 0.0;
                for r in 0..n {
                    v += q[r * n + c1] * q[r * n + c2];
                }
                let want = if c1 == c2 { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blocked_cholesky_matches_unblocked() {
        // Size chosen to cross the blocking boundary.
        let n = 200;
        let mut seed = 0x2545F4914F6CDD1D_u64;
        let mut rnd = || {
            // xorshift64*, deterministic test data
            seed ^= seed >> 12;
            seed ^= seed << 25;
            seed ^= seed >> 27;
            (seed.wrapping_mul(0x2545F4914F6CDD1D) >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut g = vec![0.0; n * n];
        for v in g.iter_mut() {
            *v = rnd();
        }
        // SPD: G Gᵀ + n·I
        let spd = SymMatrix::from_fn(n, |i, j| {
            let mut s = if i == j { n as f64 } else { 0.0 };
            for t in 0..n {
                s += g[i * n + t] * g[j * n + t];
            }
            s
        });
        let reference = Cholesky::factor(&spd).unwrap();
        let mut blocked = spd.as_slice().to_vec();
        factor_spd_blocked(&mut blocked, n).unwrap();
        for i in 0..n {
            for j in 0..=i {
                let diff = (blocked[i * n + j] - reference.factor_entry(i, j)).abs();
                assert!(diff < 1e-9, "factor mismatch at ({i},{j}): {diff}");
            }
        }
        // And the solve path agrees.
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = b.clone();
        spd_solve_in_place(&blocked, n, &mut x);
        let r = spd.mat_vec(&x);
        for i in 0..n {
            assert!((r[i] - b[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn cholesky_roundtrip(vals in proptest::collection::vec(-1.0_f64..1.0, 16)) {
            // A = G Gᵀ + I is SPD; L Lᵀ must reproduce it.
            let n = 4;
            let a = SymMatrix::from_fn(n, |i, j| {
                let mut s = if i == j { 1.0 } else { 0.0 };
                for t in 0..n {
                    s += vals[i * n + t] * vals[j * n + t];
                }
                s
            });
            let c = Cholesky::factor(&a).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let mut v = 0.0;
                    for t in 0..n {
                        v += c.factor_entry(i, t) * c.factor_entry(j, t);
                    }
                    prop_assert!((v - a.get(i, j)).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn eigenvalues_shift_with_identity(vals in proptest::collection::vec(-1.0_f64..1.0, 10), c in -2.0_f64..2.0) {
            // eig(A + cI) = eig(A) + c
            let n = 4;
            let mut idx = 0;
            let mut a = SymMatrix::zeros(n);
            for i in 0..n {
                for j in 0..=i {
                    a.set(i, j, vals[idx]);
                    idx += 1;
                }
            }
            let base = sym_eigenvalues(&a).unwrap();
            let mut shifted = a.clone();
            for i in 0..n {
                shifted.add(i, i, c);
            }
            let got = sym_eigenvalues(&shifted).unwrap();
            for i in 0..n {
                prop_assert!((got[i] - base[i] - c).abs() < 1e-9);
            }
        }
    }
}
