//! Per-cone algebra for the interior-point method.
//!
//! Each non-free block carries a Nesterov–Todd scaling: a symmetric-cone
//! automorphism `W` satisfying `W s = W⁻ᵀ x = λ` at the current interior
//! pair `(x, s)`. The path-following loop only touches cones through the
//! operator interface here — scaling applications, Jordan products, and
//! step-to-boundary computations — so every cone-specific formula lives in
//! this file.
//!
//! PSD blocks work on svec coordinates throughout; the scaling is kept in
//! factored form (`r`, its transposed inverse `rti`, and the geometric
//! mean `G = r rᵀ`), which sidesteps any symmetric square root.

use crate::numerics::{dot, min_eigenvalue, sym_eigen, Cholesky, SymMatrix};

use super::{Cone, SQRT2};

/// Row-major `d x d` product `out = a · b` (any of the operands optionally
/// transposed via the stride trick below).
fn mat_mul(d: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, out: &mut [f64]) {
    let (rsa, csa) = if ta { (1, d as isize) } else { (d as isize, 1) };
    let (rsb, csb) = if tb { (1, d as isize) } else { (d as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            d,
            d,
            d,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            d as isize,
            1,
        );
    }
}

/// Expands svec coordinates into a full row-major matrix.
fn svec_to_full(d: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..d {
        for j in 0..=i {
            let x = v[i * (i + 1) / 2 + j];
            if i == j {
                out[i * d + i] = x;
            } else {
                let e = x / SQRT2;
                out[i * d + j] = e;
                out[j * d + i] = e;
            }
        }
    }
}

/// Packs a full row-major matrix into svec coordinates, averaging the two
/// triangles so accumulated round-off cannot break symmetry.
fn full_to_svec(d: usize, m: &[f64], out: &mut [f64]) {
    for i in 0..d {
        for j in 0..=i {
            let avg = 0.5 * (m[i * d + j] + m[j * d + i]);
            out[i * (i + 1) / 2 + j] = if i == j { avg } else { SQRT2 * avg };
        }
    }
}

/// Row index of svec coordinate `m`: largest `i` with `i(i+1)/2 <= m`.
fn svec_row(m: usize) -> usize {
    let i = ((((8 * m + 1) as f64).sqrt() - 1.0) / 2.0) as usize;
    // Guard against the float landing a hair on the wrong side.
    if (i + 1) * (i + 2) / 2 <= m {
        i + 1
    } else if i * (i + 1) / 2 > m {
        i - 1
    } else {
        i
    }
}

pub(super) enum ScalingBlock {
    Free {
        n: usize,
    },
    NonNeg {
        /// `x_i / s_i` — the diagonal of `H⁻¹ = W²`.
        w2: Vec<f64>,
        lambda: Vec<f64>,
    },
    Soc {
        eta: f64,
        /// Unit-hyperbolic scaling point: `w̄₀² − ‖w̄₁‖² = 1`.
        wbar: Vec<f64>,
        lambda: Vec<f64>,
    },
    Psd {
        d: usize,
        /// `W(u) = svec(rᵀ U r)`; `rti = r⁻ᵀ`.
        r: Vec<f64>,
        rti: Vec<f64>,
        /// `G = r rᵀ`, so `H⁻¹(u) = svec(G U G)`.
        g: Vec<f64>,
        ginv: Vec<f64>,
        /// Scaled point is `Diag(sigma)` with all entries positive.
        sigma: Vec<f64>,
    },
}

impl ScalingBlock {
    /// Builds the NT scaling for one block, or `None` when `(x, s)` is not
    /// strictly inside the cone pair (a numeric breakdown upstream).
    pub(super) fn compute(cone: Cone, x: &[f64], s: &[f64]) -> Option<ScalingBlock> {
        match cone {
            Cone::Free(n) => Some(ScalingBlock::Free { n }),
            Cone::NonNeg(n) => {
                let mut w2 = vec![0.0; n];
                let mut lambda = vec![0.0; n];
                for i in 0..n {
                    if !(x[i] > 0.0 && s[i] > 0.0) {
                        return None;
                    }
                    w2[i] = x[i] / s[i];
                    lambda[i] = (x[i] * s[i]).sqrt();
                }
                Some(ScalingBlock::NonNeg { w2, lambda })
            }
            Cone::Soc(n) => {
                let a2 = soc_residual(x);
                let b2 = soc_residual(s);
                if !(x[0] > 0.0 && a2 > 0.0 && s[0] > 0.0 && b2 > 0.0) {
                    return None;
                }
                let a = a2.sqrt();
                let b = b2.sqrt();
                let gamma2 = 0.5 * (1.0 + dot(x, s) / (a * b));
                if !(gamma2 > 0.0) {
                    return None;
                }
                let gamma = gamma2.sqrt();
                let mut wbar = vec![0.0; n];
                wbar[0] = (x[0] / a + s[0] / b) / (2.0 * gamma);
                for i in 1..n {
                    wbar[i] = (x[i] / a - s[i] / b) / (2.0 * gamma);
                }
                let eta = (a / b).sqrt();
                let mut blk = ScalingBlock::Soc {
                    eta,
                    wbar,
                    lambda: Vec::new(),
                };
                let mut lambda = vec![0.0; n];
                blk.apply_w(s, &mut lambda);
                if let ScalingBlock::Soc { lambda: l, .. } = &mut blk {
                    *l = lambda;
                }
                Some(blk)
            }
            Cone::Psd(d) => {
                let mut x_full = vec![0.0; d * d];
                let mut s_full = vec![0.0; d * d];
                svec_to_full(d, x, &mut x_full);
                svec_to_full(d, s, &mut s_full);
                let x_sym = SymMatrix::from_rows(d, &x_full);
                let chol = Cholesky::factor(&x_sym).ok()?;
                let l1 = chol.lower();
                // K = L₁ᵀ S L₁ shares its eigenvalues with the geometric
                // mean problem; its eigendecomposition yields the factored
                // scaling directly.
                let mut sl = vec![0.0; d * d];
                mat_mul(d, &s_full, false, l1, false, &mut sl);
                let mut k_full = vec![0.0; d * d];
                mat_mul(d, l1, true, &sl, false, &mut k_full);
                let k_sym = SymMatrix::from_rows(d, &k_full);
                let (evals, vecs) = sym_eigen(&k_sym).ok()?;
                if evals[0] <= 0.0 {
                    return None;
                }
                let sigma: Vec<f64> = evals.iter().map(|e| e.sqrt()).collect();
                let mut lv = vec![0.0; d * d];
                mat_mul(d, l1, false, &vecs, false, &mut lv);
                let mut slv = vec![0.0; d * d];
                mat_mul(d, &sl, false, &vecs, false, &mut slv);
                let mut r = vec![0.0; d * d];
                let mut rti = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        let sq = sigma[j].sqrt();
                        r[i * d + j] = lv[i * d + j] / sq;
                        rti[i * d + j] = slv[i * d + j] / (sigma[j] * sq);
                    }
                }
                let mut g = vec![0.0; d * d];
                mat_mul(d, &r, false, &r, true, &mut g);
                let mut ginv = vec![0.0; d * d];
                mat_mul(d, &rti, false, &rti, true, &mut ginv);
                Some(ScalingBlock::Psd {
                    d,
                    r,
                    rti,
                    g,
                    ginv,
                    sigma,
                })
            }
            Cone::RotatedSoc(_) => unreachable!("rotated blocks are canonicalized before solving"),
        }
    }

    pub(super) fn dim(&self) -> usize {
        match self {
            ScalingBlock::Free { n } => *n,
            ScalingBlock::NonNeg { w2, .. } => w2.len(),
            ScalingBlock::Soc { wbar, .. } => wbar.len(),
            ScalingBlock::Psd { d, .. } => d * (d + 1) / 2,
        }
    }

    /// The scaled point λ itself (zero on free blocks); exercised by the
    /// scaling-identity tests below.
    #[cfg(test)]
    pub(super) fn lambda_into(&self, out: &mut [f64]) {
        match self {
            ScalingBlock::Free { .. } => out.fill(0.0),
            ScalingBlock::NonNeg { lambda, .. } | ScalingBlock::Soc { lambda, .. } => {
                out.copy_from_slice(lambda)
            }
            ScalingBlock::Psd { d, sigma, .. } => {
                out.fill(0.0);
                for i in 0..*d {
                    out[i * (i + 1) / 2 + i] = sigma[i];
                }
            }
        }
    }

    /// `out = W v`.
    pub(super) fn apply_w(&self, v: &[f64], out: &mut [f64]) {
        match self {
            ScalingBlock::Free { .. } => out.fill(0.0),
            ScalingBlock::NonNeg { w2, .. } => {
                for i in 0..w2.len() {
                    out[i] = w2[i].sqrt() * v[i];
                }
            }
            ScalingBlock::Soc { eta, wbar, .. } => soc_apply_p_half(*eta, wbar, v, out),
            ScalingBlock::Psd { d, r, .. } => psd_congruence(*d, r, true, v, out),
        }
    }

    /// `out = W⁻ᵀ v`.
    pub(super) fn apply_wti(&self, v: &[f64], out: &mut [f64]) {
        match self {
            ScalingBlock::Free { .. } => out.fill(0.0),
            ScalingBlock::NonNeg { w2, .. } => {
                for i in 0..w2.len() {
                    out[i] = v[i] / w2[i].sqrt();
                }
            }
            ScalingBlock::Soc { eta, wbar, .. } => {
                soc_apply_p_half_inv(*eta, wbar, v, out);
            }
            ScalingBlock::Psd { d, rti, .. } => psd_congruence(*d, rti, true, v, out),
        }
    }

    /// `out = W⁻¹ v`.
    pub(super) fn apply_winv(&self, v: &[f64], out: &mut [f64]) {
        match self {
            ScalingBlock::Free { .. } => out.fill(0.0),
            ScalingBlock::NonNeg { .. } => self.apply_wti(v, out),
            ScalingBlock::Soc { .. } => self.apply_wti(v, out),
            ScalingBlock::Psd { d, rti, .. } => psd_congruence(*d, rti, false, v, out),
        }
    }

    /// `out = H⁻¹ v` with `H = W⁻¹W⁻ᵀ`, i.e. `H⁻¹ = WᵀW`.
    pub(super) fn apply_hinv(&self, v: &[f64], out: &mut [f64]) {
        match self {
            ScalingBlock::Free { .. } => out.fill(0.0),
            ScalingBlock::NonNeg { w2, .. } => {
                for i in 0..w2.len() {
                    out[i] = w2[i] * v[i];
                }
            }
            ScalingBlock::Soc { eta, wbar, .. } => {
                // η² P(w̄) v with P(w̄) = 2 w̄ w̄ᵀ − J.
                let t = dot(wbar, v);
                let e2 = eta * eta;
                out[0] = e2 * (2.0 * wbar[0] * t - v[0]);
                for i in 1..wbar.len() {
                    out[i] = e2 * (2.0 * wbar[i] * t + v[i]);
                }
            }
            ScalingBlock::Psd { d, g, .. } => psd_sandwich(*d, g, v, out),
        }
    }

    /// `out = H v`; only used to form true-system residuals for iterative
    /// refinement of the Newton solves.
    pub(super) fn apply_h(&self, v: &[f64], out: &mut [f64]) {
        match self {
            ScalingBlock::Free { .. } => out.fill(0.0),
            ScalingBlock::NonNeg { w2, .. } => {
                for i in 0..w2.len() {
                    out[i] = v[i] / w2[i];
                }
            }
            ScalingBlock::Soc { eta, wbar, .. } => {
                // η⁻² P(Jw̄) v; note ‖Jw̄‖ is again unit-hyperbolic.
                let mut t = wbar[0] * v[0];
                for i in 1..wbar.len() {
                    t -= wbar[i] * v[i];
                }
                let e2 = 1.0 / (eta * eta);
                out[0] = e2 * (2.0 * wbar[0] * t - v[0]);
                for i in 1..wbar.len() {
                    out[i] = e2 * (-2.0 * wbar[i] * t + v[i]);
                }
            }
            ScalingBlock::Psd { d, ginv, .. } => psd_sandwich(*d, ginv, v, out),
        }
    }

    /// `H⁻¹` applied to a sparse vector given as `(local coordinate,
    /// value)` pairs, accumulated into a dense output segment. This is the
    /// kernel of the Schur-complement assembly.
    pub(super) fn hinv_sparse(&self, terms: &[(usize, f64)], out: &mut [f64]) {
        match self {
            ScalingBlock::Free { .. } => {}
            ScalingBlock::NonNeg { w2, .. } => {
                for &(i, v) in terms {
                    out[i] += w2[i] * v;
                }
            }
            ScalingBlock::Soc { .. } => {
                let n = self.dim();
                let mut dense = vec![0.0; n];
                for &(i, v) in terms {
                    dense[i] += v;
                }
                let mut res = vec![0.0; n];
                self.apply_hinv(&dense, &mut res);
                for i in 0..n {
                    out[i] += res[i];
                }
            }
            ScalingBlock::Psd { d, g, .. } => {
                let d = *d;
                // G U G expands into symmetrized outer products of G's
                // columns, one per nonzero of U.
                let mut acc = vec![0.0; d * d];
                for &(m, v) in terms {
                    let i = svec_row(m);
                    let j = m - i * (i + 1) / 2;
                    let gi = &g[i * d..(i + 1) * d];
                    if i == j {
                        for p in 0..d {
                            let w = v * gi[p];
                            for q in 0..=p {
                                acc[p * d + q] += w * gi[q];
                            }
                        }
                    } else {
                        let alpha = v / SQRT2;
                        let gj = &g[j * d..(j + 1) * d];
                        for p in 0..d {
                            let wi = alpha * gi[p];
                            let wj = alpha * gj[p];
                            for q in 0..=p {
                                acc[p * d + q] += wi * gj[q] + wj * gi[q];
                            }
                        }
                    }
                }
                for p in 0..d {
                    for q in 0..=p {
                        let val = acc[p * d + q];
                        out[p * (p + 1) / 2 + q] += if p == q { val } else { SQRT2 * val };
                    }
                }
            }
        }
    }

    /// `out = λ ∘ λ`.
    pub(super) fn lambda_squared(&self, out: &mut [f64]) {
        match self {
            ScalingBlock::Free { .. } => out.fill(0.0),
            ScalingBlock::NonNeg { lambda, .. } => {
                for i in 0..lambda.len() {
                    out[i] = lambda[i] * lambda[i];
                }
            }
            ScalingBlock::Soc { lambda, .. } => {
                out[0] = dot(lambda, lambda);
                for i in 1..lambda.len() {
                    out[i] = 2.0 * lambda[0] * lambda[i];
                }
            }
            ScalingBlock::Psd { d, sigma, .. } => {
                out.fill(0.0);
                for i in 0..*d {
                    out[i * (i + 1) / 2 + i] = sigma[i] * sigma[i];
                }
            }
        }
    }

    /// `out = λ \ v` (inverse of the Jordan product against λ).
    pub(super) fn lambda_solve(&self, v: &[f64], out: &mut [f64]) {
        match self {
            ScalingBlock::Free { .. } => out.fill(0.0),
            ScalingBlock::NonNeg { lambda, .. } => {
                for i in 0..lambda.len() {
                    out[i] = v[i] / lambda[i];
                }
            }
            ScalingBlock::Soc { lambda, .. } => {
                let det = lambda[0] * lambda[0] - dot(&lambda[1..], &lambda[1..]);
                let u0 = (lambda[0] * v[0] - dot(&lambda[1..], &v[1..])) / det;
                out[0] = u0;
                for i in 1..lambda.len() {
                    out[i] = (v[i] - u0 * lambda[i]) / lambda[0];
                }
            }
            ScalingBlock::Psd { d, sigma, .. } => {
                for i in 0..*d {
                    for j in 0..=i {
                        let m = i * (i + 1) / 2 + j;
                        out[m] = 2.0 * v[m] / (sigma[i] + sigma[j]);
                    }
                }
            }
        }
    }

    /// Jordan product `out = u ∘ v` in the block's algebra.
    pub(super) fn jordan_product(&self, u: &[f64], v: &[f64], out: &mut [f64]) {
        match self {
            ScalingBlock::Free { .. } => out.fill(0.0),
            ScalingBlock::NonNeg { w2, .. } => {
                for i in 0..w2.len() {
                    out[i] = u[i] * v[i];
                }
            }
            ScalingBlock::Soc { .. } => {
                out[0] = dot(u, v);
                for i in 1..u.len() {
                    out[i] = u[0] * v[i] + v[0] * u[i];
                }
            }
            ScalingBlock::Psd { d, .. } => {
                let d = *d;
                let mut uf = vec![0.0; d * d];
                let mut vf = vec![0.0; d * d];
                svec_to_full(d, u, &mut uf);
                svec_to_full(d, v, &mut vf);
                let mut uv = vec![0.0; d * d];
                mat_mul(d, &uf, false, &vf, false, &mut uv);
                // full_to_svec averages the triangles, which is exactly
                // the symmetrization (UV + VU)/2.
                full_to_svec(d, &uv, out);
            }
        }
    }

    /// Largest step α with `λ + α·dir` still in the cone (∞ when the whole
    /// ray stays inside).
    pub(super) fn max_step(&self, dir: &[f64]) -> f64 {
        match self {
            ScalingBlock::Free { .. } => f64::INFINITY,
            ScalingBlock::NonNeg { lambda, .. } => {
                let mut alpha = f64::INFINITY;
                for i in 0..lambda.len() {
                    if dir[i] < 0.0 {
                        alpha = alpha.min(lambda[i] / -dir[i]);
                    }
                }
                alpha
            }
            ScalingBlock::Soc { lambda, .. } => {
                // Boundary crossing of the hyperbolic residual along the
                // ray: smallest positive root of c₂α² + c₁α + c₀.
                let c2 = dir[0] * dir[0] - dot(&dir[1..], &dir[1..]);
                let c1 = 2.0 * (lambda[0] * dir[0] - dot(&lambda[1..], &dir[1..]));
                let c0 = lambda[0] * lambda[0] - dot(&lambda[1..], &lambda[1..]);
                smallest_positive_root(c2, c1, c0)
            }
            ScalingBlock::Psd { d, sigma, .. } => {
                let d = *d;
                let mut df = vec![0.0; d * d];
                svec_to_full(d, dir, &mut df);
                let scaled = SymMatrix::from_fn(d, |i, j| {
                    df[i * d + j] / (sigma[i] * sigma[j]).sqrt()
                });
                match min_eigenvalue(&scaled) {
                    Ok(nu) if nu < 0.0 => 1.0 / -nu,
                    Ok(_) => f64::INFINITY,
                    Err(_) => 0.0,
                }
            }
        }
    }
}

/// `x₀² − ‖x₁‖²`, the quantity whose positivity (with `x₀ > 0`) defines
/// second-order cone interiority.
fn soc_residual(x: &[f64]) -> f64 {
    x[0] * x[0] - dot(&x[1..], &x[1..])
}

/// Applies `η P(w̄^{1/2})`, the symmetric square-root form of the scaling.
fn soc_apply_p_half(eta: f64, wbar: &[f64], v: &[f64], out: &mut [f64]) {
    let t = dot(&wbar[1..], &v[1..]);
    out[0] = eta * (wbar[0] * v[0] + t);
    let coef = eta * (v[0] + t / (1.0 + wbar[0]));
    for i in 1..wbar.len() {
        out[i] = eta * v[i] + coef * wbar[i];
    }
}

/// Applies the inverse of [`soc_apply_p_half`].
fn soc_apply_p_half_inv(eta: f64, wbar: &[f64], v: &[f64], out: &mut [f64]) {
    let t = dot(&wbar[1..], &v[1..]);
    out[0] = (wbar[0] * v[0] - t) / eta;
    let coef = (-v[0] + t / (1.0 + wbar[0])) / eta;
    for i in 1..wbar.len() {
        out[i] = v[i] / eta + coef * wbar[i];
    }
}

/// svec congruence `out = svec(Mᵀ U M)` (`transpose_left`) or
/// `out = svec(M U Mᵀ)` for `U = mat(v)`.
fn psd_congruence(d: usize, m: &[f64], transpose_left: bool, v: &[f64], out: &mut [f64]) {
    let mut u = vec![0.0; d * d];
    svec_to_full(d, v, &mut u);
    let mut um = vec![0.0; d * d];
    let mut t = vec![0.0; d * d];
    if transpose_left {
        mat_mul(d, &u, false, m, false, &mut um);
        mat_mul(d, m, true, &um, false, &mut t);
    } else {
        mat_mul(d, &u, false, m, true, &mut um);
        mat_mul(d, m, false, &um, false, &mut t);
    }
    full_to_svec(d, &t, out);
}

/// `out = svec(G U G)` for symmetric `G`.
fn psd_sandwich(d: usize, g: &[f64], v: &[f64], out: &mut [f64]) {
    let mut u = vec![0.0; d * d];
    svec_to_full(d, v, &mut u);
    let mut ug = vec![0.0; d * d];
    let mut t = vec![0.0; d * d];
    mat_mul(d, &u, false, g, false, &mut ug);
    mat_mul(d, g, false, &ug, false, &mut t);
    full_to_svec(d, &t, out);
}

/// Smallest positive root of `c₂α² + c₁α + c₀ = 0`, or ∞ when the
/// quadratic never crosses zero for α > 0 (`c₀ > 0` is assumed).
fn smallest_positive_root(c2: f64, c1: f64, c0: f64) -> f64 {
    if c2 == 0.0 {
        return if c1 < 0.0 { -c0 / c1 } else { f64::INFINITY };
    }
    let disc = c1 * c1 - 4.0 * c2 * c0;
    if disc < 0.0 {
        // No real crossing; with c₂ < 0 this cannot happen.
        return f64::INFINITY;
    }
    let sq = disc.sqrt();
    let q = -0.5 * (c1 + c1.signum() * sq);
    let mut best = f64::INFINITY;
    if q != 0.0 {
        let r1 = q / c2;
        if r1 > 0.0 {
            best = best.min(r1);
        }
        let r2 = c0 / q;
        if r2 > 0.0 {
            best = best.min(r2);
        }
    } else {
        // c1 == 0 and disc == 0 means a double root at the origin.
        let r = (-c0 / c2).max(0.0).sqrt();
        if r > 0.0 {
            best = r;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::super::{svec, unsvec};
    use super::*;
    use approx::assert_abs_diff_eq;

    fn seeded_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15).max(1);
        (0..n)
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect()
    }

    fn interior_soc(n: usize, seed: u64) -> Vec<f64> {
        let mut v = seeded_vec(n, seed);
        let norm: f64 = dot(&v[1..], &v[1..]).sqrt();
        v[0] = norm + 0.7;
        v
    }

    fn interior_psd(d: usize, seed: u64) -> Vec<f64> {
        let b = seeded_vec(d * d, seed);
        let m = SymMatrix::from_fn(d, |i, j| {
            let mut acc = if i == j { 0.9 } else { 0.0 };
            for k in 0..d {
                acc += b[i * d + k] * b[j * d + k];
            }
            acc
        });
        svec(&m)
    }

    fn check_nt_identity(cone: Cone, x: &[f64], s: &[f64]) {
        let blk = ScalingBlock::compute(cone, x, s).expect("interior");
        let n = blk.dim();
        let mut ws = vec![0.0; n];
        let mut wtx = vec![0.0; n];
        let mut lam = vec![0.0; n];
        blk.apply_w(s, &mut ws);
        blk.apply_wti(x, &mut wtx);
        blk.lambda_into(&mut lam);
        for i in 0..n {
            assert_abs_diff_eq!(ws[i], lam[i], epsilon = 1e-10);
            assert_abs_diff_eq!(wtx[i], lam[i], epsilon = 1e-10);
        }
        // Round trips and operator consistency on a generic vector.
        let v = seeded_vec(n, 99);
        let mut wv = vec![0.0; n];
        let mut back = vec![0.0; n];
        blk.apply_w(&v, &mut wv);
        blk.apply_winv(&wv, &mut back);
        for i in 0..n {
            assert_abs_diff_eq!(back[i], v[i], epsilon = 1e-10);
        }
        // H⁻¹ = Wᵀ W and H its inverse.
        let mut wtv = vec![0.0; n];
        blk.apply_wti(&v, &mut wtv);
        let mut winv_wtv = vec![0.0; n];
        blk.apply_winv(&wtv, &mut winv_wtv);
        let mut h_v = vec![0.0; n];
        blk.apply_h(&v, &mut h_v);
        for i in 0..n {
            assert_abs_diff_eq!(winv_wtv[i], h_v[i], epsilon = 1e-9);
        }
        let mut hinv_hv = vec![0.0; n];
        blk.apply_hinv(&h_v, &mut hinv_hv);
        for i in 0..n {
            assert_abs_diff_eq!(hinv_hv[i], v[i], epsilon = 1e-9);
        }
        // λ ∘ (λ \ v) = v.
        let mut lsv = vec![0.0; n];
        blk.lambda_solve(&v, &mut lsv);
        let mut lam_vec = vec![0.0; n];
        blk.lambda_into(&mut lam_vec);
        let mut prod = vec![0.0; n];
        blk.jordan_product(&lam_vec, &lsv, &mut prod);
        for i in 0..n {
            assert_abs_diff_eq!(prod[i], v[i], epsilon = 1e-9);
        }
    }

    #[test]
    fn nonneg_scaling_identities() {
        let x = vec![0.5, 2.0, 1.25];
        let s = vec![0.125, 0.75, 3.0];
        check_nt_identity(Cone::NonNeg(3), &x, &s);
    }

    #[test]
    fn soc_scaling_identities() {
        let x = interior_soc(5, 3);
        let s = interior_soc(5, 8);
        check_nt_identity(Cone::Soc(5), &x, &s);
    }

    #[test]
    fn psd_scaling_identities() {
        let x = interior_psd(4, 5);
        let s = interior_psd(4, 11);
        check_nt_identity(Cone::Psd(4), &x, &s);
    }

    #[test]
    fn psd_hinv_sparse_matches_dense() {
        let x = interior_psd(5, 21);
        let s = interior_psd(5, 77);
        let blk = ScalingBlock::compute(Cone::Psd(5), &x, &s).unwrap();
        let n = blk.dim();
        let terms = [(0usize, 1.3), (4, -0.4), (9, 2.2), (12, 0.05)];
        let mut dense_in = vec![0.0; n];
        for &(i, v) in &terms {
            dense_in[i] = v;
        }
        let mut expect = vec![0.0; n];
        blk.apply_hinv(&dense_in, &mut expect);
        let mut got = vec![0.0; n];
        blk.hinv_sparse(&terms, &mut got);
        for i in 0..n {
            assert_abs_diff_eq!(got[i], expect[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn soc_step_to_boundary_is_exact() {
        let x = interior_soc(4, 2);
        let s = interior_soc(4, 6);
        let blk = ScalingBlock::compute(Cone::Soc(4), &x, &s).unwrap();
        let dir = seeded_vec(4, 17);
        let alpha = blk.max_step(&dir);
        assert!(alpha.is_finite());
        let mut lam = vec![0.0; 4];
        blk.lambda_into(&mut lam);
        let at: Vec<f64> = (0..4).map(|i| lam[i] + alpha * dir[i]).collect();
        assert_abs_diff_eq!(soc_residual(&at), 0.0, epsilon = 1e-9);
        let just_inside: Vec<f64> = (0..4).map(|i| lam[i] + 0.999 * alpha * dir[i]).collect();
        assert!(soc_residual(&just_inside) > 0.0 && just_inside[0] > 0.0);
    }

    #[test]
    fn psd_step_to_boundary_is_exact() {
        let x = interior_psd(3, 31);
        let s = interior_psd(3, 32);
        let blk = ScalingBlock::compute(Cone::Psd(3), &x, &s).unwrap();
        let dir = seeded_vec(6, 40);
        let alpha = blk.max_step(&dir);
        assert!(alpha.is_finite());
        let mut lam = vec![0.0; 6];
        blk.lambda_into(&mut lam);
        let at: Vec<f64> = (0..6).map(|i| lam[i] + alpha * dir[i]).collect();
        let m = unsvec(3, &at);
        assert_abs_diff_eq!(min_eigenvalue(&m).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn svec_row_decodes_all_coordinates() {
        for i in 0..120usize {
            for j in 0..=i {
                let m = i * (i + 1) / 2 + j;
                assert_eq!(svec_row(m), i, "coordinate {m}");
            }
        }
    }
}
