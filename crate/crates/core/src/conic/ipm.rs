//! Homogeneous self-dual predictor-corrector path follower.
//!
//! The solver embeds the primal-dual pair into the homogeneous model
//!
//! ```text
//!     A x − b τ          = 0
//!     Aᵀy + s − c τ      = 0
//!     cᵀx − bᵀy + κ      = 0,   x ∈ K, s ∈ K*, τ, κ ≥ 0,
//! ```
//!
//! whose strictly complementary solutions either de-homogenize to an
//! optimal pair (τ > 0) or expose an infeasibility certificate (κ > 0).
//! Each iteration takes a Mehrotra predictor-corrector step in the
//! Nesterov–Todd scaled space; the Newton systems are reduced to one dense
//! Schur complement on the equality rows, factored once per iteration and
//! reused for the three solves (embedding column, predictor, corrector).
//!
//! Free variables get no scaling; their columns are carried as a border
//! around the Schur complement, solved through a small secondary system.
//! Rotated second-order blocks are rotated onto plain second-order blocks
//! up front, and the data is Ruiz-equilibrated; all convergence decisions
//! are made on the *original* (unequilibrated) data so the reported
//! tolerances mean what they say.

use crate::numerics::{
    dot, factor_spd_clamped_columns, norm2, norm_inf, spd_solve_in_place, Cholesky, SymMatrix,
};

use super::cones::ScalingBlock;
use super::{Cone, ConeProgram, ConicSolution, IpmSettings, SolveStatus, SQRT2};

/// Rows processed per strip of the Schur-complement assembly; bounds the
/// dense scratch to `CHUNK · n` floats.
const CHUNK: usize = 64;

/// Step lengths below this, twice in a row, are treated as a stall.
const STALL_STEP: f64 = 1e-8;

/// How far past the requested tolerances the best iterate may sit and
/// still be reported as solved when the Newton machinery bottoms out.
const ACCEPT_RELAX: f64 = 5.0;

/// Infeasibility certificates are only examined once τ is this small
/// relative to κ, so near-feasible problems are not misclassified.
const CERT_TAU_GATE: f64 = 1e-2;

pub(super) fn solve_once(
    program: &ConeProgram,
    settings: &IpmSettings,
    reg: f64,
) -> Option<ConicSolution> {
    let canon = canonicalize(program);
    let sc = equilibrate(&canon);
    let n = canon.n;
    let m = canon.m;
    let deg: usize = canon
        .cones
        .iter()
        .map(|c| match *c {
            Cone::Free(_) => 0,
            Cone::NonNeg(k) => k,
            Cone::Soc(_) => 1,
            Cone::Psd(d) => d,
            Cone::RotatedSoc(_) => unreachable!(),
        })
        .sum();

    // Unit initialization: identity elements on the cones, zeros on free
    // blocks, τ = κ = 1.
    let e0 = unit_point(&canon);
    let mut x = e0.clone();
    let mut s = e0.clone();
    let mut y = vec![0.0; m];
    let mut tau = 1.0_f64;
    let mut kappa = 1.0_f64;

    let neg_c: Vec<f64> = sc.c.iter().map(|v| -v).collect();
    let norm_b0 = norm2(&canon.b);
    let norm_c0 = norm2(&canon.c);

    // Large, reused buffers.
    let mut smat = vec![0.0_f64; m * m];
    let mut wchunk = vec![0.0_f64; CHUNK * n];

    let mut consec_stalls = 0usize;
    let mut iter = 0usize;
    let trace = std::env::var_os("DRPO_IPM_TRACE").is_some();

    // Best iterate seen, by worst tolerance ratio. If the endgame linear
    // algebra dies before the strict test passes, a near-tolerance iterate
    // is still the answer: past the accuracy floor of the factored Schur
    // complement, more iterations only add noise.
    let mut best_score = f64::INFINITY;
    let mut best: Option<(Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)> = None;

    'newton: loop {
        // ---- Convergence and certificates, in original coordinates. ----
        let x_o: Vec<f64> = (0..n).map(|j| sc.nu_b * sc.d_c[j] * x[j]).collect();
        let y_o: Vec<f64> = (0..m).map(|p| sc.nu_c * sc.d_r[p] * y[p]).collect();
        let s_o: Vec<f64> = (0..n).map(|j| sc.nu_c / sc.d_c[j] * s[j]).collect();

        let xh: Vec<f64> = x_o.iter().map(|v| v / tau).collect();
        let yh: Vec<f64> = y_o.iter().map(|v| v / tau).collect();
        let sh: Vec<f64> = s_o.iter().map(|v| v / tau).collect();

        let pobj = dot(&canon.c, &xh);
        let dobj = dot(&canon.b, &yh);
        let mut rp_o = mul_a(&canon.rows, &xh, m);
        for p in 0..m {
            rp_o[p] -= canon.b[p];
        }
        let mut rd_o = mul_at(&canon.rows, &yh, n);
        for j in 0..n {
            rd_o[j] += sh[j] - canon.c[j];
        }
        let prel = norm2(&rp_o) / (1.0 + norm_b0);
        let drel = norm2(&rd_o) / (1.0 + norm_c0);
        let gap = dot(&xh, &sh);
        let objscale = 1.0 + pobj.abs();
        let score = (prel / settings.feas_tol)
            .max(drel / settings.feas_tol)
            .max(gap / (settings.gap_tol * objscale))
            .max((pobj - dobj).abs() / (settings.gap_tol * objscale));
        if score.is_finite() && score < best_score {
            best_score = score;
            best = Some((xh.clone(), yh.clone(), sh.clone(), pobj, dobj));
        }
        if prel <= settings.feas_tol
            && drel <= settings.feas_tol
            && gap <= settings.gap_tol * objscale
            && (pobj - dobj).abs() <= settings.gap_tol * objscale
        {
            return Some(finish(
                program,
                &canon,
                settings,
                SolveStatus::Optimal,
                &xh,
                &yh,
                &sh,
                pobj,
                dobj,
                iter,
            ));
        }

        if tau < CERT_TAU_GATE * kappa.min(1.0) {
            let by = dot(&canon.b, &y_o);
            if by > 0.0 {
                let y_cert: Vec<f64> = y_o.iter().map(|v| v / by).collect();
                let s_cert: Vec<f64> = s_o.iter().map(|v| v / by).collect();
                let mut res = mul_at(&canon.rows, &y_cert, n);
                for j in 0..n {
                    res[j] += s_cert[j];
                }
                if norm_inf(&res) <= settings.feas_tol * canon.norm_a {
                    return Some(finish(
                        program,
                        &canon,
                        settings,
                        SolveStatus::Infeasible,
                        &vec![0.0; n],
                        &y_cert,
                        &s_cert,
                        f64::INFINITY,
                        f64::INFINITY,
                        iter,
                    ));
                }
            }
            let cx = dot(&canon.c, &x_o);
            if cx < 0.0 {
                let x_cert: Vec<f64> = x_o.iter().map(|v| v / -cx).collect();
                let res = mul_a(&canon.rows, &x_cert, m);
                if norm_inf(&res) <= settings.feas_tol * canon.norm_a {
                    return Some(finish(
                        program,
                        &canon,
                        settings,
                        SolveStatus::Unbounded,
                        &x_cert,
                        &vec![0.0; m],
                        &vec![0.0; n],
                        f64::NEG_INFINITY,
                        f64::NEG_INFINITY,
                        iter,
                    ));
                }
            }
        }

        if iter >= settings.max_iterations {
            return Some(finish(
                program,
                &canon,
                settings,
                SolveStatus::IterLimit,
                &xh,
                &yh,
                &sh,
                pobj,
                dobj,
                iter,
            ));
        }

        // ---- Nesterov-Todd scalings for the current interior pair. ----
        let mut scalings = Vec::with_capacity(canon.cones.len());
        for (bi, cone) in canon.cones.iter().enumerate() {
            let off = canon.offsets[bi];
            let len = cone.len();
            match ScalingBlock::compute(*cone, &x[off..off + len], &s[off..off + len]) {
                Some(blk) => scalings.push(blk),
                None => {
                    if trace {
                        eprintln!("  scaling failed on block {bi} at iter {iter}");
                    }
                    break 'newton;
                }
            }
        }

        let kkt = match Kkt::build(&sc, &scalings, &canon.offsets, reg, &mut smat, &mut wchunk) {
            Some(kkt) => kkt,
            None => {
                if trace {
                    eprintln!("  kkt factorization failed at iter {iter}");
                }
                break 'newton;
            }
        };

        // ---- Residuals of the homogeneous model (scaled space). ----
        let mut rp = mul_a(&sc.rows, &x, m);
        for p in 0..m {
            rp[p] -= sc.b[p] * tau;
        }
        let mut rd = mul_at(&sc.rows, &y, n);
        for j in 0..n {
            rd[j] += s[j] - sc.c[j] * tau;
        }
        let rg = dot(&sc.c, &x) - dot(&sc.b, &y) + kappa;
        let mu = (dot(&x, &s) + tau * kappa) / (deg + 1) as f64;
        if trace {
            eprintln!(
                "it {iter:3} mu {mu:9.2e} prel {prel:9.2e} drel {drel:9.2e} gap {gap:9.2e} tau {tau:8.2e} kappa {kappa:8.2e} pobj {pobj:12.5e}"
            );
        }
        if !(mu.is_finite() && mu > 0.0) {
            break 'newton;
        }

        // Embedding column, shared by predictor and corrector.
        let (x2, u2) = kkt.solve(&neg_c, &sc.b);
        let denom = dot(&sc.c, &x2) + dot(&sc.b, &u2) - kappa / tau;
        if !denom.is_finite() || denom >= 0.0 {
            if trace {
                eprintln!("  embedding denominator {denom:9.2e} at iter {iter}");
            }
            break 'newton;
        }

        let mut lam2 = vec![0.0; n];
        for (bi, blk) in scalings.iter().enumerate() {
            let off = canon.offsets[bi];
            blk.lambda_squared(&mut lam2[off..off + blk.dim()]);
        }

        // ---- Predictor (affine scaling direction). ----
        let ds_aff: Vec<f64> = lam2.iter().map(|v| -v).collect();
        let aff = newton_direction(
            &kkt, &scalings, &canon.offsets, &sc, &rp, &rd, rg, &ds_aff,
            -tau * kappa, 1.0, tau, kappa, &x2, &u2,
        );
        let (wtdx_a, wds_a) = scaled_pair(&scalings, &canon.offsets, &aff.dx, &aff.ds);
        let alpha_aff = step_limit(
            &scalings,
            &canon.offsets,
            &wtdx_a,
            &wds_a,
            tau,
            aff.dtau,
            kappa,
            aff.dkappa,
        )
        .min(1.0);
        let mut dot_aff = tau + alpha_aff * aff.dtau;
        dot_aff *= kappa + alpha_aff * aff.dkappa;
        for j in 0..n {
            dot_aff += (x[j] + alpha_aff * aff.dx[j]) * (s[j] + alpha_aff * aff.ds[j]);
        }
        let mu_aff = dot_aff / (deg + 1) as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        // ---- Corrector (combined direction). ----
        let mut corr = vec![0.0; n];
        for (bi, blk) in scalings.iter().enumerate() {
            let off = canon.offsets[bi];
            let d = blk.dim();
            blk.jordan_product(&wtdx_a[off..off + d], &wds_a[off..off + d], &mut corr[off..off + d]);
        }
        let mut ds_comb = vec![0.0; n];
        for j in 0..n {
            ds_comb[j] = -lam2[j] + sigma * mu * e0[j] - corr[j];
        }
        let dk_comb = -tau * kappa + sigma * mu - aff.dtau * aff.dkappa;
        let dir = newton_direction(
            &kkt, &scalings, &canon.offsets, &sc, &rp, &rd, rg, &ds_comb,
            dk_comb, 1.0 - sigma, tau, kappa, &x2, &u2,
        );
        let (wtdx, wds) = scaled_pair(&scalings, &canon.offsets, &dir.dx, &dir.ds);
        let amax = step_limit(
            &scalings,
            &canon.offsets,
            &wtdx,
            &wds,
            tau,
            dir.dtau,
            kappa,
            dir.dkappa,
        );
        let alpha = (0.99 * amax).min(1.0);
        if !alpha.is_finite() || alpha <= 0.0 {
            if trace {
                eprintln!("  dead step alpha {alpha:9.2e} at iter {iter}");
            }
            break 'newton;
        }
        if alpha < STALL_STEP {
            consec_stalls += 1;
            if consec_stalls >= 2 {
                if trace {
                    eprintln!("  stalled twice (alpha {alpha:9.2e}) at iter {iter}");
                }
                break 'newton;
            }
        } else {
            consec_stalls = 0;
        }

        for j in 0..n {
            x[j] += alpha * dir.dx[j];
            s[j] += alpha * dir.ds[j];
        }
        for p in 0..m {
            y[p] += alpha * dir.dy[p];
        }
        tau += alpha * dir.dtau;
        kappa += alpha * dir.dkappa;
        if !(tau.is_finite() && kappa.is_finite() && tau > 0.0 && kappa > 0.0) {
            break 'newton;
        }
        iter += 1;
    }

    // Accuracy floor reached. Accept the best iterate if it came close
    // enough to the requested tolerances; otherwise report the failure.
    if let Some((xh, yh, sh, pobj, dobj)) = best {
        if best_score <= ACCEPT_RELAX {
            if trace {
                eprintln!("  accepting best iterate, worst ratio {best_score:.2}");
            }
            return Some(finish(
                program,
                &canon,
                settings,
                SolveStatus::Optimal,
                &xh,
                &yh,
                &sh,
                pobj,
                dobj,
                iter,
            ));
        }
    }
    None
}

pub(super) fn failure_solution(program: &ConeProgram, settings: &IpmSettings) -> ConicSolution {
    ConicSolution {
        status: SolveStatus::NumericFailure,
        primal: vec![0.0; program.num_vars()],
        dual_y: vec![0.0; program.num_rows()],
        dual_slack: vec![0.0; program.num_vars()],
        primal_objective: 0.0,
        dual_objective: 0.0,
        complementarity_gap: 0.0,
        iterations: 0,
        feas_tol: settings.feas_tol,
        gap_tol: settings.gap_tol,
        cones: program.cones().to_vec(),
        offsets: program.offsets.clone(),
    }
}

// ---------------------------------------------------------------------
// Canonicalization and equilibration
// ---------------------------------------------------------------------

struct Canon {
    cones: Vec<Cone>,
    offsets: Vec<usize>,
    n: usize,
    m: usize,
    rows: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    c: Vec<f64>,
    norm_a: f64,
    /// `(offset, len)` of every block that was rotated from a rotated
    /// second-order cone, for mapping solutions back.
    rsoc: Vec<(usize, usize)>,
}

/// Rewrites rotated second-order blocks as plain second-order blocks via
/// the isometry `(u, v, w) = ((p₀+p₁)/√2, (p₀−p₁)/√2, p₂../√2)`.
fn canonicalize(program: &ConeProgram) -> Canon {
    let n = program.num_vars();
    let m = program.num_rows();
    let mut cones = Vec::with_capacity(program.cones().len());
    let mut rsoc = Vec::new();
    // Block offset of the rotated block owning each coordinate, if any.
    let mut rot_of: Vec<usize> = vec![usize::MAX; n];
    for (bi, cone) in program.cones().iter().enumerate() {
        let off = program.block_offset(bi);
        match *cone {
            Cone::RotatedSoc(len) => {
                cones.push(Cone::Soc(len));
                rsoc.push((off, len));
                for c in off..off + len {
                    rot_of[c] = off;
                }
            }
            other => cones.push(other),
        }
    }
    let offsets: Vec<usize> = (0..cones.len()).map(|b| program.block_offset(b)).collect();

    let rot_terms = |terms: &[(usize, f64)]| -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(terms.len() + 2);
        for &(c, v) in terms {
            let off = rot_of[c];
            if off == usize::MAX {
                out.push((c, v));
            } else {
                match c - off {
                    0 => {
                        out.push((off, v / SQRT2));
                        out.push((off + 1, v / SQRT2));
                    }
                    1 => {
                        out.push((off, v / SQRT2));
                        out.push((off + 1, -v / SQRT2));
                    }
                    _ => out.push((c, v / SQRT2)),
                }
            }
        }
        out.sort_by_key(|&(c, _)| c);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(out.len());
        for (c, v) in out {
            match merged.last_mut() {
                Some((lc, lv)) if *lc == c => *lv += v,
                _ => merged.push((c, v)),
            }
        }
        merged
    };

    let mut rows = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    let mut norm_a = 1.0_f64;
    for row in program.rows() {
        let terms = rot_terms(&row.terms);
        for &(_, v) in &terms {
            norm_a = norm_a.max(v.abs());
        }
        rows.push(terms);
        b.push(row.rhs);
    }
    let c_terms: Vec<(usize, f64)> = program
        .objective()
        .iter()
        .enumerate()
        .filter(|&(_, v)| *v != 0.0)
        .map(|(j, v)| (j, *v))
        .collect();
    let mut c = vec![0.0; n];
    for (j, v) in rot_terms(&c_terms) {
        c[j] = v;
    }

    Canon {
        cones,
        offsets,
        n,
        m,
        rows,
        b,
        c,
        norm_a,
        rsoc,
    }
}

struct ScaledData {
    rows: Vec<Vec<(usize, f64)>>,
    /// Per row, the coefficients on non-free coordinates only.
    rows_coned: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
    c: Vec<f64>,
    d_r: Vec<f64>,
    d_c: Vec<f64>,
    nu_b: f64,
    nu_c: f64,
    free_coords: Vec<usize>,
    /// Sparse columns of the free part of `A`: per free slot, the
    /// `(row, coefficient)` pairs.
    free_cols: Vec<Vec<(usize, f64)>>,
}

/// Ruiz equilibration, three sweeps. Free and nonnegative coordinates are
/// scaled individually; each second-order or PSD block gets one scalar so
/// the scaling is a cone automorphism.
fn equilibrate(canon: &Canon) -> ScaledData {
    let n = canon.n;
    let m = canon.m;
    let mut rows = canon.rows.clone();
    let mut d_r = vec![1.0_f64; m];
    let mut d_c = vec![1.0_f64; n];

    for _ in 0..3 {
        let mut rnorm = vec![0.0_f64; m];
        let mut cnorm = vec![0.0_f64; n];
        for (p, row) in rows.iter().enumerate() {
            for &(c, v) in row {
                let a = v.abs();
                rnorm[p] = rnorm[p].max(a);
                cnorm[c] = cnorm[c].max(a);
            }
        }
        for (bi, cone) in canon.cones.iter().enumerate() {
            match cone {
                Cone::Soc(_) | Cone::Psd(_) => {
                    let off = canon.offsets[bi];
                    let len = cone.len();
                    let mx = cnorm[off..off + len]
                        .iter()
                        .fold(0.0_f64, |a, &v| a.max(v));
                    cnorm[off..off + len].fill(mx);
                }
                _ => {}
            }
        }
        let sr: Vec<f64> = rnorm
            .iter()
            .map(|&t| if t > 0.0 { 1.0 / t.sqrt() } else { 1.0 })
            .collect();
        let scl: Vec<f64> = cnorm
            .iter()
            .map(|&t| if t > 0.0 { 1.0 / t.sqrt() } else { 1.0 })
            .collect();
        for (p, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut() {
                *v *= sr[p] * scl[*c];
            }
        }
        for p in 0..m {
            d_r[p] *= sr[p];
        }
        for j in 0..n {
            d_c[j] *= scl[j];
        }
    }

    let mut b: Vec<f64> = (0..m).map(|p| canon.b[p] * d_r[p]).collect();
    let nu_b = norm_inf(&b).max(1.0);
    for v in &mut b {
        *v /= nu_b;
    }
    let mut c: Vec<f64> = (0..n).map(|j| canon.c[j] * d_c[j]).collect();
    let nu_c = norm_inf(&c).max(1.0);
    for v in &mut c {
        *v /= nu_c;
    }

    let mut free_slot = vec![usize::MAX; n];
    let mut free_coords = Vec::new();
    for (bi, cone) in canon.cones.iter().enumerate() {
        if let Cone::Free(len) = cone {
            let off = canon.offsets[bi];
            for c in off..off + *len {
                free_slot[c] = free_coords.len();
                free_coords.push(c);
            }
        }
    }
    let mut rows_coned = Vec::with_capacity(m);
    let mut free_cols = vec![Vec::new(); free_coords.len()];
    for (p, row) in rows.iter().enumerate() {
        let mut coned = Vec::with_capacity(row.len());
        for &(c, v) in row {
            if free_slot[c] == usize::MAX {
                coned.push((c, v));
            } else {
                free_cols[free_slot[c]].push((p, v));
            }
        }
        rows_coned.push(coned);
    }

    ScaledData {
        rows,
        rows_coned,
        b,
        c,
        d_r,
        d_c,
        nu_b,
        nu_c,
        free_coords,
        free_cols,
    }
}

fn unit_point(canon: &Canon) -> Vec<f64> {
    let mut e = vec![0.0; canon.n];
    for (bi, cone) in canon.cones.iter().enumerate() {
        let off = canon.offsets[bi];
        match *cone {
            Cone::Free(_) => {}
            Cone::NonNeg(k) => e[off..off + k].fill(1.0),
            Cone::Soc(_) => e[off] = 1.0,
            Cone::Psd(d) => {
                for i in 0..d {
                    e[off + i * (i + 1) / 2 + i] = 1.0;
                }
            }
            Cone::RotatedSoc(_) => unreachable!(),
        }
    }
    e
}

// ---------------------------------------------------------------------
// Matrix-vector helpers over the sparse row representation
// ---------------------------------------------------------------------

fn mul_a(rows: &[Vec<(usize, f64)>], x: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (p, row) in rows.iter().enumerate() {
        let mut acc = 0.0;
        for &(c, v) in row {
            acc += v * x[c];
        }
        out[p] = acc;
    }
    out
}

fn mul_at(rows: &[Vec<(usize, f64)>], y: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for (p, row) in rows.iter().enumerate() {
        let yp = y[p];
        if yp != 0.0 {
            for &(c, v) in row {
                out[c] += v * yp;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------
// The per-iteration Newton solver
// ---------------------------------------------------------------------

/// Factored reduced KKT system for one interior-point iteration:
/// a Schur complement `A_c H⁻¹ A_cᵀ + δI` over the equality rows, plus a
/// dense border for the free columns.
struct Kkt<'a> {
    sc: &'a ScaledData,
    scalings: &'a [ScalingBlock],
    offsets: &'a [usize],
    smat: &'a [f64],
    m: usize,
    n: usize,
    /// `S⁻¹ a_j` for each free column `j`.
    u_cols: Vec<Vec<f64>>,
    f_chol: Option<Cholesky>,
}

impl<'a> Kkt<'a> {
    fn build(
        sc: &'a ScaledData,
        scalings: &'a [ScalingBlock],
        offsets: &'a [usize],
        reg: f64,
        smat: &'a mut Vec<f64>,
        wchunk: &mut [f64],
    ) -> Option<Kkt<'a>> {
        let m = sc.b.len();
        let n = sc.c.len();
        let mut local: Vec<(usize, f64)> = Vec::new();

        // Lower triangle of S = A_c H⁻¹ A_cᵀ + δI, assembled in strips.
        let mut p0 = 0;
        while p0 < m {
            let p1 = (p0 + CHUNK).min(m);
            let width = p1 - p0;
            wchunk[..width * n].fill(0.0);
            for t in 0..width {
                hinv_row(
                    scalings,
                    offsets,
                    &sc.rows_coned[p0 + t],
                    &mut wchunk[t * n..(t + 1) * n],
                    &mut local,
                );
            }
            for t in 0..width {
                let p = p0 + t;
                let w = &wchunk[t * n..(t + 1) * n];
                let srow = &mut smat[p * m..p * m + p + 1];
                for (q, item) in srow.iter_mut().enumerate().take(p + 1) {
                    let mut acc = 0.0;
                    for &(c, v) in &sc.rows_coned[q] {
                        acc += v * w[c];
                    }
                    *item = acc;
                }
            }
            p0 = p1;
        }
        // Regularize each diagonal relative to its own magnitude, and give
        // the pivot clamp per-column floors on the same basis. The scaled
        // diagonals spread over many orders late in the run (some blow up
        // like 1/μ), so anything sized to the global scale — a single
        // absolute δ, a global pivot floor — buries the small columns and
        // turns the factorization to noise right when the last digits of
        // the gap are being ground out. Rows that touch only free columns
        // have a zero diagonal; their floor acts as the penalty that the
        // border solve and refinement then correct.
        let floors: Vec<f64> = (0..m)
            .map(|p| 1e-14 * smat[p * m + p].max(1.0))
            .collect();
        for p in 0..m {
            smat[p * m + p] *= 1.0 + reg;
        }
        factor_spd_clamped_columns(smat, m, &floors);

        let nf = sc.free_coords.len();
        let mut u_cols = Vec::with_capacity(nf);
        for col in &sc.free_cols {
            let mut dense = vec![0.0; m];
            for &(p, v) in col {
                dense[p] += v;
            }
            spd_solve_in_place(smat, m, &mut dense);
            u_cols.push(dense);
        }
        let f_chol = if nf > 0 {
            let mut f = SymMatrix::from_fn(nf, |a, b| {
                let mut acc = 0.0;
                for &(p, v) in &sc.free_cols[a] {
                    acc += v * u_cols[b][p];
                }
                acc
            });
            let mut fmax = 0.0_f64;
            for a in 0..nf {
                fmax = fmax.max(f.get(a, a));
            }
            for a in 0..nf {
                f.set(a, a, f.get(a, a) + reg * fmax.max(1.0));
            }
            Some(Cholesky::factor(&f).ok()?)
        } else {
            None
        };

        Some(Kkt {
            sc,
            scalings,
            offsets,
            smat,
            m,
            n,
            u_cols,
            f_chol,
        })
    }

    fn hinv_vec(&self, v: &[f64], out: &mut [f64]) {
        for (bi, blk) in self.scalings.iter().enumerate() {
            let off = self.offsets[bi];
            let d = blk.dim();
            blk.apply_hinv(&v[off..off + d], &mut out[off..off + d]);
        }
    }

    fn h_vec(&self, v: &[f64], out: &mut [f64]) {
        for (bi, blk) in self.scalings.iter().enumerate() {
            let off = self.offsets[bi];
            let d = blk.dim();
            blk.apply_h(&v[off..off + d], &mut out[off..off + d]);
        }
    }

    /// One pass through the reduced system
    /// `[H Aᵀ; A 0] [Δx; u] = [d₁; d₂]` using the factored Schur
    /// complement and the free border.
    fn solve_raw(&self, d1: &[f64], d2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.m, self.n);
        let mut w1 = vec![0.0; n];
        self.hinv_vec(d1, &mut w1);
        let mut t = mul_a(&self.sc.rows, &w1, m);
        for p in 0..m {
            t[p] = d2[p] - t[p];
        }
        spd_solve_in_place(self.smat, m, &mut t);

        let nf = self.sc.free_coords.len();
        let mut dxf = vec![0.0; nf];
        if let Some(f) = &self.f_chol {
            let mut rhs = vec![0.0; nf];
            for a in 0..nf {
                let mut acc = d1[self.sc.free_coords[a]];
                for &(p, v) in &self.sc.free_cols[a] {
                    acc += v * t[p];
                }
                rhs[a] = acc;
            }
            f.solve_in_place(&mut rhs);
            dxf = rhs;
        }

        let mut u: Vec<f64> = t.iter().map(|v| -v).collect();
        for a in 0..nf {
            let da = dxf[a];
            if da != 0.0 {
                for p in 0..m {
                    u[p] += da * self.u_cols[a][p];
                }
            }
        }

        let atu = mul_at(&self.sc.rows, &u, n);
        let mut g = vec![0.0; n];
        for j in 0..n {
            g[j] = d1[j] - atu[j];
        }
        let mut dx = vec![0.0; n];
        self.hinv_vec(&g, &mut dx);
        for a in 0..nf {
            dx[self.sc.free_coords[a]] = dxf[a];
        }
        (dx, u)
    }

    /// [`Kkt::solve_raw`] plus iterative refinement against the
    /// unregularized system, which scrubs out the static δ and the clamped
    /// pivots. Stops early once the residual no longer shrinks.
    fn solve(&self, d1: &[f64], d2: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, n) = (self.m, self.n);
        let (mut dx, mut u) = self.solve_raw(d1, d2);
        let rhs_scale = norm2(d1).hypot(norm2(d2)).max(1e-300);
        let mut hdx = vec![0.0; n];
        let mut best = f64::INFINITY;
        for _ in 0..4 {
            self.h_vec(&dx, &mut hdx);
            let atu = mul_at(&self.sc.rows, &u, n);
            let mut res1 = vec![0.0; n];
            for j in 0..n {
                res1[j] = d1[j] - hdx[j] - atu[j];
            }
            let adx = mul_a(&self.sc.rows, &dx, m);
            let mut res2 = vec![0.0; m];
            for p in 0..m {
                res2[p] = d2[p] - adx[p];
            }
            let res_norm = norm2(&res1).hypot(norm2(&res2));
            if std::env::var_os("DRPO_IPM_TRACE").is_some() {
                eprintln!("    refine res {res_norm:9.2e} rhs {rhs_scale:9.2e}");
            }
            if res_norm <= 1e-14 * rhs_scale || res_norm >= 0.5 * best {
                break;
            }
            best = res_norm;
            let (ex, eu) = self.solve_raw(&res1, &res2);
            for j in 0..n {
                dx[j] += ex[j];
            }
            for p in 0..m {
                u[p] += eu[p];
            }
        }
        (dx, u)
    }
}

/// Applies `H⁻¹` to a sparse row (non-free coordinates only), accumulating
/// into a dense buffer. Terms must be sorted by coordinate.
fn hinv_row(
    scalings: &[ScalingBlock],
    offsets: &[usize],
    row: &[(usize, f64)],
    out: &mut [f64],
    local: &mut Vec<(usize, f64)>,
) {
    let nb = scalings.len();
    let mut bi = 0usize;
    let mut i = 0usize;
    while i < row.len() {
        let c = row[i].0;
        while bi + 1 < nb && offsets[bi + 1] <= c {
            bi += 1;
        }
        let off = offsets[bi];
        let end = off + scalings[bi].dim();
        local.clear();
        while i < row.len() && row[i].0 < end {
            local.push((row[i].0 - off, row[i].1));
            i += 1;
        }
        scalings[bi].hinv_sparse(local, &mut out[off..end]);
    }
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    ds: Vec<f64>,
    dtau: f64,
    dkappa: f64,
}

/// Solves the linearized homogeneous system for the step with
/// right-hand-side residual weight `eta` and complementarity targets
/// `ds_rhs` (scaled space) and `dk_rhs`.
#[allow(clippy::too_many_arguments)]
fn newton_direction(
    kkt: &Kkt,
    scalings: &[ScalingBlock],
    offsets: &[usize],
    sc: &ScaledData,
    rp: &[f64],
    rd: &[f64],
    rg: f64,
    ds_rhs: &[f64],
    dk_rhs: f64,
    eta: f64,
    tau: f64,
    kappa: f64,
    x2: &[f64],
    u2: &[f64],
) -> Direction {
    let n = sc.c.len();
    let m = sc.b.len();
    let mut v = vec![0.0; n];
    let mut winv_v = vec![0.0; n];
    for (bi, blk) in scalings.iter().enumerate() {
        let off = offsets[bi];
        let d = blk.dim();
        blk.lambda_solve(&ds_rhs[off..off + d], &mut v[off..off + d]);
    }
    for (bi, blk) in scalings.iter().enumerate() {
        let off = offsets[bi];
        let d = blk.dim();
        blk.apply_winv(&v[off..off + d], &mut winv_v[off..off + d]);
    }
    let mut d1 = vec![0.0; n];
    for j in 0..n {
        d1[j] = eta * rd[j] + winv_v[j];
    }
    let d2: Vec<f64> = rp.iter().map(|v| -eta * v).collect();
    let (x1, u1) = kkt.solve(&d1, &d2);

    let d3 = -eta * rg - dk_rhs / tau;
    let denom = dot(&sc.c, x2) + dot(&sc.b, u2) - kappa / tau;
    let dtau = (d3 - dot(&sc.c, &x1) - dot(&sc.b, &u1)) / denom;

    let mut dx = vec![0.0; n];
    for j in 0..n {
        dx[j] = x1[j] + dtau * x2[j];
    }
    let mut dy = vec![0.0; m];
    for p in 0..m {
        dy[p] = -(u1[p] + dtau * u2[p]);
    }
    let dkappa = (dk_rhs - kappa * dtau) / tau;

    // Recover Δs from the dual feasibility row so that equation holds to
    // solver precision regardless of the Schur-solve residual.
    let atdy = mul_at(&sc.rows, &dy, n);
    let mut ds = vec![0.0; n];
    for j in 0..n {
        ds[j] = -eta * rd[j] + sc.c[j] * dtau - atdy[j];
    }
    Direction {
        dx,
        dy,
        ds,
        dtau,
        dkappa,
    }
}

/// `(W⁻ᵀ Δx, W Δs)` — the direction pair expressed in the scaled space
/// where both cone conditions are checked against λ.
fn scaled_pair(
    scalings: &[ScalingBlock],
    offsets: &[usize],
    dx: &[f64],
    ds: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let n = dx.len();
    let mut wtdx = vec![0.0; n];
    let mut wds = vec![0.0; n];
    for (bi, blk) in scalings.iter().enumerate() {
        let off = offsets[bi];
        let d = blk.dim();
        blk.apply_wti(&dx[off..off + d], &mut wtdx[off..off + d]);
        blk.apply_w(&ds[off..off + d], &mut wds[off..off + d]);
    }
    (wtdx, wds)
}

#[allow(clippy::too_many_arguments)]
fn step_limit(
    scalings: &[ScalingBlock],
    offsets: &[usize],
    wtdx: &[f64],
    wds: &[f64],
    tau: f64,
    dtau: f64,
    kappa: f64,
    dkappa: f64,
) -> f64 {
    let mut alpha = f64::INFINITY;
    for (bi, blk) in scalings.iter().enumerate() {
        let off = offsets[bi];
        let d = blk.dim();
        alpha = alpha.min(blk.max_step(&wtdx[off..off + d]));
        alpha = alpha.min(blk.max_step(&wds[off..off + d]));
    }
    if dtau < 0.0 {
        alpha = alpha.min(tau / -dtau);
    }
    if dkappa < 0.0 {
        alpha = alpha.min(kappa / -dkappa);
    }
    alpha
}

// ---------------------------------------------------------------------
// Solution extraction
// ---------------------------------------------------------------------

/// Maps a canonical-space triple back to the user's coordinates (undoing
/// the rotated-cone isometry), zeroes the structurally-zero free dual
/// slacks, and packages the result.
#[allow(clippy::too_many_arguments)]
fn finish(
    program: &ConeProgram,
    canon: &Canon,
    settings: &IpmSettings,
    status: SolveStatus,
    xh: &[f64],
    yh: &[f64],
    sh: &[f64],
    pobj: f64,
    dobj: f64,
    iterations: usize,
) -> ConicSolution {
    let gap = dot(xh, sh);
    let mut xu = xh.to_vec();
    let mut su = sh.to_vec();
    for &(off, len) in &canon.rsoc {
        let (p0, p1) = (xh[off], xh[off + 1]);
        xu[off] = (p0 + p1) / SQRT2;
        xu[off + 1] = (p0 - p1) / SQRT2;
        for i in 2..len {
            xu[off + i] = xh[off + i] / SQRT2;
        }
        let (q0, q1) = (sh[off], sh[off + 1]);
        su[off] = (q0 + q1) / SQRT2;
        su[off + 1] = (q0 - q1) / SQRT2;
        for i in 2..len {
            su[off + i] = SQRT2 * sh[off + i];
        }
    }
    for (bi, cone) in program.cones().iter().enumerate() {
        if let Cone::Free(len) = cone {
            let off = program.block_offset(bi);
            su[off..off + *len].fill(0.0);
        }
    }
    ConicSolution {
        status,
        primal: xu,
        dual_y: yh.to_vec(),
        dual_slack: su,
        primal_objective: pobj,
        dual_objective: dobj,
        complementarity_gap: gap,
        iterations,
        feas_tol: settings.feas_tol,
        gap_tol: settings.gap_tol,
        cones: program.cones().to_vec(),
        offsets: program.offsets.clone(),
    }
}
