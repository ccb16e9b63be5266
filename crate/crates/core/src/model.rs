//! Problem data for one solve: sample moments, ambiguity-set radii, the
//! piecewise-linear concave utility, asset selections, and portfolios.
//!
//! Validation enforces the assumptions the dual reformulation and the
//! dimension-reduced solve rely on: positive-definite sample covariance,
//! strictly positive mean-ellipsoid radius, and a second-moment factor of
//! at least one. Bad data is rejected, never repaired — silently jittering
//! the covariance would change every objective value downstream.

use crate::data_io::ReturnMatrix;
use crate::numerics::{min_eigenvalue, NumericsError, SymMatrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("moment estimation needs at least two observations, got {0}")]
    TooFewObservations(usize),
    #[error("missing or non-numeric return at observation {row}, asset column {col}")]
    MissingValues { row: usize, col: usize },
    #[error("mean vector has length {mean} but covariance is {cov}x{cov}")]
    DimensionMismatch { mean: usize, cov: usize },
    #[error("moment data contains a non-finite entry")]
    NonFiniteMoment,
    #[error("utility needs at least one linear piece")]
    EmptyUtility,
    #[error("utility slope {value:.6e} at piece {index} is not positive")]
    NonPositiveSlope { index: usize, value: f64 },
    #[error("utility slopes must strictly decrease: piece {index} has slope {value:.6e}, previous is {previous:.6e}")]
    SlopesNotDecreasing {
        index: usize,
        value: f64,
        previous: f64,
    },
    #[error("utility curvature must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("tangent points must be strictly increasing")]
    UnsortedPoints,
    #[error("utility scale must be positive, got {0} (largest mean entry is nonpositive)")]
    NonPositiveMuMax(f64),
    #[error("mean-ellipsoid radius kappa1 must be positive, got {0}")]
    NonPositiveKappa1(f64),
    #[error("second-moment factor kappa2 must be at least 1, got {0}")]
    Kappa2BelowOne(f64),
    #[error("covariance is not positive definite: smallest eigenvalue {min_eig:.6e} is not above {threshold:.6e}")]
    CovarianceNotPositiveDefinite { min_eig: f64, threshold: f64 },
    #[error("regularization weight gamma must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("cardinality k={k} must lie between 1 and {n}")]
    CardinalityOutOfRange { k: usize, n: usize },
    #[error("selection index {index} is out of range for {n} assets")]
    SelectionIndexOutOfRange { index: usize, n: usize },
    #[error("portfolio weight {value:.6e} at index {index} is negative beyond tolerance")]
    NegativeWeight { index: usize, value: f64 },
    #[error("portfolio weights sum to {0}, expected 1 within 1e-8")]
    WeightSumNotOne(f64),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Sample mean and covariance of per-period asset returns.
///
/// The covariance uses the 1/M (maximum-likelihood) normalization, not the
/// unbiased 1/(M−1); every downstream objective value is tied to this
/// estimator, so the choice is part of the contract.
#[derive(Debug, Clone)]
pub struct Moments {
    mean: Vec<f64>,
    covariance: SymMatrix,
}

impl Moments {
    pub fn new(mean: Vec<f64>, covariance: SymMatrix) -> Result<Self, ModelError> {
        if mean.len() != covariance.dim() {
            return Err(ModelError::DimensionMismatch {
                mean: mean.len(),
                cov: covariance.dim(),
            });
        }
        let finite =
            mean.iter().all(|v| v.is_finite()) && covariance.as_slice().iter().all(|v| v.is_finite());
        if !finite {
            return Err(ModelError::NonFiniteMoment);
        }
        Ok(Moments { mean, covariance })
    }

    pub fn n_assets(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &SymMatrix {
        &self.covariance
    }

    /// Largest mean entry; the scale parameter of the exponential utility.
    pub fn mu_max(&self) -> f64 {
        self.mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Mean and covariance from a return history: μ̂ = (1/M)Σξ, and
/// Σ̂ = (1/M)Σ(ξ−μ̂)(ξ−μ̂)ᵀ.
pub fn estimate_moments(returns: &ReturnMatrix) -> Result<Moments, ModelError> {
    let m = returns.n_periods();
    let n = returns.n_assets();
    if m < 2 {
        return Err(ModelError::TooFewObservations(m));
    }
    for row in 0..m {
        for (col, &v) in returns.row(row).iter().enumerate() {
            if !v.is_finite() {
                return Err(ModelError::MissingValues { row, col });
            }
        }
    }
    let inv_m = 1.0 / m as f64;
    let mut mean = vec![0.0; n];
    for row in 0..m {
        for (j, &v) in returns.row(row).iter().enumerate() {
            mean[j] += v;
        }
    }
    for v in &mut mean {
        *v *= inv_m;
    }
    let mut covariance = SymMatrix::zeros(n);
    let mut deviation = vec![0.0; n];
    for row in 0..m {
        for (j, &v) in returns.row(row).iter().enumerate() {
            deviation[j] = v - mean[j];
        }
        covariance.add_outer(inv_m, &deviation);
    }
    Moments::new(mean, covariance)
}

/// Radii of the moment ambiguity set: distributions whose mean lies in the
/// Σ̂-ellipsoid of squared radius `kappa1` around μ̂ and whose second
/// central moment is bounded by `kappa2`·Σ̂.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintySet {
    pub kappa1: f64,
    pub kappa2: f64,
}

/// Piecewise-linear concave utility: the pointwise minimum of affine
/// pieces y ↦ a·y + b with positive, strictly decreasing slopes.
#[derive(Debug, Clone)]
pub struct UtilityPwl {
    pieces: Vec<(f64, f64)>,
}

impl UtilityPwl {
    /// Wraps explicit `(slope, intercept)` pieces, rejecting slope patterns
    /// that could not have come from tangents of an increasing strictly
    /// concave function.
    pub fn new(pieces: Vec<(f64, f64)>) -> Result<Self, ModelError> {
        check_pieces(&pieces)?;
        Ok(UtilityPwl { pieces })
    }

    pub fn pieces(&self) -> &[(f64, f64)] {
        &self.pieces
    }

    pub fn num_pieces(&self) -> usize {
        self.pieces.len()
    }

    /// Utility of a portfolio return `y`: min over pieces of a·y + b.
    pub fn value(&self, y: f64) -> f64 {
        self.pieces
            .iter()
            .map(|&(a, b)| a * y + b)
            .fold(f64::INFINITY, f64::min)
    }

    /// Loss of portfolio `x` under realized returns `xi`: the negated
    /// utility, max over pieces of −a·ξᵀx − b.
    pub fn loss(&self, x: &Portfolio, xi: &[f64]) -> f64 {
        let v = crate::numerics::dot(xi, x.weights());
        self.pieces
            .iter()
            .map(|&(a, b)| -a * v - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn check_pieces(pieces: &[(f64, f64)]) -> Result<(), ModelError> {
    if pieces.is_empty() {
        return Err(ModelError::EmptyUtility);
    }
    for (index, &(a, _)) in pieces.iter().enumerate() {
        if !(a > 0.0) {
            return Err(ModelError::NonPositiveSlope { index, value: a });
        }
        if index > 0 {
            let previous = pieces[index - 1].0;
            if !(a < previous) {
                return Err(ModelError::SlopesNotDecreasing {
                    index,
                    value: a,
                    previous,
                });
            }
        }
    }
    Ok(())
}

/// Normalized exponential utility ũ(y) = μ_max·(1 − exp(−α·y/μ_max))/α:
/// increasing, strictly concave, ũ(0) = 0, ũ'(0) = 1, curvature set by α.
pub fn exponential_utility(y: f64, alpha: f64, mu_max: f64) -> f64 {
    mu_max * (1.0 - (-alpha * y / mu_max).exp()) / alpha
}

/// Tangent lines of the exponential utility at the given points, in order:
/// slope a = exp(−α·y/μ_max) and intercept b = ũ(y) − a·y per point.
/// Tangents of a concave function majorize it, so their minimum is a
/// piecewise-linear under-approximation of ũ that is exact at each point.
pub fn build_utility_tangents(
    mu_max: f64,
    alpha: f64,
    tangent_points: &[f64],
) -> Result<UtilityPwl, ModelError> {
    if !(mu_max > 0.0) {
        return Err(ModelError::NonPositiveMuMax(mu_max));
    }
    if !(alpha > 0.0) {
        return Err(ModelError::NonPositiveAlpha(alpha));
    }
    if tangent_points.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(ModelError::UnsortedPoints);
    }
    let pieces = tangent_points
        .iter()
        .map(|&y| {
            let a = (-alpha * y / mu_max).exp();
            (a, exponential_utility(y, alpha, mu_max) - a * y)
        })
        .collect();
    UtilityPwl::new(pieces)
}

/// One complete problem: moments, ambiguity radii, utility, ℓ2 weight, and
/// the number of assets to hold.
#[derive(Debug, Clone)]
pub struct Instance {
    pub moments: Moments,
    pub ambiguity: UncertaintySet,
    pub utility: UtilityPwl,
    pub gamma: f64,
    pub k: usize,
}

impl Instance {
    pub fn n_assets(&self) -> usize {
        self.moments.n_assets()
    }

    /// Checks every standing assumption; each violation has its own error.
    /// The covariance test is scale-free: the smallest eigenvalue must
    /// exceed 1e-10 of the average diagonal.
    pub fn validate(&self) -> Result<(), ModelError> {
        let n = self.n_assets();
        let UncertaintySet { kappa1, kappa2 } = self.ambiguity;
        if !(kappa1 > 0.0) {
            return Err(ModelError::NonPositiveKappa1(kappa1));
        }
        if !(kappa2 >= 1.0) {
            return Err(ModelError::Kappa2BelowOne(kappa2));
        }
        let covariance = self.moments.covariance();
        let threshold = 1e-10 * covariance.trace() / n as f64;
        let min_eig = min_eigenvalue(covariance)?;
        if !(min_eig > threshold) {
            return Err(ModelError::CovarianceNotPositiveDefinite { min_eig, threshold });
        }
        check_pieces(self.utility.pieces())?;
        if !(self.gamma > 0.0) {
            return Err(ModelError::NonPositiveGamma(self.gamma));
        }
        if self.k < 1 || self.k > n {
            return Err(ModelError::CardinalityOutOfRange { k: self.k, n });
        }
        Ok(())
    }
}

/// Validates and returns the instance unchanged, for call-chaining at
/// construction sites.
pub fn validate_instance(instance: Instance) -> Result<Instance, ModelError> {
    instance.validate()?;
    Ok(instance)
}

/// A subset of assets over a fixed universe size, stored as sorted indices.
///
/// The derived ordering (universe size first, then indices lexicographic)
/// makes selections usable as deterministic map keys.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Selection {
    n: usize,
    indices: Vec<usize>,
}

impl Selection {
    /// Builds from indices in any order; duplicates collapse.
    pub fn from_indices(n: usize, indices: &[usize]) -> Result<Self, ModelError> {
        let mut indices = indices.to_vec();
        indices.sort_unstable();
        indices.dedup();
        if let Some(&index) = indices.iter().find(|&&i| i >= n) {
            return Err(ModelError::SelectionIndexOutOfRange { index, n });
        }
        Ok(Selection { n, indices })
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        let indices = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &on)| on.then_some(i))
            .collect();
        Selection {
            n: mask.len(),
            indices,
        }
    }

    /// The full universe: every asset selected.
    pub fn all(n: usize) -> Self {
        Selection {
            n,
            indices: (0..n).collect(),
        }
    }

    pub fn n_assets(&self) -> usize {
        self.n
    }

    pub fn cardinality(&self) -> usize {
        self.indices.len()
    }

    /// Selected indices, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Unselected indices, ascending.
    pub fn complement(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| !self.contains(i)).collect()
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.n
    }
}

/// Portfolio weights: entrywise nonnegative (to rounding) and summing to
/// one within 1e-8, checked at construction.
#[derive(Debug, Clone)]
pub struct Portfolio {
    weights: Vec<f64>,
}

impl Portfolio {
    pub fn new(weights: Vec<f64>) -> Result<Self, ModelError> {
        for (index, &value) in weights.iter().enumerate() {
            if !(value >= -1e-9) {
                return Err(ModelError::NegativeWeight { index, value });
            }
        }
        let sum: f64 = weights.iter().sum();
        if !((sum - 1.0).abs() <= 1e-8) {
            return Err(ModelError::WeightSumNotOne(sum));
        }
        Ok(Portfolio { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_assets(&self) -> usize {
        self.weights.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn matrix(rows: &[Vec<f64>]) -> ReturnMatrix {
        ReturnMatrix::from_rows(rows).unwrap()
    }

    fn simple_instance(covariance: SymMatrix, kappa1: f64, kappa2: f64) -> Instance {
        let n = covariance.dim();
        Instance {
            moments: Moments::new(vec![1.0; n], covariance).unwrap(),
            ambiguity: UncertaintySet { kappa1, kappa2 },
            utility: build_utility_tangents(1.0, 10.0, &[0.0, 0.5, 1.0]).unwrap(),
            gamma: 1.0,
            k: 2.min(n),
        }
    }

    #[test]
    fn moments_of_identical_rows_have_zero_covariance() {
        let m = estimate_moments(&matrix(&[vec![1.0, 2.0], vec![1.0, 2.0]])).unwrap();
        assert_eq!(m.mean(), &[1.0, 2.0]);
        assert_eq!(m.covariance().max_abs(), 0.0);
    }

    #[test]
    fn moments_use_population_normalization() {
        let m = estimate_moments(&matrix(&[vec![0.0, 0.0], vec![2.0, 2.0]])).unwrap();
        assert_eq!(m.mean(), &[1.0, 1.0]);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(m.covariance().get(i, j), 1.0);
            }
        }
    }

    #[test]
    fn moments_reject_single_observation_and_gaps() {
        let single = ReturnMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            estimate_moments(&single),
            Err(ModelError::TooFewObservations(1))
        ));
        let gap = matrix(&[vec![1.0, f64::NAN], vec![1.0, 2.0]]);
        assert!(matches!(
            estimate_moments(&gap),
            Err(ModelError::MissingValues { row: 0, col: 1 })
        ));
    }

    #[test]
    fn tangents_at_standard_points_match_frozen_values() {
        let u = build_utility_tangents(2.0, 10.0, &[0.0, 1.0, 2.0]).unwrap();
        let pieces = u.pieces();
        assert_eq!(pieces[0], (1.0, 0.0));
        assert_relative_eq!(pieces[1].0, (-5.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(pieces[1].1, 0.19191446360109742, max_relative = 1e-12);
        assert_relative_eq!(pieces[2].0, (-10.0f64).exp(), max_relative = 1e-15);
        assert_relative_eq!(pieces[2].1, 0.19990012015452253, max_relative = 1e-12);
    }

    #[test]
    fn tangent_at_origin_is_the_identity_line() {
        let u = build_utility_tangents(0.7, 3.0, &[0.0]).unwrap();
        assert_eq!(u.pieces(), &[(1.0, 0.0)]);
    }

    #[test]
    fn tangent_builder_rejects_bad_inputs() {
        assert!(matches!(
            build_utility_tangents(1.0, 10.0, &[1.0, 0.0]),
            Err(ModelError::UnsortedPoints)
        ));
        assert!(matches!(
            build_utility_tangents(1.0, 0.0, &[0.0]),
            Err(ModelError::NonPositiveAlpha(_))
        ));
        assert!(matches!(
            build_utility_tangents(0.0, 10.0, &[0.0]),
            Err(ModelError::NonPositiveMuMax(_))
        ));
        assert!(matches!(
            build_utility_tangents(1.0, 10.0, &[]),
            Err(ModelError::EmptyUtility)
        ));
    }

    #[test]
    fn utility_rejects_non_concave_piece_patterns() {
        assert!(matches!(
            UtilityPwl::new(vec![(1.0, 0.0), (1.0, 0.1)]),
            Err(ModelError::SlopesNotDecreasing { index: 1, .. })
        ));
        assert!(matches!(
            UtilityPwl::new(vec![(0.0, 0.0)]),
            Err(ModelError::NonPositiveSlope { index: 0, .. })
        ));
    }

    #[test]
    fn loss_takes_the_worst_piece() {
        let one = UtilityPwl::new(vec![(1.0, 0.0)]).unwrap();
        let x = Portfolio::new(vec![1.0]).unwrap();
        assert_eq!(one.loss(&x, &[0.5]), -0.5);

        let two = UtilityPwl::new(vec![(1.0, 0.0), (0.5, 0.2)]).unwrap();
        assert_eq!(two.loss(&x, &[1.0]), -0.7);

        let tangents = build_utility_tangents(1.0, 10.0, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(tangents.loss(&x, &[0.0]), 0.0);
    }

    #[test]
    fn validation_accepts_a_clean_instance() {
        let instance = simple_instance(SymMatrix::identity(3), 1.0, 4.0);
        assert!(validate_instance(instance).is_ok());
    }

    #[test]
    fn validation_names_the_violated_condition() {
        let bad_kappa1 = simple_instance(SymMatrix::identity(3), 0.0, 4.0);
        assert!(matches!(
            bad_kappa1.validate(),
            Err(ModelError::NonPositiveKappa1(_))
        ));

        let bad_kappa2 = simple_instance(SymMatrix::identity(3), 1.0, 0.5);
        assert!(matches!(
            bad_kappa2.validate(),
            Err(ModelError::Kappa2BelowOne(_))
        ));

        let singular = SymMatrix::from_fn(2, |_, _| 1.0);
        assert!(matches!(
            simple_instance(singular, 1.0, 4.0).validate(),
            Err(ModelError::CovarianceNotPositiveDefinite { .. })
        ));

        let mut bad_gamma = simple_instance(SymMatrix::identity(3), 1.0, 4.0);
        bad_gamma.gamma = 0.0;
        assert!(matches!(
            bad_gamma.validate(),
            Err(ModelError::NonPositiveGamma(_))
        ));

        let mut bad_k = simple_instance(SymMatrix::identity(3), 1.0, 4.0);
        bad_k.k = 4;
        assert!(matches!(
            bad_k.validate(),
            Err(ModelError::CardinalityOutOfRange { k: 4, n: 3 })
        ));
    }

    #[test]
    fn selection_orders_and_complements() {
        let s = Selection::from_indices(5, &[3, 1, 3]).unwrap();
        assert_eq!(s.indices(), &[1, 3]);
        assert_eq!(s.cardinality(), 2);
        assert_eq!(s.complement(), vec![0, 2, 4]);
        assert!(s.contains(3) && !s.contains(0));
        assert_eq!(
            Selection::from_mask(&[false, true, false, true, false]),
            s
        );
        assert!(Selection::all(5).is_full());
        assert!(matches!(
            Selection::from_indices(2, &[2]),
            Err(ModelError::SelectionIndexOutOfRange { index: 2, n: 2 })
        ));
    }

    #[test]
    fn portfolio_enforces_the_simplex() {
        assert!(Portfolio::new(vec![0.25, 0.75]).is_ok());
        assert!(matches!(
            Portfolio::new(vec![-0.1, 1.1]),
            Err(ModelError::NegativeWeight { index: 0, .. })
        ));
        assert!(matches!(
            Portfolio::new(vec![0.5, 0.4]),
            Err(ModelError::WeightSumNotOne(_))
        ));
    }

    proptest! {
        #[test]
        fn tangents_majorize_the_exponential_utility(
            alpha in 0.5f64..15.0,
            mu_max in 0.2f64..4.0,
            fractions in proptest::collection::vec(0.0f64..1.5, 1..6),
        ) {
            let mut points: Vec<f64> = fractions.iter().map(|f| f * mu_max).collect();
            points.sort_by(|a, b| a.partial_cmp(b).unwrap());
            points.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
            let u = build_utility_tangents(mu_max, alpha, &points).unwrap();
            for step in 0..=40 {
                let y = mu_max * (-1.0 + 3.0 * step as f64 / 40.0);
                prop_assert!(u.value(y) >= exponential_utility(y, alpha, mu_max) - 1e-12);
            }
        }

        #[test]
        fn loss_is_negated_piecewise_utility(
            raw in proptest::collection::vec(0.01f64..1.0, 2..5),
            xi in proptest::collection::vec(-2.0f64..2.0, 2..5),
            alpha in 0.5f64..15.0,
        ) {
            let n = raw.len().min(xi.len());
            let total: f64 = raw[..n].iter().sum();
            let x = Portfolio::new(raw[..n].iter().map(|v| v / total).collect()).unwrap();
            let u = build_utility_tangents(1.0, alpha, &[0.0, 0.5, 1.0]).unwrap();
            let v = crate::numerics::dot(&xi[..n], x.weights());
            prop_assert_eq!(u.loss(&x, &xi[..n]), -u.value(v));
        }

        #[test]
        fn centered_data_has_negligible_mean(
            rows in proptest::collection::vec(
                proptest::collection::vec(-5.0f64..5.0, 3),
                2..20,
            ),
        ) {
            let m = rows.len() as f64;
            let mut centered = rows.clone();
            for j in 0..3 {
                let mean: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / m;
                for row in &mut centered {
                    row[j] -= mean;
                }
            }
            let scale = rows
                .iter()
                .flatten()
                .fold(1.0f64, |acc, v| acc.max(v.abs()));
            let moments = estimate_moments(&matrix(&centered)).unwrap();
            for &entry in moments.mean() {
                prop_assert!(entry.abs() <= 1e-12 * scale);
            }
        }
    }
}
