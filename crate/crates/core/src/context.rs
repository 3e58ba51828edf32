//! Context model over rare-neighborhood features.
//!
//! A single Gaussian fitted to the reduced feature vectors of rare-nucleus
//! neighborhoods scores every candidate insertion site; targets are drawn
//! without replacement in proportion to their density under that Gaussian.
//! For each drawn target, the rare nucleus to insert is sampled from a
//! distance-weighted distribution whose per-nucleus weights grow with every
//! selection, so no single nucleus dominates the augmented output.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet};

/// Weight assigned to a rare nucleus before its first selection. Starting at
/// one (rather than zero) keeps the very first draw sensitive to feature
/// distance; each selection then adds one.
pub const INITIAL_SELECTION_WEIGHT: f64 = 1.0;

/// Ridge added to the sample covariance when the caller does not supply one:
/// `RIDGE_SCALE * trace(cov) / dim`, floored at [`RIDGE_FLOOR`] so that an
/// all-identical pool still yields an invertible (if tiny) covariance.
pub const RIDGE_SCALE: f64 = 1e-6;
pub const RIDGE_FLOOR: f64 = 1e-12;

/// Gaussian over reduced neighborhood features, fitted on the rare pool.
///
/// Stores the mean, the ridge-regularized sample covariance, and its lower
/// Cholesky factor so that log-densities come from two triangular solves
/// instead of an explicit inverse.
#[derive(Debug, Clone)]
pub struct RareContextModel {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    cholesky: DMatrix<f64>,
    log_det: f64,
    ridge: f64,
}

impl RareContextModel {
    /// Feature dimensionality the model was fitted on.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fitted mean vector.
    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    /// Regularized covariance (sample covariance plus the ridge).
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// Ridge that was folded into the covariance diagonal.
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Exact multivariate-normal log-density of `x` under the regularized
    /// covariance.
    ///
    /// # Errors
    ///
    /// [`Error::DimensionMismatch`] when `x` does not match the fitted
    /// dimension.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let p = self.dim();
        if x.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: x.len(),
            });
        }
        let diff = DVector::from_row_slice(x) - &self.mean;
        let z = self
            .cholesky
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::Numeric("cholesky factor lost positivity".into()))?;
        let mahalanobis_sq = z.norm_squared();
        Ok(-0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + self.log_det + mahalanobis_sq))
    }
}

/// Fit the rare-context Gaussian: sample mean, sample covariance with the
/// N−1 denominator, plus `ridge` (or the scale-aware default) on the
/// diagonal.
///
/// # Errors
///
/// - [`Error::InsufficientData`] with fewer than two points;
/// - [`Error::DimensionMismatch`] when point lengths disagree;
/// - [`Error::Numeric`] if the regularized covariance is still not positive
///   definite (only possible with a non-finite input).
pub fn fit_rare_gaussian(points: &[Vec<f64>], ridge: Option<f64>) -> Result<RareContextModel> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "context model needs at least 2 rare neighborhoods, got {n}"
        )));
    }
    let p = points[0].len();
    if p == 0 {
        return Err(Error::Config("context features have zero length".into()));
    }
    for pt in points {
        if pt.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: pt.len(),
            });
        }
    }

    let mut mean = DVector::zeros(p);
    for pt in points {
        mean += DVector::from_row_slice(pt);
    }
    mean /= n as f64;

    let mut covariance = DMatrix::zeros(p, p);
    for pt in points {
        let d = DVector::from_row_slice(pt) - &mean;
        // Accumulate only the upper triangle, then mirror, so the stored
        // matrix is symmetric to the last bit.
        for i in 0..p {
            for j in i..p {
                covariance[(i, j)] += d[i] * d[j];
            }
        }
    }
    covariance /= (n - 1) as f64;
    for i in 0..p {
        for j in (i + 1)..p {
            covariance[(j, i)] = covariance[(i, j)];
        }
    }

    let ridge = ridge.unwrap_or_else(|| (RIDGE_SCALE * covariance.trace() / p as f64).max(RIDGE_FLOOR));
    for i in 0..p {
        covariance[(i, i)] += ridge;
    }

    let chol = nalgebra::Cholesky::new(covariance.clone())
        .ok_or_else(|| Error::Numeric("regularized covariance is not positive definite".into()))?;
    let cholesky = chol.unpack();
    let log_det = 2.0 * (0..p).map(|i| cholesky[(i, i)].ln()).sum::<f64>();

    Ok(RareContextModel {
        mean,
        covariance,
        cholesky,
        log_det,
        ridge,
    })
}

/// Mutable bookkeeping shared across an augmentation run: per-rare-nucleus
/// selection weights (monotonically increasing) and the set of target
/// locations already consumed, which are never offered again.
#[derive(Debug, Clone, Default)]
pub struct SelectionState {
    weights: BTreeMap<String, f64>,
    consumed: BTreeSet<String>,
}

impl SelectionState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Current weight of a rare nucleus; [`INITIAL_SELECTION_WEIGHT`] before
    /// its first selection.
    pub fn weight(&self, id: &str) -> f64 {
        self.weights.get(id).copied().unwrap_or(INITIAL_SELECTION_WEIGHT)
    }

    /// Whether a target location key has already been drawn.
    pub fn is_consumed(&self, key: &str) -> bool {
        self.consumed.contains(key)
    }

    pub fn consumed_count(&self) -> usize {
        self.consumed.len()
    }

    /// Ids whose weight has moved past the initial value, i.e. nuclei that
    /// have been selected at least once.
    pub fn selected_ids(&self) -> impl Iterator<Item = (&str, f64)> {
        self.weights.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn consume(&mut self, key: &str) {
        self.consumed.insert(key.to_owned());
    }

    fn bump(&mut self, id: &str) {
        *self
            .weights
            .entry(id.to_owned())
            .or_insert(INITIAL_SELECTION_WEIGHT) += 1.0;
    }
}

/// A target drawn by [`sample_targets`]: its location key, which input slice
/// it came from, and its index within that slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledTarget {
    pub key: String,
    pub from_background: bool,
    pub index: usize,
}

/// Draw `k` target locations without replacement, with probability
/// proportional to `exp(log_likelihood)` over the not-yet-consumed union of
/// `majors` and `backgrounds`. Densities are normalized through a shifted
/// soft-max so widely spread log-likelihoods cannot overflow. Every drawn
/// key is recorded in `state` and never offered again.
///
/// Each candidate is `(location key, reduced feature vector)`.
///
/// # Errors
///
/// - [`Error::PoolExhausted`] when fewer than `k` unconsumed candidates
///   remain;
/// - [`Error::DimensionMismatch`] / [`Error::Numeric`] from scoring.
pub fn sample_targets(
    model: &RareContextModel,
    majors: &[(String, Vec<f64>)],
    backgrounds: &[(String, Vec<f64>)],
    k: usize,
    state: &mut SelectionState,
    rng: &mut impl Rng,
) -> Result<Vec<SampledTarget>> {
    struct Scored {
        key: String,
        from_background: bool,
        index: usize,
        log_density: f64,
    }

    let mut pool = Vec::with_capacity(majors.len() + backgrounds.len());
    for (from_background, slice) in [(false, majors), (true, backgrounds)] {
        for (index, (key, x)) in slice.iter().enumerate() {
            if state.is_consumed(key) {
                continue;
            }
            let log_density = model.log_likelihood(x)?;
            if !log_density.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite log-density for target {key}"
                )));
            }
            pool.push(Scored {
                key: key.clone(),
                from_background,
                index,
                log_density,
            });
        }
    }

    if pool.len() < k {
        return Err(Error::PoolExhausted(format!(
            "requested {k} targets but only {} unconsumed candidates remain",
            pool.len()
        )));
    }

    let mut drawn = Vec::with_capacity(k);
    for _ in 0..k {
        let max = pool
            .iter()
            .map(|s| s.log_density)
            .fold(f64::NEG_INFINITY, f64::max);
        let masses: Vec<f64> = pool.iter().map(|s| (s.log_density - max).exp()).collect();
        let chosen = draw_categorical(&masses, rng);
        let target = pool.remove(chosen);
        state.consume(&target.key);
        drawn.push(SampledTarget {
            key: target.key,
            from_background: target.from_background,
            index: target.index,
        });
    }
    Ok(drawn)
}

/// Normalized selection probabilities for candidates at the given feature
/// `distances` with the given `weights`: each candidate gets mass
/// `exp(−weight · distance)`, normalized through a shifted soft-max.
///
/// Panics if the slice lengths differ (programming error, not input error).
pub fn weighted_distance_probabilities(distances: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(distances.len(), weights.len());
    let logits: Vec<f64> = distances
        .iter()
        .zip(weights)
        .map(|(d, w)| -w * d)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let masses: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = masses.iter().sum();
    masses.into_iter().map(|m| m / total).collect()
}

/// Probability of picking each pool entry for the given target under the
/// current selection weights. Distances are plain Euclidean distances
/// between reduced feature vectors.
///
/// # Errors
///
/// [`Error::PoolExhausted`] on an empty pool, [`Error::DimensionMismatch`]
/// when a pool vector disagrees with `target_x`.
pub fn selection_probabilities(
    target_x: &[f64],
    rare_pool: &[(String, Vec<f64>)],
    state: &SelectionState,
) -> Result<Vec<f64>> {
    if rare_pool.is_empty() {
        return Err(Error::PoolExhausted("rare pool is empty".into()));
    }
    let mut distances = Vec::with_capacity(rare_pool.len());
    let mut weights = Vec::with_capacity(rare_pool.len());
    for (id, x) in rare_pool {
        if x.len() != target_x.len() {
            return Err(Error::DimensionMismatch {
                expected: target_x.len(),
                got: x.len(),
            });
        }
        let d2: f64 = target_x
            .iter()
            .zip(x)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        distances.push(d2.sqrt());
        weights.push(state.weight(id));
    }
    Ok(weighted_distance_probabilities(&distances, &weights))
}

/// Pick the rare nucleus to insert at a target: sample an index from
/// [`selection_probabilities`], then increment that nucleus's weight so its
/// next-round probability drops. Returns the index into `rare_pool`.
///
/// # Errors
///
/// Propagates the [`selection_probabilities`] errors.
pub fn select_rare_nucleus(
    target_x: &[f64],
    rare_pool: &[(String, Vec<f64>)],
    state: &mut SelectionState,
    rng: &mut impl Rng,
) -> Result<usize> {
    let probabilities = selection_probabilities(target_x, rare_pool, state)?;
    let chosen = draw_categorical(&probabilities, rng);
    state.bump(&rare_pool[chosen].0);
    Ok(chosen)
}

/// Sample an index with probability proportional to the (non-negative)
/// masses. The final index absorbs any floating-point shortfall in the
/// cumulative walk.
fn draw_categorical(masses: &[f64], rng: &mut impl Rng) -> usize {
    debug_assert!(!masses.is_empty());
    let total: f64 = masses.iter().sum();
    let r = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, m) in masses.iter().enumerate() {
        acc += m;
        if r < acc {
            return i;
        }
    }
    masses.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::child_rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn pool(entries: &[(&str, &[f64])]) -> Vec<(String, Vec<f64>)> {
        entries
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_vec()))
            .collect()
    }

    #[test]
    fn two_point_fit_matches_hand_covariance() {
        let m = fit_rare_gaussian(&[vec![0.0, 0.0], vec![2.0, 2.0]], Some(1e-9)).unwrap();
        assert_eq!(m.mean(), &[1.0, 1.0]);
        // Deviations (−1,−1) and (1,1), N−1 = 1: covariance [[2,2],[2,2]].
        assert_relative_eq!(m.covariance()[(0, 0)], 2.0 + 1e-9, max_relative = 1e-12);
        assert_relative_eq!(m.covariance()[(0, 1)], 2.0, max_relative = 1e-12);
        assert_relative_eq!(m.covariance()[(1, 0)], 2.0, max_relative = 1e-12);
        assert_relative_eq!(m.covariance()[(1, 1)], 2.0 + 1e-9, max_relative = 1e-12);
    }

    #[test]
    fn identical_points_fit_is_pure_ridge() {
        let m = fit_rare_gaussian(&vec![vec![3.0, -1.0]; 4], None).unwrap();
        assert_eq!(m.mean(), &[3.0, -1.0]);
        // Zero sample variance: the default ridge bottoms out at the floor
        // and the covariance is ridge · I.
        assert_eq!(m.ridge(), RIDGE_FLOOR);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { RIDGE_FLOOR } else { 0.0 };
                assert_eq!(m.covariance()[(i, j)], want);
            }
        }
        assert!(m.log_likelihood(&[3.0, -1.0]).unwrap().is_finite());
    }

    #[test]
    fn hundred_draws_recover_generator_mean() {
        let mu = [2.0, -5.0, 0.5];
        let sigma = [1.0, 3.0, 0.25];
        let mut rng = child_rng(11, "gaussian-recovery", 0);
        let points: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                mu.iter()
                    .zip(&sigma)
                    .map(|(m, s)| Normal::new(*m, *s).unwrap().sample(&mut rng))
                    .collect()
            })
            .collect();
        let model = fit_rare_gaussian(&points, None).unwrap();
        for ((fitted, want), s) in model.mean().iter().zip(&mu).zip(&sigma) {
            assert!(
                (fitted - want).abs() < 4.0 * s / 100f64.sqrt(),
                "mean coordinate {fitted} too far from {want}"
            );
        }
    }

    #[test]
    fn single_point_is_insufficient() {
        assert!(matches!(
            fit_rare_gaussian(&[vec![1.0, 2.0]], None),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn mismatched_point_lengths_rejected() {
        assert!(matches!(
            fit_rare_gaussian(&[vec![1.0, 2.0], vec![1.0]], None),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn cholesky_reproduces_regularized_covariance() {
        let mut rng = child_rng(12, "cholesky-check", 0);
        let points: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| rng.random::<f64>() * 10.0).collect())
            .collect();
        let m = fit_rare_gaussian(&points, None).unwrap();
        let rebuilt = &m.cholesky * m.cholesky.transpose();
        for i in 0..4 {
            for j in 0..4 {
                assert!((rebuilt[(i, j)] - m.covariance()[(i, j)]).abs() < 1e-8);
                assert!((m.covariance()[(i, j)] - m.covariance()[(j, i)]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn log_likelihood_at_mean_is_pure_normalizer() {
        let m = fit_rare_gaussian(&[vec![0.0, 0.0], vec![2.0, 2.0]], Some(1e-3)).unwrap();
        // det([[2+ε,2],[2,2+ε]]) = (2+ε)² − 4.
        let det = (2.0 + 1e-3f64).powi(2) - 4.0;
        let want = -0.5 * (2.0 * (2.0 * std::f64::consts::PI).ln() + det.ln());
        assert_relative_eq!(m.log_likelihood(&[1.0, 1.0]).unwrap(), want, epsilon = 1e-10);
    }

    #[test]
    fn scalar_standard_normal_matches_closed_form() {
        // Pool {−1, 0, 1}: mean 0, sample variance 1 with the N−1 denominator.
        let m = fit_rare_gaussian(&[vec![-1.0], vec![0.0], vec![1.0]], Some(0.0)).unwrap();
        let ll = m.log_likelihood(&[1.0]).unwrap();
        assert_relative_eq!(
            ll,
            -0.5 * ((2.0 * std::f64::consts::PI).ln() + 1.0),
            epsilon = 1e-12
        );
        assert!((ll - (-1.41894)).abs() < 1e-5);
    }

    #[test]
    fn farther_point_scores_strictly_lower() {
        let m = fit_rare_gaussian(&[vec![-1.0], vec![0.0], vec![1.0]], Some(0.0)).unwrap();
        let mut prev = m.log_likelihood(&[0.0]).unwrap();
        for x in [0.5, 1.0, 2.0, 5.0, 20.0] {
            let ll = m.log_likelihood(&[x]).unwrap();
            assert!(ll < prev, "density must fall with distance from the mean");
            prev = ll;
        }
    }

    #[test]
    fn log_likelihood_matches_brute_force_density() {
        let mut rng = child_rng(13, "brute-force", 0);
        for p in 1..=4 {
            let points: Vec<Vec<f64>> = (0..40)
                .map(|_| (0..p).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect())
                .collect();
            let m = fit_rare_gaussian(&points, None).unwrap();
            let cov = m.covariance().clone();
            let inv = cov.clone().try_inverse().unwrap();
            let det = cov.determinant();
            for _ in 0..5 {
                let x: Vec<f64> = (0..p).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
                let d = DVector::from_row_slice(&x) - DVector::from_row_slice(m.mean());
                let maha = (d.transpose() * &inv * &d)[(0, 0)];
                let want =
                    -0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + maha);
                assert_relative_eq!(m.log_likelihood(&x).unwrap(), want, max_relative = 1e-8);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = fit_rare_gaussian(&[vec![0.0, 0.0], vec![1.0, 1.0]], None).unwrap();
        assert!(matches!(
            m.log_likelihood(&[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    fn unit_model() -> RareContextModel {
        fit_rare_gaussian(&[vec![-1.0], vec![0.0], vec![1.0]], Some(0.0)).unwrap()
    }

    #[test]
    fn exhaustive_draw_selects_every_target_once() {
        let m = unit_model();
        let majors = pool(&[("m/0", &[0.1]), ("m/1", &[0.5])]);
        let backgrounds = pool(&[("b/0", &[1.0]), ("b/1", &[2.0]), ("b/2", &[0.0])]);
        let mut state = SelectionState::new();
        let mut rng = child_rng(21, "exhaustive", 0);
        let drawn =
            sample_targets(&m, &majors, &backgrounds, 5, &mut state, &mut rng).unwrap();
        let mut keys: Vec<&str> = drawn.iter().map(|t| t.key.as_str()).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["b/0", "b/1", "b/2", "m/0", "m/1"]);
        assert_eq!(state.consumed_count(), 5);
        for t in &drawn {
            let slice = if t.from_background { &backgrounds } else { &majors };
            assert_eq!(slice[t.index].0, t.key);
        }
    }

    #[test]
    fn dominant_target_wins_nearly_every_seed() {
        // log-density gap between x=0 and x=10 under a unit Gaussian is 50.
        let m = unit_model();
        let majors = pool(&[("far/0", &[10.0]), ("near", &[0.0]), ("far/1", &[-10.0])]);
        let mut wins = 0;
        for seed in 0..1000u64 {
            let mut state = SelectionState::new();
            let mut rng = child_rng(22, "dominant", seed);
            let drawn = sample_targets(&m, &majors, &[], 1, &mut state, &mut rng).unwrap();
            if drawn[0].key == "near" {
                wins += 1;
            }
        }
        assert!(wins >= 999, "dominant target won only {wins}/1000 draws");
    }

    #[test]
    fn zero_draws_leave_state_untouched() {
        let m = unit_model();
        let majors = pool(&[("m/0", &[0.0])]);
        let mut state = SelectionState::new();
        let mut rng = child_rng(23, "zero", 0);
        let drawn = sample_targets(&m, &majors, &[], 0, &mut state, &mut rng).unwrap();
        assert!(drawn.is_empty());
        assert_eq!(state.consumed_count(), 0);
    }

    #[test]
    fn consumed_targets_never_reappear_and_pool_exhausts() {
        let m = unit_model();
        let majors = pool(&[("m/0", &[0.0]), ("m/1", &[0.2])]);
        let mut state = SelectionState::new();
        let mut rng = child_rng(24, "consume", 0);
        let first = sample_targets(&m, &majors, &[], 1, &mut state, &mut rng).unwrap();
        let second = sample_targets(&m, &majors, &[], 1, &mut state, &mut rng).unwrap();
        assert_ne!(first[0].key, second[0].key);
        assert!(matches!(
            sample_targets(&m, &majors, &[], 1, &mut state, &mut rng),
            Err(Error::PoolExhausted(_))
        ));
    }

    #[test]
    fn sampling_is_deterministic_under_a_fixed_seed() {
        let m = unit_model();
        let majors = pool(&[("m/0", &[0.0]), ("m/1", &[0.4]), ("m/2", &[1.1])]);
        let backgrounds = pool(&[("b/0", &[0.7]), ("b/1", &[1.9])]);
        let run = || {
            let mut state = SelectionState::new();
            let mut rng = child_rng(25, "deterministic", 7);
            sample_targets(&m, &majors, &backgrounds, 4, &mut state, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_rare_nucleus_is_certain_and_gets_heavier() {
        let rare = pool(&[("r/0", &[5.0, 5.0])]);
        let mut state = SelectionState::new();
        let probs = selection_probabilities(&[0.0, 0.0], &rare, &state).unwrap();
        assert_eq!(probs, vec![1.0]);
        let mut rng = child_rng(31, "single", 0);
        let idx = select_rare_nucleus(&[0.0, 0.0], &rare, &mut state, &mut rng).unwrap();
        assert_eq!(idx, 0);
        assert_eq!(state.weight("r/0"), INITIAL_SELECTION_WEIGHT + 1.0);
    }

    #[test]
    fn equal_distances_and_weights_are_uniform() {
        // Four pool vectors at distance 1 from the target in different
        // directions; fresh state per draw keeps every weight at the initial
        // value. Chi-square over 10000 draws, 3 degrees of freedom, 1%
        // critical value 11.345.
        let rare = pool(&[
            ("r/0", &[1.0, 0.0]),
            ("r/1", &[-1.0, 0.0]),
            ("r/2", &[0.0, 1.0]),
            ("r/3", &[0.0, -1.0]),
        ]);
        let mut counts = [0usize; 4];
        for draw in 0..10_000u64 {
            let mut state = SelectionState::new();
            let mut rng = child_rng(32, "uniform", draw);
            let idx = select_rare_nucleus(&[0.0, 0.0], &rare, &mut state, &mut rng).unwrap();
            counts[idx] += 1;
        }
        let expected = 2500.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 11.345, "chi-square {chi2} too large for uniformity");
    }

    #[test]
    fn two_candidate_probability_matches_direct_evaluation() {
        // Distances (1, 2), weights (1, 1):
        // p₀ = e⁻¹ / (e⁻¹ + e⁻²) = 1 / (1 + e⁻¹) ≈ 0.7311.
        let rare = pool(&[("r/0", &[1.0]), ("r/1", &[-2.0])]);
        let state = SelectionState::new();
        let probs = selection_probabilities(&[0.0], &rare, &state).unwrap();
        assert!((probs[0] - 0.7311).abs() < 1e-4);
        assert!((probs[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn equal_weights_probability_strictly_decreases_with_distance() {
        let d = [0.0, 0.3, 1.0, 2.5, 7.0];
        let probs = weighted_distance_probabilities(&d, &[1.0; 5]);
        for w in probs.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn selection_lowers_the_winners_next_round_probability() {
        let rare = pool(&[("r/0", &[1.0]), ("r/1", &[2.0]), ("r/2", &[3.0])]);
        let mut state = SelectionState::new();
        let before = selection_probabilities(&[0.0], &rare, &state).unwrap();
        let mut rng = child_rng(33, "winner", 0);
        let winner = select_rare_nucleus(&[0.0], &rare, &mut state, &mut rng).unwrap();
        let after = selection_probabilities(&[0.0], &rare, &state).unwrap();
        assert!(after[winner] < before[winner]);
        let total: f64 = after.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_rare_pool_is_an_error() {
        let mut state = SelectionState::new();
        let mut rng = child_rng(34, "empty", 0);
        assert!(matches!(
            select_rare_nucleus(&[0.0], &[], &mut state, &mut rng),
            Err(Error::PoolExhausted(_))
        ));
    }

    proptest! {
        #[test]
        fn probabilities_always_sum_to_one(
            pairs in prop::collection::vec((0.0f64..100.0, 1.0f64..50.0), 1..16)
        ) {
            let (distances, weights): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let probs = weighted_distance_probabilities(&distances, &weights);
            let total: f64 = probs.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(probs.iter().all(|p| *p >= 0.0));
        }

        #[test]
        fn heavier_weight_never_raises_probability(
            d in 0.01f64..10.0,
            w in 1.0f64..20.0,
            extra in 1.0f64..5.0,
        ) {
            // Two candidates at the same distance: the heavier one is
            // strictly less likely.
            let light = weighted_distance_probabilities(&[d, d], &[w, w + extra]);
            prop_assert!(light[0] > light[1]);
        }
    }
}
