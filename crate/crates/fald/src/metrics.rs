//! Empirical diagnostics on sample traces: moment estimators, the
//! variance-MSE criterion, exact one-dimensional empirical Wasserstein
//! distance, moment-matched Gaussian Wasserstein distance and highest
//! posterior density thresholds.

use nalgebra::{DMatrix, DVector};

use crate::analytics::{w2_gaussian_raw, GaussianLaw};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sample mean and unbiased sample covariance of a trace.
#[derive(Debug, Clone)]
pub struct MomentSummary<S: Scalar> {
    pub mean: DVector<S>,
    pub covariance: DMatrix<S>,
    pub count: usize,
}

impl<S: Scalar> MomentSummary<S> {
    /// Time-average of `||X_k - point||^2`, recovered from the stored
    /// moments: `(n-1)/n * tr(cov) + ||mean - point||^2`.
    pub fn second_moment_about(&self, point: &DVector<S>) -> Result<S> {
        if point.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                got: point.len(),
            });
        }
        let n = S::lit(self.count as f64);
        let biased_trace = self.covariance.trace() * (n - S::one()) / n;
        Ok(biased_trace + (&self.mean - point).norm_squared())
    }
}

/// Sample mean and unbiased covariance; requires at least two samples.
pub fn moments<S: Scalar>(samples: &[DVector<S>]) -> Result<MomentSummary<S>> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "moment estimation needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let dim = samples[0].len();
    let n = S::lit(samples.len() as f64);
    let mut mean = DVector::<S>::zeros(dim);
    for s in samples {
        if s.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.len(),
            });
        }
        mean += s;
    }
    mean /= n;
    let mut cov = DMatrix::<S>::zeros(dim, dim);
    for s in samples {
        let r = s - &mean;
        cov.syger(S::one(), &r, &r, S::one());
    }
    cov /= n - S::one();
    // syger fills one triangle; mirror it.
    for i in 0..dim {
        for j in (i + 1)..dim {
            let v = cov[(j, i)];
            cov[(i, j)] = v;
        }
    }
    Ok(MomentSummary {
        mean,
        covariance: cov,
        count: samples.len(),
    })
}

/// Squared deviation of the time-averaged squared distance to the posterior
/// mean from the posterior total variance:
/// `[(1/K) sum_k ||X_k - x_*||^2 - sigma_*^2]^2`.
pub fn variance_mse<S: Scalar>(samples: &[DVector<S>], posterior: &GaussianLaw<S>) -> Result<S> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("variance MSE needs a nonempty trace".into()));
    }
    let x_star = posterior.mean();
    let mut avg = S::zero();
    for s in samples {
        if s.len() != x_star.len() {
            return Err(Error::DimensionMismatch {
                expected: x_star.len(),
                got: s.len(),
            });
        }
        avg += (s - x_star).norm_squared();
    }
    avg /= S::lit(samples.len() as f64);
    let dev = avg - posterior.total_variance();
    Ok(dev * dev)
}

/// Exact one-dimensional 2-Wasserstein distance between two empirical
/// distributions: the root mean square of sorted-sample differences.
/// Uneven sample counts are truncated to the shorter one.
pub fn empirical_w2_1d<S: Scalar>(samples_a: &[S], samples_b: &[S]) -> Result<S> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::InvalidInput("empirical W2 needs nonempty samples".into()));
    }
    let n = samples_a.len().min(samples_b.len());
    let mut a = samples_a[..n].to_vec();
    let mut b = samples_b[..n].to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("finite samples"));
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(&b) {
        let d = *x - *y;
        acc += d * d;
    }
    Ok((acc / S::lit(n as f64)).sqrt())
}

/// Moment-matched Gaussian Wasserstein distance of a trace to a reference
/// law, the multivariate bias proxy.
#[derive(Debug, Clone, Copy)]
pub struct GaussianFitW2<S: Scalar> {
    pub distance: S,
    /// True when the sample covariance was not positive definite and a
    /// `1e-10 I` ridge was added before comparing.
    pub regularized: bool,
}

/// Fits a Gaussian to the trace by moments and returns its Bures distance
/// to `reference`.
pub fn gaussian_fit_w2<S: Scalar>(
    samples: &[DVector<S>],
    reference: &GaussianLaw<S>,
) -> Result<GaussianFitW2<S>> {
    let fit = moments(samples)?;
    if fit.mean.len() != reference.dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.dim(),
            got: fit.mean.len(),
        });
    }
    let mut cov = fit.covariance;
    let min_eig = cov
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(S::lit(f64::INFINITY), |a, v| a.min(v));
    let regularized = min_eig <= S::zero();
    if regularized {
        for i in 0..cov.nrows() {
            cov[(i, i)] += S::lit(1e-10);
        }
    }
    let distance = w2_gaussian_raw(&fit.mean, &cov, reference.mean(), reference.covariance())?;
    Ok(GaussianFitW2 {
        distance,
        regularized,
    })
}

/// Highest-posterior-density threshold estimate.
#[derive(Debug, Clone, Copy)]
pub struct HpdEstimate<S: Scalar> {
    pub alpha: f64,
    /// `eta_alpha`: the empirical `(1 - alpha)`-quantile of the negative
    /// log-density values.
    pub threshold: S,
}

/// Estimates `eta_alpha` from negative log-density evaluations: the region
/// `{U <= eta_alpha}` carries empirical mass `1 - alpha`. Quantiles use
/// linear interpolation (type 7).
pub fn hpd_threshold<S: Scalar>(potential_values: &[S], alpha: f64) -> Result<HpdEstimate<S>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    if potential_values.is_empty() {
        return Err(Error::InvalidInput("HPD estimation needs nonempty values".into()));
    }
    let mut sorted = potential_values.to_vec();
    sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite potential values"));
    Ok(HpdEstimate {
        alpha,
        threshold: quantile_type7(&sorted, 1.0 - alpha),
    })
}

fn quantile_type7<S: Scalar>(sorted: &[S], p: f64) -> S {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + (sorted[lo + 1] - sorted[lo]) * S::lit(frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};

    type V = DVector<f64>;
    type M = DMatrix<f64>;

    fn scalars(values: &[f64]) -> Vec<V> {
        values.iter().map(|&v| V::from_vec(vec![v])).collect()
    }

    #[test]
    fn constant_samples_have_zero_covariance() {
        let samples = scalars(&[1.5, 1.5, 1.5]);
        let m = moments(&samples).unwrap();
        assert_eq!(m.mean[0], 1.5);
        assert_eq!(m.covariance[(0, 0)], 0.0);
    }

    #[test]
    fn two_point_sample_has_unbiased_variance_two() {
        let m = moments(&scalars(&[0.0, 2.0])).unwrap();
        assert_eq!(m.mean[0], 1.0);
        assert_eq!(m.covariance[(0, 0)], 2.0);
    }

    #[test]
    fn large_standard_normal_sample_mean_is_within_the_clt_band() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let n = 100_000;
        let samples: Vec<V> = (0..n)
            .map(|_| V::from_vec(vec![f64::standard_normal(&mut rng)]))
            .collect();
        let m = moments(&samples).unwrap();
        assert!(m.mean[0].abs() <= 3.0 / (n as f64).sqrt());
        assert!((m.covariance[(0, 0)] - 1.0).abs() <= 3.0 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn second_moment_accessor_matches_direct_evaluation() {
        let samples = scalars(&[0.3, -0.8, 1.9, 0.5]);
        let m = moments(&samples).unwrap();
        let point = V::from_vec(vec![0.4]);
        let direct: f64 = samples
            .iter()
            .map(|s| (s - &point).norm_squared())
            .sum::<f64>()
            / samples.len() as f64;
        assert!((m.second_moment_about(&point).unwrap() - direct).abs() < 1e-14);
    }

    #[test]
    fn variance_mse_vanishes_when_the_average_matches() {
        let posterior = GaussianLaw::univariate(0.0, 1.0).unwrap();
        // Two symmetric points at distance 1: average squared distance 1.
        let samples = scalars(&[1.0, -1.0]);
        assert_eq!(variance_mse(&samples, &posterior).unwrap(), 0.0);
    }

    #[test]
    fn single_sample_at_the_mean_gives_sigma_star_fourth() {
        let posterior = GaussianLaw::univariate(0.7, 2.5).unwrap();
        let samples = scalars(&[0.7]);
        let mse = variance_mse(&samples, &posterior).unwrap();
        assert!((mse - 2.5 * 2.5).abs() < 1e-14);
    }

    #[test]
    fn empirical_w2_matches_the_sorted_coupling() {
        assert_eq!(empirical_w2_1d(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(empirical_w2_1d(&[3.0, 1.0, 2.0], &[2.0, 3.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn empirical_w2_estimates_the_gaussian_mean_shift() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let n = 100_000;
        let a: Vec<f64> = (0..n).map(|_| f64::standard_normal(&mut rng)).collect();
        let b: Vec<f64> = (0..n).map(|_| f64::standard_normal(&mut rng) + 2.0).collect();
        let d = empirical_w2_1d(&a, &b).unwrap();
        assert!((d - 2.0).abs() < 0.02, "distance {d}");
    }

    #[test]
    fn degenerate_fit_against_a_reference_collapses_to_the_trace_term() {
        let reference = GaussianLaw::new(
            V::from_vec(vec![0.5, -0.5]),
            M::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]),
        )
        .unwrap();
        let samples = vec![V::from_vec(vec![0.5, -0.5]); 10];
        let fit = gaussian_fit_w2(&samples, &reference).unwrap();
        assert!(fit.regularized);
        assert!(
            (fit.distance - 4.0_f64.sqrt()).abs() < 1e-4,
            "distance {}",
            fit.distance
        );
    }

    #[test]
    fn fit_against_its_own_law_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let samples: Vec<V> = (0..500)
            .map(|_| {
                V::from_vec(vec![
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ])
            })
            .collect();
        let m = moments(&samples).unwrap();
        let law = GaussianLaw::new(m.mean.clone(), m.covariance.clone()).unwrap();
        let fit = gaussian_fit_w2(&samples, &law).unwrap();
        assert!(fit.distance < 1e-6, "distance {}", fit.distance);
        assert!(!fit.regularized);
    }

    #[test]
    fn exact_posterior_draws_drive_the_fit_distance_to_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let reference = GaussianLaw::new(
            V::from_vec(vec![1.0, -2.0]),
            M::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        )
        .unwrap();
        let chol = reference.covariance().clone().cholesky().unwrap();
        let mut draw = |n: usize| -> Vec<V> {
            (0..n)
                .map(|_| {
                    let z = V::from_fn(2, |_, _| f64::standard_normal(&mut rng));
                    reference.mean() + chol.l() * z
                })
                .collect()
        };
        let coarse = gaussian_fit_w2(&draw(300), &reference).unwrap().distance;
        let fine = gaussian_fit_w2(&draw(60_000), &reference).unwrap().distance;
        assert!(fine < coarse, "fine {fine} vs coarse {coarse}");
        assert!(fine < 0.05, "fine {fine}");
    }

    #[test]
    fn hpd_alpha_half_is_the_median() {
        let est = hpd_threshold(&[1.0, 2.0, 3.0], 0.5).unwrap();
        assert_eq!(est.threshold, 2.0);
    }

    #[test]
    fn hpd_uses_type7_interpolation() {
        let est = hpd_threshold(&[1.0f64, 2.0, 3.0, 4.0], 0.25).unwrap();
        assert!((est.threshold - 3.25).abs() < 1e-14);
    }

    #[test]
    fn hpd_alpha_out_of_range_is_rejected() {
        assert!(hpd_threshold(&[1.0], 0.0).is_err());
        assert!(hpd_threshold(&[1.0], 1.0).is_err());
        assert!(hpd_threshold::<f64>(&[], 0.3).is_err());
    }

    #[test]
    fn hpd_threshold_matches_the_scaled_chi_square_quantile() {
        // Values -log pi~(X) = (X - m)^2 / (2 s^2) for X ~ N(m, s^2) follow
        // (1/2) chi^2_1; the HPD threshold is its (1 - alpha)-quantile.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (m, s) = (0.5, 1.5);
        let n = 200_000;
        let alpha = 0.2;
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let x = m + s * f64::standard_normal(&mut rng);
                (x - m) * (x - m) / (2.0 * s * s)
            })
            .collect();
        let est = hpd_threshold(&values, alpha).unwrap();
        let chi = ChiSquared::new(1.0).unwrap();
        let analytic = 0.5 * chi.inverse_cdf(1.0 - alpha);
        // Quantile standard error via the density at the quantile.
        let density = 2.0 * chi.pdf(2.0 * analytic);
        let se = (alpha * (1.0 - alpha) / n as f64).sqrt() / density;
        assert!(
            (est.threshold - analytic).abs() <= 4.0 * se,
            "threshold {} vs analytic {analytic} (se {se})",
            est.threshold
        );
    }

    proptest! {
        #[test]
        fn hpd_threshold_is_monotone_in_alpha(
            mut values in proptest::collection::vec(-100.0f64..100.0, 2..40),
            a1 in 0.05f64..0.45,
            a2 in 0.5f64..0.95,
        ) {
            values.dedup();
            let lo = hpd_threshold(&values, a1).unwrap().threshold;
            let hi = hpd_threshold(&values, a2).unwrap().threshold;
            prop_assert!(lo >= hi - 1e-12);
        }

        #[test]
        fn empirical_w2_translation_covariance(
            values in proptest::collection::vec(-50.0f64..50.0, 2..40),
            shift in -10.0f64..10.0,
        ) {
            let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
            // Shifting one set by c moves the distance to exactly |c| for
            // matched shapes, and shifting both leaves it at zero.
            let d = empirical_w2_1d(&values, &shifted).unwrap();
            prop_assert!((d - shift.abs()).abs() < 1e-9);
            let both: Vec<f64> = values.iter().map(|v| v + shift).collect();
            let d_both = empirical_w2_1d(&shifted, &both).unwrap();
            prop_assert!(d_both < 1e-12);
        }

        #[test]
        fn variance_mse_is_permutation_invariant(
            values in proptest::collection::vec(-5.0f64..5.0, 1..30),
            rotate in 0usize..29,
        ) {
            let posterior = GaussianLaw::univariate(0.3, 1.7).unwrap();
            let samples = scalars(&values);
            let mut rotated = values.clone();
            rotated.rotate_left(rotate % values.len());
            let permuted = scalars(&rotated);
            let a = variance_mse(&samples, &posterior).unwrap();
            let b = variance_mse(&permuted, &posterior).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
        }
    }
}
