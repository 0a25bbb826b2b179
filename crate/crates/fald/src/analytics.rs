//! Closed-form ground truth: Gaussian product posteriors, 2-Wasserstein
//! distances between Gaussians (Bures form), the stationary law of the
//! two-client two-local-step averaging kernel, its heterogeneity lower
//! bound, the reference step size and the communication-budget optimizer.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potentials::PotentialSet;
use crate::scalar::Scalar;

/// A Gaussian law, the currency of this module.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLaw<S: Scalar> {
    mean: DVector<S>,
    covariance: DMatrix<S>,
}

impl<S: Scalar> GaussianLaw<S> {
    /// Builds the law; the covariance must be symmetric positive definite
    /// (smallest eigenvalue at least `1e-14` of the largest).
    pub fn new(mean: DVector<S>, covariance: DMatrix<S>) -> Result<Self> {
        if covariance.nrows() != mean.len() || covariance.ncols() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: covariance.nrows(),
            });
        }
        let (min, max) = sym_eigen_range(&covariance)?;
        if min <= S::zero() || min < max * S::lit(1e-14) {
            return Err(Error::InvalidInput(
                "covariance must be symmetric positive definite".into(),
            ));
        }
        Ok(Self { mean, covariance })
    }

    /// Convenience constructor for one-dimensional laws.
    pub fn univariate(mean: S, variance: S) -> Result<Self> {
        Self::new(
            DVector::from_vec(vec![mean]),
            DMatrix::from_vec(1, 1, vec![variance]),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<S> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<S> {
        &self.covariance
    }

    /// `sigma_*^2 = E ||X - mean||^2`, the trace of the covariance.
    pub fn total_variance(&self) -> S {
        self.covariance.trace()
    }
}

fn sym_eigen_range<S: Scalar>(m: &DMatrix<S>) -> Result<(S, S)> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let scale = m.amax().max(S::lit(1.0));
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > S::lit(1e-9) * scale {
                return Err(Error::InvalidInput("matrix is not symmetric".into()));
            }
        }
    }
    let eigen = m.clone().symmetric_eigen();
    let mut min = eigen.eigenvalues[0];
    let mut max = eigen.eigenvalues[0];
    for &l in eigen.eigenvalues.iter() {
        min = min.min(l);
        max = max.max(l);
    }
    Ok((min, max))
}

// Symmetric square root with eigenvalues below 1e-14 clamped to zero.
fn sym_sqrt<S: Scalar>(m: &DMatrix<S>) -> DMatrix<S> {
    let eigen = m.clone().symmetric_eigen();
    let clamped = DVector::from_fn(eigen.eigenvalues.len(), |i, _| {
        let l = eigen.eigenvalues[i];
        if l < S::lit(1e-14) {
            S::zero()
        } else {
            l.sqrt()
        }
    });
    let q = eigen.eigenvectors;
    &q * DMatrix::from_diagonal(&clamped) * q.transpose()
}

/// Exact posterior of an all-Gaussian potential set: precision is the sum of
/// the client precisions, mean is the precision-weighted mean combination.
pub fn gaussian_product_posterior<S: Scalar>(set: &PotentialSet<S>) -> Result<GaussianLaw<S>> {
    if !set.is_all_gaussian() {
        return Err(Error::InvalidInput(
            "exact posterior requires an all-Gaussian set".into(),
        ));
    }
    let dim = set.dim();
    let mut precision = DMatrix::<S>::zeros(dim, dim);
    let mut weighted = DVector::<S>::zeros(dim);
    for c in set.clients() {
        let (p, pm) = c.gaussian_moments().expect("all-gaussian set");
        precision += p;
        weighted += pm;
    }
    let chol = precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("summed precision is singular".into()))?;
    let mean = chol.solve(&weighted);
    let mut covariance = chol.inverse();
    // The inverse can pick up asymmetric rounding; restore exact symmetry.
    for i in 0..dim {
        for j in (i + 1)..dim {
            let avg = (covariance[(i, j)] + covariance[(j, i)]) * S::lit(0.5);
            covariance[(i, j)] = avg;
            covariance[(j, i)] = avg;
        }
    }
    GaussianLaw::new(mean, covariance)
}

/// 2-Wasserstein distance between Gaussian laws (Bures metric):
///
/// ```text
/// W2^2 = ||m1 - m2||^2 + tr(S1) + tr(S2) - 2 tr((S1^{1/2} S2 S1^{1/2})^{1/2})
/// ```
pub fn w2_gaussian<S: Scalar>(a: &GaussianLaw<S>, b: &GaussianLaw<S>) -> Result<S> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    w2_gaussian_raw(&a.mean, &a.covariance, &b.mean, &b.covariance)
}

/// Bures form on raw moments; accepts positive semidefinite covariances so
/// degenerate sample fits remain comparable.
pub fn w2_gaussian_raw<S: Scalar>(
    mean_a: &DVector<S>,
    cov_a: &DMatrix<S>,
    mean_b: &DVector<S>,
    cov_b: &DMatrix<S>,
) -> Result<S> {
    if mean_a.len() != mean_b.len() {
        return Err(Error::DimensionMismatch {
            expected: mean_a.len(),
            got: mean_b.len(),
        });
    }
    if mean_a == mean_b && cov_a == cov_b {
        return Ok(S::zero());
    }
    if mean_a.len() == 1 {
        // Scalar case in closed form; the eigen path would waste precision.
        let dm = mean_a[0] - mean_b[0];
        let ds = cov_a[(0, 0)].max(S::zero()).sqrt() - cov_b[(0, 0)].max(S::zero()).sqrt();
        return Ok((dm * dm + ds * ds).sqrt());
    }
    let sqrt_a = sym_sqrt(cov_a);
    let inner = &sqrt_a * cov_b * &sqrt_a;
    let eigen = inner.symmetric_eigen();
    let mut cross = S::zero();
    for &l in eigen.eigenvalues.iter() {
        if l > S::lit(1e-14) {
            cross += l.sqrt();
        }
    }
    let squared = (mean_a - mean_b).norm_squared() + cov_a.trace() + cov_b.trace()
        - S::lit(2.0) * cross;
    Ok(squared.max(S::zero()).sqrt())
}

/// Two heterogeneous scalar Gaussian clients `(mu_i, sigma_i^2)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TwoClientGaussianSpec<S: Scalar> {
    pub mu1: S,
    pub mu2: S,
    pub var1: S,
    pub var2: S,
}

impl<S: Scalar> TwoClientGaussianSpec<S> {
    pub fn new(mu1: S, mu2: S, var1: S, var2: S) -> Result<Self> {
        if var1 <= S::zero() || var2 <= S::zero() {
            return Err(Error::InvalidInput("variances must be positive".into()));
        }
        Ok(Self {
            mu1,
            mu2,
            var1,
            var2,
        })
    }

    /// Target mean `(mu1 s2^2 + mu2 s1^2) / (s1^2 + s2^2)`.
    pub fn target_mean(&self) -> S {
        (self.mu1 * self.var2 + self.mu2 * self.var1) / (self.var1 + self.var2)
    }

    /// Target variance `(1/s1^2 + 1/s2^2)^{-1}`.
    pub fn target_variance(&self) -> S {
        S::one() / (S::one() / self.var1 + S::one() / self.var2)
    }

    /// The target law itself.
    pub fn target_law(&self) -> Result<GaussianLaw<S>> {
        GaussianLaw::univariate(self.target_mean(), self.target_variance())
    }

    fn inv_var4_sum(&self) -> S {
        S::one() / (self.var1 * self.var1) + S::one() / (self.var2 * self.var2)
    }

    /// Largest admissible step size `2 (s1 s2)^4 / [sbar^2 (s1^4 + s2^4)]`.
    pub fn gamma_max(&self) -> S {
        S::lit(2.0) / (self.target_variance() * self.inv_var4_sum())
    }

    fn check_gamma(&self, gamma: S) -> Result<()> {
        if gamma <= S::zero() || gamma >= self.gamma_max() {
            return Err(Error::InvalidInput(format!(
                "gamma {} outside the admissible interval (0, {})",
                gamma.to_f64_lossy(),
                self.gamma_max().to_f64_lossy()
            )));
        }
        Ok(())
    }

    /// Contraction coefficient of the two-local-step averaging kernel.
    pub fn kernel_contraction(&self, gamma: S) -> S {
        S::one() - gamma / self.target_variance()
            + gamma * gamma * S::lit(0.5) * self.inv_var4_sum()
    }
}

/// Stationary law of the two-client, two-local-step averaging kernel.
///
/// The kernel is the scalar AR(1) recursion with contraction
/// `alpha = 1 - gamma/sbar^2 + (gamma^2/2)(1/s1^4 + 1/s2^4)`, drift
/// `beta = gamma mbar / sbar^2 - (gamma^2/2)(mu1/s1^4 + mu2/s2^4)` and noise
/// variance `gamma [1 + (1 - gamma/(2 sbar^2))^2]`; its fixed point has mean
/// `beta / (1 - alpha)` and variance `noise / (1 - alpha^2)`.
pub fn fald_two_step_stationary<S: Scalar>(
    spec: &TwoClientGaussianSpec<S>,
    gamma: S,
) -> Result<GaussianLaw<S>> {
    spec.check_gamma(gamma)?;
    let sbar2 = spec.target_variance();
    let mbar = spec.target_mean();
    let half = S::lit(0.5);
    let weighted_means =
        spec.mu1 / (spec.var1 * spec.var1) + spec.mu2 / (spec.var2 * spec.var2);
    // 1 - alpha and beta share a factor gamma; cancel it analytically so
    // small step sizes do not lose precision to catastrophic cancellation.
    let one_minus_alpha = gamma * (S::one() / sbar2 - gamma * half * spec.inv_var4_sum());
    let mean = (mbar / sbar2 - gamma * half * weighted_means)
        / (S::one() / sbar2 - gamma * half * spec.inv_var4_sum());
    let alpha = spec.kernel_contraction(gamma);
    let passthrough = S::one() - gamma / (S::lit(2.0) * sbar2);
    let noise_var = gamma * (S::one() + passthrough * passthrough);
    let variance = noise_var / (one_minus_alpha * (S::one() + alpha));
    GaussianLaw::univariate(mean, variance)
}

/// Heterogeneity lower bound on the asymptotic bias of the two-local-step
/// kernel:
///
/// ```text
/// W2(pi_gamma, pi) >= (gamma/2) |mu1 - mu2| |s1^2 - s2^2| / (s1^2 + s2^2)^2
/// ```
///
/// This is the stationary mean shift with its contraction denominator
/// dropped: `m_gamma - mbar = (gamma sbar^2/2)(S4 mbar - T)/(1 - x)` with
/// `x in (0, 1)`, and `S4 mbar - T` factors exactly as
/// `(mu1 - mu2)(s1^2 - s2^2) / (s1^2 s2^2 (s1^2 + s2^2))`.
pub fn heterogeneity_lower_bound<S: Scalar>(
    spec: &TwoClientGaussianSpec<S>,
    gamma: S,
) -> Result<S> {
    spec.check_gamma(gamma)?;
    let var_sum = spec.var1 + spec.var2;
    Ok(gamma * S::lit(0.5) * (spec.mu1 - spec.mu2).abs() * (spec.var1 - spec.var2).abs()
        / (var_sum * var_sum))
}

/// Reference step size `2 / (lmin + lmax)` of the posterior precision.
pub fn reference_step_size<S: Scalar>(posterior: &GaussianLaw<S>) -> S {
    let (min_cov, max_cov) = sym_eigen_range(posterior.covariance()).expect("validated covariance");
    let min_prec = S::one() / max_cov;
    let max_prec = S::one() / min_cov;
    S::lit(2.0) / (min_prec + max_prec)
}

/// Budget problem: minimize the iteration count `k` subject to
/// `c0 exp(-k gamma m / 8) + c1 gamma + c2 gamma^2 <= epsilon^2`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BudgetProblem<S: Scalar> {
    pub c0: S,
    pub c1: S,
    pub c2: S,
    pub m: S,
    pub epsilon: S,
}

/// Solution of a budget problem. `iterations` is the continuous saturation
/// count `K(gamma)`; callers wanting an integer round it up.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BudgetSolution<S: Scalar> {
    pub gamma: S,
    pub iterations: S,
    pub z: S,
}

struct ZParam<S: Scalar> {
    mu: S,
    sigma: S,
    eps2: S,
    c_offset: S,
}

impl<S: Scalar> ZParam<S> {
    fn x(&self, z: S) -> S {
        self.mu + z * self.sigma
    }

    // K(z) up to the positive factor 8/(eps^2 m); minimizing this minimizes
    // the iteration count with the constraint saturated.
    fn objective(&self, z: S) -> S {
        (self.c_offset - (S::one() - z * z).ln()) / self.x(z)
    }

    fn derivative(&self, z: S) -> S {
        let x = self.x(z);
        let a = self.c_offset - (S::one() - z * z).ln();
        let a_prime = S::lit(2.0) * z / (S::one() - z * z);
        (a_prime * x - a * self.sigma) / (x * x)
    }

    fn second_derivative(&self, z: S) -> S {
        let x = self.x(z);
        let one_minus = S::one() - z * z;
        let a_second = (S::lit(2.0) + S::lit(2.0) * z * z) / (one_minus * one_minus);
        a_second / x - S::lit(2.0) * self.sigma * self.derivative(z) / x
    }
}

/// Solves the budget problem: a coarse bracket scan, golden-section search
/// and a Newton polish on the stationarity equation (tolerance `1e-10` in
/// `z`). The returned pair `(gamma, iterations)` saturates the constraint
/// exactly.
pub fn budget_optimize<S: Scalar>(problem: &BudgetProblem<S>) -> Result<BudgetSolution<S>> {
    let BudgetProblem {
        c0,
        c1,
        c2,
        m,
        epsilon,
    } = *problem;
    if c0 < S::zero() || c1 < S::zero() || c2 < S::zero() {
        return Err(Error::InvalidInput("cost constants must be nonnegative".into()));
    }
    if m <= S::zero() || epsilon <= S::zero() {
        return Err(Error::InvalidInput(
            "contraction constant and tolerance must be positive".into(),
        ));
    }
    if c2 <= S::zero() {
        return Err(Error::InvalidInput(
            "the z-parametrization requires c2 > 0".into(),
        ));
    }
    let eps2 = epsilon * epsilon;
    if c0 <= eps2 {
        return Err(Error::Infeasible(format!(
            "c0 = {} does not exceed epsilon^2 = {}; no positive iteration count saturates the constraint",
            c0.to_f64_lossy(),
            eps2.to_f64_lossy()
        )));
    }

    let c2_tilde = eps2 * c2;
    let mu = -c1 / (S::lit(2.0) * c2_tilde);
    let sigma = (c1 * c1 / (S::lit(4.0) * c2_tilde * c2_tilde) + S::one() / c2_tilde).sqrt();
    // ln(c0 / (eps^2 c2_tilde sigma^2)): the constant offset of the
    // objective; dropping it would bias the optimum.
    let c_offset = (c0 / (eps2 * c2_tilde * sigma * sigma)).ln();
    let param = ZParam {
        mu,
        sigma,
        eps2,
        c_offset,
    };

    let lo = (-mu / sigma).max(S::lit(-0.999_999));
    let hi = S::lit(0.999_999);
    let guard = S::lit(1e-9) * (hi - lo);
    let (mut a, mut b) = bracket_minimum(&param, lo + guard, hi - guard, 4000);
    golden_section(&param, &mut a, &mut b, S::lit(1e-12));
    let mut z = (a + b) * S::lit(0.5);
    for _ in 0..50 {
        let d1 = param.derivative(z);
        let d2 = param.second_derivative(z);
        if d2 <= S::zero() {
            break;
        }
        let step = d1 / d2;
        let next = (z - step).max(lo + guard).min(hi - guard);
        let moved = (next - z).abs();
        z = next;
        if moved < S::lit(1e-14) {
            break;
        }
    }

    let gamma = param.eps2 * param.x(z);
    let slack = eps2 - c1 * gamma - c2 * gamma * gamma;
    if slack <= S::zero() {
        return Err(Error::Numerical("optimizer left the feasible region".into()));
    }
    let iterations = S::lit(8.0) / (gamma * m) * (c0 / slack).ln();
    Ok(BudgetSolution {
        gamma,
        iterations,
        z,
    })
}

fn bracket_minimum<S: Scalar>(param: &ZParam<S>, lo: S, hi: S, points: usize) -> (S, S) {
    let mut best = lo;
    let mut best_val = param.objective(lo);
    let step = (hi - lo) / S::lit(points as f64);
    for i in 1..=points {
        let z = lo + step * S::lit(i as f64);
        let v = param.objective(z);
        if v < best_val {
            best = z;
            best_val = v;
        }
    }
    ((best - step).max(lo), (best + step).min(hi))
}

fn golden_section<S: Scalar>(param: &ZParam<S>, a: &mut S, b: &mut S, tol: S) {
    let resp = S::lit(2.0 - 1.618_033_988_749_895);
    let mut x1 = *a + resp * (*b - *a);
    let mut x2 = *b - resp * (*b - *a);
    let mut f1 = param.objective(x1);
    let mut f2 = param.objective(x2);
    while (*b - *a).abs() > tol {
        if f1 < f2 {
            *b = x2;
            x2 = x1;
            f2 = f1;
            x1 = *a + resp * (*b - *a);
            f1 = param.objective(x1);
        } else {
            *a = x1;
            x1 = x2;
            f1 = f2;
            x2 = *b - resp * (*b - *a);
            f2 = param.objective(x2);
        }
    }
}

/// Evaluates the budget constraint left-hand side at `(gamma, iterations)`.
pub fn budget_constraint_lhs<S: Scalar>(problem: &BudgetProblem<S>, gamma: S, iterations: S) -> S {
    problem.c0 * (-iterations * gamma * problem.m / S::lit(8.0)).exp()
        + problem.c1 * gamma
        + problem.c2 * gamma * gamma
}

/// On-disk form of a Gaussian law.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianLawSchema {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl GaussianLawSchema {
    pub fn build<S: Scalar>(&self) -> Result<GaussianLaw<S>> {
        let dim = self.mean.len();
        if self.covariance.len() != dim || self.covariance.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidInput(
                "covariance shape does not match the mean".into(),
            ));
        }
        GaussianLaw::new(
            DVector::from_fn(dim, |i, _| S::lit(self.mean[i])),
            DMatrix::from_fn(dim, dim, |i, j| S::lit(self.covariance[i][j])),
        )
    }

    pub fn from_law<S: Scalar>(law: &GaussianLaw<S>) -> Self {
        Self {
            mean: law.mean().iter().map(|v| v.to_f64_lossy()).collect(),
            covariance: (0..law.dim())
                .map(|i| {
                    (0..law.dim())
                        .map(|j| law.covariance()[(i, j)].to_f64_lossy())
                        .collect()
                })
                .collect(),
        }
    }
}
