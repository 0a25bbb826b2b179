//! Client potential models: negative log-posteriors with exact, per-term and
//! minibatch gradient oracles, plus the global constants derived from them
//! (minimizer, heterogeneity, smoothness/convexity and variance constants).
//!
//! A client potential decomposes as
//!
//! ```text
//! U(x) = prior(x) + sum_{j=1..N} U_j(x)
//! ```
//!
//! where `prior` is a deterministic component that is never subsampled (the
//! ridge term of a logistic model; zero for the quadratic families) and the
//! `U_j` are the data terms a minibatch draws from.

mod generator;
mod schema;

pub use generator::{generate_gaussian_set, GaussianSetParams};
pub use schema::{load_potential_set, save_potential_set, ClientSchema, PotentialSetSchema};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const SYMMETRY_RTOL: f64 = 1e-12;
const WEIGHT_SUM_TOL: f64 = 1e-12;

fn check_dim<S: Scalar>(x: &DVector<S>, dim: usize) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x.len(),
        });
    }
    Ok(())
}

/// Validates that `m` is square, symmetric within `1e-12` relative error and
/// returns its eigenvalue range `(min, max)`.
fn symmetric_eigen_range<S: Scalar>(m: &DMatrix<S>) -> Result<(S, S)> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    let scale = m.amax().max(S::lit(1.0));
    let tol = S::lit(SYMMETRY_RTOL) * scale;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return Err(Error::InvalidInput(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let eigen = m.clone().symmetric_eigen();
    let mut min = eigen.eigenvalues[0];
    let mut max = eigen.eigenvalues[0];
    for &lambda in eigen.eigenvalues.iter() {
        min = min.min(lambda);
        max = max.max(lambda);
    }
    Ok((min, max))
}

/// Gaussian quadratic potential `x -> (1/2) (x - mean)' P (x - mean)` stored
/// through its precision matrix `P`.
#[derive(Debug, Clone)]
pub struct GaussianPotential<S: Scalar> {
    mean: DVector<S>,
    precision: DMatrix<S>,
}

impl<S: Scalar> GaussianPotential<S> {
    /// Builds the potential, checking symmetry and positive definiteness of
    /// the precision matrix.
    pub fn new(mean: DVector<S>, precision: DMatrix<S>) -> Result<Self> {
        if precision.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: precision.nrows(),
            });
        }
        let (min, _) = symmetric_eigen_range(&precision)?;
        if min <= S::zero() {
            return Err(Error::InvalidInput(
                "precision matrix must be positive definite".into(),
            ));
        }
        Ok(Self { mean, precision })
    }

    pub fn mean(&self) -> &DVector<S> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<S> {
        &self.precision
    }
}

/// One quadratic term `x -> (1/2) (x - mean)' P (x - mean)` of a finite-sum
/// quadratic client.
#[derive(Debug, Clone)]
pub struct QuadraticTerm<S: Scalar> {
    mean: DVector<S>,
    precision: DMatrix<S>,
}

impl<S: Scalar> QuadraticTerm<S> {
    /// Builds a term; the precision must be symmetric positive semidefinite.
    pub fn new(mean: DVector<S>, precision: DMatrix<S>) -> Result<Self> {
        if precision.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: precision.nrows(),
            });
        }
        let (min, _) = symmetric_eigen_range(&precision)?;
        if min < -S::lit(1e-12) {
            return Err(Error::InvalidInput(
                "quadratic term precision must be positive semidefinite".into(),
            ));
        }
        Ok(Self { mean, precision })
    }

    pub fn mean(&self) -> &DVector<S> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<S> {
        &self.precision
    }
}

/// Sum of quadratic terms; the aggregate is again Gaussian, which keeps the
/// exact posterior computable while giving the client a nontrivial finite-sum
/// structure for minibatching.
#[derive(Debug, Clone)]
pub struct QuadraticSumPotential<S: Scalar> {
    terms: Vec<QuadraticTerm<S>>,
    total_precision: DMatrix<S>,
}

impl<S: Scalar> QuadraticSumPotential<S> {
    /// Builds the client from its terms; the summed precision must be
    /// positive definite.
    pub fn new(terms: Vec<QuadraticTerm<S>>) -> Result<Self> {
        let first = terms
            .first()
            .ok_or_else(|| Error::InvalidInput("quadratic sum needs at least one term".into()))?;
        let dim = first.mean.len();
        let mut total = DMatrix::<S>::zeros(dim, dim);
        for term in &terms {
            if term.mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: term.mean.len(),
                });
            }
            total += &term.precision;
        }
        let (min, _) = symmetric_eigen_range(&total)?;
        if min <= S::zero() {
            return Err(Error::InvalidInput(
                "summed precision must be positive definite".into(),
            ));
        }
        Ok(Self {
            terms,
            total_precision: total,
        })
    }

    pub fn terms(&self) -> &[QuadraticTerm<S>] {
        &self.terms
    }

    pub fn total_precision(&self) -> &DMatrix<S> {
        &self.total_precision
    }
}

/// Ridge-regularized logistic-regression potential
///
/// ```text
/// U(x) = sum_j [ o_j ln(1 + e^{-z_j'x}) + (1 - o_j) ln(1 + e^{z_j'x}) ] + ridge ||x||^2
/// ```
#[derive(Debug, Clone)]
pub struct LogisticPotential<S: Scalar> {
    covariates: DMatrix<S>,
    labels: DVector<S>,
    ridge: S,
}

impl<S: Scalar> LogisticPotential<S> {
    /// Builds the potential; labels must be 0/1 and match the covariate rows.
    pub fn new(covariates: DMatrix<S>, labels: DVector<S>, ridge: S) -> Result<Self> {
        if labels.len() != covariates.nrows() {
            return Err(Error::DimensionMismatch {
                expected: covariates.nrows(),
                got: labels.len(),
            });
        }
        if covariates.nrows() == 0 {
            return Err(Error::InvalidInput(
                "logistic potential needs at least one observation".into(),
            ));
        }
        for &o in labels.iter() {
            if o != S::zero() && o != S::one() {
                return Err(Error::InvalidInput("labels must be 0 or 1".into()));
            }
        }
        if ridge < S::zero() {
            return Err(Error::InvalidInput("ridge weight must be nonnegative".into()));
        }
        Ok(Self {
            covariates,
            labels,
            ridge,
        })
    }

    pub fn covariates(&self) -> &DMatrix<S> {
        &self.covariates
    }

    pub fn labels(&self) -> &DVector<S> {
        &self.labels
    }

    pub fn ridge(&self) -> S {
        self.ridge
    }

    fn logit(&self, j: usize, x: &DVector<S>) -> S {
        let mut t = S::zero();
        for c in 0..x.len() {
            t += self.covariates[(j, c)] * x[c];
        }
        t
    }
}

/// `ln(1 + e^t)` without overflow.
fn softplus<S: Scalar>(t: S) -> S {
    if t > S::zero() {
        t + (S::one() + (-t).exp()).ln()
    } else {
        (S::one() + t.exp()).ln()
    }
}

/// `1 / (1 + e^{-t})` without overflow.
fn sigmoid<S: Scalar>(t: S) -> S {
    if t >= S::zero() {
        S::one() / (S::one() + (-t).exp())
    } else {
        let e = t.exp();
        e / (S::one() + e)
    }
}

/// A client's negative log-posterior with exact and stochastic gradient
/// oracles.
#[derive(Debug, Clone)]
pub enum ClientPotential<S: Scalar> {
    Gaussian(GaussianPotential<S>),
    QuadraticSum(QuadraticSumPotential<S>),
    Logistic(LogisticPotential<S>),
}

impl<S: Scalar> ClientPotential<S> {
    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian(g) => g.mean.len(),
            Self::QuadraticSum(q) => q.terms[0].mean.len(),
            Self::Logistic(l) => l.covariates.ncols(),
        }
    }

    /// Number of data terms `N_i` a minibatch draws from.
    pub fn num_terms(&self) -> usize {
        match self {
            Self::Gaussian(_) => 1,
            Self::QuadraticSum(q) => q.terms.len(),
            Self::Logistic(l) => l.covariates.nrows(),
        }
    }

    /// Potential value `U(x)`, prior part included.
    pub fn value(&self, x: &DVector<S>) -> Result<S> {
        check_dim(x, self.dim())?;
        Ok(match self {
            Self::Gaussian(g) => {
                let r = x - &g.mean;
                (r.dot(&(&g.precision * &r))) * S::lit(0.5)
            }
            Self::QuadraticSum(q) => {
                let mut v = S::zero();
                for term in &q.terms {
                    let r = x - &term.mean;
                    v += (r.dot(&(&term.precision * &r))) * S::lit(0.5);
                }
                v
            }
            Self::Logistic(l) => {
                let mut v = l.ridge * x.norm_squared();
                for j in 0..l.covariates.nrows() {
                    let t = l.logit(j, x);
                    let o = l.labels[j];
                    v += o * softplus(-t) + (S::one() - o) * softplus(t);
                }
                v
            }
        })
    }

    /// Exact gradient of the deterministic (never subsampled) prior part.
    pub fn prior_grad(&self, x: &DVector<S>) -> Result<DVector<S>> {
        check_dim(x, self.dim())?;
        Ok(match self {
            Self::Gaussian(_) | Self::QuadraticSum(_) => DVector::zeros(self.dim()),
            Self::Logistic(l) => x * (S::lit(2.0) * l.ridge),
        })
    }

    /// Exact gradient of the `j`-th data term.
    pub fn term_grad(&self, j: usize, x: &DVector<S>) -> Result<DVector<S>> {
        check_dim(x, self.dim())?;
        if j >= self.num_terms() {
            return Err(Error::InvalidInput(format!(
                "term index {j} out of range (N = {})",
                self.num_terms()
            )));
        }
        Ok(match self {
            Self::Gaussian(g) => &g.precision * (x - &g.mean),
            Self::QuadraticSum(q) => &q.terms[j].precision * (x - &q.terms[j].mean),
            Self::Logistic(l) => {
                let s = sigmoid(l.logit(j, x));
                let coeff = s - l.labels[j];
                DVector::from_fn(x.len(), |c, _| l.covariates[(j, c)] * coeff)
            }
        })
    }

    /// Exact full gradient `grad U(x)`.
    pub fn grad(&self, x: &DVector<S>) -> Result<DVector<S>> {
        check_dim(x, self.dim())?;
        Ok(match self {
            Self::Gaussian(g) => &g.precision * (x - &g.mean),
            Self::QuadraticSum(q) => &q.total_precision * x - self.precision_mean_product(),
            Self::Logistic(_) => {
                let mut g = self.prior_grad(x)?;
                for j in 0..self.num_terms() {
                    g += self.term_grad(j, x)?;
                }
                g
            }
        })
    }

    /// Exact Hessian of `U` at `x` (constant for the quadratic families).
    pub fn hessian(&self, x: &DVector<S>) -> Result<DMatrix<S>> {
        check_dim(x, self.dim())?;
        Ok(match self {
            Self::Gaussian(g) => g.precision.clone(),
            Self::QuadraticSum(q) => q.total_precision.clone(),
            Self::Logistic(l) => {
                let d = x.len();
                let mut h = DMatrix::from_diagonal_element(d, d, S::lit(2.0) * l.ridge);
                for j in 0..l.covariates.nrows() {
                    let s = sigmoid(l.logit(j, x));
                    let w = s * (S::one() - s);
                    for a in 0..d {
                        let za = l.covariates[(j, a)];
                        for b in 0..d {
                            h[(a, b)] += w * za * l.covariates[(j, b)];
                        }
                    }
                }
                h
            }
        })
    }

    /// Minibatch gradient estimator
    /// `prior_weight * grad prior(x) + (N/n) * sum_{j in batch} grad U_j(x)`.
    ///
    /// Averaged over all size-`n` subsets (and with `prior_weight = 1`) this
    /// reproduces `grad(x)` exactly.
    pub fn stochastic_grad(
        &self,
        x: &DVector<S>,
        batch: &[usize],
        prior_weight: S,
    ) -> Result<DVector<S>> {
        check_dim(x, self.dim())?;
        if batch.is_empty() {
            return Err(Error::InvalidInput("minibatch must not be empty".into()));
        }
        let n_terms = self.num_terms();
        let mut g = self.prior_grad(x)? * prior_weight;
        let scale = S::lit(n_terms as f64 / batch.len() as f64);
        for &j in batch {
            if j >= n_terms {
                return Err(Error::InvalidInput(format!(
                    "batch index {j} out of range (N = {n_terms})"
                )));
            }
            g += self.term_grad(j, x)? * scale;
        }
        Ok(g)
    }

    /// Per-term Lipschitz constants `L_j` of the data-term gradients.
    ///
    /// Quadratic terms use the exact largest eigenvalue; logistic rows use
    /// the conservative bound `||z_j||^2 / 4 + 2 ridge / N`.
    pub fn term_smoothness(&self) -> Result<Vec<S>> {
        Ok(match self {
            Self::Gaussian(g) => {
                let (_, max) = symmetric_eigen_range(&g.precision)?;
                vec![max]
            }
            Self::QuadraticSum(q) => {
                let mut out = Vec::with_capacity(q.terms.len());
                for term in &q.terms {
                    let (_, max) = symmetric_eigen_range(&term.precision)?;
                    out.push(max);
                }
                out
            }
            Self::Logistic(l) => {
                let n = S::lit(l.covariates.nrows() as f64);
                (0..l.covariates.nrows())
                    .map(|j| {
                        let row_sq = (0..l.covariates.ncols())
                            .map(|c| l.covariates[(j, c)] * l.covariates[(j, c)])
                            .fold(S::zero(), |a, v| a + v);
                        row_sq * S::lit(0.25) + S::lit(2.0) * l.ridge / n
                    })
                    .collect()
            }
        })
    }

    /// Strong-convexity and smoothness constants `(m, L)` of this client.
    ///
    /// Exact eigenvalue range for the quadratic families; for logistic the
    /// standard conservative bounds `m = 2 ridge`, `L = 2 ridge + lmax(Z'Z)/4`.
    pub fn convexity_bounds(&self) -> Result<(S, S)> {
        Ok(match self {
            Self::Gaussian(g) => symmetric_eigen_range(&g.precision)?,
            Self::QuadraticSum(q) => symmetric_eigen_range(&q.total_precision)?,
            Self::Logistic(l) => {
                let gram = l.covariates.transpose() * &l.covariates;
                let (_, max) = symmetric_eigen_range(&gram)?;
                let two_ridge = S::lit(2.0) * l.ridge;
                (two_ridge, two_ridge + max * S::lit(0.25))
            }
        })
    }

    /// Total precision and precision-weighted mean when the client is
    /// Gaussian-equivalent (quadratic families); `None` for logistic.
    pub fn gaussian_moments(&self) -> Option<(DMatrix<S>, DVector<S>)> {
        match self {
            Self::Gaussian(g) => Some((g.precision.clone(), &g.precision * &g.mean)),
            Self::QuadraticSum(q) => {
                Some((q.total_precision.clone(), self.precision_mean_product()))
            }
            Self::Logistic(_) => None,
        }
    }

    fn precision_mean_product(&self) -> DVector<S> {
        match self {
            Self::Gaussian(g) => &g.precision * &g.mean,
            Self::QuadraticSum(q) => {
                let mut v = DVector::zeros(self.dim());
                for term in &q.terms {
                    v += &term.precision * &term.mean;
                }
                v
            }
            Self::Logistic(_) => unreachable!("no quadratic moments for logistic"),
        }
    }
}

/// Global constants of a potential set, per the smoothness assumptions and
/// the minibatch variance bounds.
#[derive(Debug, Clone)]
pub struct ConstantsReport<S: Scalar> {
    /// Minimizer `x_*` of the summed potential.
    pub minimizer: DVector<S>,
    /// Heterogeneity `H = (1/b) sum_i ||grad U^i(x_*)||^2`.
    pub heterogeneity: S,
    /// Strong convexity constant `m`.
    pub strong_convexity: S,
    /// Smoothness constant `L`.
    pub smoothness: S,
    /// Stochastic-gradient smoothness `L_hat` (equals `L` for full batches).
    pub stochastic_smoothness: S,
    /// Variance-reduction constant `omega` (zero for full batches).
    pub vr_variance_const: S,
    /// Gradient-variance constant `omega_tilde` (zero for full batches).
    pub grad_variance_const: S,
}

/// A federation of client potentials targeting `pi ∝ exp(-sum_i U^i)`.
#[derive(Debug, Clone)]
pub struct PotentialSet<S: Scalar> {
    clients: Vec<ClientPotential<S>>,
    prior_weights: DVector<S>,
}

impl<S: Scalar> PotentialSet<S> {
    /// Builds a set with uniform prior weights `1/b`.
    pub fn new(clients: Vec<ClientPotential<S>>) -> Result<Self> {
        let b = clients.len();
        if b == 0 {
            return Err(Error::InvalidInput("potential set must not be empty".into()));
        }
        let w = DVector::from_element(b, S::lit(1.0 / b as f64));
        Self::with_prior_weights(clients, w)
    }

    /// Builds a set with explicit prior weights (nonnegative, summing to 1).
    pub fn with_prior_weights(
        clients: Vec<ClientPotential<S>>,
        prior_weights: DVector<S>,
    ) -> Result<Self> {
        let b = clients.len();
        if b == 0 {
            return Err(Error::InvalidInput("potential set must not be empty".into()));
        }
        if prior_weights.len() != b {
            return Err(Error::DimensionMismatch {
                expected: b,
                got: prior_weights.len(),
            });
        }
        let dim = clients[0].dim();
        for c in &clients {
            if c.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.dim(),
                });
            }
        }
        let mut sum = S::zero();
        for &w in prior_weights.iter() {
            if w < S::zero() {
                return Err(Error::InvalidInput("prior weights must be nonnegative".into()));
            }
            sum += w;
        }
        if (sum - S::one()).abs() > S::lit(WEIGHT_SUM_TOL) {
            return Err(Error::InvalidInput(format!(
                "prior weights must sum to 1, got {}",
                sum.to_f64_lossy()
            )));
        }
        Ok(Self {
            clients,
            prior_weights,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.clients[0].dim()
    }

    pub fn clients(&self) -> &[ClientPotential<S>] {
        &self.clients
    }

    pub fn client(&self, i: usize) -> &ClientPotential<S> {
        &self.clients[i]
    }

    pub fn prior_weights(&self) -> &DVector<S> {
        &self.prior_weights
    }

    pub fn is_all_gaussian(&self) -> bool {
        self.clients
            .iter()
            .all(|c| !matches!(c, ClientPotential::Logistic(_)))
    }

    /// Summed potential `U(x) = sum_i U^i(x)`.
    pub fn value_sum(&self, x: &DVector<S>) -> Result<S> {
        let mut v = S::zero();
        for c in &self.clients {
            v += c.value(x)?;
        }
        Ok(v)
    }

    /// Gradient of the summed potential.
    pub fn grad_sum(&self, x: &DVector<S>) -> Result<DVector<S>> {
        let mut g = DVector::zeros(self.dim());
        for c in &self.clients {
            g += c.grad(x)?;
        }
        Ok(g)
    }

    /// Average gradient `(1/b) sum_i grad U^i(x)`, the drift of the
    /// rescaled Langevin diffusion.
    pub fn grad_mean(&self, x: &DVector<S>) -> Result<DVector<S>> {
        Ok(self.grad_sum(x)? / S::lit(self.num_clients() as f64))
    }

    fn hessian_sum(&self, x: &DVector<S>) -> Result<DMatrix<S>> {
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        for c in &self.clients {
            h += c.hessian(x)?;
        }
        Ok(h)
    }

    /// Minimizer `x_*` of the summed potential: closed form when every
    /// client is Gaussian-equivalent, damped Newton otherwise.
    pub fn minimizer(&self) -> Result<DVector<S>> {
        if self.is_all_gaussian() {
            let dim = self.dim();
            let mut precision = DMatrix::<S>::zeros(dim, dim);
            let mut weighted = DVector::<S>::zeros(dim);
            for c in &self.clients {
                let (p, pm) = c.gaussian_moments().expect("all-gaussian set");
                precision += p;
                weighted += pm;
            }
            return precision
                .cholesky()
                .ok_or_else(|| Error::Numerical("summed precision is not PD".into()))
                .map(|chol| chol.solve(&weighted));
        }
        self.newton_minimizer()
    }

    // Damped Newton with backtracking; cap 200 iterations, residual
    // tolerance 1e-8 * (1 + ||x||).
    fn newton_minimizer(&self) -> Result<DVector<S>> {
        let dim = self.dim();
        let mut x = DVector::<S>::zeros(dim);
        let mut value = self.value_sum(&x)?;
        for _ in 0..200 {
            let grad = self.grad_sum(&x)?;
            if grad.norm() <= S::lit(1e-8) * (S::one() + x.norm()) {
                return Ok(x);
            }
            let hess = self.hessian_sum(&x)?;
            let direction = hess
                .cholesky()
                .ok_or_else(|| Error::Numerical("Hessian is not PD in Newton solve".into()))?
                .solve(&grad);
            let slope = grad.dot(&direction);
            let mut step = S::one();
            loop {
                let candidate = &x - &direction * step;
                let cand_value = self.value_sum(&candidate)?;
                if cand_value <= value - S::lit(1e-4) * step * slope {
                    x = candidate;
                    value = cand_value;
                    break;
                }
                step *= S::lit(0.5);
                if step < S::lit(1e-12) {
                    return Err(Error::Numerical(
                        "Newton line search failed to make progress".into(),
                    ));
                }
            }
        }
        let grad = self.grad_sum(&x)?;
        if grad.norm() <= S::lit(1e-8) * (S::one() + x.norm()) {
            Ok(x)
        } else {
            Err(Error::Numerical(
                "Newton did not reach tolerance within 200 iterations".into(),
            ))
        }
    }

    /// Heterogeneity `H = (1/b) sum_i ||grad U^i(x_*)||^2`.
    pub fn heterogeneity(&self) -> Result<S> {
        let x_star = self.minimizer()?;
        self.heterogeneity_at(&x_star)
    }

    /// Heterogeneity evaluated at a precomputed minimizer.
    pub fn heterogeneity_at(&self, x_star: &DVector<S>) -> Result<S> {
        let mut h = S::zero();
        for c in &self.clients {
            h += c.grad(x_star)?.norm_squared();
        }
        Ok(h / S::lit(self.num_clients() as f64))
    }

    /// Computes the constants report for the given per-client minibatch
    /// sizes (`n_i = N_i` everywhere means full batch).
    pub fn constants(&self, batch_sizes: &[usize]) -> Result<ConstantsReport<S>> {
        let b = self.num_clients();
        if batch_sizes.len() != b {
            return Err(Error::DimensionMismatch {
                expected: b,
                got: batch_sizes.len(),
            });
        }
        let mut m = S::lit(f64::INFINITY);
        let mut big_l = S::zero();
        for c in &self.clients {
            let (mi, li) = c.convexity_bounds()?;
            m = m.min(mi);
            big_l = big_l.max(li);
        }

        // ratio_i = n_i (N_i - n_i) / (N_i (N_i - 1)) * max_j L_j^i,
        // zero for full batches.
        let mut max_ratio = S::zero();
        let mut sum_ratio = S::zero();
        for (i, c) in self.clients.iter().enumerate() {
            let n_terms = c.num_terms();
            let n_batch = batch_sizes[i];
            if n_batch == 0 || n_batch > n_terms {
                return Err(Error::InvalidInput(format!(
                    "batch size {n_batch} out of range for client {i} (N = {n_terms})"
                )));
            }
            if n_batch == n_terms || n_terms <= 1 {
                continue;
            }
            let max_term_l = self
                .clients[i]
                .term_smoothness()?
                .into_iter()
                .fold(S::zero(), |a, v| a.max(v));
            let frac = S::lit(
                (n_batch as f64) * ((n_terms - n_batch) as f64)
                    / ((n_terms as f64) * ((n_terms - 1) as f64)),
            );
            let ratio = frac * max_term_l;
            max_ratio = max_ratio.max(ratio);
            sum_ratio += ratio;
        }
        let l_hat = big_l * (S::one() + max_ratio / big_l).sqrt();
        let omega = max_ratio * big_l;
        let omega_tilde = sum_ratio * big_l / S::lit((b * b) as f64);

        let minimizer = self.minimizer()?;
        let heterogeneity = self.heterogeneity_at(&minimizer)?;
        Ok(ConstantsReport {
            minimizer,
            heterogeneity,
            strong_convexity: m,
            smoothness: big_l,
            stochastic_smoothness: l_hat,
            vr_variance_const: omega,
            grad_variance_const: omega_tilde,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type V = DVector<f64>;
    type M = DMatrix<f64>;

    fn gaussian_1d(mean: f64, variance: f64) -> ClientPotential<f64> {
        ClientPotential::Gaussian(
            GaussianPotential::new(V::from_vec(vec![mean]), M::from_vec(1, 1, vec![1.0 / variance]))
                .unwrap(),
        )
    }

    fn small_logistic() -> ClientPotential<f64> {
        let z = M::from_row_slice(3, 2, &[1.0, -0.5, 0.3, 0.8, -1.2, 0.4]);
        let o = V::from_vec(vec![1.0, 0.0, 1.0]);
        ClientPotential::Logistic(LogisticPotential::new(z, o, 0.7).unwrap())
    }

    #[test]
    fn gaussian_gradient_at_mean_is_zero() {
        let c = gaussian_1d(1.0, 2.0);
        let g = c.grad(&V::from_vec(vec![1.0])).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(c.value(&V::from_vec(vec![1.0])).unwrap(), 0.0);
    }

    #[test]
    fn gaussian_gradient_matches_closed_form() {
        // (3 - 1) / 2 = 1
        let c = gaussian_1d(1.0, 2.0);
        let g = c.grad(&V::from_vec(vec![3.0])).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let c = small_logistic();
        let x = V::from_vec(vec![0.4, -0.9]);
        let g = c.grad(&x).unwrap();
        let h = 1e-5 * (1.0 + x.norm());
        for k in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (c.value(&xp).unwrap() - c.value(&xm).unwrap()) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-5 * (1.0 + g[k].abs()),
                "coordinate {k}: fd {fd} vs analytic {}",
                g[k]
            );
        }
    }

    #[test]
    fn full_batch_stochastic_gradient_equals_exact() {
        let c = small_logistic();
        let x = V::from_vec(vec![0.2, 0.5]);
        let full: Vec<usize> = (0..c.num_terms()).collect();
        let sg = c.stochastic_grad(&x, &full, 1.0).unwrap();
        let g = c.grad(&x).unwrap();
        assert!((sg - g).norm() < 1e-14);
    }

    #[test]
    fn singleton_batches_average_to_exact_gradient() {
        let c = small_logistic();
        let x = V::from_vec(vec![-0.3, 0.1]);
        let mut acc = V::zeros(2);
        for j in 0..3 {
            acc += c.stochastic_grad(&x, &[j], 1.0).unwrap();
        }
        acc /= 3.0;
        let g = c.grad(&x).unwrap();
        assert!((acc - g).norm() < 1e-13);
    }

    #[test]
    fn zero_prior_weight_drops_ridge_part() {
        let c = small_logistic();
        let x = V::from_vec(vec![0.9, -0.2]);
        let sg = c.stochastic_grad(&x, &[1], 0.0).unwrap();
        let expected = c.term_grad(1, &x).unwrap() * 3.0;
        assert!((sg - expected).norm() < 1e-14);
    }

    #[test]
    fn empty_and_out_of_range_batches_are_rejected() {
        let c = small_logistic();
        let x = V::from_vec(vec![0.0, 0.0]);
        assert!(matches!(
            c.stochastic_grad(&x, &[], 1.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            c.stochastic_grad(&x, &[7], 1.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn two_symmetric_gaussians_minimize_at_midpoint() {
        let set = PotentialSet::new(vec![gaussian_1d(0.0, 1.0), gaussian_1d(2.0, 1.0)]).unwrap();
        let x = set.minimizer().unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_gaussian_minimizes_at_its_mean() {
        let set = PotentialSet::new(vec![gaussian_1d(3.5, 0.7)]).unwrap();
        let x = set.minimizer().unwrap();
        assert!((x[0] - 3.5).abs() < 1e-12);
    }

    #[test]
    fn logistic_minimizer_has_small_residual() {
        let set = PotentialSet::new(vec![small_logistic(), gaussian_1d_pair()]).unwrap();
        let x = set.minimizer().unwrap();
        let res = set.grad_sum(&x).unwrap().norm();
        assert!(res <= 1e-8 * (1.0 + x.norm()), "residual {res}");
    }

    fn gaussian_1d_pair() -> ClientPotential<f64> {
        ClientPotential::Gaussian(
            GaussianPotential::new(
                V::from_vec(vec![0.5, -0.5]),
                M::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            )
            .unwrap(),
        )
    }

    #[test]
    fn identical_clients_have_zero_heterogeneity() {
        let set = PotentialSet::new(vec![gaussian_1d(1.0, 2.0); 4]).unwrap();
        assert!(set.heterogeneity().unwrap() < 1e-24);
    }

    #[test]
    fn two_client_heterogeneity_matches_hand_computation() {
        // x_* = 1, gradients are +1 and -1, H = 1.
        let set = PotentialSet::new(vec![gaussian_1d(0.0, 1.0), gaussian_1d(2.0, 1.0)]).unwrap();
        assert!((set.heterogeneity().unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_set_heterogeneity_matches_direct_formula() {
        let params = GaussianSetParams {
            clients: 5,
            dim: 3,
            seed: 11,
            mean_spread: 2.0,
            condition_number: 4.0,
            terms_per_client: 1,
        };
        let set: PotentialSet<f64> = generate_gaussian_set(&params).unwrap();
        let x_star = set.minimizer().unwrap();
        let mut direct = 0.0;
        for c in set.clients() {
            direct += c.grad(&x_star).unwrap().norm_squared();
        }
        direct /= 5.0;
        let h = set.heterogeneity().unwrap();
        assert!((h - direct).abs() <= 1e-12 * (1.0 + direct));
        // Residual identity: sum_i P_i (x_* - mu_i) = 0.
        let res = set.grad_sum(&x_star).unwrap().norm();
        assert!(res < 1e-10, "gaussian minimizer residual {res}");
    }

    #[test]
    fn isotropic_constants_collapse_to_the_scale() {
        let lambda = 2.5;
        let prec = M::from_diagonal_element(3, 3, lambda);
        let c = ClientPotential::Gaussian(
            GaussianPotential::new(V::zeros(3), prec).unwrap(),
        );
        let set = PotentialSet::new(vec![c.clone(), c]).unwrap();
        let report = set.constants(&[1, 1]).unwrap();
        assert!((report.strong_convexity - lambda).abs() < 1e-12);
        assert!((report.smoothness - lambda).abs() < 1e-12);
        // Full batch: variance constants vanish, L_hat = L.
        assert_eq!(report.vr_variance_const, 0.0);
        assert_eq!(report.grad_variance_const, 0.0);
        assert!((report.stochastic_smoothness - lambda).abs() < 1e-12);
    }

    #[test]
    fn quadratic_sum_omega_matches_plugin_evaluation() {
        // N = 4 terms, n = 2: omega = n(N-n)/(N(N-1)) * max_j L_j * L.
        let terms: Vec<QuadraticTerm<f64>> = (0..4)
            .map(|j| {
                let scale = 0.5 + 0.25 * j as f64;
                QuadraticTerm::new(
                    V::from_vec(vec![j as f64, -(j as f64)]),
                    M::from_diagonal_element(2, 2, scale),
                )
                .unwrap()
            })
            .collect();
        let client = ClientPotential::QuadraticSum(QuadraticSumPotential::new(terms).unwrap());
        let set = PotentialSet::new(vec![client]).unwrap();
        let report = set.constants(&[2]).unwrap();

        let max_term_l = 0.5 + 0.25 * 3.0; // largest term eigenvalue
        let total_l = 0.5 + 0.75 + 1.0 + 1.25; // eigenvalue of the summed precision
        let expected = (2.0 * 2.0) / (4.0 * 3.0) * max_term_l * total_l;
        assert!(
            (report.vr_variance_const - expected).abs() <= 1e-12 * expected,
            "omega {} vs plug-in {expected}",
            report.vr_variance_const
        );
        let expected_l_hat = total_l * (1.0 + (2.0 * 2.0) / (4.0 * 3.0) * max_term_l / total_l).sqrt();
        assert!((report.stochastic_smoothness - expected_l_hat).abs() <= 1e-12 * expected_l_hat);
    }

    #[test]
    fn prior_weights_must_sum_to_one() {
        let err = PotentialSet::with_prior_weights(
            vec![gaussian_1d(0.0, 1.0), gaussian_1d(1.0, 1.0)],
            V::from_vec(vec![0.9, 0.2]),
        );
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn asymmetric_precision_is_rejected() {
        let err = GaussianPotential::new(
            V::zeros(2),
            M::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]),
        );
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }
}
