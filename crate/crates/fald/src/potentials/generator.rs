//! Synthetic heterogeneous Gaussian potential sets.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::scalar::Scalar;

use super::{
    ClientPotential, GaussianPotential, PotentialSet, QuadraticSumPotential, QuadraticTerm,
};

/// Parameters of the heterogeneous Gaussian set generator.
#[derive(Debug, Clone)]
pub struct GaussianSetParams {
    /// Number of clients `b`.
    pub clients: usize,
    /// Dimension `d`.
    pub dim: usize,
    /// Generator seed; the emitted set is a deterministic function of it.
    pub seed: u64,
    /// Client means are drawn uniformly from `[-mean_spread, mean_spread]^d`.
    pub mean_spread: f64,
    /// Upper bound on the condition number of each precision matrix.
    pub condition_number: f64,
    /// Terms per client: 1 emits plain Gaussian clients, more emits
    /// finite-sum quadratic clients suitable for minibatching.
    pub terms_per_client: usize,
}

impl Default for GaussianSetParams {
    fn default() -> Self {
        Self {
            clients: 10,
            dim: 5,
            seed: 0,
            mean_spread: 3.0,
            condition_number: 5.0,
            terms_per_client: 1,
        }
    }
}

fn random_mean(rng: &mut ChaCha12Rng, dim: usize, spread: f64) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| {
        if spread > 0.0 {
            rng.random_range(-spread..spread)
        } else {
            0.0
        }
    })
}

// Random SPD matrix with eigenvalues in [kappa^-1/2, kappa^1/2], built from a
// Haar-ish rotation (QR of a Gaussian matrix) and a log-uniform spectrum.
fn random_precision(rng: &mut ChaCha12Rng, dim: usize, kappa: f64) -> DMatrix<f64> {
    let raw = DMatrix::from_fn(dim, dim, |_, _| {
        let u: f64 = rng.random();
        let v: f64 = rng.random();
        // Box-Muller keeps the generator dependency-free here.
        (-2.0 * u.max(1e-300).ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    });
    let q = raw.qr().q();
    let spectrum = DVector::from_fn(dim, |_, _| {
        let u: f64 = rng.random();
        kappa.powf(u - 0.5)
    });
    let p = &q * DMatrix::from_diagonal(&spectrum) * q.transpose();
    // Exact symmetry despite rounding in the triple product.
    let mut sym = DMatrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..dim {
            sym[(i, j)] = 0.5 * (p[(i, j)] + p[(j, i)]);
        }
    }
    sym
}

fn convert_vec<S: Scalar>(v: &DVector<f64>) -> DVector<S> {
    DVector::from_fn(v.len(), |i, _| S::lit(v[i]))
}

fn convert_mat<S: Scalar>(m: &DMatrix<f64>) -> DMatrix<S> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| S::lit(m[(i, j)]))
}

/// Emits a heterogeneous Gaussian potential set with uniform prior weights.
///
/// Clients differ both in their means (spread) and in their precision
/// matrices (random rotations and spectra), so the generated set has strictly
/// positive heterogeneity for `mean_spread > 0`.
pub fn generate_gaussian_set<S: Scalar>(params: &GaussianSetParams) -> Result<PotentialSet<S>> {
    let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
    let mut clients = Vec::with_capacity(params.clients);
    for _ in 0..params.clients {
        let mean = random_mean(&mut rng, params.dim, params.mean_spread);
        if params.terms_per_client <= 1 {
            let precision = random_precision(&mut rng, params.dim, params.condition_number);
            clients.push(ClientPotential::Gaussian(GaussianPotential::new(
                convert_vec::<S>(&mean),
                convert_mat::<S>(&precision),
            )?));
        } else {
            let share = 1.0 / params.terms_per_client as f64;
            let terms = (0..params.terms_per_client)
                .map(|_| {
                    let term_mean = &mean + random_mean(&mut rng, params.dim, params.mean_spread);
                    let term_precision =
                        random_precision(&mut rng, params.dim, params.condition_number) * share;
                    QuadraticTerm::new(
                        convert_vec::<S>(&term_mean),
                        convert_mat::<S>(&term_precision),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            clients.push(ClientPotential::QuadraticSum(QuadraticSumPotential::new(
                terms,
            )?));
        }
    }
    PotentialSet::new(clients)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_in_the_seed() {
        let params = GaussianSetParams {
            clients: 3,
            dim: 4,
            seed: 42,
            ..GaussianSetParams::default()
        };
        let a: PotentialSet<f64> = generate_gaussian_set(&params).unwrap();
        let b: PotentialSet<f64> = generate_gaussian_set(&params).unwrap();
        let x = DVector::from_element(4, 0.3);
        assert_eq!(a.grad_sum(&x).unwrap(), b.grad_sum(&x).unwrap());
    }

    #[test]
    fn generated_precisions_respect_the_condition_bound() {
        let params = GaussianSetParams {
            clients: 4,
            dim: 6,
            seed: 7,
            condition_number: 3.0,
            ..GaussianSetParams::default()
        };
        let set: PotentialSet<f64> = generate_gaussian_set(&params).unwrap();
        for c in set.clients() {
            let (min, max) = match c {
                ClientPotential::Gaussian(g) => {
                    let eig = g.precision().clone().symmetric_eigen().eigenvalues;
                    (
                        eig.iter().cloned().fold(f64::INFINITY, f64::min),
                        eig.iter().cloned().fold(0.0, f64::max),
                    )
                }
                _ => unreachable!(),
            };
            assert!(min > 0.0);
            assert!(max / min <= 3.0 * (1.0 + 1e-9));
        }
    }

    #[test]
    fn quadratic_terms_mode_emits_finite_sums() {
        let params = GaussianSetParams {
            clients: 2,
            dim: 3,
            seed: 9,
            terms_per_client: 5,
            ..GaussianSetParams::default()
        };
        let set: PotentialSet<f64> = generate_gaussian_set(&params).unwrap();
        for c in set.clients() {
            assert_eq!(c.num_terms(), 5);
        }
        assert!(set.is_all_gaussian());
    }
}
