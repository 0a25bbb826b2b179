//! Per-iteration update rules: correlated noise generation, the plain local
//! Langevin step, the variance-reduced gradient with its reference-point and
//! shift state, and the centralized Langevin baseline step.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::potentials::{ClientPotential, PotentialSet};
use crate::scalar::Scalar;

/// Shape of the correlated per-step noise: correlation `tau` across
/// `num_clients` clients in dimension `dim`.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub tau: f64,
    pub dim: usize,
    pub num_clients: usize,
}

impl NoiseSpec {
    pub fn new(tau: f64, dim: usize, num_clients: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidInput(format!(
                "noise correlation tau must lie in [0, 1], got {tau}"
            )));
        }
        Ok(Self {
            tau,
            dim,
            num_clients,
        })
    }
}

/// Mixes a shared and a client-local standard-normal draw into the client's
/// step noise `sqrt(tau) * shared + sqrt(1 - tau) * local`.
///
/// The result is marginally standard normal with inter-client covariance
/// `tau * I`.
pub fn correlated_noise<S: Scalar>(
    shared_draw: &DVector<S>,
    local_draw: &DVector<S>,
    tau: S,
) -> Result<DVector<S>> {
    if tau < S::zero() || tau > S::one() {
        return Err(Error::InvalidInput(format!(
            "noise correlation tau must lie in [0, 1], got {}",
            tau.to_f64_lossy()
        )));
    }
    if shared_draw.len() != local_draw.len() {
        return Err(Error::DimensionMismatch {
            expected: shared_draw.len(),
            got: local_draw.len(),
        });
    }
    Ok(shared_draw * tau.sqrt() + local_draw * (S::one() - tau).sqrt())
}

/// One local Langevin step `x - gamma * g + sqrt(2 gamma) * z`.
pub fn local_step<S: Scalar>(
    x: &DVector<S>,
    g: &DVector<S>,
    gamma: S,
    z: &DVector<S>,
) -> Result<DVector<S>> {
    if gamma <= S::zero() {
        return Err(Error::InvalidConfig(format!(
            "step size gamma must be positive, got {}",
            gamma.to_f64_lossy()
        )));
    }
    Ok(drift_step(x, g, gamma, (S::lit(2.0) * gamma).sqrt(), z))
}

// Shared arithmetic of every Euler step in the crate. Keeping the expression
// in one place makes the b = 1 federated chain and the centralized chain
// bitwise comparable.
#[inline]
fn drift_step<S: Scalar>(
    x: &DVector<S>,
    g: &DVector<S>,
    gamma: S,
    noise_coeff: S,
    z: &DVector<S>,
) -> DVector<S> {
    DVector::from_fn(x.len(), |i, _| x[i] - gamma * g[i] + noise_coeff * z[i])
}

/// Local gradient rule used by the federation loop.
///
/// The plain variants estimate `grad U^i` directly; the variance-reduced
/// variants recenter the estimate by a shared reference point and shift.
/// The `*Exact` variants replace the minibatch estimator with the full
/// gradient, which makes their per-step gradient deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalGradientRule {
    Fald,
    FaldExact,
    VrFald,
    VrFaldExact,
}

impl LocalGradientRule {
    /// True for the variance-reduced variants.
    pub fn is_variance_reduced(self) -> bool {
        matches!(self, Self::VrFald | Self::VrFaldExact)
    }

    /// True when the rule consumes minibatch draws.
    pub fn uses_minibatch(self) -> bool {
        matches!(self, Self::Fald | Self::VrFald)
    }
}

/// Reference point `Y` and shift `C` of the variance-reduced rule.
///
/// At initialization the reference is the average of the client parameters
/// and the shift is the averaged full gradient at that reference.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlVariateState<S: Scalar> {
    pub reference: DVector<S>,
    pub shift: DVector<S>,
}

impl<S: Scalar> ControlVariateState<S> {
    /// Initializes `(Y_0, C_0)` from the client parameters.
    pub fn init(set: &PotentialSet<S>, client_params: &[DVector<S>]) -> Result<Self> {
        let reference = average(client_params)?;
        let shift = set.grad_mean(&reference)?;
        Ok(Self { reference, shift })
    }
}

fn average<S: Scalar>(vectors: &[DVector<S>]) -> Result<DVector<S>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot average zero vectors".into()))?;
    let mut acc = DVector::zeros(first.len());
    for v in vectors {
        acc += v;
    }
    Ok(acc / S::lit(vectors.len() as f64))
}

/// Plain local gradient: the minibatch estimator when `batch` is given, the
/// exact gradient otherwise.
pub fn fald_gradient<S: Scalar>(
    client: &ClientPotential<S>,
    x_local: &DVector<S>,
    batch: Option<&[usize]>,
) -> Result<DVector<S>> {
    match batch {
        Some(batch) => client.stochastic_grad(x_local, batch, S::one()),
        None => client.grad(x_local),
    }
}

/// Variance-reduced local gradient
/// `est(x) - est(Y) + C`, with the same minibatch in both evaluations.
///
/// Sharing the batch is what makes the estimator collapse term by term at
/// `x = Y`, and makes the exact variant deterministic given `(x, cv)`.
pub fn vrfald_gradient<S: Scalar>(
    client: &ClientPotential<S>,
    x_local: &DVector<S>,
    cv: &ControlVariateState<S>,
    batch: Option<&[usize]>,
) -> Result<DVector<S>> {
    let (at_x, at_ref) = match batch {
        Some(batch) => (
            client.stochastic_grad(x_local, batch, S::one())?,
            client.stochastic_grad(&cv.reference, batch, S::one())?,
        ),
        None => (client.grad(x_local)?, client.grad(&cv.reference)?),
    };
    Ok(at_x - at_ref + &cv.shift)
}

/// Applies the reference-point/shift update: when `triggered`, the new
/// reference is the client average and the new shift is the averaged full
/// gradient there; otherwise the state is returned unchanged.
pub fn update_control_variate<S: Scalar>(
    cv: &ControlVariateState<S>,
    client_params: &[DVector<S>],
    set: &PotentialSet<S>,
    triggered: bool,
) -> Result<ControlVariateState<S>> {
    if !triggered {
        return Ok(cv.clone());
    }
    ControlVariateState::init(set, client_params)
}

/// One step of the centralized Langevin baseline on the averaged potential:
/// `x - (gamma/b) sum_i grad U^i(x) + sqrt(2 gamma / b) z`.
pub fn ula_step<S: Scalar>(
    set: &PotentialSet<S>,
    x: &DVector<S>,
    gamma: S,
    z: &DVector<S>,
) -> Result<DVector<S>> {
    if gamma <= S::zero() {
        return Err(Error::InvalidConfig(format!(
            "step size gamma must be positive, got {}",
            gamma.to_f64_lossy()
        )));
    }
    let b = S::lit(set.num_clients() as f64);
    let g = set.grad_mean(x)?;
    Ok(drift_step(x, &g, gamma, (S::lit(2.0) * gamma / b).sqrt(), z))
}
