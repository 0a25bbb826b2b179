//! Deterministic simulated client/server loop: schedules communication,
//! executes local Langevin steps, performs averaging broadcasts, maintains
//! the control-variate state and records server samples plus cost counters.
//!
//! RNG discipline: every concern owns a dedicated stream — one for the
//! shared noise, one per client for local noise, one per client for
//! minibatch draws and one for the scheduling Bernoullis. Changing the noise
//! correlation, the communication probability or the gradient rule therefore
//! never perturbs the draws of another concern, and client updates are pure
//! functions of their own pre-assigned draws.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::potentials::PotentialSet;
use crate::samplers::{
    correlated_noise, fald_gradient, local_step, ula_step, update_control_variate,
    ControlVariateState, LocalGradientRule,
};
use crate::scalar::Scalar;

const DIVERGENCE_NORM: f64 = 1e8;

/// Base seeds of the four independent stream families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Seeds {
    /// Shared-noise stream.
    pub shared: u64,
    /// Base of the per-client local-noise streams.
    pub client: u64,
    /// Base of the per-client minibatch streams.
    pub batch: u64,
    /// Scheduling Bernoullis (communication and control-variate refresh).
    pub schedule: u64,
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            shared: derive_seed(base, 0),
            client: derive_seed(base, 1),
            batch: derive_seed(base, 2),
            schedule: derive_seed(base, 3),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream seed from a base seed and a stream index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index.wrapping_add(1)))
}

/// Communication schedule: a Bernoulli coin per iteration or a fixed period
/// (every `E`-th iteration communicates; `E = 1` matches `p_comm = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Bernoulli,
    FixedPeriod { period: usize },
}

/// Which server parameters enter the trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordMode {
    /// Record every post-burn-in iteration (then thin).
    EveryIteration,
    /// Record only iterations where a communication round fired.
    CommOnly,
}

/// Full configuration of one federated run.
#[derive(Debug, Clone)]
pub struct SamplerConfig<S: Scalar> {
    pub gamma: S,
    /// Communication probability `p_c` (used by the Bernoulli schedule).
    pub p_comm: f64,
    /// Control-variate refresh probability `q_c`.
    pub q_cv: f64,
    /// Noise correlation across clients.
    pub tau: f64,
    /// Per-client minibatch sizes `n_i`.
    pub batch_sizes: Vec<usize>,
    pub total_iters: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub schedule: Schedule,
    pub rule: LocalGradientRule,
    pub record: RecordMode,
    pub seeds: Seeds,
}

impl<S: Scalar> SamplerConfig<S> {
    /// Checks ranges and consistency with the potential set. Emits a warning
    /// (without failing) when `q_cv > p_comm`, the regime outside the
    /// variance-reduced guarantees.
    pub fn validate(&self, set: &PotentialSet<S>) -> Result<()> {
        if self.gamma <= S::zero() {
            return Err(Error::InvalidConfig("gamma must be positive".into()));
        }
        if !(self.p_comm > 0.0 && self.p_comm <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "p_comm must lie in (0, 1], got {}",
                self.p_comm
            )));
        }
        if !(self.q_cv > 0.0 && self.q_cv <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "q_cv must lie in (0, 1], got {}",
                self.q_cv
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau must lie in [0, 1], got {}",
                self.tau
            )));
        }
        if self.total_iters == 0 {
            return Err(Error::InvalidConfig("total_iters must be positive".into()));
        }
        if self.burn_in >= self.total_iters {
            return Err(Error::InvalidConfig(format!(
                "burn_in {} must be smaller than total_iters {}",
                self.burn_in, self.total_iters
            )));
        }
        if self.thinning == 0 {
            return Err(Error::InvalidConfig("thinning must be positive".into()));
        }
        if let Schedule::FixedPeriod { period } = self.schedule {
            if period == 0 {
                return Err(Error::InvalidConfig("schedule period must be positive".into()));
            }
        }
        if self.rule.uses_minibatch() {
            if self.batch_sizes.len() != set.num_clients() {
                return Err(Error::InvalidConfig(format!(
                    "batch_sizes has {} entries for {} clients",
                    self.batch_sizes.len(),
                    set.num_clients()
                )));
            }
            for (i, (&n, c)) in self.batch_sizes.iter().zip(set.clients()).enumerate() {
                if n == 0 || n > c.num_terms() {
                    return Err(Error::InvalidConfig(format!(
                        "batch size {n} out of range for client {i} (N = {})",
                        c.num_terms()
                    )));
                }
            }
        }
        if self.rule.is_variance_reduced() && self.q_cv > self.p_comm {
            log::warn!(
                "q_cv = {} exceeds p_comm = {}; the variance-reduced guarantees assume q_cv <= p_comm",
                self.q_cv,
                self.p_comm
            );
        }
        Ok(())
    }
}

struct StreamSet {
    shared: ChaCha12Rng,
    schedule: ChaCha12Rng,
    noise: Vec<ChaCha12Rng>,
    batch: Vec<ChaCha12Rng>,
}

impl StreamSet {
    fn new(seeds: Seeds, num_clients: usize) -> Self {
        Self {
            shared: ChaCha12Rng::seed_from_u64(seeds.shared),
            schedule: ChaCha12Rng::seed_from_u64(seeds.schedule),
            noise: (0..num_clients)
                .map(|i| ChaCha12Rng::seed_from_u64(derive_seed(seeds.client, i as u64)))
                .collect(),
            batch: (0..num_clients)
                .map(|i| ChaCha12Rng::seed_from_u64(derive_seed(seeds.batch, i as u64)))
                .collect(),
        }
    }
}

fn standard_vector<S: Scalar>(rng: &mut ChaCha12Rng, dim: usize) -> DVector<S> {
    DVector::from_fn(dim, |_, _| S::standard_normal(rng))
}

/// What happened in one iteration.
#[derive(Debug, Clone, Copy)]
pub struct RoundOutcome {
    pub comm_fired: bool,
    pub cv_fired: bool,
    pub grad_evals: u64,
}

/// Mutable state of the federation: per-client parameters, the (virtual)
/// server parameter, the control-variate state of the variance-reduced
/// rules and the owned RNG streams.
pub struct FederationState<S: Scalar> {
    client_params: Vec<DVector<S>>,
    server_param: DVector<S>,
    cv: Option<ControlVariateState<S>>,
    iter: usize,
    streams: StreamSet,
}

impl<S: Scalar> FederationState<S> {
    /// Initializes every client at `init`; the variance-reduced rules start
    /// with reference `Y_0 = init` and shift `C_0 = (1/b) sum grad U^i(Y_0)`.
    pub fn new(
        cfg: &SamplerConfig<S>,
        set: &PotentialSet<S>,
        init: &DVector<S>,
    ) -> Result<Self> {
        cfg.validate(set)?;
        if init.len() != set.dim() {
            return Err(Error::DimensionMismatch {
                expected: set.dim(),
                got: init.len(),
            });
        }
        let client_params = vec![init.clone(); set.num_clients()];
        let cv = if cfg.rule.is_variance_reduced() {
            Some(ControlVariateState::init(set, &client_params)?)
        } else {
            None
        };
        Ok(Self {
            client_params,
            server_param: init.clone(),
            cv,
            iter: 0,
            streams: StreamSet::new(cfg.seeds, set.num_clients()),
        })
    }

    pub fn client_params(&self) -> &[DVector<S>] {
        &self.client_params
    }

    pub fn server_param(&self) -> &DVector<S> {
        &self.server_param
    }

    pub fn control_variate(&self) -> Option<&ControlVariateState<S>> {
        self.cv.as_ref()
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    fn comm_fires(&mut self, cfg: &SamplerConfig<S>) -> bool {
        match cfg.schedule {
            Schedule::Bernoulli => self.streams.schedule.random_bool(cfg.p_comm),
            Schedule::FixedPeriod { period } => (self.iter + 1) % period == 0,
        }
    }

    /// Advances the federation by one iteration.
    ///
    /// Order within the round: the scheduling coins are drawn first, then
    /// each client performs its local step consuming the current
    /// `(Y_k, C_k)`, then the averaging broadcast is applied, and finally
    /// the control-variate refresh producing `(Y_{k+1}, C_{k+1})` is applied
    /// from the pre-step client parameters.
    pub fn round(&mut self, cfg: &SamplerConfig<S>, set: &PotentialSet<S>) -> Result<RoundOutcome> {
        let b = set.num_clients();
        let dim = set.dim();
        let comm_fired = self.comm_fires(cfg);
        let cv_fired = if cfg.rule.is_variance_reduced() {
            self.streams.schedule.random_bool(cfg.q_cv)
        } else {
            false
        };

        // The refresh consumes the pre-step parameters, so compute it before
        // stepping; it is applied only after the local steps, which must see
        // the current (Y_k, C_k).
        let pending_cv = match (&self.cv, cv_fired) {
            (Some(cv), true) => Some(update_control_variate(cv, &self.client_params, set, true)?),
            _ => None,
        };

        // Per-client noise sqrt(tau/b) Z_shared + sqrt(1-tau) Z_local: the
        // client average then carries variance 2 gamma / b per step for
        // every tau, matching the rescaled diffusion the chain discretizes.
        let shared_z =
            standard_vector::<S>(&mut self.streams.shared, dim) * (S::one() / S::lit(b as f64)).sqrt();
        let tau = S::lit(cfg.tau);
        let mut grad_evals = 0u64;
        for i in 0..b {
            let client = set.client(i);
            let batch: Option<Vec<usize>> = if cfg.rule.uses_minibatch() {
                let n = cfg.batch_sizes[i];
                let drawn =
                    rand::seq::index::sample(&mut self.streams.batch[i], client.num_terms(), n);
                Some(drawn.into_vec())
            } else {
                None
            };
            let g = match cfg.rule {
                LocalGradientRule::Fald | LocalGradientRule::FaldExact => {
                    fald_gradient(client, &self.client_params[i], batch.as_deref())?
                }
                LocalGradientRule::VrFald | LocalGradientRule::VrFaldExact => {
                    crate::samplers::vrfald_gradient(
                        client,
                        &self.client_params[i],
                        self.cv.as_ref().expect("vr rule carries cv state"),
                        batch.as_deref(),
                    )?
                }
            };
            let evals = match cfg.rule {
                LocalGradientRule::Fald => cfg.batch_sizes[i] as u64,
                LocalGradientRule::FaldExact => client.num_terms() as u64,
                LocalGradientRule::VrFald => 2 * cfg.batch_sizes[i] as u64,
                LocalGradientRule::VrFaldExact => 2 * client.num_terms() as u64,
            };
            grad_evals += evals;

            let local_z = standard_vector::<S>(&mut self.streams.noise[i], dim);
            let z = correlated_noise(&shared_z, &local_z, tau)?;
            self.client_params[i] = local_step(&self.client_params[i], &g, cfg.gamma, &z)?;
        }

        if comm_fired {
            let avg = mean_vector(&self.client_params);
            for p in self.client_params.iter_mut() {
                *p = avg.clone();
            }
            self.server_param = avg;
        } else {
            self.server_param = mean_vector(&self.client_params);
        }

        if let Some(cv) = pending_cv {
            self.cv = Some(cv);
            grad_evals += set
                .clients()
                .iter()
                .map(|c| c.num_terms() as u64)
                .sum::<u64>();
        }

        self.iter += 1;
        Ok(RoundOutcome {
            comm_fired,
            cv_fired,
            grad_evals,
        })
    }
}

fn mean_vector<S: Scalar>(vectors: &[DVector<S>]) -> DVector<S> {
    let mut acc = DVector::zeros(vectors[0].len());
    for v in vectors {
        acc += v;
    }
    acc / S::lit(vectors.len() as f64)
}

/// Recorded server samples plus communication and gradient-evaluation
/// counters.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace<S: Scalar> {
    samples: Vec<DVector<S>>,
    sample_iters: Vec<usize>,
    pub n_comm_rounds: u64,
    pub n_cv_rounds: u64,
    pub n_grad_evals: u64,
    pub wall_iters: usize,
}

impl<S: Scalar> SampleTrace<S> {
    pub fn samples(&self) -> &[DVector<S>] {
        &self.samples
    }

    pub fn sample_iters(&self) -> &[usize] {
        &self.sample_iters
    }

    /// Total component-gradient evaluations of the run.
    pub fn grad_eval_count(&self) -> u64 {
        self.n_grad_evals
    }

    /// Writes the trace as CSV: one row per retained sample, columns are the
    /// iteration index followed by the `d` coordinates.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let dim = self.samples.first().map_or(0, |s| s.len());
        let mut header = String::from("iter");
        for c in 0..dim {
            header.push_str(&format!(",x{c}"));
        }
        writeln!(w, "{header}")?;
        for (iter, sample) in self.sample_iters.iter().zip(&self.samples) {
            let mut line = iter.to_string();
            for value in sample.iter() {
                line.push(',');
                line.push_str(&format!("{}", value.to_f64_lossy()));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// JSON summary: counters plus moment estimates of the retained samples.
    pub fn summary_json(&self) -> serde_json::Value {
        let moments = crate::metrics::moments(&self.samples).ok();
        serde_json::json!({
            "wall_iters": self.wall_iters,
            "n_samples": self.samples.len(),
            "n_comm_rounds": self.n_comm_rounds,
            "n_cv_rounds": self.n_cv_rounds,
            "n_grad_evals": self.n_grad_evals,
            "mean": moments.as_ref().map(|m| m.mean.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()),
            "covariance_trace": moments.as_ref().map(|m| m.covariance.trace().to_f64_lossy()),
        })
    }
}

/// Reads a trace CSV written by [`SampleTrace::write_csv`].
pub fn read_trace_csv<S: Scalar, R: std::io::BufRead>(
    reader: R,
) -> Result<(Vec<usize>, Vec<DVector<S>>)> {
    let mut iters = Vec::new();
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if lineno == 0 {
            if !line.starts_with("iter") {
                return Err(Error::Io(format!(
                    "line 1: expected header starting with 'iter', got '{line}'"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let iter = fields
            .next()
            .ok_or_else(|| Error::Io(format!("line {}: empty row", lineno + 1)))?
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Io(format!("line {}: bad iteration index: {e}", lineno + 1)))?;
        let coords = fields
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map(S::lit)
                    .map_err(|e| Error::Io(format!("line {}: bad coordinate: {e}", lineno + 1)))
            })
            .collect::<Result<Vec<S>>>()?;
        if coords.is_empty() {
            return Err(Error::Io(format!("line {}: no coordinates", lineno + 1)));
        }
        iters.push(iter);
        samples.push(DVector::from_vec(coords));
    }
    Ok((iters, samples))
}

struct Recorder<S: Scalar> {
    trace: SampleTrace<S>,
    eligible: usize,
    burn_in: usize,
    thinning: usize,
    record: RecordMode,
}

impl<S: Scalar> Recorder<S> {
    fn new(burn_in: usize, thinning: usize, record: RecordMode) -> Self {
        Self {
            trace: SampleTrace {
                samples: Vec::new(),
                sample_iters: Vec::new(),
                n_comm_rounds: 0,
                n_cv_rounds: 0,
                n_grad_evals: 0,
                wall_iters: 0,
            },
            eligible: 0,
            burn_in,
            thinning,
            record,
        }
    }

    fn observe(&mut self, iter: usize, comm_fired: bool, param: &DVector<S>) {
        let eligible = iter > self.burn_in
            && match self.record {
                RecordMode::EveryIteration => true,
                RecordMode::CommOnly => comm_fired,
            };
        if !eligible {
            return;
        }
        self.eligible += 1;
        if self.eligible % self.thinning == 0 {
            self.trace.samples.push(param.clone());
            self.trace.sample_iters.push(iter);
        }
    }
}

fn check_divergence<S: Scalar>(
    iter: usize,
    server: &DVector<S>,
    clients: &[DVector<S>],
) -> Result<()> {
    for v in clients.iter().chain(std::iter::once(server)) {
        for &x in v.iter() {
            if !x.finite() {
                return Err(Error::Divergence {
                    iteration: iter,
                    message: "non-finite parameter".into(),
                });
            }
        }
    }
    if server.norm().to_f64_lossy() > DIVERGENCE_NORM {
        return Err(Error::Divergence {
            iteration: iter,
            message: format!("server parameter norm exceeds {DIVERGENCE_NORM:e}"),
        });
    }
    Ok(())
}

/// Runs the federated chain for `cfg.total_iters` iterations with all
/// clients initialized at `init`. Fully deterministic given the seeds.
pub fn run<S: Scalar>(
    cfg: &SamplerConfig<S>,
    set: &PotentialSet<S>,
    init: &DVector<S>,
) -> Result<SampleTrace<S>> {
    let mut state = FederationState::new(cfg, set, init)?;
    let mut recorder = Recorder::new(cfg.burn_in, cfg.thinning, cfg.record);
    for _ in 0..cfg.total_iters {
        let outcome = state.round(cfg, set)?;
        if outcome.comm_fired {
            recorder.trace.n_comm_rounds += 1;
        }
        if outcome.cv_fired {
            recorder.trace.n_cv_rounds += 1;
        }
        recorder.trace.n_grad_evals += outcome.grad_evals;
        check_divergence(state.iter, &state.server_param, &state.client_params)?;
        recorder.observe(state.iter, outcome.comm_fired, &state.server_param);
    }
    recorder.trace.wall_iters = cfg.total_iters;
    Ok(recorder.trace)
}

/// Configuration of the centralized Langevin baseline chain.
#[derive(Debug, Clone)]
pub struct BaselineConfig<S: Scalar> {
    pub gamma: S,
    pub total_iters: usize,
    pub burn_in: usize,
    pub thinning: usize,
    /// `None` runs the exact-gradient chain; `Some(batch_sizes)` replaces
    /// each client gradient with its minibatch estimator.
    pub batch_sizes: Option<Vec<usize>>,
    pub seeds: Seeds,
}

/// Runs the centralized baseline chain on the averaged potential. The noise
/// stream matches the federated shared stream, so a `b = 1` federation with
/// `p_comm = 1`, `tau = 1` and exact gradients reproduces this chain
/// bitwise.
pub fn run_baseline<S: Scalar>(
    cfg: &BaselineConfig<S>,
    set: &PotentialSet<S>,
    init: &DVector<S>,
) -> Result<SampleTrace<S>> {
    if cfg.gamma <= S::zero() {
        return Err(Error::InvalidConfig("gamma must be positive".into()));
    }
    if cfg.total_iters == 0 || cfg.burn_in >= cfg.total_iters || cfg.thinning == 0 {
        return Err(Error::InvalidConfig(
            "iteration counts must satisfy 0 <= burn_in < total_iters, thinning >= 1".into(),
        ));
    }
    if init.len() != set.dim() {
        return Err(Error::DimensionMismatch {
            expected: set.dim(),
            got: init.len(),
        });
    }
    if let Some(sizes) = &cfg.batch_sizes {
        if sizes.len() != set.num_clients() {
            return Err(Error::InvalidConfig(format!(
                "batch_sizes has {} entries for {} clients",
                sizes.len(),
                set.num_clients()
            )));
        }
    }
    let b = set.num_clients();
    let mut streams = StreamSet::new(cfg.seeds, b);
    let mut x = init.clone();
    let mut recorder = Recorder::new(cfg.burn_in, cfg.thinning, RecordMode::EveryIteration);
    let per_iter_evals: u64 = match &cfg.batch_sizes {
        Some(sizes) => sizes.iter().map(|&n| n as u64).sum(),
        None => set.clients().iter().map(|c| c.num_terms() as u64).sum(),
    };
    for k in 0..cfg.total_iters {
        let z = standard_vector::<S>(&mut streams.shared, set.dim());
        x = match &cfg.batch_sizes {
            None => ula_step(set, &x, cfg.gamma, &z)?,
            Some(sizes) => {
                let mut g = DVector::zeros(set.dim());
                for (i, client) in set.clients().iter().enumerate() {
                    let drawn = rand::seq::index::sample(
                        &mut streams.batch[i],
                        client.num_terms(),
                        sizes[i],
                    );
                    g += client.stochastic_grad(&x, &drawn.into_vec(), S::one())?;
                }
                g /= S::lit(b as f64);
                let coeff = (S::lit(2.0) * cfg.gamma / S::lit(b as f64)).sqrt();
                DVector::from_fn(x.len(), |i, _| x[i] - cfg.gamma * g[i] + coeff * z[i])
            }
        };
        recorder.trace.n_grad_evals += per_iter_evals;
        check_divergence(k + 1, &x, &[])?;
        recorder.observe(k + 1, false, &x);
    }
    recorder.trace.wall_iters = cfg.total_iters;
    Ok(recorder.trace)
}
