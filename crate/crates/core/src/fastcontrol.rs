//! Distributed dual iteration with FastControl coordination.
//!
//! Every node runs a [`NodeAgent`] that only ever sees its own arrival rate,
//! its own proxy load, the reception rate of its own FastControl category and
//! the `i`-th row and column of the correlation matrix. Node `i` forces users
//! to generate category-`j` control packets at rate
//! `r_ij = gamma·mu_i·C[j][i] / C[i][j]`; anycast routing delivers a fraction
//! `C[i][j]` of them to proxy `j`, so proxy `j` receives its category at rate
//! `gamma·Σ_i mu_i·C[j][i] = gamma·beta_j` and can read off its coupling factor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Poisson};
use thiserror::Error;

use crate::cost::{solve_sub_s, solve_sub_x, OffloadCostParams};
use crate::dual::{price_update, ConvergenceReport, DualError, DualOptions, DualState, PrimalResponse, ReportBuilder};
use crate::model::{load_map_into, CorrelationMatrix, SystemInstance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FastControlError {
    #[error("node {i} cannot deliver category {j}: C[{i}][{j}] = 0 but C[{j}][{i}] > 0")]
    UnreachableCategory { i: usize, j: usize },
    #[error("gamma must be positive, got {0}")]
    BadGamma(f64),
    #[error("sampling scale must be positive, got {0}")]
    BadScale(f64),
    #[error("row/column length mismatch")]
    DimensionMismatch,
    #[error(transparent)]
    Dual(#[from] DualError),
}

/// Generation rates `r[i][·]` forced by node `i` with price `mu_i`.
///
/// Categories that node `i` can neither reach nor needs to reach
/// (`C[i][j] = C[j][i] = 0`) get rate zero.
pub fn generation_rates(
    node: usize,
    mu_i: f64,
    row_i: &[f64],
    col_i: &[f64],
    gamma: f64,
) -> Result<Vec<f64>, FastControlError> {
    if !(gamma > 0.0) {
        return Err(FastControlError::BadGamma(gamma));
    }
    if row_i.len() != col_i.len() {
        return Err(FastControlError::DimensionMismatch);
    }
    row_i
        .iter()
        .zip(col_i)
        .enumerate()
        .map(|(j, (&c_ij, &c_ji))| {
            if c_ij > 0.0 {
                Ok(gamma * mu_i * c_ji / c_ij)
            } else if c_ji == 0.0 {
                Ok(0.0)
            } else {
                Err(FastControlError::UnreachableCategory { i: node, j })
            }
        })
        .collect()
}

/// Rejects matrices where some node would have to deliver a category it can
/// never reach.
pub fn validate_reachability(c: &CorrelationMatrix) -> Result<(), FastControlError> {
    for i in 0..c.n() {
        for j in 0..c.n() {
            if c.get(i, j) == 0.0 && c.get(j, i) > 0.0 {
                return Err(FastControlError::UnreachableCategory { i, j });
            }
        }
    }
    Ok(())
}

/// `beta_i = R_i / gamma`.
pub fn recover_beta(reception_rate: f64, gamma: f64) -> f64 {
    reception_rate / gamma
}

/// Control traffic emitted by one node in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Emission {
    /// `gamma·mu_i`, the node's emission intensity.
    pub intensity: f64,
    /// Generation rate per category, `r[i][j]`.
    pub rates: Vec<f64>,
}

/// Generation rates of every node for one round, `r[i][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FastControlRates {
    pub emissions: Vec<Emission>,
}

impl FastControlRates {
    pub fn total(&self) -> f64 {
        self.emissions.iter().flat_map(|e| e.rates.iter()).sum()
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.emissions[i].rates[j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelMode {
    /// Fluid model: every stream delivers exactly `r[i][j]·C[i][j]`.
    ExactRate,
    /// Packet counts: `Poisson(r·scale)` packets are generated, each lands at
    /// its category's proxy with probability `C[i][j]`; rates are recovered as
    /// counts divided by `scale`.
    SampledPackets { scale: f64, seed: u64 },
}

/// Carries category-tagged control traffic over anycast.
#[derive(Debug, Clone)]
pub struct AnycastChannel {
    mode: ChannelMode,
    rng: Option<ChaCha8Rng>,
}

impl AnycastChannel {
    pub fn new(mode: ChannelMode) -> Result<Self, FastControlError> {
        let rng = match mode {
            ChannelMode::ExactRate => None,
            ChannelMode::SampledPackets { scale, seed } => {
                if !(scale > 0.0 && scale.is_finite()) {
                    return Err(FastControlError::BadScale(scale));
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
        };
        Ok(Self { mode, rng })
    }

    pub fn mode(&self) -> ChannelMode {
        self.mode
    }

    /// Reception rate of category `j` at proxy `j`, for every `j`.
    pub fn deliver(&mut self, rates: &FastControlRates, c: &CorrelationMatrix) -> Vec<f64> {
        let n = c.n();
        match self.mode {
            ChannelMode::ExactRate => (0..n)
                .map(|j| {
                    // r[i][j]·C[i][j] = gamma·mu_i·C[j][i]; the fluid channel
                    // evaluates the product in its cancelled form
                    (0..n).fold(0.0, |acc, i| acc + rates.emissions[i].intensity * c.get(j, i))
                })
                .collect(),
            ChannelMode::SampledPackets { scale, .. } => {
                let rng = self.rng.as_mut().expect("sampled channel owns an rng");
                let mut received = vec![0u64; n];
                for (i, emission) in rates.emissions.iter().enumerate() {
                    for (j, &r) in emission.rates.iter().enumerate() {
                        let route = c.get(i, j);
                        if r <= 0.0 || route <= 0.0 {
                            continue;
                        }
                        let generated = sample_poisson(rng, r * scale);
                        if generated > 0 {
                            let landed = Binomial::new(generated, route).expect("valid probability").sample(rng);
                            received[j] += landed;
                        }
                    }
                }
                received.into_iter().map(|count| count as f64 / scale).collect()
            }
        }
    }
}

fn sample_poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    match Poisson::new(lambda) {
        Ok(p) => p.sample(rng) as u64,
        // beyond the sampler's range the relative noise is negligible
        Err(_) => lambda.round() as u64,
    }
}

/// Everything node `i` is allowed to know about the system.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalKnowledge {
    pub node: usize,
    pub capacity: f64,
    pub eta: f64,
    pub offload: OffloadCostParams,
    /// `C[i][·]`.
    pub row: Vec<f64>,
    /// `C[·][i]`.
    pub column: Vec<f64>,
}

impl LocalKnowledge {
    pub fn from_instance(instance: &SystemInstance, node: usize) -> Self {
        Self {
            node,
            capacity: instance.capacities[node],
            eta: instance.costs.eta[node],
            offload: instance.costs.offload(node),
            row: instance.correlation.row(node).to_vec(),
            column: instance.correlation.column(node),
        }
    }
}

/// Observables available to a node before it answers DNS queries in a round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlObservation {
    pub arrival_rate: f64,
    pub reception_rate: f64,
}

/// Full per-round local observation: `A_i`, `S_obs_i` and `R_i`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalObservation {
    pub arrival_rate: f64,
    pub observed_load: f64,
    pub reception_rate: f64,
}

/// A node running the distributed dual algorithm.
#[derive(Debug, Clone)]
pub struct NodeAgent {
    knowledge: LocalKnowledge,
    gamma: f64,
    alpha: f64,
    mu: f64,
    beta: f64,
    x: f64,
    s: f64,
    last: Option<LocalObservation>,
}

impl NodeAgent {
    pub fn new(knowledge: LocalKnowledge, gamma: f64, alpha: f64) -> Result<Self, FastControlError> {
        if !(gamma > 0.0) {
            return Err(FastControlError::BadGamma(gamma));
        }
        Ok(Self { knowledge, gamma, alpha, mu: 0.0, beta: 0.0, x: 1.0, s: 0.0, last: None })
    }

    pub fn node(&self) -> usize {
        self.knowledge.node
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    pub fn last_observation(&self) -> Option<LocalObservation> {
        self.last
    }

    /// FastControl traffic forced through this round's DNS responses.
    pub fn emit(&self) -> Result<Emission, FastControlError> {
        let k = &self.knowledge;
        Ok(Emission {
            intensity: self.gamma * self.mu,
            rates: generation_rates(k.node, self.mu, &k.row, &k.column, self.gamma)?,
        })
    }

    /// Recovers `beta_i` from the category reception rate and solves both
    /// local subproblems; returns the redirection probability to announce.
    pub fn respond(&mut self, obs: ControlObservation) -> f64 {
        let k = &self.knowledge;
        self.beta = recover_beta(obs.reception_rate, self.gamma);
        self.x = solve_sub_x(k.offload, obs.arrival_rate, self.beta);
        self.s = solve_sub_s(k.eta, k.capacity, self.mu);
        self.x
    }

    /// Projected price update from the observed proxy load.
    pub fn observe(&mut self, obs: LocalObservation) {
        self.mu = price_update(self.mu, self.alpha, obs.observed_load, self.s);
        self.last = Some(obs);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributedOptions {
    pub dual: DualOptions,
    pub gamma: f64,
    pub mode: ChannelMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FastControlReport {
    pub dual: ConvergenceReport,
    /// Reception rates `R` per round (empty unless recording).
    pub reception: Vec<Vec<f64>>,
    /// `Σ_ij r[i][j]` per round (empty unless recording).
    pub overhead: Vec<f64>,
    /// `Σ_k Σ_ij r[i][j]`.
    pub total_overhead: f64,
}

/// Synchronous-round simulation of the distributed algorithm. Each round the
/// control plane delivers FastControl packets, agents answer DNS, the data
/// plane settles to the resulting proxy loads and agents update prices.
pub fn run_distributed(instance: &SystemInstance, options: &DistributedOptions) -> Result<FastControlReport, FastControlError> {
    validate_reachability(&instance.correlation)?;
    let n = instance.n();
    let alpha = options.dual.policy.alpha(instance)?;
    let mut agents = (0..n)
        .map(|i| NodeAgent::new(LocalKnowledge::from_instance(instance, i), options.gamma, alpha))
        .collect::<Result<Vec<_>, _>>()?;
    let mut channel = AnycastChannel::new(options.mode)?;
    let mut builder = ReportBuilder::new(instance, alpha, options.dual.stop_tol, options.dual.record);
    let mut reception_log = Vec::new();
    let mut overhead_log = Vec::new();
    let mut total_overhead = 0.0;
    let mut s_obs = vec![0.0; n];
    let mut k = 0;
    let mut converged = false;
    let mut last = DualState::cold(n);

    while k < options.dual.max_iters {
        let rates = FastControlRates { emissions: agents.iter().map(NodeAgent::emit).collect::<Result<_, _>>()? };
        let round_overhead = rates.total();
        total_overhead += round_overhead;
        let reception = channel.deliver(&rates, &instance.correlation);

        let mu: Vec<f64> = agents.iter().map(NodeAgent::mu).collect();
        let x: Vec<f64> = agents
            .iter_mut()
            .zip(&reception)
            .enumerate()
            .map(|(i, (agent, &r))| {
                agent.respond(ControlObservation { arrival_rate: instance.arrivals[i], reception_rate: r })
            })
            .collect();
        load_map_into(&instance.correlation, &instance.arrivals, &x, &mut s_obs);
        for (i, agent) in agents.iter_mut().enumerate() {
            agent.observe(LocalObservation {
                arrival_rate: instance.arrivals[i],
                observed_load: s_obs[i],
                reception_rate: reception[i],
            });
        }

        let response = PrimalResponse {
            beta: agents.iter().map(NodeAgent::beta).collect(),
            x,
            s: agents.iter().map(NodeAgent::s).collect(),
        };
        let mu_next: Vec<f64> = agents.iter().map(NodeAgent::mu).collect();
        let stop = builder.push(k, &mu, &response, &s_obs, &mu_next);
        if options.dual.record {
            reception_log.push(reception);
            overhead_log.push(round_overhead);
        }
        k += 1;
        last = DualState { mu: mu_next, k, x: response.x, s: response.s, s_obs: s_obs.clone() };
        if stop {
            converged = true;
            break;
        }
    }
    Ok(FastControlReport {
        dual: builder.finish(last, converged),
        reception: reception_log,
        overhead: overhead_log,
        total_overhead,
    })
}
