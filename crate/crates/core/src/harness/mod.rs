//! Randomized instance generation, parameter sweeps and CSV summaries.

mod generators;

pub use generators::CorrelationGenerator;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{total_cost, CostParams};
use crate::dual::{run_dual_with, DualError, DualOptions, StepSizePolicy};
use crate::dynamics::{integrate, DynamicsError, OdeConfig, OVERLOAD_S_TOL, OVERLOAD_X_TOL};
use crate::fastcontrol::{run_distributed, ChannelMode, DistributedOptions, FastControlError};
use crate::model::{ArrivalRates, CapacityVector, CorrelationMatrix, ModelError, SystemInstance};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("generator failure: {0}")]
    GeneratorFailure(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("no results to summarize")]
    EmptyInput,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dual(#[from] DualError),
    #[error(transparent)]
    FastControl(#[from] FastControlError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dual,
    Fastcontrol,
    Greedy,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dual => "dual",
            Self::Fastcontrol => "fastcontrol",
            Self::Greedy => "greedy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmChoice {
    Dual,
    Fastcontrol,
    Greedy,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrivalModel {
    /// `A_i ~ Poisson(A_bar)`, used directly as a normalized load.
    Poisson,
    /// `A_i ~ Gamma(shape = A_bar, scale = 1)`: same mean and variance as the
    /// Poisson draw, but continuous.
    Gamma,
    /// `A_i = A_bar`.
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LatencyModel {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSpec {
    pub eta: f64,
    pub theta: f64,
    pub gamma_cost: f64,
    pub capacity: f64,
    pub latency: LatencyModel,
}

impl Default for CostSpec {
    fn default() -> Self {
        Self { eta: 1.0, theta: 10.0, gamma_cost: 1.0, capacity: 0.7, latency: LatencyModel::Uniform { lo: 0.0, hi: 1.0 } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChannelSpec {
    Exact,
    Sampled { scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub nodes: usize,
    pub trials: usize,
    pub mean_load_grid: Vec<f64>,
    pub arrivals: ArrivalModel,
    pub costs: CostSpec,
    pub correlation: CorrelationGenerator,
    /// Draw a fresh correlation matrix for every trial instead of one per
    /// experiment.
    pub resample_correlation: bool,
    pub algorithms: Vec<AlgorithmChoice>,
    pub epsilon: f64,
    /// Constant dual step size; overrides the `epsilon` rule when set.
    pub alpha: Option<f64>,
    pub max_iters: usize,
    pub stop_tol: f64,
    pub gamma: f64,
    pub channel: ChannelSpec,
    pub ode: OdeConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            nodes: 60,
            trials: 100,
            mean_load_grid: vec![0.1, 0.5, 1.0, 2.0, 5.0, 10.0],
            arrivals: ArrivalModel::Poisson,
            costs: CostSpec::default(),
            correlation: CorrelationGenerator::DiagonallyDominant { diag_min: 0.6, neighbors: 4, skew: 0.8 },
            resample_correlation: false,
            algorithms: vec![AlgorithmChoice::Dual, AlgorithmChoice::Greedy],
            epsilon: 0.05,
            alpha: Some(2.0),
            max_iters: 20_000,
            stop_tol: 1e-6,
            gamma: 1.0,
            channel: ChannelSpec::Exact,
            ode: OdeConfig::default(),
            seed: 2013,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; a relative matrix path is taken relative to the
    /// config file.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.to_path_buf(), source })?;
        let mut config: Self = serde_json::from_str(&text)?;
        if let CorrelationGenerator::FromFile { path: matrix } = &mut config.correlation {
            if matrix.is_relative() {
                if let Some(dir) = path.parent() {
                    *matrix = dir.join(&*matrix);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.nodes == 0 {
            return bad("nodes must be at least 1".into());
        }
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.mean_load_grid.is_empty() {
            return bad("mean_load_grid must not be empty".into());
        }
        if let Some(v) = self.mean_load_grid.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return bad(format!("mean load {v} must be finite and non-negative"));
        }
        if self.algorithms.is_empty() {
            return bad("select at least one algorithm".into());
        }
        if let Some(alpha) = self.alpha {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return bad(format!("alpha must be positive, got {alpha}"));
            }
        } else if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        let c = &self.costs;
        if !(c.eta > 0.0 && c.theta > 0.0 && c.gamma_cost > 0.0 && c.capacity > 0.0) {
            return bad("eta, theta, gamma_cost and capacity must be positive".into());
        }
        match c.latency {
            LatencyModel::Constant { value } if !(value >= 0.0) => return bad("latency must be non-negative".into()),
            LatencyModel::Uniform { lo, hi } if !(0.0 <= lo && lo <= hi) => {
                return bad("latency range must satisfy 0 <= lo <= hi".into())
            }
            _ => {}
        }
        self.ode.validate()?;
        Ok(())
    }

    /// Selected algorithms in run order, without duplicates.
    pub fn selected_algorithms(&self) -> Vec<Algorithm> {
        let mut algos: Vec<Algorithm> = self
            .algorithms
            .iter()
            .flat_map(|a| match a {
                AlgorithmChoice::Dual => vec![Algorithm::Dual],
                AlgorithmChoice::Fastcontrol => vec![Algorithm::Fastcontrol],
                AlgorithmChoice::Greedy => vec![Algorithm::Greedy],
                AlgorithmChoice::All => vec![Algorithm::Dual, Algorithm::Fastcontrol, Algorithm::Greedy],
            })
            .collect();
        algos.sort();
        algos.dedup();
        algos
    }

    fn dual_options(&self) -> DualOptions {
        let policy = match self.alpha {
            Some(alpha) => StepSizePolicy::Constant(alpha),
            None => StepSizePolicy::Epsilon(self.epsilon),
        };
        DualOptions::new(policy, self.max_iters, self.stop_tol)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the RNG stream for one (grid point, trial) pair.
pub fn trial_seed(master: u64, grid_index: usize, trial: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ grid_index as u64) ^ trial as u64)
}

fn correlation_seed(master: u64) -> u64 {
    splitmix64(splitmix64(master) ^ u64::MAX)
}

fn draw_arrival<R: Rng + ?Sized>(model: ArrivalModel, mean: f64, rng: &mut R) -> f64 {
    if mean == 0.0 {
        return 0.0;
    }
    match model {
        ArrivalModel::Poisson => Poisson::new(mean).expect("positive mean").sample(rng),
        ArrivalModel::Gamma => Gamma::new(mean, 1.0).expect("positive shape").sample(rng),
        ArrivalModel::Deterministic => mean,
    }
}

/// The instance of one trial; deterministic in (seed, grid index, trial).
pub fn generate_instance(config: &ExperimentConfig, grid_index: usize, trial: usize) -> Result<SystemInstance, HarnessError> {
    let mean = *config
        .mean_load_grid
        .get(grid_index)
        .ok_or_else(|| HarnessError::Config(format!("grid index {grid_index} out of range")))?;
    let n = config.nodes;
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(config.seed, grid_index, trial));
    let correlation: CorrelationMatrix = if config.resample_correlation {
        config.correlation.generate(n, &mut rng)?
    } else {
        config.correlation.generate(n, &mut ChaCha8Rng::seed_from_u64(correlation_seed(config.seed)))?
    };
    let arrivals: Vec<f64> = (0..n).map(|_| draw_arrival(config.arrivals, mean, &mut rng)).collect();
    let c = &config.costs;
    let d: Vec<f64> = (0..n)
        .map(|_| match c.latency {
            LatencyModel::Constant { value } => value,
            LatencyModel::Uniform { lo, hi } if lo == hi => lo,
            LatencyModel::Uniform { lo, hi } => rng.random_range(lo..hi),
        })
        .collect();
    Ok(SystemInstance::new(
        correlation,
        ArrivalRates::new(arrivals)?,
        CapacityVector::uniform(n, c.capacity)?,
        CostParams { eta: vec![c.eta; n], theta: vec![c.theta; n], d, gamma_cost: vec![c.gamma_cost; n] },
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub grid_index: usize,
    pub mean_load: f64,
    pub trial: usize,
    pub algorithm: Algorithm,
    pub arrivals: Vec<f64>,
    pub latencies: Vec<f64>,
    /// Best feasible cost for the dual algorithms; cost at the endpoint for
    /// greedy. `+inf` when no feasible point was reached.
    pub cost: f64,
    /// Nodes above capacity (greedy: locally uncontrollable overloads).
    pub overloaded: usize,
    /// Dual iterations, or ODE steps to steady state.
    pub iterations: usize,
    pub converged: bool,
}

impl TrialResult {
    /// Value summarized for this algorithm: cost for the dual algorithms,
    /// overloaded-node count for greedy.
    pub fn metric(&self) -> f64 {
        match self.algorithm {
            Algorithm::Greedy => self.overloaded as f64,
            _ => self.cost,
        }
    }
}

pub fn run_trial(
    config: &ExperimentConfig,
    instance: &SystemInstance,
    algorithm: Algorithm,
    grid_index: usize,
    trial: usize,
) -> Result<TrialResult, HarnessError> {
    let n = instance.n();
    let (cost, overloaded, iterations, converged) = match algorithm {
        Algorithm::Dual | Algorithm::Fastcontrol => {
            let report = if algorithm == Algorithm::Dual {
                run_dual_with(instance, &config.dual_options())?
            } else {
                let mode = match config.channel {
                    ChannelSpec::Exact => ChannelMode::ExactRate,
                    ChannelSpec::Sampled { scale } => {
                        ChannelMode::SampledPackets { scale, seed: splitmix64(trial_seed(config.seed, grid_index, trial)) }
                    }
                };
                let options = DistributedOptions { dual: config.dual_options(), gamma: config.gamma, mode };
                run_distributed(instance, &options)?.dual
            };
            let overloaded = if report.best_cost.is_finite() {
                let s = instance.load(&report.best_x)?;
                (0..n).filter(|&i| s[i] > instance.capacities[i]).count()
            } else {
                n
            };
            (report.best_cost, overloaded, report.iterations, report.converged)
        }
        Algorithm::Greedy => {
            let traj = integrate(instance, &config.ode, &vec![0.5; n])?;
            let x = traj.final_state();
            let s = traj.final_load();
            let overloaded =
                (0..n).filter(|&i| x[i] < OVERLOAD_X_TOL && s[i] > instance.capacities[i] + OVERLOAD_S_TOL).count();
            let cost = total_cost(instance, x, s).unwrap_or(f64::INFINITY);
            let steps = (traj.final_time() / config.ode.dt).round() as usize;
            (cost, overloaded, steps, traj.converged)
        }
    };
    Ok(TrialResult {
        grid_index,
        mean_load: config.mean_load_grid[grid_index],
        trial,
        algorithm,
        arrivals: instance.arrivals.to_vec(),
        latencies: instance.costs.d.clone(),
        cost,
        overloaded,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    /// Mean over finite values; `+inf` if there are none.
    pub mean: f64,
    /// Sample standard deviation (`n - 1` denominator) over finite values.
    pub std: f64,
    pub n: usize,
    pub n_infeasible: usize,
}

/// Mean and sample standard deviation; infinite values are counted but left
/// out.
pub fn summarize(values: &[f64]) -> Result<Stats, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n_infeasible = values.len() - finite.len();
    let (mean, std) = match finite.len() {
        0 => (f64::INFINITY, 0.0),
        1 => (finite[0], 0.0),
        m => {
            let mean = finite.iter().sum::<f64>() / m as f64;
            let var = finite.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
            (mean, var.sqrt())
        }
    };
    Ok(Stats { mean, std, n: values.len(), n_infeasible })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mean_load: f64,
    pub algorithm: Algorithm,
    pub stats: Stats,
    pub n_unconverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SummaryRow>,
    pub trials: Vec<TrialResult>,
    pub seed: u64,
}

impl SweepOutcome {
    pub fn row(&self, mean_load: f64, algorithm: Algorithm) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.mean_load == mean_load && r.algorithm == algorithm)
    }

    /// CSV with one row per (grid point, algorithm). `metric` says what was
    /// averaged: `cost` for the dual algorithms, `overloaded` for greedy.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["A_bar", "algo", "metric", "mean", "std", "n_trials", "n_infeasible", "n_unconverged", "seed"])?;
        for r in &self.rows {
            let metric = if r.algorithm == Algorithm::Greedy { "overloaded" } else { "cost" };
            w.write_record([
                r.mean_load.to_string(),
                r.algorithm.name().to_string(),
                metric.to_string(),
                r.stats.mean.to_string(),
                r.stats.std.to_string(),
                r.stats.n.to_string(),
                r.stats.n_infeasible.to_string(),
                r.n_unconverged.to_string(),
                self.seed.to_string(),
            ])?;
        }
        w.flush().map_err(|source| HarnessError::Io { path: PathBuf::from("<csv>"), source })?;
        Ok(())
    }
}

/// Runs every selected algorithm on every trial of every grid point.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepOutcome, HarnessError> {
    config.validate()?;
    let algorithms = config.selected_algorithms();
    let mut rows = Vec::new();
    let mut trials = Vec::new();
    for (g, &mean_load) in config.mean_load_grid.iter().enumerate() {
        let mut per_algo: Vec<Vec<TrialResult>> = vec![Vec::new(); algorithms.len()];
        for t in 0..config.trials {
            let instance = generate_instance(config, g, t)?;
            for (k, &algo) in algorithms.iter().enumerate() {
                per_algo[k].push(run_trial(config, &instance, algo, g, t)?);
            }
        }
        for (k, results) in per_algo.into_iter().enumerate() {
            let values: Vec<f64> = results.iter().map(TrialResult::metric).collect();
            rows.push(SummaryRow {
                mean_load,
                algorithm: algorithms[k],
                stats: summarize(&values)?,
                n_unconverged: results.iter().filter(|r| !r.converged).count(),
            });
            trials.extend(results);
        }
    }
    Ok(SweepOutcome { rows, trials, seed: config.seed })
}
