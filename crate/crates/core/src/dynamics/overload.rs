use serde::{Deserialize, Serialize};

use super::{integrate, run_rk4, Classification, DynamicsError, FixedPointReport, GreedySystem, OdeConfig, Trajectory};
use super::fixed_point::find_fixed_points;
use crate::cost::CostParams;
use crate::model::{ArrivalRates, CapacityVector, CorrelationMatrix, SystemInstance};

/// A node counts as switched off below this redirection probability.
pub const OVERLOAD_X_TOL: f64 = 1e-3;
/// A node counts as overloaded above `T_i` plus this margin.
pub const OVERLOAD_S_TOL: f64 = 1e-3;

/// Node `i` passes iff the load it receives from other nodes' users alone,
/// `Σ_{j≠i} C[j][i]·A_j`, does not exceed `T_i`. When every node passes, no
/// node can end up overloaded while redirecting nobody.
pub fn stability_polytope_check(instance: &SystemInstance) -> Vec<bool> {
    let c = &instance.correlation;
    let a = &instance.arrivals;
    (0..instance.n())
        .map(|i| {
            let foreign: f64 = (0..instance.n()).filter(|&j| j != i).map(|j| c.get(j, i) * a[j]).sum();
            foreign <= instance.capacities[i]
        })
        .collect()
}

fn overloaded_nodes(x: &[f64], s: &[f64], capacities: &[f64], x_tol: f64, s_tol: f64) -> Vec<usize> {
    (0..x.len()).filter(|&i| x[i] < x_tol && s[i] > capacities[i] + s_tol).collect()
}

/// Nodes stuck in a locally uncontrollable overload at the end of a converged
/// trajectory.
pub fn detect_uncontrollable_overload(
    traj: &Trajectory,
    capacities: &[f64],
    x_tol: f64,
    s_tol: f64,
) -> Result<Vec<usize>, DynamicsError> {
    if !traj.converged {
        return Err(DynamicsError::NotConverged);
    }
    let x = traj.final_state();
    if capacities.len() != x.len() {
        return Err(DynamicsError::DimensionMismatch { expected: x.len(), got: capacities.len() });
    }
    Ok(overloaded_nodes(x, traj.final_load(), capacities, x_tol, s_tol))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum TwoNodeVerdict {
    /// Both self-correlations exceed one half.
    ControllableForAllArrivals,
    /// Both self-correlations are below one half and arrivals are small enough.
    ControllableSufficient,
    /// Neither condition applies; the stable fixed points decide.
    Indeterminate { fixed_points: Vec<FixedPointReport>, uncontrollable_nodes: Vec<usize> },
}

/// Classifies the two-node system with `C = [[alpha, 1-alpha], [1-beta, beta]]`.
pub fn two_node_classify(alpha: f64, beta: f64, a: [f64; 2], t: [f64; 2]) -> Result<TwoNodeVerdict, DynamicsError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(DynamicsError::OutOfRange("alpha"));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(DynamicsError::OutOfRange("beta"));
    }
    if !(a[0] > 0.0 && a[1] > 0.0 && a.iter().all(|v| v.is_finite())) {
        return Err(DynamicsError::OutOfRange("arrival rates"));
    }
    if !(t[0] > 0.0 && t[1] > 0.0 && t.iter().all(|v| v.is_finite())) {
        return Err(DynamicsError::OutOfRange("capacities"));
    }
    if alpha > 0.5 && beta > 0.5 {
        return Ok(TwoNodeVerdict::ControllableForAllArrivals);
    }
    if alpha < 0.5 && beta < 0.5 && a[0] < t[0] / (1.0 - alpha) && a[1] < t[1] / (1.0 - beta) {
        return Ok(TwoNodeVerdict::ControllableSufficient);
    }
    let instance = SystemInstance::new(
        CorrelationMatrix::two_node(alpha, beta).map_err(|_| DynamicsError::OutOfRange("alpha/beta"))?,
        ArrivalRates::new(a.to_vec()).map_err(|_| DynamicsError::OutOfRange("arrival rates"))?,
        CapacityVector::new(t.to_vec()).map_err(|_| DynamicsError::OutOfRange("capacities"))?,
        CostParams::standard(vec![0.0; 2]),
    )
    .map_err(|_| DynamicsError::OutOfRange("instance"))?;
    let fixed_points = find_fixed_points(&instance, 1.0, &[]);
    let uncontrollable_nodes = stable_overloads(&fixed_points, &instance.capacities);
    Ok(TwoNodeVerdict::Indeterminate { fixed_points, uncontrollable_nodes })
}

fn stable_overloads(fixed_points: &[FixedPointReport], capacities: &[f64]) -> Vec<usize> {
    let mut nodes: Vec<usize> = fixed_points
        .iter()
        .filter(|f| f.classification == Classification::Stable)
        .flat_map(|f| overloaded_nodes(&f.location, &f.load, capacities, OVERLOAD_X_TOL, OVERLOAD_S_TOL))
        .collect();
    nodes.sort_unstable();
    nodes.dedup();
    nodes
}

/// Time average of the load over `[start, end]` by the trapezoidal rule.
pub fn orbit_average_load(traj: &Trajectory, start: f64, end: f64) -> Result<Vec<f64>, DynamicsError> {
    let slack = 1e-9 * end.abs().max(1.0);
    let bad_window = DynamicsError::BadWindow { start, end };
    if !(end > start) || traj.is_empty() || traj.times[0] > start + slack || traj.final_time() < end - slack {
        return Err(bad_window);
    }
    let idx: Vec<usize> = (0..traj.len()).filter(|&k| traj.times[k] >= start - slack && traj.times[k] <= end + slack).collect();
    if idx.len() < 2 {
        return Err(bad_window);
    }
    let (lo, hi) = (traj.clamp_eps, 1.0 - traj.clamp_eps);
    for &k in &idx {
        if traj.states[k].iter().any(|&v| v <= lo || v >= hi) {
            return Err(DynamicsError::BoundaryTouched { time: traj.times[k] });
        }
    }
    let n = traj.states[0].len();
    let mut acc = vec![0.0; n];
    for w in idx.windows(2) {
        let (k0, k1) = (w[0], w[1]);
        let h = traj.times[k1] - traj.times[k0];
        for i in 0..n {
            acc[i] += 0.5 * h * (traj.loads[k0][i] + traj.loads[k1][i]);
        }
    }
    let span = traj.times[*idx.last().unwrap()] - traj.times[idx[0]];
    Ok(acc.into_iter().map(|v| v / span).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicOrbit {
    /// One full period of the orbit, densely sampled.
    pub trajectory: Trajectory,
    /// Start of the recorded period in absolute time.
    pub start_time: f64,
    pub return_distance: f64,
    pub average_load: Vec<f64>,
}

/// Integrates a periodically forced system period by period until the state
/// returns to within `return_tol` of where the period began.
pub fn locate_periodic_orbit<F>(
    instance: &SystemInstance,
    config: &OdeConfig,
    x0: &[f64],
    arrivals: F,
    period: f64,
    max_periods: usize,
    return_tol: f64,
) -> Result<PeriodicOrbit, DynamicsError>
where
    F: Fn(f64, &mut [f64]),
{
    if x0.len() != instance.n() {
        return Err(DynamicsError::DimensionMismatch { expected: instance.n(), got: x0.len() });
    }
    let steps = (period / config.dt).round();
    if !(steps >= 1.0) || (steps * config.dt - period).abs() > 1e-9 * period {
        return Err(DynamicsError::BadConfig("period must be a multiple of dt".into()));
    }
    let per_period = OdeConfig { horizon: period, sample_every: 1, ..*config };
    let mut sys = GreedySystem::new(instance, config.beta_sens);
    let mut x = x0.to_vec();
    let mut distance = f64::INFINITY;
    for p in 0..max_periods {
        let t0 = p as f64 * period;
        let mut traj = run_rk4(&mut sys, &per_period, &x, Some(|t: f64, a: &mut [f64]| arrivals(t0 + t, a)), false)?;
        let end = traj.final_state().to_vec();
        distance = end.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if distance < return_tol {
            let average_load = orbit_average_load(&traj, 0.0, period)?;
            for t in traj.times.iter_mut() {
                *t += t0;
            }
            return Ok(PeriodicOrbit { trajectory: traj, start_time: t0, return_distance: distance, average_load });
        }
        x = end;
    }
    Err(DynamicsError::OrbitNotFound { periods: max_periods, distance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalVerdict {
    Controllable,
    UncontrollableOverload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityVerdict {
    pub in_polytope: Vec<bool>,
    pub uncontrollably_overloaded: Vec<bool>,
    pub fixed_points: Vec<FixedPointReport>,
    /// Endpoint of the integration from the hypercube centre.
    pub center_endpoint: Vec<f64>,
    pub center_converged: bool,
    pub verdict: GlobalVerdict,
}

impl StabilityVerdict {
    pub fn polytope_holds(&self) -> bool {
        self.in_polytope.iter().all(|&b| b)
    }
}

/// Polytope check, fixed points with their classification, and the nodes
/// that some stable steady state leaves overloaded.
pub fn analyze_stability(instance: &SystemInstance, config: &OdeConfig) -> Result<StabilityVerdict, DynamicsError> {
    let n = instance.n();
    let traj = integrate(instance, config, &vec![0.5; n])?;
    let endpoint = traj.final_state().to_vec();
    let fixed_points = find_fixed_points(instance, config.beta_sens, std::slice::from_ref(&endpoint));
    let mut flagged = stable_overloads(&fixed_points, &instance.capacities);
    if traj.converged {
        flagged.extend(detect_uncontrollable_overload(&traj, &instance.capacities, OVERLOAD_X_TOL, OVERLOAD_S_TOL)?);
    }
    let mut uncontrollably_overloaded = vec![false; n];
    for i in flagged {
        uncontrollably_overloaded[i] = true;
    }
    let verdict = if uncontrollably_overloaded.iter().any(|&b| b) {
        GlobalVerdict::UncontrollableOverload
    } else {
        GlobalVerdict::Controllable
    };
    Ok(StabilityVerdict {
        in_polytope: stability_polytope_check(instance),
        uncontrollably_overloaded,
        fixed_points,
        center_endpoint: endpoint,
        center_converged: traj.converged,
        verdict,
    })
}
