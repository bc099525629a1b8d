//! The greedy redirection heuristic as a continuous dynamical system.
//!
//! Each node nudges its redirection probability against its own overload,
//! damped by `x_i(1 - x_i)` so the hypercube is invariant:
//! `dx_i/dt = -beta·x_i(1 - x_i)·(S_i - T_i)` with `S = Bx`.

mod fixed_point;
mod overload;

pub use fixed_point::{classify_fixed_point, eigenvalues, find_fixed_points, Classification, FixedPointReport};
pub use overload::{
    analyze_stability, detect_uncontrollable_overload, locate_periodic_orbit, orbit_average_load,
    stability_polytope_check, two_node_classify, GlobalVerdict, PeriodicOrbit, StabilityVerdict, TwoNodeVerdict,
    OVERLOAD_S_TOL, OVERLOAD_X_TOL,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SystemInstance;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("initial point must lie strictly inside the unit hypercube (component {index} = {value})")]
    BadInitialPoint { index: usize, value: f64 },
    #[error("invalid ODE configuration: {0}")]
    BadConfig(String),
    #[error("not a fixed point: residual {residual:e}")]
    NotAFixedPoint { residual: f64 },
    #[error("trajectory did not reach a steady state")]
    NotConverged,
    #[error("trajectory touches the boundary inside the averaging window at t = {time}")]
    BoundaryTouched { time: f64 },
    #[error("averaging window [{start}, {end}] is not covered by the trajectory")]
    BadWindow { start: f64, end: f64 },
    #[error("no periodic orbit found within {periods} periods (last return distance {distance:e})")]
    OrbitNotFound { periods: usize, distance: f64 },
    #[error("{0} out of range")]
    OutOfRange(&'static str),
    #[error("eigenvalue iteration did not converge")]
    EigenFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdeConfig {
    pub beta_sens: f64,
    pub dt: f64,
    pub horizon: f64,
    pub steady_tol: f64,
    pub clamp_eps: f64,
    /// Record every `sample_every`-th step; the first and last states are
    /// always recorded.
    pub sample_every: usize,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self { beta_sens: 1.0, dt: 0.01, horizon: 1e4, steady_tol: 1e-8, clamp_eps: 1e-12, sample_every: 100 }
    }
}

impl OdeConfig {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let bad = |m: &str| Err(DynamicsError::BadConfig(m.to_string()));
        if !(self.beta_sens > 0.0 && self.beta_sens.is_finite()) {
            return bad("beta_sens must be positive");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive");
        }
        if !(self.steady_tol > 0.0) {
            return bad("steady_tol must be positive");
        }
        if !(self.clamp_eps > 0.0 && self.clamp_eps < 1e-6) {
            return bad("clamp_eps must lie in (0, 1e-6)");
        }
        if self.sample_every == 0 {
            return bad("sample_every must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub loads: Vec<Vec<f64>>,
    pub converged: bool,
    /// `‖F(x)‖∞` at the last state.
    pub residual: f64,
    /// Number of components pulled back into the band after an RK step.
    pub clamp_events: usize,
    pub clamp_eps: f64,
}

impl Trajectory {
    pub fn final_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }

    pub fn final_load(&self) -> &[f64] {
        self.loads.last().expect("trajectory is never empty")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// `S = Bx` with the sparsity of the correlation matrix, arrivals kept
/// separate so they can vary in time.
#[derive(Debug, Clone)]
pub(crate) struct GreedySystem {
    /// For node `i`, the pairs `(j, C[j][i])` with nonzero correlation.
    incoming: Vec<Vec<(usize, f64)>>,
    pub(crate) arrivals: Vec<f64>,
    pub(crate) capacities: Vec<f64>,
    pub(crate) beta_sens: f64,
}

impl GreedySystem {
    pub(crate) fn new(instance: &SystemInstance, beta_sens: f64) -> Self {
        let c = &instance.correlation;
        let n = c.n();
        let incoming = (0..n)
            .map(|i| (0..n).filter_map(|j| {
                let v = c.get(j, i);
                (v != 0.0).then_some((j, v))
            }).collect())
            .collect();
        Self { incoming, arrivals: instance.arrivals.to_vec(), capacities: instance.capacities.to_vec(), beta_sens }
    }

    pub(crate) fn n(&self) -> usize {
        self.capacities.len()
    }

    pub(crate) fn load(&self, x: &[f64], out: &mut [f64]) {
        for (i, row) in self.incoming.iter().enumerate() {
            out[i] = row.iter().map(|&(j, c)| c * self.arrivals[j] * x[j]).sum();
        }
    }

    /// Writes `F(x)` and returns `‖F(x)‖∞`; `load` receives `S = Bx`.
    pub(crate) fn field(&self, x: &[f64], load: &mut [f64], out: &mut [f64]) -> f64 {
        self.load(x, load);
        let mut norm = 0.0f64;
        for i in 0..x.len() {
            let f = -self.beta_sens * x[i] * (1.0 - x[i]) * (load[i] - self.capacities[i]);
            out[i] = f;
            norm = norm.max(f.abs());
        }
        norm
    }
}

fn check_len(instance: &SystemInstance, len: usize) -> Result<(), DynamicsError> {
    if instance.n() != len {
        return Err(DynamicsError::DimensionMismatch { expected: instance.n(), got: len });
    }
    Ok(())
}

pub fn vector_field(instance: &SystemInstance, beta_sens: f64, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
    check_len(instance, x.len())?;
    let sys = GreedySystem::new(instance, beta_sens);
    let mut load = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    sys.field(x, &mut load, &mut out);
    Ok(out)
}

/// Analytic Jacobian of the vector field.
pub fn jacobian(instance: &SystemInstance, beta_sens: f64, x: &[f64]) -> Result<DMatrix<f64>, DynamicsError> {
    check_len(instance, x.len())?;
    let n = x.len();
    let c = &instance.correlation;
    let a = &instance.arrivals;
    let s = instance.load(x).map_err(|_| DynamicsError::DimensionMismatch { expected: n, got: x.len() })?;
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let damp = x[i] * (1.0 - x[i]);
        let b_ij = c.get(j, i) * a[j];
        if i == j {
            -beta_sens * (damp * b_ij + (1.0 - 2.0 * x[i]) * (s[i] - instance.capacities[i]))
        } else {
            -beta_sens * damp * b_ij
        }
    }))
}

/// Integrates from a strictly interior start with fixed-step RK4, stopping at
/// the horizon or once `‖F‖∞ < steady_tol`.
pub fn integrate(instance: &SystemInstance, config: &OdeConfig, x0: &[f64]) -> Result<Trajectory, DynamicsError> {
    check_len(instance, x0.len())?;
    let mut sys = GreedySystem::new(instance, config.beta_sens);
    run_rk4(&mut sys, config, x0, None::<fn(f64, &mut [f64])>, true)
}

/// Integrates with time-varying arrivals `a(t)`; runs to the horizon.
pub fn integrate_forced<F>(
    instance: &SystemInstance,
    config: &OdeConfig,
    x0: &[f64],
    arrivals: F,
) -> Result<Trajectory, DynamicsError>
where
    F: Fn(f64, &mut [f64]),
{
    check_len(instance, x0.len())?;
    let mut sys = GreedySystem::new(instance, config.beta_sens);
    run_rk4(&mut sys, config, x0, Some(arrivals), false)
}

pub(crate) fn run_rk4<F>(
    sys: &mut GreedySystem,
    config: &OdeConfig,
    x0: &[f64],
    forcing: Option<F>,
    stop_at_steady: bool,
) -> Result<Trajectory, DynamicsError>
where
    F: Fn(f64, &mut [f64]),
{
    config.validate()?;
    for (index, &value) in x0.iter().enumerate() {
        if !(value > 0.0 && value < 1.0) {
            return Err(DynamicsError::BadInitialPoint { index, value });
        }
    }
    let n = sys.n();
    let dt = config.dt;
    let steps = (config.horizon / dt - 1e-9).ceil() as usize;
    let lo = config.clamp_eps;
    let hi = 1.0 - config.clamp_eps;

    let mut x = x0.to_vec();
    let mut load = vec![0.0; n];
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        loads: Vec::new(),
        converged: false,
        residual: f64::INFINITY,
        clamp_events: 0,
        clamp_eps: config.clamp_eps,
    };
    let set_arrivals = |sys: &mut GreedySystem, t: f64| {
        if let Some(f) = &forcing {
            f(t, &mut sys.arrivals);
        }
    };

    let mut step = 0;
    loop {
        let t = step as f64 * dt;
        set_arrivals(sys, t);
        let norm = sys.field(&x, &mut load, &mut k1);
        let steady = stop_at_steady && norm < config.steady_tol;
        let last = steady || step == steps;
        if last || step % config.sample_every == 0 {
            traj.times.push(t);
            traj.states.push(x.clone());
            traj.loads.push(load.clone());
        }
        if last {
            traj.converged = steady;
            traj.residual = norm;
            return Ok(traj);
        }

        set_arrivals(sys, t + 0.5 * dt);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        sys.field(&tmp, &mut load, &mut k2);
        for i in 0..n {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        sys.field(&tmp, &mut load, &mut k3);
        set_arrivals(sys, t + dt);
        for i in 0..n {
            tmp[i] = x[i] + dt * k3[i];
        }
        sys.field(&tmp, &mut load, &mut k4);
        for i in 0..n {
            let next = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            x[i] = if next < lo {
                traj.clamp_events += 1;
                lo
            } else if next > hi {
                traj.clamp_events += 1;
                hi
            } else {
                next
            };
        }
        step += 1;
    }
}
