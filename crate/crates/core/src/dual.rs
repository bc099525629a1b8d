//! Projected super-gradient ascent on the Lagrangian dual of the load
//! management problem, plus a centralized reference solver used to check it.
//!
//! Each node relaxes its capacity coupling constraint `Σ_j C[j][i]·A[j]·x[j] ≤ S_i`
//! with a price `mu_i ≥ 0`. For fixed prices the Lagrangian separates into two
//! scalar problems per node (see [`solve_sub_s`] and [`solve_sub_x`]) that are
//! coupled only through `beta_i = Σ_j mu_j·C[i][j]`. The prices then follow
//!
//! ```text
//! mu_i ← max(0, mu_i + alpha·(S_obs_i - S_i))
//! ```
//!
//! where `S_obs` is the proxy load induced by the current redirection
//! probabilities.

use thiserror::Error;

use crate::cost::{
    minimize_scalar_convex, offload_cost_derivative, offload_cost_unchecked, proxy_cost_derivative,
    proxy_cost_unchecked, solve_sub_s, solve_sub_x, total_cost_unchecked,
};
use crate::model::{load_map_into, CorrelationMatrix, ModelError, SystemInstance};

/// Window (in iterations) over which the best primal cost must keep improving.
pub const STOP_WINDOW: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualError {
    #[error("step-size inputs must be positive (epsilon={epsilon}, a_max={a_max}, t_max={t_max}, n={n})")]
    NonPositiveInput { epsilon: f64, a_max: f64, t_max: f64, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no grid point has finite cost")]
    InfeasibleEverywhere,
    #[error("grid with {points} points exceeds the search budget")]
    GridTooLarge { points: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Step-size selection for the dual iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSizePolicy {
    /// Fixed `alpha`.
    Constant(f64),
    /// `alpha = 2·epsilon / (A_max² + N·T_max²)`, guaranteeing the best primal
    /// cost ends up within `epsilon` of the optimum.
    Epsilon(f64),
}

impl StepSizePolicy {
    pub fn alpha(&self, instance: &SystemInstance) -> Result<f64, DualError> {
        match *self {
            StepSizePolicy::Constant(alpha) if alpha > 0.0 && alpha.is_finite() => Ok(alpha),
            StepSizePolicy::Constant(alpha) => Err(DualError::NonPositiveInput {
                epsilon: alpha,
                a_max: instance.a_max(),
                t_max: instance.t_max(),
                n: instance.n(),
            }),
            StepSizePolicy::Epsilon(eps) => step_size(eps, instance.a_max(), instance.t_max(), instance.n()),
        }
    }
}

/// `2·epsilon / (A_max² + N·T_max²)`.
///
/// `A_max = 0` (no traffic) is accepted; the bound is then carried by the
/// capacity term alone.
pub fn step_size(epsilon: f64, a_max: f64, t_max: f64, n: usize) -> Result<f64, DualError> {
    if !(epsilon > 0.0 && a_max >= 0.0 && t_max > 0.0 && n > 0) {
        return Err(DualError::NonPositiveInput { epsilon, a_max, t_max, n });
    }
    Ok(2.0 * epsilon / supergradient_norm_bound(a_max, t_max, n))
}

/// Uniform bound `A_max² + N·T_max²` on the squared super-gradient norm.
pub fn supergradient_norm_bound(a_max: f64, t_max: f64, n: usize) -> f64 {
    a_max * a_max + n as f64 * t_max * t_max
}

/// Coupling factors `beta_i = Σ_j mu_j·C[i][j]`.
pub fn beta_projection(c: &CorrelationMatrix, mu: &[f64]) -> Result<Vec<f64>, DualError> {
    if mu.len() != c.n() {
        return Err(DualError::DimensionMismatch { expected: c.n(), got: mu.len() });
    }
    Ok((0..c.n()).map(|i| coupling_factor(c.row(i), mu)).collect())
}

#[inline]
pub(crate) fn coupling_factor(row: &[f64], mu: &[f64]) -> f64 {
    row.iter().zip(mu).fold(0.0, |acc, (&c, &m)| acc + m * c)
}

/// Iterate of the dual method. `x`, `s` and `s_obs` are the primal quantities
/// produced by the step that led to `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    pub mu: Vec<f64>,
    pub k: usize,
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub s_obs: Vec<f64>,
}

impl DualState {
    /// Cold start: `mu = 0`, nothing computed yet.
    pub fn cold(n: usize) -> Self {
        Self { mu: vec![0.0; n], k: 0, x: vec![1.0; n], s: vec![0.0; n], s_obs: vec![0.0; n] }
    }
}

/// Node-local primal response to a price vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalResponse {
    pub beta: Vec<f64>,
    pub x: Vec<f64>,
    pub s: Vec<f64>,
}

/// Solves both subproblems of node `i` given its own price and coupling factor.
#[inline]
pub(crate) fn node_response(instance: &SystemInstance, i: usize, mu_i: f64, beta_i: f64) -> (f64, f64) {
    let x = solve_sub_x(instance.costs.offload(i), instance.arrivals[i], beta_i);
    let s = solve_sub_s(instance.costs.eta[i], instance.capacities[i], mu_i);
    (x, s)
}

pub fn primal_response(instance: &SystemInstance, mu: &[f64]) -> Result<PrimalResponse, DualError> {
    let beta = beta_projection(&instance.correlation, mu)?;
    let (x, s) = (0..instance.n()).map(|i| node_response(instance, i, mu[i], beta[i])).unzip();
    Ok(PrimalResponse { beta, x, s })
}

/// `mu_i ← max(0, mu_i + alpha·(S_obs_i - S_i))`.
#[inline]
pub(crate) fn price_update(mu: f64, alpha: f64, s_obs: f64, s: f64) -> f64 {
    (mu + alpha * (s_obs - s)).max(0.0)
}

/// One synchronous iteration: primal responses from the current prices,
/// observed loads from the load map, then the projected price update.
pub fn dual_step(state: &DualState, alpha: f64, instance: &SystemInstance) -> Result<DualState, DualError> {
    let n = instance.n();
    if state.mu.len() != n {
        return Err(DualError::DimensionMismatch { expected: n, got: state.mu.len() });
    }
    let PrimalResponse { x, s, .. } = primal_response(instance, &state.mu)?;
    let mut s_obs = vec![0.0; n];
    load_map_into(&instance.correlation, &instance.arrivals, &x, &mut s_obs);
    let mu = (0..n).map(|i| price_update(state.mu[i], alpha, s_obs[i], s[i])).collect();
    Ok(DualState { mu, k: state.k + 1, x, s, s_obs })
}

/// Dual function value at the subproblem minimizers:
/// `Σ_i [g_i(S_i) - mu_i·S_i] + Σ_i [h_i(x_i) + A_i·beta_i·x_i]`.
pub fn dual_objective(instance: &SystemInstance, mu: &[f64], response: &PrimalResponse) -> f64 {
    let costs = &instance.costs;
    let mut total = 0.0;
    for i in 0..instance.n() {
        let a = instance.arrivals[i];
        total += proxy_cost_unchecked(costs.eta[i], instance.capacities[i], response.s[i]) - mu[i] * response.s[i];
        total += offload_cost_unchecked(costs.offload(i), a, response.x[i]) + a * response.beta[i] * response.x[i];
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// `W(x, S_obs)`, `+inf` when some proxy is at or above capacity.
    pub cost: f64,
    pub dual_obj: f64,
    pub grad_norm_sq: f64,
    /// Best primal cost so far minus best dual value so far.
    pub gap: f64,
    /// Prices used by this iteration (before the update).
    pub mu: Vec<f64>,
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub s_obs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub alpha: f64,
    pub iterations: usize,
    pub converged: bool,
    pub records: Vec<IterationRecord>,
    pub best_cost: f64,
    pub best_x: Vec<f64>,
    pub best_iteration: usize,
    pub best_dual: f64,
    pub final_cost: f64,
    pub final_state: DualState,
    pub grad_bound: f64,
    pub max_grad_norm_sq: f64,
    /// Iterations whose squared super-gradient norm exceeded `grad_bound`.
    pub bound_violations: usize,
}

impl ConvergenceReport {
    pub fn duality_gap(&self) -> f64 {
        self.best_cost - self.best_dual
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualOptions {
    pub policy: StepSizePolicy,
    pub max_iters: usize,
    /// Stop once the best primal cost improves by less than this over
    /// [`STOP_WINDOW`] iterations. Zero disables the rule.
    pub stop_tol: f64,
    /// Keep the full per-iteration trajectory.
    pub record: bool,
}

impl DualOptions {
    pub fn new(policy: StepSizePolicy, max_iters: usize, stop_tol: f64) -> Self {
        Self { policy, max_iters, stop_tol, record: true }
    }
}

/// Shared bookkeeping for the centralized and the distributed iteration.
pub(crate) struct ReportBuilder<'a> {
    instance: &'a SystemInstance,
    alpha: f64,
    stop_tol: f64,
    record: bool,
    records: Vec<IterationRecord>,
    best_history: Vec<f64>,
    best_cost: f64,
    best_x: Vec<f64>,
    best_iteration: usize,
    best_dual: f64,
    last_cost: f64,
    grad_bound: f64,
    max_grad_norm_sq: f64,
    bound_violations: usize,
}

impl<'a> ReportBuilder<'a> {
    pub(crate) fn new(instance: &'a SystemInstance, alpha: f64, stop_tol: f64, record: bool) -> Self {
        Self {
            instance,
            alpha,
            stop_tol,
            record,
            records: Vec::new(),
            best_history: Vec::new(),
            best_cost: f64::INFINITY,
            best_x: vec![0.0; instance.n()],
            best_iteration: 0,
            best_dual: f64::NEG_INFINITY,
            last_cost: f64::INFINITY,
            grad_bound: supergradient_norm_bound(instance.a_max(), instance.t_max(), instance.n()),
            max_grad_norm_sq: 0.0,
            bound_violations: 0,
        }
    }

    /// Records iteration `k` and reports whether the stopping rule fired.
    pub(crate) fn push(&mut self, k: usize, mu: &[f64], response: &PrimalResponse, s_obs: &[f64], mu_next: &[f64]) -> bool {
        let cost = total_cost_unchecked(self.instance, &response.x, s_obs);
        let dual_obj = dual_objective(self.instance, mu, response);
        let grad_norm_sq: f64 = s_obs.iter().zip(&response.s).map(|(o, s)| (o - s) * (o - s)).sum();

        // the bound is exact in real arithmetic; leave room for rounding only
        if grad_norm_sq > self.grad_bound * (1.0 + 1e-12) {
            self.bound_violations += 1;
        }
        self.max_grad_norm_sq = self.max_grad_norm_sq.max(grad_norm_sq);
        if cost < self.best_cost {
            self.best_cost = cost;
            self.best_x.clone_from(&response.x);
            self.best_iteration = k;
        }
        self.best_dual = self.best_dual.max(dual_obj);
        self.last_cost = cost;
        self.best_history.push(self.best_cost);

        if self.record {
            self.records.push(IterationRecord {
                k,
                cost,
                dual_obj,
                grad_norm_sq,
                gap: self.best_cost - self.best_dual,
                mu: mu.to_vec(),
                x: response.x.clone(),
                s: response.s.clone(),
                s_obs: s_obs.to_vec(),
            });
        }

        if mu == mu_next {
            return true;
        }
        let h = &self.best_history;
        if self.stop_tol > 0.0 && h.len() > STOP_WINDOW {
            let then = h[h.len() - 1 - STOP_WINDOW];
            let now = h[h.len() - 1];
            if then.is_finite() && then - now < self.stop_tol {
                return true;
            }
        }
        false
    }

    pub(crate) fn finish(self, final_state: DualState, converged: bool) -> ConvergenceReport {
        ConvergenceReport {
            alpha: self.alpha,
            iterations: final_state.k,
            converged,
            records: self.records,
            best_cost: self.best_cost,
            best_x: self.best_x,
            best_iteration: self.best_iteration,
            best_dual: self.best_dual,
            final_cost: self.last_cost,
            final_state,
            grad_bound: self.grad_bound,
            max_grad_norm_sq: self.max_grad_norm_sq,
            bound_violations: self.bound_violations,
        }
    }
}

/// Runs the centralized dual iteration (exact coupling factors).
pub fn run_dual(
    instance: &SystemInstance,
    policy: StepSizePolicy,
    max_iters: usize,
    stop_tol: f64,
) -> Result<ConvergenceReport, DualError> {
    run_dual_with(instance, &DualOptions::new(policy, max_iters, stop_tol))
}

pub fn run_dual_with(instance: &SystemInstance, options: &DualOptions) -> Result<ConvergenceReport, DualError> {
    let n = instance.n();
    let alpha = options.policy.alpha(instance)?;
    let mut builder = ReportBuilder::new(instance, alpha, options.stop_tol, options.record);
    let mut state = DualState::cold(n);
    let mut s_obs = vec![0.0; n];
    let mut converged = false;
    while state.k < options.max_iters {
        let response = primal_response(instance, &state.mu)?;
        load_map_into(&instance.correlation, &instance.arrivals, &response.x, &mut s_obs);
        let mu_next: Vec<f64> = (0..n).map(|i| price_update(state.mu[i], alpha, s_obs[i], response.s[i])).collect();
        let stop = builder.push(state.k, &state.mu, &response, &s_obs, &mu_next);
        state = DualState { mu: mu_next, k: state.k + 1, x: response.x, s: response.s, s_obs: s_obs.clone() };
        if stop {
            converged = true;
            break;
        }
    }
    Ok(builder.finish(state, converged))
}

/// Search strategy for [`reference_optimum`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceMode {
    /// Lattice `{0, step, 2·step, …, 1}^N` with `S` induced by the load map.
    Grid { step: f64 },
    /// Projected gradient descent with backtracking on `W(x, load_map(x))`.
    ProjectedGradient { max_iters: usize, tol: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOptimum {
    pub x: Vec<f64>,
    pub cost: f64,
}

const GRID_BUDGET: f64 = 5e9;

/// Centralized solution of the primal problem, used as ground truth.
///
/// At an optimum the load constraint is tight, so the search runs over `x`
/// alone with `S = load_map(x)`.
pub fn reference_optimum(instance: &SystemInstance, mode: ReferenceMode) -> Result<ReferenceOptimum, DualError> {
    let mut opt = match mode {
        ReferenceMode::Grid { step } => grid_optimum(instance, step)?,
        ReferenceMode::ProjectedGradient { max_iters, tol } => projected_gradient_optimum(instance, max_iters, tol)?,
    };
    // a node without arrivals affects neither cost nor load; report it as
    // redirecting everything, like the subproblem solver does
    for (x, &a) in opt.x.iter_mut().zip(instance.arrivals.iter()) {
        if a == 0.0 {
            *x = 1.0;
        }
    }
    Ok(opt)
}

/// Lattice minimum of `W`. The first `N-1` coordinates are enumerated
/// exhaustively (lexicographic order). Along the last coordinate `W` is a
/// convex sequence whose finite part is a prefix, so its lattice minimum is
/// located exactly by a discrete ternary search. Ties go to the lowest
/// lexicographic point.
fn grid_optimum(instance: &SystemInstance, step: f64) -> Result<ReferenceOptimum, DualError> {
    let n = instance.n();
    if !(step > 0.0 && step <= 1.0) {
        return Err(DualError::NonPositiveInput { epsilon: step, a_max: instance.a_max(), t_max: instance.t_max(), n });
    }
    let m = (1.0 / step).round().max(1.0) as usize;
    let points = ((m + 1) as f64).powi(n as i32 - 1);
    if points > GRID_BUDGET {
        return Err(DualError::GridTooLarge { points });
    }
    let c = &instance.correlation;
    let a = &instance.arrivals;
    let cap = &instance.capacities;
    let level = |t: usize| t as f64 / m as f64;

    // offload cost of node j at lattice level t
    let h: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..=m).map(|t| offload_cost_unchecked(instance.costs.offload(j), a[j], level(t))).collect())
        .collect();
    let last = n - 1;
    let last_col: Vec<f64> = (0..n).map(|i| c.get(last, i) * a[last]).collect();

    let mut idx = vec![0usize; last];
    let mut base = vec![0.0; n];
    let mut best: Option<(f64, Vec<usize>)> = None;

    loop {
        base.iter_mut().for_each(|v| *v = 0.0);
        let mut h_outer = 0.0;
        for (j, &t) in idx.iter().enumerate() {
            let routed = a[j] * level(t);
            for (i, b) in base.iter_mut().enumerate() {
                *b += c.get(j, i) * routed;
            }
            h_outer += h[j][t];
        }
        let feasible = |t: usize| (0..n).all(|i| base[i] + last_col[i] * level(t) < cap[i]);
        if feasible(0) {
            // largest feasible level along the last coordinate
            let (mut lo, mut hi) = (0usize, m);
            if !feasible(hi) {
                while hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    if feasible(mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi = lo;
            }
            let f = |t: usize| -> f64 {
                let lt = level(t);
                let mut total = h_outer + h[last][t];
                for i in 0..n {
                    total += proxy_cost_unchecked(instance.costs.eta[i], cap[i], base[i] + last_col[i] * lt);
                }
                total
            };
            let (mut lo, mut hi) = (0usize, hi);
            while hi - lo > 2 {
                let m1 = lo + (hi - lo) / 3;
                let m2 = hi - (hi - lo) / 3;
                if f(m1) <= f(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            let (t_best, cost) = (lo..=hi).map(|t| (t, f(t))).fold((lo, f64::INFINITY), |acc, (t, v)| {
                if v < acc.1 {
                    (t, v)
                } else {
                    acc
                }
            });
            if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                let mut point = idx.clone();
                point.push(t_best);
                best = Some((cost, point));
            }
        }

        // odometer over the outer coordinates, last outer coordinate fastest
        let mut pos = last;
        loop {
            if pos == 0 {
                let (cost, point) = best.ok_or(DualError::InfeasibleEverywhere)?;
                if !cost.is_finite() {
                    return Err(DualError::InfeasibleEverywhere);
                }
                return Ok(ReferenceOptimum { x: point.into_iter().map(level).collect(), cost });
            }
            pos -= 1;
            if idx[pos] < m {
                idx[pos] += 1;
                idx[pos + 1..].iter_mut().for_each(|v| *v = 0);
                break;
            }
        }
    }
}

fn objective(instance: &SystemInstance, x: &[f64], s: &mut [f64]) -> f64 {
    load_map_into(&instance.correlation, &instance.arrivals, x, s);
    total_cost_unchecked(instance, x, s)
}

fn projected_gradient_optimum(instance: &SystemInstance, max_iters: usize, tol: f64) -> Result<ReferenceOptimum, DualError> {
    let n = instance.n();
    let c = &instance.correlation;
    let a = &instance.arrivals;
    let mut s = vec![0.0; n];
    let mut x = vec![0.0; n];
    let mut cost = objective(instance, &x, &mut s);
    if !cost.is_finite() {
        return Err(DualError::InfeasibleEverywhere);
    }
    let mut step = 1.0;
    let mut trial = vec![0.0; n];
    let mut trial_s = vec![0.0; n];
    for _ in 0..max_iters {
        let gs: Vec<f64> = (0..n).map(|i| proxy_cost_derivative(instance.costs.eta[i], instance.capacities[i], s[i])).collect();
        let grad: Vec<f64> = (0..n)
            .map(|j| {
                let through_load: f64 = (0..n).map(|i| gs[i] * c.get(j, i)).sum::<f64>() * a[j];
                through_load + offload_cost_derivative(instance.costs.offload(j), a[j], x[j])
            })
            .collect();
        let mut accepted = false;
        while step > 1e-16 {
            for j in 0..n {
                trial[j] = (x[j] - step * grad[j]).clamp(0.0, 1.0);
            }
            let trial_cost = objective(instance, &trial, &mut trial_s);
            let lin: f64 = (0..n).map(|j| grad[j] * (trial[j] - x[j])).sum();
            let quad: f64 = (0..n).map(|j| (trial[j] - x[j]).powi(2)).sum::<f64>() / (2.0 * step);
            if trial_cost <= cost + lin + quad {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        let moved = (0..n).map(|j| (trial[j] - x[j]).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut x, &mut trial);
        std::mem::swap(&mut s, &mut trial_s);
        cost = objective(instance, &x, &mut s);
        step *= 2.0;
        if moved < tol {
            break;
        }
    }
    // coordinate polish: the objective is separable enough that a few sweeps
    // of exact 1-D minimization clean up the active-set boundary
    for _ in 0..3 {
        for j in 0..n {
            let f = |v: f64| {
                let mut y = x.clone();
                y[j] = v;
                let mut buf = vec![0.0; n];
                objective(instance, &y, &mut buf)
            };
            if let Ok(v) = minimize_scalar_convex(f, 0.0, 1.0, 1e-12) {
                let candidate = f(v);
                if candidate < cost {
                    x[j] = v;
                    cost = candidate;
                }
            }
        }
    }
    Ok(ReferenceOptimum { x, cost })
}
