//! Cost model: M/G/1-style proxy delay cost `g`, data-center offload cost `h`,
//! their per-node Lagrangian subproblem minimizers and a golden-section oracle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, SystemInstance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("negative load {0}")]
    NegativeLoad(f64),
    #[error("control {0} outside [0, 1]")]
    OutOfRangeControl(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bad interval [{lo}, {hi}] with tol {tol}")]
    BadInterval { lo: f64, hi: f64, tol: f64 },
}

/// Per-node cost parameters, stored column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Relative cost per unit latency increment at each proxy.
    pub eta: Vec<f64>,
    /// Offload-cost weight.
    pub theta: Vec<f64>,
    /// Normalized round-trip latency to the data-center.
    pub d: Vec<f64>,
    /// Congestion slope of the path to the data-center.
    pub gamma_cost: Vec<f64>,
}

/// Offload-cost parameters of a single node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffloadCostParams {
    pub theta: f64,
    pub d: f64,
    pub gamma_cost: f64,
}

impl CostParams {
    pub fn uniform(n: usize, eta: f64, theta: f64, d: f64, gamma_cost: f64) -> Self {
        Self { eta: vec![eta; n], theta: vec![theta; n], d: vec![d; n], gamma_cost: vec![gamma_cost; n] }
    }

    /// Simulation defaults: `eta = 1`, `theta = 10`, `gamma_cost = 1`, per-node latencies `d`.
    pub fn standard(d: Vec<f64>) -> Self {
        let n = d.len();
        Self { eta: vec![1.0; n], theta: vec![10.0; n], d, gamma_cost: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn offload(&self, i: usize) -> OffloadCostParams {
        OffloadCostParams { theta: self.theta[i], d: self.d[i], gamma_cost: self.gamma_cost[i] }
    }

    pub(crate) fn validate(&self) -> Result<(), ModelError> {
        let n = self.eta.len();
        for v in [&self.theta, &self.d, &self.gamma_cost] {
            if v.len() != n {
                return Err(ModelError::DimensionMismatch { expected: n, got: v.len() });
            }
        }
        let checks: [(&'static str, &Vec<f64>, bool); 4] = [
            ("eta", &self.eta, true),
            ("theta", &self.theta, true),
            ("gamma_cost", &self.gamma_cost, true),
            ("d", &self.d, false),
        ];
        for (name, values, strict) in checks {
            for (index, &value) in values.iter().enumerate() {
                let ok = value.is_finite() && if strict { value > 0.0 } else { value >= 0.0 };
                if !ok {
                    return Err(ModelError::InvalidCost { name, index, value });
                }
            }
        }
        Ok(())
    }
}

/// `g(S) = eta·S / (1 - S/T)` below capacity, `+inf` at or above it.
pub fn proxy_cost(eta: f64, capacity: f64, load: f64) -> Result<f64, CostError> {
    if load < 0.0 {
        return Err(CostError::NegativeLoad(load));
    }
    Ok(proxy_cost_unchecked(eta, capacity, load))
}

#[inline]
pub(crate) fn proxy_cost_unchecked(eta: f64, capacity: f64, load: f64) -> f64 {
    if load >= capacity {
        f64::INFINITY
    } else {
        eta * load / (1.0 - load / capacity)
    }
}

/// `g'(S) = eta / (1 - S/T)²`.
#[inline]
pub(crate) fn proxy_cost_derivative(eta: f64, capacity: f64, load: f64) -> f64 {
    if load >= capacity {
        f64::INFINITY
    } else {
        let slack = 1.0 - load / capacity;
        eta / (slack * slack)
    }
}

/// `h(x) = theta·A·(1-x)·(d + gamma_cost·A·(1-x))`.
pub fn offload_cost(params: OffloadCostParams, arrival: f64, x: f64) -> Result<f64, CostError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(CostError::OutOfRangeControl(x));
    }
    Ok(offload_cost_unchecked(params, arrival, x))
}

#[inline]
pub(crate) fn offload_cost_unchecked(p: OffloadCostParams, arrival: f64, x: f64) -> f64 {
    let offloaded = arrival * (1.0 - x);
    p.theta * offloaded * (p.d + p.gamma_cost * offloaded)
}

/// `h'(x) = -theta·A·d - 2·theta·gamma_cost·A²·(1-x)`.
#[inline]
pub(crate) fn offload_cost_derivative(p: OffloadCostParams, arrival: f64, x: f64) -> f64 {
    -p.theta * arrival * p.d - 2.0 * p.theta * p.gamma_cost * arrival * arrival * (1.0 - x)
}

/// Objective `W(x, S) = Σ g_i(S_i) + h_i(x_i)`; `+inf` if any proxy is at or above capacity.
pub fn total_cost(instance: &SystemInstance, x: &[f64], load: &[f64]) -> Result<f64, CostError> {
    let n = instance.n();
    for got in [x.len(), load.len()] {
        if got != n {
            return Err(CostError::DimensionMismatch { expected: n, got });
        }
    }
    if let Some(&bad) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(CostError::OutOfRangeControl(bad));
    }
    if let Some(&bad) = load.iter().find(|v| **v < 0.0) {
        return Err(CostError::NegativeLoad(bad));
    }
    Ok(total_cost_unchecked(instance, x, load))
}

pub(crate) fn total_cost_unchecked(instance: &SystemInstance, x: &[f64], load: &[f64]) -> f64 {
    let costs = &instance.costs;
    let mut total = 0.0;
    for i in 0..instance.n() {
        total += proxy_cost_unchecked(costs.eta[i], instance.capacities[i], load[i]);
        total += offload_cost_unchecked(costs.offload(i), instance.arrivals[i], x[i]);
    }
    total
}

/// Minimizer of `g(S) - mu·S` over `[0, T]`: `T·max(0, 1 - sqrt(eta/mu))`.
pub fn solve_sub_s(eta: f64, capacity: f64, mu: f64) -> f64 {
    if mu <= eta {
        // covers mu = 0 as well: g'(0) = eta, so no positive load pays off
        0.0
    } else {
        capacity * (1.0 - (eta / mu).sqrt())
    }
}

/// Minimizer of `h(x) + A·beta·x` over `[0, 1]`.
///
/// Stationarity of `h'(x) + A·beta = 0` gives
/// `x = 1 + (theta·d - beta) / (2·theta·gamma_cost·A)`, clamped to `[0, 1]`.
/// With no arrivals the objective is constant and `x = 1` is returned.
pub fn solve_sub_x(params: OffloadCostParams, arrival: f64, beta: f64) -> f64 {
    if arrival <= 0.0 {
        return 1.0;
    }
    let c1 = arrival * params.theta * params.gamma_cost;
    let c2 = params.theta * params.d - beta;
    if c2 > 0.0 {
        1.0
    } else {
        (1.0 + c2 / (2.0 * c1)).clamp(0.0, 1.0)
    }
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Golden-section search for the minimizer of a convex `f` on `[lo, hi]`.
///
/// `f` may return `+inf` on part of the interval (e.g. a capacity pole).
pub fn minimize_scalar_convex<F>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64, CostError>
where
    F: Fn(f64) -> f64,
{
    if !(lo < hi && tol > 0.0 && lo.is_finite() && hi.is_finite()) {
        return Err(CostError::BadInterval { lo, hi, tol });
    }
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    // the bracket may have collapsed onto an endpoint minimum
    let mut best = (mid, f(mid));
    for x in [lo, hi] {
        if (x - mid).abs() <= tol {
            let fx = f(x);
            if fx < best.1 {
                best = (x, fx);
            }
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    const P: OffloadCostParams = OffloadCostParams { theta: 10.0, d: 0.5, gamma_cost: 1.0 };

    #[test]
    fn proxy_cost_examples() {
        assert!((proxy_cost(1.0, 0.7, 0.35).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(proxy_cost(1.0, 0.7, 0.0).unwrap(), 0.0);
        assert_eq!(proxy_cost(1.0, 0.7, 0.7).unwrap(), f64::INFINITY);
        assert_eq!(proxy_cost(1.0, 0.7, 3.0).unwrap(), f64::INFINITY);
        assert_eq!(proxy_cost(1.0, 0.7, -0.1), Err(CostError::NegativeLoad(-0.1)));
    }

    #[test]
    fn offload_cost_examples() {
        assert_eq!(offload_cost(P, 1.0, 1.0).unwrap(), 0.0);
        assert!((offload_cost(P, 1.0, 0.0).unwrap() - 15.0).abs() < 1e-12);
        let p = OffloadCostParams { d: 0.0, ..P };
        assert!((offload_cost(p, 2.0, 0.5).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(offload_cost(P, 1.0, 1.5), Err(CostError::OutOfRangeControl(1.5)));
    }

    #[test]
    fn sub_s_examples() {
        assert!((solve_sub_s(1.0, 0.7, 4.0) - 0.35).abs() < 1e-15);
        assert_eq!(solve_sub_s(1.0, 0.7, 1.0), 0.0);
        assert_eq!(solve_sub_s(1.0, 0.7, 0.0), 0.0);
    }

    #[test]
    fn sub_x_examples() {
        assert_eq!(solve_sub_x(P, 1.0, 3.0), 1.0);
        assert!((solve_sub_x(P, 1.0, 7.0) - 0.9).abs() < 1e-15);
        assert_eq!(solve_sub_x(P, 1.0, 1e6), 0.0);
        assert_eq!(solve_sub_x(P, 0.0, 50.0), 1.0);
    }

    #[test]
    fn golden_section_examples() {
        let g = |s: f64| proxy_cost_unchecked(1.0, 0.7, s) - 4.0 * s;
        assert!((minimize_scalar_convex(g, 0.0, 0.7, 1e-8).unwrap() - 0.35).abs() < 1e-6);
        let q = |x: f64| (x - 0.3) * (x - 0.3);
        assert!((minimize_scalar_convex(q, 0.0, 1.0, 1e-8).unwrap() - 0.3).abs() < 1e-6);
        assert!(minimize_scalar_convex(|x| x, 0.0, 1.0, 1e-8).unwrap().abs() < 1e-6);
        assert!(matches!(
            minimize_scalar_convex(|x| x, 1.0, 0.0, 1e-8),
            Err(CostError::BadInterval { .. })
        ));
    }

    #[test]
    fn sub_s_stationarity() {
        // g'(S*) = mu at an interior solution
        for &mu in &[1.5, 4.0, 25.0, 400.0] {
            let s = solve_sub_s(1.0, 0.7, mu);
            assert!((proxy_cost_derivative(1.0, 0.7, s) - mu).abs() < 1e-9 * mu);
        }
    }
}
