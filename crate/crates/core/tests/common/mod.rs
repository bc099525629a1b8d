#![allow(dead_code)]

use anycast_core::{ArrivalRates, CapacityVector, CorrelationMatrix, CostParams, SystemInstance};
use rand::Rng;

pub const CAPACITY: f64 = 0.7;

/// The two-node instance where node 1 cannot shed its overload:
/// `C = [[0.1, 0.9], [0.5, 0.5]]`, `A = (1, 1)`, `T = 0.7`, `d = 0.5`.
pub fn weak_node() -> SystemInstance {
    let c = CorrelationMatrix::new(vec![vec![0.1, 0.9], vec![0.5, 0.5]], 1e-12).unwrap();
    instance(c, vec![1.0, 1.0], vec![0.5, 0.5])
}

pub fn instance(c: CorrelationMatrix, a: Vec<f64>, d: Vec<f64>) -> SystemInstance {
    let n = c.n();
    SystemInstance::new(c, ArrivalRates::new(a).unwrap(), CapacityVector::uniform(n, CAPACITY).unwrap(), CostParams::standard(d))
        .unwrap()
}

/// Row-stochastic matrix with every entry at least `floor / n`.
pub fn dense_correlation<R: Rng>(rng: &mut R, n: usize, floor: f64) -> CorrelationMatrix {
    let rows = (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let sum: f64 = raw.iter().sum();
            let mut row: Vec<f64> = raw.iter().map(|v| floor / n as f64 + (1.0 - floor) * v / sum).collect();
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
            row
        })
        .collect();
    CorrelationMatrix::new(rows, 1e-9).unwrap()
}

/// Row-stochastic matrix with a random sparsity pattern; diagonals stay positive.
pub fn sparse_correlation<R: Rng>(rng: &mut R, n: usize) -> CorrelationMatrix {
    let rows = (0..n)
        .map(|i| {
            let mut row: Vec<f64> =
                (0..n).map(|j| if j == i || rng.random_bool(0.5) { rng.random_range(0.05..1.0) } else { 0.0 }).collect();
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
            row
        })
        .collect();
    CorrelationMatrix::new(rows, 1e-9).unwrap()
}

/// Random instance with dense `C`, `A ~ U[a_lo, a_hi]` and `d ~ U[0, 1]`.
pub fn random_instance<R: Rng>(rng: &mut R, n: usize, a_lo: f64, a_hi: f64) -> SystemInstance {
    let c = dense_correlation(rng, n, 0.1);
    let a = (0..n).map(|_| rng.random_range(a_lo..=a_hi)).collect();
    let d = (0..n).map(|_| rng.random::<f64>()).collect();
    instance(c, a, d)
}

pub fn interior_start<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.01..0.99)).collect()
}

/// `S_i = Σ_j C[j][i]·A_j·x_j`, written out independently of the library.
pub fn load(c: &CorrelationMatrix, a: &[f64], x: &[f64]) -> Vec<f64> {
    let n = c.n();
    (0..n).map(|i| (0..n).map(|j| c.get(j, i) * a[j] * x[j]).sum()).collect()
}

/// Greedy vector field `-b·x(1-x)(S-T)` evaluated from scratch.
pub fn field(inst: &SystemInstance, beta_sens: f64, x: &[f64]) -> Vec<f64> {
    let s = load(&inst.correlation, &inst.arrivals, x);
    (0..inst.n()).map(|i| -beta_sens * x[i] * (1.0 - x[i]) * (s[i] - inst.capacities[i])).collect()
}

/// `W(x, load(x))` from the cost definitions, `+inf` at or beyond capacity.
pub fn primal_cost(inst: &SystemInstance, x: &[f64]) -> f64 {
    let s = load(&inst.correlation, &inst.arrivals, x);
    let p = &inst.costs;
    let mut total = 0.0;
    for i in 0..inst.n() {
        let t = inst.capacities[i];
        if s[i] >= t {
            return f64::INFINITY;
        }
        let a = inst.arrivals[i];
        let off = a * (1.0 - x[i]);
        total += p.eta[i] * s[i] / (1.0 - s[i] / t);
        total += p.theta[i] * off * (p.d[i] + p.gamma_cost[i] * off);
    }
    total
}

/// Plain golden-section search on `[lo, hi]` with endpoint comparison.
pub fn golden_min(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    while b - a > tol {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if f(c) <= f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let mid = 0.5 * (a + b);
    [lo, mid, hi].into_iter().fold(mid, |best, v| if f(v) < f(best) { v } else { best })
}
