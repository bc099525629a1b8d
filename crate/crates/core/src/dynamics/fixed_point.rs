use nalgebra::{DMatrix, DVector, Schur};
use serde::{Deserialize, Serialize};

use super::{jacobian, vector_field, DynamicsError};
use crate::model::SystemInstance;

/// Largest `‖F‖∞` accepted at a fixed point.
pub const FIXED_POINT_TOL: f64 = 1e-8;
const CLASSIFY_MARGIN: f64 = 1e-9;
/// Faces are enumerated exhaustively (`3^N` of them) up to this size.
const FACE_ENUMERATION_MAX: usize = 8;
const SNAP_THRESHOLDS: [f64; 3] = [1e-6, 1e-4, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Stable,
    Unstable,
    Marginal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub location: Vec<f64>,
    pub load: Vec<f64>,
    pub residual: f64,
    /// `(re, im)` pairs.
    pub eigenvalues: Vec<(f64, f64)>,
    pub classification: Classification,
}

impl FixedPointReport {
    pub fn is_interior(&self, margin: f64) -> bool {
        self.location.iter().all(|&v| v > margin && v < 1.0 - margin)
    }
}

/// Eigenvalues of a small dense matrix; closed form for `N <= 2`, Schur
/// decomposition otherwise.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<(f64, f64)>, DynamicsError> {
    match m.nrows() {
        0 => Ok(Vec::new()),
        1 => Ok(vec![(m[(0, 0)], 0.0)]),
        2 => {
            let half_tr = 0.5 * (m[(0, 0)] + m[(1, 1)]);
            let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            let disc = half_tr * half_tr - det;
            if disc >= 0.0 {
                let r = disc.sqrt();
                Ok(vec![(half_tr + r, 0.0), (half_tr - r, 0.0)])
            } else {
                let r = (-disc).sqrt();
                Ok(vec![(half_tr, r), (half_tr, -r)])
            }
        }
        _ => {
            let schur = Schur::try_new(m.clone(), 1e-10, 100_000).ok_or(DynamicsError::EigenFailure)?;
            Ok(schur.complex_eigenvalues().iter().map(|z| (z.re, z.im)).collect())
        }
    }
}

fn classify(eigs: &[(f64, f64)]) -> Classification {
    if eigs.iter().any(|&(re, _)| re > CLASSIFY_MARGIN) {
        Classification::Unstable
    } else if eigs.iter().all(|&(re, _)| re < -CLASSIFY_MARGIN) {
        Classification::Stable
    } else {
        Classification::Marginal
    }
}

pub fn classify_fixed_point(
    instance: &SystemInstance,
    x: &[f64],
    beta_sens: f64,
) -> Result<FixedPointReport, DynamicsError> {
    let f = vector_field(instance, beta_sens, x)?;
    let residual = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(residual < FIXED_POINT_TOL) {
        return Err(DynamicsError::NotAFixedPoint { residual });
    }
    let eigs = eigenvalues(&jacobian(instance, beta_sens, x)?)?;
    Ok(FixedPointReport {
        location: x.to_vec(),
        load: instance.load(x).expect("length checked").into_inner(),
        residual,
        classification: classify(&eigs),
        eigenvalues: eigs,
    })
}

/// Solves for the free components of a face: `B_ff x_f = T_f - B_fb x_b`.
/// `pattern[i]` is `Some(0.0)`/`Some(1.0)` for pinned components and `None`
/// for free ones. Returns `None` when the face system is singular or the
/// solution leaves the open unit interval.
fn solve_face(instance: &SystemInstance, pattern: &[Option<f64>]) -> Option<Vec<f64>> {
    let c = &instance.correlation;
    let a = &instance.arrivals;
    let free: Vec<usize> = (0..pattern.len()).filter(|&i| pattern[i].is_none()).collect();
    let mut x: Vec<f64> = pattern.iter().map(|p| p.unwrap_or(0.0)).collect();
    if free.is_empty() {
        return Some(x);
    }
    let m = free.len();
    let b = DMatrix::from_fn(m, m, |r, s| c.get(free[s], free[r]) * a[free[s]]);
    let rhs = DVector::from_fn(m, |r, _| {
        let i = free[r];
        let pinned: f64 = (0..pattern.len()).filter_map(|j| pattern[j].map(|v| c.get(j, i) * a[j] * v)).sum();
        instance.capacities[i] - pinned
    });
    let sol = b.lu().solve(&rhs)?;
    for (r, &i) in free.iter().enumerate() {
        let v = sol[r];
        if !(v > 0.0 && v < 1.0) {
            return None;
        }
        x[i] = v;
    }
    Some(x)
}

fn push_unique(found: &mut Vec<FixedPointReport>, report: FixedPointReport) {
    let dup = found.iter().any(|f| {
        f.location.iter().zip(&report.location).all(|(a, b)| (a - b).abs() < 1e-9)
    });
    if !dup {
        found.push(report);
    }
}

/// Fixed points with isolated locations: every face for small `N`, plus the
/// faces suggested by snapping each seed (typically integration endpoints).
pub fn find_fixed_points(instance: &SystemInstance, beta_sens: f64, seeds: &[Vec<f64>]) -> Vec<FixedPointReport> {
    let n = instance.n();
    let mut found = Vec::new();
    let try_pattern = |found: &mut Vec<FixedPointReport>, pattern: &[Option<f64>]| {
        if let Some(x) = solve_face(instance, pattern) {
            if let Ok(report) = classify_fixed_point(instance, &x, beta_sens) {
                push_unique(found, report);
            }
        }
    };
    if n <= FACE_ENUMERATION_MAX {
        let mut digits = vec![0u8; n];
        loop {
            let pattern: Vec<Option<f64>> = digits
                .iter()
                .map(|&d| match d {
                    0 => Some(0.0),
                    1 => Some(1.0),
                    _ => None,
                })
                .collect();
            try_pattern(&mut found, &pattern);
            let mut pos = 0;
            while pos < n && digits[pos] == 2 {
                digits[pos] = 0;
                pos += 1;
            }
            if pos == n {
                break;
            }
            digits[pos] += 1;
        }
    }
    for seed in seeds.iter().filter(|s| s.len() == n) {
        for &snap in &SNAP_THRESHOLDS {
            let pattern: Vec<Option<f64>> = seed
                .iter()
                .map(|&v| {
                    if v < snap {
                        Some(0.0)
                    } else if v > 1.0 - snap {
                        Some(1.0)
                    } else {
                        None
                    }
                })
                .collect();
            try_pattern(&mut found, &pattern);
        }
    }
    found
}
