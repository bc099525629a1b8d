use std::path::PathBuf;

use rand::seq::index::sample_weighted;
use rand::Rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::model::{CorrelationMatrix, ROW_SUM_TOL};

fn default_neighbors() -> usize {
    4
}

fn default_skew() -> f64 {
    0.8
}

/// How the correlation matrix of an experiment is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorrelationGenerator {
    Identity,
    /// Self-correlation drawn from `[diag_min, (1 + diag_min) / 2]`; the rest
    /// of each row is split evenly over `neighbors` other nodes picked with
    /// Zipf(`skew`) popularity, so a few hubs attract most foreign traffic.
    DiagonallyDominant {
        diag_min: f64,
        #[serde(default = "default_neighbors")]
        neighbors: usize,
        #[serde(default = "default_skew")]
        skew: f64,
    },
    /// Rows drawn uniformly from the probability simplex.
    UniformRowStochastic,
    /// Two groups; rows in the first keep `alpha` of their mass inside the
    /// group, rows in the second keep `beta`. For two nodes this is
    /// `[[alpha, 1-alpha], [1-beta, beta]]`.
    TwoBlock { alpha: f64, beta: f64 },
    FromFile { path: PathBuf },
    Inline { rows: Vec<Vec<f64>> },
}

fn failure(msg: impl Into<String>) -> HarnessError {
    HarnessError::GeneratorFailure(msg.into())
}

fn normalize(row: &mut [f64]) {
    let sum: f64 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl CorrelationGenerator {
    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<CorrelationMatrix, HarnessError> {
        if n == 0 {
            return Err(failure("node count must be positive"));
        }
        let rows = match self {
            Self::Identity => return Ok(CorrelationMatrix::identity(n)),
            Self::DiagonallyDominant { diag_min, neighbors, skew } => {
                if !(0.0..1.0).contains(diag_min) {
                    return Err(failure(format!("diag_min must lie in [0, 1), got {diag_min}")));
                }
                if !(*skew >= 0.0 && skew.is_finite()) {
                    return Err(failure(format!("skew must be non-negative, got {skew}")));
                }
                diagonally_dominant(n, *diag_min, *neighbors, *skew, rng)?
            }
            Self::UniformRowStochastic => (0..n)
                .map(|_| {
                    // normalized exponentials are uniform on the simplex
                    let mut row: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
                    normalize(&mut row);
                    row
                })
                .collect(),
            Self::TwoBlock { alpha, beta } => two_block(n, *alpha, *beta)?,
            Self::FromFile { path } => {
                let c = CorrelationMatrix::from_file(path, ROW_SUM_TOL)?;
                return check_size(c, n);
            }
            Self::Inline { rows } => return check_size(CorrelationMatrix::new(rows.clone(), ROW_SUM_TOL)?, n),
        };
        Ok(CorrelationMatrix::new(rows, ROW_SUM_TOL)?)
    }
}

fn check_size(c: CorrelationMatrix, n: usize) -> Result<CorrelationMatrix, HarnessError> {
    if c.n() != n {
        return Err(failure(format!("matrix has {} nodes, config says {n}", c.n())));
    }
    Ok(c)
}

fn diagonally_dominant<R: Rng + ?Sized>(
    n: usize,
    diag_min: f64,
    neighbors: usize,
    skew: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, HarnessError> {
    if n == 1 {
        return Ok(vec![vec![1.0]]);
    }
    if neighbors == 0 {
        return Err(failure("neighbors must be at least 1"));
    }
    let mut popularity: Vec<usize> = (0..n).collect();
    popularity.shuffle(rng);
    // weight of node j is rank(j)^-skew
    let mut weight = vec![0.0; n];
    for (rank, &j) in popularity.iter().enumerate() {
        weight[j] = ((rank + 1) as f64).powf(-skew);
    }
    let diag_max = 0.5 * (1.0 + diag_min);
    let k = neighbors.min(n - 1);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let picked = sample_weighted(rng, others.len(), |p| weight[others[p]], k)
            .map_err(|e| failure(format!("neighbour sampling failed: {e}")))?;
        let self_mass = rng.random_range(diag_min..=diag_max);
        let mut row = vec![0.0; n];
        row[i] = self_mass;
        for p in picked.iter() {
            row[others[p]] = (1.0 - self_mass) / k as f64;
        }
        normalize(&mut row);
        rows.push(row);
    }
    Ok(rows)
}

fn two_block(n: usize, alpha: f64, beta: f64) -> Result<Vec<Vec<f64>>, HarnessError> {
    if n < 2 {
        return Err(failure("two-block correlation needs at least two nodes"));
    }
    if !(0.0..=1.0).contains(&alpha) || !(0.0..=1.0).contains(&beta) {
        return Err(failure(format!("alpha and beta must lie in [0, 1], got {alpha}, {beta}")));
    }
    let first = n.div_ceil(2);
    let second = n - first;
    Ok((0..n)
        .map(|i| {
            let (keep, own, other) = if i < first { (alpha, first, second) } else { (beta, second, first) };
            (0..n)
                .map(|j| {
                    let same = (j < first) == (i < first);
                    if same { keep / own as f64 } else { (1.0 - keep) / other as f64 }
                })
                .collect()
        })
        .collect())
}
