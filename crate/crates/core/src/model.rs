//! Static system model: correlation matrix, arrivals, capacities and the
//! anycast load map `S = Cᵀ·diag(A)·x`.

use std::ops::Deref;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostParams;

/// Row-sum tolerance used when validating correlation matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("correlation matrix is not square (row {row} has {len} entries, expected {expected})")]
    NonSquare { row: usize, len: usize, expected: usize },
    #[error("correlation matrix is empty")]
    Empty,
    #[error("row {row} sums to {sum}, expected 1")]
    RowSumViolation { row: usize, sum: f64 },
    #[error("entry ({i}, {j}) = {value} lies outside [0, 1]")]
    NegativeEntry { i: usize, j: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("arrival rate {index} is negative or not finite: {value}")]
    InvalidArrival { index: usize, value: f64 },
    #[error("capacity {index} must be positive: {value}")]
    InvalidCapacity { index: usize, value: f64 },
    #[error("control {index} = {value} lies outside [0, 1]")]
    InvalidControl { index: usize, value: f64 },
    #[error("bad partition: {0}")]
    BadPartition(String),
    #[error("cost parameter `{name}` at node {index} is invalid: {value}")]
    InvalidCost { name: &'static str, index: usize, value: f64 },
    #[error("could not parse matrix: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Row-stochastic matrix: `C[i][j]` is the probability that a user whose DNS
/// query was answered by node `i` lands on node `j`'s proxy.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl CorrelationMatrix {
    /// Validates a raw square matrix: entries in `[0, 1]`, every row summing
    /// to one within `tol`.
    pub fn new(rows: Vec<Vec<f64>>, tol: f64) -> Result<Self, ModelError> {
        validate_correlation(&rows, tol)
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self { n, entries }
    }

    /// Two-node matrix `[[alpha, 1-alpha], [1-beta, beta]]`.
    pub fn two_node(alpha: f64, beta: f64) -> Result<Self, ModelError> {
        Self::new(vec![vec![alpha, 1.0 - alpha], vec![1.0 - beta, beta]], ROW_SUM_TOL)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.entries.iter().all(|&c| c > 0.0)
    }

    /// Parses the plain-text matrix format: one row per line, whitespace
    /// separated decimals. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str, tol: f64) -> Result<Self, ModelError> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|e| ModelError::Parse(format!("line {}: `{tok}`: {e}", lineno + 1)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        validate_correlation(&rows, tol)
    }

    pub fn from_file(path: &Path, tol: f64) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::parse(&text, tol)
    }

    /// Plain-text rendering accepted by [`CorrelationMatrix::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Validates a raw matrix against the row-stochastic invariants.
pub fn validate_correlation(rows: &[Vec<f64>], tol: f64) -> Result<CorrelationMatrix, ModelError> {
    let n = rows.len();
    if n == 0 {
        return Err(ModelError::Empty);
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(ModelError::NonSquare { row: i, len: row.len(), expected: n });
        }
    }
    let mut entries = Vec::with_capacity(n * n);
    for (i, row) in rows.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if !(0.0..=1.0).contains(&c) {
                return Err(ModelError::NegativeEntry { i, j, value: c });
            }
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(ModelError::RowSumViolation { row: i, sum });
        }
        entries.extend_from_slice(row);
    }
    Ok(CorrelationMatrix { n, entries })
}

macro_rules! vector_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl $name {
            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }
        }
    };
}

vector_newtype!(
    /// DNS-influenced request rate per node, in normalized user-load units.
    ArrivalRates
);
vector_newtype!(
    /// Proxy processing capacities (thresholds).
    CapacityVector
);
vector_newtype!(
    /// Per-node probability of answering with the primary-layer anycast address.
    ControlVector
);
vector_newtype!(
    /// User-load arrival rate at each proxy.
    LoadVector
);

impl ArrivalRates {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        for (index, &value) in values.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(ModelError::InvalidArrival { index, value });
            }
        }
        Ok(Self(values))
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl CapacityVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        for (index, &value) in values.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(ModelError::InvalidCapacity { index, value });
            }
        }
        Ok(Self(values))
    }

    pub fn uniform(n: usize, t: f64) -> Result<Self, ModelError> {
        Self::new(vec![t; n])
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl ControlVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        for (index, &value) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(ModelError::InvalidControl { index, value });
            }
        }
        Ok(Self(values))
    }

    pub fn filled(n: usize, value: f64) -> Result<Self, ModelError> {
        Self::new(vec![value; n])
    }
}

impl LoadVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// Static problem data for one operating period.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemInstance {
    pub correlation: CorrelationMatrix,
    pub arrivals: ArrivalRates,
    pub capacities: CapacityVector,
    pub costs: CostParams,
}

impl SystemInstance {
    pub fn new(
        correlation: CorrelationMatrix,
        arrivals: ArrivalRates,
        capacities: CapacityVector,
        costs: CostParams,
    ) -> Result<Self, ModelError> {
        let n = correlation.n();
        for got in [arrivals.len(), capacities.len(), costs.len()] {
            if got != n {
                return Err(ModelError::DimensionMismatch { expected: n, got });
            }
        }
        costs.validate()?;
        Ok(Self { correlation, arrivals, capacities, costs })
    }

    pub fn n(&self) -> usize {
        self.correlation.n()
    }

    /// Total external DNS arrival rate, used as `A_max` in the super-gradient bound.
    pub fn a_max(&self) -> f64 {
        self.arrivals.total()
    }

    pub fn t_max(&self) -> f64 {
        self.capacities.max()
    }

    /// Same instance with a different arrival vector.
    pub fn with_arrivals(&self, arrivals: ArrivalRates) -> Result<Self, ModelError> {
        Self::new(self.correlation.clone(), arrivals, self.capacities.clone(), self.costs.clone())
    }

    /// `S_i = Σ_j C[j][i]·A[j]·x[j]`.
    pub fn load(&self, x: &[f64]) -> Result<LoadVector, ModelError> {
        load_map(&self.correlation, &self.arrivals, x)
    }
}

/// Anycast load map: `S[i] = Σ_j C[j][i]·A[j]·x[j]`.
pub fn load_map(c: &CorrelationMatrix, a: &[f64], x: &[f64]) -> Result<LoadVector, ModelError> {
    let n = c.n();
    for got in [a.len(), x.len()] {
        if got != n {
            return Err(ModelError::DimensionMismatch { expected: n, got });
        }
    }
    let mut s = vec![0.0; n];
    load_map_into(c, a, x, &mut s);
    Ok(LoadVector(s))
}

/// Unchecked load map writing into `out`; all slices must have length `c.n()`.
pub(crate) fn load_map_into(c: &CorrelationMatrix, a: &[f64], x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..c.n() {
        let routed = a[j] * x[j];
        if routed == 0.0 {
            continue;
        }
        for (i, s) in out.iter_mut().enumerate() {
            *s += c.get(j, i) * routed;
        }
    }
}

/// Effective self-correlations of a two-group partition:
/// `alpha = Σ_{i,j∈G1} C[i][j] / |G1|`, `beta` likewise for `G2`.
pub fn effective_self_correlation(
    c: &CorrelationMatrix,
    g1: &[usize],
    g2: &[usize],
) -> Result<(f64, f64), ModelError> {
    let n = c.n();
    if g1.is_empty() || g2.is_empty() {
        return Err(ModelError::BadPartition("groups must be nonempty".into()));
    }
    let mut seen = vec![false; n];
    for &i in g1.iter().chain(g2) {
        if i >= n {
            return Err(ModelError::BadPartition(format!("node {i} out of range")));
        }
        if seen[i] {
            return Err(ModelError::BadPartition(format!("node {i} listed twice")));
        }
        seen[i] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(ModelError::BadPartition(format!("node {missing} not covered")));
    }
    let block = |g: &[usize]| -> f64 {
        let total: f64 = g.iter().flat_map(|&i| g.iter().map(move |&j| (i, j))).map(|(i, j)| c.get(i, j)).sum();
        total / g.len() as f64
    };
    Ok((block(g1), block(g2)))
}

/// Either rows inline or a path to a plain-text matrix file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CorrelationSource {
    Inline(Vec<Vec<f64>>),
    File(PathBuf),
}

/// A value given either once for every node or per node.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Broadcast {
    Scalar(f64),
    PerNode(Vec<f64>),
}

impl Broadcast {
    pub fn expand(&self, n: usize) -> Result<Vec<f64>, ModelError> {
        match self {
            Broadcast::Scalar(v) => Ok(vec![*v; n]),
            Broadcast::PerNode(v) if v.len() == n => Ok(v.clone()),
            Broadcast::PerNode(v) => Err(ModelError::DimensionMismatch { expected: n, got: v.len() }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostSection {
    pub eta: Broadcast,
    pub theta: Broadcast,
    pub d: Broadcast,
    pub gamma_cost: Broadcast,
}

/// JSON instance file: `{"correlation": ..., "arrivals": ..., "capacities": ..., "costs": {...}}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceFile {
    pub correlation: CorrelationSource,
    pub arrivals: Broadcast,
    pub capacities: Broadcast,
    pub costs: CostSection,
}

impl InstanceFile {
    /// Resolves into a validated instance. Relative matrix paths are taken
    /// relative to `base_dir`.
    pub fn resolve(&self, base_dir: Option<&Path>) -> Result<SystemInstance, ModelError> {
        let correlation = match &self.correlation {
            CorrelationSource::Inline(rows) => validate_correlation(rows, ROW_SUM_TOL)?,
            CorrelationSource::File(path) => {
                let path = match base_dir {
                    Some(base) if path.is_relative() => base.join(path),
                    _ => path.clone(),
                };
                CorrelationMatrix::from_file(&path, ROW_SUM_TOL)?
            }
        };
        let n = correlation.n();
        let costs = CostParams {
            eta: self.costs.eta.expand(n)?,
            theta: self.costs.theta.expand(n)?,
            d: self.costs.d.expand(n)?,
            gamma_cost: self.costs.gamma_cost.expand(n)?,
        };
        SystemInstance::new(
            correlation,
            ArrivalRates::new(self.arrivals.expand(n)?)?,
            CapacityVector::new(self.capacities.expand(n)?)?,
            costs,
        )
    }

    pub fn from_instance(instance: &SystemInstance) -> Self {
        Self {
            correlation: CorrelationSource::Inline(instance.correlation.rows()),
            arrivals: Broadcast::PerNode(instance.arrivals.to_vec()),
            capacities: Broadcast::PerNode(instance.capacities.to_vec()),
            costs: CostSection {
                eta: Broadcast::PerNode(instance.costs.eta.clone()),
                theta: Broadcast::PerNode(instance.costs.theta.clone()),
                d: Broadcast::PerNode(instance.costs.d.clone()),
                gamma_cost: Broadcast::PerNode(instance.costs.gamma_cost.clone()),
            },
        }
    }

    pub fn load(path: &Path) -> Result<SystemInstance, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let file: InstanceFile = serde_json::from_str(&text).map_err(|e| ModelError::Parse(e.to_string()))?;
        file.resolve(path.parent())
    }
}
