//! Validated domain types shared by every module: feature sets, cost
//! matrices, marginals, transport plans, label vectors and solver
//! configuration.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating that a marginal sums to one.
pub const MARGINAL_SUM_TOL: f64 = 1e-9;

/// Tolerance used when validating unit-norm rows of a normalized set.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context} (left {left}, right {right})")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },
    #[error("shape mismatch: {context} (expected {expected:?}, got {got:?})")]
    ShapeMismatch {
        context: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("row {index} has zero norm")]
    ZeroNormRow { index: usize },
    #[error("row {index} is not unit length (norm {norm})")]
    NotUnitNorm { index: usize, norm: f64 },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("marginal entries must be nonnegative and sum to 1 (sum was {sum})")]
    InvalidMarginal { sum: f64 },
    #[error("transport plan has a negative entry at ({row}, {col})")]
    NegativePlanEntry { row: usize, col: usize },
    #[error("label vector entry {index} is not binary")]
    NonBinaryLabel { index: usize },
    #[error("no positive labels in input")]
    NoPositives,
    #[error("teacher plan entry at ({row}, {col}) is not strictly positive")]
    NonPositiveTeacherEntry { row: usize, col: usize },
    #[error(
        "regularization underflow: exp(-C/{lambda}) vanished for an entire row or column; \
         use the log-domain solver"
    )]
    RegularizationUnderflow { lambda: f64 },
    #[error("solver requires {0} in train mode")]
    MissingTrainInput(&'static str),
    #[error("marginal discretization infeasible: {0}")]
    InfeasibleDiscretization(String),
    #[error("infeasible scene spec: {0}")]
    InfeasibleSpec(String),
    #[error("nonpositive entry where a logarithm is required ({context})")]
    LogDomainViolation { context: &'static str },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error in {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

fn check_finite(m: &Array2<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// A set of d-dimensional row vectors: image regions, frozen-encoder
/// regions, or a single global feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    rows: Array2<f64>,
    l2_normalized: bool,
}

impl FeatureSet {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        Self::build(rows, false)
    }

    /// Like [`FeatureSet::new`] but additionally asserts every row has unit
    /// L2 norm within `UNIT_NORM_TOL`.
    pub fn new_normalized(rows: Array2<f64>) -> Result<Self> {
        Self::build(rows, true)
    }

    fn build(rows: Array2<f64>, l2_normalized: bool) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::EmptyInput("feature set"));
        }
        check_finite(&rows, "feature set")?;
        if l2_normalized {
            for (i, row) in rows.outer_iter().enumerate() {
                let norm = l2_norm(row);
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::NotUnitNorm { index: i, norm });
                }
            }
        }
        Ok(Self { rows, l2_normalized })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one row
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn is_l2_normalized(&self) -> bool {
        self.l2_normalized
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, k: usize) -> ArrayView1<'_, f64> {
        self.rows.row(k)
    }
}

/// A set of N d-dimensional label embeddings, the text side of matching.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    rows: Array2<f64>,
    l2_normalized: bool,
}

impl LabelSet {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        Self::build(rows, false)
    }

    pub fn new_normalized(rows: Array2<f64>) -> Result<Self> {
        Self::build(rows, true)
    }

    fn build(rows: Array2<f64>, l2_normalized: bool) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::EmptyInput("label set"));
        }
        check_finite(&rows, "label set")?;
        if l2_normalized {
            for (i, row) in rows.outer_iter().enumerate() {
                let norm = l2_norm(row);
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(Error::NotUnitNorm { index: i, norm });
                }
            }
        }
        Ok(Self { rows, l2_normalized })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn is_l2_normalized(&self) -> bool {
        self.l2_normalized
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }
}

/// M×N matrix of transport costs between regions and labels.
///
/// Construction only requires finiteness; the reversed-softmax cost keeps
/// entries in (0, 1) while a knowledge-transformed cost may leave that range.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    entries: Array2<f64>,
}

impl CostMatrix {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::EmptyInput("cost matrix"));
        }
        check_finite(&entries, "cost matrix")?;
        Ok(Self { entries })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.entries.nrows(), self.entries.ncols())
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.entries
    }
}

/// Probability vector over one side of the matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    weights: Array1<f64>,
}

impl Marginal {
    pub fn new(weights: Array1<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::EmptyInput("marginal"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("marginal"));
        }
        let sum: f64 = weights.sum();
        if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > MARGINAL_SUM_TOL {
            return Err(Error::InvalidMarginal { sum });
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyInput("marginal"));
        }
        Ok(Self {
            weights: Array1::from_elem(n, 1.0 / n as f64),
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }
}

/// Nonnegative M×N coupling between regions and labels.
///
/// Plans come from three places: a converged solver run (carries the
/// marginals it was solved under and the achieved residual), the teacher
/// construction (tagged, strictly positive, not marginal-feasible), and
/// direct construction from entries for aggregation or testing.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    entries: Array2<f64>,
    row_marginal: Option<Marginal>,
    col_marginal: Option<Marginal>,
    residual: Option<f64>,
    is_teacher: bool,
}

impl TransportPlan {
    /// Wraps raw nonnegative entries with no marginal provenance.
    pub fn from_entries(entries: Array2<f64>) -> Result<Self> {
        Self::validate_entries(&entries)?;
        Ok(Self {
            entries,
            row_marginal: None,
            col_marginal: None,
            residual: None,
            is_teacher: false,
        })
    }

    /// Wraps a solver result together with the marginals it was solved
    /// under and the residual the solver reports. The entries must satisfy
    /// both marginal constraints within that residual.
    pub fn solved(
        entries: Array2<f64>,
        row_marginal: Marginal,
        col_marginal: Marginal,
        residual: f64,
    ) -> Result<Self> {
        Self::validate_entries(&entries)?;
        if entries.nrows() != row_marginal.len() {
            return Err(Error::DimensionMismatch {
                context: "plan rows vs row marginal",
                left: entries.nrows(),
                right: row_marginal.len(),
            });
        }
        if entries.ncols() != col_marginal.len() {
            return Err(Error::DimensionMismatch {
                context: "plan cols vs col marginal",
                left: entries.ncols(),
                right: col_marginal.len(),
            });
        }
        let achieved = marginal_residual(&entries, &row_marginal, &col_marginal);
        // Allow a hair of slack over the reported residual for the
        // re-computation itself.
        if achieved > residual + 1e-12 {
            return Err(Error::InvalidParameter {
                name: "residual",
                reason: format!("reported {residual} but achieved {achieved}"),
            });
        }
        Ok(Self {
            entries,
            row_marginal: Some(row_marginal),
            col_marginal: Some(col_marginal),
            residual: Some(residual),
            is_teacher: false,
        })
    }

    /// Wraps the strictly positive teacher reference plan.
    pub fn teacher(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::EmptyInput("teacher plan"));
        }
        check_finite(&entries, "teacher plan")?;
        for ((r, c), &v) in entries.indexed_iter() {
            if v <= 0.0 {
                return Err(Error::NonPositiveTeacherEntry { row: r, col: c });
            }
        }
        Ok(Self {
            entries,
            row_marginal: None,
            col_marginal: None,
            residual: None,
            is_teacher: true,
        })
    }

    fn validate_entries(entries: &Array2<f64>) -> Result<()> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::EmptyInput("transport plan"));
        }
        check_finite(entries, "transport plan")?;
        for ((r, c), &v) in entries.indexed_iter() {
            if v < 0.0 {
                return Err(Error::NegativePlanEntry { row: r, col: c });
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.entries.nrows(), self.entries.ncols())
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn is_teacher(&self) -> bool {
        self.is_teacher
    }

    pub fn row_marginal(&self) -> Option<&Marginal> {
        self.row_marginal.as_ref()
    }

    pub fn col_marginal(&self) -> Option<&Marginal> {
        self.col_marginal.as_ref()
    }

    pub fn residual(&self) -> Option<f64> {
        self.residual
    }
}

/// Max-norm violation of both marginal constraints.
pub fn marginal_residual(plan: &Array2<f64>, u: &Marginal, v: &Marginal) -> f64 {
    let row_sums = plan.sum_axis(Axis(1));
    let col_sums = plan.sum_axis(Axis(0));
    let row_err = row_sums
        .iter()
        .zip(u.weights().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let col_err = col_sums
        .iter()
        .zip(v.weights().iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    row_err.max(col_err)
}

/// Multi-hot ground-truth label vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl LabelVector {
    pub fn new(bits: Vec<bool>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::EmptyInput("label vector"));
        }
        Ok(Self { bits })
    }

    /// Builds from 0/1 numeric entries, rejecting anything else.
    pub fn from_binary(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("label vector"));
        }
        let mut bits = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            if v == 0.0 {
                bits.push(false);
            } else if v == 1.0 {
                bits.push(true);
            } else {
                return Err(Error::NonBinaryLabel { index: i });
            }
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_positive(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn count_positives(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
}

/// Solver configuration: regularization weights, temperatures, iteration
/// budget and seed.
///
/// `lambda1` weights the entropy term, `lambda2` the knowledge term; the
/// effective Sinkhorn regularization is their sum. `tau` is the similarity
/// temperature used in cost and marginal construction, `tau_prime` the loss
/// temperature. `log_domain` switches Sinkhorn to log-space updates, useful
/// when the effective regularization drops below about 1e-2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub tau_prime: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub log_domain: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.05,
            tau: 0.01,
            tau_prime: 0.07,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
            log_domain: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0) {
            return Err(Error::InvalidParameter {
                name: "lambda1",
                reason: format!("must be > 0, got {}", self.lambda1),
            });
        }
        if !(self.lambda2 >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "lambda2",
                reason: format!("must be >= 0, got {}", self.lambda2),
            });
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter {
                name: "tau",
                reason: format!("must be > 0, got {}", self.tau),
            });
        }
        if !(self.tau_prime > 0.0) {
            return Err(Error::InvalidParameter {
                name: "tau_prime",
                reason: format!("must be > 0, got {}", self.tau_prime),
            });
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter {
                name: "max_iter",
                reason: "must be positive".into(),
            });
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter {
                name: "tol",
                reason: format!("must be > 0, got {}", self.tol),
            });
        }
        Ok(())
    }

    /// Effective entropic regularization of the transformed problem.
    pub fn lambda_tilde(&self) -> f64 {
        self.lambda1 + self.lambda2
    }
}

fn l2_norm(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Pairwise cosine similarities between two sets, entry (k, i) being
/// cos(a_k, b_i). Rejects zero-norm rows rather than emitting NaN.
pub fn cosine_similarity_matrix(a: &FeatureSet, b: &LabelSet) -> Result<Array2<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            context: "cosine similarity feature dims",
            left: a.dim(),
            right: b.dim(),
        });
    }
    let mut a_norms = Vec::with_capacity(a.len());
    for (k, row) in a.matrix().outer_iter().enumerate() {
        let n = l2_norm(row);
        if n == 0.0 {
            return Err(Error::ZeroNormRow { index: k });
        }
        a_norms.push(n);
    }
    let mut b_norms = Vec::with_capacity(b.len());
    for (i, row) in b.matrix().outer_iter().enumerate() {
        let n = l2_norm(row);
        if n == 0.0 {
            return Err(Error::ZeroNormRow { index: i });
        }
        b_norms.push(n);
    }
    let mut sims = a.matrix().dot(&b.matrix().t());
    for ((k, i), v) in sims.indexed_iter_mut() {
        *v /= a_norms[k] * b_norms[i];
        // Guard against rounding drift just past the analytic bound.
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(sims)
}

/// Row-wise softmax of `m / tau` with max-subtraction, so each row is a
/// probability vector even for extreme logits.
pub fn row_softmax(m: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter {
            name: "tau",
            reason: format!("must be > 0, got {tau}"),
        });
    }
    check_finite(m, "softmax input")?;
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / tau).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}
