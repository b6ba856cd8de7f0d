//! Convex quadratic programming with certified primal-dual solutions.
//!
//! Problems are stated in minimization form
//!
//! ```text
//!     minimize     ½ xᵀ P x + cᵀ x
//!     subject to   A_eq x  = b_eq
//!                  A_in x <= b_in
//!                  lower <= x <= upper
//! ```
//!
//! with Lagrangian `½xᵀPx + cᵀx + μᵀ(A_eq x − b_eq) + πᵀ(A_in x − b_in) + zᵀx`,
//! so stationarity reads `Px + c + A_eqᵀμ + A_inᵀπ + z = 0`. Inequality
//! multipliers `π` are nonnegative; the bound multiplier `z_j` is nonnegative
//! when `x_j` sits on its upper bound and nonpositive on its lower bound.
//!
//! Every returned multiplier vector is checked against the unregularized
//! problem by [`check_kkt`]; callers that read prices off multipliers rely on
//! that certificate.

mod kkt;
mod solver;
mod sparse;

pub use kkt::{check_kkt, KktReport, KktResiduals};
pub use solver::solve_qp;
pub use sparse::SparseMatrix;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("objective matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
    #[error("lower bound {lower} exceeds upper bound {upper} for variable {index}")]
    InvertedBounds {
        index: usize,
        lower: f64,
        upper: f64,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("solver backend rejected the problem: {0}")]
    Backend(String),
    #[error("solve ended with status {0:?}")]
    NotOptimal(SolveStatus),
}

/// Minimization-form QP. See the module docs for the sign conventions.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub objective_matrix: SparseMatrix,
    pub objective_vector: Vec<f64>,
    pub eq_matrix: SparseMatrix,
    pub eq_rhs: Vec<f64>,
    pub ineq_matrix: SparseMatrix,
    pub ineq_rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl QuadraticProgram {
    pub fn num_variables(&self) -> usize {
        self.objective_vector.len()
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.num_variables();
        let dim = |what: &str| Err(QpError::Dimension(what.to_string()));
        if self.objective_matrix.nrows() != n || self.objective_matrix.ncols() != n {
            return dim("objective matrix must be n×n");
        }
        if self.eq_matrix.ncols() != n || self.eq_matrix.nrows() != self.eq_rhs.len() {
            return dim("equality system");
        }
        if self.ineq_matrix.ncols() != n || self.ineq_matrix.nrows() != self.ineq_rhs.len() {
            return dim("inequality system");
        }
        if self.lower.len() != n || self.upper.len() != n {
            return dim("bounds");
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(self.objective_matrix.nzval()) || !finite(&self.objective_vector) {
            return Err(QpError::NonFinite("objective"));
        }
        if !finite(self.eq_matrix.nzval()) || !finite(&self.eq_rhs) {
            return Err(QpError::NonFinite("equality system"));
        }
        if !finite(self.ineq_matrix.nzval()) || self.ineq_rhs.iter().any(|v| v.is_nan()) {
            return Err(QpError::NonFinite("inequality system"));
        }
        let asym = self.objective_matrix.max_asymmetry();
        if asym > 1e-12 {
            return Err(QpError::Asymmetric(asym));
        }
        for (index, (&lower, &upper)) in self.lower.iter().zip(&self.upper).enumerate() {
            if lower.is_nan() || upper.is_nan() || lower > upper {
                return Err(QpError::InvertedBounds {
                    index,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }

    /// Objective value `½xᵀPx + cᵀx`.
    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.objective_matrix.mul_vec(x);
        0.5 * dot(x, &px) + dot(&self.objective_vector, x)
    }

    /// Same feasible set, objective multiplied by `s`.
    pub fn with_objective_scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.objective_matrix = self.objective_matrix.scaled(s);
        out.objective_vector.iter_mut().for_each(|v| *v *= s);
        out
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

/// Primal point with multipliers for every constraint family.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalDualSolution {
    pub primal: Vec<f64>,
    pub eq_duals: Vec<f64>,
    pub ineq_duals: Vec<f64>,
    /// Signed bound multipliers, positive on an active upper bound.
    pub bound_duals: Vec<f64>,
    pub status: SolveStatus,
    pub kkt_residuals: KktResiduals,
    pub iterations: u32,
}

impl PrimalDualSolution {
    pub fn into_optimal(self) -> Result<Self, QpError> {
        match self.status {
            SolveStatus::Optimal => Ok(self),
            other => Err(QpError::NotOptimal(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub kkt_tolerance: f64,
    pub max_iterations: u32,
    pub regularization_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kkt_tolerance: 1e-8,
            max_iterations: 200,
            regularization_floor: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), QpError> {
        if !(self.kkt_tolerance > 0.0) || self.max_iterations < 1 || self.regularization_floor < 0.0
        {
            return Err(QpError::Backend(format!("invalid solver config {self:?}")));
        }
        Ok(())
    }
}

/// Incremental assembly of a [`QuadraticProgram`].
///
/// Terms are accumulated as triplets; nothing is materialized until
/// [`QpBuilder::build`].
#[derive(Debug, Default, Clone)]
pub struct QpBuilder {
    lower: Vec<f64>,
    upper: Vec<f64>,
    linear: Vec<f64>,
    quadratic: Vec<(usize, usize, f64)>,
    eq: Vec<(usize, usize, f64)>,
    eq_rhs: Vec<f64>,
    ineq: Vec<(usize, usize, f64)>,
    ineq_rhs: Vec<f64>,
}

impl QpBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn num_variables(&self) -> usize {
        self.lower.len()
    }

    pub fn num_equalities(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn num_inequalities(&self) -> usize {
        self.ineq_rhs.len()
    }

    pub fn add_variable(&mut self, lower: f64, upper: f64) -> usize {
        self.lower.push(lower);
        self.upper.push(upper);
        self.linear.push(0.0);
        self.lower.len() - 1
    }

    pub fn add_free_variable(&mut self) -> usize {
        self.add_variable(f64::NEG_INFINITY, f64::INFINITY)
    }

    /// Adds `c · x_i` to the objective.
    pub fn add_linear(&mut self, i: usize, c: f64) {
        self.linear[i] += c;
    }

    /// Adds `w · x_i · x_j` to the objective.
    pub fn add_product(&mut self, i: usize, j: usize, w: f64) {
        if w == 0.0 {
            return;
        }
        if i == j {
            self.quadratic.push((i, i, 2.0 * w));
        } else {
            self.quadratic.push((i, j, w));
            self.quadratic.push((j, i, w));
        }
    }

    /// Adds the row `Σ coeff·x = rhs`, returning its index among equalities.
    pub fn add_equality(&mut self, terms: &[(usize, f64)], rhs: f64) -> usize {
        let row = self.eq_rhs.len();
        self.eq.extend(terms.iter().map(|&(j, v)| (row, j, v)));
        self.eq_rhs.push(rhs);
        row
    }

    /// Adds the row `Σ coeff·x <= rhs`, returning its index among inequalities.
    pub fn add_inequality(&mut self, terms: &[(usize, f64)], rhs: f64) -> usize {
        let row = self.ineq_rhs.len();
        self.ineq.extend(terms.iter().map(|&(j, v)| (row, j, v)));
        self.ineq_rhs.push(rhs);
        row
    }

    pub fn build(self) -> QuadraticProgram {
        let n = self.lower.len();
        QuadraticProgram {
            objective_matrix: SparseMatrix::from_triplets(n, n, &self.quadratic),
            objective_vector: self.linear,
            eq_matrix: SparseMatrix::from_triplets(self.eq_rhs.len(), n, &self.eq),
            eq_rhs: self.eq_rhs,
            ineq_matrix: SparseMatrix::from_triplets(self.ineq_rhs.len(), n, &self.ineq),
            ineq_rhs: self.ineq_rhs,
            lower: self.lower,
            upper: self.upper,
        }
    }
}
