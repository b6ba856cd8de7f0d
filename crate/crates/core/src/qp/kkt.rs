use serde::{Deserialize, Serialize};

use super::{PrimalDualSolution, QpError, QuadraticProgram};

/// ∞-norm KKT residuals of a candidate primal-dual pair.
///
/// `complementarity` also absorbs dual-sign violations and is measured per
/// row relative to `1 + |rhs|`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_eq: f64,
    pub primal_ineq: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub residuals: KktResiduals,
    pub tolerance: f64,
    pub passed: bool,
}

/// Evaluates the KKT conditions of `problem` at `candidate`.
///
/// Pure; the candidate's own `kkt_residuals` and `status` fields are ignored.
pub fn check_kkt(
    problem: &QuadraticProgram,
    candidate: &PrimalDualSolution,
    tol: f64,
) -> Result<KktReport, QpError> {
    let n = problem.num_variables();
    if candidate.primal.len() != n
        || candidate.bound_duals.len() != n
        || candidate.eq_duals.len() != problem.eq_rhs.len()
        || candidate.ineq_duals.len() != problem.ineq_rhs.len()
    {
        return Err(QpError::Dimension(
            "candidate does not match problem dimensions".into(),
        ));
    }
    let residuals = residuals(problem, candidate);
    Ok(KktReport {
        residuals,
        tolerance: tol,
        passed: residuals.max() <= tol,
    })
}

pub(crate) fn residuals(problem: &QuadraticProgram, s: &PrimalDualSolution) -> KktResiduals {
    let x = &s.primal;

    let mut grad = problem.objective_matrix.mul_vec(x);
    for (g, c) in grad.iter_mut().zip(&problem.objective_vector) {
        *g += c;
    }
    let eq_t = problem.eq_matrix.tr_mul_vec(&s.eq_duals);
    let in_t = problem.ineq_matrix.tr_mul_vec(&s.ineq_duals);
    let stationarity = (0..x.len())
        .map(|j| (grad[j] + eq_t[j] + in_t[j] + s.bound_duals[j]).abs())
        .fold(0.0, f64::max);

    let ax = problem.eq_matrix.mul_vec(x);
    let primal_eq = ax
        .iter()
        .zip(&problem.eq_rhs)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let gx = problem.ineq_matrix.mul_vec(x);
    let mut primal_ineq: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for ((g, &b), &pi) in gx.iter().zip(&problem.ineq_rhs).zip(&s.ineq_duals) {
        let slack = b - g;
        primal_ineq = primal_ineq.max(-slack);
        complementarity = complementarity.max(-pi);
        if pi != 0.0 {
            let cs = if b.is_finite() {
                (pi * slack).abs() / (1.0 + b.abs())
            } else {
                f64::INFINITY
            };
            complementarity = complementarity.max(cs);
        }
    }
    for j in 0..x.len() {
        let (lo, hi, z) = (problem.lower[j], problem.upper[j], s.bound_duals[j]);
        primal_ineq = primal_ineq.max(lo - x[j]).max(x[j] - hi);
        if z > 0.0 {
            let cs = if hi.is_finite() {
                (z * (hi - x[j])).abs() / (1.0 + hi.abs())
            } else {
                f64::INFINITY
            };
            complementarity = complementarity.max(cs);
        } else if z < 0.0 {
            let cs = if lo.is_finite() {
                (z * (x[j] - lo)).abs() / (1.0 + lo.abs())
            } else {
                f64::INFINITY
            };
            complementarity = complementarity.max(cs);
        }
    }

    KktResiduals {
        stationarity,
        primal_eq,
        primal_ineq: primal_ineq.max(0.0),
        complementarity,
    }
}
