//! Dynamic operating envelopes: splitting each grid bound `ν(t)` into
//! per-prosumer shares `w_i(t)` with `Σ_i w_i(t) = ν(t)`.
//!
//! Each step is sized independently by the convex QP
//!
//! ```text
//!     maximize   Σ_i p_i − ε ‖w − Ē‖²
//!     subject to g_it(p_i, q_i) ≤ w_i,   Σ_i w_i = ν(t),   w ≥ 0,
//!                0 ≤ p_i ≤ p̄_i,   q_i within inverter limits
//! ```
//!
//! in per-unit, where `Ē = ν(t)/N`. Only `w` is kept.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{ConstraintSet, GridError};
use crate::prosumer::ProsumerSpec;
use crate::qp::{solve_qp, QpBuilder, QpError, SolveStatus, SolverConfig};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const MEMBERSHIP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DoeError {
    #[error("epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("constraint set has no rows or no prosumers")]
    Empty,
    #[error("expected {expected} inverter limit entries, got {got}")]
    Limits { expected: usize, got: usize },
    #[error("grid bound at step {t} excludes zero injection")]
    Infeasible { t: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InverterLimits {
    pub p_lower: f64,
    pub p_upper: f64,
    pub q_lower: f64,
    pub q_upper: f64,
}

impl From<&ProsumerSpec> for InverterLimits {
    fn from(s: &ProsumerSpec) -> Self {
        Self {
            p_lower: s.p_lower,
            p_upper: s.p_upper,
            q_lower: s.q_lower,
            q_upper: s.q_upper,
        }
    }
}

/// Envelope shares, stored per step as an M × N matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DoeAllocation {
    shares: Vec<DMatrix<f64>>,
    /// `Ē` per row and step (M × T); identical for every prosumer.
    pub equality_index: DMatrix<f64>,
    pub epsilon: f64,
}

impl DoeAllocation {
    /// Equal split `w_i(t) = ν(t)/N`.
    pub fn equal_split(cs: &ConstraintSet) -> Self {
        let n = cs.num_prosumers().max(1) as f64;
        let index = cs.bounds() / n;
        let shares = (0..cs.horizon())
            .map(|t| DMatrix::from_fn(cs.num_rows(), cs.num_prosumers(), |r, _| index[(r, t)]))
            .collect();
        Self {
            shares,
            equality_index: index,
            epsilon: 0.0,
        }
    }

    /// Wraps explicit shares, one M × N matrix per step.
    pub fn from_shares(
        shares: Vec<DMatrix<f64>>,
        cs: &ConstraintSet,
        epsilon: f64,
    ) -> Result<Self, DoeError> {
        if shares.len() != cs.horizon()
            || shares
                .iter()
                .any(|s| s.shape() != (cs.num_rows(), cs.num_prosumers()))
        {
            return Err(
                GridError::Dimension("shares must be T matrices of size M×N".into()).into(),
            );
        }
        let n = cs.num_prosumers().max(1) as f64;
        Ok(Self {
            shares,
            equality_index: cs.bounds() / n,
            epsilon,
        })
    }

    pub fn horizon(&self) -> usize {
        self.shares.len()
    }

    pub fn num_rows(&self) -> usize {
        self.equality_index.nrows()
    }

    pub fn num_prosumers(&self) -> usize {
        self.shares.first().map_or(0, |s| s.ncols())
    }

    /// `w_i(t)`
    pub fn w(&self, i: usize, t: usize) -> Vec<f64> {
        self.shares[t].column(i).iter().copied().collect()
    }

    /// Prosumer `i`'s shares over the horizon as M × T.
    pub fn share(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.num_rows(), self.horizon(), |r, t| {
            self.shares[t][(r, i)]
        })
    }

    /// All shares at step `t` as M × N.
    pub fn step(&self, t: usize) -> &DMatrix<f64> {
        &self.shares[t]
    }

    /// Largest `|Σ_i w_i(t) − ν(t)|` over rows and steps.
    pub fn cover_residual(&self, cs: &ConstraintSet) -> f64 {
        let mut worst: f64 = 0.0;
        for t in 0..self.horizon() {
            let nu = cs.bound(t);
            for (r, &b) in nu.iter().enumerate() {
                let s: f64 = self.shares[t].row(r).iter().sum();
                worst = worst.max((s - b).abs());
            }
        }
        worst
    }

    /// Writes `prosumer,t,row,w` records.
    pub fn write_csv<W: Write>(&self, cs: &ConstraintSet, out: W) -> Result<(), DoeError> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["prosumer", "t", "row", "w"])
            .map_err(std::io::Error::from)?;
        for i in 0..self.num_prosumers() {
            for t in 0..self.horizon() {
                for r in 0..self.num_rows() {
                    wtr.write_record([
                        i.to_string(),
                        t.to_string(),
                        cs.rows[r].name.clone(),
                        self.shares[t][(r, i)].to_string(),
                    ])
                    .map_err(std::io::Error::from)?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}

fn check_index(
    alloc: &DoeAllocation,
    cs: &ConstraintSet,
    i: usize,
    t: usize,
) -> Result<(), DoeError> {
    if i >= alloc.num_prosumers() || i >= cs.num_prosumers() {
        return Err(GridError::IndexOutOfRange {
            what: "prosumer",
            index: i,
            len: alloc.num_prosumers(),
        }
        .into());
    }
    if t >= alloc.horizon() {
        return Err(GridError::IndexOutOfRange {
            what: "time step",
            index: t,
            len: alloc.horizon(),
        }
        .into());
    }
    Ok(())
}

/// Solves the sizing problem for every step (in parallel) and returns the
/// shares, projected so each step covers `ν(t)` exactly.
pub fn allocate_doe(
    cs: &ConstraintSet,
    limits: &[InverterLimits],
    epsilon: f64,
    cfg: &SolverConfig,
) -> Result<DoeAllocation, DoeError> {
    if !(epsilon > 0.0) {
        return Err(DoeError::Epsilon(epsilon));
    }
    let (rows, n) = (cs.num_rows(), cs.num_prosumers());
    if rows == 0 || n == 0 {
        return Err(DoeError::Empty);
    }
    if limits.len() != n {
        return Err(DoeError::Limits {
            expected: n,
            got: limits.len(),
        });
    }
    let base = cs.base_power_kva();
    let shares = (0..cs.horizon())
        .into_par_iter()
        .map(|t| -> Result<DMatrix<f64>, DoeError> {
            let nu = cs.bound(t);
            if nu.iter().any(|&v| v < 0.0) {
                return Err(DoeError::Infeasible { t });
            }
            let mut b = QpBuilder::new();
            let mut p = Vec::with_capacity(n);
            let mut q = Vec::with_capacity(n);
            for lim in limits {
                let hi = lim.p_upper.max(0.0);
                let lo = lim.p_lower.max(0.0).min(hi);
                let pi = b.add_variable(lo / base, hi / base);
                b.add_linear(pi, -1.0);
                p.push(pi);
                q.push(b.add_variable(lim.q_lower / base, lim.q_upper / base));
            }
            let mut w = vec![0; rows * n];
            for r in 0..rows {
                let target = nu[r] / n as f64;
                for i in 0..n {
                    let v = b.add_variable(0.0, f64::INFINITY);
                    b.add_product(v, v, epsilon);
                    b.add_linear(v, -2.0 * epsilon * target);
                    w[r * n + i] = v;
                }
            }
            for r in 0..rows {
                for i in 0..n {
                    let (cp, cq) = cs.coefficient_pu(r, i);
                    b.add_inequality(&[(p[i], cp), (q[i], cq), (w[r * n + i], -1.0)], 0.0);
                }
                let terms: Vec<(usize, f64)> = (0..n).map(|i| (w[r * n + i], 1.0)).collect();
                b.add_equality(&terms, nu[r]);
            }
            let sol = solve_qp(&b.build(), cfg)?;
            match sol.status {
                SolveStatus::Optimal => {}
                SolveStatus::Infeasible => return Err(DoeError::Infeasible { t }),
                other => return Err(QpError::NotOptimal(other).into()),
            }
            let mut share = DMatrix::from_fn(rows, n, |r, i| sol.primal[w[r * n + i]]);
            for r in 0..rows {
                let gap = (nu[r] - share.row(r).sum()) / n as f64;
                share.row_mut(r).add_scalar_mut(gap);
            }
            Ok(share)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DoeAllocation {
        shares,
        equality_index: cs.bounds() / n as f64,
        epsilon,
    })
}

/// Whether `(p, q)` (kW, kVar) lies in prosumer `i`'s envelope at step `t`.
pub fn doe_contains(
    alloc: &DoeAllocation,
    cs: &ConstraintSet,
    i: usize,
    t: usize,
    p: f64,
    q: f64,
) -> Result<bool, DoeError> {
    Ok(headroom(alloc, cs, i, t, p, q)?
        .iter()
        .all(|&h| h >= -MEMBERSHIP_TOL))
}

/// `w_i(t) − g_it(p, q)`; negative entries mean the point is outside.
pub fn headroom(
    alloc: &DoeAllocation,
    cs: &ConstraintSet,
    i: usize,
    t: usize,
    p: f64,
    q: f64,
) -> Result<Vec<f64>, DoeError> {
    check_index(alloc, cs, i, t)?;
    let g = cs.evaluate_g(i, t, p, q)?;
    Ok(alloc.w(i, t).iter().zip(&g).map(|(w, g)| w - g).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{assemble_constraints, build_sensitivities, FeederTopology, Line};
    use approx::assert_abs_diff_eq;

    fn feeder(connections: Vec<usize>) -> ConstraintSet {
        let f = FeederTopology {
            nodes: vec!["h".into(), "a".into(), "b".into()],
            head: 0,
            lines: vec![
                Line {
                    from: 0,
                    to: 1,
                    resistance_ohm: 0.5,
                    reactance_ohm: 0.3,
                },
                Line {
                    from: 1,
                    to: 2,
                    resistance_ohm: 0.8,
                    reactance_ohm: 0.2,
                },
            ],
            base_voltage_kv: 1.0,
            base_power_kva: 100.0,
            nominal_voltage_pu: 1.0,
            connections,
        };
        assemble_constraints(&build_sensitivities(&f).unwrap(), 0.95, 1.05, 2).unwrap()
    }

    fn limits(n: usize) -> Vec<InverterLimits> {
        vec![
            InverterLimits {
                p_lower: -50.0,
                p_upper: 50.0,
                q_lower: -5.0,
                q_upper: 5.0,
            };
            n
        ]
    }

    #[test]
    fn single_prosumer_gets_everything() {
        let cs = feeder(vec![2]);
        let a = allocate_doe(&cs, &limits(1), DEFAULT_EPSILON, &SolverConfig::default()).unwrap();
        for t in 0..2 {
            assert_eq!(a.w(0, t), cs.bound(t));
        }
    }

    #[test]
    fn identical_prosumers_split_evenly() {
        let cs = feeder(vec![2, 2]);
        let a = allocate_doe(&cs, &limits(2), DEFAULT_EPSILON, &SolverConfig::default()).unwrap();
        for t in 0..2 {
            for (w0, w1) in a.w(0, t).iter().zip(a.w(1, t)) {
                assert_abs_diff_eq!(*w0, w1, epsilon = 1e-7);
            }
        }
        assert!(a.cover_residual(&cs) <= 1e-12);
    }

    #[test]
    fn large_epsilon_pulls_to_equal_split() {
        let cs = feeder(vec![1, 2]);
        let a = allocate_doe(&cs, &limits(2), 1e6, &SolverConfig::default()).unwrap();
        for t in 0..2 {
            for i in 0..2 {
                for (w, e) in a.w(i, t).iter().zip(a.equality_index.column(t).iter()) {
                    // residual pull is O(1/ε)
                    assert_abs_diff_eq!(*w, *e, epsilon = 1e-5);
                }
            }
        }
    }

    #[test]
    fn membership_and_headroom() {
        let cs = feeder(vec![1, 2]);
        let a = allocate_doe(&cs, &limits(2), DEFAULT_EPSILON, &SolverConfig::default()).unwrap();
        assert!(doe_contains(&a, &cs, 1, 0, 0.0, 0.0).unwrap());
        assert_eq!(headroom(&a, &cs, 1, 0, 0.0, 0.0).unwrap(), a.w(1, 0));
        let h = headroom(&a, &cs, 0, 1, 3.0, -1.0).unwrap();
        let g = cs.evaluate_g(0, 1, 3.0, -1.0).unwrap();
        for r in 0..h.len() {
            assert_abs_diff_eq!(h[r] + g[r], a.w(0, 1)[r], epsilon = 1e-15);
        }
        assert!(doe_contains(&a, &cs, 2, 0, 0.0, 0.0).is_err());
        assert!(headroom(&a, &cs, 0, 2, 0.0, 0.0).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let cs = feeder(vec![1]);
        let cfg = SolverConfig::default();
        assert!(matches!(
            allocate_doe(&cs, &limits(1), 0.0, &cfg),
            Err(DoeError::Epsilon(_))
        ));
        assert!(matches!(
            allocate_doe(&cs, &limits(2), 1e-3, &cfg),
            Err(DoeError::Limits { .. })
        ));
        let neg = cs
            .clone()
            .with_bounds(DMatrix::from_element(4, 2, -0.1))
            .unwrap();
        assert!(matches!(
            allocate_doe(&neg, &limits(1), 1e-3, &cfg),
            Err(DoeError::Infeasible { t: 0 })
        ));
    }

    #[test]
    fn csv_layout() {
        let cs = feeder(vec![1]);
        let a = DoeAllocation::equal_split(&cs);
        let mut buf = Vec::new();
        a.write_csv(&cs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("prosumer,t,row,w"));
        assert!(lines.next().unwrap().starts_with("0,0,a:upper,"));
        assert_eq!(text.lines().count(), 1 + 2 * 4);
    }
}
