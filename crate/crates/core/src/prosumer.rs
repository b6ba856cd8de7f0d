//! Prosumer model: linear storage dynamics, box limits, concave quadratic
//! utility, net supply, and the payoff-maximizing best response at given
//! prices and envelope share.
//!
//! Decision variables per step are inputs `u(t)` (kW), injections `p(t)`
//! (kW) and `q(t)` (kVar), and headroom trades `l(t)` (one per grid row, in
//! row units). States `x(t)` (kWh) follow `x(t+1) = A x(t) + B u(t)`.
//!
//! Inside the QPs the utility is divided by an objective scale (the largest
//! utility-matrix entry) so that weights in the 1e-8 ¢ range still produce a
//! well-conditioned problem, and headroom trades are carried multiplied by
//! the grid base power so they share the magnitude of the kW variables.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::ConstraintSet;
use crate::market::MarketPrices;
use crate::qp::{
    solve_qp, PrimalDualSolution, QpBuilder, QpError, QuadraticProgram, SolveStatus, SolverConfig,
};
use crate::serde_matrix;

pub const SLATER_MARGIN: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ProsumerError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("inconsistent bounds: {0}")]
    Bounds(String),
    #[error("utility matrix {0} is not positive semidefinite")]
    NotConcave(&'static str),
    #[error("no decision satisfies the local constraints of prosumer {0}")]
    Infeasible(usize),
    #[error("negative headroom price {price} on row {row} at step {t} makes the best response unbounded")]
    UnboundedTrade { row: usize, t: usize, price: f64 },
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Concave quadratic utility, stored as the PSD weights of its negation:
/// `f(x, u) = −(u − ū)ᵀQ_u(u − ū) − (x − x̄_t)ᵀQ_x,t(x − x̄_t)` per step and
/// `φ(x) = −(x − x̄_T)ᵀQ_T(x − x̄_T)` at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticUtility {
    #[serde(with = "serde_matrix::matrix")]
    pub input_weight: DMatrix<f64>,
    pub input_target: Vec<f64>,
    /// One weight per step `t = 0..T`, applied to `x(t)`.
    #[serde(with = "serde_matrix::matrices")]
    pub state_weights: Vec<DMatrix<f64>>,
    pub state_targets: Vec<Vec<f64>>,
    #[serde(with = "serde_matrix::matrix")]
    pub terminal_weight: DMatrix<f64>,
    pub terminal_target: Vec<f64>,
}

fn quad(w: &DMatrix<f64>, v: &[f64], target: &[f64]) -> f64 {
    let d = DVector::from_iterator(v.len(), v.iter().zip(target).map(|(a, b)| a - b));
    d.dot(&(w * &d))
}

impl QuadraticUtility {
    /// Largest absolute weight entry (1 for an all-zero utility).
    pub fn scale(&self) -> f64 {
        let m = self
            .state_weights
            .iter()
            .chain([&self.input_weight, &self.terminal_weight])
            .flat_map(|w| w.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if m > 0.0 {
            m
        } else {
            1.0
        }
    }

    /// `Σ_t f(x(t), u(t)) + φ(x(T))` in ¢. `x` is n × (T+1), `u` is m × T.
    pub fn value(&self, x: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
        let horizon = u.ncols();
        let col = |m: &DMatrix<f64>, t: usize| m.column(t).iter().copied().collect::<Vec<_>>();
        let mut total = 0.0;
        for t in 0..horizon {
            total -= quad(&self.input_weight, &col(u, t), &self.input_target);
            total -= quad(&self.state_weights[t], &col(x, t), &self.state_targets[t]);
        }
        total
            - quad(
                &self.terminal_weight,
                &col(x, horizon),
                &self.terminal_target,
            )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProsumerSpec {
    #[serde(with = "serde_matrix::matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "serde_matrix::matrix")]
    pub b: DMatrix<f64>,
    pub x0: Vec<f64>,
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    /// m × T; rows are input channels.
    #[serde(with = "serde_matrix::matrix")]
    pub u_lower: DMatrix<f64>,
    #[serde(with = "serde_matrix::matrix")]
    pub u_upper: DMatrix<f64>,
    pub p_lower: f64,
    pub p_upper: f64,
    pub q_lower: f64,
    pub q_upper: f64,
    /// Net supply `a(t)` (kW), solar minus uncontrollable load.
    pub net_supply: Vec<f64>,
    /// Consumed power `h·u(t)` (kW).
    pub h: Vec<f64>,
    pub utility: QuadraticUtility,
}

fn is_psd(w: &DMatrix<f64>) -> bool {
    if !w.is_square() {
        return false;
    }
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if (w - w.transpose())
        .iter()
        .any(|v| v.abs() > 1e-12 * scale.max(1.0))
    {
        return false;
    }
    if scale == 0.0 {
        return true;
    }
    let eig = w.clone().symmetric_eigenvalues();
    eig.iter().all(|&e| e >= -1e-12 * scale)
}

impl ProsumerSpec {
    pub fn num_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn num_inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn horizon(&self) -> usize {
        self.net_supply.len()
    }

    pub fn validate(&self) -> Result<(), ProsumerError> {
        let (n, m, t) = (self.num_states(), self.num_inputs(), self.horizon());
        let dim = |s: &str| Err(ProsumerError::Dimension(s.to_string()));
        if !self.a.is_square() || self.b.nrows() != n {
            return dim("A must be n×n and B n×m");
        }
        if self.x0.len() != n || self.x_lower.len() != n || self.x_upper.len() != n {
            return dim("state vectors");
        }
        if self.u_lower.shape() != (m, t) || self.u_upper.shape() != (m, t) {
            return dim("input bounds must be m×T");
        }
        if self.h.len() != m {
            return dim("h must have one entry per input");
        }
        let ut = &self.utility;
        if ut.input_weight.shape() != (m, m) || ut.input_target.len() != m {
            return dim("input weight");
        }
        if ut.state_weights.len() != t
            || ut.state_targets.len() != t
            || ut.state_weights.iter().any(|w| w.shape() != (n, n))
            || ut.state_targets.iter().any(|v| v.len() != n)
        {
            return dim("state weights must be T matrices n×n with T targets");
        }
        if ut.terminal_weight.shape() != (n, n) || ut.terminal_target.len() != n {
            return dim("terminal weight");
        }
        let finite = self
            .a
            .iter()
            .chain(self.b.iter())
            .chain(&self.x0)
            .chain(&self.net_supply)
            .chain(&self.h)
            .all(|x| x.is_finite());
        if !finite {
            return Err(ProsumerError::Dimension("non-finite model data".into()));
        }
        for k in 0..n {
            if !(self.x_lower[k] <= self.x0[k] && self.x0[k] <= self.x_upper[k]) {
                return Err(ProsumerError::Bounds(format!(
                    "x0[{k}] outside state bounds"
                )));
            }
        }
        if self
            .u_lower
            .iter()
            .zip(self.u_upper.iter())
            .any(|(l, u)| !(l <= u))
        {
            return Err(ProsumerError::Bounds("u_lower > u_upper".into()));
        }
        if !(self.p_lower <= self.p_upper) || !(self.q_lower <= self.q_upper) {
            return Err(ProsumerError::Bounds("inverter limits".into()));
        }
        if !is_psd(&ut.input_weight) {
            return Err(ProsumerError::NotConcave("input_weight"));
        }
        if ut.state_weights.iter().any(|w| !is_psd(w)) {
            return Err(ProsumerError::NotConcave("state_weights"));
        }
        if !is_psd(&ut.terminal_weight) {
            return Err(ProsumerError::NotConcave("terminal_weight"));
        }
        Ok(())
    }

    /// Checks that `u = 0` with `p(t) = min(0, a(t)) − margin` and `q = 0`
    /// strictly satisfies the local constraints, using the states the zero
    /// input produces.
    pub fn check_slater(&self, index: usize, margin: f64) -> Result<(), ProsumerError> {
        self.validate()?;
        let (m, t_len) = (self.num_inputs(), self.horizon());
        let zero = DMatrix::zeros(m, t_len);
        let x = simulate_dynamics(self, &zero)?;
        let inside = |lo: f64, v: f64, hi: f64| lo < v && v < hi || lo == hi && v == lo;
        for t in 0..t_len {
            for k in 0..m {
                if !inside(
                    self.u_lower[(k, t)] - margin,
                    0.0,
                    self.u_upper[(k, t)] + margin,
                ) || self.u_lower[(k, t)] > 0.0
                    || self.u_upper[(k, t)] < 0.0
                {
                    return Err(ProsumerError::Infeasible(index));
                }
            }
            let p = self.net_supply[t].min(0.0) - margin;
            if p < self.p_lower || self.q_lower > 0.0 || self.q_upper < 0.0 {
                return Err(ProsumerError::Infeasible(index));
            }
        }
        for t in 1..=t_len {
            for k in 0..self.num_states() {
                let v = x[(k, t)];
                if v < self.x_lower[k] || v > self.x_upper[k] {
                    return Err(ProsumerError::Infeasible(index));
                }
            }
        }
        Ok(())
    }
}

/// A prosumer's full trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDecision {
    /// m × T
    pub u: DMatrix<f64>,
    /// n × (T+1), column 0 is `x0`.
    pub x: DMatrix<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// M × T, in constraint-row units.
    pub l: DMatrix<f64>,
}

impl TrajectoryDecision {
    pub fn zeros(spec: &ProsumerSpec, rows: usize) -> Self {
        let t = spec.horizon();
        let u = DMatrix::zeros(spec.num_inputs(), t);
        let x = simulate_dynamics(spec, &u).expect("zero input has matching dimensions");
        Self {
            u,
            x,
            p: vec![0.0; t],
            q: vec![0.0; t],
            l: DMatrix::zeros(rows, t),
        }
    }
}

pub fn simulate_dynamics(
    spec: &ProsumerSpec,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ProsumerError> {
    let n = spec.num_states();
    if u.nrows() != spec.num_inputs()
        || spec.x0.len() != n
        || spec.a.shape() != (n, n)
        || spec.b.nrows() != n
    {
        return Err(ProsumerError::Dimension("inputs must be m×T".into()));
    }
    let horizon = u.ncols();
    let mut x = DMatrix::zeros(n, horizon + 1);
    x.set_column(0, &DVector::from_column_slice(&spec.x0));
    for t in 0..horizon {
        let next = &spec.a * x.column(t) + &spec.b * u.column(t);
        x.set_column(t + 1, &next);
    }
    Ok(x)
}

/// `Σ_t [f + λp + γq + β·l] + φ` in ¢.
pub fn evaluate_payoff(
    spec: &ProsumerSpec,
    d: &TrajectoryDecision,
    prices: &MarketPrices,
) -> Result<f64, ProsumerError> {
    let horizon = spec.horizon();
    if d.u.shape() != (spec.num_inputs(), horizon)
        || d.x.shape() != (spec.num_states(), horizon + 1)
        || d.p.len() != horizon
        || d.q.len() != horizon
        || prices.horizon() != horizon
        || d.l.shape() != prices.beta.shape()
    {
        return Err(ProsumerError::Dimension(
            "decision and prices must match the horizon".into(),
        ));
    }
    Ok(spec.utility.value(&d.x, &d.u) + trading_income(d, prices))
}

/// `Σ_t λp + γq + β·l`.
pub fn trading_income(d: &TrajectoryDecision, prices: &MarketPrices) -> f64 {
    (0..d.p.len())
        .map(|t| {
            prices.lambda[t] * d.p[t]
                + prices.gamma[t] * d.q[t]
                + prices.beta.column(t).dot(&d.l.column(t))
        })
        .sum()
}

/// Largest violation of prosumer `i`'s local constraints by `d`: dynamics,
/// boxes, supply, envelope rows `g + l ≤ w`, and the pinning of untraded
/// commodities to zero.
pub fn constraint_violation(
    spec: &ProsumerSpec,
    i: usize,
    d: &TrajectoryDecision,
    share: &DMatrix<f64>,
    cs: &ConstraintSet,
    rules: TradingRules,
) -> Result<f64, ProsumerError> {
    let (n, m, horizon, rows) = (
        spec.num_states(),
        spec.num_inputs(),
        spec.horizon(),
        cs.num_rows(),
    );
    if d.u.shape() != (m, horizon)
        || d.x.shape() != (n, horizon + 1)
        || d.p.len() != horizon
        || d.q.len() != horizon
        || d.l.shape() != (rows, horizon)
        || share.shape() != (rows, horizon)
        || i >= cs.num_prosumers()
    {
        return Err(ProsumerError::Dimension(
            "decision does not match the prosumer and grid".into(),
        ));
    }
    let mut worst: f64 = 0.0;
    let mut box_check = |lo: f64, v: f64, hi: f64| worst = worst.max(lo - v).max(v - hi);
    let x = simulate_dynamics(spec, &d.u)?;
    for t in 0..horizon {
        for k in 0..m {
            box_check(spec.u_lower[(k, t)], d.u[(k, t)], spec.u_upper[(k, t)]);
        }
        for k in 0..n {
            box_check(spec.x_lower[k], d.x[(k, t + 1)], spec.x_upper[k]);
        }
        box_check(spec.p_lower, d.p[t], spec.p_upper);
        if rules.reactive_trading {
            box_check(spec.q_lower, d.q[t], spec.q_upper);
        } else {
            box_check(0.0, d.q[t], 0.0);
        }
    }
    for t in 0..horizon {
        for k in 0..n {
            worst = worst.max((x[(k, t + 1)] - d.x[(k, t + 1)]).abs());
        }
        let used: f64 = (0..m).map(|k| spec.h[k] * d.u[(k, t)]).sum();
        worst = worst.max(d.p[t] + used - spec.net_supply[t]);
        for r in 0..rows {
            let (cp, cq) = cs.coefficient_per_kw(r, i);
            let l = if rules.limit_trading {
                d.l[(r, t)]
            } else {
                worst = worst.max(d.l[(r, t)].abs());
                0.0
            };
            worst = worst.max(cp * d.p[t] + cq * d.q[t] + l - share[(r, t)]);
        }
    }
    Ok(worst)
}

/// Which commodities besides active power may be traded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TradingRules {
    pub reactive_trading: bool,
    pub limit_trading: bool,
}

impl Default for TradingRules {
    fn default() -> Self {
        Self {
            reactive_trading: true,
            limit_trading: true,
        }
    }
}

/// How headroom trades enter a prosumer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LimitMode {
    /// `l ≡ 0`; envelope rows `g(p, q) ≤ w`.
    Off,
    /// Explicit `l` variables with rows `g(p, q) + l ≤ w`.
    Explicit,
    /// `l` set to the headroom `w − g(p, q)`, valid for nonnegative prices.
    Eliminated,
}

/// Variable and row indices of one prosumer inside a QP.
#[derive(Debug, Clone)]
pub(crate) struct BlockLayout {
    pub n: usize,
    pub m: usize,
    pub rows: usize,
    pub horizon: usize,
    pub u: Vec<usize>,
    pub x: Vec<usize>,
    pub p: Vec<usize>,
    pub q: Option<Vec<usize>>,
    /// Scaled headroom variables, row-major `t * M + r`.
    pub l: Option<Vec<usize>>,
    pub supply_rows: Vec<usize>,
    /// Envelope rows, `t * M + r`.
    pub doe_rows: Vec<usize>,
    pub mode: LimitMode,
}

/// Adds the quadratic form `(y − ȳ)ᵀW(y − ȳ) / scale` over variables `idx`,
/// dropping the constant.
fn add_weighted(b: &mut QpBuilder, idx: &[usize], w: &DMatrix<f64>, target: &[f64], scale: f64) {
    let k = idx.len();
    for a in 0..k {
        b.add_product(idx[a], idx[a], w[(a, a)] / scale);
        for c in a + 1..k {
            b.add_product(idx[a], idx[c], (w[(a, c)] + w[(c, a)]) / scale);
        }
        let lin: f64 = (0..k).map(|c| (w[(a, c)] + w[(c, a)]) * target[c]).sum();
        b.add_linear(idx[a], -lin / scale);
    }
}

/// Appends prosumer `i`'s variables, local constraints, envelope rows and
/// negated, scaled utility to `b`. `share` is `w_i` as M × T.
pub(crate) fn add_block(
    b: &mut QpBuilder,
    spec: &ProsumerSpec,
    i: usize,
    cs: &ConstraintSet,
    share: &DMatrix<f64>,
    reactive: bool,
    mode: LimitMode,
    scale: f64,
) -> BlockLayout {
    let (n, m, horizon, rows) = (
        spec.num_states(),
        spec.num_inputs(),
        spec.horizon(),
        cs.num_rows(),
    );
    let base = cs.base_power_kva();

    let mut u = Vec::with_capacity(m * horizon);
    let mut x = Vec::with_capacity(n * horizon);
    let mut p = Vec::with_capacity(horizon);
    let mut q = Vec::with_capacity(horizon);
    let mut l = Vec::new();
    for t in 0..horizon {
        for k in 0..m {
            u.push(b.add_variable(spec.u_lower[(k, t)], spec.u_upper[(k, t)]));
        }
        for k in 0..n {
            x.push(b.add_variable(spec.x_lower[k], spec.x_upper[k]));
        }
        p.push(b.add_variable(spec.p_lower, spec.p_upper));
        if reactive {
            q.push(b.add_variable(spec.q_lower, spec.q_upper));
        }
        if mode == LimitMode::Explicit {
            for _ in 0..rows {
                l.push(b.add_free_variable());
            }
        }
    }
    let ut = &spec.utility;
    let xs = |t: usize| &x[(t - 1) * n..t * n];
    for t in 0..horizon {
        add_weighted(
            b,
            &u[t * m..(t + 1) * m],
            &ut.input_weight,
            &ut.input_target,
            scale,
        );
        if t >= 1 {
            add_weighted(b, xs(t), &ut.state_weights[t], &ut.state_targets[t], scale);
        }
    }
    add_weighted(
        b,
        xs(horizon),
        &ut.terminal_weight,
        &ut.terminal_target,
        scale,
    );

    // x(t+1) − A x(t) − B u(t) = 0, with x(0) moved to the right-hand side.
    for t in 0..horizon {
        for k in 0..n {
            let mut terms = vec![(xs(t + 1)[k], 1.0)];
            let mut rhs = 0.0;
            for c in 0..n {
                let a = spec.a[(k, c)];
                if a != 0.0 {
                    if t == 0 {
                        rhs += a * spec.x0[c];
                    } else {
                        terms.push((xs(t)[c], -a));
                    }
                }
            }
            for c in 0..m {
                let bv = spec.b[(k, c)];
                if bv != 0.0 {
                    terms.push((u[t * m + c], -bv));
                }
            }
            b.add_equality(&terms, rhs);
        }
    }

    let mut supply_rows = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut terms = vec![(p[t], 1.0)];
        terms.extend(
            (0..m)
                .filter(|&k| spec.h[k] != 0.0)
                .map(|k| (u[t * m + k], spec.h[k])),
        );
        supply_rows.push(b.add_inequality(&terms, spec.net_supply[t]));
    }

    // Envelope rows multiplied by the base power: c_p p + c_q q + l' ≤ base·w.
    let mut doe_rows = Vec::new();
    if mode != LimitMode::Eliminated {
        for t in 0..horizon {
            for r in 0..rows {
                let (cp, cq) = cs.coefficient_pu(r, i);
                let mut terms = vec![(p[t], cp)];
                if reactive {
                    terms.push((q[t], cq));
                }
                if mode == LimitMode::Explicit {
                    terms.push((l[t * rows + r], 1.0));
                }
                doe_rows.push(b.add_inequality(&terms, base * share[(r, t)]));
            }
        }
    }

    BlockLayout {
        n,
        m,
        rows,
        horizon,
        u,
        x,
        p,
        q: reactive.then_some(q),
        l: (mode == LimitMode::Explicit).then_some(l),
        supply_rows,
        doe_rows,
        mode,
    }
}

impl BlockLayout {
    pub fn decode(
        &self,
        spec: &ProsumerSpec,
        i: usize,
        cs: &ConstraintSet,
        share: &DMatrix<f64>,
        primal: &[f64],
    ) -> TrajectoryDecision {
        let (n, m, horizon, rows) = (self.n, self.m, self.horizon, self.rows);
        let u = DMatrix::from_fn(m, horizon, |k, t| primal[self.u[t * m + k]]);
        let mut x = DMatrix::zeros(n, horizon + 1);
        for k in 0..n {
            x[(k, 0)] = spec.x0[k];
            for t in 1..=horizon {
                x[(k, t)] = primal[self.x[(t - 1) * n + k]];
            }
        }
        let p: Vec<f64> = self.p.iter().map(|&j| primal[j]).collect();
        let q: Vec<f64> = match &self.q {
            Some(idx) => idx.iter().map(|&j| primal[j]).collect(),
            None => vec![0.0; horizon],
        };
        let base = cs.base_power_kva();
        let l = match self.mode {
            LimitMode::Off => DMatrix::zeros(rows, horizon),
            LimitMode::Explicit => {
                let idx = self.l.as_ref().expect("explicit layout has l");
                DMatrix::from_fn(rows, horizon, |r, t| primal[idx[t * rows + r]] / base)
            }
            LimitMode::Eliminated => DMatrix::from_fn(rows, horizon, |r, t| {
                let (cp, cq) = cs.coefficient_per_kw(r, i);
                share[(r, t)] - (cp * p[t] + cq * q[t])
            }),
        };
        TrajectoryDecision { u, x, p, q, l }
    }
}

/// A best-response problem ready to solve, with its variable layout.
#[derive(Debug, Clone)]
pub struct BestResponseProblem {
    pub problem: QuadraticProgram,
    pub objective_scale: f64,
    layout: BlockLayout,
    index: usize,
}

/// Headroom prices below this (in scaled units) are treated as zero when
/// eliminating `l`; anything more negative makes the best response unbounded.
pub const HEADROOM_PRICE_TOL: f64 = 1e-9;

/// Assembles prosumer `i`'s best-response QP (negated payoff, scaled).
pub fn assemble_best_response(
    spec: &ProsumerSpec,
    i: usize,
    prices: &MarketPrices,
    share: &DMatrix<f64>,
    cs: &ConstraintSet,
    rules: TradingRules,
) -> Result<BestResponseProblem, ProsumerError> {
    spec.validate()?;
    let horizon = spec.horizon();
    let rows = cs.num_rows();
    if i >= cs.num_prosumers() || cs.horizon() != horizon {
        return Err(ProsumerError::Dimension(
            "prosumer index or horizon disagrees with the grid".into(),
        ));
    }
    if share.shape() != (rows, horizon)
        || prices.horizon() != horizon
        || prices.beta.nrows() != rows
    {
        return Err(ProsumerError::Dimension(
            "share and prices must be M×T".into(),
        ));
    }
    let scale = spec.utility.scale();
    let mode = if rules.limit_trading {
        LimitMode::Eliminated
    } else {
        LimitMode::Off
    };
    if mode == LimitMode::Eliminated {
        for t in 0..horizon {
            for r in 0..rows {
                let price = prices.beta[(r, t)];
                if price / scale < -HEADROOM_PRICE_TOL {
                    return Err(ProsumerError::UnboundedTrade { row: r, t, price });
                }
            }
        }
    }
    let mut lin = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let mut lin_p = -prices.lambda[t];
        let mut lin_q = -prices.gamma[t];
        if mode == LimitMode::Eliminated {
            // −β·(w − g) contributes +β·g.
            for r in 0..rows {
                let beta = prices.beta[(r, t)].max(0.0);
                let (cp, cq) = cs.coefficient_per_kw(r, i);
                lin_p += beta * cp;
                lin_q += beta * cq;
            }
        }
        lin.push((lin_p, lin_q));
    }
    // Large prices would otherwise swamp the utility terms' accuracy.
    let scale = lin
        .iter()
        .fold(scale, |m, &(lp, lq)| m.max(lp.abs()).max(lq.abs()));
    let mut b = QpBuilder::new();
    let layout = add_block(
        &mut b,
        spec,
        i,
        cs,
        share,
        rules.reactive_trading,
        mode,
        scale,
    );
    for (t, &(lin_p, lin_q)) in lin.iter().enumerate() {
        b.add_linear(layout.p[t], lin_p / scale);
        if let Some(q) = &layout.q {
            b.add_linear(q[t], lin_q / scale);
        }
    }
    Ok(BestResponseProblem {
        problem: b.build(),
        objective_scale: scale,
        layout,
        index: i,
    })
}

impl BestResponseProblem {
    pub fn solve(&self, cfg: &SolverConfig) -> Result<PrimalDualSolution, ProsumerError> {
        let sol = solve_qp(&self.problem, cfg)?;
        match sol.status {
            SolveStatus::Infeasible => Err(ProsumerError::Infeasible(self.index)),
            SolveStatus::Optimal => Ok(sol),
            other => Err(QpError::NotOptimal(other).into()),
        }
    }

    pub fn decode(
        &self,
        spec: &ProsumerSpec,
        cs: &ConstraintSet,
        share: &DMatrix<f64>,
        primal: &[f64],
    ) -> TrajectoryDecision {
        self.layout.decode(spec, self.index, cs, share, primal)
    }
}

/// Payoff-maximizing decision of prosumer `i` at `prices`, given its
/// envelope share `w_i` (M × T).
pub fn best_response(
    spec: &ProsumerSpec,
    i: usize,
    prices: &MarketPrices,
    share: &DMatrix<f64>,
    cs: &ConstraintSet,
    rules: TradingRules,
    cfg: &SolverConfig,
) -> Result<TrajectoryDecision, ProsumerError> {
    let brp = assemble_best_response(spec, i, prices, share, cs, rules)?;
    let sol = brp.solve(cfg)?;
    Ok(brp.decode(spec, cs, share, &sol.primal))
}
