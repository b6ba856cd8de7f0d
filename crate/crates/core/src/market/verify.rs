use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::welfare::{check_inputs, community_scale};
use super::{MarketError, MarketPrices, WelfareSolution};
use crate::doe::DoeAllocation;
use crate::grid::ConstraintSet;
use crate::prosumer::{
    best_response, constraint_violation, evaluate_payoff, ProsumerError, ProsumerSpec,
    TradingRules, TrajectoryDecision,
};
use crate::qp::SolverConfig;

/// Absolute tolerance on local-constraint violations of checked decisions.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Commodity {
    Active,
    Reactive,
    Limit,
}

/// A nonzero aggregate trade: moving its price against the aggregate makes
/// the price player's linear objective grow without bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnboundedDirection {
    pub commodity: Commodity,
    pub t: usize,
    /// Constraint row for headroom trades.
    pub row: Option<usize>,
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    /// `|payoff(best response) − payoff(allocation)|` per prosumer (¢).
    pub gaps: Vec<f64>,
    /// Gap divided by `objective_scale · (1 + |payoff| / objective_scale)`.
    pub relative_gaps: Vec<f64>,
    /// Payoff of each welfare allocation at the cleared prices (¢).
    pub payoffs: Vec<f64>,
    pub max_balance_residual: f64,
    /// Largest local-constraint violation of the checked decisions.
    pub max_infeasibility: f64,
    /// Largest aggregate trade of the independently solved best responses.
    pub response_imbalance: f64,
    pub price_player_objective: f64,
    pub unbounded_direction: Option<UnboundedDirection>,
    pub objective_scale: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `Σ_i Σ_t (−λp − γq − β·l)`.
pub fn price_player_objective(
    prices: &MarketPrices,
    decisions: &[TrajectoryDecision],
) -> Result<f64, MarketError> {
    let horizon = prices.horizon();
    let mut total = 0.0;
    for d in decisions {
        if d.p.len() != horizon || d.q.len() != horizon || d.l.shape() != prices.beta.shape() {
            return Err(MarketError::Dimension(
                "decision does not match prices".into(),
            ));
        }
        total -= crate::prosumer::trading_income(d, prices);
    }
    Ok(total)
}

fn best_responses(
    prosumers: &[ProsumerSpec],
    prices: &MarketPrices,
    cs: &ConstraintSet,
    alloc: &DoeAllocation,
    rules: TradingRules,
    cfg: &SolverConfig,
) -> Result<Vec<Option<TrajectoryDecision>>, MarketError> {
    prosumers
        .par_iter()
        .enumerate()
        .map(
            |(i, spec)| match best_response(spec, i, prices, &alloc.share(i), cs, rules, cfg) {
                Ok(d) => Ok(Some(d)),
                Err(ProsumerError::UnboundedTrade { .. }) => Ok(None),
                Err(source) => Err(MarketError::Prosumer { index: i, source }),
            },
        )
        .collect()
}

pub(super) fn best_responses_strict(
    prosumers: &[ProsumerSpec],
    prices: &MarketPrices,
    cs: &ConstraintSet,
    alloc: &DoeAllocation,
    rules: TradingRules,
    cfg: &SolverConfig,
) -> Result<Vec<TrajectoryDecision>, MarketError> {
    prosumers
        .par_iter()
        .enumerate()
        .map(|(i, spec)| {
            best_response(spec, i, prices, &alloc.share(i), cs, rules, cfg)
                .map_err(|source| MarketError::Prosumer { index: i, source })
        })
        .collect()
}

fn largest_aggregate(decisions: &[TrajectoryDecision]) -> Option<UnboundedDirection> {
    let horizon = decisions.first()?.p.len();
    let rows = decisions[0].l.nrows();
    let mut best: Option<UnboundedDirection> = None;
    let mut consider = |commodity, t, row, aggregate: f64| {
        if best.is_none_or(|b| aggregate.abs() > b.aggregate.abs()) {
            best = Some(UnboundedDirection {
                commodity,
                t,
                row,
                aggregate,
            });
        }
    };
    for t in 0..horizon {
        consider(
            Commodity::Active,
            t,
            None,
            decisions.iter().map(|d| d.p[t]).sum(),
        );
        consider(
            Commodity::Reactive,
            t,
            None,
            decisions.iter().map(|d| d.q[t]).sum(),
        );
        for r in 0..rows {
            consider(
                Commodity::Limit,
                t,
                Some(r),
                decisions.iter().map(|d| d.l[(r, t)]).sum(),
            );
        }
    }
    best
}

/// Re-solves every prosumer's best response at the cleared prices and
/// compares payoffs with the welfare allocation; also checks balance.
pub fn verify_competitive_equilibrium(
    ws: &WelfareSolution,
    prosumers: &[ProsumerSpec],
    cs: &ConstraintSet,
    alloc: &DoeAllocation,
    tol: f64,
    cfg: &SolverConfig,
) -> Result<EquilibriumReport, MarketError> {
    check_equilibrium(
        &ws.decisions,
        &ws.prices,
        ws.rules,
        prosumers,
        cs,
        alloc,
        tol,
        cfg,
    )
}

/// [`verify_competitive_equilibrium`] for decisions and prices from any
/// source, e.g. files written by an earlier run.
#[allow(clippy::too_many_arguments)]
pub fn check_equilibrium(
    decisions: &[TrajectoryDecision],
    prices: &MarketPrices,
    rules: TradingRules,
    prosumers: &[ProsumerSpec],
    cs: &ConstraintSet,
    alloc: &DoeAllocation,
    tol: f64,
    cfg: &SolverConfig,
) -> Result<EquilibriumReport, MarketError> {
    check_inputs(prosumers, cs, alloc)?;
    if decisions.len() != prosumers.len() {
        return Err(MarketError::Dimension(
            "decisions and community differ in size".into(),
        ));
    }
    if prices.horizon() != cs.horizon() || prices.num_rows() != cs.num_rows() {
        return Err(MarketError::Dimension(
            "prices do not match the constraint set".into(),
        ));
    }
    let scale = community_scale(prosumers);
    let responses = best_responses(prosumers, prices, cs, alloc, rules, cfg)?;

    let mut gaps = Vec::with_capacity(prosumers.len());
    let mut relative_gaps = Vec::with_capacity(prosumers.len());
    let mut payoffs = Vec::with_capacity(prosumers.len());
    let mut max_infeasibility: f64 = 0.0;
    for (i, spec) in prosumers.iter().enumerate() {
        let wrap = |source| MarketError::Prosumer { index: i, source };
        let own = evaluate_payoff(spec, &decisions[i], prices).map_err(wrap)?;
        max_infeasibility = max_infeasibility.max(
            constraint_violation(spec, i, &decisions[i], &alloc.share(i), cs, rules)
                .map_err(wrap)?,
        );
        let gap = match &responses[i] {
            Some(d) => (evaluate_payoff(spec, d, prices).map_err(wrap)? - own).abs(),
            None => f64::INFINITY,
        };
        payoffs.push(own);
        gaps.push(gap);
        relative_gaps.push(gap / scale / (1.0 + own.abs() / scale));
    }
    let solved: Option<Vec<TrajectoryDecision>> = responses.into_iter().collect();
    let response_imbalance = solved
        .as_deref()
        .and_then(largest_aggregate)
        .map_or(f64::INFINITY, |d| d.aggregate.abs());
    let max_balance_residual = super::BalanceResiduals::of(decisions).max();
    let passed = relative_gaps.iter().all(|&g| g <= tol)
        && max_balance_residual <= tol
        && max_infeasibility <= FEASIBILITY_TOL;
    Ok(EquilibriumReport {
        gaps,
        relative_gaps,
        payoffs,
        max_balance_residual,
        max_infeasibility,
        response_imbalance,
        price_player_objective: price_player_objective(prices, decisions)?,
        unbounded_direction: None,
        objective_scale: scale,
        tolerance: tol,
        passed,
    })
}

/// Checks the two-sided game characterization: the price player has a finite
/// optimum (all aggregate trades vanish) and every prosumer best-responds.
pub fn verify_nash(
    ws: &WelfareSolution,
    prosumers: &[ProsumerSpec],
    cs: &ConstraintSet,
    alloc: &DoeAllocation,
    tol: f64,
    cfg: &SolverConfig,
) -> Result<EquilibriumReport, MarketError> {
    check_nash(
        &ws.decisions,
        &ws.prices,
        ws.rules,
        prosumers,
        cs,
        alloc,
        tol,
        cfg,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn check_nash(
    decisions: &[TrajectoryDecision],
    prices: &MarketPrices,
    rules: TradingRules,
    prosumers: &[ProsumerSpec],
    cs: &ConstraintSet,
    alloc: &DoeAllocation,
    tol: f64,
    cfg: &SolverConfig,
) -> Result<EquilibriumReport, MarketError> {
    let mut report = check_equilibrium(decisions, prices, rules, prosumers, cs, alloc, tol, cfg)?;
    report.unbounded_direction = largest_aggregate(decisions).filter(|d| d.aggregate.abs() > tol);
    report.passed = report.passed && report.unbounded_direction.is_none();
    Ok(report)
}
