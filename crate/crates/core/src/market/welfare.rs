use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{MarketError, MarketPrices, PRICE_SIGN};
use crate::doe::DoeAllocation;
use crate::grid::{ConstraintSet, Side};
use crate::prosumer::{
    add_block, LimitMode, ProsumerSpec, TradingRules, TrajectoryDecision, SLATER_MARGIN,
};
use crate::qp::{solve_qp, KktResiduals, QpBuilder, SolveStatus, SolverConfig};

/// Largest absolute aggregate trade per commodity and step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BalanceResiduals {
    pub active: Vec<f64>,
    pub reactive: Vec<f64>,
    /// Worst row per step.
    pub limit: Vec<f64>,
}

impl BalanceResiduals {
    pub fn of(decisions: &[TrajectoryDecision]) -> Self {
        let horizon = decisions.first().map_or(0, |d| d.p.len());
        let rows = decisions.first().map_or(0, |d| d.l.nrows());
        let mut out = Self {
            active: vec![0.0; horizon],
            reactive: vec![0.0; horizon],
            limit: vec![0.0; horizon],
        };
        for t in 0..horizon {
            out.active[t] = decisions.iter().map(|d| d.p[t]).sum::<f64>().abs();
            out.reactive[t] = decisions.iter().map(|d| d.q[t]).sum::<f64>().abs();
            out.limit[t] = (0..rows)
                .map(|r| decisions.iter().map(|d| d.l[(r, t)]).sum::<f64>().abs())
                .fold(0.0, f64::max);
        }
        out
    }

    pub fn max(&self) -> f64 {
        self.active
            .iter()
            .chain(&self.reactive)
            .chain(&self.limit)
            .fold(0.0, |m, v| m.max(*v))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WelfareSolution {
    pub decisions: Vec<TrajectoryDecision>,
    pub prices: MarketPrices,
    /// Σ_i utility (¢).
    pub welfare: f64,
    pub balance_residuals: BalanceResiduals,
    /// Supply-row multipliers, N × T (¢ per kW).
    pub supply_duals: DMatrix<f64>,
    /// Envelope-row multipliers per prosumer, M × T (¢ per row unit).
    pub envelope_duals: Vec<DMatrix<f64>>,
    pub rules: TradingRules,
    /// Divisor applied to utilities inside the QP.
    pub objective_scale: f64,
    pub kkt_residuals: KktResiduals,
    pub iterations: u32,
}

/// Community objective scale: the largest utility weight of any prosumer.
pub fn community_scale(prosumers: &[ProsumerSpec]) -> f64 {
    prosumers
        .iter()
        .map(|p| p.utility.scale())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE)
}

pub(crate) fn check_inputs(
    prosumers: &[ProsumerSpec],
    cs: &ConstraintSet,
    alloc: &DoeAllocation,
) -> Result<(), MarketError> {
    let n = prosumers.len();
    if n == 0 {
        return Err(MarketError::Dimension("no prosumers".into()));
    }
    if cs.num_prosumers() != n || alloc.num_prosumers() != n {
        return Err(MarketError::Dimension(format!(
            "{n} prosumers but grid has {} and allocation {}",
            cs.num_prosumers(),
            alloc.num_prosumers()
        )));
    }
    if alloc.num_rows() != cs.num_rows() || alloc.horizon() != cs.horizon() {
        return Err(MarketError::Dimension(
            "allocation does not match the constraint set".into(),
        ));
    }
    for (index, p) in prosumers.iter().enumerate() {
        if p.horizon() != cs.horizon() {
            return Err(MarketError::Dimension(format!("prosumer {index} horizon")));
        }
    }
    Ok(())
}

/// Weight of the trade volume relative to the voltage-deviation term when
/// selecting among optimal dispatches.
const TRADE_WEIGHT: f64 = 1e-6;
/// Largest constraint violation accepted from the dispatch selection.
const SELECTION_FEASIBILITY: f64 = 1e-8;

/// Among the trades compatible with the optimal inputs, picks the one with
/// the flattest voltage profile, `Σ (base·ΔV²)²` over constrained nodes, with
/// a small trade-volume term for uniqueness. Utilities depend on inputs
/// only, so the welfare and the multipliers of the first solve remain
/// optimal for it.
/// Returns `None` when the selection problem does not solve cleanly.
fn least_trading(
    prosumers: &[ProsumerSpec],
    cs: &ConstraintSet,
    shares: &[DMatrix<f64>],
    rules: TradingRules,
    optimal: &[TrajectoryDecision],
    cfg: &SolverConfig,
) -> Option<Vec<TrajectoryDecision>> {
    let (horizon, rows) = (cs.horizon(), cs.num_rows());
    let base = cs.base_power_kva();
    let mut b = QpBuilder::new();
    let mut vars = Vec::with_capacity(prosumers.len());
    for (i, spec) in prosumers.iter().enumerate() {
        let mut p = Vec::with_capacity(horizon);
        let mut q = Vec::with_capacity(horizon);
        let mut l = Vec::new();
        for t in 0..horizon {
            let pv = b.add_variable(spec.p_lower, spec.p_upper);
            b.add_product(pv, pv, TRADE_WEIGHT);
            p.push(pv);
            if rules.reactive_trading {
                let qv = b.add_variable(spec.q_lower, spec.q_upper);
                b.add_product(qv, qv, TRADE_WEIGHT);
                q.push(qv);
            }
            let used: f64 = (0..spec.num_inputs())
                .map(|k| spec.h[k] * optimal[i].u[(k, t)])
                .sum();
            b.add_inequality(&[(pv, 1.0)], spec.net_supply[t] - used);
            for r in 0..rows {
                let (cp, cq) = cs.coefficient_pu(r, i);
                let mut terms = vec![(pv, cp)];
                if rules.reactive_trading {
                    terms.push((q[t], cq));
                }
                if rules.limit_trading {
                    // Carried multiplied by the base power, as in the welfare QP.
                    let lv = b.add_free_variable();
                    b.add_product(lv, lv, TRADE_WEIGHT / (base * base));
                    terms.push((lv, 1.0));
                    l.push(lv);
                }
                b.add_inequality(&terms, base * shares[i][(r, t)]);
            }
        }
        vars.push((p, q, l));
    }
    // Voltage deviation d = base·ΔV² at every constrained node.
    for t in 0..horizon {
        for (r, label) in cs.rows.iter().enumerate() {
            if label.side != Side::Upper {
                continue;
            }
            let d = b.add_free_variable();
            b.add_product(d, d, 1.0);
            let mut terms = vec![(d, -1.0)];
            for (i, (p, q, _)) in vars.iter().enumerate() {
                let (cp, cq) = cs.coefficient_pu(r, i);
                terms.push((p[t], cp));
                if rules.reactive_trading {
                    terms.push((q[t], cq));
                }
            }
            b.add_equality(&terms, 0.0);
        }
    }
    for t in 0..horizon {
        let terms: Vec<_> = vars.iter().map(|(p, _, _)| (p[t], 1.0)).collect();
        b.add_equality(&terms, 0.0);
        if rules.reactive_trading {
            let terms: Vec<_> = vars.iter().map(|(_, q, _)| (q[t], 1.0)).collect();
            b.add_equality(&terms, 0.0);
        }
        if rules.limit_trading {
            for r in 0..rows {
                let terms: Vec<_> = vars
                    .iter()
                    .map(|(_, _, l)| (l[t * rows + r], 1.0))
                    .collect();
                b.add_equality(&terms, 0.0);
            }
        }
    }
    // Any feasible point is welfare-optimal here, so only feasibility is
    // required of the selection; its own optimality is a nicety.
    let sol = solve_qp(&b.build(), cfg).ok()?;
    let res = &sol.kkt_residuals;
    let feasible = matches!(sol.status, SolveStatus::Optimal | SolveStatus::MaxIter)
        && res.primal_eq.max(res.primal_ineq) <= SELECTION_FEASIBILITY;
    if !feasible {
        return None;
    }
    let mut out = optimal.to_vec();
    for (d, (p, q, l)) in out.iter_mut().zip(&vars) {
        for t in 0..horizon {
            d.p[t] = sol.primal[p[t]];
            if rules.reactive_trading {
                d.q[t] = sol.primal[q[t]];
            }
            if rules.limit_trading {
                for r in 0..rows {
                    d.l[(r, t)] = sol.primal[l[t * rows + r]] / base;
                }
            }
        }
    }
    Some(out)
}

/// Solves the stacked welfare QP and extracts prices from the balance rows.
pub fn solve_welfare(
    prosumers: &[ProsumerSpec],
    cs: &ConstraintSet,
    alloc: &DoeAllocation,
    rules: TradingRules,
    cfg: &SolverConfig,
) -> Result<WelfareSolution, MarketError> {
    check_inputs(prosumers, cs, alloc)?;
    for (index, p) in prosumers.iter().enumerate() {
        p.check_slater(index, SLATER_MARGIN)
            .map_err(|source| MarketError::Prosumer { index, source })?;
    }
    let (horizon, rows) = (cs.horizon(), cs.num_rows());
    let scale = community_scale(prosumers);
    let base = cs.base_power_kva();
    let mode = if rules.limit_trading {
        LimitMode::Explicit
    } else {
        LimitMode::Off
    };

    let mut b = QpBuilder::new();
    let shares: Vec<DMatrix<f64>> = (0..prosumers.len()).map(|i| alloc.share(i)).collect();
    let blocks: Vec<_> = prosumers
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            add_block(
                &mut b,
                spec,
                i,
                cs,
                &shares[i],
                rules.reactive_trading,
                mode,
                scale,
            )
        })
        .collect();

    let bal_p: Vec<usize> = (0..horizon)
        .map(|t| {
            let terms: Vec<_> = blocks.iter().map(|bl| (bl.p[t], 1.0)).collect();
            b.add_equality(&terms, 0.0)
        })
        .collect();
    let bal_q: Option<Vec<usize>> = rules.reactive_trading.then(|| {
        (0..horizon)
            .map(|t| {
                let terms: Vec<_> = blocks
                    .iter()
                    .map(|bl| (bl.q.as_ref().unwrap()[t], 1.0))
                    .collect();
                b.add_equality(&terms, 0.0)
            })
            .collect()
    });
    let bal_l: Option<Vec<usize>> = rules.limit_trading.then(|| {
        let mut idx = Vec::with_capacity(horizon * rows);
        for t in 0..horizon {
            for r in 0..rows {
                let terms: Vec<_> = blocks
                    .iter()
                    .map(|bl| (bl.l.as_ref().unwrap()[t * rows + r], 1.0))
                    .collect();
                idx.push(b.add_equality(&terms, 0.0));
            }
        }
        idx
    });

    let qp = b.build();
    let sol = solve_qp(&qp, cfg)?;
    match sol.status {
        SolveStatus::Optimal => {}
        SolveStatus::Infeasible => return Err(MarketError::Infeasible),
        other => return Err(crate::qp::QpError::NotOptimal(other).into()),
    }

    let price = |row: usize| PRICE_SIGN * sol.eq_duals[row] * scale;
    let mut prices = MarketPrices::zeros(horizon, rows);
    for t in 0..horizon {
        prices.lambda[t] = price(bal_p[t]);
        if let Some(bq) = &bal_q {
            prices.gamma[t] = price(bq[t]);
        }
        if let Some(bl) = &bal_l {
            for r in 0..rows {
                // l is carried multiplied by the base power inside the QP.
                prices.beta[(r, t)] = price(bl[t * rows + r]) * base;
            }
        }
    }

    let mut decisions: Vec<TrajectoryDecision> = blocks
        .iter()
        .enumerate()
        .map(|(i, bl)| bl.decode(&prosumers[i], i, cs, &shares[i], &sol.primal))
        .collect();
    if let Some(trades) = least_trading(prosumers, cs, &shares, rules, &decisions, cfg) {
        decisions = trades;
    }
    let welfare = prosumers
        .iter()
        .zip(&decisions)
        .map(|(s, d)| s.utility.value(&d.x, &d.u))
        .sum();
    let supply_duals = DMatrix::from_fn(prosumers.len(), horizon, |i, t| {
        sol.ineq_duals[blocks[i].supply_rows[t]] * scale
    });
    let envelope_duals = blocks
        .iter()
        .map(|bl| {
            DMatrix::from_fn(rows, horizon, |r, t| {
                sol.ineq_duals[bl.doe_rows[t * rows + r]] * scale * base
            })
        })
        .collect();

    Ok(WelfareSolution {
        balance_residuals: BalanceResiduals::of(&decisions),
        decisions,
        prices,
        welfare,
        supply_duals,
        envelope_duals,
        rules,
        objective_scale: scale,
        kkt_residuals: sol.kkt_residuals,
        iterations: sol.iterations,
    })
}
