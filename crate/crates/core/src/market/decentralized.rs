use serde::{Deserialize, Serialize};

use super::verify::best_responses_strict;
use super::welfare::{check_inputs, BalanceResiduals};
use super::{MarketError, MarketPrices};
use crate::doe::DoeAllocation;
use crate::grid::ConstraintSet;
use crate::prosumer::{ProsumerSpec, TradingRules, TrajectoryDecision};
use crate::qp::SolverConfig;

/// Price steps in ¢ per unit of aggregate imbalance per round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub rho_p: f64,
    pub rho_q: f64,
    pub rho_l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecentralizedConfig {
    pub max_iters: usize,
    pub residual_tol: f64,
    pub solver: SolverConfig,
}

impl Default for DecentralizedConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            residual_tol: 1e-4,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    /// Largest aggregate trade of this round's responses.
    pub residual: f64,
    pub prices: MarketPrices,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecentralizedOutcome {
    pub prices: MarketPrices,
    pub decisions: Vec<TrajectoryDecision>,
    pub iterations: usize,
    pub trace: Vec<TraceEntry>,
}

/// Dual decomposition: every round each prosumer best-responds to the current
/// prices, then `λ ← λ − ρ_p Σ_i p_i` (and likewise `γ`, `β`, without
/// projection). Stops once every aggregate is within `residual_tol`.
pub fn clear_decentralized(
    prosumers: &[ProsumerSpec],
    cs: &ConstraintSet,
    alloc: &DoeAllocation,
    rules: TradingRules,
    steps: StepSizes,
    cfg: &DecentralizedConfig,
    initial: Option<MarketPrices>,
) -> Result<DecentralizedOutcome, MarketError> {
    check_inputs(prosumers, cs, alloc)?;
    for rho in [steps.rho_p, steps.rho_q, steps.rho_l] {
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(MarketError::StepSize(rho));
        }
    }
    let (horizon, rows) = (cs.horizon(), cs.num_rows());
    let mut prices = initial.unwrap_or_else(|| MarketPrices::zeros(horizon, rows));
    if prices.horizon() != horizon || prices.num_rows() != rows {
        return Err(MarketError::Dimension("initial prices".into()));
    }
    let mut trace = Vec::new();
    for iteration in 1..=cfg.max_iters {
        let decisions = best_responses_strict(prosumers, &prices, cs, alloc, rules, &cfg.solver)?;
        let residual = BalanceResiduals::of(&decisions).max();
        trace.push(TraceEntry {
            iteration,
            residual,
            prices: prices.clone(),
        });
        if residual <= cfg.residual_tol {
            return Ok(DecentralizedOutcome {
                prices,
                decisions,
                iterations: iteration,
                trace,
            });
        }
        if !residual.is_finite() || !prices.is_finite() {
            break;
        }
        for t in 0..horizon {
            prices.lambda[t] -= steps.rho_p * decisions.iter().map(|d| d.p[t]).sum::<f64>();
            if rules.reactive_trading {
                prices.gamma[t] -= steps.rho_q * decisions.iter().map(|d| d.q[t]).sum::<f64>();
            }
            if rules.limit_trading {
                for r in 0..rows {
                    prices.beta[(r, t)] -=
                        steps.rho_l * decisions.iter().map(|d| d.l[(r, t)]).sum::<f64>();
                }
            }
        }
    }
    Err(MarketError::NonConvergence {
        iterations: trace.len(),
        last_residual: trace.last().map_or(f64::INFINITY, |e| e.residual),
        trace,
    })
}
