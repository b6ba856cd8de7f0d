//! Market clearing and equilibrium verification.
//!
//! The welfare problem stacks every prosumer's local constraints and adds the
//! balance rows `Σ_i p_i(t) = 0`, `Σ_i q_i(t) = 0` and `Σ_i l_i(t) = 0`. Prices
//! are read from the multipliers of those rows with the orientation given by
//! [`PRICE_SIGN`]: with the QP's Lagrangian convention `+μ(Σ_i p_i)`, each
//! prosumer's best response at `λ = −μ` reproduces its welfare allocation.

mod compare;
mod decentralized;
mod verify;
mod welfare;

pub use compare::{compare_scenarios, voltage_table, ScenarioComparison, VoltageExtremes};
pub use decentralized::{
    clear_decentralized, DecentralizedConfig, DecentralizedOutcome, StepSizes, TraceEntry,
};
pub use verify::{
    check_equilibrium, check_nash, price_player_objective, verify_competitive_equilibrium,
    verify_nash, Commodity, EquilibriumReport, UnboundedDirection, FEASIBILITY_TOL,
};
pub use welfare::{community_scale, solve_welfare, BalanceResiduals, WelfareSolution};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridError;
use crate::prosumer::ProsumerError;
use crate::qp::QpError;

/// Price = `PRICE_SIGN` × balance-row multiplier × objective scale.
pub const PRICE_SIGN: f64 = -1.0;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("the stacked welfare problem is infeasible")]
    Infeasible,
    #[error("prosumer {index}")]
    Prosumer {
        index: usize,
        #[source]
        source: ProsumerError,
    },
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("invalid step size {0}")]
    StepSize(f64),
    #[error("no convergence after {iterations} iterations (last residual {last_residual:e})")]
    NonConvergence {
        iterations: usize,
        last_residual: f64,
        trace: Vec<TraceEntry>,
    },
    #[error("scenarios differ structurally: {0}")]
    Mismatch(String),
}

/// Prices in ¢: `lambda` per kW of active power per step, `gamma` per kVar,
/// `beta` (M × T) per constraint-row unit of envelope headroom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketPrices {
    pub lambda: Vec<f64>,
    pub gamma: Vec<f64>,
    #[serde(with = "crate::serde_matrix::matrix")]
    pub beta: DMatrix<f64>,
}

impl MarketPrices {
    pub fn zeros(horizon: usize, rows: usize) -> Self {
        Self {
            lambda: vec![0.0; horizon],
            gamma: vec![0.0; horizon],
            beta: DMatrix::zeros(rows, horizon),
        }
    }

    pub fn horizon(&self) -> usize {
        self.lambda.len()
    }

    pub fn num_rows(&self) -> usize {
        self.beta.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.lambda
            .iter()
            .chain(&self.gamma)
            .chain(self.beta.iter())
            .all(|v| v.is_finite())
    }

    /// Writes `t,lambda,gamma,beta_1..beta_M`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "lambda".into(), "gamma".into()];
        header.extend((1..=self.num_rows()).map(|r| format!("beta_{r}")));
        wtr.write_record(&header)?;
        for t in 0..self.horizon() {
            let mut rec = vec![
                t.to_string(),
                self.lambda[t].to_string(),
                self.gamma[t].to_string(),
            ];
            rec.extend(self.beta.column(t).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush()
    }
}
