//! Scenario files, synthetic scenario generators and the clearing pipeline.
//!
//! A scenario is a versioned JSON document:
//!
//! ```text
//! {
//!   "version": 1,
//!   "name": "...",
//!   "seed": 1,
//!   "horizon": 48,              // T
//!   "step_hours": 0.5,          // Δ
//!   "band": { "v_min": 0.95, "v_max": 1.05 },
//!   "epsilon": 0.001,           // envelope regularization weight
//!   "flags": { "reactive_trading": true, "limit_trading": true },
//!   "constrained_nodes": [1, 2],   // optional; default every electrically distinct non-head node
//!   "feeder": { "nodes": [...], "head": 0, "lines": [{"from", "to", "resistance_ohm", "reactance_ohm"}],
//!               "base_voltage_kv", "base_power_kva", "nominal_voltage_pu", "connections": [node per prosumer] },
//!   "prosumers": [ { "a", "b", "x0", "x_lower", "x_upper", "u_lower", "u_upper",
//!                    "p_lower", "p_upper", "q_lower", "q_upper", "net_supply", "h",
//!                    "utility": { "input_weight", "input_target", "state_weights", "state_targets",
//!                                 "terminal_weight", "terminal_target" } } ]
//! }
//! ```
//!
//! Matrices are nested arrays in row-major order; `u_lower`/`u_upper` are
//! m × T with one row per input channel. Unknown fields are rejected.

mod ieee13;
mod instances;
mod pipeline;

pub use ieee13::{build_ieee13_scenario, Scale};
pub use instances::{hand_pair_scenario, random_market_scenario, random_pair_scenario};
pub use pipeline::{
    read_dispatch_csv, read_prices_csv, run_pipeline, scenario_allocation, verify_files,
    write_dispatch_csv, write_voltages_csv, PipelineConfig, PipelineRun, RunReport, StageTiming,
};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doe::DoeError;
use crate::grid::{
    assemble_constraints, assemble_constraints_for, build_sensitivities, ConstraintSet,
    FeederTopology, GridError, SensitivityMatrices,
};
use crate::market::MarketError;
use crate::prosumer::{ProsumerError, ProsumerSpec, TradingRules};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("prosumer {index}")]
    Prosumer {
        index: usize,
        #[source]
        source: ProsumerError,
    },
    #[error("{stage} stage failed")]
    Doe {
        stage: &'static str,
        #[source]
        source: DoeError,
    },
    #[error("{stage} stage failed")]
    Market {
        stage: &'static str,
        #[source]
        source: MarketError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoltageBand {
    pub v_min: f64,
    pub v_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub horizon: usize,
    pub step_hours: f64,
    pub band: VoltageBand,
    pub epsilon: f64,
    pub flags: TradingRules,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constrained_nodes: Option<Vec<usize>>,
    pub feeder: FeederTopology,
    pub prosumers: Vec<ProsumerSpec>,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.version != SCHEMA_VERSION {
            return Err(ScenarioError::Invalid(format!(
                "unsupported version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        if self.horizon == 0 || !(self.step_hours > 0.0) {
            return Err(ScenarioError::Invalid(
                "horizon and step_hours must be positive".into(),
            ));
        }
        if !(self.epsilon > 0.0) {
            return Err(ScenarioError::Invalid("epsilon must be positive".into()));
        }
        if self.prosumers.is_empty() || self.prosumers.len() != self.feeder.connections.len() {
            return Err(ScenarioError::Invalid(format!(
                "{} prosumers but {} feeder connections",
                self.prosumers.len(),
                self.feeder.connections.len()
            )));
        }
        self.feeder.validate()?;
        for (index, p) in self.prosumers.iter().enumerate() {
            p.validate()
                .map_err(|source| ScenarioError::Prosumer { index, source })?;
            if p.horizon() != self.horizon {
                return Err(ScenarioError::Invalid(format!(
                    "prosumer {index} net supply length differs from horizon"
                )));
            }
        }
        self.constraint_set(&self.sensitivities()?)?;
        Ok(())
    }

    pub fn sensitivities(&self) -> Result<SensitivityMatrices, ScenarioError> {
        Ok(build_sensitivities(&self.feeder)?)
    }

    pub fn constraint_set(
        &self,
        sens: &SensitivityMatrices,
    ) -> Result<ConstraintSet, ScenarioError> {
        let VoltageBand { v_min, v_max } = self.band;
        Ok(match &self.constrained_nodes {
            Some(nodes) => assemble_constraints_for(sens, nodes, v_min, v_max, self.horizon)?,
            None => assemble_constraints(sens, v_min, v_max, self.horizon)?,
        })
    }

    pub fn with_flags(&self, flags: TradingRules) -> Self {
        Self {
            flags,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn save_scenario(s: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let path = path.as_ref();
    std::fs::write(path, s.to_json()).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })
}
