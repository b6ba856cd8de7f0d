//! Modified single-phase IEEE 13-node feeder with synthetic aggregators.
//!
//! Node indices: 0 = 650 (head), 1 = 632, 2 = 633, 3 = 634, 4 = 645,
//! 5 = 646, 6 = 671, 7 = 692, 8 = 675, 9 = 684, 10 = 611, 11 = 652, 12 = 680.
//! The 633-634 transformer and the 671-692 switch are replaced by
//! zero-impedance ties; capacitor banks are dropped. Nodes 0, 1 and 6 carry
//! no prosumers.
//!
//! Line impedances are scaled by `330 / (aggregators × households)` so that
//! a reduced community loads the feeder as heavily per household as the full
//! 30 × 11 configuration.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Scenario, ScenarioError, VoltageBand, SCHEMA_VERSION};
use crate::doe::DEFAULT_EPSILON;
use crate::grid::{FeederTopology, Line};
use crate::prosumer::{ProsumerSpec, QuadraticUtility, TradingRules};

pub const HORIZON: usize = 48;
pub const STEP_HOURS: f64 = 0.5;
pub const EFFICIENCY: f64 = 0.9;
pub const THETA: f64 = 1e-8;
pub const CHARGE_RATE_KW: f64 = 6.6;
pub const REACTIVE_LIMIT_KVAR: f64 = 0.33;
pub const INJECTION_LIMIT_KW: f64 = 15.0;
pub const SUPPLY_SCALE: f64 = 2.0;
pub const SOC_MIN: f64 = 0.2;
pub const SOC_MAX: f64 = 0.85;
pub const SOC_TARGET: f64 = 0.85;
/// Per-household storage capacity ranges (kWh).
pub const BATTERY_KWH: (f64, f64) = (5.0, 15.0);
pub const EV_KWH: (f64, f64) = (5.0, 75.0);
/// EV departure and arrival windows (hours after midnight).
pub const DEPARTURE_H: (f64, f64) = (7.0, 9.0);
pub const ARRIVAL_H: (f64, f64) = (16.0, 19.0);

const FULL_SCALE_HOUSEHOLDS: f64 = 330.0;
const FEET_PER_MILE: f64 = 5280.0;

const NODE_NAMES: [&str; 13] = [
    "650", "632", "633", "634", "645", "646", "671", "692", "675", "684", "611", "652", "680",
];
const PROSUMER_NODES: [usize; 10] = [2, 3, 4, 5, 7, 8, 9, 10, 11, 12];

/// (from, to, length ft, Ω/mile r, Ω/mile x); zero length marks a tie.
const LINES: [(usize, usize, f64, f64, f64); 12] = [
    (0, 1, 2000.0, 0.3465, 1.0179),
    (1, 2, 500.0, 0.7526, 1.1814),
    (2, 3, 0.0, 0.0, 0.0),
    (1, 4, 500.0, 1.3294, 1.3471),
    (4, 5, 300.0, 1.3294, 1.3471),
    (1, 6, 2000.0, 0.3465, 1.0179),
    (6, 7, 0.0, 0.0, 0.0),
    (7, 8, 500.0, 0.7982, 0.4463),
    (6, 9, 300.0, 1.3238, 1.3569),
    (9, 10, 300.0, 1.3292, 1.3475),
    (9, 11, 800.0, 1.3425, 0.5124),
    (6, 12, 1000.0, 0.3465, 1.0179),
];

/// Aggregators per prosumer node and households per aggregator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scale {
    pub aggregators_per_node: usize,
    pub prosumers_per_aggregator: usize,
}

impl Scale {
    pub const DESK: Scale = Scale {
        aggregators_per_node: 3,
        prosumers_per_aggregator: 1,
    };

    pub fn impedance_multiplier(&self) -> f64 {
        FULL_SCALE_HOUSEHOLDS / (self.aggregators_per_node * self.prosumers_per_aggregator) as f64
    }
}

impl FromStr for Scale {
    type Err = String;

    /// Parses `AxB`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("scale `{s}` is not of the form AxB"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| format!("scale `{s}`: {e}"))
        };
        Ok(Scale {
            aggregators_per_node: parse(a)?,
            prosumers_per_aggregator: parse(b)?,
        })
    }
}

fn feeder(scale: Scale) -> FeederTopology {
    let mult = scale.impedance_multiplier();
    FeederTopology {
        nodes: NODE_NAMES.iter().map(|s| s.to_string()).collect(),
        head: 0,
        lines: LINES
            .iter()
            .map(|&(from, to, ft, r, x)| Line {
                from,
                to,
                resistance_ohm: r * ft / FEET_PER_MILE * mult,
                reactance_ohm: x * ft / FEET_PER_MILE * mult,
            })
            .collect(),
        base_voltage_kv: 4.16,
        base_power_kva: 5000.0,
        nominal_voltage_pu: 1.0,
        connections: Vec::new(),
    }
}

/// Path resistance from the head to each node, normalized to the farthest.
fn electrical_distance(f: &FeederTopology) -> Vec<f64> {
    let mut dist = vec![0.0; f.nodes.len()];
    // LINES lists every parent before its children.
    for l in &f.lines {
        dist[l.to] = dist[l.from] + l.resistance_ohm;
    }
    let far = dist.iter().cloned().fold(0.0, f64::max);
    dist.iter().map(|d| d / far).collect()
}

fn hour(t: usize) -> f64 {
    (t as f64 + 0.5) * STEP_HOURS
}

fn solar_shape(h: f64) -> f64 {
    if (6.0..18.0).contains(&h) {
        (PI * (h - 6.0) / 12.0).sin()
    } else {
        0.0
    }
}

fn load_shape(h: f64, base: f64) -> f64 {
    base + 0.6 * (-((h - 7.5) / 1.2).powi(2)).exp() + 1.2 * (-((h - 19.0) / 1.5).powi(2)).exp()
}

struct Household {
    battery_kwh: f64,
    ev_kwh: f64,
    battery_x0: f64,
    ev_x0: f64,
    departure: f64,
    arrival: f64,
    supply: Vec<f64>,
}

fn household(rng: &mut ChaCha8Rng, node_factor: f64) -> Household {
    let battery_kwh = rng.random_range(BATTERY_KWH.0..BATTERY_KWH.1);
    let ev_kwh = rng.random_range(EV_KWH.0..EV_KWH.1);
    let battery_x0 = rng.random_range(0.2..0.5) * battery_kwh;
    let ev_x0 = rng.random_range(0.2..0.5) * ev_kwh;
    let departure = rng.random_range(DEPARTURE_H.0..DEPARTURE_H.1);
    let arrival = rng.random_range(ARRIVAL_H.0..ARRIVAL_H.1);
    let amplitude = rng.random_range(2.0..5.0) * node_factor;
    let base = rng.random_range(0.2..0.4);
    let load_factor = rng.random_range(0.7..1.3);
    let supply = (0..HORIZON)
        .map(|t| {
            let h = hour(t);
            SUPPLY_SCALE * (amplitude * solar_shape(h) - load_factor * load_shape(h, base))
        })
        .collect();
    Household {
        battery_kwh,
        ev_kwh,
        battery_x0,
        ev_x0,
        departure,
        arrival,
        supply,
    }
}

fn aggregator(homes: &[Household]) -> ProsumerSpec {
    let k = homes.len() as f64;
    let cap = [
        homes.iter().map(|h| h.battery_kwh).sum::<f64>(),
        homes.iter().map(|h| h.ev_kwh).sum::<f64>(),
    ];
    let x0 = vec![
        homes.iter().map(|h| h.battery_x0).sum::<f64>(),
        homes.iter().map(|h| h.ev_x0).sum::<f64>(),
    ];
    let mut u_lower = DMatrix::zeros(2, HORIZON);
    let mut u_upper = DMatrix::zeros(2, HORIZON);
    for t in 0..HORIZON {
        let h = hour(t);
        let present = homes
            .iter()
            .filter(|e| h < e.departure || h >= e.arrival)
            .count() as f64;
        u_lower[(0, t)] = -CHARGE_RATE_KW * k;
        u_upper[(0, t)] = CHARGE_RATE_KW * k;
        u_lower[(1, t)] = -CHARGE_RATE_KW * present;
        u_upper[(1, t)] = CHARGE_RATE_KW * present;
    }
    let target: Vec<f64> = cap.iter().map(|c| SOC_TARGET * c).collect();
    ProsumerSpec {
        a: DMatrix::identity(2, 2),
        b: DMatrix::identity(2, 2) * (EFFICIENCY * STEP_HOURS),
        x_lower: cap.iter().map(|c| SOC_MIN * c).collect(),
        x_upper: cap.iter().map(|c| SOC_MAX * c).collect(),
        x0,
        u_lower,
        u_upper,
        p_lower: -INJECTION_LIMIT_KW * k,
        p_upper: INJECTION_LIMIT_KW * k,
        q_lower: -REACTIVE_LIMIT_KVAR * k,
        q_upper: REACTIVE_LIMIT_KVAR * k,
        net_supply: (0..HORIZON)
            .map(|t| homes.iter().map(|h| h.supply[t]).sum())
            .collect(),
        h: vec![1.0, 1.0],
        utility: QuadraticUtility {
            input_weight: DMatrix::identity(2, 2) * THETA,
            input_target: vec![0.0, 0.0],
            state_weights: vec![DMatrix::identity(2, 2) * THETA; HORIZON],
            state_targets: vec![target.clone(); HORIZON],
            terminal_weight: DMatrix::identity(2, 2) * THETA,
            terminal_target: target,
        },
    }
}

/// Builds the feeder and `10 × aggregators_per_node` aggregators, each
/// managing `prosumers_per_aggregator` synthetic households.
pub fn build_ieee13_scenario(scale: Scale, seed: u64) -> Result<Scenario, ScenarioError> {
    if scale.aggregators_per_node == 0 || scale.prosumers_per_aggregator == 0 {
        return Err(ScenarioError::Invalid(
            "scale entries must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = feeder(scale);
    let dist = electrical_distance(&f);
    let mut prosumers = Vec::new();
    for &node in &PROSUMER_NODES {
        let node_factor = 0.6 + 0.8 * dist[node];
        for _ in 0..scale.aggregators_per_node {
            let homes: Vec<Household> = (0..scale.prosumers_per_aggregator)
                .map(|_| household(&mut rng, node_factor))
                .collect();
            prosumers.push(aggregator(&homes));
            f.connections.push(node);
        }
    }
    Ok(Scenario {
        version: SCHEMA_VERSION,
        name: format!(
            "ieee13-{}x{}-seed{seed}",
            scale.aggregators_per_node, scale.prosumers_per_aggregator
        ),
        seed,
        horizon: HORIZON,
        step_hours: STEP_HOURS,
        band: VoltageBand {
            v_min: 0.95,
            v_max: 1.05,
        },
        epsilon: DEFAULT_EPSILON,
        flags: TradingRules::default(),
        constrained_nodes: None,
        feeder: f,
        prosumers,
    })
}
