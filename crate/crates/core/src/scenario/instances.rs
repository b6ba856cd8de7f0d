//! Small seeded market instances for property tests and oracle comparisons.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scenario, VoltageBand, SCHEMA_VERSION};
use crate::doe::DEFAULT_EPSILON;
use crate::grid::{FeederTopology, Line};
use crate::prosumer::{ProsumerSpec, QuadraticUtility, TradingRules};

fn band() -> VoltageBand {
    VoltageBand {
        v_min: 0.95,
        v_max: 1.05,
    }
}

fn scenario(
    name: String,
    seed: u64,
    horizon: usize,
    flags: TradingRules,
    feeder: FeederTopology,
    prosumers: Vec<ProsumerSpec>,
) -> Scenario {
    Scenario {
        version: SCHEMA_VERSION,
        name,
        seed,
        horizon,
        step_hours: 24.0 / horizon as f64,
        band: band(),
        epsilon: DEFAULT_EPSILON,
        flags,
        constrained_nodes: None,
        feeder,
        prosumers,
    }
}

/// Head plus one node carrying every prosumer through a short line, so the
/// voltage rows never bind.
fn stiff_feeder(n: usize) -> FeederTopology {
    FeederTopology {
        nodes: vec!["head".into(), "bus".into()],
        head: 0,
        lines: vec![Line {
            from: 0,
            to: 1,
            resistance_ohm: 0.01,
            reactance_ohm: 0.01,
        }],
        base_voltage_kv: 1.0,
        base_power_kva: 100.0,
        nominal_voltage_pu: 1.0,
        connections: vec![1; n],
    }
}

/// Scalar storage prosumer with `f = −θ(u − ū)²` plus optional state terms.
fn scalar_prosumer(horizon: usize, theta: f64, target: f64, supply: Vec<f64>) -> ProsumerSpec {
    let zero = DMatrix::zeros(1, 1);
    ProsumerSpec {
        a: DMatrix::identity(1, 1),
        b: DMatrix::from_element(1, 1, 1.0),
        x0: vec![0.0],
        x_lower: vec![-100.0],
        x_upper: vec![100.0],
        u_lower: DMatrix::from_element(1, horizon, -3.0),
        u_upper: DMatrix::from_element(1, horizon, 3.0),
        p_lower: -10.0,
        p_upper: 10.0,
        q_lower: -1.0,
        q_upper: 1.0,
        net_supply: supply,
        h: vec![1.0],
        utility: QuadraticUtility {
            input_weight: DMatrix::from_element(1, 1, theta),
            input_target: vec![target],
            state_weights: vec![zero.clone(); horizon],
            state_targets: vec![vec![0.0]; horizon],
            terminal_weight: zero,
            terminal_target: vec![0.0],
        },
    }
}

const ACTIVE_ONLY: TradingRules = TradingRules {
    reactive_trading: false,
    limit_trading: false,
};

/// Two prosumers, one step, `f₁ = −u₁²`, `f₂ = −(u₂ − 1)²`, `h(u) = u`,
/// net supply `(a₁, 0)`, active-power trading only.
pub fn hand_pair_scenario(a1: f64) -> Scenario {
    let prosumers = vec![
        scalar_prosumer(1, 1.0, 0.0, vec![a1]),
        scalar_prosumer(1, 1.0, 1.0, vec![0.0]),
    ];
    scenario(
        format!("hand-pair-{a1}"),
        0,
        1,
        ACTIVE_ONLY,
        stiff_feeder(2),
        prosumers,
    )
}

fn grid_round(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Two scalar prosumers over `T ∈ {1, 2}` with active-power trading only.
///
/// Supplies and targets are multiples of 1e-3 and the joint input target
/// exceeds total supply at every step, so the supply coupling binds and the
/// active-power price is positive.
pub fn random_pair_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(1..=2);
    let supply: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            (0..horizon)
                .map(|_| grid_round(rng.random_range(-0.5..1.0)))
                .collect()
        })
        .collect();
    let peak = (0..horizon)
        .map(|t| supply[0][t] + supply[1][t])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut targets: Vec<f64> = (0..2)
        .map(|_| grid_round(rng.random_range(0.2..1.5)))
        .collect();
    let short = peak + 0.2 - (targets[0] + targets[1]);
    if short > 0.0 {
        targets[0] = grid_round(targets[0] + short + 0.001);
    }
    let prosumers = (0..2)
        .map(|i| {
            let theta = grid_round(rng.random_range(0.5..2.0));
            let mut p = scalar_prosumer(horizon, theta, targets[i], supply[i].clone());
            p.x0 = vec![grid_round(rng.random_range(0.0..5.0))];
            let goal = p.x0[0] + targets[i] * horizon as f64;
            p.utility.terminal_weight[(0, 0)] = grid_round(rng.random_range(0.0..0.5));
            p.utility.terminal_target = vec![goal];
            p
        })
        .collect();
    scenario(
        format!("pair-{seed}"),
        seed,
        horizon,
        ACTIVE_ONLY,
        stiff_feeder(2),
        prosumers,
    )
}

fn random_psd(rng: &mut ChaCha8Rng, k: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let l = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    let m = &l * l.transpose() * rng.random_range(lo..hi) + DMatrix::identity(k, k) * lo;
    (&m + m.transpose()) * 0.5
}

/// Random feasible community: `N ∈ 2..=10`, `T ∈ 1..=8`, `M ∈ {2, 4, 6}`,
/// one or two states and inputs per prosumer, random trading flags, and a
/// utility magnitude drawn between 1e-8 and 1.
///
/// Net supply is nonnegative, so the all-zero decision is feasible and every
/// prosumer passes the Slater check.
pub fn random_market_scenario(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_prosumers = rng.random_range(2..=10);
    let horizon = rng.random_range(1..=8);
    let k = rng.random_range(1..=3);

    let lines = (1..=k)
        .map(|j| Line {
            from: rng.random_range(0..j),
            to: j,
            resistance_ohm: rng.random_range(1.0..6.0),
            reactance_ohm: rng.random_range(0.5..3.0),
        })
        .collect();
    let feeder = FeederTopology {
        nodes: (0..=k).map(|j| format!("n{j}")).collect(),
        head: 0,
        lines,
        base_voltage_kv: 1.0,
        base_power_kva: 100.0,
        nominal_voltage_pu: 1.0,
        connections: (0..n_prosumers).map(|_| rng.random_range(1..=k)).collect(),
    };

    let magnitude = 10f64.powi(-rng.random_range(0..=8));
    let prosumers = (0..n_prosumers)
        .map(|_| {
            let n = rng.random_range(1..=2);
            let m = rng.random_range(1..=2);
            let x_cap: f64 = rng.random_range(8.0..15.0);
            let u_lo = rng.random_range(-4.0..-1.0);
            let u_hi = rng.random_range(1.0..4.0);
            let p_cap = rng.random_range(4.0..8.0);
            let q_cap = rng.random_range(0.5..2.0);
            let state_targets = (0..horizon)
                .map(|_| {
                    (0..n)
                        .map(|_| rng.random_range(-0.5 * x_cap..0.5 * x_cap))
                        .collect()
                })
                .collect();
            let state_weights = (0..horizon)
                .map(|_| {
                    DMatrix::from_fn(n, n, |r, c| {
                        if r == c {
                            rng.random_range(0.0..0.5) * magnitude
                        } else {
                            0.0
                        }
                    })
                })
                .collect();
            ProsumerSpec {
                a: DMatrix::from_fn(n, n, |r, c| {
                    if r == c {
                        rng.random_range(0.9..1.0)
                    } else {
                        0.0
                    }
                }),
                b: DMatrix::from_fn(n, m, |_, _| rng.random_range(0.3..1.0)),
                x0: (0..n)
                    .map(|_| rng.random_range(-0.5 * x_cap..0.5 * x_cap))
                    .collect(),
                x_lower: vec![-x_cap; n],
                x_upper: vec![x_cap; n],
                u_lower: DMatrix::from_element(m, horizon, u_lo),
                u_upper: DMatrix::from_element(m, horizon, u_hi),
                p_lower: -p_cap,
                p_upper: p_cap,
                q_lower: -q_cap,
                q_upper: q_cap,
                net_supply: (0..horizon).map(|_| rng.random_range(0.0..3.0)).collect(),
                h: (0..m).map(|_| rng.random_range(0.5..1.5)).collect(),
                utility: QuadraticUtility {
                    input_weight: random_psd(&mut rng, m, 0.2, 2.0) * magnitude,
                    input_target: (0..m).map(|_| rng.random_range(-1.0..2.0)).collect(),
                    state_weights,
                    state_targets,
                    terminal_weight: DMatrix::from_fn(n, n, |r, c| {
                        if r == c {
                            rng.random_range(0.0..1.0) * magnitude
                        } else {
                            0.0
                        }
                    }),
                    terminal_target: (0..n)
                        .map(|_| rng.random_range(-0.5 * x_cap..0.5 * x_cap))
                        .collect(),
                },
            }
        })
        .collect();
    let flags = TradingRules {
        reactive_trading: rng.random_bool(0.5),
        limit_trading: rng.random_bool(0.5),
    };
    scenario(
        format!("random-{seed}"),
        seed,
        horizon,
        flags,
        feeder,
        prosumers,
    )
}
