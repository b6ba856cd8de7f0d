mod common;

use proptest::prelude::*;

use common::{ac_voltages, enumerate_qp, random_qp};
use doe_market::doe::{doe_contains, InverterLimits};
use doe_market::grid::{build_sensitivities, voltage_profile, FeederTopology, Line};
use doe_market::market::{solve_welfare, verify_nash, BalanceResiduals};
use doe_market::prosumer::{trading_income, TradingRules};
use doe_market::qp::{check_kkt, solve_qp, SolveStatus, SolverConfig};
use doe_market::scenario::{parse_scenario, random_market_scenario, scenario_allocation};

fn random_feeder(seed: u64, n: usize) -> FeederTopology {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=6);
    FeederTopology {
        nodes: (0..=k).map(|j| format!("n{j}")).collect(),
        head: 0,
        lines: (1..=k)
            .map(|j| Line {
                from: rng.random_range(0..j),
                to: j,
                resistance_ohm: rng.random_range(0.01..0.5),
                reactance_ohm: rng.random_range(0.01..0.5),
            })
            .collect(),
        base_voltage_kv: 4.16,
        base_power_kva: 1000.0,
        nominal_voltage_pu: 1.0,
        connections: (0..n).map(|_| rng.random_range(1..=k)).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn optimal_returns_pass_kkt(seed in 1000u64..1_000_000) {
        let (qp, infeasible) = random_qp(seed);
        let sol = solve_qp(&qp, &SolverConfig::default()).unwrap();
        if sol.status == SolveStatus::Optimal {
            prop_assert!(!infeasible);
            prop_assert!(check_kkt(&qp, &sol, 1e-8).unwrap().passed);
        } else {
            prop_assert_eq!(sol.status, SolveStatus::Infeasible);
            prop_assert!(infeasible);
            prop_assert!(enumerate_qp(&qp).is_none());
        }
    }

    #[test]
    fn objective_scaling_keeps_the_minimizer(seed in 1000u64..1_000_000, s in 1e-3f64..1e3) {
        let (qp, infeasible) = random_qp(seed);
        prop_assume!(!infeasible && seed % 3 != 2);
        let cfg = SolverConfig::default();
        let a = solve_qp(&qp, &cfg).unwrap();
        let b = solve_qp(&qp.with_objective_scaled(s), &cfg).unwrap();
        prop_assert_eq!(a.status, SolveStatus::Optimal);
        prop_assert_eq!(b.status, SolveStatus::Optimal);
        for (x, y) in a.primal.iter().zip(&b.primal) {
            prop_assert!((x - y).abs() <= 1e-6 * (1.0 + 1.0 / s), "{x} vs {y}");
        }
    }

    #[test]
    fn squared_voltages_are_affine(seed in any::<u64>(), scale in -5.0f64..5.0) {
        let f = random_feeder(seed, 3);
        let sens = build_sensitivities(&f).unwrap();
        let p = [10.0, -20.0, 5.0];
        let q = [1.0, 2.0, -3.0];
        let zero = sens.squared_voltages(&[0.0; 3], &[0.0; 3]).unwrap();
        let one = sens.squared_voltages(&p, &q).unwrap();
        let ps: Vec<f64> = p.iter().map(|v| v * scale).collect();
        let qs: Vec<f64> = q.iter().map(|v| v * scale).collect();
        let scaled = sens.squared_voltages(&ps, &qs).unwrap();
        for j in 0..zero.len() {
            prop_assert!((zero[j] - 1.0).abs() < 1e-15);
            prop_assert!((scaled[j] - 1.0 - scale * (one[j] - 1.0)).abs() < 1e-12);
        }
        prop_assert_eq!(&sens.node_r, &sens.node_r.transpose());
    }

    #[test]
    fn linearization_error_is_second_order(seed in any::<u64>()) {
        let f = random_feeder(seed, 3);
        let sens = build_sensitivities(&f).unwrap();
        let err = |s: f64| {
            let p = [30.0 * s, -10.0 * s, 20.0 * s];
            let q = [5.0 * s, 5.0 * s, -5.0 * s];
            let lin = voltage_profile(&sens, &p, &q).unwrap();
            let ac = ac_voltages(&f, &p, &q);
            lin.iter().zip(&ac).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (big, small) = (err(1.0), err(0.1));
        prop_assert!(small <= 0.02 * big + 1e-13, "{small} vs {big}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn envelopes_cover_and_imply_global_feasibility(seed in 0u64..10_000, frac in 0.0f64..1.0) {
        let s = random_market_scenario(seed);
        let cs = s.constraint_set(&s.sensitivities().unwrap()).unwrap();
        let alloc = scenario_allocation(&s, &cs, &SolverConfig::default()).unwrap();
        prop_assert!(alloc.cover_residual(&cs) <= 1e-8);
        let t = ((s.horizon as f64 * frac) as usize).min(s.horizon - 1);
        // Each prosumer at the largest multiple of its upper limits inside its envelope.
        let mut p = Vec::new();
        let mut q = Vec::new();
        for (i, spec) in s.prosumers.iter().enumerate() {
            let lim = InverterLimits::from(spec);
            let mut k = 1.0;
            while !doe_contains(&alloc, &cs, i, t, lim.p_upper * k, lim.q_upper * k).unwrap() {
                k *= 0.8;
            }
            p.push(lim.p_upper * k);
            q.push(lim.q_upper * k);
        }
        let f = cs.evaluate_global(t, &p, &q).unwrap();
        for (fr, nr) in f.iter().zip(cs.bound(t)) {
            prop_assert!(*fr <= nr + 1e-12);
        }
    }

    #[test]
    fn cleared_markets_balance_and_transfer_nothing_net(seed in 0u64..10_000) {
        let s = random_market_scenario(seed);
        let cs = s.constraint_set(&s.sensitivities().unwrap()).unwrap();
        let cfg = SolverConfig::default();
        let alloc = scenario_allocation(&s, &cs, &cfg).unwrap();
        let ws = solve_welfare(&s.prosumers, &cs, &alloc, s.flags, &cfg).unwrap();
        prop_assert!(BalanceResiduals::of(&ws.decisions).max() <= 1e-6);
        let income: f64 = ws.decisions.iter().map(|d| trading_income(d, &ws.prices)).sum();
        prop_assert!(income.abs() <= 1e-6, "{income}");
        prop_assert!(verify_nash(&ws, &s.prosumers, &cs, &alloc, 1e-5, &cfg).unwrap().passed);
        if !s.flags.reactive_trading {
            prop_assert!(ws.decisions.iter().all(|d| d.q.iter().all(|&v| v == 0.0)));
        }
        if !s.flags.limit_trading {
            prop_assert!(ws.decisions.iter().all(|d| d.l.iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn more_tradable_commodities_never_lower_welfare(seed in 0u64..10_000) {
        let s = random_market_scenario(seed);
        let cs = s.constraint_set(&s.sensitivities().unwrap()).unwrap();
        let cfg = SolverConfig::default();
        let alloc = scenario_allocation(&s, &cs, &cfg).unwrap();
        let welfare = |reactive_trading, limit_trading| {
            solve_welfare(&s.prosumers, &cs, &alloc, TradingRules { reactive_trading, limit_trading }, &cfg)
                .unwrap()
                .welfare
        };
        let base = welfare(false, false);
        let tol = 1e-9 * (1.0 + base.abs());
        prop_assert!(welfare(true, false) >= base - tol);
        prop_assert!(welfare(false, true) >= base - tol);
        prop_assert!(welfare(true, true) >= welfare(true, false) - tol);
    }

    #[test]
    fn scenario_json_round_trips(seed in any::<u64>()) {
        let s = random_market_scenario(seed);
        let text = s.to_json();
        let back = parse_scenario(&text).unwrap();
        prop_assert_eq!(back.to_json(), text);
    }

    #[test]
    fn clearing_is_deterministic(seed in 0u64..10_000) {
        let s = random_market_scenario(seed);
        let cs = s.constraint_set(&s.sensitivities().unwrap()).unwrap();
        let cfg = SolverConfig::default();
        let alloc = scenario_allocation(&s, &cs, &cfg).unwrap();
        let a = solve_welfare(&s.prosumers, &cs, &alloc, s.flags, &cfg).unwrap();
        let b = solve_welfare(&s.prosumers, &cs, &alloc, s.flags, &cfg).unwrap();
        prop_assert_eq!(a, b);
    }
}
