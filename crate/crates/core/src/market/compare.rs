use serde::{Deserialize, Serialize};

use super::{MarketError, WelfareSolution};
use crate::grid::{voltage_profile, SensitivityMatrices};

/// Squared-voltage distance (pu²) within which a node counts as sitting on
/// the band boundary.
pub const BOUNDARY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageExtremes {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Steps with any node on the band boundary.
    pub boundary_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioComparison {
    pub welfare_with_q: f64,
    pub welfare_without_q: f64,
    pub delta: f64,
    /// `delta / |welfare_without_q|` in percent.
    pub delta_percent: f64,
    pub with_q: VoltageExtremes,
    pub without_q: VoltageExtremes,
}

/// Node × step voltages (pu) of a cleared dispatch.
pub fn voltage_table(
    ws: &WelfareSolution,
    sens: &SensitivityMatrices,
) -> Result<Vec<Vec<f64>>, MarketError> {
    let horizon = ws.decisions.first().map_or(0, |d| d.p.len());
    if sens.num_prosumers() != ws.decisions.len() {
        return Err(MarketError::Mismatch(
            "sensitivities and dispatch disagree on N".into(),
        ));
    }
    (0..horizon)
        .map(|t| {
            let p: Vec<f64> = ws.decisions.iter().map(|d| d.p[t]).collect();
            let q: Vec<f64> = ws.decisions.iter().map(|d| d.q[t]).collect();
            Ok(voltage_profile(sens, &p, &q)?)
        })
        .collect()
}

fn extremes(table: &[Vec<f64>], band: (f64, f64)) -> VoltageExtremes {
    let k = table.first().map_or(0, Vec::len);
    let mut min = vec![f64::INFINITY; k];
    let mut max = vec![f64::NEG_INFINITY; k];
    let mut boundary_steps = 0;
    for row in table {
        let mut on_boundary = false;
        for (j, &v) in row.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
            let sq = v * v;
            if (sq - band.0 * band.0).abs() <= BOUNDARY_TOL
                || (sq - band.1 * band.1).abs() <= BOUNDARY_TOL
            {
                on_boundary = true;
            }
        }
        boundary_steps += usize::from(on_boundary);
    }
    VoltageExtremes {
        min,
        max,
        boundary_steps,
    }
}

/// Welfare delta and voltage spread of a run with reactive trading against
/// the same scenario without it.
pub fn compare_scenarios(
    with_q: &WelfareSolution,
    without_q: &WelfareSolution,
    sens: &SensitivityMatrices,
    band: (f64, f64),
) -> Result<ScenarioComparison, MarketError> {
    let shape = |ws: &WelfareSolution| {
        (
            ws.decisions.len(),
            ws.decisions
                .first()
                .map(|d| (d.p.len(), d.l.nrows(), d.u.nrows())),
        )
    };
    if shape(with_q) != shape(without_q) {
        return Err(MarketError::Mismatch(
            "community size, horizon or row count differ".into(),
        ));
    }
    let a = extremes(&voltage_table(with_q, sens)?, band);
    let b = extremes(&voltage_table(without_q, sens)?, band);
    let delta = with_q.welfare - without_q.welfare;
    let delta_percent = if without_q.welfare != 0.0 {
        100.0 * delta / without_q.welfare.abs()
    } else {
        0.0
    };
    Ok(ScenarioComparison {
        welfare_with_q: with_q.welfare,
        welfare_without_q: without_q.welfare,
        delta,
        delta_percent,
        with_q: a,
        without_q: b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::solve_welfare;
    use crate::market::test_support::setup;
    use crate::prosumer::TradingRules;
    use crate::qp::SolverConfig;
    use crate::scenario::random_market_scenario;

    #[test]
    fn reactive_trading_never_lowers_welfare() {
        let s = random_market_scenario(5);
        let sens = s.sensitivities().unwrap();
        let (cs, alloc) = setup(&s);
        let cfg = SolverConfig::default();
        let on = TradingRules {
            reactive_trading: true,
            limit_trading: false,
        };
        let off = TradingRules {
            reactive_trading: false,
            ..on
        };
        let a = solve_welfare(&s.prosumers, &cs, &alloc, on, &cfg).unwrap();
        let b = solve_welfare(&s.prosumers, &cs, &alloc, off, &cfg).unwrap();
        let cmp = compare_scenarios(&a, &b, &sens, (0.95, 1.05)).unwrap();
        assert!(cmp.delta >= -1e-8 * (1.0 + b.welfare.abs()));
        assert_eq!(cmp.with_q.min.len(), sens.num_nodes());
    }

    #[test]
    fn boundary_steps_count_rows_on_the_band() {
        let table = vec![vec![1.0, 1.05], vec![1.0, 1.02], vec![0.95, 1.0]];
        let e = extremes(&table, (0.95, 1.05));
        assert_eq!(e.boundary_steps, 2);
        assert_eq!(e.min, vec![0.95, 1.0]);
        assert_eq!(e.max, vec![1.0, 1.05]);
    }
}
