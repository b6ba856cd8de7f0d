use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Scenario, ScenarioError};
use crate::doe::{allocate_doe, DoeAllocation, InverterLimits};
use crate::grid::{ConstraintSet, SensitivityMatrices};
use crate::market::{
    check_equilibrium, check_nash, solve_welfare, voltage_table, EquilibriumReport, MarketError,
    MarketPrices, WelfareSolution,
};
use crate::prosumer::{simulate_dynamics, trading_income, TradingRules, TrajectoryDecision};
use crate::qp::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub solver: SolverConfig,
    /// Relative payoff-gap and balance tolerance of the equilibrium checks.
    pub tolerance: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            tolerance: 1e-5,
        }
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub doe: f64,
    pub clear: f64,
    pub verify: f64,
}

impl StageTiming {
    pub fn total(&self) -> f64 {
        self.doe + self.clear + self.verify
    }
}

/// Deterministic summary of a run; timing is kept out of the serialized form
/// so identical inputs give identical `report.json` bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub flags: TradingRules,
    pub num_prosumers: usize,
    pub horizon: usize,
    pub num_rows: usize,
    pub welfare: f64,
    pub objective_scale: f64,
    pub trading_income_total: f64,
    pub doe_cover_residual: f64,
    pub max_balance_residual: f64,
    pub kkt_residual: f64,
    pub voltage_min: f64,
    pub voltage_max: f64,
    pub equilibrium: EquilibriumReport,
    pub nash: EquilibriumReport,
    #[serde(skip)]
    pub timing: StageTiming,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.equilibrium.passed && self.nash.passed
    }
}

pub struct PipelineRun {
    pub sens: SensitivityMatrices,
    pub cs: ConstraintSet,
    pub allocation: DoeAllocation,
    pub welfare: WelfareSolution,
    /// Step × node voltages (pu).
    pub voltages: Vec<Vec<f64>>,
    pub report: RunReport,
}

fn market_stage(stage: &'static str) -> impl Fn(MarketError) -> ScenarioError {
    move |source| ScenarioError::Market { stage, source }
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> ScenarioError + '_ {
    move |source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Envelope allocation for a validated scenario.
pub fn scenario_allocation(
    scenario: &Scenario,
    cs: &ConstraintSet,
    cfg: &SolverConfig,
) -> Result<DoeAllocation, ScenarioError> {
    let limits: Vec<InverterLimits> = scenario
        .prosumers
        .iter()
        .map(InverterLimits::from)
        .collect();
    allocate_doe(cs, &limits, scenario.epsilon, cfg).map_err(|source| ScenarioError::Doe {
        stage: "doe",
        source,
    })
}

/// Envelopes, welfare clearing and both equilibrium checks.
pub fn run_pipeline(
    scenario: &Scenario,
    cfg: &PipelineConfig,
) -> Result<PipelineRun, ScenarioError> {
    scenario.validate()?;
    let sens = scenario.sensitivities()?;
    let cs = scenario.constraint_set(&sens)?;
    let prosumers = &scenario.prosumers;
    let rules = scenario.flags;

    let start = Instant::now();
    let allocation = scenario_allocation(scenario, &cs, &cfg.solver)?;
    let doe_time = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let welfare = solve_welfare(prosumers, &cs, &allocation, rules, &cfg.solver)
        .map_err(market_stage("clear"))?;
    let clear_time = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let equilibrium = check_equilibrium(
        &welfare.decisions,
        &welfare.prices,
        rules,
        prosumers,
        &cs,
        &allocation,
        cfg.tolerance,
        &cfg.solver,
    )
    .map_err(market_stage("verify"))?;
    let nash = check_nash(
        &welfare.decisions,
        &welfare.prices,
        rules,
        prosumers,
        &cs,
        &allocation,
        cfg.tolerance,
        &cfg.solver,
    )
    .map_err(market_stage("verify"))?;
    let verify_time = start.elapsed().as_secs_f64();

    let voltages = voltage_table(&welfare, &sens).map_err(market_stage("report"))?;
    let (voltage_min, voltage_max) = voltages
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let kkt = &welfare.kkt_residuals;
    let report = RunReport {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        flags: rules,
        num_prosumers: prosumers.len(),
        horizon: scenario.horizon,
        num_rows: cs.num_rows(),
        welfare: welfare.welfare,
        objective_scale: welfare.objective_scale,
        trading_income_total: welfare
            .decisions
            .iter()
            .map(|d| trading_income(d, &welfare.prices))
            .sum(),
        doe_cover_residual: allocation.cover_residual(&cs),
        max_balance_residual: welfare.balance_residuals.max(),
        kkt_residual: kkt.max(),
        voltage_min,
        voltage_max,
        equilibrium,
        nash,
        timing: StageTiming {
            doe: doe_time,
            clear: clear_time,
            verify: verify_time,
        },
    };
    Ok(PipelineRun {
        sens,
        cs,
        allocation,
        welfare,
        voltages,
        report,
    })
}

impl PipelineRun {
    /// Writes `prices.csv`, `dispatch.csv`, `voltages.csv`, `doe.csv` and
    /// `report.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<(), ScenarioError> {
        std::fs::create_dir_all(dir).map_err(io_error(dir))?;
        let create = |name: &str| {
            let path = dir.join(name);
            File::create(&path)
                .map(BufWriter::new)
                .map_err(|source| ScenarioError::Io {
                    path: path.display().to_string(),
                    source,
                })
        };
        let wrap = |name: &str| {
            let path = dir.join(name).display().to_string();
            move |source| ScenarioError::Io { path, source }
        };
        self.welfare
            .prices
            .write_csv(create("prices.csv")?)
            .map_err(wrap("prices.csv"))?;
        write_dispatch_csv(&self.welfare.decisions, create("dispatch.csv")?)
            .map_err(wrap("dispatch.csv"))?;
        write_voltages_csv(
            &self.voltages,
            &self.sens.node_names,
            create("voltages.csv")?,
        )
        .map_err(wrap("voltages.csv"))?;
        self.allocation
            .write_csv(&self.cs, create("doe.csv")?)
            .map_err(|source| ScenarioError::Doe {
                stage: "report",
                source,
            })?;
        let mut out = create("report.json")?;
        let json = serde_json::to_string_pretty(&self.report).expect("report serializes");
        writeln!(out, "{json}").map_err(wrap("report.json"))?;
        out.flush().map_err(wrap("report.json"))
    }
}

/// Writes `prosumer,t,p,q,u_1..u_m,l_1..l_M`; prosumers with fewer inputs
/// leave the trailing input cells empty.
pub fn write_dispatch_csv<W: Write>(
    decisions: &[TrajectoryDecision],
    out: W,
) -> std::io::Result<()> {
    let m = decisions.iter().map(|d| d.u.nrows()).max().unwrap_or(0);
    let rows = decisions.first().map_or(0, |d| d.l.nrows());
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["prosumer".to_string(), "t".into(), "p".into(), "q".into()];
    header.extend((1..=m).map(|k| format!("u_{k}")));
    header.extend((1..=rows).map(|r| format!("l_{r}")));
    wtr.write_record(&header)?;
    for (i, d) in decisions.iter().enumerate() {
        for t in 0..d.p.len() {
            let mut rec = vec![
                i.to_string(),
                t.to_string(),
                d.p[t].to_string(),
                d.q[t].to_string(),
            ];
            rec.extend((0..m).map(|k| {
                if k < d.u.nrows() {
                    d.u[(k, t)].to_string()
                } else {
                    String::new()
                }
            }));
            rec.extend(d.l.column(t).iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()
}

/// Writes `t,<node names…>` with one row of voltages (pu) per step.
pub fn write_voltages_csv<W: Write>(
    table: &[Vec<f64>],
    names: &[String],
    out: W,
) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    wtr.write_record(&header)?;
    for (t, row) in table.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        wtr.write_record(&rec)?;
    }
    wtr.flush()
}

fn parse_cell(rec: &csv::StringRecord, col: usize, line: usize) -> Result<f64, ScenarioError> {
    let cell = rec
        .get(col)
        .ok_or_else(|| ScenarioError::Invalid(format!("line {line}: missing column {col}")))?;
    cell.trim()
        .parse()
        .map_err(|e| ScenarioError::Invalid(format!("line {line}, column {col}: `{cell}`: {e}")))
}

fn csv_records<R: Read>(
    input: R,
) -> Result<(csv::StringRecord, Vec<csv::StringRecord>), ScenarioError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr
        .headers()
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?
        .clone();
    let records = rdr
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    Ok((header, records))
}

/// Reads a file written by [`MarketPrices::write_csv`].
pub fn read_prices_csv<R: Read>(
    input: R,
    horizon: usize,
    rows: usize,
) -> Result<MarketPrices, ScenarioError> {
    let (header, records) = csv_records(input)?;
    if header.len() != 3 + rows || records.len() != horizon {
        return Err(ScenarioError::Invalid(format!(
            "prices table is {} × {}, expected {horizon} × {}",
            records.len(),
            header.len(),
            3 + rows
        )));
    }
    let mut prices = MarketPrices::zeros(horizon, rows);
    for (line, rec) in records.iter().enumerate() {
        let t = parse_cell(rec, 0, line + 2)? as usize;
        if t != line {
            return Err(ScenarioError::Invalid(format!(
                "line {}: step {t} out of order",
                line + 2
            )));
        }
        prices.lambda[t] = parse_cell(rec, 1, line + 2)?;
        prices.gamma[t] = parse_cell(rec, 2, line + 2)?;
        for r in 0..rows {
            prices.beta[(r, t)] = parse_cell(rec, 3 + r, line + 2)?;
        }
    }
    Ok(prices)
}

/// Reads a file written by [`write_dispatch_csv`]; states are rebuilt from
/// the inputs through each prosumer's dynamics.
pub fn read_dispatch_csv<R: Read>(
    input: R,
    scenario: &Scenario,
    rows: usize,
) -> Result<Vec<TrajectoryDecision>, ScenarioError> {
    let (header, records) = csv_records(input)?;
    let m_max = scenario
        .prosumers
        .iter()
        .map(|p| p.num_inputs())
        .max()
        .unwrap_or(0);
    let horizon = scenario.horizon;
    if header.len() != 4 + m_max + rows || records.len() != horizon * scenario.prosumers.len() {
        return Err(ScenarioError::Invalid(
            "dispatch table does not match the scenario".into(),
        ));
    }
    let mut decisions: Vec<TrajectoryDecision> = scenario
        .prosumers
        .iter()
        .map(|p| TrajectoryDecision::zeros(p, rows))
        .collect();
    let mut seen = vec![false; records.len()];
    for (line, rec) in records.iter().enumerate() {
        let line = line + 2;
        let i = parse_cell(rec, 0, line)? as usize;
        let t = parse_cell(rec, 1, line)? as usize;
        if i >= decisions.len()
            || t >= horizon
            || std::mem::replace(&mut seen[i * horizon + t], true)
        {
            return Err(ScenarioError::Invalid(format!(
                "line {line}: bad or repeated (prosumer, t)"
            )));
        }
        let d = &mut decisions[i];
        d.p[t] = parse_cell(rec, 2, line)?;
        d.q[t] = parse_cell(rec, 3, line)?;
        for k in 0..d.u.nrows() {
            d.u[(k, t)] = parse_cell(rec, 4 + k, line)?;
        }
        for r in 0..rows {
            d.l[(r, t)] = parse_cell(rec, 4 + m_max + r, line)?;
        }
    }
    for (i, d) in decisions.iter_mut().enumerate() {
        d.x = simulate_dynamics(&scenario.prosumers[i], &d.u)
            .map_err(|source| ScenarioError::Prosumer { index: i, source })?;
    }
    Ok(decisions)
}

/// Re-checks a dispatch and price table against a scenario.
pub fn verify_files(
    scenario: &Scenario,
    dispatch: &Path,
    prices: &Path,
    cfg: &PipelineConfig,
) -> Result<EquilibriumReport, ScenarioError> {
    scenario.validate()?;
    let sens = scenario.sensitivities()?;
    let cs = scenario.constraint_set(&sens)?;
    let decisions = read_dispatch_csv(
        File::open(dispatch).map_err(io_error(dispatch))?,
        scenario,
        cs.num_rows(),
    )?;
    let prices = read_prices_csv(
        File::open(prices).map_err(io_error(prices))?,
        scenario.horizon,
        cs.num_rows(),
    )?;
    let allocation = scenario_allocation(scenario, &cs, &cfg.solver)?;
    check_nash(
        &decisions,
        &prices,
        scenario.flags,
        &scenario.prosumers,
        &cs,
        &allocation,
        cfg.tolerance,
        &cfg.solver,
    )
    .map_err(market_stage("verify"))
}
