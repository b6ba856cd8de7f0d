use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use doe_market::market::{
    clear_decentralized, compare_scenarios, solve_welfare, DecentralizedConfig, ScenarioComparison,
    StepSizes, WelfareSolution,
};
use doe_market::prosumer::TradingRules;
use doe_market::qp::SolverConfig;
use doe_market::scenario::{
    build_ieee13_scenario, load_scenario, run_pipeline, save_scenario, scenario_allocation,
    verify_files, write_dispatch_csv, PipelineConfig, PipelineRun, Scale, Scenario,
};

#[derive(Parser)]
#[command(
    name = "doe-market",
    version,
    about = "Envelope allocation and market clearing on radial feeders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Relative tolerance of the equilibrium checks.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// KKT tolerance of the QP solver.
    #[arg(long, default_value_t = 1e-8)]
    kkt_tol: f64,
}

impl Common {
    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            solver: SolverConfig {
                kkt_tolerance: self.kkt_tol,
                ..SolverConfig::default()
            },
            tolerance: self.tol,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the IEEE 13-node scenario.
    Gen {
        #[arg(long, default_value = "3x1")]
        scale: Scale,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Allocate operating envelopes and write doe.csv.
    Doe {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Clear the market centrally, verify the equilibrium and write all outputs.
    Clear {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check a dispatch and price table against a scenario.
    Verify {
        scenario: PathBuf,
        #[arg(long)]
        dispatch: PathBuf,
        #[arg(long)]
        prices: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Clear the market by iterative price updates.
    Decentralized {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        rho_p: f64,
        #[arg(long, default_value_t = 0.5)]
        rho_q: f64,
        #[arg(long, default_value_t = 0.5)]
        rho_l: f64,
        #[arg(long, default_value_t = 5000)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-4)]
        residual_tol: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Time every stage and compare welfare with and without reactive-power trading.
    Bench {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare welfare and voltages with and without reactive-power trading.
    Report {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load(path: &Path) -> Result<Scenario> {
    let s = load_scenario(path)?;
    s.validate()
        .with_context(|| format!("{}", path.display()))?;
    Ok(s)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn compare_without_q(
    s: &Scenario,
    run: &PipelineRun,
    cfg: &PipelineConfig,
) -> Result<(WelfareSolution, ScenarioComparison)> {
    let off = TradingRules {
        reactive_trading: false,
        ..s.flags
    };
    let without_q = solve_welfare(&s.prosumers, &run.cs, &run.allocation, off, &cfg.solver)?;
    let cmp = compare_scenarios(
        &run.welfare,
        &without_q,
        &run.sens,
        (s.band.v_min, s.band.v_max),
    )?;
    Ok((without_q, cmp))
}

fn status(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen { scale, seed, out } => {
            save_scenario(&build_ieee13_scenario(scale, seed)?, &out)?;
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Doe {
            scenario,
            out,
            common,
        } => {
            let s = load(&scenario)?;
            let cs = s.constraint_set(&s.sensitivities()?)?;
            let alloc = scenario_allocation(&s, &cs, &common.pipeline().solver)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("doe.csv");
            alloc.write_csv(&cs, std::fs::File::create(&path)?)?;
            println!(
                "cover residual {:e}; wrote {}",
                alloc.cover_residual(&cs),
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Clear {
            scenario,
            out,
            common,
        } => {
            let s = load(&scenario)?;
            let run = run_pipeline(&s, &common.pipeline())?;
            run.write_outputs(&out)?;
            let r = &run.report;
            println!(
                "welfare {:.6e}  balance {:.2e}  max gap {:.2e}  voltages [{:.4}, {:.4}]  {:.2}s",
                r.welfare,
                r.max_balance_residual,
                r.equilibrium
                    .relative_gaps
                    .iter()
                    .cloned()
                    .fold(0.0, f64::max),
                r.voltage_min,
                r.voltage_max,
                r.timing.total()
            );
            println!(
                "equilibrium {}",
                if r.passed() {
                    "verified"
                } else {
                    "NOT verified"
                }
            );
            Ok(status(r.passed()))
        }
        Command::Verify {
            scenario,
            dispatch,
            prices,
            common,
        } => {
            let s = load(&scenario)?;
            let report = verify_files(&s, &dispatch, &prices, &common.pipeline())?;
            let worst = report.relative_gaps.iter().cloned().fold(0.0, f64::max);
            println!(
                "max relative gap {worst:.3e}  balance {:.3e}  infeasibility {:.3e}",
                report.max_balance_residual, report.max_infeasibility
            );
            println!("{}", if report.passed { "PASS" } else { "FAIL" });
            Ok(status(report.passed))
        }
        Command::Decentralized {
            scenario,
            out,
            rho_p,
            rho_q,
            rho_l,
            max_iters,
            residual_tol,
            common,
        } => {
            let s = load(&scenario)?;
            let cfg = common.pipeline();
            let cs = s.constraint_set(&s.sensitivities()?)?;
            let alloc = scenario_allocation(&s, &cs, &cfg.solver)?;
            let dcfg = DecentralizedConfig {
                max_iters,
                residual_tol,
                solver: cfg.solver,
            };
            let steps = StepSizes {
                rho_p,
                rho_q,
                rho_l,
            };
            let outcome =
                clear_decentralized(&s.prosumers, &cs, &alloc, s.flags, steps, &dcfg, None)?;
            std::fs::create_dir_all(&out)?;
            outcome
                .prices
                .write_csv(std::fs::File::create(out.join("prices.csv"))?)?;
            write_dispatch_csv(
                &outcome.decisions,
                std::fs::File::create(out.join("dispatch.csv"))?,
            )?;
            let residuals: Vec<(usize, f64)> = outcome
                .trace
                .iter()
                .map(|e| (e.iteration, e.residual))
                .collect();
            write_json(&out.join("trace.json"), &residuals)?;
            println!("converged in {} iterations", outcome.iterations);
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { scenario, common } => {
            let s = load(&scenario)?;
            let cfg = common.pipeline();
            let run = run_pipeline(&s, &cfg)?;
            let start = Instant::now();
            let (without_q, cmp) = compare_without_q(&s, &run, &cfg)?;
            let clear_off = start.elapsed().as_secs_f64();
            let t = run.report.timing;
            println!(
                "prosumers {}  rows {}  horizon {}",
                s.prosumers.len(),
                run.cs.num_rows(),
                s.horizon
            );
            println!("doe        {:>9.3}s", t.doe);
            println!("clear      {:>9.3}s", t.clear);
            println!("verify     {:>9.3}s", t.verify);
            println!("clear -q   {clear_off:>9.3}s");
            println!("total      {:>9.3}s", t.total() + clear_off);
            println!("scenario,welfare_with_q,welfare_without_q,delta_percent,boundary_steps_with_q,boundary_steps_without_q");
            println!(
                "{},{:e},{:e},{:.6},{},{}",
                s.name,
                cmp.welfare_with_q,
                without_q.welfare,
                cmp.delta_percent,
                cmp.with_q.boundary_steps,
                cmp.without_q.boundary_steps
            );
            Ok(status(run.report.passed()))
        }
        Command::Report {
            scenario,
            out,
            common,
        } => {
            let s = load(&scenario)?;
            let cfg = common.pipeline();
            let with_q = run_pipeline(&s, &cfg)?;
            let (_, cmp) = compare_without_q(&s, &with_q, &cfg)?;
            with_q.write_outputs(&out)?;
            write_json(&out.join("comparison.json"), &cmp)?;
            println!(
                "welfare with q {:.6e}, without q {:.6e}, delta {:+.4}%",
                cmp.welfare_with_q, cmp.welfare_without_q, cmp.delta_percent
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
