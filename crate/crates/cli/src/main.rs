//! `gradpoly`: run scenarios, audit traces, and check the discrete
//! operators against closed-form fields.
//!
//! Exit codes: 0 success, 1 a check or certificate failed, 2 usage error.
//! Failures print a one-line JSON report on stdout.

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use serde_json::json;
use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use gradpoly::config::{parse_config, ConfigError};
use gradpoly::oracle::{
    integrability_report, operator_convergence_study, ExampleFamily, COARSE_CELLS, DEFAULT_CELLS,
};
use gradpoly::run::{run_scenario, RunError, RunOptions};
use gradpoly::trace::{certify, read_trace, TraceError};

/// Environment variable that replaces the configured output directory.
const OUT_DIR_ENV: &str = "GRADPOLY_OUT_DIR";

#[derive(Parser)]
#[command(name = "gradpoly", version, about = "Quasistatic SMA evolution with certified increments")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress; `run` also records solver iterations in the trace.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and certify its trajectory.
    Run(RunArgs),
    /// Compare the discrete operators with the closed-form example fields.
    Oracle(OracleArgs),
    /// Recompute certificate verdicts from a trace file.
    Certify {
        /// Trace written by `run`.
        trace: PathBuf,
    },
    /// Parse and validate a scenario file without running it.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the environment and the scenario file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    /// Use only very coarse grids (the order checks are expected to fail).
    #[arg(long)]
    coarse: bool,
    /// Cells per axis of the nested grids.
    #[arg(long, value_delimiter = ',')]
    cells: Option<Vec<usize>>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

enum Outcome {
    Pass,
    Fail(&'static str, Vec<String>),
    Usage(Vec<String>),
}

fn report(command: &str, outcome: Outcome) -> ExitCode {
    let (code, kind, reasons) = match outcome {
        Outcome::Pass => return ExitCode::SUCCESS,
        Outcome::Fail(kind, r) => (1u8, kind, r),
        Outcome::Usage(r) => (2u8, "usage", r),
    };
    for r in &reasons {
        error!("{r}");
    }
    println!("{}", json!({ "command": command, "status": "failed", "exit_code": code, "kind": kind, "reasons": reasons }));
    ExitCode::from(code)
}

fn config_outcome(e: ConfigError) -> Outcome {
    match e {
        ConfigError::Validation(list) => Outcome::Usage(list),
        other => Outcome::Usage(vec![other.to_string()]),
    }
}

fn cmd_run(args: &RunArgs, verbose: bool) -> Outcome {
    let mut cfg = match parse_config(&args.config) {
        Ok(c) => c,
        Err(e) => return config_outcome(e),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out_dir = args
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let opts = RunOptions { out_dir, verbose };
    match run_scenario(&cfg, &opts) {
        Ok(rep) => {
            info!("trace written to {}", rep.trace_path.display());
            let last = rep.trace.steps.last().expect("initial step");
            info!(
                "final energy {:.9e}, total dissipation {:.3e}, balance residual {:.3e}",
                last.energy.total, last.cumulative_dissipation, last.energy_balance_residual
            );
            if rep.verdicts.all_pass() {
                Outcome::Pass
            } else {
                Outcome::Fail("certificate", rep.verdicts.failures)
            }
        }
        Err(RunError::Config(e)) => config_outcome(e),
        Err(RunError::Evolution(e)) => Outcome::Fail("solver", vec![e.to_string()]),
        Err(e @ RunError::Output { .. }) => Outcome::Fail("io", vec![e.to_string()]),
    }
}

fn cmd_oracle(args: &OracleArgs) -> Outcome {
    let fam = match ExampleFamily::new(args.epsilon) {
        Ok(f) => f,
        Err(e) => return Outcome::Usage(vec![e.to_string()]),
    };
    let cells = match (&args.cells, args.coarse) {
        (Some(c), _) => c.clone(),
        (None, true) => COARSE_CELLS.to_vec(),
        (None, false) => DEFAULT_CELLS.to_vec(),
    };
    if let Some(&c) = cells.iter().find(|&&c| c < 2) {
        return Outcome::Usage(vec![format!("grids need at least 2 cells per axis, got {c}")]);
    }
    let study = match operator_convergence_study(&fam, &cells, 1.8) {
        Ok(s) => s,
        Err(e) => return Outcome::Usage(vec![e.to_string()]),
    };
    let integ = integrability_report(&fam);
    if args.json {
        println!("{}", json!({ "convergence": study, "integrability": integ }));
    } else {
        println!("epsilon = {}  cells = {:?}  nested = {}", fam.epsilon, study.cells, study.nested);
        println!("{:<22} {:>8}  {:<9} errors", "operator", "order", "verdict");
        for o in &study.operators {
            let verdict = match (o.asserted, o.passes) {
                (false, _) => "info",
                (true, true) => "ok",
                (true, false) => "FAIL",
            };
            let errs: Vec<String> = o.errors.iter().map(|e| format!("{e:.3e}")).collect();
            println!("{:<22} {:>8.3}  {:<9} {}", o.name, o.order, verdict, errs.join(" "));
        }
        println!();
        println!("{:<36} {:>9} {:>9} {:>14} {:>14}", "integral", "finite", "expected", "estimate", "analytic");
        for e in &integ.entries {
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
            println!(
                "{:<36} {:>9} {:>9} {:>14} {:>14}{}",
                format!("{:?}", e.integrand),
                e.finite,
                e.analytic.is_some(),
                fmt(e.estimate),
                fmt(e.analytic),
                if e.agrees { "" } else { "  MISMATCH" }
            );
        }
    }
    let mut reasons: Vec<String> = study
        .operators
        .iter()
        .filter(|o| !o.passes)
        .map(|o| format!("{}: measured order {:.3} below {}", o.name, o.order, study.min_order))
        .collect();
    reasons.extend(
        integ
            .entries
            .iter()
            .filter(|e| !e.agrees)
            .map(|e| format!("integrability of {:?} disagrees with the analytic threshold", e.integrand)),
    );
    if reasons.is_empty() {
        Outcome::Pass
    } else {
        Outcome::Fail("oracle", reasons)
    }
}

fn cmd_certify(path: &PathBuf) -> Outcome {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) => return Outcome::Usage(vec![format!("cannot open {}: {e}", path.display())]),
    };
    let parsed = match read_trace(BufReader::new(file)) {
        Ok(p) => p,
        Err(e @ (TraceError::Empty | TraceError::MissingHeader)) => {
            return Outcome::Usage(vec![format!("{}: {e}", path.display())])
        }
        Err(e) => return Outcome::Fail("trace", vec![e.to_string()]),
    };
    let rep = certify(&parsed);
    println!("{}", serde_json::to_string(&rep.verdicts).expect("verdicts serialize"));
    let mut reasons = rep.verdicts.failures.clone();
    if !rep.matches_recorded {
        reasons.push("recomputed verdicts differ from the ones recorded in the trace".into());
    }
    if reasons.is_empty() {
        Outcome::Pass
    } else {
        Outcome::Fail("certificate", reasons)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version are not failures
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return report("gradpoly", Outcome::Usage(vec![e.kind().to_string()]));
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            return report("gradpoly", Outcome::Usage(vec!["--threads must be at least 1".into()]));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not configure the thread pool: {e}");
        }
    }
    match &cli.command {
        Command::Run(a) => report("run", cmd_run(a, cli.verbose)),
        Command::Oracle(a) => report("oracle", cmd_oracle(a)),
        Command::Certify { trace } => report("certify", cmd_certify(trace)),
        Command::ValidateConfig { config } => {
            let outcome = match parse_config(config) {
                Ok(cfg) => {
                    println!("{}", json!({ "status": "valid", "steps": cfg.time.steps, "nodes": cfg.grid.nodes }));
                    Outcome::Pass
                }
                Err(ConfigError::Validation(list)) => Outcome::Fail("validation", list),
                Err(e) => Outcome::Usage(vec![e.to_string()]),
            };
            report("validate-config", outcome)
        }
    }
}
