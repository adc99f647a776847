//! `microsim`: run scenarios, query the generator predictor, time the
//! capacity cases and validate configuration files.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 invariant
//! violation inside a run.

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use microsim_core::registry::{APPLICATION_FILE, CLUSTER_FILE, INSTANCES_FILE, SCENARIO_FILE};
use microsim_core::scenarios;
use microsim_core::{predict, Scenario, SimError, Simulation};

#[derive(Parser, Debug)]
#[command(name = "microsim", version, about = "Discrete-event microservice simulator")]
struct Cli {
    /// Increase log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario and write CSV reports.
    Run(RunArgs),
    /// Print predicted clients, request rate and cumulative requests.
    Predict(PredictArgs),
    /// Time synthetic capacity cases.
    Bench(BenchArgs),
    /// Parse and check a scenario without running it.
    Validate(ScenarioArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ScenarioArgs {
    /// Built-in scenario name (minimal, sockshop, sockshop-testbed) or a
    /// directory holding the four scenario files.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    application: Option<PathBuf>,
    #[arg(long)]
    instances: Option<PathBuf>,
    #[arg(long)]
    cluster: Option<PathBuf>,
    #[arg(long = "scenario-file")]
    scenario_file: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    input: ScenarioArgs,
    /// Output directory for the CSV files and summary.
    #[arg(long, env = "MICROSIM_OUT", default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Scaling policy override: none, horizontal or vertical.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long, default_value_t = 1000.0)]
    clients: f64,
    #[arg(long = "spawn-rate", default_value_t = 100.0)]
    spawn_rate: f64,
    #[arg(long = "wait-min", default_value_t = 5.0)]
    wait_min: f64,
    #[arg(long = "wait-max", default_value_t = 15.0)]
    wait_max: f64,
    /// Times in seconds; repeat or separate with commas.
    #[arg(short, long = "time", value_delimiter = ',', default_values_t = [0.0, 5.0, 10.0, 60.0])]
    t: Vec<f64>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Case ids: smoke, 1a, 1b, 2a, 2b, 3a, 3b, 4a, 4b.
    #[arg(default_values_t = ["smoke".to_string()])]
    cases: Vec<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Invariant(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Invariant(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Invariant(_) => 2,
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Invariant(_) => CliError::Invariant(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

fn config<E: fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("microsim: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Resolve the scenario from a preset name, a directory, explicit file
/// paths, or a directory with some files overridden.
fn load_scenario(a: &ScenarioArgs) -> Result<Scenario, CliError> {
    let files = [&a.application, &a.instances, &a.cluster, &a.scenario_file];
    let any_file = files.iter().any(|f| f.is_some());
    let dir = match &a.scenario {
        Some(name) if Path::new(name).is_dir() => Some(PathBuf::from(name)),
        Some(name) => {
            // `examples/sockshop` names the shipped example of that name
            let key = name.trim_end_matches('/');
            let key = key.strip_prefix("examples/").unwrap_or(key);
            return match scenarios::preset(key) {
                Some(_) if any_file => Err(CliError::Config(format!(
                    "built-in scenario {key:?} cannot be combined with file flags"
                ))),
                Some(s) => s.map_err(config),
                None => Err(CliError::Config(format!(
                    "{name}: not a directory and not one of {}",
                    scenarios::PRESETS.join(", ")
                ))),
            };
        }
        None => None,
    };
    let pick = |flag: &Option<PathBuf>, file: &str, opt: &str| match (flag, &dir) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(d)) => Ok(d.join(file)),
        (None, None) => Err(CliError::Config(format!(
            "missing --{opt} (or pass --scenario with a built-in name or directory)"
        ))),
    };
    let app = pick(&a.application, APPLICATION_FILE, "application")?;
    let inst = pick(&a.instances, INSTANCES_FILE, "instances")?;
    let cl = pick(&a.cluster, CLUSTER_FILE, "cluster")?;
    let sc = pick(&a.scenario_file, SCENARIO_FILE, "scenario-file")?;
    Scenario::load_files(&app, &inst, &cl, &sc).map_err(config)
}

fn cmd_run(a: RunArgs) -> Result<(), CliError> {
    let mut scenario = load_scenario(&a.input)?;
    if let Some(seed) = a.seed {
        scenario.config.seed = seed;
    }
    if let Some(p) = a.policy {
        scenario.config.scaling_policy = p;
    }
    let sim = Simulation::new(&scenario)?;
    let started = Instant::now();
    let out = sim.run()?;
    log::info!(
        "{} events in {:.3} s wall",
        out.summary.processed,
        started.elapsed().as_secs_f64()
    );
    out.report.write_dir(&a.out).map_err(config)?;
    print!("{}", out.report.summary_text());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    if !(a.wait_min > 0.0 && a.wait_min <= a.wait_max) {
        return Err(CliError::Config(format!(
            "wait interval [{}, {}] needs 0 < min <= max",
            a.wait_min, a.wait_max
        )));
    }
    if !(a.clients >= 0.0 && a.spawn_rate > 0.0) {
        return Err(CliError::Config("need clients >= 0 and spawn-rate > 0".into()));
    }
    println!("{:>10} {:>12} {:>12} {:>14}", "t_s", "clients", "rate_rps", "cumulative");
    for &t in &a.t {
        if t < 0.0 {
            return Err(CliError::Config(format!("time {t} is negative")));
        }
        let p = predict(t, a.clients, a.spawn_rate, a.wait_min, a.wait_max);
        println!("{t:>10.3} {:>12.3} {:>12.3} {:>14.3}", p.clients, p.rate, p.cumulative);
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<(), CliError> {
    let mut cases = Vec::new();
    for id in &a.cases {
        let case = scenarios::capacity_case(id).ok_or_else(|| {
            let ids: Vec<_> = scenarios::CAPACITY_CASES.iter().map(|c| c.id).collect();
            CliError::Config(format!("unknown case {id:?}; expected one of {}", ids.join(", ")))
        })?;
        cases.push(case);
    }
    println!(
        "{:<6} {:>9} {:>9} {:>9} {:>11} {:>11} {:>9} {:>12}",
        "case", "requests", "services", "instances", "cloudlets", "events", "wall_s", "events_per_s"
    );
    for case in cases {
        let scenario = scenarios::synthesize(&case, a.seed);
        let sim = Simulation::new(&scenario)?;
        let started = Instant::now();
        let out = sim.run()?;
        let wall = started.elapsed().as_secs_f64();
        println!(
            "{:<6} {:>9} {:>9} {:>9} {:>11} {:>11} {:>9.3} {:>12.0}",
            case.id,
            case.requests,
            case.services,
            case.instances,
            out.report.cloudlets,
            out.summary.processed,
            wall,
            out.summary.processed as f64 / wall.max(1e-9)
        );
    }
    Ok(())
}

fn cmd_validate(a: ScenarioArgs) -> Result<(), CliError> {
    let s = load_scenario(&a)?;
    s.graph().map_err(config)?;
    Simulation::new(&s)?;
    let replicas: u32 = s.replica_sets.iter().map(|r| r.replicas).sum();
    println!(
        "ok: {} apis, {} services, {} instances, {} vms",
        s.apis.len(),
        s.services.len(),
        replicas,
        s.vms.len()
    );
    Ok(())
}
