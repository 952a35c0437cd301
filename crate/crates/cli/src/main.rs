//! Command-line runner: single scenario runs, demand sweeps with
//! replications, and configuration validation. Exit status is 0 on success,
//! 1 when the inputs fail validation, and 2 when a run starts and then
//! aborts on a broken invariant.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use corridor_core::config::Config;
use corridor_core::engine::{run, RunSummary, ScenarioConfig};
use corridor_core::network::Network;
use corridor_core::sink::write_rows;
use corridor_core::CoreError;

#[derive(Parser)]
#[command(name = "corridor", version, about = "Corridor traffic simulation runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its CSV outputs.
    Simulate {
        /// Configuration file (bundled corridor when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario number, 1 through 4.
        #[arg(long)]
        scenario: u8,
        /// Demand multiplier applied to every route.
        #[arg(long, default_value_t = 1.0)]
        demand: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the CSV files.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a grid of (scenario, demand multiplier, seed) cells.
    Sweep {
        /// Configuration file (bundled corridor when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario numbers to include (default: all four).
        #[arg(long, value_delimiter = ',')]
        scenarios: Option<Vec<u8>>,
        /// Demand multipliers (default: 0.1 through 2.0 in steps of 0.1).
        #[arg(long, value_delimiter = ',')]
        multipliers: Option<Vec<f64>>,
        /// Replications per (scenario, multiplier); seeds run 1..=reps.
        #[arg(long, default_value_t = 1)]
        reps: u64,
        /// Parallel cells (default: CORRIDOR_SIM_JOBS, then all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory; completed cells found here are not re-run.
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
    },
    /// Check a configuration file and report what it describes.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() {
    // Help and version are successes; any other argument problem is an
    // input failure, the same exit class as a bad configuration.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let failed = e.use_stderr();
            let _ = e.print();
            std::process::exit(if failed { 1 } else { 0 });
        }
    };
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e}");
        if let CoreError::Aborted { diagnostic, .. } = &e {
            eprintln!("{diagnostic}");
        }
        std::process::exit(exit_code(&e));
    }
}

/// 1 for anything wrong with the inputs, 2 for a run that started and then
/// broke an invariant.
fn exit_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Validation(_) | CoreError::Io(_) | CoreError::NonFinite(_) => 1,
        _ => 2,
    }
}

fn dispatch(cmd: Command) -> Result<(), CoreError> {
    match cmd {
        Command::Simulate {
            config,
            scenario,
            demand,
            seed,
            out,
        } => simulate(config.as_deref(), scenario, demand, seed, &out),
        Command::Sweep {
            config,
            scenarios,
            multipliers,
            reps,
            jobs,
            out,
        } => sweep(config.as_deref(), scenarios, multipliers, reps, jobs, &out),
        Command::Validate { config } => validate(&config),
    }
}

/// Loads the named file, or the bundled corridor when no path is given.
/// File errors carry the path so the message names what was missing.
fn load_config(path: Option<&Path>) -> Result<Config, CoreError> {
    match path {
        None => Ok(Config::default_corridor()),
        Some(p) => Config::load(p).map_err(|e| match e {
            CoreError::Io(io) => CoreError::validation(format!("config {}: {io}", p.display())),
            other => other,
        }),
    }
}

fn simulate(
    config: Option<&Path>,
    scenario: u8,
    demand: f64,
    seed: u64,
    out: &Path,
) -> Result<(), CoreError> {
    if !(demand > 0.0 && demand.is_finite()) {
        return Err(CoreError::validation(format!(
            "demand must be positive, got {demand}"
        )));
    }
    let cfg = load_config(config)?;
    let net = Network::build(&cfg)?;
    let scfg = ScenarioConfig::for_scenario(scenario, &net)?
        .with_demand(demand)
        .with_seed(seed);
    let summary = run(&scfg, &net, Some(out))?;
    print_summary(&summary);
    println!("outputs: {}", out.display());
    Ok(())
}

fn print_summary(s: &RunSummary) {
    println!(
        "scenario {}  demand x{}  seed {}",
        s.scenario, s.demand_multiplier, s.seed
    );
    println!(
        "entered {}  exited {}  in network at end {}  held at origins {}",
        s.entered, s.exited, s.in_network, s.gate_queue
    );
    if s.arrived > 0 {
        println!(
            "arrived after warmup {}  travel time {:.1} s total, {:.1} s per vehicle",
            s.arrived,
            s.total_travel_time,
            s.total_travel_time / s.arrived as f64
        );
    } else {
        println!("no vehicles departed after the warmup");
    }
    println!(
        "lane changes {}  stopped steps inside control zones {}",
        s.lane_changes, s.zone_stop_steps
    );
    if s.eq3_violations + s.separation_violations + s.coordination_failures > 0 {
        println!(
            "warnings: spacing violations {}  box separation violations {}  coordination failures {}",
            s.eq3_violations, s.separation_violations, s.coordination_failures
        );
    }
}

fn validate(path: &Path) -> Result<(), CoreError> {
    let cfg = load_config(Some(path))?;
    let net = Network::build(&cfg)?;
    println!(
        "ok: {} links, {} nodes, {} routes, {} conflict zones, {} signal plans, {} detectors",
        net.links.len(),
        net.nodes.len(),
        net.routes.len(),
        net.zones.len(),
        net.signals.len(),
        net.detectors.len()
    );
    Ok(())
}

/// One sweep run: a scenario at one demand level under one seed.
struct Cell {
    scenario: u8,
    multiplier: f64,
    seed: u64,
}

impl Cell {
    /// Directory name under the sweep root. Multipliers print in their
    /// shortest round-trip form, so 0.3 stays `d0.3` and 1.0 becomes `d1`.
    fn dir_name(&self) -> String {
        format!("s{}_d{}_r{}", self.scenario, self.multiplier, self.seed)
    }
}

fn default_multipliers() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 10.0).collect()
}

/// CORRIDOR_SIM_JOBS, then the machine's parallelism.
fn default_jobs() -> usize {
    std::env::var("CORRIDOR_SIM_JOBS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn sweep(
    config: Option<&Path>,
    scenarios: Option<Vec<u8>>,
    multipliers: Option<Vec<f64>>,
    reps: u64,
    jobs: Option<usize>,
    out: &Path,
) -> Result<(), CoreError> {
    let scenarios = match scenarios {
        Some(list) => {
            let mut kept = Vec::new();
            for s in list {
                if !(1..=4).contains(&s) {
                    return Err(CoreError::validation(format!(
                        "scenarios must be within 1..=4, got {s}"
                    )));
                }
                if !kept.contains(&s) {
                    kept.push(s);
                }
            }
            kept
        }
        None => vec![1, 2, 3, 4],
    };
    let multipliers = match multipliers {
        Some(list) => {
            for &m in &list {
                if !(m > 0.0 && m <= 2.0) {
                    return Err(CoreError::validation(format!(
                        "multipliers must lie in (0, 2], got {m}"
                    )));
                }
            }
            list
        }
        None => default_multipliers(),
    };
    if reps < 1 {
        return Err(CoreError::validation("reps must be at least 1".to_string()));
    }
    let cfg = load_config(config)?;
    let net = Network::build(&cfg)?;
    std::fs::create_dir_all(out)?;

    let mut cells = Vec::new();
    for &scenario in &scenarios {
        for &multiplier in &multipliers {
            for seed in 1..=reps {
                cells.push(Cell {
                    scenario,
                    multiplier,
                    seed,
                });
            }
        }
    }

    let mut results: Vec<Option<RunSummary>> = Vec::with_capacity(cells.len());
    let mut pending = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        match read_cell(out, cell) {
            Some(summary) => results.push(Some(summary)),
            None => {
                results.push(None);
                pending.push(i);
            }
        }
    }
    let resumed = cells.len() - pending.len();

    let jobs = jobs
        .unwrap_or_else(default_jobs)
        .clamp(1, pending.len().max(1));
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let results = Mutex::new(results);
    let failure = Mutex::new(None::<CoreError>);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= pending.len() || failure.lock().expect("lock not poisoned").is_some() {
                    return;
                }
                let i = pending[k];
                match run_cell(&net, &cells[i], out) {
                    Ok(summary) => {
                        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                        eprintln!(
                            "[{n}/{}] {}: arrived {}",
                            pending.len(),
                            cells[i].dir_name(),
                            summary.arrived
                        );
                        results.lock().expect("lock not poisoned")[i] = Some(summary);
                    }
                    Err(e) => {
                        *failure.lock().expect("lock not poisoned") = Some(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock not poisoned") {
        return Err(e);
    }

    let rows: Vec<RunSummary> = results
        .into_inner()
        .expect("lock not poisoned")
        .into_iter()
        .map(|r| r.expect("every cell either ran or was resumed"))
        .collect();
    write_rows(&out.join("sweep.csv"), &rows)?;
    println!(
        "{} cells ({} resumed) -> {}",
        cells.len(),
        resumed,
        out.display()
    );
    Ok(())
}

/// A finished cell is a directory holding a parseable `run.csv`; anything
/// else is run from scratch.
fn read_cell(out: &Path, cell: &Cell) -> Option<RunSummary> {
    let path = out.join(cell.dir_name()).join("run.csv");
    let mut reader = csv::Reader::from_path(path).ok()?;
    reader.deserialize().next()?.ok()
}

/// Runs one cell into a scratch directory, then renames it into place, so a
/// cell directory either holds a complete run or does not exist.
fn run_cell(net: &Network, cell: &Cell, out: &Path) -> Result<RunSummary, CoreError> {
    let scfg = ScenarioConfig::for_scenario(cell.scenario, net)?
        .with_demand(cell.multiplier)
        .with_seed(cell.seed);
    let scratch = out.join(format!(".partial_{}", cell.dir_name()));
    if scratch.exists() {
        std::fs::remove_dir_all(&scratch)?;
    }
    let summary = run(&scfg, net, Some(&scratch))?;
    let finished = out.join(cell.dir_name());
    if finished.exists() {
        std::fs::remove_dir_all(&finished)?;
    }
    std::fs::rename(&scratch, &finished)?;
    Ok(summary)
}
