use clap::{Parser, Subcommand};
use pod_core::scenario::ScenarioConfig;
use pod_runner::run::{load_scenario, RunOptions};
use pod_runner::serve::{ServeOptions, Server};
use pod_runner::sweep::{sweep, write_sweep_outputs, Grid};
use pod_runner::RunnerError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pod", version, about = "Flying-smartphone simulation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario to its duration; writes telemetry.csv and summary.json.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override the scenario duration, seconds.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a parameter grid such as "stabilizer.k=0.05,0.1;stabilizer.c=0.25,0.5".
    Sweep {
        scenario: PathBuf,
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Serve the simulation in real time over WebSocket.
    Serve {
        scenario: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Simulated seconds per wall second; 0 runs unpaced.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Stop after this much simulated time.
        #[arg(long)]
        duration: Option<f64>,
        /// Append every applied input to this JSON-lines trace.
        #[arg(long)]
        record: Option<PathBuf>,
        /// Inject the inputs of a recorded trace at their ticks.
        #[arg(long)]
        replay: Option<PathBuf>,
        /// Write telemetry.csv and summary.json here on exit.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default scenario.
    Defaults,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(command: Command) -> Result<(), RunnerError> {
    match command {
        Command::Run { scenario, seed, duration, out } => {
            let summary = pod_runner::run::run(&scenario, &RunOptions { seed, duration }, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
        }
        Command::Sweep { scenario, grid, out } => {
            let grid: Grid = grid.parse()?;
            let cfg = load_scenario(&scenario)?;
            let rows = sweep(&cfg, &grid)?;
            write_sweep_outputs(&out, &grid, &rows)?;
            println!("{}", serde_json::to_string_pretty(&pod_runner::sweep::best_json(&rows)).expect("json"));
        }
        Command::Serve { scenario, port, host, speed, duration, record, replay, out } => {
            let cfg = load_scenario(&scenario)?;
            let speed = (speed > 0.0).then_some(speed);
            let server = Server::bind(cfg, ServeOptions { host, port, speed, duration, record, replay, out })?;
            let summary = server.run()?;
            log::info!("served {:.1} s of simulated time", summary.sim_time_s);
        }
        Command::Defaults => println!("{}", ScenarioConfig::default().to_json_pretty()),
    }
    Ok(())
}
