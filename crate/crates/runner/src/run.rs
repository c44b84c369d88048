use crate::error::RunnerError;
use pod_core::scenario::ScenarioConfig;
use pod_core::world::{RunSummary, TelemetryRow, TraceEntry, World};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const TELEMETRY_FILE: &str = "telemetry.csv";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, RunnerError> {
    let text = fs::read_to_string(path).map_err(RunnerError::io(path))?;
    Ok(ScenarioConfig::from_json(&text)?)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub duration: Option<f64>,
}

impl RunOptions {
    pub fn apply(&self, mut cfg: ScenarioConfig) -> Result<ScenarioConfig, RunnerError> {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(d) = self.duration {
            cfg.duration = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs to the scenario duration. Telemetry is kept only when asked for.
pub fn simulate(cfg: ScenarioConfig, telemetry: bool) -> Result<World, RunnerError> {
    let mut world = World::new(cfg)?;
    world.set_record_telemetry(telemetry);
    world.run_to_end();
    Ok(world)
}

pub fn write_telemetry<W: Write>(rows: &[TelemetryRow], out: W) -> Result<(), RunnerError> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(RunnerError::io("telemetry"))?;
    Ok(())
}

pub fn write_outputs(dir: &Path, rows: &[TelemetryRow], summary: &RunSummary) -> Result<(), RunnerError> {
    fs::create_dir_all(dir).map_err(RunnerError::io(dir))?;
    let csv_path = dir.join(TELEMETRY_FILE);
    let file = fs::File::create(&csv_path).map_err(RunnerError::io(&csv_path))?;
    write_telemetry(rows, std::io::BufWriter::new(file))?;
    let summary_path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(summary).expect("summary serializes") + "\n";
    fs::write(&summary_path, text).map_err(RunnerError::io(&summary_path))?;
    Ok(())
}

/// Fails when the run recorded faults; outputs are written first.
pub fn check_faults(summary: &RunSummary) -> Result<(), RunnerError> {
    match summary.faults.first() {
        Some(first) => Err(RunnerError::Faults { count: summary.faults.len(), first: first.clone() }),
        None => Ok(()),
    }
}

/// `run` subcommand: simulate, write telemetry and summary into `out`.
pub fn run(scenario: &Path, opts: &RunOptions, out: &Path) -> Result<RunSummary, RunnerError> {
    let cfg = opts.apply(load_scenario(scenario)?)?;
    let world = simulate(cfg, true)?;
    let summary = world.summary();
    write_outputs(out, world.telemetry(), &summary)?;
    check_faults(&summary)?;
    Ok(summary)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceEntry>, RunnerError> {
    let file = fs::File::open(path).map_err(RunnerError::io(path))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(RunnerError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry = serde_json::from_str(&line)
            .map_err(|e| RunnerError::Trace { path: path.into(), line: i + 1, message: e.to_string() })?;
        entries.push(entry);
    }
    Ok(entries)
}
