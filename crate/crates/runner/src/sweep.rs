//! Grid sweeps over numeric (or boolean) config paths.

use crate::error::RunnerError;
use crate::run::simulate;
use pod_core::scenario::ScenarioConfig;
use pod_core::world::RunSummary;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;
use std::io::Write;
use std::str::FromStr;

/// Grid used to tune the stabilizer spring and damper on the hover scenario.
pub const STABILIZER_TUNING_GRID: &str = "stabilizer.k=0.02,0.05,0.1,0.2,0.5;stabilizer.c=0.1,0.25,0.5,1,2";

pub const SWEEP_FILE: &str = "sweep.csv";
pub const BEST_FILE: &str = "sweep_best.json";

/// `path=v1,v2;path2=v3`, expanded as a cartesian product in the order given.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub axes: Vec<(String, Vec<Value>)>,
}

impl FromStr for Grid {
    type Err = RunnerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut axes: Vec<(String, Vec<Value>)> = Vec::new();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (path, values) =
                part.split_once('=').ok_or_else(|| RunnerError::Grid(format!("'{part}' is not path=values")))?;
            let path = path.trim();
            if path.is_empty() {
                return Err(RunnerError::Grid(format!("empty path in '{part}'")));
            }
            if axes.iter().any(|(p, _)| p == path) {
                return Err(RunnerError::Grid(format!("'{path}' appears twice")));
            }
            let values = values
                .split(',')
                .map(|v| {
                    let v = v.trim();
                    match serde_json::from_str::<Value>(v) {
                        Ok(x @ (Value::Number(_) | Value::Bool(_))) => Ok(x),
                        _ => Err(RunnerError::Grid(format!("'{v}' for '{path}' is not a number or boolean"))),
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            axes.push((path.to_string(), values));
        }
        if axes.is_empty() {
            return Err(RunnerError::Grid("no parameters".into()));
        }
        Ok(Self { axes })
    }
}

impl Grid {
    pub fn points(&self) -> Vec<Vec<(String, Value)>> {
        let mut points = vec![Vec::new()];
        for (path, values) in &self.axes {
            points = points
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut next = p.clone();
                        next.push((path.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }
        points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub point: usize,
    pub params: Vec<(String, Value)>,
    pub summary: RunSummary,
    pub best_stabilizer: bool,
    pub best_anc: bool,
}

impl SweepRow {
    pub fn stabilizer_ratio(&self) -> Option<f64> {
        self.summary.stabilizer.map(|s| s.ratio)
    }

    pub fn anc_reduction_db(&self) -> Option<f64> {
        self.summary.anc.map(|a| a.reduction_db)
    }
}

fn argbest(rows: &[SweepRow], key: impl Fn(&SweepRow) -> Option<f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        if let Some(v) = key(row).filter(|v| v.is_finite()) {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Runs every grid point with the scenario's seed. All points are checked
/// before any simulation starts.
pub fn sweep(base: &ScenarioConfig, grid: &Grid) -> Result<Vec<SweepRow>, RunnerError> {
    let configs = grid
        .points()
        .into_iter()
        .map(|params| {
            let mut cfg = base.clone();
            for (path, value) in &params {
                cfg = cfg.with_path(path, value.clone())?;
            }
            Ok((params, cfg))
        })
        .collect::<Result<Vec<_>, RunnerError>>()?;

    let summaries = configs
        .par_iter()
        .map(|(_, cfg)| simulate(cfg.clone(), false).map(|w| w.summary()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows: Vec<SweepRow> = configs
        .into_iter()
        .zip(summaries)
        .enumerate()
        .map(|(point, ((params, _), summary))| SweepRow { point, params, summary, best_stabilizer: false, best_anc: false })
        .collect();
    if let Some(i) = argbest(&rows, SweepRow::stabilizer_ratio) {
        rows[i].best_stabilizer = true;
    }
    if let Some(i) = argbest(&rows, |r| r.anc_reduction_db().map(|d| -d)) {
        rows[i].best_anc = true;
    }
    Ok(rows)
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRIC_COLUMNS: [&str; 8] = [
    "mean_abs_distance_error_m",
    "rms_distance_error_m",
    "in_frame_fraction",
    "home_fraction",
    "stabilizer_ratio",
    "anc_reduction_db",
    "api_completed",
    "faults",
];

pub fn write_sweep<W: Write>(grid: &Grid, rows: &[SweepRow], out: W) -> Result<(), RunnerError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["point".to_string()];
    header.extend(grid.axes.iter().map(|(p, _)| p.clone()));
    header.extend(METRIC_COLUMNS.iter().map(|c| c.to_string()));
    header.extend(["best_stabilizer".to_string(), "best_anc".to_string()]);
    w.write_record(&header)?;
    for row in rows {
        let s = &row.summary;
        let mut rec = vec![row.point.to_string()];
        rec.extend(row.params.iter().map(|(_, v)| v.to_string()));
        rec.extend([
            num(Some(s.follow.mean_abs_distance_error_m)),
            num(Some(s.follow.rms_distance_error_m)),
            num(Some(s.follow.in_frame_fraction)),
            num(Some(s.states.home)),
            num(row.stabilizer_ratio()),
            num(row.anc_reduction_db()),
            s.commands.iter().filter(|c| c.outcome.label() == "completed").count().to_string(),
            s.faults.len().to_string(),
            row.best_stabilizer.to_string(),
            row.best_anc.to_string(),
        ]);
        w.write_record(&rec)?;
    }
    w.flush().map_err(RunnerError::io("sweep"))?;
    Ok(())
}

/// The marked rows, for `sweep_best.json`.
pub fn best_json(rows: &[SweepRow]) -> Value {
    let params = |r: &SweepRow| r.params.iter().map(|(p, v)| (p.clone(), v.clone())).collect::<serde_json::Map<_, _>>();
    let stab = rows.iter().find(|r| r.best_stabilizer);
    let anc = rows.iter().find(|r| r.best_anc);
    serde_json::json!({
        "stabilizer": stab.map(|r| serde_json::json!({ "point": r.point, "params": params(r), "ratio": r.stabilizer_ratio() })),
        "anc": anc.map(|r| serde_json::json!({ "point": r.point, "params": params(r), "reduction_db": r.anc_reduction_db() })),
    })
}

pub fn write_sweep_outputs(dir: &std::path::Path, grid: &Grid, rows: &[SweepRow]) -> Result<(), RunnerError> {
    std::fs::create_dir_all(dir).map_err(RunnerError::io(dir))?;
    let path = dir.join(SWEEP_FILE);
    let file = std::fs::File::create(&path).map_err(RunnerError::io(&path))?;
    write_sweep(grid, rows, std::io::BufWriter::new(file))?;
    let best = dir.join(BEST_FILE);
    let text = serde_json::to_string_pretty(&best_json(rows)).expect("json") + "\n";
    std::fs::write(&best, text).map_err(RunnerError::io(&best))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parses_and_expands_in_order() {
        let g: Grid = "a.b=1,2; c.d = 3 ,4.5;e=true".parse().unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[0], vec![("a.b".into(), Value::from(1)), ("c.d".into(), Value::from(3)), ("e".into(), Value::Bool(true))]);
        assert_eq!(pts[1][1].1, Value::from(4.5));
        assert_eq!(pts[2][0].1, Value::from(2));
    }

    #[test]
    fn malformed_grids_are_rejected() {
        for bad in ["", "a.b", "=1", "a=x", "a=1;a=2", "a=\"s\""] {
            assert!(bad.parse::<Grid>().is_err(), "{bad}");
        }
    }

    #[test]
    fn unknown_path_fails_before_running() {
        let g: Grid = "stabilizer.nope=1".parse().unwrap();
        assert!(matches!(sweep(&ScenarioConfig::default(), &g), Err(RunnerError::Config(_))));
    }
}
