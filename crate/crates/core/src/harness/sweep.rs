use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::{set_path, ExperimentConfig};
use super::metrics::{summarize, SummaryReport};
use super::sim::{apply_calibration, calibrate, run_experiment};
use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub seed: u64,
    /// `(config path, value)` for this grid point.
    pub params: Vec<(String, Value)>,
    pub summary: SummaryReport,
}

/// Cartesian product of the grid, first parameter varying slowest.
pub fn grid_points(grid: &[(String, Vec<Value>)]) -> Vec<Vec<(String, Value)>> {
    let mut points = vec![Vec::new()];
    for (path, values) in grid {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((path.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

/// Configs for every grid point, seeded `base.seed + index`. Unknown paths
/// fail before anything runs.
pub fn expand(base: &ExperimentConfig, grid: &[(String, Vec<Value>)]) -> Result<Vec<ExperimentConfig>, HarnessError> {
    let base_value = serde_json::to_value(base)?;
    grid_points(grid)
        .into_iter()
        .enumerate()
        .map(|(i, point)| {
            let mut v = base_value.clone();
            for (path, value) in point {
                set_path(&mut v, &path, value)?;
            }
            let mut cfg: ExperimentConfig = serde_json::from_value(v)
                .map_err(|e| HarnessError::Config(format!("grid point {i}: {e}")))?;
            cfg.seed = base.seed + i as u64;
            Ok(cfg)
        })
        .collect()
}

/// One run per grid point. A shared calibration is done once up front so
/// that every row sees the same trigger baselines.
pub fn sweep(base: &ExperimentConfig, grid: &[(String, Vec<Value>)]) -> Result<Vec<SweepRow>, HarnessError> {
    let mut base = base.clone();
    if base.needs_latency_baseline() || base.needs_ack_baseline() {
        let c = calibrate(&base)?;
        apply_calibration(&mut base, &c);
    }
    let configs = expand(&base, grid)?;
    let points = grid_points(grid);
    configs
        .iter()
        .zip(points)
        .enumerate()
        .map(|(index, (cfg, params))| {
            let bundle = run_experiment(cfg)?;
            Ok(SweepRow { index, seed: cfg.seed, params, summary: summarize(&bundle) })
        })
        .collect()
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_writer(w);
    let param_names: Vec<String> = rows.first().map(|r| r.params.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default();
    let mut header = vec!["index".to_string(), "seed".to_string()];
    header.extend(param_names);
    header.extend(
        ["mean_rtt_ms", "std_rtt_ms", "mean_throughput_mbps", "std_throughput_mbps", "share_sum_pct", "jain", "retransmits", "consults"]
            .map(String::from),
    );
    wtr.write_record(&header)?;
    for r in rows {
        let s = &r.summary;
        let mut rec = vec![r.index.to_string(), r.seed.to_string()];
        rec.extend(r.params.iter().map(|(_, v)| cell(v)));
        rec.extend([
            format!("{:.3}", s.mean_rtt_ms),
            format!("{:.3}", s.std_rtt_ms),
            format!("{:.4}", s.mean_throughput_mbps),
            format!("{:.4}", s.std_throughput_mbps),
            format!("{:.2}", s.fairness.share_sum_pct),
            s.fairness.jain_index.map(|j| format!("{j:.4}")).unwrap_or_default(),
            s.retransmits.to_string(),
            s.consults.to_string(),
        ]);
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Parses `path=v1,v2,...`; values are JSON where possible, strings otherwise.
pub fn parse_grid_arg(arg: &str) -> Result<(String, Vec<Value>), HarnessError> {
    let (path, values) = arg
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("grid argument `{arg}` is not path=v1,v2,...")))?;
    let values = values
        .split(',')
        .map(|s| serde_json::from_str(s.trim()).unwrap_or_else(|_| Value::String(s.trim().to_string())))
        .collect();
    Ok((path.trim().to_string(), values))
}
