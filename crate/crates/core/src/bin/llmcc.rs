use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use llmcc::harness::config::{BackendKind, ExperimentConfig};
use llmcc::harness::metrics::{read_bundle, summarize, summarize_window, write_outputs};
use llmcc::harness::sweep::{parse_grid_arg, sweep, write_sweep_csv};
use llmcc::harness::{apply_calibration, calibrate, run_experiment};
use llmcc::netsim::TraceShape;

#[derive(Parser)]
#[command(name = "llmcc", version, about = "Congestion-control simulator with model-in-the-loop policies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// live | mock | replay
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    cassette: Option<PathBuf>,
    /// Mock response script.
    #[arg(long)]
    script: Option<PathBuf>,
    /// Record every model response into --cassette.
    #[arg(long)]
    record: bool,
    /// Override the run length in seconds.
    #[arg(long)]
    duration: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.backend {
            cfg.backend.kind = Some(b);
        }
        if let Some(c) = &self.cassette {
            cfg.backend.cassette = Some(c.clone());
        }
        if let Some(s) = &self.script {
            cfg.backend.script = Some(s.clone());
        }
        if self.record {
            cfg.backend.record = true;
        }
        if let Some(d) = self.duration {
            cfg.duration_s = d;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the NewReno probe and print the trigger thresholds.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Write calibration.json and a calibrated copy of the config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one experiment.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a parameter grid, e.g. `--param trigger.alpha=0.5,0.6,0.7,0.8`.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "param", required = true)]
        params: Vec<String>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-summarize a stored bundle.json.
    Report {
        /// bundle.json, or a run directory containing one.
        bundle: PathBuf,
        /// Window start in seconds.
        #[arg(long)]
        from: Option<f64>,
        /// Window end in seconds.
        #[arg(long)]
        to: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic bandwidth trace as CSV.
    GenTrace {
        /// longisland | 7train | qtrain
        shape: TraceShape,
        #[arg(long, default_value_t = 120)]
        duration: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn bundle_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("bundle.json")
    } else {
        p.to_path_buf()
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Calibrate { common, out } => {
            let mut cfg = common.load()?;
            let c = calibrate(&cfg)?;
            print_json(&c)?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("calibration.json"), serde_json::to_string_pretty(&c)?)?;
                apply_calibration(&mut cfg, &c);
                fs::write(dir.join("config.calibrated.json"), cfg.to_json())?;
            }
        }
        Cmd::Run { common, out } => {
            let cfg = common.load()?;
            let bundle = run_experiment(&cfg)?;
            let summary = summarize(&bundle);
            write_outputs(&out, &bundle, &summary)?;
            print_json(&summary)?;
        }
        Cmd::Sweep { common, params, out } => {
            let cfg = common.load()?;
            let grid = params.iter().map(|p| parse_grid_arg(p)).collect::<Result<Vec<_>, _>>()?;
            let rows = sweep(&cfg, &grid)?;
            fs::create_dir_all(&out)?;
            write_sweep_csv(&rows, fs::File::create(out.join("sweep.csv"))?)?;
            fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&rows)?)?;
            write_sweep_csv(&rows, std::io::stdout())?;
        }
        Cmd::Report { bundle, from, to, out } => {
            let b = read_bundle(&bundle_path(&bundle))?;
            let summary = match (from, to) {
                (None, None) => summarize(&b),
                (f, t) => {
                    let (f, t) = (f.unwrap_or(0.0), t.unwrap_or(b.duration_s));
                    if !(f < t) {
                        bail!("empty window [{f}, {t})");
                    }
                    summarize_window(&b, f, t)
                }
            };
            if let Some(dir) = out {
                write_outputs(&dir, &b, &summary)?;
            }
            print_json(&summary)?;
        }
        Cmd::GenTrace { shape, duration, seed, jitter, out } => {
            let trace = shape.generate(duration, seed, jitter)?;
            match out {
                Some(p) => trace.write_csv(fs::File::create(&p)?)?,
                None => trace.write_csv(std::io::stdout())?,
            }
        }
    }
    Ok(())
}
