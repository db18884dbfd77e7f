use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::llmpolicy::DecisionLogEntry;
use crate::netsim::LinkStats;
use crate::transport::{CcaMode, SenderStats};

pub const QUEUE_HIST_BIN_PKTS: usize = 5;
/// Largest packet on the wire, in bits; slack for per-bin capacity checks.
const PACKET_BITS: f64 = 1488.0 * 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub flow_id: usize,
    pub mode: CcaMode,
    /// `(t_us, rtt_us)` for every Karn-valid RTT sample.
    pub rtt_samples: Vec<(u64, u64)>,
    /// Wire bytes delivered to the receiver per one-second bin.
    pub throughput_bins: Vec<u64>,
    pub delivered_payload_bytes: u64,
    pub delivered_wire_bytes: u64,
    pub sent_wire_bytes: u64,
    pub stats: SenderStats,
    pub consults: u64,
    pub final_cwnd: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub first_loss_latency_ms: f64,
    pub first_loss_at_s: f64,
    pub acks_first_10s: u64,
    pub latency_threshold_ms: f64,
    pub ack_threshold: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    pub bottleneck_queue_capacity: usize,
    /// Bottleneck capacity per one-second bin, bits, offset by the fixed
    /// bottleneck-to-receiver delay so it lines up with the receiver-side bins.
    pub capacity_bits_per_bin: Vec<f64>,
    pub flows: Vec<FlowMetrics>,
    /// `(t_us, packets waiting)` at the bottleneck.
    pub queue_samples: Vec<(u64, usize)>,
    pub bottleneck: LinkStats,
    pub decisions: Vec<DecisionLogEntry>,
    pub calibration: Option<Calibration>,
    pub events_processed: u64,
}

impl MetricsBundle {
    pub fn n_bins(&self) -> usize {
        self.capacity_bits_per_bin.len()
    }

    fn bin_secs(&self, i: usize) -> f64 {
        (self.duration_s - i as f64).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: usize,
    pub hi: usize,
    pub count: u64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    /// Per-flow mean utilization, percent of mean link capacity.
    pub shares_pct: Vec<f64>,
    pub share_sum_pct: f64,
    /// Over per-flow mean per-second throughput; absent when all flows are idle.
    pub jain_index: Option<f64>,
    /// `share_series[flow][bin]`, percent of that bin's capacity.
    pub share_series: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub flow_id: usize,
    pub mode: CcaMode,
    pub mean_rtt_ms: f64,
    pub std_rtt_ms: f64,
    pub mean_throughput_mbps: f64,
    pub std_throughput_mbps: f64,
    pub share_pct: f64,
    pub retransmits: u64,
    pub rto_events: u64,
    pub consults: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub name: String,
    pub seed: u64,
    pub window_s: (f64, f64),
    pub mean_rtt_ms: f64,
    pub std_rtt_ms: f64,
    pub rtt_sample_count: usize,
    /// Sum over flows of their mean throughput.
    pub mean_throughput_mbps: f64,
    /// Std of the aggregate per-second throughput.
    pub std_throughput_mbps: f64,
    pub mean_capacity_mbps: f64,
    pub retransmits: u64,
    pub consults: u64,
    pub flows: Vec<FlowSummary>,
    pub queue_histogram: Vec<HistogramBin>,
    pub fairness: FairnessReport,
}

/// `(Σx)² / (n·Σx²)`.
pub fn jain_index(x: &[f64]) -> Result<f64, HarnessError> {
    let sum: f64 = x.iter().sum();
    let sq: f64 = x.iter().map(|v| v * v).sum();
    if x.is_empty() || sq == 0.0 || x.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(HarnessError::DegenerateInput);
    }
    Ok(sum * sum / (x.len() as f64 * sq))
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

pub fn summarize(b: &MetricsBundle) -> SummaryReport {
    summarize_window(b, 0.0, b.duration_s)
}

/// Summary restricted to `[from_s, to_s)`. Throughput bins are whole seconds.
pub fn summarize_window(b: &MetricsBundle, from_s: f64, to_s: f64) -> SummaryReport {
    let to_s = to_s.min(b.duration_s);
    let first_bin = from_s.max(0.0).floor() as usize;
    let last_bin = (to_s.ceil() as usize).min(b.n_bins());
    let bins: Vec<usize> = (first_bin..last_bin).collect();
    let window_secs: f64 = bins.iter().map(|&i| b.bin_secs(i)).sum();
    let cap_bits: f64 = bins.iter().map(|&i| b.capacity_bits_per_bin[i]).sum();
    let mean_capacity_bps = if window_secs > 0.0 { cap_bits / window_secs } else { 0.0 };
    let (from_us, to_us) = ((from_s * 1e6).round() as u64, (to_s * 1e6).round() as u64);
    let in_window = |t: u64| t >= from_us && t < to_us;

    let bin_mbps = |f: &FlowMetrics, i: usize| {
        let secs = b.bin_secs(i);
        if secs > 0.0 {
            f.throughput_bins[i] as f64 * 8.0 / 1e6 / secs
        } else {
            0.0
        }
    };

    let mut flows = Vec::with_capacity(b.flows.len());
    let mut series = Vec::with_capacity(b.flows.len());
    for f in &b.flows {
        let rtts = f.rtt_samples.iter().filter(|(t, _)| in_window(*t)).map(|&(_, r)| r as f64 / 1e3);
        let (mean_rtt, std_rtt) = mean_std(rtts);
        let bytes: u64 = bins.iter().map(|&i| f.throughput_bins[i]).sum();
        let mean_tp_mbps = if window_secs > 0.0 { bytes as f64 * 8.0 / 1e6 / window_secs } else { 0.0 };
        let (_, std_tp) = mean_std(bins.iter().map(|&i| bin_mbps(f, i)));
        let share =
            if mean_capacity_bps > 0.0 { mean_tp_mbps * 1e6 / mean_capacity_bps * 100.0 } else { 0.0 };
        series.push(
            bins.iter()
                .map(|&i| {
                    let c = b.capacity_bits_per_bin[i];
                    if c > 0.0 {
                        f.throughput_bins[i] as f64 * 8.0 / c * 100.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        );
        flows.push(FlowSummary {
            flow_id: f.flow_id,
            mode: f.mode,
            mean_rtt_ms: mean_rtt,
            std_rtt_ms: std_rtt,
            mean_throughput_mbps: mean_tp_mbps,
            std_throughput_mbps: std_tp,
            share_pct: share,
            retransmits: f.stats.retransmits,
            rto_events: f.stats.rto_events,
            consults: f.consults,
        });
    }

    let all_rtts =
        b.flows.iter().flat_map(|f| f.rtt_samples.iter()).filter(|(t, _)| in_window(*t)).map(|&(_, r)| r as f64 / 1e3);
    let rtt_sample_count = all_rtts.clone().count();
    let (mean_rtt, std_rtt) = mean_std(all_rtts);
    let (_, std_agg) = mean_std(bins.iter().map(|&i| b.flows.iter().map(|f| bin_mbps(f, i)).sum::<f64>()));

    let n_hist = b.bottleneck_queue_capacity / QUEUE_HIST_BIN_PKTS + 1;
    let mut counts = vec![0u64; n_hist];
    let mut total = 0u64;
    for &(t, q) in &b.queue_samples {
        if in_window(t) {
            counts[(q / QUEUE_HIST_BIN_PKTS).min(n_hist - 1)] += 1;
            total += 1;
        }
    }
    let queue_histogram = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramBin {
            lo: i * QUEUE_HIST_BIN_PKTS,
            hi: (i + 1) * QUEUE_HIST_BIN_PKTS,
            count,
            fraction: if total > 0 { count as f64 / total as f64 } else { 0.0 },
        })
        .collect();

    let means: Vec<f64> = flows.iter().map(|f| f.mean_throughput_mbps).collect();
    let shares: Vec<f64> = flows.iter().map(|f| f.share_pct).collect();
    SummaryReport {
        name: b.name.clone(),
        seed: b.seed,
        window_s: (from_s, to_s),
        mean_rtt_ms: mean_rtt,
        std_rtt_ms: std_rtt,
        rtt_sample_count,
        mean_throughput_mbps: means.iter().sum(),
        std_throughput_mbps: std_agg,
        mean_capacity_mbps: mean_capacity_bps / 1e6,
        retransmits: flows.iter().map(|f| f.retransmits).sum(),
        consults: flows.iter().map(|f| f.consults).sum(),
        fairness: FairnessReport {
            share_sum_pct: shares.iter().sum(),
            shares_pct: shares,
            jain_index: jain_index(&means).ok(),
            share_series: series,
        },
        flows,
        queue_histogram,
    }
}

/// Physical sanity checks over a finished run; returns one message per violation.
pub fn conservation_violations(b: &MetricsBundle) -> Vec<String> {
    let mut out = Vec::new();
    for f in &b.flows {
        if f.delivered_wire_bytes > f.sent_wire_bytes {
            out.push(format!(
                "flow {}: delivered {} B > sent {} B",
                f.flow_id, f.delivered_wire_bytes, f.sent_wire_bytes
            ));
        }
        if f.throughput_bins.iter().sum::<u64>() > f.delivered_wire_bytes {
            out.push(format!("flow {}: binned bytes exceed delivered bytes", f.flow_id));
        }
    }
    for &(t, q) in &b.queue_samples {
        if q > b.bottleneck_queue_capacity {
            out.push(format!("queue {q} > capacity {} at t={t}us", b.bottleneck_queue_capacity));
        }
        if t as f64 > b.duration_s * 1e6 {
            out.push(format!("queue sample at t={t}us beyond run end"));
        }
    }
    let delivered_bits: f64 = b.flows.iter().map(|f| f.delivered_wire_bytes as f64 * 8.0).sum();
    let capacity_bits: f64 = b.capacity_bits_per_bin.iter().sum();
    if delivered_bits > capacity_bits {
        out.push(format!("delivered {delivered_bits} bits > capacity integral {capacity_bits} bits"));
    }
    for i in 0..b.n_bins() {
        let bits: f64 = b.flows.iter().map(|f| f.throughput_bins[i] as f64 * 8.0).sum();
        if bits > b.capacity_bits_per_bin[i] + PACKET_BITS {
            out.push(format!("bin {i}: {bits} bits > capacity {} + one packet", b.capacity_bits_per_bin[i]));
        }
    }
    out
}

fn fmt_opt(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}")).unwrap_or_default()
}

/// Per-second rows: `t, flow, rtt_ms, thr_mbps`. `rtt_ms` is the mean of the
/// samples in the bin, empty when there are none.
pub fn write_metrics_csv<W: Write>(b: &MetricsBundle, w: W) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", "flow", "rtt_ms", "thr_mbps"])?;
    let n = b.n_bins();
    for f in &b.flows {
        let mut sums = vec![(0u64, 0u64); n];
        for &(t, r) in &f.rtt_samples {
            let i = (t / 1_000_000) as usize;
            if i < n {
                sums[i].0 += r;
                sums[i].1 += 1;
            }
        }
        for (i, &(sum, cnt)) in sums.iter().enumerate() {
            let rtt = (cnt > 0).then(|| sum as f64 / cnt as f64 / 1e3);
            let secs = b.bin_secs(i);
            let thr = if secs > 0.0 { f.throughput_bins[i] as f64 * 8.0 / 1e6 / secs } else { 0.0 };
            wtr.write_record([i.to_string(), f.flow_id.to_string(), fmt_opt(rtt, 3), format!("{thr:.6}")])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_queue_csv<W: Write>(b: &MetricsBundle, w: W) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", "qlen"])?;
    for &(t, q) in &b.queue_samples {
        wtr.write_record([format!("{:.3}", t as f64 / 1e6), q.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_decisions_jsonl<W: Write>(b: &MetricsBundle, mut w: W) -> Result<(), HarnessError> {
    for d in &b.decisions {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Writes `summary.json`, `metrics.csv`, `queue.csv`, `decisions.jsonl`
/// and the full `bundle.json` into `dir`.
pub fn write_outputs(dir: &Path, b: &MetricsBundle, s: &SummaryReport) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(s)? + "\n")?;
    write_metrics_csv(b, fs::File::create(dir.join("metrics.csv"))?)?;
    write_queue_csv(b, fs::File::create(dir.join("queue.csv"))?)?;
    write_decisions_jsonl(b, std::io::BufWriter::new(fs::File::create(dir.join("decisions.jsonl"))?))?;
    serde_json::to_writer(std::io::BufWriter::new(fs::File::create(dir.join("bundle.json"))?), b)?;
    Ok(())
}

pub fn read_bundle(path: &Path) -> Result<MetricsBundle, HarnessError> {
    let f = fs::File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}
