#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use llmcc::heuristic::{self, ActionKind, HeuristicParams, HeuristicState};
use llmcc::netsim::Packet;
use llmcc::simcore::VirtualTime;
use llmcc::transport::{CcaMode, FlowState, PathSample, Phase, Receiver, Sender, TransportConfig};

pub const MSS: u64 = 1448;

// ---------------------------------------------------------------------------
// Straight-line transcription of the rule table, written without reference to
// the library implementation. Units: bytes, microseconds, bits/s.

pub struct OracleIn {
    pub cwnd: u64,
    pub retx: u64,
    pub ewma_before: f64,
    pub d_rtt_us: i64,
    pub d_tp_bps: f64,
    pub since_action_us: u64,
    pub armed: bool,
}

pub fn rule_table_oracle(x: &OracleIn, p: &HeuristicParams) -> (ActionKind, u64) {
    let ewma = (1.0 - p.loss_ewma_alpha) * x.ewma_before + p.loss_ewma_alpha * x.retx as f64;
    let eps = p.eps_rtt.as_micros() as i64;
    let eps_plus = p.eps_rtt_plus.as_micros() as i64;
    let mss = p.mss;

    if x.retx > 0 {
        if x.retx >= p.r_heavy || ewma >= p.loss_ewma_threshold {
            let w = (p.beta_heavy * x.cwnd as f64).floor() as u64;
            return (ActionKind::LossCutHeavy, if w < mss { mss } else { w });
        }
        let w = (p.beta_mild * x.cwnd as f64).floor() as u64;
        return (ActionKind::LossCutMild, if w < mss { mss } else { w });
    }
    if x.armed {
        return (ActionKind::Hold, x.cwnd);
    }
    if x.d_rtt_us >= eps_plus {
        let w = (p.gamma_cong * x.cwnd as f64).floor() as u64;
        return (ActionKind::CongCut, if w < mss { mss } else { w });
    }
    let probe_due = x.since_action_us >= p.t_probe.as_micros();
    let stable = x.d_rtt_us >= -eps && x.d_rtt_us <= eps;
    if probe_due && stable && x.d_tp_bps >= 0.0 {
        return (ActionKind::Probe, x.cwnd + p.delta);
    }
    (ActionKind::Hold, x.cwnd)
}

pub struct GridCell {
    pub retx: u64,
    pub d_rtt_ms: i64,
    pub d_tp_mbps: i64,
    pub since_action_ms: u64,
    pub armed: bool,
}

/// retx x dRTT x dTP x time-since-action x wait-armed = 4*5*3*2*2 cells.
pub fn heuristic_grid() -> Vec<GridCell> {
    let mut cells = Vec::new();
    for retx in [0, 1, 3, 5] {
        for d_rtt_ms in [-5, 0, 1, 5, 10] {
            for d_tp_mbps in [-1, 0, 1] {
                for since_action_ms in [500, 2500] {
                    for armed in [true, false] {
                        cells.push(GridCell { retx, d_rtt_ms, d_tp_mbps, since_action_ms, armed });
                    }
                }
            }
        }
    }
    cells
}

/// Runs `heuristic::step` on one cell and the oracle on the same inputs.
pub fn compare_cell(c: &GridCell, p: &HeuristicParams, cwnd: u64, ewma_before: f64) -> Result<(), String> {
    let now = VirtualTime::from_secs(100);
    let prev_rtt = VirtualTime::from_millis(80);
    let prev_tp = 5e6;
    let last_action_at = now.saturating_sub(VirtualTime::from_millis(c.since_action_ms));
    let mut hs = HeuristicState {
        wait_until: if c.armed { now + VirtualTime::from_millis(300) } else { last_action_at },
        last_action_at,
        loss_ewma: ewma_before,
        prev_rtt: Some(prev_rtt),
        prev_throughput: Some(prev_tp),
    };
    let mut fs = FlowState::new(&TransportConfig::default());
    fs.cwnd = cwnd;
    fs.ssthresh = cwnd;
    fs.phase = Phase::CongestionAvoidance;
    let rtt_us = prev_rtt.as_micros() as i64 + c.d_rtt_ms * 1000;
    let tp = prev_tp + c.d_tp_mbps as f64 * 1e6;
    let sample = PathSample {
        at: now,
        cwnd,
        ssthresh: cwnd,
        rtt: VirtualTime::from_micros(rtt_us as u64),
        throughput_bps: tp,
        retransmits: c.retx,
    };
    let got = heuristic::step(&mut hs, &fs, &sample, p, now);
    let want = rule_table_oracle(
        &OracleIn {
            cwnd,
            retx: c.retx,
            ewma_before,
            d_rtt_us: c.d_rtt_ms * 1000,
            d_tp_bps: c.d_tp_mbps as f64 * 1e6,
            since_action_us: c.since_action_ms * 1000,
            armed: c.armed,
        },
        p,
    );
    if (got.kind, got.cwnd) != want {
        return Err(format!(
            "retx={} dRTT={}ms dTP={}Mb/s since={}ms armed={} ewma0={ewma_before}: step={:?}/{} oracle={:?}/{}",
            c.retx, c.d_rtt_ms, c.d_tp_mbps, c.since_action_ms, c.armed, got.kind, got.cwnd, want.0, want.1
        ));
    }
    if got.kind != ActionKind::Hold && got.ssthresh != got.cwnd {
        return Err(format!("non-hold action left ssthresh {} != cwnd {}", got.ssthresh, got.cwnd));
    }
    let expect_wait = got.kind != ActionKind::Hold;
    if expect_wait && hs.wait_until != now + p.wait {
        return Err("action did not arm the wait timer".into());
    }
    Ok(())
}

/// Every grid cell; returns `(cells checked, mismatches)`.
pub fn run_heuristic_grid(p: &HeuristicParams, cwnd: u64, ewma_before: f64) -> (usize, Vec<String>) {
    let grid = heuristic_grid();
    let errs = grid.iter().filter_map(|c| compare_cell(c, p, cwnd, ewma_before).err()).collect();
    (grid.len(), errs)
}

// ---------------------------------------------------------------------------
// Lossless fixture: one sender, a FIFO 10 Mb/s pipe with no queue limit,
// 20 ms each way. Returns cwnd at the end of each round, where a round ends
// when the segment that was last sent at the round's start is acknowledged.

pub struct RoundTrace {
    pub cwnd: Vec<u64>,
    pub phase: Vec<Phase>,
    pub retransmits: u64,
}

pub fn lossless_rounds(cfg: &TransportConfig, rounds: usize) -> RoundTrace {
    const RATE_BPS: u64 = 10_000_000;
    let one_way = VirtualTime::from_millis(20);
    let mut sender = Sender::new(0, CcaMode::NewReno, cfg);
    let mut receiver = Receiver::new();
    // (time, seq, is_ack, packet) min-heap; seq breaks ties deterministically.
    let mut heap: BinaryHeap<Reverse<(u64, u64, bool, PacketBox)>> = BinaryHeap::new();
    let mut link_free_at = 0u64;
    let mut now = 0u64;
    let mut out = RoundTrace { cwnd: Vec::new(), phase: Vec::new(), retransmits: 0 };

    let send = |now: u64, sender: &mut Sender, heap: &mut BinaryHeap<_>, link_free_at: &mut u64| {
        for p in sender.poll_send(VirtualTime::from_micros(now)) {
            let tx_us = (p.size * 8 * 1_000_000).div_ceil(RATE_BPS);
            let start = (*link_free_at).max(now);
            *link_free_at = start + tx_us;
            let arrive = *link_free_at + one_way.as_micros();
            heap.push(Reverse((arrive, p.seq_bytes, false, PacketBox(p))));
        }
    };
    send(now, &mut sender, &mut heap, &mut link_free_at);
    let mut round_end = sender.snd_max();
    while out.cwnd.len() < rounds {
        let Reverse((t, _, is_ack, PacketBox(p))) = heap.pop().expect("pipe never drains while data is in flight");
        now = t;
        if is_ack {
            let r = sender.on_ack(&p, VirtualTime::from_micros(now));
            if r.retransmit.is_some() {
                out.retransmits += 1;
            }
            let closed = sender.snd_una() >= round_end;
            if closed {
                out.cwnd.push(sender.state.cwnd);
                out.phase.push(sender.state.phase);
            }
            send(now, &mut sender, &mut heap, &mut link_free_at);
            if closed {
                round_end = sender.snd_max();
            }
        } else {
            let ack = receiver.on_data(&p);
            heap.push(Reverse((now + one_way.as_micros(), ack.seq_bytes, true, PacketBox(ack))));
        }
    }
    out
}

/// Orders by nothing; heap ordering comes from the tuple prefix.
#[derive(Debug, Clone)]
pub struct PacketBox(pub Packet);

impl PartialEq for PacketBox {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
impl Eq for PacketBox {}
impl PartialOrd for PacketBox {
    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for PacketBox {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

/// Slow-start oracle: the window doubles every round from `initial`.
pub fn doubling_oracle(initial: u64, rounds: usize) -> Vec<u64> {
    (1..=rounds).map(|k| initial << k).collect()
}
