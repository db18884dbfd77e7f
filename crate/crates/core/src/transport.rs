//! Per-flow TCP-like sender and receiver.
//!
//! The sender keeps a byte-granular window with four phases: slow start
//! (`Initialization`), `CongestionAvoidance`, `LossRecovery` entered on the
//! third duplicate ACK, and `RtoBackoff` after a retransmission timeout.
//! NewReno rules drive the window unless the flow's [`CcaMode`] hands the
//! decision to a policy.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::Packet;
use crate::simcore::VirtualTime;

pub const DEFAULT_MSS: u64 = 1448;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CcaMode {
    NewReno,
    /// Policy consulted on a latency trigger during congestion avoidance only.
    TcpLlmL,
    /// Policy consulted every N ACKs and on the third duplicate ACK.
    TcpLlmG,
    /// As `TcpLlmG` with the extra bandwidth-probing instruction.
    TcpLlmGAggressive,
    /// Rule-based controller, no model in the loop.
    HeuristicCc,
}

impl CcaMode {
    pub fn uses_llm(self) -> bool {
        matches!(self, CcaMode::TcpLlmL | CcaMode::TcpLlmG | CcaMode::TcpLlmGAggressive)
    }

    pub fn is_generalized(self) -> bool {
        matches!(self, CcaMode::TcpLlmG | CcaMode::TcpLlmGAggressive)
    }
}

impl fmt::Display for CcaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CcaMode::NewReno => "NewReno",
            CcaMode::TcpLlmL => "TcpLlmL",
            CcaMode::TcpLlmG => "TcpLlmG",
            CcaMode::TcpLlmGAggressive => "TcpLlmGAggressive",
            CcaMode::HeuristicCc => "HeuristicCc",
        };
        f.write_str(s)
    }
}

impl FromStr for CcaMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match norm.as_str() {
            "newreno" | "reno" => Ok(CcaMode::NewReno),
            "tcpllml" | "llml" => Ok(CcaMode::TcpLlmL),
            "tcpllmg" | "llmg" => Ok(CcaMode::TcpLlmG),
            "tcpllmgaggressive" | "llmgaggressive" | "llmgaggr" => Ok(CcaMode::TcpLlmGAggressive),
            "heuristiccc" | "heuristic" | "llminspired" => Ok(CcaMode::HeuristicCc),
            _ => Err(format!("unknown CCA mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Initialization,
    CongestionAvoidance,
    LossRecovery,
    RtoBackoff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransportConfig {
    pub mss: u64,
    pub initial_cwnd: u64,
    pub initial_ssthresh: u64,
    pub initial_rto: VirtualTime,
    pub min_rto: VirtualTime,
    pub rto_cap: VirtualTime,
    /// Trailing window for the sender-side throughput estimate.
    pub throughput_window: VirtualTime,
    /// Path samples retained per flow.
    pub ring_capacity: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            mss: DEFAULT_MSS,
            initial_cwnd: 10 * DEFAULT_MSS,
            initial_ssthresh: 65_535,
            initial_rto: VirtualTime::from_secs(1),
            min_rto: VirtualTime::from_millis(200),
            rto_cap: VirtualTime::from_secs(60),
            throughput_window: VirtualTime::from_secs(1),
            ring_capacity: 64,
        }
    }
}

impl TransportConfig {
    /// 150-segment initial window used for the high-start trace runs.
    pub fn high_initial_window() -> Self {
        TransportConfig { initial_cwnd: 150 * DEFAULT_MSS, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Recovery {
    /// Highest byte sent when loss was detected; an ACK at or beyond it ends recovery.
    pub recover: u64,
    /// NewReno owns the window (deflation on exit) rather than a policy.
    pub newreno: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub cwnd: u64,
    pub ssthresh: u64,
    pub phase: Phase,
    pub mss: u64,
    pub initial_cwnd: u64,
    pub srtt: Option<VirtualTime>,
    pub rttvar: VirtualTime,
    pub rto: VirtualTime,
    pub min_rto: VirtualTime,
    pub rto_cap: VirtualTime,
    pub dup_ack_count: u32,
    pub highest_acked: u64,
    /// Retransmissions since the last path sample.
    pub retransmit_count_window: u64,
    /// Congestion-avoidance credit in byte*byte units; one `ca_window` worth buys one byte.
    pub ca_byte_accumulator: u64,
    /// cwnd frozen at the start of the current window of ACKs; the CA divisor.
    pub ca_window: u64,
    /// Bytes acknowledged since `ca_window` was taken.
    pub ca_window_acked: u64,
    pub recovery: Option<Recovery>,
    /// Extra send allowance during policy-owned recovery (one MSS per dupack).
    pub inflation: u64,
    /// After a timeout, duplicate ACKs below this offset do not start a new recovery.
    pub rto_guard: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AckOutcome {
    pub acked_bytes: u64,
    /// A partial ACK in recovery: resend the first unacknowledged segment.
    pub retransmit_head: bool,
    pub recovery_exited: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DupAckAction {
    /// Counted only.
    None,
    /// NewReno fast retransmit, window already reduced.
    FastRetransmit,
    /// Resend the lost segment and let the policy pick the new window.
    PolicyConsult,
    /// Resend the lost segment and run the heuristic with a loss signal.
    HeuristicLoss,
}

impl DupAckAction {
    pub fn retransmits(self) -> bool {
        !matches!(self, DupAckAction::None)
    }
}

impl FlowState {
    pub fn new(cfg: &TransportConfig) -> Self {
        let phase =
            if cfg.initial_cwnd < cfg.initial_ssthresh { Phase::Initialization } else { Phase::CongestionAvoidance };
        FlowState {
            cwnd: cfg.initial_cwnd.max(cfg.mss),
            ssthresh: cfg.initial_ssthresh.max(2 * cfg.mss),
            phase,
            mss: cfg.mss,
            initial_cwnd: cfg.initial_cwnd,
            srtt: None,
            rttvar: VirtualTime::ZERO,
            rto: cfg.initial_rto.max(cfg.min_rto).min(cfg.rto_cap),
            min_rto: cfg.min_rto,
            rto_cap: cfg.rto_cap,
            dup_ack_count: 0,
            highest_acked: 0,
            retransmit_count_window: 0,
            ca_byte_accumulator: 0,
            ca_window: 0,
            ca_window_acked: 0,
            recovery: None,
            inflation: 0,
            rto_guard: None,
        }
    }

    /// Drops banked congestion-avoidance credit, e.g. after cwnd is set externally.
    pub fn reset_ca(&mut self) {
        self.ca_byte_accumulator = 0;
        self.ca_window = 0;
        self.ca_window_acked = 0;
    }

    /// Bytes the sender may have outstanding.
    pub fn send_window(&self) -> u64 {
        self.cwnd + self.inflation
    }

    /// New cumulative ACK under plain NewReno rules.
    pub fn on_ack_newreno(&mut self, ack_seq: u64) -> AckOutcome {
        self.on_new_ack(ack_seq, true)
    }

    /// New cumulative ACK. With `grow == false` the window is left alone
    /// outside recovery (used when a policy owns congestion avoidance).
    pub fn on_new_ack(&mut self, ack_seq: u64, grow: bool) -> AckOutcome {
        debug_assert!(ack_seq > self.highest_acked);
        let acked = ack_seq.saturating_sub(self.highest_acked);
        self.highest_acked = ack_seq;
        self.dup_ack_count = 0;
        let mut out = AckOutcome { acked_bytes: acked, ..AckOutcome::default() };
        if self.phase == Phase::RtoBackoff {
            self.phase = Phase::Initialization;
        }
        if let Some(rec) = self.recovery {
            if ack_seq >= rec.recover {
                self.recovery = None;
                self.inflation = 0;
                self.reset_ca();
                if rec.newreno {
                    self.cwnd = self.ssthresh.max(self.mss);
                }
                if self.phase == Phase::LossRecovery {
                    self.phase = Phase::CongestionAvoidance;
                }
                out.recovery_exited = true;
            } else {
                // partial ACK: deflate by the amount acked, add back one segment
                if rec.newreno {
                    self.cwnd = (self.cwnd.saturating_sub(acked) + self.mss).max(self.mss);
                } else {
                    self.inflation = self.inflation.saturating_sub(acked) + self.mss;
                }
                out.retransmit_head = true;
            }
            return out;
        }
        if !grow {
            return out;
        }
        match self.phase {
            Phase::Initialization => {
                self.cwnd += acked.min(self.mss);
                if self.cwnd >= self.ssthresh {
                    self.phase = Phase::CongestionAvoidance;
                    self.reset_ca();
                }
            }
            Phase::CongestionAvoidance => {
                if self.ca_window == 0 {
                    self.ca_window = self.cwnd;
                } else if self.ca_window_acked >= self.ca_window {
                    self.ca_window_acked -= self.ca_window;
                    self.ca_window = self.cwnd;
                }
                self.ca_window_acked += acked;
                self.ca_byte_accumulator += acked * self.mss;
                let inc = self.ca_byte_accumulator / self.ca_window;
                self.ca_byte_accumulator -= inc * self.ca_window;
                self.cwnd += inc;
            }
            Phase::LossRecovery | Phase::RtoBackoff => {}
        }
        out
    }

    /// Duplicate ACK. `snd_max` is the highest byte sent so far.
    pub fn on_dupack(&mut self, mode: CcaMode, snd_max: u64) -> DupAckAction {
        self.dup_ack_count += 1;
        if let Some(rec) = self.recovery {
            if rec.newreno {
                self.cwnd += self.mss;
            } else {
                self.inflation += self.mss;
            }
            return DupAckAction::None;
        }
        if self.dup_ack_count != 3 {
            return DupAckAction::None;
        }
        if let Some(guard) = self.rto_guard {
            if self.highest_acked < guard {
                return DupAckAction::None;
            }
        }
        self.phase = Phase::LossRecovery;
        self.reset_ca();
        match mode {
            CcaMode::NewReno | CcaMode::TcpLlmL => {
                self.ssthresh = (self.cwnd / 2).max(2 * self.mss);
                self.cwnd = self.ssthresh + 3 * self.mss;
                self.recovery = Some(Recovery { recover: snd_max, newreno: true });
                DupAckAction::FastRetransmit
            }
            CcaMode::TcpLlmG | CcaMode::TcpLlmGAggressive | CcaMode::HeuristicCc => {
                self.inflation = 3 * self.mss;
                self.recovery = Some(Recovery { recover: snd_max, newreno: false });
                if mode == CcaMode::HeuristicCc {
                    DupAckAction::HeuristicLoss
                } else {
                    DupAckAction::PolicyConsult
                }
            }
        }
    }

    /// Retransmission timeout. Identical in every mode.
    pub fn on_rto(&mut self, flight: u64, snd_max: u64) {
        self.ssthresh = (flight / 2).max(2 * self.mss);
        self.cwnd = self.mss;
        self.rto = (self.rto + self.rto).min(self.rto_cap);
        self.phase = Phase::RtoBackoff;
        self.dup_ack_count = 0;
        self.recovery = None;
        self.inflation = 0;
        self.reset_ca();
        self.rto_guard = Some(snd_max);
    }

    /// Smoothed RTT update (gains 1/8 and 1/4) and RTO recomputation.
    pub fn observe_rtt(&mut self, sample: VirtualTime) {
        let r = sample.as_micros();
        match self.srtt {
            None => {
                self.srtt = Some(sample);
                self.rttvar = VirtualTime(r / 2);
            }
            Some(srtt) => {
                let s = srtt.as_micros();
                let err = s.abs_diff(r);
                self.rttvar = VirtualTime((3 * self.rttvar.as_micros() + err) / 4);
                self.srtt = Some(VirtualTime((7 * s + r) / 8));
            }
        }
        let srtt = self.srtt.expect("set above").as_micros();
        let rto = VirtualTime(srtt + (4 * self.rttvar.as_micros()).max(1));
        self.rto = rto.max(self.min_rto).min(self.rto_cap);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub at: VirtualTime,
    pub cwnd: u64,
    pub ssthresh: u64,
    /// Latest RTT from a segment that was never retransmitted.
    pub rtt: VirtualTime,
    /// Bytes acknowledged over the trailing window, in bits/s.
    pub throughput_bps: f64,
    pub retransmits: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("no RTT measurement yet")]
    NoMeasurement,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SenderStats {
    pub data_packets_sent: u64,
    pub wire_bytes_sent: u64,
    pub retransmits: u64,
    pub acks_received: u64,
    pub dup_acks: u64,
    pub fast_retransmits: u64,
    pub rto_events: u64,
    /// Time and latest RTT when the first loss was detected.
    pub first_loss: Option<(VirtualTime, Option<VirtualTime>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AckResult {
    pub new_ack: bool,
    pub rtt_sample: Option<VirtualTime>,
    pub retransmit: Option<Packet>,
    pub dup_action: DupAckAction,
}

/// Bulk-transfer sender with an unbounded backlog.
#[derive(Debug, Clone)]
pub struct Sender {
    pub flow_id: usize,
    pub mode: CcaMode,
    pub state: FlowState,
    snd_nxt: u64,
    snd_max: u64,
    latest_rtt: Option<VirtualTime>,
    acked_log: VecDeque<(VirtualTime, u64)>,
    acked_in_window: u64,
    throughput_window: VirtualTime,
    ring: VecDeque<PathSample>,
    ring_capacity: usize,
    pub stats: SenderStats,
}

impl Sender {
    pub fn new(flow_id: usize, mode: CcaMode, cfg: &TransportConfig) -> Self {
        Sender {
            flow_id,
            mode,
            state: FlowState::new(cfg),
            snd_nxt: 0,
            snd_max: 0,
            latest_rtt: None,
            acked_log: VecDeque::new(),
            acked_in_window: 0,
            throughput_window: cfg.throughput_window,
            ring: VecDeque::with_capacity(cfg.ring_capacity),
            ring_capacity: cfg.ring_capacity.max(1),
            stats: SenderStats::default(),
        }
    }

    pub fn snd_una(&self) -> u64 {
        self.state.highest_acked
    }

    pub fn snd_max(&self) -> u64 {
        self.snd_max
    }

    /// Bytes sent but not yet cumulatively acknowledged.
    pub fn flight(&self) -> u64 {
        self.snd_nxt.saturating_sub(self.state.highest_acked)
    }

    pub fn has_outstanding(&self) -> bool {
        self.snd_max > self.state.highest_acked
    }

    pub fn latest_rtt(&self) -> Option<VirtualTime> {
        self.latest_rtt
    }

    pub fn ring(&self) -> &VecDeque<PathSample> {
        &self.ring
    }

    /// Emits as many full segments as the window allows.
    pub fn poll_send(&mut self, now: VirtualTime) -> Vec<Packet> {
        let mss = self.state.mss;
        let mut out = Vec::new();
        while self.flight() + mss <= self.state.send_window() {
            let retransmit = self.snd_nxt < self.snd_max;
            let p = Packet::data(self.flow_id, self.snd_nxt, mss, now, retransmit);
            self.snd_nxt += mss;
            self.snd_max = self.snd_max.max(self.snd_nxt);
            if retransmit {
                self.stats.retransmits += 1;
                self.state.retransmit_count_window += 1;
            }
            self.stats.data_packets_sent += 1;
            self.stats.wire_bytes_sent += p.size;
            out.push(p);
        }
        out
    }

    fn retransmit_head(&mut self, now: VirtualTime) -> Packet {
        let p = Packet::data(self.flow_id, self.state.highest_acked, self.state.mss, now, true);
        self.stats.retransmits += 1;
        self.stats.data_packets_sent += 1;
        self.stats.wire_bytes_sent += p.size;
        self.state.retransmit_count_window += 1;
        p
    }

    fn note_loss(&mut self, now: VirtualTime) {
        if self.stats.first_loss.is_none() {
            self.stats.first_loss = Some((now, self.latest_rtt));
        }
    }

    fn grows_on_ack(&self) -> bool {
        !(self.mode == CcaMode::HeuristicCc && self.state.phase == Phase::CongestionAvoidance)
    }

    pub fn on_ack(&mut self, ack: &Packet, now: VirtualTime) -> AckResult {
        debug_assert!(ack.is_ack);
        self.stats.acks_received += 1;
        let ack_seq = ack.seq_bytes;
        if ack_seq > self.state.highest_acked {
            // Karn: the echoed segment must not be a retransmission
            let rtt = (!ack.retransmit_flag).then(|| now.saturating_sub(ack.send_timestamp));
            if let Some(r) = rtt {
                self.latest_rtt = Some(r);
                self.state.observe_rtt(r);
            }
            let grow = self.grows_on_ack();
            let outcome = self.state.on_new_ack(ack_seq, grow);
            self.snd_nxt = self.snd_nxt.max(ack_seq);
            self.acked_log.push_back((now, outcome.acked_bytes));
            self.acked_in_window += outcome.acked_bytes;
            let retransmit = outcome.retransmit_head.then(|| self.retransmit_head(now));
            return AckResult { new_ack: true, rtt_sample: rtt, retransmit, dup_action: DupAckAction::None };
        }
        if ack_seq == self.state.highest_acked && self.has_outstanding() {
            self.stats.dup_acks += 1;
            let action = self.state.on_dupack(self.mode, self.snd_max);
            let retransmit = if action.retransmits() {
                self.note_loss(now);
                if action == DupAckAction::FastRetransmit {
                    self.stats.fast_retransmits += 1;
                }
                Some(self.retransmit_head(now))
            } else {
                None
            };
            return AckResult { new_ack: false, rtt_sample: None, retransmit, dup_action: action };
        }
        AckResult { new_ack: false, rtt_sample: None, retransmit: None, dup_action: DupAckAction::None }
    }

    /// Timer expiry: collapse the window and go back to the first hole.
    /// The caller follows up with [`Sender::poll_send`].
    pub fn on_rto(&mut self, now: VirtualTime) {
        self.note_loss(now);
        self.stats.rto_events += 1;
        let flight = self.snd_max - self.state.highest_acked;
        self.state.on_rto(flight, self.snd_max);
        self.snd_nxt = self.state.highest_acked;
    }

    fn trim_ack_log(&mut self, now: VirtualTime) {
        while let Some(&(t, bytes)) = self.acked_log.front() {
            if t + self.throughput_window > now {
                break;
            }
            self.acked_log.pop_front();
            self.acked_in_window -= bytes;
        }
    }

    /// Sender-side throughput over the trailing window, bits/s.
    pub fn throughput_bps(&mut self, now: VirtualTime) -> f64 {
        self.trim_ack_log(now);
        self.acked_in_window as f64 * 8.0 / self.throughput_window.as_secs_f64()
    }

    /// Takes a path sample, resets the retransmit counter and appends the
    /// sample to the ring.
    pub fn sample_path(&mut self, now: VirtualTime) -> Result<PathSample, TransportError> {
        let rtt = self.latest_rtt.ok_or(TransportError::NoMeasurement)?;
        let sample = PathSample {
            at: now,
            cwnd: self.state.cwnd,
            ssthresh: self.state.ssthresh,
            rtt,
            throughput_bps: self.throughput_bps(now),
            retransmits: std::mem::take(&mut self.state.retransmit_count_window),
        };
        if self.ring.len() == self.ring_capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(sample);
        Ok(sample)
    }
}

/// Cumulative-ACK receiver with an out-of-order buffer. Never limits the sender.
#[derive(Debug, Clone, Default)]
pub struct Receiver {
    rcv_nxt: u64,
    out_of_order: BTreeMap<u64, u64>,
    pub packets_received: u64,
    pub wire_bytes_received: u64,
}

impl Receiver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rcv_nxt(&self) -> u64 {
        self.rcv_nxt
    }

    pub fn on_data(&mut self, p: &Packet) -> Packet {
        self.packets_received += 1;
        self.wire_bytes_received += p.size;
        let (start, end) = (p.seq_bytes, p.seq_bytes + p.payload);
        if end > self.rcv_nxt {
            if start <= self.rcv_nxt {
                self.rcv_nxt = end;
            } else {
                let e = self.out_of_order.entry(start).or_insert(end);
                *e = (*e).max(end);
            }
            while let Some((&s, &e)) = self.out_of_order.first_key_value() {
                if s > self.rcv_nxt {
                    break;
                }
                self.out_of_order.pop_first();
                self.rcv_nxt = self.rcv_nxt.max(e);
            }
        }
        Packet::ack_for(p, self.rcv_nxt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MSS: u64 = DEFAULT_MSS;

    fn flow(cwnd: u64, ssthresh: u64, phase: Phase) -> FlowState {
        let mut s = FlowState::new(&TransportConfig::default());
        s.cwnd = cwnd;
        s.ssthresh = ssthresh;
        s.phase = phase;
        s
    }

    // Reference slow start: one MSS per full-MSS ACK.
    fn oracle_slow_start(cwnd: u64, acked: u64, mss: u64) -> u64 {
        cwnd + acked.min(mss)
    }

    #[test]
    fn slow_start_ack() {
        let mut s = flow(14_480, 65_535, Phase::Initialization);
        s.on_ack_newreno(MSS);
        assert_eq!(s.cwnd, oracle_slow_start(14_480, MSS, MSS));
        assert_eq!(s.cwnd, 15_928);
        assert_eq!(s.phase, Phase::Initialization);
    }

    #[test]
    fn slow_start_crosses_threshold() {
        let mut s = flow(64_640, 65_535, Phase::Initialization);
        s.on_ack_newreno(MSS);
        assert_eq!(s.cwnd, 66_088);
        assert_eq!(s.phase, Phase::CongestionAvoidance);
    }

    #[test]
    fn congestion_avoidance_banks_remainder() {
        let mut s = flow(14_480, 10_000, Phase::CongestionAvoidance);
        s.on_ack_newreno(MSS);
        // floor(1448^2 / 14480) = 144, remainder 1448^2 - 144*14480 = 11584
        assert_eq!(s.cwnd, 14_624);
        assert_eq!(s.ca_byte_accumulator, 1448 * 1448 - 144 * 14_480);
    }

    #[test]
    fn ca_grows_one_mss_per_window() {
        let mut s = flow(20 * MSS, 2 * MSS, Phase::CongestionAvoidance);
        let start = s.cwnd;
        let mut acked = 0;
        // one window's worth of ACKs at the starting size
        for _ in 0..20 {
            acked += MSS;
            s.on_ack_newreno(acked);
        }
        let grown = s.cwnd - start;
        assert!(grown <= MSS && grown + MSS / 10 >= MSS, "grew {grown}");
    }

    #[test]
    fn second_dupack_only_counts() {
        let mut s = flow(20_000, 65_535, Phase::CongestionAvoidance);
        for mode in [CcaMode::NewReno, CcaMode::TcpLlmG, CcaMode::HeuristicCc] {
            let mut s2 = s.clone();
            assert_eq!(s2.on_dupack(mode, 50_000), DupAckAction::None);
            assert_eq!(s2.on_dupack(mode, 50_000), DupAckAction::None);
            assert_eq!(s2.cwnd, 20_000);
            assert_eq!(s2.dup_ack_count, 2);
        }
        s.on_dupack(CcaMode::NewReno, 50_000);
    }

    // RFC 6582 fast retransmit: ssthresh = max(cwnd/2, 2*MSS), cwnd = ssthresh + 3*MSS.
    fn oracle_fast_retransmit(cwnd: u64, mss: u64) -> (u64, u64) {
        let ssthresh = std::cmp::max(cwnd / 2, 2 * mss);
        (ssthresh, ssthresh + 3 * mss)
    }

    #[test]
    fn third_dupack_newreno() {
        let mut s = flow(20_000, 65_535, Phase::CongestionAvoidance);
        s.on_dupack(CcaMode::NewReno, 50_000);
        s.on_dupack(CcaMode::NewReno, 50_000);
        let action = s.on_dupack(CcaMode::NewReno, 50_000);
        assert_eq!(action, DupAckAction::FastRetransmit);
        let (ssthresh, cwnd) = oracle_fast_retransmit(20_000, MSS);
        assert_eq!((s.ssthresh, s.cwnd), (ssthresh, cwnd));
        assert_eq!((s.ssthresh, s.cwnd), (10_000, 14_344));
        assert_eq!(s.phase, Phase::LossRecovery);
    }

    #[test]
    fn third_dupack_generalized_consults() {
        let mut s = flow(20_000, 65_535, Phase::CongestionAvoidance);
        s.on_dupack(CcaMode::TcpLlmG, 50_000);
        s.on_dupack(CcaMode::TcpLlmG, 50_000);
        assert_eq!(s.on_dupack(CcaMode::TcpLlmG, 50_000), DupAckAction::PolicyConsult);
        assert_eq!(s.cwnd, 20_000);
        assert_eq!(s.phase, Phase::LossRecovery);
        let mut h = flow(20_000, 65_535, Phase::CongestionAvoidance);
        for _ in 0..2 {
            h.on_dupack(CcaMode::HeuristicCc, 50_000);
        }
        assert_eq!(h.on_dupack(CcaMode::HeuristicCc, 50_000), DupAckAction::HeuristicLoss);
    }

    #[test]
    fn newreno_partial_and_full_ack() {
        let mut s = flow(20 * MSS, 65_535, Phase::CongestionAvoidance);
        s.highest_acked = 0;
        for _ in 0..3 {
            s.on_dupack(CcaMode::NewReno, 20 * MSS);
        }
        let inflated = s.cwnd;
        let out = s.on_ack_newreno(5 * MSS);
        assert!(out.retransmit_head);
        assert_eq!(s.cwnd, inflated - 5 * MSS + MSS);
        assert_eq!(s.phase, Phase::LossRecovery);
        let out = s.on_ack_newreno(20 * MSS);
        assert!(out.recovery_exited);
        assert_eq!(s.cwnd, s.ssthresh);
        assert_eq!(s.phase, Phase::CongestionAvoidance);
    }

    // RTO: ssthresh = max(flight/2, 2*MSS), cwnd = 1 MSS, timer doubles up to the cap.
    #[test]
    fn rto_backoff() {
        let mut s = flow(40_000, 65_535, Phase::CongestionAvoidance);
        s.rto = VirtualTime::from_secs(1);
        s.on_rto(40_000, 40_000);
        assert_eq!(s.ssthresh, 20_000);
        assert_eq!(s.cwnd, MSS);
        assert_eq!(s.rto, VirtualTime::from_secs(2));
        assert_eq!(s.phase, Phase::RtoBackoff);

        s.rto = VirtualTime::from_secs(60);
        s.on_rto(1000, 40_000);
        assert_eq!(s.rto, VirtualTime::from_secs(60));
        assert_eq!(s.ssthresh, 2 * MSS);

        // next new ACK re-enters slow start
        s.ssthresh = 20_000;
        s.on_ack_newreno(MSS);
        assert_eq!(s.phase, Phase::Initialization);
        assert_eq!(s.cwnd, 2 * MSS);
    }

    #[test]
    fn rto_same_in_every_mode() {
        let cfg = TransportConfig::default();
        let mut outcomes = Vec::new();
        for mode in [CcaMode::NewReno, CcaMode::TcpLlmL, CcaMode::TcpLlmG, CcaMode::HeuristicCc] {
            let mut snd = Sender::new(0, mode, &cfg);
            snd.poll_send(VirtualTime::ZERO);
            snd.on_rto(VirtualTime::from_secs(1));
            outcomes.push((snd.state.cwnd, snd.state.ssthresh, snd.state.rto, snd.state.phase));
        }
        assert!(outcomes.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn rtt_estimator() {
        let mut s = FlowState::new(&TransportConfig::default());
        s.observe_rtt(VirtualTime::from_millis(100));
        assert_eq!(s.srtt, Some(VirtualTime::from_millis(100)));
        assert_eq!(s.rttvar, VirtualTime::from_millis(50));
        assert_eq!(s.rto, VirtualTime::from_millis(300));
        s.observe_rtt(VirtualTime::from_millis(100));
        assert_eq!(s.srtt, Some(VirtualTime::from_millis(100)));
        assert_eq!(s.rttvar, VirtualTime::from_micros(37_500));
        for _ in 0..50 {
            s.observe_rtt(VirtualTime::from_millis(40));
        }
        assert_eq!(s.rto, s.min_rto);
    }

    fn ack(flow: usize, seq: u64, sent: VirtualTime, retx: bool) -> Packet {
        let data = Packet::data(flow, 0, MSS, sent, retx);
        Packet::ack_for(&data, seq)
    }

    #[test]
    fn throughput_window() {
        let cfg = TransportConfig::default();
        let mut snd = Sender::new(0, CcaMode::NewReno, &cfg);
        snd.poll_send(VirtualTime::ZERO);
        // 1.25 MB acked inside the last second
        snd.on_ack(&ack(0, 1_250_000, VirtualTime::ZERO, false), VirtualTime::from_millis(500));
        let s = snd.sample_path(VirtualTime::from_millis(900)).unwrap();
        assert!((s.throughput_bps - 10e6).abs() < 1e-6);
        // slides out after the window
        assert_eq!(snd.throughput_bps(VirtualTime::from_millis(1600)), 0.0);
    }

    #[test]
    fn sample_requires_measurement() {
        let mut snd = Sender::new(0, CcaMode::NewReno, &TransportConfig::default());
        assert_eq!(snd.sample_path(VirtualTime::ZERO), Err(TransportError::NoMeasurement));
    }

    #[test]
    fn retransmit_counter_resets_per_sample() {
        let cfg = TransportConfig::default();
        let mut snd = Sender::new(0, CcaMode::NewReno, &cfg);
        let sent = snd.poll_send(VirtualTime::ZERO);
        assert_eq!(sent.len(), 10);
        let t = VirtualTime::from_millis(40);
        snd.on_ack(&ack(0, MSS, VirtualTime::ZERO, false), t);
        assert_eq!(snd.sample_path(t).unwrap().retransmits, 0);
        for _ in 0..3 {
            snd.on_ack(&ack(0, MSS, VirtualTime::ZERO, false), t);
        }
        assert_eq!(snd.sample_path(t).unwrap().retransmits, 1);
        assert_eq!(snd.sample_path(t).unwrap().retransmits, 0);
    }

    // Karn oracle: two segments lost and resent; only ACKs echoing an original
    // transmission may update the RTT.
    #[test]
    fn karn_excludes_retransmitted_segments() {
        let cfg = TransportConfig::default();
        let mut snd = Sender::new(0, CcaMode::NewReno, &cfg);
        snd.poll_send(VirtualTime::ZERO);
        let t1 = VirtualTime::from_millis(50);
        snd.on_ack(&ack(0, MSS, VirtualTime::ZERO, false), t1);
        let expected = Some(VirtualTime::from_millis(50));
        assert_eq!(snd.latest_rtt(), expected);

        // retransmitted segment 2 gets acked very late: ignored
        let r = snd.on_ack(&ack(0, 2 * MSS, VirtualTime::from_millis(10), true), VirtualTime::from_millis(900));
        assert!(r.new_ack);
        assert_eq!(r.rtt_sample, None);
        assert_eq!(snd.latest_rtt(), expected);
        // second loss, same treatment
        snd.on_ack(&ack(0, 3 * MSS, VirtualTime::from_millis(20), true), VirtualTime::from_millis(950));
        assert_eq!(snd.latest_rtt(), expected);
        // a fresh segment updates again
        snd.on_ack(&ack(0, 4 * MSS, VirtualTime::from_millis(960), false), VirtualTime::from_millis(1000));
        assert_eq!(snd.latest_rtt(), Some(VirtualTime::from_millis(40)));
    }

    #[test]
    fn receiver_reassembles() {
        let mut rcv = Receiver::new();
        let t = VirtualTime::ZERO;
        let a = rcv.on_data(&Packet::data(0, 0, MSS, t, false));
        assert_eq!(a.seq_bytes, MSS);
        let a = rcv.on_data(&Packet::data(0, 2 * MSS, MSS, t, false));
        assert_eq!(a.seq_bytes, MSS);
        let a = rcv.on_data(&Packet::data(0, 3 * MSS, MSS, t, false));
        assert_eq!(a.seq_bytes, MSS);
        let a = rcv.on_data(&Packet::data(0, MSS, MSS, t, true));
        assert_eq!(a.seq_bytes, 4 * MSS);
        assert!(a.retransmit_flag);
        // duplicate of old data
        let a = rcv.on_data(&Packet::data(0, 0, MSS, t, true));
        assert_eq!(a.seq_bytes, 4 * MSS);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("LLM-G".parse::<CcaMode>().unwrap(), CcaMode::TcpLlmG);
        assert_eq!("TCP-LLM-L".parse::<CcaMode>().unwrap(), CcaMode::TcpLlmL);
        assert_eq!("newreno".parse::<CcaMode>().unwrap(), CcaMode::NewReno);
        assert_eq!("HeuristicCC".parse::<CcaMode>().unwrap(), CcaMode::HeuristicCc);
        assert!("bbr".parse::<CcaMode>().is_err());
    }

    #[derive(Debug, Clone)]
    enum Ev {
        Ack(u64),
        Dup,
        Rto,
    }

    fn ev() -> impl Strategy<Value = Ev> {
        prop_oneof![
            4 => (1u64..5).prop_map(Ev::Ack),
            3 => Just(Ev::Dup),
            1 => Just(Ev::Rto),
        ]
    }

    proptest! {
        #[test]
        fn cwnd_never_below_mss(
            mode in prop_oneof![
                Just(CcaMode::NewReno), Just(CcaMode::TcpLlmL),
                Just(CcaMode::TcpLlmG), Just(CcaMode::HeuristicCc)
            ],
            events in proptest::collection::vec(ev(), 1..300),
        ) {
            let mut s = FlowState::new(&TransportConfig::default());
            let mut snd_max = 200 * MSS;
            let mut saw_recovery_without_dupack = false;
            for e in events {
                let before = s.phase;
                match e {
                    Ev::Ack(n) => {
                        let next = s.highest_acked + n * MSS;
                        snd_max = snd_max.max(next + 50 * MSS);
                        s.on_new_ack(next, mode != CcaMode::HeuristicCc);
                    }
                    Ev::Dup => { s.on_dupack(mode, snd_max); }
                    Ev::Rto => { s.on_rto(snd_max - s.highest_acked, snd_max); }
                }
                prop_assert!(s.cwnd >= MSS);
                prop_assert!(s.ssthresh >= 2 * MSS);
                prop_assert!(s.rto >= s.min_rto && s.rto <= s.rto_cap);
                if s.phase == Phase::RtoBackoff && before != Phase::RtoBackoff {
                    prop_assert!(matches!(e, Ev::Rto));
                }
                if s.phase == Phase::LossRecovery && before != Phase::LossRecovery && !matches!(e, Ev::Dup) {
                    saw_recovery_without_dupack = true;
                }
            }
            prop_assert!(!saw_recovery_without_dupack);
        }
    }
}
