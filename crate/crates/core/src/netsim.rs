//! Links, drop-tail queues, trace-driven bottleneck capacity and the
//! dumbbell topology (N senders, two routers, one receiver).

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::VirtualTime;
use crate::transport::CcaMode;

/// Per-packet header overhead (IP + TCP without options).
pub const HEADER_BYTES: u64 = 40;
/// Size of a pure ACK on the wire.
pub const ACK_BYTES: u64 = 40;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("trace csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("topology config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub start: VirtualTime,
    /// bits per second
    pub rate_bps: u64,
}

/// Piecewise-constant, right-continuous capacity schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TraceStep>", into = "Vec<TraceStep>")]
pub struct BandwidthTrace {
    steps: Vec<TraceStep>,
}

impl TryFrom<Vec<TraceStep>> for BandwidthTrace {
    type Error = NetError;
    fn try_from(steps: Vec<TraceStep>) -> Result<Self, NetError> {
        BandwidthTrace::new(steps)
    }
}

impl From<BandwidthTrace> for Vec<TraceStep> {
    fn from(t: BandwidthTrace) -> Self {
        t.steps
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    t_start_s: f64,
    bandwidth_mbps: f64,
}

impl BandwidthTrace {
    pub fn new(steps: Vec<TraceStep>) -> Result<Self, NetError> {
        let first = steps.first().ok_or_else(|| NetError::InvalidTrace("no steps".into()))?;
        if first.start != VirtualTime::ZERO {
            return Err(NetError::InvalidTrace("first step must start at 0".into()));
        }
        for w in steps.windows(2) {
            if w[1].start <= w[0].start {
                return Err(NetError::InvalidTrace(format!(
                    "step starts not strictly increasing at {}",
                    w[1].start
                )));
            }
        }
        if let Some(s) = steps.iter().find(|s| s.rate_bps == 0) {
            return Err(NetError::InvalidTrace(format!("non-positive rate at {}", s.start)));
        }
        Ok(BandwidthTrace { steps })
    }

    pub fn constant(rate_bps: u64) -> Result<Self, NetError> {
        Self::new(vec![TraceStep { start: VirtualTime::ZERO, rate_bps }])
    }

    /// Convenience constructor from `(seconds, Mb/s)` pairs.
    pub fn from_mbps(points: &[(f64, f64)]) -> Result<Self, NetError> {
        let mut steps = Vec::with_capacity(points.len());
        for &(t, mbps) in points {
            if !(t.is_finite() && t >= 0.0) {
                return Err(NetError::InvalidTrace(format!("bad start time {t}")));
            }
            if !(mbps.is_finite() && mbps > 0.0) {
                return Err(NetError::InvalidTrace(format!("non-positive rate {mbps} at {t}s")));
            }
            steps.push(TraceStep {
                start: VirtualTime::from_secs_f64(t),
                rate_bps: (mbps * 1e6).round() as u64,
            });
        }
        Self::new(steps)
    }

    pub fn steps(&self) -> &[TraceStep] {
        &self.steps
    }

    /// Rate of the last step starting at or before `t`.
    pub fn bandwidth_at(&self, t: VirtualTime) -> u64 {
        let idx = self.steps.partition_point(|s| s.start <= t);
        self.steps[idx.saturating_sub(1)].rate_bps
    }

    /// Exact integral of the rate over `[from, to)`, in bits.
    pub fn capacity_bits(&self, from: VirtualTime, to: VirtualTime) -> f64 {
        if to <= from {
            return 0.0;
        }
        let mut total = 0.0;
        for (i, step) in self.steps.iter().enumerate() {
            let seg_start = step.start.max(from);
            let seg_end = match self.steps.get(i + 1) {
                Some(next) => next.start.min(to),
                None => to,
            };
            if seg_end > seg_start {
                total += step.rate_bps as f64 * (seg_end - seg_start).as_secs_f64();
            }
        }
        total
    }

    /// Mean rate over `[from, to)` in bits/s.
    pub fn mean_rate(&self, from: VirtualTime, to: VirtualTime) -> f64 {
        if to <= from {
            return self.bandwidth_at(from) as f64;
        }
        self.capacity_bits(from, to) / (to - from).as_secs_f64()
    }

    /// Parses the `t_start_s,bandwidth_mbps` CSV format.
    pub fn read_csv<R: Read>(rdr: R) -> Result<Self, NetError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rdr);
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t_start_s", "bandwidth_mbps"] {
            return Err(NetError::InvalidTrace(format!(
                "expected header `t_start_s,bandwidth_mbps`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut points = Vec::new();
        for row in reader.deserialize::<CsvRow>() {
            let row = row?;
            points.push((row.t_start_s, row.bandwidth_mbps));
        }
        Self::from_mbps(&points)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), NetError> {
        let mut writer = csv::Writer::from_writer(w);
        for s in &self.steps {
            writer.serialize(CsvRow {
                t_start_s: s.start.as_secs_f64(),
                bandwidth_mbps: s.rate_bps as f64 / 1e6,
            })?;
        }
        writer.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Synthetic stand-ins for the three mobile traces: one spike on a low
/// base, a slow start followed by a rising ramp, and a fast, jumpy link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceShape {
    Longisland,
    #[serde(rename = "7train")]
    SevenTrain,
    Qtrain,
}

impl std::str::FromStr for TraceShape {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, NetError> {
        match s.to_ascii_lowercase().as_str() {
            "longisland" => Ok(TraceShape::Longisland),
            "7train" | "seventrain" => Ok(TraceShape::SevenTrain),
            "qtrain" => Ok(TraceShape::Qtrain),
            other => Err(NetError::InvalidTrace(format!("unknown trace shape `{other}`"))),
        }
    }
}

const STEP_SECS: usize = 5;

// 5 s steps, Mb/s, 24 steps = 120 s.
const LONGISLAND_MBPS: [f64; 24] = [
    2.0, 2.0, 2.0, 2.0, 4.0, 6.5, 10.0, 7.0, 3.5, 2.6, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0,
    2.0, 2.0, 2.0, 2.0, 2.0, 2.0,
];
const SEVEN_TRAIN_MBPS: [f64; 24] = [
    1.0, 2.0, 1.5, 1.0, 2.0, 1.5, 2.0, 1.0, 3.5, 4.5, 3.5, 4.5, 8.0, 9.1, 10.2, 11.3, 12.4, 13.5,
    14.6, 15.7, 16.8, 17.9, 19.0, 20.1,
];
const QTRAIN_MBPS: [f64; 24] = [
    19.0, 21.0, 20.0, 22.0, 18.0, 20.0, 21.0, 19.0, 20.0, 8.0, 25.0, 12.0, 28.0, 6.0, 22.0, 18.0,
    22.0, 10.0, 20.0, 14.0, 26.0, 9.0, 24.0, 8.0,
];

impl TraceShape {
    fn base_profile(self) -> &'static [f64; 24] {
        match self {
            TraceShape::Longisland => &LONGISLAND_MBPS,
            TraceShape::SevenTrain => &SEVEN_TRAIN_MBPS,
            TraceShape::Qtrain => &QTRAIN_MBPS,
        }
    }

    /// Builds a trace of `duration_s` seconds in 5 s steps. The profile repeats
    /// past 120 s. `jitter` scales each step by a uniform factor in
    /// `[1 - jitter, 1 + jitter]` drawn from `seed`; zero gives the bare profile.
    pub fn generate(self, duration_s: u64, seed: u64, jitter: f64) -> Result<BandwidthTrace, NetError> {
        if !(0.0..1.0).contains(&jitter) {
            return Err(NetError::InvalidTrace(format!("jitter {jitter} outside [0, 1)")));
        }
        let profile = self.base_profile();
        let n_steps = (duration_s as usize).div_ceil(STEP_SECS).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<(f64, f64)> = (0..n_steps)
            .map(|i| {
                let base = profile[i % profile.len()];
                let factor = if jitter > 0.0 { rng.gen_range(1.0 - jitter..=1.0 + jitter) } else { 1.0 };
                ((i * STEP_SECS) as f64, (base * factor * 1000.0).round() / 1000.0)
            })
            .collect();
        BandwidthTrace::from_mbps(&points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateSource {
    ConstantBps(u64),
    Trace(BandwidthTrace),
}

impl RateSource {
    pub fn rate_at(&self, t: VirtualTime) -> u64 {
        match self {
            RateSource::ConstantBps(r) => *r,
            RateSource::Trace(tr) => tr.bandwidth_at(t),
        }
    }

    pub fn capacity_bits(&self, from: VirtualTime, to: VirtualTime) -> f64 {
        match self {
            RateSource::ConstantBps(r) => {
                if to <= from {
                    0.0
                } else {
                    *r as f64 * (to - from).as_secs_f64()
                }
            }
            RateSource::Trace(tr) => tr.capacity_bits(from, to),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub rate: RateSource,
    pub one_way_delay: VirtualTime,
    /// packets, excluding the one being serialized
    pub queue_capacity: usize,
}

impl LinkSpec {
    pub fn access_default() -> Self {
        LinkSpec {
            rate: RateSource::ConstantBps(100_000_000),
            one_way_delay: VirtualTime::from_millis(1),
            queue_capacity: 10_000,
        }
    }

    /// 10 Mb/s, 18 ms, 100 packets. With 1 ms access and egress hops the
    /// base RTT is 40 ms.
    pub fn bottleneck_default() -> Self {
        LinkSpec {
            rate: RateSource::ConstantBps(10_000_000),
            one_way_delay: VirtualTime::from_millis(18),
            queue_capacity: 100,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.queue_capacity == 0 {
            return Err(NetError::Config("queue_capacity must be >= 1".into()));
        }
        if let RateSource::ConstantBps(0) = self.rate {
            return Err(NetError::Config("link rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub flow_id: usize,
    /// First payload byte for data; cumulative ACK number for ACKs.
    pub seq_bytes: u64,
    pub payload: u64,
    /// Wire size including header.
    pub size: u64,
    pub is_ack: bool,
    /// When the data segment left the sender. ACKs echo the value of the
    /// segment that triggered them.
    pub send_timestamp: VirtualTime,
    pub retransmit_flag: bool,
}

impl Packet {
    pub fn data(flow_id: usize, seq: u64, payload: u64, now: VirtualTime, retransmit: bool) -> Self {
        Packet {
            flow_id,
            seq_bytes: seq,
            payload,
            size: payload + HEADER_BYTES,
            is_ack: false,
            send_timestamp: now,
            retransmit_flag: retransmit,
        }
    }

    pub fn ack_for(data: &Packet, ack_seq: u64) -> Self {
        Packet {
            flow_id: data.flow_id,
            seq_bytes: ack_seq,
            payload: 0,
            size: ACK_BYTES,
            is_ack: true,
            send_timestamp: data.send_timestamp,
            retransmit_flag: data.retransmit_flag,
        }
    }
}

/// Serialization time in seconds, unrounded.
pub fn serialization_secs(size_bytes: u64, rate_bps: u64) -> f64 {
    (size_bytes * 8) as f64 / rate_bps as f64
}

/// Serialization time rounded up to the next microsecond so a link never
/// runs faster than its nominal rate.
pub fn serialization_time(size_bytes: u64, rate_bps: u64) -> VirtualTime {
    let bit_us = size_bytes as u128 * 8 * 1_000_000;
    VirtualTime(bit_us.div_ceil(rate_bps as u128) as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EnqueueOutcome {
    /// `Some(t)` when the link was idle and serialization of this packet
    /// starts now, completing at `t`.
    Enqueued(Option<VirtualTime>),
    Dropped,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub enqueued: u64,
    pub dropped: u64,
    pub departed_packets: u64,
    pub departed_bytes: u64,
    pub max_occupancy: usize,
}

/// FIFO link with a finite waiting room. One packet is serialized at a
/// time; its rate is latched when serialization begins.
#[derive(Debug, Clone)]
pub struct DropTailLink {
    spec: LinkSpec,
    queue: VecDeque<Packet>,
    in_service: Option<Packet>,
    pub stats: LinkStats,
}

impl DropTailLink {
    pub fn new(spec: LinkSpec) -> Self {
        DropTailLink { spec, queue: VecDeque::new(), in_service: None, stats: LinkStats::default() }
    }

    pub fn spec(&self) -> &LinkSpec {
        &self.spec
    }

    pub fn occupancy(&self) -> usize {
        self.queue.len()
    }

    pub fn is_busy(&self) -> bool {
        self.in_service.is_some()
    }

    pub fn enqueue(&mut self, p: Packet, now: VirtualTime) -> EnqueueOutcome {
        if self.in_service.is_none() {
            debug_assert!(self.queue.is_empty());
            let done = now + serialization_time(p.size, self.spec.rate.rate_at(now));
            self.in_service = Some(p);
            self.stats.enqueued += 1;
            return EnqueueOutcome::Enqueued(Some(done));
        }
        if self.queue.len() >= self.spec.queue_capacity {
            self.stats.dropped += 1;
            return EnqueueOutcome::Dropped;
        }
        self.queue.push_back(p);
        self.stats.enqueued += 1;
        self.stats.max_occupancy = self.stats.max_occupancy.max(self.queue.len());
        EnqueueOutcome::Enqueued(None)
    }

    /// Finishes the packet in service and starts the next one, returning the
    /// finished packet and the completion time of the next, if any.
    pub fn complete(&mut self, now: VirtualTime) -> (Packet, Option<VirtualTime>) {
        let done = self.in_service.take().expect("complete() on idle link");
        self.stats.departed_packets += 1;
        self.stats.departed_bytes += done.size;
        let next = self.queue.pop_front().map(|p| {
            let at = now + serialization_time(p.size, self.spec.rate.rate_at(now));
            self.in_service = Some(p);
            at
        });
        (done, next)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LinkId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub n_senders: usize,
    /// One spec per sender, or a single spec shared by all.
    pub access: Vec<LinkSpec>,
    pub bottleneck: LinkSpec,
    /// Router to receiver hop.
    pub egress: LinkSpec,
    pub modes: Vec<CcaMode>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            n_senders: 1,
            access: vec![LinkSpec::access_default()],
            bottleneck: LinkSpec::bottleneck_default(),
            egress: LinkSpec::access_default(),
            modes: vec![CcaMode::NewReno],
        }
    }
}

impl TopologyConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.n_senders == 0 {
            return Err(NetError::Config("n_senders must be >= 1".into()));
        }
        if self.modes.len() != self.n_senders {
            return Err(NetError::Config(format!(
                "{} CCA modes for {} senders",
                self.modes.len(),
                self.n_senders
            )));
        }
        if self.access.len() != 1 && self.access.len() != self.n_senders {
            return Err(NetError::Config(format!(
                "{} access link specs for {} senders",
                self.access.len(),
                self.n_senders
            )));
        }
        for spec in self.access.iter().chain([&self.bottleneck, &self.egress]) {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn access_for(&self, sender: usize) -> &LinkSpec {
        if self.access.len() == 1 {
            &self.access[0]
        } else {
            &self.access[sender]
        }
    }
}

/// Where a packet goes after leaving a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextHop {
    Link(LinkId),
    Receiver,
}

/// Wired dumbbell: `sender_i -> access_i -> router A -> bottleneck ->
/// router B -> egress -> receiver`. ACKs return over an uncongested path
/// with the same propagation delay.
#[derive(Debug, Clone)]
pub struct Network {
    pub links: Vec<DropTailLink>,
    access: Vec<LinkId>,
    bottleneck: LinkId,
    egress: LinkId,
    ack_delay: Vec<VirtualTime>,
    pub modes: Vec<CcaMode>,
}

impl Network {
    pub fn n_senders(&self) -> usize {
        self.access.len()
    }

    pub fn access_link(&self, sender: usize) -> LinkId {
        self.access[sender]
    }

    pub fn bottleneck(&self) -> LinkId {
        self.bottleneck
    }

    pub fn egress(&self) -> LinkId {
        self.egress
    }

    pub fn link(&self, id: LinkId) -> &DropTailLink {
        &self.links[id.0]
    }

    pub fn link_mut(&mut self, id: LinkId) -> &mut DropTailLink {
        &mut self.links[id.0]
    }

    pub fn next_hop(&self, from: LinkId) -> NextHop {
        if from == self.bottleneck {
            NextHop::Link(self.egress)
        } else if from == self.egress {
            NextHop::Receiver
        } else {
            NextHop::Link(self.bottleneck)
        }
    }

    /// Reverse-path delay for ACKs of `sender`.
    pub fn ack_delay(&self, sender: usize) -> VirtualTime {
        self.ack_delay[sender]
    }

    /// Propagation-only round trip for `sender`.
    pub fn base_rtt(&self, sender: usize) -> VirtualTime {
        self.ack_delay[sender] + self.ack_delay[sender]
    }
}

pub fn build_topology(cfg: &TopologyConfig) -> Result<Network, NetError> {
    cfg.validate()?;
    let mut links = Vec::with_capacity(cfg.n_senders + 2);
    let mut access = Vec::with_capacity(cfg.n_senders);
    for i in 0..cfg.n_senders {
        access.push(LinkId(links.len()));
        links.push(DropTailLink::new(cfg.access_for(i).clone()));
    }
    let bottleneck = LinkId(links.len());
    links.push(DropTailLink::new(cfg.bottleneck.clone()));
    let egress = LinkId(links.len());
    links.push(DropTailLink::new(cfg.egress.clone()));
    let ack_delay = (0..cfg.n_senders)
        .map(|i| cfg.access_for(i).one_way_delay + cfg.bottleneck.one_way_delay + cfg.egress.one_way_delay)
        .collect();
    Ok(Network { links, access, bottleneck, egress, ack_delay, modes: cfg.modes.clone() })
}
