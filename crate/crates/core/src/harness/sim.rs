use std::path::Path;

use super::config::{BackendKind, ExperimentConfig, Sampling};
use super::metrics::{Calibration, FlowMetrics, MetricsBundle};
use super::HarnessError;
use crate::heuristic::{self, ActionKind, HeuristicParams, HeuristicState};
use crate::llmclient::{
    Cassette, ChatRequest, LiveBackend, LlmBackend, MockBackend, RecordingBackend, ReplayBackend,
};
use crate::llmpolicy::{
    apply_decision, apply_guardrails, build_snapshot, parse_decision, render_prompt, DecisionLogEntry, LlmDecision,
    PromptScheme,
};
use crate::netsim::{build_topology, serialization_time, EnqueueOutcome, LinkId, Network, NextHop, Packet, HEADER_BYTES};
use crate::simcore::{EventHandle, EventQueue, VirtualTime};
use crate::transport::{CcaMode, DupAckAction, Phase, Receiver, Sender, DEFAULT_MSS};
use crate::trigger::{
    calibrate_ack, calibrate_latency, should_fire_latency, AckTriggerConfig, BaselineRun, FirstLoss,
    LatencyTriggerConfig, TriggerState, ACK_CALIBRATION_WINDOW,
};

#[derive(Debug, Clone)]
enum Ev {
    LinkDone(LinkId),
    Arrive(NextHop, Packet),
    AckArrive(Packet),
    Rto(usize),
    QueueSample,
    HeuristicTick(usize),
    ApplyDecision(usize, LlmDecision, Option<String>),
}

struct Flow {
    sender: Sender,
    receiver: Receiver,
    rto: Option<EventHandle>,
    trig: TriggerState,
    hs: HeuristicState,
    rtt_samples: Vec<(u64, u64)>,
    bins: Vec<u64>,
    acks_first_10s: u64,
    consults: u64,
}

struct Simulation {
    cfg: ExperimentConfig,
    q: EventQueue<Ev>,
    net: Network,
    flows: Vec<Flow>,
    backend: Option<Box<dyn LlmBackend>>,
    model: String,
    latency: Option<LatencyTriggerConfig>,
    ack: Option<AckTriggerConfig>,
    heur: HeuristicParams,
    decisions: Vec<DecisionLogEntry>,
    queue_samples: Vec<(u64, usize)>,
    end: VirtualTime,
    fatal: Option<HarnessError>,
}

fn build_backend(cfg: &ExperimentConfig) -> Result<Option<Box<dyn LlmBackend>>, HarnessError> {
    if !cfg.uses_llm() {
        return Ok(None);
    }
    let spec = &cfg.backend;
    let inner: Box<dyn LlmBackend> = match spec.kind {
        None => return Err(HarnessError::Config("backend.kind not set".into())),
        Some(BackendKind::Mock) => {
            let path = spec.script.as_ref().ok_or_else(|| HarnessError::Config("mock needs a script".into()))?;
            Box::new(MockBackend::from_file(path)?)
        }
        Some(BackendKind::Replay) => {
            let path = spec.cassette.as_ref().ok_or_else(|| HarnessError::Config("replay needs a cassette".into()))?;
            return Ok(Some(Box::new(ReplayBackend::new(Cassette::open(path)?))));
        }
        Some(BackendKind::Live) => Box::new(LiveBackend::from_env()?),
    };
    if spec.record {
        let path = spec.cassette.as_ref().ok_or_else(|| HarnessError::Config("record needs a cassette".into()))?;
        return Ok(Some(Box::new(RecordingBackend::new(inner, Cassette::open(path)?))));
    }
    Ok(Some(inner))
}

fn scheme_for(cfg: &ExperimentConfig, mode: CcaMode) -> PromptScheme {
    match mode {
        CcaMode::TcpLlmGAggressive => PromptScheme::GeneralGAggressive,
        CcaMode::TcpLlmG => cfg.policy.scheme_g,
        _ => cfg.policy.scheme_l,
    }
}

impl Simulation {
    fn new(
        cfg: ExperimentConfig,
        backend: Option<Box<dyn LlmBackend>>,
        latency: Option<LatencyTriggerConfig>,
        ack: Option<AckTriggerConfig>,
    ) -> Result<Self, HarnessError> {
        let topo = cfg.topology()?;
        let net = build_topology(&topo)?;
        let end = cfg.duration();
        let n_bins = cfg.duration_s.ceil() as usize;
        let flows = cfg
            .modes
            .iter()
            .enumerate()
            .map(|(i, &mode)| Flow {
                sender: Sender::new(i, mode, &cfg.transport),
                receiver: Receiver::new(),
                rto: None,
                trig: TriggerState::default(),
                hs: HeuristicState::default(),
                rtt_samples: Vec::new(),
                bins: vec![0; n_bins],
                acks_first_10s: 0,
                consults: 0,
            })
            .collect();
        Ok(Simulation {
            model: cfg.model_name(),
            heur: cfg.heuristic.effective_params(),
            cfg,
            q: EventQueue::new(),
            net,
            flows,
            backend,
            latency,
            ack,
            decisions: Vec::new(),
            queue_samples: Vec::new(),
            end,
            fatal: None,
        })
    }

    fn run(&mut self) -> u64 {
        let start = VirtualTime::ZERO;
        self.q.schedule(start, Ev::QueueSample).expect("t=0");
        for i in 0..self.flows.len() {
            if self.flows[i].sender.mode == CcaMode::HeuristicCc {
                self.q.schedule_in(self.cfg.heuristic_interval(), Ev::HeuristicTick(i));
            }
            self.pump(i, start);
        }
        let mut events = 0;
        while let Some((now, ev)) = self.q.pop_until(self.end) {
            events += 1;
            self.handle(now, ev);
            if self.fatal.is_some() {
                break;
            }
        }
        events
    }

    fn handle(&mut self, now: VirtualTime, ev: Ev) {
        match ev {
            Ev::LinkDone(link) => {
                let (pkt, next) = self.net.link_mut(link).complete(now);
                if let Some(at) = next {
                    self.schedule(at, Ev::LinkDone(link));
                }
                let delay = self.net.link(link).spec().one_way_delay;
                self.schedule(now + delay, Ev::Arrive(self.net.next_hop(link), pkt));
            }
            Ev::Arrive(NextHop::Link(link), pkt) => self.enqueue(link, pkt, now),
            Ev::Arrive(NextHop::Receiver, pkt) => {
                let f = &mut self.flows[pkt.flow_id];
                let bin = (now.as_micros() / 1_000_000) as usize;
                if bin < f.bins.len() {
                    f.bins[bin] += pkt.size;
                }
                let ack = f.receiver.on_data(&pkt);
                let at = now + self.net.ack_delay(pkt.flow_id);
                self.schedule(at, Ev::AckArrive(ack));
            }
            Ev::AckArrive(ack) => self.on_ack(ack, now),
            Ev::Rto(i) => {
                self.flows[i].rto = None;
                self.flows[i].sender.on_rto(now);
                self.pump(i, now);
            }
            Ev::QueueSample => {
                let occ = self.net.link(self.net.bottleneck()).occupancy();
                self.queue_samples.push((now.as_micros(), occ));
                let next = now + self.cfg.queue_sample_interval();
                if next < self.end {
                    self.schedule(next, Ev::QueueSample);
                }
            }
            Ev::HeuristicTick(i) => {
                self.q.schedule_in(self.cfg.heuristic_interval(), Ev::HeuristicTick(i));
                let phase = self.flows[i].sender.state.phase;
                if !matches!(phase, Phase::Initialization | Phase::RtoBackoff) {
                    self.heuristic_consult(i, now, "heuristic_tick");
                }
            }
            Ev::ApplyDecision(i, d, key) => {
                let raw_text = d.raw_text.clone();
                let applied = self.apply_llm_decision(i, d, now);
                let st = &self.flows[i].sender.state;
                self.decisions.push(DecisionLogEntry {
                    t: now.as_secs_f64(),
                    flow_id: i,
                    scheme: format!("{:?}", scheme_for(&self.cfg, self.flows[i].sender.mode)),
                    trigger: "delayed_apply".into(),
                    snapshot: None,
                    raw_text,
                    applied_cwnd: Some(st.cwnd),
                    applied_ssthresh: Some(st.ssthresh),
                    clamped: applied.clamped,
                    key,
                    error: None,
                });
            }
        }
    }

    fn schedule(&mut self, at: VirtualTime, ev: Ev) {
        self.q.schedule(at, ev).expect("events are never scheduled in the past");
    }

    fn enqueue(&mut self, link: LinkId, pkt: Packet, now: VirtualTime) {
        if let EnqueueOutcome::Enqueued(Some(done)) = self.net.link_mut(link).enqueue(pkt, now) {
            self.schedule(done, Ev::LinkDone(link));
        }
    }

    fn transmit(&mut self, i: usize, pkts: Vec<Packet>, now: VirtualTime) {
        let access = self.net.access_link(i);
        for p in pkts {
            self.enqueue(access, p, now);
        }
    }

    /// Sends whatever the window allows and keeps the RTO timer consistent.
    fn pump(&mut self, i: usize, now: VirtualTime) {
        let pkts = self.flows[i].sender.poll_send(now);
        self.transmit(i, pkts, now);
        let f = &mut self.flows[i];
        if f.sender.has_outstanding() {
            if f.rto.is_none() {
                f.rto = Some(self.q.schedule_in(f.sender.state.rto, Ev::Rto(i)));
            }
        } else if let Some(h) = f.rto.take() {
            self.q.cancel(h);
        }
    }

    fn cancel_rto(&mut self, i: usize) {
        let f = &mut self.flows[i];
        if let Some(h) = f.rto.take() {
            self.q.cancel(h);
        }
    }

    fn on_ack(&mut self, ack: Packet, now: VirtualTime) {
        let i = ack.flow_id;
        let res = {
            let f = &mut self.flows[i];
            if now < ACK_CALIBRATION_WINDOW {
                f.acks_first_10s += 1;
            }
            f.sender.on_ack(&ack, now)
        };
        if let Some(r) = res.rtt_sample {
            self.flows[i].rtt_samples.push((now.as_micros(), r.as_micros()));
        }
        if res.new_ack {
            self.cancel_rto(i);
        }
        if let Some(p) = res.retransmit {
            self.transmit(i, vec![p], now);
        }
        let mode = self.flows[i].sender.mode;
        if mode.uses_llm() && self.cfg.policy.sampling == Sampling::PerAck {
            let _ = self.flows[i].sender.sample_path(now);
        }
        match mode {
            CcaMode::NewReno => {}
            CcaMode::TcpLlmL => {
                let f = &mut self.flows[i];
                let in_ca = f.sender.state.phase == Phase::CongestionAvoidance && f.sender.state.recovery.is_none();
                if let (true, Some(cfg), Some(rtt)) = (in_ca, self.latency.as_ref(), f.sender.latest_rtt()) {
                    if should_fire_latency(cfg, &mut f.trig, rtt, now) {
                        self.llm_consult(i, now, "latency");
                    }
                }
            }
            CcaMode::TcpLlmG | CcaMode::TcpLlmGAggressive => {
                let fired = match self.ack.as_ref() {
                    Some(cfg) => self.flows[i].trig.on_ack(cfg, now),
                    None => false,
                };
                if res.dup_action == DupAckAction::PolicyConsult {
                    self.llm_consult(i, now, "dupack");
                } else if fired && self.flows[i].sender.state.phase != Phase::RtoBackoff {
                    self.llm_consult(i, now, "ack_count");
                }
            }
            CcaMode::HeuristicCc => {
                if res.dup_action == DupAckAction::HeuristicLoss {
                    self.heuristic_consult(i, now, "dupack");
                }
            }
        }
        self.pump(i, now);
    }

    fn heuristic_consult(&mut self, i: usize, now: VirtualTime, trigger: &str) {
        let f = &mut self.flows[i];
        let Ok(sample) = f.sender.sample_path(now) else {
            return;
        };
        f.consults += 1;
        let action = heuristic::step(&mut f.hs, &f.sender.state, &sample, &self.heur, now);
        heuristic::apply_action(&mut f.sender.state, &action);
        if action.kind != ActionKind::Hold {
            self.decisions.push(DecisionLogEntry {
                t: now.as_secs_f64(),
                flow_id: i,
                scheme: "heuristic".into(),
                trigger: trigger.into(),
                snapshot: None,
                raw_text: format!("{:?}", action.kind),
                applied_cwnd: Some(f.sender.state.cwnd),
                applied_ssthresh: Some(f.sender.state.ssthresh),
                clamped: false,
                key: None,
                error: None,
            });
        }
        if trigger == "heuristic_tick" {
            self.pump(i, now);
        }
    }

    fn llm_consult(&mut self, i: usize, now: VirtualTime, trigger: &str) {
        let mode = self.flows[i].sender.mode;
        let scheme = scheme_for(&self.cfg, mode);
        let f = &mut self.flows[i];
        if self.cfg.policy.sampling == Sampling::PerTrigger {
            let _ = f.sender.sample_path(now);
        }
        let mut entry = DecisionLogEntry {
            t: now.as_secs_f64(),
            flow_id: i,
            scheme: format!("{scheme:?}"),
            trigger: trigger.into(),
            snapshot: None,
            raw_text: String::new(),
            applied_cwnd: None,
            applied_ssthresh: None,
            clamped: false,
            key: None,
            error: None,
        };
        let snap = match build_snapshot(f.sender.ring(), self.cfg.policy.history_len) {
            Ok(s) => s,
            Err(e) => {
                entry.error = Some(e.to_string());
                self.decisions.push(entry);
                return;
            }
        };
        f.consults += 1;
        let prompt = render_prompt(scheme, &snap);
        let req = ChatRequest::for_prompt(&self.model, &prompt);
        entry.key = Some(req.key());
        entry.snapshot = Some(snap);
        let backend = self.backend.as_mut().expect("LLM modes always have a backend");
        let text = match backend.complete(&req) {
            Ok(t) => t,
            Err(e) => {
                self.fatal = Some(e.into());
                return;
            }
        };
        entry.raw_text = text.clone();
        match parse_decision(&text) {
            Ok(d) => {
                let delay = self.cfg.decision_delay();
                if delay == VirtualTime::ZERO {
                    let applied = self.apply_llm_decision(i, d, now);
                    let st = &self.flows[i].sender.state;
                    entry.applied_cwnd = Some(st.cwnd);
                    entry.applied_ssthresh = Some(st.ssthresh);
                    entry.clamped = applied.clamped;
                } else {
                    // guardrails run against the window at apply time
                    self.q.schedule_in(delay, Ev::ApplyDecision(i, d, entry.key.clone()));
                }
            }
            Err(e) => entry.error = Some(e.to_string()),
        }
        self.decisions.push(entry);
    }

    fn apply_llm_decision(&mut self, i: usize, d: LlmDecision, now: VirtualTime) -> LlmDecision {
        let mode = self.flows[i].sender.mode;
        let scheme = scheme_for(&self.cfg, mode);
        let f = &mut self.flows[i];
        let g = apply_guardrails(&d, f.sender.state.cwnd, scheme.guardrail_mode(), &self.cfg.policy.guardrails);
        apply_decision(&mut f.sender.state, &g);
        self.pump(i, now);
        g
    }

    fn finish(self, events_processed: u64) -> Result<MetricsBundle, HarnessError> {
        if let Some(e) = self.fatal {
            return Err(e);
        }
        let bottleneck = self.net.link(self.net.bottleneck());
        let rate = bottleneck.spec().rate.clone();
        let n_bins = self.cfg.duration_s.ceil() as usize;
        // Bins count bytes at the receiver, so each bin is matched with the
        // bottleneck capacity one downstream path delay earlier.
        let egress = self.net.link(self.net.egress()).spec();
        let lag = bottleneck.spec().one_way_delay
            + egress.one_way_delay
            + serialization_time(DEFAULT_MSS + HEADER_BYTES, egress.rate.rate_at(VirtualTime::ZERO));
        let capacity_bits_per_bin = (0..n_bins)
            .map(|i| {
                let from = VirtualTime::from_secs(i as u64).saturating_sub(lag);
                let to = VirtualTime::from_secs(i as u64 + 1).min(self.end).saturating_sub(lag);
                rate.capacity_bits(from, to)
            })
            .collect();
        let flows = self
            .flows
            .into_iter()
            .enumerate()
            .map(|(i, f)| FlowMetrics {
                flow_id: i,
                mode: f.sender.mode,
                rtt_samples: f.rtt_samples,
                throughput_bins: f.bins,
                delivered_payload_bytes: f.receiver.rcv_nxt(),
                delivered_wire_bytes: f.receiver.wire_bytes_received,
                sent_wire_bytes: f.sender.stats.wire_bytes_sent,
                consults: f.consults,
                final_cwnd: f.sender.state.cwnd,
                stats: f.sender.stats,
            })
            .collect();
        Ok(MetricsBundle {
            name: self.cfg.name.clone(),
            seed: self.cfg.seed,
            duration_s: self.cfg.duration_s,
            bottleneck_queue_capacity: bottleneck.spec().queue_capacity,
            capacity_bits_per_bin,
            flows,
            queue_samples: self.queue_samples,
            bottleneck: bottleneck.stats.clone(),
            decisions: self.decisions,
            calibration: None,
            events_processed,
        })
    }

    fn baseline(&self) -> BaselineRun {
        let f = &self.flows[0];
        BaselineRun {
            duration: self.end,
            first_loss: f
                .sender
                .stats
                .first_loss
                .and_then(|(at, rtt)| rtt.map(|rtt| FirstLoss { at, rtt })),
            acks_first_10s: f.acks_first_10s,
        }
    }
}

/// Runs a single NewReno flow over the experiment's path and derives both
/// trigger thresholds from it.
pub fn calibrate(cfg: &ExperimentConfig) -> Result<Calibration, HarnessError> {
    let probe = ExperimentConfig {
        n_senders: 1,
        modes: vec![CcaMode::NewReno],
        duration_s: cfg.trigger.calibration_duration_s.max(ACK_CALIBRATION_WINDOW.as_secs_f64()),
        ..cfg.clone()
    };
    probe.validate()?;
    let mut sim = Simulation::new(probe, None, None, None)?;
    sim.run();
    let run = sim.baseline();
    let lat = calibrate_latency(&run, cfg.trigger.alpha)?;
    let ack = calibrate_ack(&run, cfg.trigger.beta)?;
    let loss = run.first_loss.expect("calibrate_latency checked");
    Ok(Calibration {
        first_loss_latency_ms: loss.rtt.as_millis_f64(),
        first_loss_at_s: loss.at.as_secs_f64(),
        acks_first_10s: run.acks_first_10s,
        latency_threshold_ms: lat.threshold.as_millis_f64(),
        ack_threshold: ack.threshold_acks,
    })
}

/// Copies calibration results into the config's trigger baselines.
pub fn apply_calibration(cfg: &mut ExperimentConfig, c: &Calibration) {
    cfg.trigger.baseline_first_loss_latency_ms = Some(c.first_loss_latency_ms);
    cfg.trigger.baseline_ack_count_10s = Some(c.acks_first_10s);
}

/// Runs one experiment. Missing trigger baselines are calibrated first.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsBundle, HarnessError> {
    cfg.validate()?;
    let mut cfg = cfg.clone();
    let mut calibration = None;
    if cfg.needs_latency_baseline() || cfg.needs_ack_baseline() {
        let c = calibrate(&cfg)?;
        apply_calibration(&mut cfg, &c);
        calibration = Some(c);
    }
    let ms = |v: f64| VirtualTime::from_secs_f64(v / 1e3);
    let latency = match cfg.trigger.baseline_first_loss_latency_ms {
        Some(b) => {
            let mut l = LatencyTriggerConfig::new(ms(b), cfg.trigger.alpha)?;
            l.cooldown = ms(cfg.trigger.cooldown_ms);
            Some(l)
        }
        None => None,
    };
    let ack = match cfg.trigger.baseline_ack_count_10s {
        Some(n) => {
            let mut a = AckTriggerConfig::new(n, cfg.trigger.beta)?;
            a.min_spacing = cfg.trigger.ack_min_spacing_ms.map(ms);
            Some(a)
        }
        None => None,
    };
    let backend = build_backend(&cfg)?;
    let mut sim = Simulation::new(cfg, backend, latency, ack)?;
    let events = sim.run();
    let mut bundle = sim.finish(events)?;
    bundle.calibration = calibration;
    Ok(bundle)
}

/// Convenience: load a config file and run it.
pub fn run_config_file(path: &Path) -> Result<MetricsBundle, HarnessError> {
    run_experiment(&ExperimentConfig::load(path)?)
}
