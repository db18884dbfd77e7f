//! Rule-based window controller distilled from LLM decision traces:
//! loss cut, congestion cut, stability-gated probe, otherwise hold.

use serde::{Deserialize, Serialize};

use crate::simcore::VirtualTime;
use crate::transport::{FlowState, PathSample, Phase, DEFAULT_MSS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicParams {
    pub beta_heavy: f64,
    pub beta_mild: f64,
    pub gamma_cong: f64,
    /// Probe increment in bytes.
    pub delta: u64,
    pub t_probe: VirtualTime,
    pub eps_rtt: VirtualTime,
    pub eps_rtt_plus: VirtualTime,
    pub r_heavy: u64,
    pub wait: VirtualTime,
    pub loss_ewma_alpha: f64,
    pub loss_ewma_threshold: f64,
    pub mss: u64,
}

impl Default for HeuristicParams {
    fn default() -> Self {
        preset(Scenario::Static)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Static,
    Moderate,
    Fluctuating,
    LongRtt,
}

impl std::str::FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "static" => Ok(Scenario::Static),
            "moderate" => Ok(Scenario::Moderate),
            "fluctuating" => Ok(Scenario::Fluctuating),
            "long_rtt" | "satellite" => Ok(Scenario::LongRtt),
            _ => Err(format!("unknown heuristic scenario `{s}`")),
        }
    }
}

pub fn preset(scenario: Scenario) -> HeuristicParams {
    let mss = DEFAULT_MSS;
    let (t_probe_ms, delta_mss, eps_us) = match scenario {
        Scenario::Static => (2_000, 1, 2_000),
        Scenario::Moderate => (1_500, 2, 3_000),
        Scenario::Fluctuating => (1_250, 2, 4_500),
        Scenario::LongRtt => (3_500, 1, 10_000),
    };
    HeuristicParams {
        beta_heavy: 0.5,
        beta_mild: 0.75,
        gamma_cong: 0.9,
        delta: delta_mss * mss,
        t_probe: VirtualTime::from_millis(t_probe_ms),
        eps_rtt: VirtualTime::from_micros(eps_us),
        eps_rtt_plus: VirtualTime::from_micros(2 * eps_us),
        r_heavy: 3,
        wait: VirtualTime::from_secs(2),
        loss_ewma_alpha: 0.3,
        loss_ewma_threshold: 1.0,
        mss,
    }
}

impl HeuristicParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.beta_heavy && self.beta_heavy < self.beta_mild && self.beta_mild < 1.0) {
            return Err("need 0 < beta_heavy < beta_mild < 1".into());
        }
        if !(0.0 < self.gamma_cong && self.gamma_cong < 1.0) {
            return Err("need 0 < gamma_cong < 1".into());
        }
        if self.delta == 0 || self.wait == VirtualTime::ZERO || self.mss == 0 {
            return Err("delta, wait and mss must be positive".into());
        }
        if !(0.0 < self.loss_ewma_alpha && self.loss_ewma_alpha <= 1.0) {
            return Err("loss_ewma_alpha must be in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HeuristicState {
    pub wait_until: VirtualTime,
    pub last_action_at: VirtualTime,
    pub loss_ewma: f64,
    pub prev_rtt: Option<VirtualTime>,
    /// bits/s
    pub prev_throughput: Option<f64>,
}

impl HeuristicState {
    pub fn wait_armed(&self, now: VirtualTime) -> bool {
        now < self.wait_until
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    LossCutHeavy,
    LossCutMild,
    CongCut,
    Probe,
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeuristicAction {
    pub kind: ActionKind,
    pub cwnd: u64,
    pub ssthresh: u64,
}

fn scaled(cwnd: u64, f: f64) -> u64 {
    (cwnd as f64 * f).floor() as u64
}

/// One consult. Deltas are taken against the previous consult's sample; on
/// the first consult only the loss branch can act.
pub fn step(
    hs: &mut HeuristicState,
    fs: &FlowState,
    sample: &PathSample,
    p: &HeuristicParams,
    now: VirtualTime,
) -> HeuristicAction {
    let cwnd = fs.cwnd;
    let retx = sample.retransmits;
    hs.loss_ewma = (1.0 - p.loss_ewma_alpha) * hs.loss_ewma + p.loss_ewma_alpha * retx as f64;

    let d_rtt = hs.prev_rtt.map(|prev| sample.rtt.as_micros() as i64 - prev.as_micros() as i64);
    let d_tp = hs.prev_throughput.map(|prev| sample.throughput_bps - prev);
    hs.prev_rtt = Some(sample.rtt);
    hs.prev_throughput = Some(sample.throughput_bps);

    let armed = hs.wait_armed(now);
    let next = if retx > 0 {
        if retx >= p.r_heavy || hs.loss_ewma >= p.loss_ewma_threshold {
            Some((ActionKind::LossCutHeavy, scaled(cwnd, p.beta_heavy)))
        } else {
            Some((ActionKind::LossCutMild, scaled(cwnd, p.beta_mild)))
        }
    } else if armed {
        None
    } else {
        match (d_rtt, d_tp) {
            (Some(dr), _) if dr >= p.eps_rtt_plus.as_micros() as i64 => {
                Some((ActionKind::CongCut, scaled(cwnd, p.gamma_cong)))
            }
            (Some(dr), Some(dt))
                if now.saturating_sub(hs.last_action_at) >= p.t_probe
                    && dr.unsigned_abs() <= p.eps_rtt.as_micros()
                    && dt >= 0.0 =>
            {
                Some((ActionKind::Probe, cwnd + p.delta))
            }
            _ => None,
        }
    };

    match next {
        Some((kind, w)) => {
            let w = w.max(p.mss);
            hs.last_action_at = now;
            hs.wait_until = now + p.wait;
            HeuristicAction { kind, cwnd: w, ssthresh: w }
        }
        None => HeuristicAction { kind: ActionKind::Hold, cwnd, ssthresh: fs.ssthresh },
    }
}

/// Installs a non-hold action; the flow stays in congestion avoidance.
pub fn apply_action(fs: &mut FlowState, a: &HeuristicAction) {
    if a.kind == ActionKind::Hold {
        return;
    }
    fs.cwnd = a.cwnd;
    fs.ssthresh = a.ssthresh;
    if fs.phase != Phase::LossRecovery {
        fs.phase = Phase::CongestionAvoidance;
    }
    fs.reset_ca();
}
