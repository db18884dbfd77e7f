//! Policy plumbing between the transport and a language model: snapshots of
//! recent path samples, prompt rendering, response parsing, guardrails, and
//! application of the decided window.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::simcore::VirtualTime;
use crate::transport::{FlowState, PathSample, Phase};

/// Bumped whenever a shipped template changes; part of cassette hygiene.
pub const PROMPT_TEMPLATE_VERSION: &str = "v1";

const MATH_L: &str = include_str!("../assets/prompts/math_l.txt");
const NATURAL_L: &str = include_str!("../assets/prompts/natural_l.txt");
const GENERAL_G: &str = include_str!("../assets/prompts/general_g.txt");
const GENERAL_G_AGGRESSIVE: &str = include_str!("../assets/prompts/general_g_aggressive.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("no path samples recorded yet")]
    EmptyRing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub last_cwnd: u64,
    pub current_cwnd: u64,
    pub ssthresh: u64,
    pub last_rtt: f64,
    pub current_rtt: f64,
    pub last_throughput: f64,
    pub current_throughput: f64,
    pub current_retransmit_packets: u64,
    pub history_cwnd: Vec<u64>,
    pub history_rtt: Vec<f64>,
    pub history_throughput: Vec<f64>,
    pub history_retransmit: Vec<u64>,
}

/// Builds a snapshot from an oldest-first ring of samples. Histories hold up
/// to `history_len` of the newest samples, newest first, without padding.
pub fn build_snapshot<'a, I>(ring: I, history_len: usize) -> Result<NetSnapshot, PolicyError>
where
    I: IntoIterator<Item = &'a PathSample>,
    I::IntoIter: DoubleEndedIterator,
{
    let newest: Vec<&PathSample> = ring.into_iter().rev().take(history_len.max(2)).collect();
    let current = *newest.first().ok_or(PolicyError::EmptyRing)?;
    let last = newest.get(1).copied().unwrap_or(current);
    let hist = &newest[..newest.len().min(history_len)];
    let secs = |t: VirtualTime| t.as_secs_f64();
    let mbps = |bps: f64| bps / 1e6;
    Ok(NetSnapshot {
        last_cwnd: last.cwnd,
        current_cwnd: current.cwnd,
        ssthresh: current.ssthresh,
        last_rtt: secs(last.rtt),
        current_rtt: secs(current.rtt),
        last_throughput: mbps(last.throughput_bps),
        current_throughput: mbps(current.throughput_bps),
        current_retransmit_packets: current.retransmits,
        history_cwnd: hist.iter().map(|s| s.cwnd).collect(),
        history_rtt: hist.iter().map(|s| secs(s.rtt)).collect(),
        history_throughput: hist.iter().map(|s| mbps(s.throughput_bps)).collect(),
        history_retransmit: hist.iter().map(|s| s.retransmits).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptScheme {
    /// AIMD rules written as formulas.
    MathL,
    /// AIMD rules in prose; the default for the latency-triggered mode.
    NaturalL,
    GeneralG,
    GeneralGAggressive,
}

impl PromptScheme {
    pub fn system_template(self) -> &'static str {
        match self {
            PromptScheme::MathL => MATH_L,
            PromptScheme::NaturalL => NATURAL_L,
            PromptScheme::GeneralG => GENERAL_G,
            PromptScheme::GeneralGAggressive => GENERAL_G_AGGRESSIVE,
        }
    }

    pub fn is_generalized(self) -> bool {
        matches!(self, PromptScheme::GeneralG | PromptScheme::GeneralGAggressive)
    }

    pub fn guardrail_mode(self) -> GuardrailMode {
        if self.is_generalized() {
            GuardrailMode::Generalized
        } else {
            GuardrailMode::Limited
        }
    }
}

impl std::str::FromStr for PromptScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "mathl" | "math" => Ok(PromptScheme::MathL),
            "naturall" | "natural" => Ok(PromptScheme::NaturalL),
            "generalg" | "general" => Ok(PromptScheme::GeneralG),
            "generalgaggressive" | "aggressive" => Ok(PromptScheme::GeneralGAggressive),
            _ => Err(format!("unknown prompt scheme `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub system: String,
    pub user: String,
}

fn list<T, F: Fn(&T) -> String>(xs: &[T], f: F) -> String {
    let items: Vec<String> = xs.iter().map(f).collect();
    format!("[{}]", items.join(", "))
}

fn fmt_secs(v: &f64) -> String {
    format!("{v:.6}")
}

fn fmt_mbps(v: &f64) -> String {
    format!("{v:.4}")
}

/// Renders the fixed system text and a user message carrying the snapshot.
/// Bytes print as integers, seconds with 6 decimals, Mb/s with 4.
pub fn render_prompt(scheme: PromptScheme, snap: &NetSnapshot) -> PromptPair {
    let mut user = String::new();
    let mut line = |k: &str, v: String| {
        user.push_str(k);
        user.push_str(": ");
        user.push_str(&v);
        user.push('\n');
    };
    line("last_cwnd", snap.last_cwnd.to_string());
    line("current_cwnd", snap.current_cwnd.to_string());
    line("ssthreshold", snap.ssthresh.to_string());
    line("last_rtt", fmt_secs(&snap.last_rtt));
    line("current_rtt", fmt_secs(&snap.current_rtt));
    if scheme.is_generalized() {
        line("last_throughput", fmt_mbps(&snap.last_throughput));
        line("current_throughput", fmt_mbps(&snap.current_throughput));
        line("current_retransmit_packet", snap.current_retransmit_packets.to_string());
        line("history_cwnd", list(&snap.history_cwnd, u64::to_string));
        line("history_rtt", list(&snap.history_rtt, fmt_secs));
        line("history_throughput", list(&snap.history_throughput, fmt_mbps));
        line("history_retransmit_packet", list(&snap.history_retransmit, u64::to_string));
    } else {
        line("current_throughput", fmt_mbps(&snap.current_throughput));
        line("last_throughput", fmt_mbps(&snap.last_throughput));
        line("CWNDs (most recent first)", list(&snap.history_cwnd, u64::to_string));
        line("RTTs (most recent first)", list(&snap.history_rtt, fmt_secs));
        line("Throughput values (most recent first)", list(&snap.history_throughput, fmt_mbps));
    }
    PromptPair { system: scheme.system_template().to_string(), user }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmDecision {
    pub next_cwnd: u64,
    pub next_ssthresh: u64,
    pub raw_text: String,
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum ParseError {
    #[error("no JSON object in response")]
    NoObject,
    #[error("response object lacks `{0}`")]
    MissingKey(String),
    #[error("`{0}` is not a number")]
    NonNumeric(String),
}

pub const KEY_CWND: &str = "next_CWND";
pub const KEY_SSTHRESH: &str = "next_SSThreshold";

fn lookup<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key).or_else(|| obj.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(_, v)| v))
}

fn as_bytes(v: &Value, key: &str) -> Result<u64, ParseError> {
    let f = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    match f {
        // `as` saturates: negatives become 0, huge values u64::MAX
        Some(x) if x.is_finite() => Ok(x.floor() as u64),
        _ => Err(ParseError::NonNumeric(key.to_string())),
    }
}

/// Every JSON object that starts somewhere in `text`, in order of position.
fn objects_in(text: &str) -> impl Iterator<Item = serde_json::Map<String, Value>> + '_ {
    text.char_indices().filter(|&(_, c)| c == '{').filter_map(move |(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&text[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(m))) => Some(m),
            _ => None,
        }
    })
}

/// Extracts `next_CWND` / `next_SSThreshold` from free-form model output.
/// Code fences and surrounding prose are tolerated; the first object that
/// carries `next_CWND` wins. Fractions are floored to whole bytes.
pub fn parse_decision(text: &str) -> Result<LlmDecision, ParseError> {
    let mut first_error: Option<ParseError> = None;
    let mut saw_object = false;
    for obj in objects_in(text) {
        saw_object = true;
        let attempt = (|| {
            let cwnd = lookup(&obj, KEY_CWND).ok_or_else(|| ParseError::MissingKey(KEY_CWND.into()))?;
            let cwnd = as_bytes(cwnd, KEY_CWND)?;
            let ss = lookup(&obj, KEY_SSTHRESH).ok_or_else(|| ParseError::MissingKey(KEY_SSTHRESH.into()))?;
            let ss = as_bytes(ss, KEY_SSTHRESH)?;
            Ok::<_, ParseError>((cwnd, ss))
        })();
        match attempt {
            Ok((next_cwnd, next_ssthresh)) => {
                return Ok(LlmDecision { next_cwnd, next_ssthresh, raw_text: text.to_string(), clamped: false })
            }
            Err(e) => {
                // an object that names next_CWND is a better diagnostic than an unrelated one
                let specific = !matches!(e, ParseError::MissingKey(ref k) if k == KEY_CWND);
                if first_error.is_none() || (specific && matches!(first_error, Some(ParseError::MissingKey(ref k)) if k == KEY_CWND)) {
                    first_error = Some(e);
                }
            }
        }
    }
    Err(if saw_object { first_error.expect("object seen") } else { ParseError::NoObject })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GuardrailMode {
    /// Consults during congestion avoidance only: bounded step both ways.
    Limited,
    /// Consults across phases: decreases bounded, increases free up to the cap.
    Generalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuardrailConfig {
    pub mss_floor: u64,
    pub l_mode_max_step_fraction: f64,
    pub g_mode_min_fraction_of_current: f64,
    pub cwnd_hard_cap: u64,
}

impl Default for GuardrailConfig {
    fn default() -> Self {
        GuardrailConfig {
            mss_floor: 1448,
            l_mode_max_step_fraction: 0.5,
            g_mode_min_fraction_of_current: 0.1,
            cwnd_hard_cap: 10_000_000,
        }
    }
}

impl GuardrailConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, f) in [
            ("l_mode_max_step_fraction", self.l_mode_max_step_fraction),
            ("g_mode_min_fraction_of_current", self.g_mode_min_fraction_of_current),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(format!("{name} = {f} outside (0, 1]"));
            }
        }
        if self.mss_floor == 0 || self.cwnd_hard_cap < self.mss_floor {
            return Err("cwnd_hard_cap must be >= mss_floor > 0".into());
        }
        Ok(())
    }
}

fn fraction_of(v: u64, f: f64) -> u64 {
    (v as f64 * f).floor() as u64
}

/// Clamps a parsed decision and aligns ssthresh with the clamped window.
pub fn apply_guardrails(d: &LlmDecision, current_cwnd: u64, mode: GuardrailMode, cfg: &GuardrailConfig) -> LlmDecision {
    let proposed = d.next_cwnd;
    let bounded = match mode {
        GuardrailMode::Limited => {
            let step = fraction_of(current_cwnd, cfg.l_mode_max_step_fraction);
            proposed.clamp(current_cwnd.saturating_sub(step), current_cwnd.saturating_add(step))
        }
        GuardrailMode::Generalized => {
            proposed.max(fraction_of(current_cwnd, cfg.g_mode_min_fraction_of_current))
        }
    };
    let next = bounded.max(cfg.mss_floor).min(cfg.cwnd_hard_cap);
    LlmDecision { next_cwnd: next, next_ssthresh: next, raw_text: d.raw_text.clone(), clamped: next != proposed }
}

/// Installs a guarded decision. The flow continues in congestion avoidance
/// so the new window is not undone by slow start.
pub fn apply_decision(fs: &mut FlowState, d: &LlmDecision) {
    fs.cwnd = d.next_cwnd.max(1);
    fs.ssthresh = d.next_cwnd;
    fs.phase = Phase::CongestionAvoidance;
    fs.reset_ca();
}

/// One line of `decisions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLogEntry {
    /// seconds
    pub t: f64,
    pub flow_id: usize,
    pub scheme: String,
    /// What caused the consult: `latency`, `ack_count`, `dupack`, `heuristic_tick`, ...
    pub trigger: String,
    pub snapshot: Option<NetSnapshot>,
    pub raw_text: String,
    /// Flow state right after the decision took effect.
    pub applied_cwnd: Option<u64>,
    pub applied_ssthresh: Option<u64>,
    pub clamped: bool,
    /// Cassette key of the request, when a model was consulted.
    pub key: Option<String>,
    pub error: Option<String>,
}
