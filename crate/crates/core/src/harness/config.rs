use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::heuristic::{preset, HeuristicParams, Scenario};
use crate::llmclient::{DEFAULT_MODEL, ENV_MODEL};
use crate::llmpolicy::{GuardrailConfig, PromptScheme};
use crate::netsim::{BandwidthTrace, LinkSpec, RateSource, TopologyConfig, TraceShape};
use crate::simcore::VirtualTime;
use crate::transport::{CcaMode, TransportConfig};

/// One experiment, as read from a JSON config file. Durations in the
/// nested `transport` and `heuristic.params` sections are integer
/// microseconds; everything else names its unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    pub queue_sample_interval_ms: f64,
    pub n_senders: usize,
    /// One mode per sender.
    pub modes: Vec<CcaMode>,
    pub links: LinksConfig,
    pub trace: TraceSpec,
    pub transport: TransportConfig,
    pub trigger: TriggerSpec,
    pub policy: PolicySpec,
    pub heuristic: HeuristicSpec,
    pub backend: BackendSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            seed: 1,
            duration_s: 120.0,
            queue_sample_interval_ms: 10.0,
            n_senders: 1,
            modes: vec![CcaMode::NewReno],
            links: LinksConfig::default(),
            trace: TraceSpec::Constant { mbps: 10.0 },
            transport: TransportConfig::default(),
            trigger: TriggerSpec::default(),
            policy: PolicySpec::default(),
            heuristic: HeuristicSpec::default(),
            backend: BackendSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinksConfig {
    pub access_mbps: f64,
    pub access_delay_ms: f64,
    pub access_queue_pkts: usize,
    pub bottleneck_delay_ms: f64,
    pub bottleneck_queue_pkts: usize,
    pub egress_mbps: f64,
    pub egress_delay_ms: f64,
}

impl Default for LinksConfig {
    fn default() -> Self {
        LinksConfig {
            access_mbps: 100.0,
            access_delay_ms: 1.0,
            access_queue_pkts: 10_000,
            bottleneck_delay_ms: 18.0,
            bottleneck_queue_pkts: 100,
            egress_mbps: 100.0,
            egress_delay_ms: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSpec {
    Constant {
        mbps: f64,
    },
    /// CSV with header `t_start_s,bandwidth_mbps`.
    File {
        path: PathBuf,
    },
    Synthetic {
        shape: TraceShape,
        #[serde(default)]
        jitter: f64,
        /// Defaults to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TriggerSpec {
    pub alpha: f64,
    pub beta: f64,
    /// Filled by calibration when absent.
    pub baseline_first_loss_latency_ms: Option<f64>,
    pub baseline_ack_count_10s: Option<u64>,
    pub cooldown_ms: f64,
    pub ack_min_spacing_ms: Option<f64>,
    /// Length of the NewReno probe run used for calibration.
    pub calibration_duration_s: f64,
}

impl Default for TriggerSpec {
    fn default() -> Self {
        TriggerSpec {
            alpha: 0.7,
            beta: 0.1,
            baseline_first_loss_latency_ms: None,
            baseline_ack_count_10s: None,
            cooldown_ms: 2_000.0,
            ack_min_spacing_ms: None,
            calibration_duration_s: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Append a path sample on every ACK.
    PerAck,
    /// Append a path sample only when the policy is consulted.
    PerTrigger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySpec {
    #[serde(rename = "H")]
    pub history_len: usize,
    pub scheme_l: PromptScheme,
    pub scheme_g: PromptScheme,
    pub sampling: Sampling,
    /// Virtual time between a consult and its decision taking effect.
    pub decision_delay_ms: f64,
    pub guardrails: GuardrailConfig,
    /// Falls back to `CC_LLM_MODEL` for live runs, then to a built-in default.
    pub model: Option<String>,
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec {
            history_len: 4,
            scheme_l: PromptScheme::NaturalL,
            scheme_g: PromptScheme::GeneralG,
            sampling: Sampling::PerAck,
            decision_delay_ms: 0.0,
            guardrails: GuardrailConfig::default(),
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeuristicSpec {
    pub scenario: Scenario,
    /// Replaces the scenario preset entirely when present.
    pub params: Option<HeuristicParams>,
    pub consult_interval_ms: f64,
}

impl Default for HeuristicSpec {
    fn default() -> Self {
        HeuristicSpec { scenario: Scenario::Static, params: None, consult_interval_ms: 2_000.0 }
    }
}

impl HeuristicSpec {
    pub fn effective_params(&self) -> HeuristicParams {
        self.params.unwrap_or_else(|| preset(self.scenario))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    Mock,
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(BackendKind::Live),
            "mock" => Ok(BackendKind::Mock),
            "replay" => Ok(BackendKind::Replay),
            _ => Err(format!("unknown backend `{s}` (live|mock|replay)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSpec {
    /// Required when any flow consults a model.
    pub kind: Option<BackendKind>,
    pub cassette: Option<PathBuf>,
    /// Mock response script: `{"responses": [...], "cycle": bool}`.
    pub script: Option<PathBuf>,
    /// Record every response into `cassette`.
    pub record: bool,
}

fn ms(v: f64) -> VirtualTime {
    VirtualTime::from_secs_f64(v / 1e3)
}

fn bps(mbps: f64) -> u64 {
    (mbps * 1e6).round() as u64
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let TraceSpec::File { path } = &mut self.trace {
            fix(path);
        }
        if let Some(p) = self.backend.cassette.as_mut() {
            fix(p);
        }
        if let Some(p) = self.backend.script.as_mut() {
            fix(p);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn duration(&self) -> VirtualTime {
        VirtualTime::from_secs_f64(self.duration_s)
    }

    pub fn uses_llm(&self) -> bool {
        self.modes.iter().any(|m| m.uses_llm())
    }

    pub fn needs_latency_baseline(&self) -> bool {
        self.modes.contains(&CcaMode::TcpLlmL) && self.trigger.baseline_first_loss_latency_ms.is_none()
    }

    pub fn needs_ack_baseline(&self) -> bool {
        self.modes.iter().any(|m| m.is_generalized()) && self.trigger.baseline_ack_count_10s.is_none()
    }

    /// Model name used in requests and cassette keys.
    pub fn model_name(&self) -> String {
        if let Some(m) = &self.policy.model {
            return m.clone();
        }
        if self.backend.kind == Some(BackendKind::Live) {
            if let Ok(m) = std::env::var(ENV_MODEL) {
                return m;
            }
        }
        DEFAULT_MODEL.to_string()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return bad(format!("duration_s = {} must be positive", self.duration_s));
        }
        if !(self.queue_sample_interval_ms > 0.0) {
            return bad("queue_sample_interval_ms must be positive".into());
        }
        if self.modes.len() != self.n_senders {
            return bad(format!("{} modes for {} senders", self.modes.len(), self.n_senders));
        }
        if self.policy.history_len == 0 {
            return bad("policy.H must be >= 1".into());
        }
        if self.policy.decision_delay_ms < 0.0 {
            return bad("policy.decision_delay_ms must be >= 0".into());
        }
        if !(self.heuristic.consult_interval_ms > 0.0) {
            return bad("heuristic.consult_interval_ms must be positive".into());
        }
        self.policy.guardrails.validate().map_err(HarnessError::Config)?;
        self.heuristic.effective_params().validate().map_err(HarnessError::Config)?;
        for (name, f) in [("trigger.alpha", self.trigger.alpha), ("trigger.beta", self.trigger.beta)] {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("{name} = {f} outside (0, 1]"));
            }
        }
        if let TraceSpec::Constant { mbps } = self.trace {
            if !(mbps > 0.0) {
                return bad("trace.mbps must be positive".into());
            }
        }
        if self.uses_llm() {
            match self.backend.kind {
                None => return bad("an LLM mode is configured but backend.kind is not set".into()),
                Some(BackendKind::Replay) => match &self.backend.cassette {
                    None => return bad("replay backend requires backend.cassette".into()),
                    Some(p) if !p.exists() => return bad(format!("cassette {} not found", p.display())),
                    _ => {}
                },
                Some(BackendKind::Mock) => match &self.backend.script {
                    None => return bad("mock backend requires backend.script".into()),
                    Some(p) if !p.exists() => return bad(format!("mock script {} not found", p.display())),
                    _ => {}
                },
                Some(BackendKind::Live) => {}
            }
            if self.backend.record && self.backend.cassette.is_none() {
                return bad("backend.record requires backend.cassette".into());
            }
        }
        Ok(())
    }

    pub fn bandwidth_trace(&self) -> Result<BandwidthTrace, HarnessError> {
        Ok(match &self.trace {
            TraceSpec::Constant { mbps } => BandwidthTrace::constant(bps(*mbps))?,
            TraceSpec::File { path } => {
                let f = fs::File::open(path)
                    .map_err(|e| HarnessError::Config(format!("cannot open trace {}: {e}", path.display())))?;
                BandwidthTrace::read_csv(f)?
            }
            TraceSpec::Synthetic { shape, jitter, seed } => {
                shape.generate(self.duration_s.ceil() as u64, seed.unwrap_or(self.seed), *jitter)?
            }
        })
    }

    pub fn topology(&self) -> Result<TopologyConfig, HarnessError> {
        let l = &self.links;
        let rate = match &self.trace {
            TraceSpec::Constant { mbps } => RateSource::ConstantBps(bps(*mbps)),
            _ => RateSource::Trace(self.bandwidth_trace()?),
        };
        let topo = TopologyConfig {
            n_senders: self.n_senders,
            access: vec![LinkSpec {
                rate: RateSource::ConstantBps(bps(l.access_mbps)),
                one_way_delay: ms(l.access_delay_ms),
                queue_capacity: l.access_queue_pkts,
            }],
            bottleneck: LinkSpec {
                rate,
                one_way_delay: ms(l.bottleneck_delay_ms),
                queue_capacity: l.bottleneck_queue_pkts,
            },
            egress: LinkSpec {
                rate: RateSource::ConstantBps(bps(l.egress_mbps)),
                one_way_delay: ms(l.egress_delay_ms),
                queue_capacity: l.access_queue_pkts,
            },
            modes: self.modes.clone(),
        };
        topo.validate()?;
        Ok(topo)
    }

    pub fn queue_sample_interval(&self) -> VirtualTime {
        ms(self.queue_sample_interval_ms)
    }

    pub fn heuristic_interval(&self) -> VirtualTime {
        ms(self.heuristic.consult_interval_ms)
    }

    pub fn decision_delay(&self) -> VirtualTime {
        ms(self.policy.decision_delay_ms)
    }
}

/// Writes `value` at a dotted path (`trigger.alpha`, `policy.H`, ...) of a
/// serialized config. Every segment must already exist.
pub fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<(), HarnessError> {
    let unknown = || HarnessError::UnknownParameter(path.to_string());
    let mut cur = root;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        let obj = cur.as_object_mut().ok_or_else(unknown)?;
        let slot = obj.get_mut(part).ok_or_else(unknown)?;
        if parts.peek().is_none() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(unknown())
}
