//! When to consult the policy.
//!
//! Two triggers, both calibrated from a NewReno probe run on the target
//! path: a latency trigger (RTT above a fraction of the RTT seen at first
//! loss, with a cooldown between consults) and an ACK-count trigger (every
//! N ACKs, N derived from the ACK count of the first 10 s).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simcore::VirtualTime;

pub const DEFAULT_COOLDOWN: VirtualTime = VirtualTime::from_secs(2);
pub const ACK_CALIBRATION_WINDOW: VirtualTime = VirtualTime::from_secs(10);

#[derive(Debug, Error, PartialEq)]
pub enum TriggerError {
    #[error("calibration run observed no packet loss")]
    NoLossObserved,
    #[error("calibration run lasted {0}, need at least 10 s")]
    RunTooShort(VirtualTime),
    #[error("scale factor {0} must be in (0, 1]")]
    BadFactor(f64),
}

/// Fractions are resolved to 1e-9 so that e.g. 0.7 scales exactly.
fn scale(value: u64, factor: f64) -> (u128, u128) {
    let ppb = (factor * 1e9).round() as u128;
    (value as u128 * ppb, 1_000_000_000)
}

fn check_factor(f: f64) -> Result<(), TriggerError> {
    if f.is_finite() && f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(TriggerError::BadFactor(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyTriggerConfig {
    pub baseline_first_loss_latency: VirtualTime,
    pub alpha: f64,
    pub cooldown: VirtualTime,
    pub threshold: VirtualTime,
}

impl LatencyTriggerConfig {
    pub fn new(baseline: VirtualTime, alpha: f64) -> Result<Self, TriggerError> {
        check_factor(alpha)?;
        let (num, den) = scale(baseline.as_micros(), alpha);
        let threshold = VirtualTime((num / den) as u64);
        Ok(LatencyTriggerConfig {
            baseline_first_loss_latency: baseline,
            alpha,
            cooldown: DEFAULT_COOLDOWN,
            threshold: threshold.max(VirtualTime(1)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AckTriggerConfig {
    pub baseline_ack_count_10s: u64,
    pub beta: f64,
    pub threshold_acks: u64,
    /// Optional minimum spacing between ACK-triggered consults. Off by default.
    pub min_spacing: Option<VirtualTime>,
}

impl AckTriggerConfig {
    pub fn new(baseline_ack_count_10s: u64, beta: f64) -> Result<Self, TriggerError> {
        check_factor(beta)?;
        let rounded = round_to_nearest_thousand(baseline_ack_count_10s);
        let (num, den) = scale(rounded, beta);
        let threshold = ((num + den / 2) / den) as u64;
        Ok(AckTriggerConfig {
            baseline_ack_count_10s,
            beta,
            threshold_acks: threshold.max(1),
            min_spacing: None,
        })
    }
}

/// Nearest multiple of 1000, halves rounded up (7500 -> 8000).
pub fn round_to_nearest_thousand(n: u64) -> u64 {
    (n + 500) / 1000 * 1000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TriggerState {
    pub last_fire_at: Option<VirtualTime>,
    pub acks_since_fire: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirstLoss {
    pub at: VirtualTime,
    /// Latest RTT the sender had measured when it detected the loss.
    pub rtt: VirtualTime,
}

/// What a calibration probe run records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub duration: VirtualTime,
    pub first_loss: Option<FirstLoss>,
    /// ACKs (new and duplicate) received in `[0, 10 s)`.
    pub acks_first_10s: u64,
}

pub fn calibrate_latency(run: &BaselineRun, alpha: f64) -> Result<LatencyTriggerConfig, TriggerError> {
    let loss = run.first_loss.ok_or(TriggerError::NoLossObserved)?;
    LatencyTriggerConfig::new(loss.rtt, alpha)
}

pub fn calibrate_ack(run: &BaselineRun, beta: f64) -> Result<AckTriggerConfig, TriggerError> {
    if run.duration < ACK_CALIBRATION_WINDOW {
        return Err(TriggerError::RunTooShort(run.duration));
    }
    AckTriggerConfig::new(run.acks_first_10s, beta)
}

/// Fires when the latest RTT is above threshold and the cooldown since the
/// previous fire has elapsed. Records the fire time.
pub fn should_fire_latency(
    cfg: &LatencyTriggerConfig,
    st: &mut TriggerState,
    latest_rtt: VirtualTime,
    now: VirtualTime,
) -> bool {
    if latest_rtt <= cfg.threshold {
        return false;
    }
    let cooled = match st.last_fire_at {
        None => true,
        Some(last) => now.saturating_sub(last) >= cfg.cooldown,
    };
    if cooled {
        st.last_fire_at = Some(now);
    }
    cooled
}

/// Call once per ACK after incrementing `acks_since_fire`.
pub fn should_fire_ack(cfg: &AckTriggerConfig, st: &mut TriggerState, now: VirtualTime) -> bool {
    if st.acks_since_fire < cfg.threshold_acks {
        return false;
    }
    if let (Some(spacing), Some(last)) = (cfg.min_spacing, st.last_fire_at) {
        if now.saturating_sub(last) < spacing {
            return false;
        }
    }
    st.acks_since_fire = 0;
    st.last_fire_at = Some(now);
    true
}

impl TriggerState {
    /// Counts one ACK and evaluates the ACK trigger.
    pub fn on_ack(&mut self, cfg: &AckTriggerConfig, now: VirtualTime) -> bool {
        self.acks_since_fire += 1;
        should_fire_ack(cfg, self, now)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ms(v: u64) -> VirtualTime {
        VirtualTime::from_millis(v)
    }

    fn run_with(loss_rtt: Option<u64>, acks: u64) -> BaselineRun {
        BaselineRun {
            duration: VirtualTime::from_secs(10),
            first_loss: loss_rtt.map(|r| FirstLoss { at: VirtualTime::from_secs(8), rtt: ms(r) }),
            acks_first_10s: acks,
        }
    }

    #[test]
    fn latency_calibration() {
        let cfg = calibrate_latency(&run_with(Some(160), 0), 0.7).unwrap();
        assert_eq!(cfg.threshold, ms(112));
        let cfg = calibrate_latency(&run_with(Some(160), 0), 0.5).unwrap();
        assert_eq!(cfg.threshold, ms(80));
        assert_eq!(cfg.cooldown, VirtualTime::from_secs(2));
        assert_eq!(calibrate_latency(&run_with(None, 0), 0.7), Err(TriggerError::NoLossObserved));
        assert!(calibrate_latency(&run_with(Some(160), 0), 1.5).is_err());
    }

    #[test]
    fn ack_calibration() {
        assert_eq!(calibrate_ack(&run_with(None, 7909), 0.1).unwrap().threshold_acks, 800);
        assert_eq!(calibrate_ack(&run_with(None, 7909), 0.05).unwrap().threshold_acks, 400);
        assert_eq!(calibrate_ack(&run_with(None, 7499), 0.1).unwrap().threshold_acks, 700);
        let short = BaselineRun { duration: VirtualTime::from_secs(5), ..run_with(None, 7909) };
        assert!(matches!(calibrate_ack(&short, 0.1), Err(TriggerError::RunTooShort(_))));
    }

    #[test]
    fn thousand_rounding_ties_up() {
        assert_eq!(round_to_nearest_thousand(7500), 8000);
        assert_eq!(round_to_nearest_thousand(7499), 7000);
        assert_eq!(round_to_nearest_thousand(499), 0);
        assert_eq!(round_to_nearest_thousand(0), 0);
    }

    #[test]
    fn ack_threshold_never_zero() {
        let cfg = AckTriggerConfig::new(100, 0.05).unwrap();
        assert_eq!(cfg.threshold_acks, 1);
    }

    #[test]
    fn latency_trigger_cases() {
        let cfg = LatencyTriggerConfig::new(ms(160), 0.7).unwrap();
        let mut st = TriggerState { last_fire_at: Some(VirtualTime::from_secs(7)), acks_since_fire: 0 };
        assert!(should_fire_latency(&cfg, &mut st, ms(120), VirtualTime::from_secs(10)));
        assert_eq!(st.last_fire_at, Some(VirtualTime::from_secs(10)));

        let mut st = TriggerState { last_fire_at: Some(ms(8500)), acks_since_fire: 0 };
        assert!(!should_fire_latency(&cfg, &mut st, ms(120), VirtualTime::from_secs(10)));
        assert_eq!(st.last_fire_at, Some(ms(8500)));

        let mut st = TriggerState { last_fire_at: Some(VirtualTime::ZERO), acks_since_fire: 0 };
        assert!(!should_fire_latency(&cfg, &mut st, ms(100), VirtualTime::from_secs(10)));

        let mut fresh = TriggerState::default();
        assert!(should_fire_latency(&cfg, &mut fresh, ms(113), ms(1)));
        // exactly at threshold does not fire
        let mut fresh = TriggerState::default();
        assert!(!should_fire_latency(&cfg, &mut fresh, ms(112), ms(1)));
    }

    #[test]
    fn ack_trigger_cases() {
        let cfg = AckTriggerConfig::new(7909, 0.1).unwrap();
        let mut st = TriggerState { last_fire_at: None, acks_since_fire: 799 };
        assert!(!should_fire_ack(&cfg, &mut st, VirtualTime::ZERO));
        st.acks_since_fire = 800;
        assert!(should_fire_ack(&cfg, &mut st, VirtualTime::ZERO));
        assert_eq!(st.acks_since_fire, 0);

        let mut st = TriggerState::default();
        let fires = (0..1600).filter(|_| st.on_ack(&cfg, VirtualTime::ZERO)).count();
        assert_eq!(fires, 2);
    }

    #[test]
    fn calibration_is_idempotent() {
        let run = run_with(Some(160), 7909);
        assert_eq!(calibrate_ack(&run, 0.1), calibrate_ack(&run, 0.1));
        assert_eq!(calibrate_latency(&run, 0.7), calibrate_latency(&run, 0.7));
    }

    proptest! {
        #[test]
        fn latency_cooldown_respected(rtts in proptest::collection::vec((0u64..300, 1u64..500), 1..400)) {
            let cfg = LatencyTriggerConfig::new(ms(160), 0.7).unwrap();
            let mut st = TriggerState::default();
            let mut now = VirtualTime::ZERO;
            let mut fires = Vec::new();
            for (rtt, gap) in rtts {
                now = now + ms(gap);
                if should_fire_latency(&cfg, &mut st, ms(rtt), now) {
                    fires.push(now);
                }
            }
            for w in fires.windows(2) {
                prop_assert!(w[1] - w[0] >= cfg.cooldown);
            }
        }

        #[test]
        fn ack_trigger_count(total in 0u64..20_000, baseline in 1_000u64..20_000, beta in 0.01f64..1.0) {
            let cfg = AckTriggerConfig::new(baseline, beta).unwrap();
            let mut st = TriggerState::default();
            let fires = (0..total).filter(|_| st.on_ack(&cfg, VirtualTime::ZERO)).count() as u64;
            prop_assert_eq!(fires, total / cfg.threshold_acks);
        }
    }
}
