//! Virtual-time event loop.
//!
//! Time is kept in integer microseconds. Events are ordered by
//! `(fire_at, seq)` where `seq` is a per-queue insertion counter, so two
//! events scheduled for the same instant fire in the order they were
//! scheduled. Identical inputs always produce identical orderings.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Microseconds since simulation start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub const fn from_micros(us: u64) -> Self {
        VirtualTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        VirtualTime(ms * 1_000)
    }

    pub const fn from_secs(s: u64) -> Self {
        VirtualTime(s * 1_000_000)
    }

    /// Rounds to the nearest microsecond; negative and NaN inputs map to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        if s.is_nan() || s <= 0.0 {
            return VirtualTime::ZERO;
        }
        VirtualTime((s * 1e6).round() as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn saturating_sub(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0.saturating_sub(rhs.0))
    }
}

impl Add for VirtualTime {
    type Output = VirtualTime;
    fn add(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0 + rhs.0)
    }
}

impl Sub for VirtualTime {
    type Output = VirtualTime;
    fn sub(self, rhs: VirtualTime) -> VirtualTime {
        VirtualTime(self.0 - rhs.0)
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub duration: VirtualTime,
    pub seed: u64,
    pub queue_sample_interval: VirtualTime,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            duration: VirtualTime::from_secs(120),
            seed: 1,
            queue_sample_interval: VirtualTime::from_millis(10),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.duration == VirtualTime::ZERO {
            return Err(SimError::InvalidConfig("duration must be > 0".into()));
        }
        if self.queue_sample_interval == VirtualTime::ZERO {
            return Err(SimError::InvalidConfig("queue_sample_interval must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled at {fire_at} but the clock is already at {now}")]
    PastEvent { now: VirtualTime, fire_at: VirtualTime },
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
}

/// Identifies a scheduled event so it can be cancelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

#[derive(Debug)]
struct Entry<P> {
    fire_at: VirtualTime,
    seq: u64,
    payload: P,
}

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.fire_at == other.fire_at && self.seq == other.seq
    }
}
impl<P> Eq for Entry<P> {}
impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<P> Ord for Entry<P> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.fire_at, self.seq).cmp(&(other.fire_at, other.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub events_processed: u64,
    pub final_time: VirtualTime,
}

/// Min-heap of pending events plus the virtual clock.
#[derive(Debug)]
pub struct EventQueue<P> {
    now: VirtualTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<Entry<P>>>,
    live: HashSet<u64>,
    processed: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            now: VirtualTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            live: HashSet::new(),
            processed: 0,
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    /// Number of live (non-cancelled) pending events.
    pub fn pending(&self) -> usize {
        self.live.len()
    }

    pub fn schedule(&mut self, fire_at: VirtualTime, payload: P) -> Result<EventHandle, SimError> {
        if fire_at < self.now {
            return Err(SimError::PastEvent { now: self.now, fire_at });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry { fire_at, seq, payload }));
        self.live.insert(seq);
        Ok(EventHandle(seq))
    }

    /// Schedules `delay` after the current clock. Never fails.
    pub fn schedule_in(&mut self, delay: VirtualTime, payload: P) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, payload).expect("future event")
    }

    /// Returns false if the event already fired or was cancelled.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        self.live.remove(&handle.0)
    }

    /// Pops the next live event with `fire_at <= t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: VirtualTime) -> Option<(VirtualTime, P)> {
        loop {
            let next_at = self.heap.peek().map(|Reverse(e)| e.fire_at)?;
            if next_at > t_end {
                return None;
            }
            let Reverse(entry) = self.heap.pop().expect("peeked");
            if !self.live.remove(&entry.seq) {
                continue;
            }
            self.now = entry.fire_at;
            self.processed += 1;
            return Some((entry.fire_at, entry.payload));
        }
    }

    /// Processes every event with `fire_at <= t_end` in order. The handler may
    /// schedule further events; those are processed too if they fall in range.
    /// On return the clock sits at `t_end`.
    pub fn run_until<F>(&mut self, t_end: VirtualTime, mut handler: F) -> RunStats
    where
        F: FnMut(&mut EventQueue<P>, VirtualTime, P),
    {
        let before = self.processed;
        while let Some((at, payload)) = self.pop_until(t_end) {
            handler(self, at, payload);
        }
        if t_end > self.now {
            self.now = t_end;
        }
        RunStats { events_processed: self.processed - before, final_time: self.now }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_and_ties() {
        let mut q = EventQueue::new();
        q.schedule(VirtualTime::from_secs(5), "late").unwrap();
        q.schedule(VirtualTime::from_secs(1), "a").unwrap();
        q.schedule(VirtualTime::from_secs(1), "b").unwrap();
        let mut seen = Vec::new();
        q.run_until(VirtualTime::from_secs(10), |_, _, p| seen.push(p));
        assert_eq!(seen, vec!["a", "b", "late"]);
    }

    #[test]
    fn past_event_rejected() {
        let mut q: EventQueue<()> = EventQueue::new();
        q.run_until(VirtualTime::from_secs(10), |_, _, _| {});
        let err = q.schedule(VirtualTime::from_secs(9), ()).unwrap_err();
        assert_eq!(
            err,
            SimError::PastEvent { now: VirtualTime::from_secs(10), fire_at: VirtualTime::from_secs(9) }
        );
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut q: EventQueue<()> = EventQueue::new();
        let stats = q.run_until(VirtualTime::from_secs(120), |_, _, _| {});
        assert_eq!(stats.events_processed, 0);
        assert_eq!(stats.final_time, VirtualTime::from_secs(120));
    }

    #[test]
    fn boundary_is_inclusive() {
        let mut q = EventQueue::new();
        for s in [1, 1, 3] {
            q.schedule(VirtualTime::from_secs(s), s).unwrap();
        }
        let stats = q.run_until(VirtualTime::from_secs(2), |_, _, _| {});
        assert_eq!(stats.events_processed, 2);
        let stats = q.run_until(VirtualTime::from_secs(3), |_, _, _| {});
        assert_eq!(stats.events_processed, 1);
    }

    #[test]
    fn cancel_skips_event() {
        let mut q = EventQueue::new();
        let h = q.schedule(VirtualTime::from_secs(1), 1).unwrap();
        q.schedule(VirtualTime::from_secs(2), 2).unwrap();
        assert!(q.cancel(h));
        assert!(!q.cancel(h));
        assert_eq!(q.pending(), 1);
        let mut seen = Vec::new();
        q.run_until(VirtualTime::from_secs(3), |_, _, p| seen.push(p));
        assert_eq!(seen, vec![2]);
    }

    #[test]
    fn handlers_can_chain_events() {
        let mut q = EventQueue::new();
        q.schedule(VirtualTime::ZERO, 0u32).unwrap();
        let mut times = Vec::new();
        let stats = q.run_until(VirtualTime::from_millis(50), |q, t, n| {
            times.push(t);
            if n < 10 {
                q.schedule_in(VirtualTime::from_millis(10), n + 1);
            }
        });
        assert_eq!(stats.events_processed, 6);
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn run_config_rejects_zero_duration() {
        let cfg = RunConfig { duration: VirtualTime::ZERO, ..RunConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
