//! Deterministic discrete-event core.
//!
//! Virtual time is counted in integer ticks (one tick is one virtual
//! millisecond). Events are ordered by `(fire_at, seq)` where `seq` is a
//! per-scheduler counter that only ever grows, so two events scheduled for the
//! same tick fire in the order they were scheduled.
//!
//! Randomness is split into named [`RngStream`]s. Each stream is seeded from
//! the master seed and its label through SHA-256, so adding draws to one
//! module never shifts the sequence another module sees.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::ops::{Add, Sub};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Virtual time in ticks (milliseconds).
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, other: SimTime) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0.saturating_add(rhs))
    }
}

impl Sub for SimTime {
    type Output = u64;

    fn sub(self, rhs: SimTime) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Classifies event payloads for per-kind accounting.
pub trait EventKind {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EngineError {
    #[error("event scheduled at {fire_at} but the clock is already at {now}")]
    PastEvent { fire_at: SimTime, now: SimTime },
}

/// Handle returned by [`Scheduler::schedule`]; used to cancel a pending event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn seq(self) -> u64 {
        self.0
    }
}

/// One entry of the processed-event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ProcessedEvent {
    pub fire_at: SimTime,
    pub seq: u64,
    pub kind: &'static str,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub final_clock: SimTime,
    pub processed: u64,
    pub per_kind: BTreeMap<String, u64>,
}

pub struct Scheduler<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<(SimTime, u64)>>,
    pending: HashMap<u64, E>,
    log: Option<Vec<ProcessedEvent>>,
    summary: RunSummary,
}

impl<E: EventKind> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: EventKind> Scheduler<E> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            pending: HashMap::new(),
            log: None,
            summary: RunSummary::default(),
        }
    }

    /// Keep a log of every processed event.
    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn log(&self) -> Option<&[ProcessedEvent]> {
        self.log.as_deref()
    }

    pub fn take_log(&mut self) -> Vec<ProcessedEvent> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn schedule(&mut self, fire_at: SimTime, payload: E) -> Result<EventHandle, EngineError> {
        if fire_at < self.now {
            return Err(EngineError::PastEvent {
                fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse((fire_at, seq)));
        self.pending.insert(seq, payload);
        Ok(EventHandle(seq))
    }

    /// Schedule `delay` ticks after the current clock. Never fails.
    pub fn schedule_in(&mut self, delay: u64, payload: E) -> EventHandle {
        let at = self.now + delay;
        self.schedule(at, payload)
            .expect("relative scheduling is never in the past")
    }

    /// Returns the payload if the event had not fired yet.
    pub fn cancel(&mut self, handle: EventHandle) -> Option<E> {
        self.pending.remove(&handle.0)
    }

    /// Pop the next live event with `fire_at <= until`, advancing the clock.
    pub fn next_event(&mut self, until: SimTime) -> Option<(SimTime, u64, E)> {
        while let Some(&Reverse((fire_at, seq))) = self.queue.peek() {
            if fire_at > until {
                return None;
            }
            self.queue.pop();
            let Some(payload) = self.pending.remove(&seq) else {
                continue;
            };
            self.now = fire_at;
            let kind = payload.kind();
            self.summary.processed += 1;
            *self.summary.per_kind.entry(kind.to_string()).or_default() += 1;
            self.summary.final_clock = fire_at;
            if let Some(log) = self.log.as_mut() {
                log.push(ProcessedEvent { fire_at, seq, kind });
            }
            return Some((fire_at, seq, payload));
        }
        None
    }

    /// Process every event with `fire_at <= until` in `(fire_at, seq)` order.
    pub fn run<F>(&mut self, until: SimTime, mut handler: F) -> RunSummary
    where
        F: FnMut(&mut Self, E),
    {
        while let Some((_, _, payload)) = self.next_event(until) {
            handler(self, payload);
        }
        self.summary.clone()
    }

    pub fn summary(&self) -> &RunSummary {
        &self.summary
    }
}

/// A labelled, independently seeded random stream.
#[derive(Clone)]
pub struct RngStream {
    label: String,
    rng: ChaCha8Rng,
}

impl fmt::Debug for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RngStream")
            .field("label", &self.label)
            .finish()
    }
}

impl RngStream {
    /// Seed = SHA-256("c3sim/rng/v1" || master_seed as little-endian u64 || label).
    pub fn new(master_seed: u64, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"c3sim/rng/v1");
        hasher.update(master_seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        RngStream {
            label: label.to_string(),
            rng: ChaCha8Rng::from_seed(digest),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Exponentially distributed draw with the given mean.
    pub fn exponential(&mut self, mean: f64) -> f64 {
        -mean * libm::log(1.0 - self.unit())
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo;
        if span == u64::MAX {
            return self.rng.next_u64();
        }
        lo + self.below(span + 1)
    }

    /// Uniform integer in `[0, n)` by rejection; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Up to `k` distinct elements, in draw order.
    pub fn sample<T: Clone>(&mut self, items: &[T], k: usize) -> Vec<T> {
        let mut idx: Vec<usize> = (0..items.len()).collect();
        let k = k.min(idx.len());
        for i in 0..k {
            let j = i + self.below((idx.len() - i) as u64) as usize;
            idx.swap(i, j);
        }
        idx[..k].iter().map(|&i| items[i].clone()).collect()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
