//! Deterministic discrete-event engine.
//!
//! A single virtual clock drives the whole simulation. Events carry a
//! monotonically increasing sequence number so that events scheduled for the
//! same instant are processed in insertion order, which makes replays with the
//! same seed bit-for-bit reproducible.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, Sub};

use serde::Serialize;

use crate::error::SimError;

/// A point on the simulated clock, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn from_secs(secs: f64) -> Self {
        debug_assert!(
            secs.is_finite() || secs == f64::INFINITY,
            "non-finite time {secs}"
        );
        SimTime(secs)
    }

    pub fn secs(self) -> f64 {
        self.0
    }

    pub fn max(self, other: SimTime) -> SimTime {
        if other.0 > self.0 {
            other
        } else {
            self
        }
    }
}

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Add<f64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: f64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl Sub for SimTime {
    type Output = f64;
    fn sub(self, rhs: SimTime) -> f64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.0)
    }
}

/// Payloads expose a short kind tag and a numeric subject for the event log.
pub trait EventPayload {
    fn kind(&self) -> &'static str;
    fn subject(&self) -> u64;
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time: SimTime,
    pub seq: u64,
    pub payload: P,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.time == other.0.time && self.0.seq == other.0.seq
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; reverse for earliest-first.
        other
            .0
            .time
            .cmp(&self.0.time)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

/// Pending events plus the virtual clock.
pub struct EventQueue<P> {
    heap: BinaryHeap<Queued<P>>,
    clock: SimTime,
    next_seq: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            clock: SimTime::ZERO,
            next_seq: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Queue `payload` at `time`. Scheduling into the past is a logic bug.
    pub fn schedule(&mut self, time: SimTime, payload: P) -> Result<u64, SimError> {
        if time < self.clock || time.secs().is_nan() {
            return Err(SimError::ScheduleInPast {
                at: time.secs(),
                now: self.clock.secs(),
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued(Event { time, seq, payload }));
        Ok(seq)
    }

    /// Schedule `delay` seconds from now. Negative delays are clamped to zero.
    pub fn schedule_in(&mut self, delay: f64, payload: P) -> u64 {
        let at = self.clock + delay.max(0.0);
        self.schedule(at, payload)
            .expect("relative schedule is never in the past")
    }

    fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|q| q.0.time)
    }

    /// Pop the earliest event with `time <= end`, advancing the clock to it.
    pub fn pop_until(&mut self, end: SimTime) -> Option<Event<P>> {
        match self.peek_time() {
            Some(t) if t <= end => {
                let ev = self.heap.pop().map(|q| q.0)?;
                self.clock = ev.time;
                Some(ev)
            }
            _ => None,
        }
    }

    fn advance_to(&mut self, t: SimTime) {
        if t > self.clock {
            self.clock = t;
        }
    }
}

/// One line of the structured event log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRecord {
    pub time: f64,
    pub seq: u64,
    pub kind: &'static str,
    pub subject: u64,
}

/// Receives events from the engine and may schedule follow-ups.
pub trait Handler<P> {
    fn handle(&mut self, event: Event<P>, queue: &mut EventQueue<P>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub events_processed: u64,
    pub clock: SimTime,
}

pub struct Engine<P> {
    pub queue: EventQueue<P>,
    log: Option<Vec<EventRecord>>,
    processed: u64,
}

impl<P: EventPayload> Engine<P> {
    pub fn new(record_log: bool) -> Self {
        Engine {
            queue: EventQueue::new(),
            log: record_log.then(Vec::new),
            processed: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.queue.now()
    }

    pub fn schedule(&mut self, time: SimTime, payload: P) -> Result<u64, SimError> {
        self.queue.schedule(time, payload)
    }

    /// Process every event with `time <= end`. The clock finishes at `end`
    /// even when the queue drains early.
    pub fn run_until<H: Handler<P>>(&mut self, handler: &mut H, end: SimTime) -> RunReport {
        while let Some(ev) = self.queue.pop_until(end) {
            if let Some(log) = self.log.as_mut() {
                log.push(EventRecord {
                    time: ev.time.secs(),
                    seq: ev.seq,
                    kind: ev.payload.kind(),
                    subject: ev.payload.subject(),
                });
            }
            self.processed += 1;
            handler.handle(ev, &mut self.queue);
        }
        if end.secs().is_finite() {
            self.queue.advance_to(end);
        }
        RunReport {
            events_processed: self.processed,
            clock: self.queue.now(),
        }
    }

    pub fn log(&self) -> Option<&[EventRecord]> {
        self.log.as_deref()
    }

    /// Line-delimited JSON, one record per processed event.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.log.iter().flatten() {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}
