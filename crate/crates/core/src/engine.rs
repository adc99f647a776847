//! Discrete-event kernel: a future-event list ordered by `(fire_at, seq)`,
//! a virtual clock and a seeded random number generator.
//!
//! Events that share a timestamp are delivered in insertion order, so a run
//! is fully determined by the scenario and the seed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Simulated time in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    /// Panics on negative or non-finite input; simulated time is always a
    /// finite, non-negative number of seconds.
    pub fn from_secs(secs: f64) -> Self {
        assert!(secs.is_finite() && secs >= 0.0, "invalid simulated time {secs}");
        // adding 0.0 turns -0.0 into 0.0 so Eq and Ord agree
        SimTime(secs + 0.0)
    }

    pub fn secs(self) -> f64 {
        self.0
    }

    pub fn millis(self) -> f64 {
        self.0 * 1000.0
    }
}

impl Eq for SimTime {}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.0)
    }
}

impl From<SimTime> for f64 {
    fn from(t: SimTime) -> f64 {
        t.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EventKind {
    Generate,
    Dispatch,
    StartExecution,
    Derive,
    CloudletComplete,
    ScalingCheck,
    MigrationCheck,
    MetricsSample,
    EndSimulation,
}

impl EventKind {
    pub const ALL: [EventKind; 9] = [
        EventKind::Generate,
        EventKind::Dispatch,
        EventKind::StartExecution,
        EventKind::Derive,
        EventKind::CloudletComplete,
        EventKind::ScalingCheck,
        EventKind::MigrationCheck,
        EventKind::MetricsSample,
        EventKind::EndSimulation,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug)]
pub struct SimEvent<P> {
    pub fire_at: SimTime,
    pub kind: EventKind,
    pub payload: P,
    pub seq: u64,
}

struct Queued<P>(SimEvent<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.0.seq == other.0.seq
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    // BinaryHeap is a max-heap: reverse so the earliest (fire_at, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .fire_at
            .cmp(&self.0.fire_at)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("event {kind:?} scheduled at {fire_at} is in the past (clock {clock})")]
    InThePast {
        kind: EventKind,
        fire_at: SimTime,
        clock: SimTime,
    },
    #[error("event time {0} is not a finite non-negative number")]
    InvalidTime(f64),
}

/// Outcome of [`Kernel::run`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimSummary {
    pub processed: u64,
    pub per_kind: BTreeMap<EventKind, u64>,
    pub clock: SimTime,
    pub scheduled: u64,
    pub remaining: u64,
}

/// Receives every delivered event.
pub trait Handler<P> {
    fn handle(&mut self, event: SimEvent<P>, kernel: &mut Kernel<P>);
}

type HandlerFn<S, P> = fn(&mut S, SimEvent<P>, &mut Kernel<P>);

/// Per-kind handler registration over a shared state `S`.
pub struct HandlerTable<S, P> {
    state: S,
    handlers: [Option<HandlerFn<S, P>>; 9],
}

impl<S, P> HandlerTable<S, P> {
    pub fn new(state: S) -> Self {
        HandlerTable {
            state,
            handlers: [None; 9],
        }
    }

    pub fn register(&mut self, kind: EventKind, f: HandlerFn<S, P>) -> &mut Self {
        self.handlers[kind.index()] = Some(f);
        self
    }

    pub fn is_registered(&self, kind: EventKind) -> bool {
        self.handlers[kind.index()].is_some()
    }

    pub fn state(&self) -> &S {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut S {
        &mut self.state
    }

    pub fn into_state(self) -> S {
        self.state
    }
}

impl<S, P> Handler<P> for HandlerTable<S, P> {
    fn handle(&mut self, event: SimEvent<P>, kernel: &mut Kernel<P>) {
        match self.handlers[event.kind.index()] {
            Some(f) => f(&mut self.state, event, kernel),
            // A missing handler is a wiring bug in the caller.
            None => panic!("no handler registered for {:?}", event.kind),
        }
    }
}

pub struct Kernel<P> {
    queue: BinaryHeap<Queued<P>>,
    clock: SimTime,
    next_seq: u64,
    processed: u64,
    per_kind: [u64; 9],
    stopped: bool,
    rng: ChaCha8Rng,
}

impl<P> Kernel<P> {
    pub fn new(seed: u64) -> Self {
        Kernel {
            queue: BinaryHeap::new(),
            clock: SimTime::ZERO,
            next_seq: 0,
            processed: 0,
            per_kind: [0; 9],
            stopped: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn now(&self) -> f64 {
        self.clock.0
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Total events ever accepted by [`Kernel::schedule`].
    pub fn scheduled(&self) -> u64 {
        self.next_seq
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    /// Enqueue an event; returns its sequence number.
    pub fn schedule(&mut self, fire_at: f64, kind: EventKind, payload: P) -> Result<u64, EngineError> {
        if !fire_at.is_finite() || fire_at < 0.0 {
            return Err(EngineError::InvalidTime(fire_at));
        }
        let fire_at = SimTime(fire_at);
        if fire_at < self.clock {
            return Err(EngineError::InThePast {
                kind,
                fire_at,
                clock: self.clock,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued(SimEvent {
            fire_at,
            kind,
            payload,
            seq,
        }));
        Ok(seq)
    }

    /// Schedules relative to the current clock. Panics if `delay` is negative,
    /// which can only come from a bug in the caller.
    pub fn schedule_in(&mut self, delay: f64, kind: EventKind, payload: P) -> u64 {
        let at = self.clock.0 + delay;
        self.schedule(at, kind, payload)
            .unwrap_or_else(|e| panic!("schedule_in({delay}): {e}"))
    }

    /// Ask the running loop to return after the current event.
    pub fn stop(&mut self) {
        self.stopped = true;
    }

    /// Next event that would be delivered, without advancing the clock.
    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|q| q.0.fire_at)
    }

    fn pop(&mut self) -> Option<SimEvent<P>> {
        let Queued(ev) = self.queue.pop()?;
        debug_assert!(ev.fire_at >= self.clock);
        self.clock = ev.fire_at;
        self.processed += 1;
        self.per_kind[ev.kind.index()] += 1;
        Some(ev)
    }

    /// Deliver events in `(fire_at, seq)` order until the queue is empty, the
    /// next event lies beyond `until`, an `EndSimulation` event has been
    /// handled, or a handler calls [`Kernel::stop`].
    pub fn run<H: Handler<P>>(&mut self, handler: &mut H, until: Option<f64>) -> SimSummary {
        self.stopped = false;
        while !self.stopped {
            match (self.peek_time(), until) {
                (None, _) => break,
                (Some(t), Some(limit)) if t.0 > limit => break,
                _ => {}
            }
            let ev = self.pop().expect("peeked");
            let end = ev.kind == EventKind::EndSimulation;
            handler.handle(ev, self);
            if end {
                break;
            }
        }
        self.summary()
    }

    pub fn summary(&self) -> SimSummary {
        let per_kind = EventKind::ALL
            .iter()
            .filter(|k| self.per_kind[k.index()] > 0)
            .map(|&k| (k, self.per_kind[k.index()]))
            .collect();
        SimSummary {
            processed: self.processed,
            per_kind,
            clock: self.clock,
            scheduled: self.next_seq,
            remaining: self.queue.len() as u64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Recorder(Vec<(f64, EventKind, u32)>);

    impl Handler<u32> for Recorder {
        fn handle(&mut self, ev: SimEvent<u32>, k: &mut Kernel<u32>) {
            self.0.push((k.now(), ev.kind, ev.payload));
        }
    }

    #[test]
    fn first_event_at_zero() {
        let mut k = Kernel::new(1);
        k.schedule(0.0, EventKind::Generate, 0).unwrap();
        let mut r = Recorder(vec![]);
        let s = k.run(&mut r, None);
        assert_eq!(r.0, vec![(0.0, EventKind::Generate, 0)]);
        assert_eq!(s.processed, 1);
    }

    #[test]
    fn ties_break_by_insertion_order() {
        let mut k = Kernel::new(1);
        k.schedule(5.0, EventKind::Dispatch, 1).unwrap();
        k.schedule(5.0, EventKind::Generate, 2).unwrap();
        let mut r = Recorder(vec![]);
        k.run(&mut r, None);
        assert_eq!(r.0.iter().map(|e| e.2).collect::<Vec<_>>(), vec![1, 2]);
    }

    #[test]
    fn delivered_when_clock_reaches_fire_time() {
        let mut k = Kernel::new(1);
        k.schedule(1.0, EventKind::Generate, 0).unwrap();
        k.schedule(3.2, EventKind::CloudletComplete, 1).unwrap();
        let mut r = Recorder(vec![]);
        k.run(&mut r, None);
        assert_eq!(r.0[1].0, 3.2);
    }

    #[test]
    fn rejects_past_events() {
        let mut k: Kernel<u32> = Kernel::new(1);
        k.schedule(2.0, EventKind::Generate, 0).unwrap();
        let mut r = Recorder(vec![]);
        k.run(&mut r, None);
        let err = k.schedule(1.0, EventKind::Generate, 0).unwrap_err();
        assert!(matches!(err, EngineError::InThePast { .. }));
        assert!(k.schedule(f64::NAN, EventKind::Generate, 0).is_err());
    }

    #[test]
    fn empty_queue_summary() {
        let mut k: Kernel<u32> = Kernel::new(1);
        let s = k.run(&mut Recorder(vec![]), None);
        assert_eq!(s.processed, 0);
        assert_eq!(s.clock, SimTime::ZERO);
    }

    #[test]
    fn run_until_leaves_later_events() {
        let mut k = Kernel::new(1);
        for t in [1.0, 2.0, 3.0] {
            k.schedule(t, EventKind::MetricsSample, 0).unwrap();
        }
        let s = k.run(&mut Recorder(vec![]), Some(2.5));
        assert_eq!(s.processed, 2);
        assert_eq!(s.clock.secs(), 2.0);
        assert_eq!(s.remaining, 1);
        assert_eq!(s.scheduled, s.processed + s.remaining);
    }

    #[test]
    fn end_simulation_stops_the_loop() {
        let mut k = Kernel::new(1);
        k.schedule(1.0, EventKind::EndSimulation, 0).unwrap();
        k.schedule(2.0, EventKind::Generate, 0).unwrap();
        let s = k.run(&mut Recorder(vec![]), None);
        assert_eq!(s.processed, 1);
        assert_eq!(s.remaining, 1);
    }

    #[test]
    fn handler_table_dispatches_by_kind() {
        fn on_gen(n: &mut Vec<u32>, ev: SimEvent<u32>, k: &mut Kernel<u32>) {
            n.push(ev.payload);
            if ev.payload < 3 {
                k.schedule_in(1.0, EventKind::Generate, ev.payload + 1);
            }
        }
        let mut table = HandlerTable::new(Vec::new());
        table.register(EventKind::Generate, on_gen);
        let mut k = Kernel::new(7);
        k.schedule(0.0, EventKind::Generate, 0).unwrap();
        let s = k.run(&mut table, None);
        assert_eq!(table.state(), &vec![0, 1, 2, 3]);
        assert_eq!(s.per_kind[&EventKind::Generate], 4);
        assert_eq!(s.clock.secs(), 3.0);
    }

    #[test]
    #[should_panic(expected = "no handler registered")]
    fn unregistered_kind_panics() {
        let mut table: HandlerTable<(), u32> = HandlerTable::new(());
        let mut k = Kernel::new(7);
        k.schedule(0.0, EventKind::Derive, 0).unwrap();
        k.run(&mut table, None);
    }

    mod prop {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn delivery_is_sorted_and_nothing_is_lost(
                times in proptest::collection::vec(0u32..50, 0..200),
                until in 0u32..60,
            ) {
                let mut k = Kernel::new(3);
                for (i, t) in times.iter().enumerate() {
                    k.schedule(*t as f64 / 2.0, EventKind::Dispatch, i as u32).unwrap();
                }
                let mut r = Recorder(vec![]);
                let s = k.run(&mut r, Some(until as f64 / 2.0));
                for w in r.0.windows(2) {
                    let a = (w[0].0, w[0].2);
                    let b = (w[1].0, w[1].2);
                    // equal times must come out in insertion order
                    prop_assert!(a.0 < b.0 || (a.0 == b.0 && a.1 < b.1));
                }
                prop_assert_eq!(s.scheduled, s.processed + s.remaining);
            }
        }
    }
}
