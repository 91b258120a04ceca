// SPDX-License-Identifier: Apache-2.0

//! Deterministic multi-clock discrete-event kernel.
//!
//! Time is integer picoseconds. Each component lives in a [`ClockDomain`];
//! data crossing domains goes through an [`AsyncFifo`] whose entries become
//! readable at the second read-domain edge after the write (two-stage
//! synchronizer).

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::io::Write;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Simulation time in picoseconds.
pub type Ps = u64;

pub const PS_PER_US: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("cannot schedule at {at} ps, simulation time is already {now} ps")]
    TimeTravel { at: Ps, now: Ps },
    #[error("clock period must be positive")]
    ZeroPeriod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClockDomain {
    period_ps: u64,
    phase_ps: u64,
}

impl ClockDomain {
    pub fn new(period_ps: u64, phase_ps: u64) -> Result<Self, KernelError> {
        if period_ps == 0 {
            return Err(KernelError::ZeroPeriod);
        }
        Ok(ClockDomain { period_ps, phase_ps })
    }

    /// Shorthand for tests and built-ins where the period is known to be positive.
    pub fn with_period(period_ps: u64) -> Self {
        Self::new(period_ps, 0).expect("positive period")
    }

    pub fn period(&self) -> u64 {
        self.period_ps
    }

    pub fn phase(&self) -> u64 {
        self.phase_ps
    }

    pub fn tick_time(&self, k: u64) -> Ps {
        self.phase_ps + k * self.period_ps
    }

    /// Earliest edge at or after `t`.
    pub fn edge_at_or_after(&self, t: Ps) -> Ps {
        if t <= self.phase_ps {
            return self.phase_ps;
        }
        let k = (t - self.phase_ps).div_ceil(self.period_ps);
        self.tick_time(k)
    }

    /// Earliest edge strictly after `t`.
    pub fn edge_after(&self, t: Ps) -> Ps {
        self.edge_at_or_after(t + 1)
    }

    /// The `n`-th edge strictly after `t` (`n >= 1`).
    pub fn nth_edge_after(&self, t: Ps, n: u64) -> Ps {
        debug_assert!(n >= 1);
        self.edge_after(t) + (n - 1) * self.period_ps
    }

    /// Cycle index of the edge at `t`, if `t` is an edge.
    pub fn cycle_at(&self, t: Ps) -> Option<u64> {
        if t < self.phase_ps || (t - self.phase_ps) % self.period_ps != 0 {
            None
        } else {
            Some((t - self.phase_ps) / self.period_ps)
        }
    }

    /// Whole cycles spanned between two times, rounding down.
    pub fn cycles_between(&self, from: Ps, to: Ps) -> u64 {
        to.saturating_sub(from) / self.period_ps
    }

    /// `t + n` cycles.
    pub fn after_cycles(&self, t: Ps, n: u64) -> Ps {
        t + n * self.period_ps
    }
}

/// Returned by [`AsyncFifo::push`] when the FIFO is full; hands the value back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Full<T>(pub T);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Empty;

/// Bounded FIFO between two clock domains.
#[derive(Debug, Clone)]
pub struct AsyncFifo<T> {
    capacity: usize,
    write_domain: ClockDomain,
    read_domain: ClockDomain,
    entries: VecDeque<(T, Ps)>,
}

/// Synchronizer depth for every crossing.
pub const SYNC_STAGES: u64 = 2;

impl<T> AsyncFifo<T> {
    pub fn new(capacity: usize, write_domain: ClockDomain, read_domain: ClockDomain) -> Self {
        assert!(capacity >= 1, "fifo capacity must be at least 1");
        AsyncFifo { capacity, write_domain, read_domain, entries: VecDeque::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn free(&self) -> usize {
        self.capacity - self.entries.len()
    }

    pub fn write_domain(&self) -> ClockDomain {
        self.write_domain
    }

    pub fn read_domain(&self) -> ClockDomain {
        self.read_domain
    }

    /// Time at which a value written at `t` becomes readable.
    pub fn visible_time(&self, t: Ps) -> Ps {
        self.read_domain.nth_edge_after(t, SYNC_STAGES)
    }

    pub fn push(&mut self, value: T, now: Ps) -> Result<Ps, Full<T>> {
        self.push_delayed(value, now, 0)
    }

    /// Pushes with `extra` read-domain cycles on top of the synchronizer.
    pub fn push_delayed(&mut self, value: T, now: Ps, extra: u64) -> Result<Ps, Full<T>> {
        if self.is_full() {
            return Err(Full(value));
        }
        let visible = self.read_domain.nth_edge_after(now, SYNC_STAGES + extra);
        // Never overtake an earlier entry.
        let visible = self.entries.back().map_or(visible, |(_, v)| visible.max(*v));
        self.entries.push_back((value, visible));
        Ok(visible)
    }

    pub fn peek(&self, now: Ps) -> Option<&T> {
        match self.entries.front() {
            Some((v, vis)) if *vis <= now => Some(v),
            _ => None,
        }
    }

    pub fn pop(&mut self, now: Ps) -> Result<T, Empty> {
        match self.entries.front() {
            Some((_, vis)) if *vis <= now => Ok(self.entries.pop_front().expect("front exists").0),
            _ => Err(Empty),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &(T, Ps)> {
        self.entries.iter()
    }
}

/// Component identifier used for deterministic tie-breaking.
pub type ComponentId = u32;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct EventKey {
    time: Ps,
    component: ComponentId,
    seq: u64,
}

/// Pending events ordered by `(time, component, sequence)`.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<(EventKey, Slot<E>)>>,
    next_seq: u64,
}

/// Wrapper so the payload never participates in ordering.
#[derive(Debug)]
struct Slot<E>(E);

impl<E> PartialEq for Slot<E> {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
impl<E> Eq for Slot<E> {}
impl<E> PartialOrd for Slot<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for Slot<E> {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        EventQueue { heap: BinaryHeap::new(), next_seq: 0 }
    }
}

impl<E> EventQueue<E> {
    pub fn push(&mut self, time: Ps, component: ComponentId, ev: E) {
        let key = EventKey { time, component, seq: self.next_seq };
        self.next_seq += 1;
        self.heap.push(Reverse((key, Slot(ev))));
    }

    pub fn peek_time(&self) -> Option<Ps> {
        self.heap.peek().map(|Reverse((k, _))| k.time)
    }

    pub fn pop(&mut self) -> Option<(Ps, ComponentId, E)> {
        self.heap.pop().map(|Reverse((k, Slot(e)))| (k.time, k.component, e))
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Hash of every dispatched line, optionally mirrored to a writer.
pub struct Trace {
    hasher: Sha256,
    lines: u64,
    sink: Option<Box<dyn Write>>,
}

impl fmt::Debug for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trace").field("lines", &self.lines).finish()
    }
}

impl Trace {
    pub fn new(sink: Option<Box<dyn Write>>) -> Self {
        Trace { hasher: Sha256::new(), lines: 0, sink }
    }

    pub fn record(&mut self, time: Ps, component: &str, event: &dyn fmt::Display) {
        let line = format!("{time} {component} {event}\n");
        self.hasher.update(line.as_bytes());
        self.lines += 1;
        if let Some(w) = self.sink.as_mut() {
            // Trace output is best effort; a broken pipe must not abort the run.
            let _ = w.write_all(line.as_bytes());
        }
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn digest(&self) -> String {
        let d = self.hasher.clone().finalize();
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn flush(&mut self) {
        if let Some(w) = self.sink.as_mut() {
            let _ = w.flush();
        }
    }
}

/// Event loop: owns the queue and the current time.
#[derive(Debug)]
pub struct Kernel<E> {
    now: Ps,
    queue: EventQueue<E>,
    scheduled: u64,
    dispatched: u64,
}

impl<E> Default for Kernel<E> {
    fn default() -> Self {
        Kernel { now: 0, queue: EventQueue::default(), scheduled: 0, dispatched: 0 }
    }
}

impl<E> Kernel<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Ps {
        self.now
    }

    pub fn schedule(&mut self, at: Ps, component: ComponentId, ev: E) -> Result<(), KernelError> {
        if at < self.now {
            return Err(KernelError::TimeTravel { at, now: self.now });
        }
        self.queue.push(at, component, ev);
        self.scheduled += 1;
        Ok(())
    }

    pub fn scheduled(&self) -> u64 {
        self.scheduled
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn pending(&self) -> u64 {
        self.queue.len() as u64
    }

    pub fn next_time(&self) -> Option<Ps> {
        self.queue.peek_time()
    }

    /// Pops the next event if it is due at or before `t_end`.
    pub fn pop_until(&mut self, t_end: Ps) -> Option<(Ps, ComponentId, E)> {
        match self.queue.peek_time() {
            Some(t) if t <= t_end => {
                let (t, c, e) = self.queue.pop().expect("peeked");
                self.now = t;
                self.dispatched += 1;
                Some((t, c, e))
            }
            _ => None,
        }
    }

    /// Dispatches every event with time `<= t_end`, then parks time at `t_end`.
    pub fn run_until<F>(&mut self, t_end: Ps, mut handler: F) -> Ps
    where
        F: FnMut(&mut Kernel<E>, Ps, ComponentId, E),
    {
        while let Some((t, c, e)) = self.pop_until(t_end) {
            handler(self, t, c, e);
        }
        self.now = self.now.max(t_end);
        self.now
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edges() {
        let d = ClockDomain::new(3333, 0).unwrap();
        assert_eq!(d.edge_at_or_after(0), 0);
        assert_eq!(d.edge_after(0), 3333);
        assert_eq!(d.nth_edge_after(0, 2), 6666);
        assert_eq!(d.edge_at_or_after(3334), 6666);
        assert_eq!(d.cycle_at(6666), Some(2));
        assert_eq!(d.cycle_at(6667), None);
        let p = ClockDomain::new(1000, 250).unwrap();
        assert_eq!(p.edge_at_or_after(0), 250);
        assert_eq!(p.edge_after(250), 1250);
        assert!(ClockDomain::new(0, 0).is_err());
    }

    #[test]
    fn aligned_fifo_visible_two_ticks_later() {
        let d = ClockDomain::with_period(1000);
        let mut f = AsyncFifo::new(4, d, d);
        assert_eq!(f.push(7u32, 5000).unwrap(), 7000);
        assert_eq!(f.pop(6000), Err(Empty));
        assert_eq!(f.pop(7000), Ok(7));
    }

    #[test]
    fn fast_to_slow_crossing() {
        // Hand-enumerated 300 MHz edges after 0: 3333, 6666, 9999 ...
        let w = ClockDomain::with_period(1000);
        let r = ClockDomain::with_period(3333);
        let mut f = AsyncFifo::new(2, w, r);
        assert_eq!(f.push('a', 0).unwrap(), 6666);
        assert_eq!(f.push('b', 4000).unwrap(), 9999);
        assert!(matches!(f.push('c', 5000), Err(Full('c'))));
        assert_eq!(f.peek(6665), None);
        assert_eq!(f.pop(6666), Ok('a'));
    }

    #[test]
    fn empty_pop_leaves_state() {
        let d = ClockDomain::with_period(10);
        let mut f: AsyncFifo<u8> = AsyncFifo::new(1, d, d);
        assert_eq!(f.pop(100), Err(Empty));
        assert!(f.is_empty());
    }

    #[test]
    fn tie_break_by_component() {
        let mut k: Kernel<&str> = Kernel::new();
        k.schedule(10, 5, "five").unwrap();
        k.schedule(10, 2, "two").unwrap();
        k.schedule(5, 9, "early").unwrap();
        let mut order = vec![];
        k.run_until(100, |_, _, _, e| order.push(e));
        assert_eq!(order, ["early", "two", "five"]);
    }

    #[test]
    fn same_time_schedule_fires_after_queued() {
        let mut k: Kernel<u32> = Kernel::new();
        k.schedule(0, 1, 1).unwrap();
        let mut order = vec![];
        k.run_until(0, |k, t, _, e| {
            order.push(e);
            if e == 1 {
                k.schedule(t, 1, 2).unwrap();
            }
        });
        assert_eq!(order, [1, 2]);
    }

    #[test]
    fn time_travel_rejected() {
        let mut k: Kernel<()> = Kernel::new();
        k.run_until(50, |_, _, _, _| {});
        assert_eq!(k.schedule(10, 0, ()), Err(KernelError::TimeTravel { at: 10, now: 50 }));
    }

    #[test]
    fn empty_queue_returns_end() {
        let mut k: Kernel<()> = Kernel::new();
        assert_eq!(k.run_until(1234, |_, _, _, _| {}), 1234);
    }

    #[test]
    fn single_event_dispatched_once() {
        let mut k: Kernel<()> = Kernel::new();
        k.schedule(7, 0, ()).unwrap();
        let mut n = 0;
        k.run_until(100, |_, _, _, _| n += 1);
        k.run_until(200, |_, _, _, _| n += 1);
        assert_eq!(n, 1);
        assert_eq!(k.scheduled(), k.dispatched() + k.pending());
    }
}
