// SPDX-License-Identifier: Apache-2.0

//! Alternative integration models: a shared bus in place of the mesh, and a
//! single-ported shared cache in place of the per-channel buffers.

use std::collections::{BTreeMap, VecDeque};

use crate::codec::{Flit, RouteInfo, FLIT_BITS};
use crate::fabric::{EndpointId, Fabric, FabricStats, Sinks};
use crate::kernel::{ClockDomain, Full, Ps};

/// Bits carried per bus beat.
pub const BEAT_BITS: u64 = 128;

/// Beats needed for a packet of `flits` flits.
pub fn packet_beats(flits: u64) -> u64 {
    (flits * FLIT_BITS as u64).div_ceil(BEAT_BITS)
}

/// Beats that complete flit `k` (0-based) of a packet.
fn beats_for_flit(k: u64) -> u64 {
    packet_beats(k + 1) - packet_beats(k)
}

#[derive(Debug, Clone)]
pub struct BusConfig {
    /// Address/response handshake cycles paid at the start of every burst.
    pub txn_overhead: u64,
    /// Per-endpoint maximum burst length in beats (`None` = whole packet in one burst).
    pub burst_limit: Vec<Option<u64>>,
    /// Depth of each master's outgoing FIFO, in flits.
    pub link_depth: usize,
}

impl BusConfig {
    pub fn ideal(endpoints: usize) -> Self {
        BusConfig { txn_overhead: 0, burst_limit: vec![None; endpoints], link_depth: 2 }
    }
}

#[derive(Debug, Clone)]
enum BusState {
    Idle,
    Busy(Transfer),
}

#[derive(Debug, Clone)]
struct Transfer {
    master: EndpointId,
    dest: EndpointId,
    overhead_left: u64,
    flit_index: u64,
    beats_into_flit: u64,
    beats_in_burst: u64,
}

/// One shared channel, one 128-bit beat per cycle, round-robin among masters.
/// A granted master keeps the bus until its packet's tail is delivered.
#[derive(Debug, Clone)]
pub struct Bus {
    cfg: BusConfig,
    clock: ClockDomain,
    endpoints: Vec<RouteInfo>,
    links: Vec<VecDeque<Flit>>,
    state: BusState,
    rr: usize,
    stats: FabricStats,
    /// Beats moved on behalf of each master.
    pub beats_by_master: Vec<u64>,
    /// Cycle at which each master was last granted (for tests and diagnostics).
    pub grants: Vec<(u64, EndpointId)>,
    cycle: u64,
    record_grants: bool,
}

impl Bus {
    pub fn new(cfg: BusConfig, clock: ClockDomain, endpoints: Vec<RouteInfo>) -> Self {
        let n = endpoints.len();
        assert_eq!(cfg.burst_limit.len(), n, "one burst limit per endpoint");
        Bus {
            cfg,
            clock,
            links: vec![VecDeque::new(); n],
            endpoints,
            state: BusState::Idle,
            rr: 0,
            stats: FabricStats::default(),
            beats_by_master: vec![0; n],
            grants: Vec::new(),
            cycle: 0,
            record_grants: false,
        }
    }

    pub fn record_grants(&mut self, on: bool) {
        self.record_grants = on;
    }

    fn arbitrate(&mut self) -> Option<EndpointId> {
        let n = self.links.len();
        let winner = (0..n)
            .map(|k| (self.rr + k) % n)
            .find(|&m| self.links[m].front().is_some_and(Flit::is_head))?;
        self.rr = (winner + 1) % n;
        Some(winner)
    }
}

impl Fabric for Bus {
    fn clock(&self) -> ClockDomain {
        self.clock
    }

    fn endpoints(&self) -> &[RouteInfo] {
        &self.endpoints
    }

    fn can_inject(&self, ep: EndpointId) -> bool {
        self.links[ep].len() < self.cfg.link_depth
    }

    fn inject(&mut self, ep: EndpointId, flit: Flit, _now: Ps) -> Result<(), Full<Flit>> {
        if !self.can_inject(ep) {
            return Err(Full(flit));
        }
        self.links[ep].push_back(flit);
        self.stats.injected += 1;
        Ok(())
    }

    fn step(&mut self, now: Ps, sinks: &mut dyn Sinks) -> usize {
        let cycle = self.cycle;
        self.cycle += 1;
        let mut t = match std::mem::replace(&mut self.state, BusState::Idle) {
            BusState::Idle => {
                // The grant itself takes this cycle.
                if let Some(master) = self.arbitrate() {
                    let head = *self.links[master].front().expect("arbitrated on a head");
                    let dest = self.endpoint_for(RouteInfo::decode(head.routing_info()));
                    let Some(dest) = dest else {
                        // Unroutable packet: discard it whole.
                        while let Some(f) = self.links[master].pop_front() {
                            self.stats.dropped += 1;
                            if f.is_tail() {
                                break;
                            }
                        }
                        return 0;
                    };
                    if self.record_grants {
                        self.grants.push((cycle, master));
                    }
                    self.state = BusState::Busy(Transfer {
                        master,
                        dest,
                        overhead_left: self.cfg.txn_overhead,
                        flit_index: 0,
                        beats_into_flit: 0,
                        beats_in_burst: 0,
                    });
                }
                return 0;
            }
            BusState::Busy(t) => t,
        };

        if t.overhead_left > 0 {
            t.overhead_left -= 1;
            self.state = BusState::Busy(t);
            return 0;
        }
        let Some(&flit) = self.links[t.master].front() else {
            // Master has not produced the next flit yet; the bus stays held.
            self.stats.stalls += 1;
            self.state = BusState::Busy(t);
            return 0;
        };
        let needed = beats_for_flit(t.flit_index);
        let completes_flit = t.beats_into_flit + 1 == needed;
        if completes_flit && !sinks.has_space(t.dest) {
            self.stats.stalls += 1;
            self.state = BusState::Busy(t);
            return 0;
        }
        t.beats_into_flit += 1;
        t.beats_in_burst += 1;
        self.stats.hops += 1;
        self.beats_by_master[t.master] += 1;
        let mut moved = 0;
        if completes_flit {
            self.links[t.master].pop_front();
            sinks.deliver(t.dest, flit, now);
            self.stats.ejected += 1;
            moved = 1;
            t.flit_index += 1;
            t.beats_into_flit = 0;
            if flit.is_tail() {
                return moved;
            }
        }
        if let Some(limit) = self.cfg.burst_limit[t.master] {
            if t.beats_in_burst >= limit {
                t.beats_in_burst = 0;
                t.overhead_left = self.cfg.txn_overhead;
            }
        }
        self.state = BusState::Busy(t);
        moved
    }

    fn in_flight(&self) -> usize {
        self.links.iter().map(VecDeque::len).sum()
    }

    fn stats(&self) -> &FabricStats {
        &self.stats
    }

    fn describe(&self) -> String {
        let mut s = format!("bus state {:?}\n", self.state);
        for (i, l) in self.links.iter().enumerate() {
            if !l.is_empty() {
                s.push_str(&format!("master {i}: {} flits queued\n", l.len()));
            }
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOp {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheConfig {
    pub size_bytes: usize,
    pub ways: usize,
    pub line_bytes: usize,
    /// Bytes moved through the port per cycle.
    pub port_bytes: usize,
    pub hit_latency: u64,
    pub miss_penalty: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            size_bytes: 32 * 1024,
            ways: 2,
            line_bytes: 64,
            port_bytes: 32,
            hit_latency: 3,
            miss_penalty: 30,
        }
    }
}

#[derive(Debug, Clone)]
struct Line {
    tag: u64,
    dirty: bool,
    last_use: u64,
    data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccessResult {
    pub start: Ps,
    pub completion: Ps,
    pub hits: u32,
    pub misses: u32,
}

#[derive(Debug, Clone, Default)]
pub struct CacheStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    /// Total picoseconds requests waited for the port.
    pub queue_wait_ps: u64,
}

/// Write-back, write-allocate, LRU set-associative cache behind one port.
/// Requests are served in arrival order; a miss blocks the port for the
/// backing-store penalty.
#[derive(Debug, Clone)]
pub struct SharedCache {
    cfg: CacheConfig,
    clock: ClockDomain,
    sets: Vec<Vec<Line>>,
    backing: BTreeMap<u64, Vec<u8>>,
    port_free_at: Ps,
    use_counter: u64,
    stats: CacheStats,
}

impl SharedCache {
    pub fn new(cfg: CacheConfig, clock: ClockDomain) -> Self {
        assert!(cfg.ways >= 1 && cfg.line_bytes >= 1 && cfg.port_bytes >= 1);
        let num_sets = (cfg.size_bytes / (cfg.line_bytes * cfg.ways)).max(1);
        SharedCache {
            sets: vec![Vec::new(); num_sets],
            cfg,
            clock,
            backing: BTreeMap::new(),
            port_free_at: 0,
            use_counter: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn stats(&self) -> &CacheStats {
        &self.stats
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn clock(&self) -> ClockDomain {
        self.clock
    }

    fn locate(&self, addr: u64) -> (usize, u64, usize) {
        let line = addr / self.cfg.line_bytes as u64;
        let set = (line % self.sets.len() as u64) as usize;
        let tag = line / self.sets.len() as u64;
        (set, tag, (addr % self.cfg.line_bytes as u64) as usize)
    }

    /// Brings the line holding `addr` in; returns (set, way, was_hit).
    fn touch(&mut self, addr: u64) -> (usize, usize, bool) {
        let (set, tag, _) = self.locate(addr);
        self.use_counter += 1;
        let stamp = self.use_counter;
        if let Some(w) = self.sets[set].iter().position(|l| l.tag == tag) {
            self.sets[set][w].last_use = stamp;
            return (set, w, true);
        }
        let line_bytes = self.cfg.line_bytes;
        let line_no = addr / line_bytes as u64;
        let data = self.backing.get(&line_no).cloned().unwrap_or_else(|| vec![0; line_bytes]);
        let fresh = Line { tag, dirty: false, last_use: stamp, data };
        let ways = &mut self.sets[set];
        let way = if ways.len() < self.cfg.ways {
            ways.push(fresh);
            ways.len() - 1
        } else {
            let victim = (0..ways.len()).min_by_key(|&w| ways[w].last_use).expect("non-empty set");
            let old = std::mem::replace(&mut ways[victim], fresh);
            if old.dirty {
                let nsets = self.sets.len() as u64;
                self.backing.insert(old.tag * nsets + set as u64, old.data);
            }
            victim
        };
        (set, way, false)
    }

    /// Reads or writes `buf.len()` bytes at `addr` for `requester`, arriving at `now`.
    /// Writes take their bytes from `buf`; reads fill it.
    pub fn access(&mut self, now: Ps, _requester: usize, op: CacheOp, addr: u64, buf: &mut [u8]) -> AccessResult {
        let period = self.clock.period();
        let arrive = self.clock.edge_at_or_after(now);
        let start = arrive.max(self.port_free_at);
        self.stats.accesses += 1;
        self.stats.queue_wait_ps += start - arrive;
        let mut issue = start;
        let mut completion = start + self.cfg.hit_latency * period;
        let mut result = AccessResult { start, completion, hits: 0, misses: 0 };
        let mut off = 0usize;
        while off < buf.len() || (buf.is_empty() && off == 0) {
            let a = addr + off as u64;
            let (_, _, in_line) = self.locate(a);
            let chunk = self
                .cfg
                .port_bytes
                .min(self.cfg.line_bytes - in_line)
                .min(buf.len() - off);
            let (set, way, hit) = self.touch(a);
            let line = &mut self.sets[set][way];
            match op {
                CacheOp::Read => buf[off..off + chunk].copy_from_slice(&line.data[in_line..in_line + chunk]),
                CacheOp::Write => {
                    line.data[in_line..in_line + chunk].copy_from_slice(&buf[off..off + chunk]);
                    line.dirty = true;
                }
            }
            let penalty = if hit { 0 } else { self.cfg.miss_penalty * period };
            if hit {
                result.hits += 1;
                self.stats.hits += 1;
            } else {
                result.misses += 1;
                self.stats.misses += 1;
            }
            completion = issue + penalty + self.cfg.hit_latency * period;
            issue += period + penalty;
            if buf.is_empty() {
                break;
            }
            off += chunk;
        }
        self.port_free_at = issue;
        result.completion = completion;
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_head, HeadFields};
    use crate::fabric::VecSinks;

    fn packet(dest: RouteInfo, flits: usize, src: u8) -> Vec<Flit> {
        (0..flits)
            .map(|i| {
                let flags = (((i == 0) as u8) << 1) | (i + 1 == flits) as u8;
                if i == 0 {
                    encode_head(&HeadFields {
                        routing_info: dest.encode(),
                        packet_head_tail: flags,
                        source_id: src,
                        ..Default::default()
                    })
                    .unwrap()
                } else {
                    Flit::from_parts(((dest.encode() as u16) << 2) | flags as u16, i as u128).unwrap()
                }
            })
            .collect()
    }

    fn endpoints(n: u8) -> Vec<RouteInfo> {
        (0..n).map(|i| RouteInfo::new(i, 0, 0)).collect()
    }

    #[test]
    fn beat_counts() {
        assert_eq!(packet_beats(1), 2);
        assert_eq!(packet_beats(3), 4);
        assert_eq!(packet_beats(18), 20);
        assert_eq!((0..18).map(beats_for_flit).sum::<u64>(), 20);
    }

    #[test]
    fn sole_master_four_beats_after_grant() {
        let eps = endpoints(2);
        let mut bus = Bus::new(BusConfig::ideal(2), ClockDomain::with_period(1000), eps.clone());
        bus.record_grants(true);
        let mut sinks = VecSinks::new(2, 16);
        let mut pending: VecDeque<Flit> = packet(eps[1], 3, 0).into();
        let mut done_at = None;
        for c in 0..20u64 {
            if let Some(&f) = pending.front() {
                if bus.inject(0, f, c * 1000).is_ok() {
                    pending.pop_front();
                }
            }
            bus.step(c * 1000, &mut sinks);
            if done_at.is_none() && sinks.received[1].len() == 3 {
                done_at = Some(c);
            }
        }
        let grant = bus.grants[0].0;
        assert_eq!(packet_beats(3), 4);
        assert_eq!(done_at.unwrap() - grant, 4);
    }

    #[test]
    fn two_masters_alternate_packets() {
        let eps = endpoints(3);
        let mut bus = Bus::new(BusConfig::ideal(3), ClockDomain::with_period(1000), eps.clone());
        bus.record_grants(true);
        let mut sinks = VecSinks::new(3, usize::MAX);
        let mut queues: Vec<VecDeque<Flit>> = (0..2)
            .map(|m| (0..10).flat_map(|_| packet(eps[2], 2, m)).collect())
            .collect();
        for c in 0..400u64 {
            for (m, q) in queues.iter_mut().enumerate() {
                while let Some(&f) = q.front() {
                    if bus.inject(m, f, c * 1000).is_err() {
                        break;
                    }
                    q.pop_front();
                }
            }
            bus.step(c * 1000, &mut sinks);
        }
        let order: Vec<_> = bus.grants.iter().map(|g| g.1).collect();
        assert_eq!(order.len(), 20);
        assert!(order.windows(2).all(|w| w[0] != w[1]), "{order:?}");
    }

    #[test]
    fn burst_limit_adds_overhead_per_burst() {
        let eps = endpoints(2);
        let mut cfg = BusConfig::ideal(2);
        cfg.txn_overhead = 3;
        cfg.burst_limit[0] = Some(1);
        let mut bus = Bus::new(cfg, ClockDomain::with_period(1000), eps.clone());
        bus.record_grants(true);
        let mut sinks = VecSinks::new(2, 16);
        let mut pending: VecDeque<Flit> = packet(eps[1], 3, 0).into();
        let mut done = None;
        for c in 0..100u64 {
            if let Some(&f) = pending.front() {
                if bus.inject(0, f, c * 1000).is_ok() {
                    pending.pop_front();
                }
            }
            bus.step(c * 1000, &mut sinks);
            if done.is_none() && sinks.received[1].len() == 3 {
                done = Some(c - bus.grants[0].0);
            }
        }
        // Four single-beat bursts, each preceded by three overhead cycles.
        assert_eq!(done, Some(4 * (3 + 1)));
    }

    #[test]
    fn repeated_read_hits_after_first() {
        let mut c = SharedCache::new(CacheConfig::default(), ClockDomain::with_period(3333));
        let mut buf = [0u8; 16];
        let first = c.access(0, 0, CacheOp::Read, 0x100, &mut buf);
        assert_eq!(first.misses, 1);
        for k in 1..10u64 {
            let r = c.access(k * 1_000_000, 0, CacheOp::Read, 0x100, &mut buf);
            assert_eq!((r.hits, r.misses), (1, 0));
            assert_eq!(r.completion - r.start, 3 * 3333);
        }
    }

    #[test]
    fn three_lines_in_two_way_set_thrash() {
        let cfg = CacheConfig::default();
        let stride = (cfg.size_bytes / cfg.ways) as u64;
        let mut c = SharedCache::new(cfg, ClockDomain::with_period(1000));
        let mut buf = [0u8; 4];
        for round in 0..5u64 {
            for k in 0..3u64 {
                let r = c.access(round * 100_000 + k * 10_000, 0, CacheOp::Read, k * stride, &mut buf);
                assert_eq!(r.misses, 1, "round {round} line {k}");
            }
        }
    }

    #[test]
    fn simultaneous_requests_serialize() {
        let mut c = SharedCache::new(CacheConfig::default(), ClockDomain::with_period(1000));
        let mut buf = [0u8; 16];
        for a in 0..8u64 {
            c.access(0, 0, CacheOp::Write, a * 64, &mut buf);
        }
        let mut completions: Vec<Ps> = (0..8u64)
            .map(|a| c.access(1_000_000, a as usize, CacheOp::Read, a * 64, &mut buf).completion)
            .collect();
        let sorted = completions.clone();
        completions.dedup();
        assert_eq!(completions.len(), 8);
        assert!(sorted.windows(2).all(|w| w[1] >= w[0] + 1000));
    }

    #[test]
    fn reads_return_last_write_across_evictions() {
        let cfg = CacheConfig { size_bytes: 512, ..Default::default() };
        let mut c = SharedCache::new(cfg, ClockDomain::with_period(1000));
        let mut oracle = vec![0u8; 8192];
        let mut x: u64 = 12345;
        for i in 0..2000u64 {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let addr = (x >> 33) % 8000;
            let len = ((x >> 20) % 100) as usize;
            let len = len.min(8192 - addr as usize);
            if x & 1 == 0 {
                let mut data: Vec<u8> = (0..len).map(|k| (k as u64 ^ i) as u8).collect();
                c.access(i * 1000, 0, CacheOp::Write, addr, &mut data);
                oracle[addr as usize..addr as usize + len].copy_from_slice(&data);
            } else {
                let mut got = vec![0u8; len];
                c.access(i * 1000, 0, CacheOp::Read, addr, &mut got);
                assert_eq!(got, &oracle[addr as usize..addr as usize + len]);
            }
        }
    }
}
