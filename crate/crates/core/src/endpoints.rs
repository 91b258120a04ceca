// SPDX-License-Identifier: Apache-2.0

//! Traffic sources and the memory node: processors issue requests, send
//! payloads on grant and consume results; the MMU serves memory-mode tasks
//! by DMA and stores their results.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::channel::{synthetic_result, ChainGroup, HwaSpec};
use crate::codec::{
    decode_head_unchecked, reassemble_flits, segment, Direction, Flit, HeadFields, Packet, PacketKind,
    RouteInfo, MAX_DATA_BYTES, PACKET_TYPE_PAYLOAD,
};
use crate::kernel::{ClockDomain, Ps, PS_PER_US};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arrival {
    /// Evenly spaced requests.
    Fixed { rate_per_us: f64 },
    Poisson { rate_per_us: f64 },
    /// `count` jobs all ready at the start time.
    Burst { count: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Fixed(u8),
    Uniform(Vec<u8>),
    /// Runs `stages` in order; the first `depth + 1` are chained inside the
    /// FPGA, the rest invoked one by one from the processor.
    Chain { stages: Vec<u8>, depth: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub source: u8,
    pub arrival: Arrival,
    pub targets: Targets,
    pub scenario: Direction,
    /// Input bytes per task; `None` uses the first stage's configured input size.
    pub payload_bytes: Option<usize>,
    pub max_packet_bytes: usize,
    pub priority: u8,
    pub start_ps: Ps,
    pub max_jobs: Option<u64>,
}

impl WorkloadSpec {
    pub fn new(source: u8, arrival: Arrival, targets: Targets) -> Self {
        WorkloadSpec {
            source,
            arrival,
            targets,
            scenario: Direction::Direct,
            payload_bytes: None,
            max_packet_bytes: MAX_DATA_BYTES,
            priority: 0,
            start_ps: 0,
            max_jobs: None,
        }
    }

    pub fn rate_per_us(&self) -> f64 {
        match self.arrival {
            Arrival::Fixed { rate_per_us } | Arrival::Poisson { rate_per_us } => rate_per_us,
            Arrival::Burst { .. } => 0.0,
        }
    }
}

/// Generates arrival times for one processor.
#[derive(Debug, Clone)]
pub struct ArrivalProcess {
    arrival: Arrival,
    next: Option<Ps>,
    issued: u64,
    limit: Option<u64>,
}

impl ArrivalProcess {
    pub fn new(arrival: Arrival, start: Ps, limit: Option<u64>, rng: &mut ChaCha8Rng) -> Self {
        let mut p = ArrivalProcess { arrival, next: None, issued: 0, limit };
        p.next = match arrival {
            Arrival::Fixed { rate_per_us } if rate_per_us > 0.0 => Some(start + Self::fixed_gap(rate_per_us)),
            Arrival::Poisson { rate_per_us } if rate_per_us > 0.0 => Some(start + Self::exp_gap(rate_per_us, rng)),
            Arrival::Burst { count } if count > 0 => Some(start),
            _ => None,
        };
        p
    }

    fn fixed_gap(rate: f64) -> Ps {
        ((PS_PER_US as f64 / rate).round() as Ps).max(1)
    }

    fn exp_gap(rate: f64, rng: &mut ChaCha8Rng) -> Ps {
        let e = Exp::new(rate).expect("positive rate");
        ((e.sample(rng) * PS_PER_US as f64).round() as Ps).max(1)
    }

    pub fn peek(&self) -> Option<Ps> {
        self.next
    }

    /// Consumes the pending arrival if it is due at `now`.
    pub fn take_due(&mut self, now: Ps, rng: &mut ChaCha8Rng) -> bool {
        let Some(t) = self.next.filter(|&t| t <= now) else { return false };
        self.issued += 1;
        let exhausted = self.limit.is_some_and(|l| self.issued >= l);
        self.next = match self.arrival {
            _ if exhausted => None,
            Arrival::Fixed { rate_per_us } => Some(t + Self::fixed_gap(rate_per_us)),
            Arrival::Poisson { rate_per_us } => Some(t + Self::exp_gap(rate_per_us, rng)),
            Arrival::Burst { count } => (self.issued < count).then_some(t),
        };
        true
    }
}

/// Static knowledge of the accelerators a processor can call.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    pub hwas: Vec<HwaSpec>,
    pub groups: Vec<ChainGroup>,
}

impl Catalog {
    pub fn hwa(&self, id: u8) -> Option<&HwaSpec> {
        self.hwas.iter().find(|h| h.hwa_id == id)
    }

    /// Result of running `input` through `hops` in order.
    pub fn expected(&self, hops: &[u8], input: &[u8]) -> Vec<u8> {
        hops.iter().fold(input.to_vec(), |data, &h| {
            let s = self.hwa(h).expect("known hwa");
            synthetic_result(s.function, &data, s.output_bytes())
        })
    }
}

/// Processor-side view of one FPGA invocation (one request).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskRecord {
    pub source: u8,
    pub tag: u32,
    pub job: u64,
    pub segment: usize,
    pub hops: Vec<u8>,
    pub issue: Ps,
    pub grant_rx: Ps,
    pub notify_rx: Ps,
    pub result_rx: Ps,
    pub complete: Ps,
    pub input_bytes: usize,
    pub output_bytes: usize,
    pub data_ok: bool,
}

/// One finished job (all of its segments).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobRecord {
    pub source: u8,
    pub job: u64,
    pub issue: Ps,
    pub complete: Ps,
    pub segments: usize,
}

#[derive(Debug, Clone)]
struct Outstanding {
    job: u64,
    job_issue: Ps,
    segments: usize,
    segment: usize,
    hops: Vec<u8>,
    input: Vec<u8>,
    expected: Vec<u8>,
    issue: Ps,
    grant_rx: Option<Ps>,
    notify_rx: Option<Ps>,
    result_rx: Option<Ps>,
    data_ok: bool,
    address: u32,
}

#[derive(Debug, Clone)]
struct JobPlan {
    id: u64,
    issue: Ps,
    segments: Vec<Vec<u8>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProcStats {
    pub requests: u64,
    pub grants: u64,
    pub notifies: u64,
    pub results: u64,
    pub payload_flits: u64,
    pub jobs_done: u64,
    pub inject_stalls: u64,
}

/// Address region used for memory-mode inputs of processor `p`.
pub fn input_region(p: u8) -> u32 {
    0x10_0000 * (p as u32 + 1)
}

pub const REGION_SLOTS: u32 = 256;
pub const SLOT_BYTES: u32 = 1024;

#[derive(Debug)]
pub struct Processor {
    pub id: u8,
    pub route: RouteInfo,
    pub clock: ClockDomain,
    pub spec: WorkloadSpec,
    fpga: RouteInfo,
    result_offset: u32,
    fetch_ps: Ps,
    rng: ChaCha8Rng,
    arrivals: ArrivalProcess,
    catalog: Catalog,
    next_tag: u32,
    next_job: u64,
    outstanding: BTreeMap<u32, Outstanding>,
    waiting_jobs: BTreeMap<u64, (JobPlan, usize)>,
    /// Next segments waiting for the previous result fetch to finish.
    deferred: VecDeque<(Ps, JobPlan, usize, Vec<u8>)>,
    /// Software send queue; drained into the network link one flit per cycle.
    pub send_q: VecDeque<Flit>,
    pub inbox: VecDeque<(Flit, Ps)>,
    pub inbox_depth: usize,
    rx_packet: Vec<Flit>,
    /// Memory-mode inputs the MMU must hold before the request leaves.
    pub mem_writes: Vec<(u32, Vec<u8>)>,
    pub completed: Vec<TaskRecord>,
    pub jobs: Vec<JobRecord>,
    pub stats: ProcStats,
    pub error: Option<String>,
}

impl Processor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: WorkloadSpec,
        route: RouteInfo,
        clock: ClockDomain,
        fpga: RouteInfo,
        catalog: Catalog,
        result_offset: u32,
        fetch_ps: Ps,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((spec.source as u64 + 1) << 40));
        let arrivals = ArrivalProcess::new(spec.arrival, spec.start_ps, spec.max_jobs, &mut rng);
        Processor {
            id: spec.source,
            route,
            clock,
            fpga,
            result_offset,
            fetch_ps,
            rng,
            arrivals,
            catalog,
            next_tag: 0,
            next_job: 0,
            outstanding: BTreeMap::new(),
            waiting_jobs: BTreeMap::new(),
            deferred: VecDeque::new(),
            send_q: VecDeque::new(),
            inbox: VecDeque::new(),
            inbox_depth: 2,
            rx_packet: Vec::new(),
            mem_writes: Vec::new(),
            completed: Vec::new(),
            jobs: Vec::new(),
            stats: ProcStats::default(),
            error: None,
            spec,
        }
    }

    /// Tasks in flight, including follow-up segments not yet issued.
    pub fn outstanding(&self) -> usize {
        self.outstanding.len() + self.deferred.len()
    }

    /// Nothing left to do and nothing scheduled.
    pub fn idle(&self) -> bool {
        self.outstanding.is_empty()
            && self.send_q.is_empty()
            && self.arrivals.peek().is_none()
            && self.waiting_jobs.is_empty()
            && self.deferred.is_empty()
    }

    pub fn next_arrival(&self) -> Option<Ps> {
        self.arrivals.peek()
    }

    /// Earliest time this processor has something to do on its own.
    pub fn next_wakeup(&self) -> Option<Ps> {
        let deferred = self.deferred.iter().map(|d| d.0).min();
        match (self.arrivals.peek(), deferred) {
            (Some(a), Some(d)) => Some(a.min(d)),
            (a, d) => a.or(d),
        }
    }

    /// No new jobs from now on; work in progress still completes.
    pub fn stop_arrivals(&mut self) {
        self.arrivals.next = None;
    }

    fn fail(&mut self, msg: String) {
        if self.error.is_none() {
            self.error = Some(format!("processor {}: {msg}", self.id));
        }
    }

    fn plan_job(&mut self, now: Ps) -> JobPlan {
        let id = self.next_job;
        self.next_job += 1;
        let segments = match &self.spec.targets {
            Targets::Fixed(h) => vec![vec![*h]],
            Targets::Uniform(set) => vec![vec![set[self.rng.gen_range(0..set.len())]]],
            Targets::Chain { stages, depth } => {
                let k = (*depth as usize + 1).min(stages.len());
                let mut s = vec![stages[..k].to_vec()];
                s.extend(stages[k..].iter().map(|&h| vec![h]));
                s
            }
        };
        JobPlan { id, issue: now, segments }
    }

    fn issue_segment(&mut self, plan: &JobPlan, segment: usize, input: Vec<u8>, now: Ps) {
        let hops = plan.segments[segment].clone();
        let first = hops[0];
        let (depth, index) = match self.catalog.hwa(first).and_then(|h| h.chain_group) {
            Some(g) if hops.len() > 1 => match self.catalog.groups[g].encode_route(&hops) {
                Ok(x) => x,
                Err(e) => return self.fail(e.to_string()),
            },
            _ if hops.len() > 1 => return self.fail(format!("hwa {first} has no chain group")),
            _ => (0, 0),
        };
        let tag = self.next_tag;
        self.next_tag = self.next_tag.wrapping_add(1);
        let address = match self.spec.scenario {
            Direction::Memory => {
                let addr = input_region(self.id) + (tag % REGION_SLOTS) * SLOT_BYTES;
                self.mem_writes.push((addr, input.clone()));
                addr
            }
            Direction::Direct => tag,
        };
        let header = HeadFields {
            routing_info: self.fpga.encode(),
            source_id: self.id,
            hwa_id: first,
            chaining_depth: depth,
            chaining_index: index,
            packet_priority: self.spec.priority,
            packet_direction: self.spec.scenario.code(),
            start_address: address,
            data_size: input.len().min(MAX_DATA_BYTES) as u16,
            ..Default::default()
        };
        let flit = match Packet::command(PacketKind::Request, header) {
            Ok(p) => p.into_flits()[0],
            Err(e) => return self.fail(format!("request encode: {e}")),
        };
        self.send_q.push_back(flit);
        self.stats.requests += 1;
        let expected = self.catalog.expected(&hops, &input);
        self.outstanding.insert(
            address,
            Outstanding {
                job: plan.id,
                job_issue: plan.issue,
                segments: plan.segments.len(),
                segment,
                hops,
                input,
                expected,
                issue: now,
                grant_rx: None,
                notify_rx: None,
                result_rx: None,
                data_ok: true,
                address,
            },
        );
        if segment + 1 < plan.segments.len() {
            self.waiting_jobs.insert(plan.id, (plan.clone(), segment));
        }
    }

    fn job_input(&mut self, first_hwa: u8) -> Vec<u8> {
        let bytes = self
            .spec
            .payload_bytes
            .unwrap_or_else(|| self.catalog.hwa(first_hwa).map_or(0, HwaSpec::input_bytes));
        (0..bytes).map(|_| self.rng.gen()).collect()
    }

    /// Data packets for a granted task, split at `max_packet_bytes`.
    pub fn payload_packets(grant: &HeadFields, dest: RouteInfo, data: &[u8], max_packet: usize) -> Result<Vec<Flit>, String> {
        let max_packet = max_packet.clamp(1, MAX_DATA_BYTES);
        let chunks: Vec<&[u8]> = if data.is_empty() { vec![&[][..]] } else { data.chunks(max_packet).collect() };
        let mut out = Vec::new();
        for (i, chunk) in chunks.iter().enumerate() {
            let mut h = *grant;
            h.routing_info = dest.encode();
            h.packet_type = PACKET_TYPE_PAYLOAD;
            h.task_head_tail = (((i == 0) as u8) << 1) | (i + 1 == chunks.len()) as u8;
            let p = segment(chunk, &h, PacketKind::Payload).map_err(|e| e.to_string())?;
            out.extend(p.into_flits());
        }
        Ok(out)
    }

    /// One processor clock edge: consume one inbound flit, then launch due jobs.
    pub fn tick(&mut self, now: Ps) {
        if let Some(&(flit, vis)) = self.inbox.front() {
            if vis <= now {
                self.inbox.pop_front();
                self.receive(flit, now);
            }
        }
        while let Some(pos) = self.deferred.iter().position(|d| d.0 <= now) {
            let (_, plan, seg, input) = self.deferred.remove(pos).expect("found");
            self.issue_segment(&plan, seg, input, now);
        }
        while self.arrivals.take_due(now, &mut self.rng) {
            let plan = self.plan_job(now);
            let input = self.job_input(plan.segments[0][0]);
            self.issue_segment(&plan, 0, input, now);
        }
    }

    fn receive(&mut self, flit: Flit, now: Ps) {
        if !self.rx_packet.is_empty() || (flit.is_head() && !decode_head_unchecked(&flit).is_command()) {
            self.rx_packet.push(flit);
            if flit.is_tail() {
                let flits = std::mem::take(&mut self.rx_packet);
                self.on_result(&flits, now);
            }
            return;
        }
        let h = decode_head_unchecked(&flit);
        match PacketKind::from_command_head(&h) {
            Some(PacketKind::Grant) => self.on_grant(&h, now),
            Some(PacketKind::Notify) => self.on_notify(&h, now),
            other => self.fail(format!("unexpected command {other:?}")),
        }
    }

    fn on_grant(&mut self, g: &HeadFields, now: Ps) {
        let Some(o) = self.outstanding.get_mut(&g.start_address) else {
            return self.fail(format!("grant for unknown task {:#x}", g.start_address));
        };
        if o.grant_rx.is_some() {
            return self.fail(format!("duplicate grant for task {:#x}", g.start_address));
        }
        o.grant_rx = Some(now);
        self.stats.grants += 1;
        if g.direction() == Some(Direction::Memory) {
            return self.fail("memory-mode grant delivered to a processor".into());
        }
        let input = o.input.clone();
        match Self::payload_packets(g, self.fpga, &input, self.spec.max_packet_bytes) {
            Ok(flits) => {
                self.stats.payload_flits += flits.len() as u64;
                self.send_q.extend(flits);
            }
            Err(e) => self.fail(e),
        }
    }

    fn key_for_address(&self, addr: u32) -> u32 {
        match self.spec.scenario {
            Direction::Memory => addr.wrapping_sub(self.result_offset),
            Direction::Direct => addr,
        }
    }

    fn on_notify(&mut self, h: &HeadFields, now: Ps) {
        let key = self.key_for_address(h.start_address);
        let Some(o) = self.outstanding.get_mut(&key) else {
            return self.fail(format!("notify for unknown task {:#x}", h.start_address));
        };
        if o.notify_rx.is_some() {
            return self.fail(format!("duplicate notify for task {key:#x}"));
        }
        o.notify_rx = Some(now);
        self.stats.notifies += 1;
        self.try_complete(key, now);
    }

    fn on_result(&mut self, flits: &[Flit], now: Ps) {
        let h = decode_head_unchecked(&flits[0]);
        let data = match reassemble_flits(flits) {
            Ok(d) => d,
            Err(e) => return self.fail(format!("bad result packet: {e}")),
        };
        let Some(o) = self.outstanding.get_mut(&h.start_address) else {
            return self.fail(format!("result for unknown task {:#x}", h.start_address));
        };
        o.result_rx = Some(now);
        o.data_ok &= data == o.expected;
        self.stats.results += 1;
        self.try_complete(h.start_address, now);
    }

    /// The MMU stored a memory-mode result; `ok` tells whether it matched.
    pub fn on_memory_result(&mut self, input_addr: u32, ok: bool, now: Ps) {
        let Some(o) = self.outstanding.get_mut(&input_addr) else {
            return self.fail(format!("memory result for unknown task {input_addr:#x}"));
        };
        o.result_rx = Some(now);
        o.data_ok &= ok;
        self.try_complete(input_addr, now);
    }

    pub fn expected_for(&self, input_addr: u32) -> Option<&[u8]> {
        self.outstanding.get(&input_addr).map(|o| o.expected.as_slice())
    }

    fn try_complete(&mut self, key: u32, now: Ps) {
        let o = &self.outstanding[&key];
        let memory = self.spec.scenario == Direction::Memory;
        let (Some(notify_rx), Some(result_rx)) = (o.notify_rx, o.result_rx) else { return };
        if !memory && o.grant_rx.is_none() {
            return;
        }
        let complete = now + if memory { self.fetch_ps } else { 0 };
        let o = self.outstanding.remove(&key).expect("present");
        self.completed.push(TaskRecord {
            source: self.id,
            tag: o.address,
            job: o.job,
            segment: o.segment,
            hops: o.hops.clone(),
            issue: o.issue,
            grant_rx: o.grant_rx.unwrap_or(0),
            notify_rx,
            result_rx,
            complete,
            input_bytes: o.input.len(),
            output_bytes: o.expected.len(),
            data_ok: o.data_ok,
        });
        if o.segment + 1 < o.segments {
            if let Some((plan, _)) = self.waiting_jobs.remove(&o.job) {
                if complete > now {
                    self.deferred.push_back((complete, plan, o.segment + 1, o.expected));
                } else {
                    self.issue_segment(&plan, o.segment + 1, o.expected, now);
                }
            }
            return;
        }
        self.stats.jobs_done += 1;
        self.jobs.push(JobRecord { source: self.id, job: o.job, issue: o.job_issue, complete, segments: o.segments });
    }
}

#[derive(Debug, Clone)]
struct Dma {
    grant: HeadFields,
    queued: Ps,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MmuStats {
    pub dma_jobs: u64,
    pub payload_flits: u64,
    pub results_written: u64,
}

/// Memory node with a DMA engine.
#[derive(Debug)]
pub struct Mmu {
    pub route: RouteInfo,
    pub clock: ClockDomain,
    fpga: RouteInfo,
    pub mem: Vec<u8>,
    /// Cycles before the first beat of a DMA transfer.
    pub access_latency: u64,
    queue: VecDeque<Dma>,
    streaming: VecDeque<(Flit, Ps)>,
    busy_until: Ps,
    pub inbox: VecDeque<(Flit, Ps)>,
    pub inbox_depth: usize,
    rx_packet: Vec<Flit>,
    /// Flits ready to enter the network.
    pub send_q: VecDeque<Flit>,
    /// (source, input address, result bytes, time) for each stored result.
    pub written: Vec<(u8, u32, Vec<u8>, Ps)>,
    pub grants_seen: Vec<(Ps, HeadFields)>,
    pub stats: MmuStats,
    pub error: Option<String>,
}

impl Mmu {
    pub fn new(route: RouteInfo, clock: ClockDomain, fpga: RouteInfo, mem_bytes: usize, access_latency: u64) -> Self {
        Mmu {
            route,
            clock,
            fpga,
            mem: vec![0; mem_bytes],
            access_latency,
            queue: VecDeque::new(),
            streaming: VecDeque::new(),
            busy_until: 0,
            inbox: VecDeque::new(),
            inbox_depth: 2,
            rx_packet: Vec::new(),
            send_q: VecDeque::new(),
            written: Vec::new(),
            grants_seen: Vec::new(),
            stats: MmuStats::default(),
            error: None,
        }
    }

    fn fail(&mut self, msg: String) {
        if self.error.is_none() {
            self.error = Some(format!("mmu: {msg}"));
        }
    }

    pub fn write(&mut self, addr: u32, data: &[u8]) -> Result<(), String> {
        let a = addr as usize;
        let dst = self.mem.get_mut(a..a + data.len()).ok_or_else(|| format!("address {addr:#x}+{} out of range", data.len()))?;
        dst.copy_from_slice(data);
        Ok(())
    }

    pub fn read(&self, addr: u32, len: usize) -> Option<&[u8]> {
        self.mem.get(addr as usize..addr as usize + len)
    }

    pub fn idle(&self) -> bool {
        self.queue.is_empty() && self.streaming.is_empty() && self.send_q.is_empty() && self.rx_packet.is_empty()
    }

    /// One memory clock edge.
    pub fn tick(&mut self, now: Ps) {
        if let Some(&(flit, vis)) = self.inbox.front() {
            if vis <= now {
                self.inbox.pop_front();
                self.receive(flit, now);
            }
        }
        // Start the next DMA transfer once the previous one has streamed out.
        if self.streaming.is_empty() && now >= self.busy_until {
            if let Some(job) = self.queue.pop_front() {
                self.start_dma(job, now);
            }
        }
        if let Some(&(flit, at)) = self.streaming.front() {
            if at <= now {
                self.streaming.pop_front();
                self.send_q.push_back(flit);
            }
        }
    }

    fn start_dma(&mut self, job: Dma, now: Ps) {
        let g = job.grant;
        let size = g.data_size as usize;
        let Some(data) = self.read(g.start_address, size).map(<[u8]>::to_vec) else {
            return self.fail(format!("DMA read {:#x}+{size} out of range", g.start_address));
        };
        let flits = match Processor::payload_packets(&g, self.fpga, &data, MAX_DATA_BYTES) {
            Ok(f) => f,
            Err(e) => return self.fail(e),
        };
        let p = self.clock.period();
        let first = now + self.access_latency * p;
        for (k, f) in flits.iter().enumerate() {
            self.streaming.push_back((*f, first + k as u64 * p));
        }
        self.busy_until = first + flits.len() as u64 * p;
        self.stats.dma_jobs += 1;
        self.stats.payload_flits += flits.len() as u64;
        let _ = job.queued;
    }

    fn receive(&mut self, flit: Flit, now: Ps) {
        if !self.rx_packet.is_empty() || (flit.is_head() && !decode_head_unchecked(&flit).is_command()) {
            self.rx_packet.push(flit);
            if flit.is_tail() {
                let flits = std::mem::take(&mut self.rx_packet);
                let h = decode_head_unchecked(&flits[0]);
                match reassemble_flits(&flits) {
                    Ok(data) => {
                        if let Err(e) = self.write(h.start_address, &data) {
                            return self.fail(e);
                        }
                        self.stats.results_written += 1;
                        self.written.push((h.source_id, h.start_address, data, now));
                    }
                    Err(e) => self.fail(format!("bad result packet: {e}")),
                }
            }
            return;
        }
        let h = decode_head_unchecked(&flit);
        match PacketKind::from_command_head(&h) {
            Some(PacketKind::Grant) => {
                self.grants_seen.push((now, h));
                self.queue.push_back(Dma { grant: h, queued: now });
            }
            other => self.fail(format!("unexpected command {other:?}")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ExecModel;

    fn catalog() -> Catalog {
        Catalog { hwas: vec![HwaSpec::new(0, ExecModel::Const(1), 4, 4, 3333)], groups: vec![] }
    }

    fn proc_with(arrival: Arrival) -> Processor {
        let spec = WorkloadSpec::new(1, arrival, Targets::Fixed(0));
        Processor::new(spec, RouteInfo::new(0, 0, 0), ClockDomain::with_period(1000), RouteInfo::new(2, 2, 0), catalog(), 0, 0, 7)
    }

    #[test]
    fn zero_rate_never_issues() {
        let mut p = proc_with(Arrival::Fixed { rate_per_us: 0.0 });
        for c in 0..10_000 {
            p.tick(c * 1000);
        }
        assert_eq!(p.stats.requests, 0);
        assert!(p.idle());
    }

    #[test]
    fn fixed_rate_spacing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ArrivalProcess::new(Arrival::Fixed { rate_per_us: 0.2 }, 0, None, &mut rng);
        let t0 = a.peek().unwrap();
        assert!(a.take_due(t0, &mut rng));
        // 0.2 per microsecond at 1 GHz: one request every 5000 cycles.
        assert_eq!(a.peek().unwrap() - t0, 5000 * 1000);
    }

    #[test]
    fn poisson_mean_rate_within_two_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rate = 3.0;
        let mut a = ArrivalProcess::new(Arrival::Poisson { rate_per_us: rate }, 0, None, &mut rng);
        let n = 200_000;
        let mut last = 0;
        for _ in 0..n {
            last = a.peek().unwrap();
            assert!(a.take_due(last, &mut rng));
        }
        let measured = n as f64 / (last as f64 / PS_PER_US as f64);
        assert!((measured - rate).abs() / rate < 0.02, "measured {measured}");
    }

    #[test]
    fn burst_releases_all_at_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ArrivalProcess::new(Arrival::Burst { count: 3 }, 500, None, &mut rng);
        let mut n = 0;
        while a.take_due(500, &mut rng) {
            n += 1;
        }
        assert_eq!(n, 3);
        assert!(a.peek().is_none());
    }

    #[test]
    fn payload_of_48_bytes_is_head_plus_three() {
        let g = HeadFields { task_buffer_id: 2, source_id: 1, hwa_id: 0, start_address: 5, ..Default::default() };
        let data: Vec<u8> = (0..48).collect();
        let flits = Processor::payload_packets(&g, RouteInfo::new(2, 2, 0), &data, MAX_DATA_BYTES).unwrap();
        assert_eq!(flits.len(), 4);
        let h = decode_head_unchecked(&flits[0]);
        assert_eq!(h.task_buffer_id, 2);
        assert_eq!(h.task_head_tail, 0b11);
        assert_eq!(h.routing_info, RouteInfo::new(2, 2, 0).encode());
        assert_eq!(reassemble_flits(&flits).unwrap(), data);
    }

    #[test]
    fn multi_packet_task_flags() {
        let g = HeadFields::default();
        let data = vec![9u8; 100];
        let flits = Processor::payload_packets(&g, RouteInfo::new(2, 2, 0), &data, 40).unwrap();
        let heads: Vec<u8> = flits.iter().filter(|f| f.is_head()).map(|f| decode_head_unchecked(f).task_head_tail).collect();
        assert_eq!(heads, vec![0b10, 0b00, 0b01]);
    }

    #[test]
    fn grant_without_request_is_violation() {
        let mut p = proc_with(Arrival::Fixed { rate_per_us: 0.0 });
        let g = Packet::command(PacketKind::Grant, HeadFields { start_address: 77, ..Default::default() }).unwrap();
        p.inbox.push_back((g.flits()[0], 0));
        p.tick(0);
        assert!(p.error.as_deref().unwrap().contains("unknown task"));
    }

    #[test]
    fn grant_triggers_payload_for_matching_task() {
        let mut p = proc_with(Arrival::Burst { count: 2 });
        p.tick(0);
        assert_eq!(p.send_q.len(), 2);
        let reqs: Vec<HeadFields> = p.send_q.drain(..).map(|f| decode_head_unchecked(&f)).collect();
        let mut g = reqs[1];
        g.task_buffer_id = 1;
        let g = Packet::command(PacketKind::Grant, g).unwrap();
        p.inbox.push_back((g.flits()[0], 0));
        p.tick(1000);
        assert_eq!(p.send_q.len(), 4);
        let h = decode_head_unchecked(&p.send_q[0]);
        assert_eq!((h.start_address, h.task_buffer_id), (reqs[1].start_address, 1));
    }

    fn mmu() -> Mmu {
        Mmu::new(RouteInfo::new(1, 1, 1), ClockDomain::with_period(1000), RouteInfo::new(2, 2, 0), 1 << 20, 30)
    }

    fn grant_at(addr: u32, size: u16) -> Flit {
        let h = HeadFields { start_address: addr, data_size: size, packet_direction: 1, ..Default::default() };
        Packet::command(PacketKind::Grant, h).unwrap().flits()[0]
    }

    #[test]
    fn mmu_dma_reads_memory_image() {
        let mut m = mmu();
        let image: Vec<u8> = (0..64u32).map(|i| (i * 7) as u8).collect();
        m.write(0x1000, &image).unwrap();
        m.inbox.push_back((grant_at(0x1000, 64), 0));
        for c in 0..100 {
            m.tick(c * 1000);
        }
        assert_eq!(m.send_q.len(), 5);
        let flits: Vec<Flit> = m.send_q.iter().copied().collect();
        assert_eq!(reassemble_flits(&flits).unwrap(), image);
    }

    #[test]
    fn mmu_dma_pacing_and_empty_transfer() {
        let mut m = mmu();
        m.inbox.push_back((grant_at(0x2000, 0), 0));
        let mut first = None;
        for c in 0..100u64 {
            m.tick(c * 1000);
            if first.is_none() && !m.send_q.is_empty() {
                first = Some(c);
            }
        }
        assert_eq!(m.send_q.len(), 1);
        // Received at cycle 0, DMA starts at 0, first beat after 30 cycles.
        assert_eq!(first, Some(30));
    }

    #[test]
    fn mmu_serves_jobs_in_order() {
        let mut m = mmu();
        m.write(0x100, &[1; 32]).unwrap();
        m.write(0x200, &[2; 32]).unwrap();
        m.inbox.push_back((grant_at(0x100, 32), 0));
        m.inbox.push_back((grant_at(0x200, 32), 0));
        for c in 0..300 {
            m.tick(c * 1000);
        }
        let f: Vec<Flit> = m.send_q.iter().copied().collect();
        assert_eq!(reassemble_flits(&f[..3]).unwrap(), vec![1; 32]);
        assert_eq!(reassemble_flits(&f[3..]).unwrap(), vec![2; 32]);
    }
}
