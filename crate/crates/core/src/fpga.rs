// SPDX-License-Identifier: Apache-2.0

//! The FPGA block: packet receivers, per-channel grant control, accelerator
//! datapaths with chaining, and the packet sender. Two clock families are
//! involved: the interface clock and one clock per accelerator.

use std::collections::VecDeque;
use std::fmt;

use crate::baselines::{CacheConfig, CacheOp, SharedCache};
use crate::channel::{
    chain_front, chain_shift, synthetic_result, Channel, ChannelParams, ChainEntry, ChainGroup, CmdKind,
    HopTimes, HwaSpec, Job, JobSource, QueuedCommand, QueuedRequest, ResultPacket, Stage, Task, TaskTimes,
    TbState,
};
use crate::codec::{
    decode_head_unchecked, segment, Direction, Flit, HeadFields, Packet, PacketKind, RouteInfo,
    BODY_PAYLOAD_BYTES,
};
use crate::interface::{OutClass, PrStrategy, PsArbiter, PsStrategy};
use crate::kernel::{AsyncFifo, ClockDomain, Ps};

#[derive(Debug, Clone, PartialEq)]
pub enum Buffering {
    Distributed,
    SharedCache(CacheConfig),
}

#[derive(Debug, Clone)]
pub struct FpgaConfig {
    pub iface: ClockDomain,
    /// Clock of the router side of the receive and transmit FIFOs.
    pub noc: ClockDomain,
    pub pr: PrStrategy,
    pub ps: PsStrategy,
    pub channel: ChannelParams,
    pub rx_depth: usize,
    pub tx_depth: usize,
    pub hwas: Vec<HwaSpec>,
    pub groups: Vec<ChainGroup>,
    /// Route to each processor, indexed by source id.
    pub proc_routes: Vec<RouteInfo>,
    pub mmu_route: RouteInfo,
    /// Results of memory-mode tasks are written at input address + this offset.
    pub result_offset: u32,
    pub buffering: Buffering,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FpgaEvent {
    Request { ch: usize },
    Grant { ch: usize, tb: usize, bypass: bool },
    TaskReady { ch: usize, tb: usize },
    Select { ch: usize, chained: bool },
    PgDone { ch: usize, chained: bool },
    Notify { ch: usize },
    Tx { result: bool },
    Free { ch: usize, tb: usize },
    Busy(bool),
    Drop { hwa: u8 },
}

impl fmt::Display for FpgaEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FpgaEvent::Request { ch } => write!(f, "req ch={ch}"),
            FpgaEvent::Grant { ch, tb, bypass } => write!(f, "grant ch={ch} tb={tb} bypass={}", *bypass as u8),
            FpgaEvent::TaskReady { ch, tb } => write!(f, "ready ch={ch} tb={tb}"),
            FpgaEvent::Select { ch, chained } => write!(f, "select ch={ch} chained={}", *chained as u8),
            FpgaEvent::PgDone { ch, chained } => write!(f, "pg ch={ch} chained={}", *chained as u8),
            FpgaEvent::Notify { ch } => write!(f, "notify ch={ch}"),
            FpgaEvent::Tx { result } => write!(f, "tx {}", if *result { "res" } else { "cmd" }),
            FpgaEvent::Free { ch, tb } => write!(f, "free ch={ch} tb={tb}"),
            FpgaEvent::Busy(b) => write!(f, "busy {}", *b as u8),
            FpgaEvent::Drop { hwa } => write!(f, "drop hwa={hwa}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FpgaStats {
    pub rx_flits: u64,
    pub payload_flits_in: u64,
    pub tx_cmd_flits: u64,
    pub tx_result_flits: u64,
    pub unknown_hwa_drops: u64,
    pub pr_stall_cycles: u64,
    pub ps_stall_cycles: u64,
}

#[derive(Debug, Clone)]
enum PrMode {
    Idle,
    Receiving { pr: usize, ch: usize, tb: usize, head: HeadFields, data: Vec<u8>, flits: usize, head_time: Ps },
    Discarding,
}

#[derive(Debug, Clone)]
enum PsState {
    Idle,
    Result { flits: Vec<Flit>, next: usize, push_from: Ps, task: Box<Task>, slot: Option<(usize, usize)> },
}

/// Result waiting in the shared cache for the packet sender.
#[derive(Debug, Clone)]
struct CachedResult {
    packet: ResultPacket,
    visible_at: Ps,
    slot: Option<(usize, usize)>,
    addr: u64,
}

pub struct Fpga {
    cfg: FpgaConfig,
    pub channels: Vec<Channel>,
    by_hwa: [Option<usize>; 32],
    pub rx: AsyncFifo<Flit>,
    pub tx: AsyncFifo<Flit>,
    pr_mode: PrMode,
    pr_busy_until: Vec<Ps>,
    ps: PsState,
    arb: PsArbiter,
    cache: Option<SharedCache>,
    cache_out: Vec<VecDeque<CachedResult>>,
    slot_bytes: u64,
    next_task: u64,
    busy: bool,
    /// Tasks whose last result flit has left the sender.
    pub finished: Vec<Task>,
    pub events: Vec<(Ps, FpgaEvent)>,
    pub stats: FpgaStats,
    /// First fatal protocol or configuration violation seen.
    pub error: Option<String>,
}

impl fmt::Debug for Fpga {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

impl Fpga {
    pub fn new(cfg: FpgaConfig) -> Self {
        let n = cfg.hwas.len();
        let mut by_hwa = [None; 32];
        for (i, h) in cfg.hwas.iter().enumerate() {
            by_hwa[h.hwa_id as usize & 31] = Some(i);
        }
        let channels = cfg.hwas.iter().map(|h| Channel::new(h.clone(), &cfg.channel, cfg.iface, n)).collect();
        // Contiguous, line-aligned regions sized for the largest task.
        let largest = cfg.hwas.iter().map(|h| h.input_bytes().max(h.output_bytes())).max().unwrap_or(0);
        let slot_bytes = (largest.max(1) as u64).div_ceil(64) * 64;
        let cache = match &cfg.buffering {
            Buffering::Distributed => None,
            Buffering::SharedCache(c) => Some(SharedCache::new(c.clone(), cfg.iface)),
        };
        Fpga {
            rx: AsyncFifo::new(cfg.rx_depth, cfg.noc, cfg.iface),
            tx: AsyncFifo::new(cfg.tx_depth, cfg.iface, cfg.noc),
            pr_mode: PrMode::Idle,
            pr_busy_until: vec![0; cfg.pr.num_prs(n)],
            ps: PsState::Idle,
            arb: PsArbiter::new(cfg.ps, n),
            cache,
            cache_out: vec![VecDeque::new(); n],
            channels,
            by_hwa,
            slot_bytes,
            next_task: 0,
            busy: false,
            finished: Vec::new(),
            events: Vec::new(),
            stats: FpgaStats::default(),
            error: None,
            cfg,
        }
    }

    pub fn config(&self) -> &FpgaConfig {
        &self.cfg
    }

    pub fn iface(&self) -> ClockDomain {
        self.cfg.iface
    }

    pub fn channel_of(&self, hwa: u8) -> Option<usize> {
        self.by_hwa.get(hwa as usize).copied().flatten()
    }

    pub fn cache(&self) -> Option<&SharedCache> {
        self.cache.as_ref()
    }

    pub fn is_busy(&self) -> bool {
        self.busy
    }

    /// No flit, request, command or task anywhere in the interface.
    pub fn quiescent(&self) -> bool {
        self.rx.is_empty()
            && self.tx.is_empty()
            && matches!(self.pr_mode, PrMode::Idle)
            && matches!(self.ps, PsState::Idle)
            && self.cache_out.iter().all(VecDeque::is_empty)
            && self
                .channels
                .iter()
                .all(|c| c.rb.is_empty() && c.cmdq.is_empty() && c.pob.is_empty() && !c.holds_task())
    }

    fn fail(&mut self, msg: String) {
        if self.error.is_none() {
            self.error = Some(msg);
        }
    }

    fn cycle(&self) -> Ps {
        self.cfg.iface.period()
    }

    fn slots_per_channel(&self) -> u64 {
        2 * self.cfg.channel.num_tb as u64
    }

    fn region(&self, ch: usize, slot: u64) -> u64 {
        (ch as u64 * self.slots_per_channel() + slot) * self.slot_bytes
    }

    fn slot_addr(&self, ch: usize, tb: usize, output: bool) -> u64 {
        self.region(ch, 2 * tb as u64 + output as u64)
    }

    /// Cache slot for a hop's output. A task keeps its task buffer until the
    /// sender is done, so its input slot (already read by the first hop)
    /// carries chain entries and its output slot carries the final result.
    fn task_out_addr(&self, hwa: u8, tb: usize, chained: bool) -> u64 {
        let origin = self.channel_of(hwa).expect("granted hwa");
        self.slot_addr(origin, tb, !chained)
    }

    fn cache_access(&mut self, now: Ps, who: usize, op: CacheOp, addr: u64, data: &mut [u8]) -> Ps {
        self.cache.as_mut().expect("cache mode").access(now, who, op, addr, data).completion
    }

    /// One interface clock edge.
    pub fn iface_tick(&mut self, now: Ps) {
        self.ps_step(now);
        for ch in 0..self.channels.len() {
            self.lgc_step(ch, now);
        }
        self.pr_step(now);
        self.update_busy(now);
    }

    /// One edge of accelerator `ch`'s clock.
    pub fn hwa_tick(&mut self, ch: usize, now: Ps) {
        self.advance_job(ch, now);
        if self.channels[ch].job.is_none() {
            self.select_job(ch, now);
        }
        self.update_busy(now);
    }

    fn update_busy(&mut self, now: Ps) {
        let busy = self.channels.iter().any(Channel::holds_task) || self.cache_out.iter().any(|q| !q.is_empty());
        if busy != self.busy {
            self.busy = busy;
            self.events.push((now, FpgaEvent::Busy(busy)));
        }
    }

    fn grant_route(&self, req: &HeadFields) -> RouteInfo {
        match req.direction() {
            Some(Direction::Memory) => self.cfg.mmu_route,
            _ => self.cfg.proc_routes.get(req.source_id as usize).copied().unwrap_or(self.cfg.mmu_route),
        }
    }

    fn proc_route(&self, source: u8) -> RouteInfo {
        self.cfg.proc_routes.get(source as usize).copied().unwrap_or(self.cfg.mmu_route)
    }

    fn grant(&mut self, ch: usize, tb: usize, mut times: TaskTimes, req: HeadFields, now: Ps, bypass: bool) {
        let route = self.grant_route(&req);
        let mut h = req;
        h.routing_info = route.encode();
        h.task_buffer_id = tb as u8;
        let flit = match Packet::command(PacketKind::Grant, h) {
            Ok(p) => p.into_flits()[0],
            Err(e) => return self.fail(format!("grant encode: {e}")),
        };
        times.granted = now;
        times.tb = tb as u8;
        let id = self.next_task;
        self.next_task += 1;
        let p = self.cycle();
        let c = &mut self.channels[ch];
        debug_assert_eq!(c.tbs[tb].state, TbState::Free);
        c.tbs[tb].state = TbState::Granted;
        c.tbs[tb].task = Some(Task { id, request: req, data: Vec::new(), flits: 0, times });
        c.cmdq.push_back(QueuedCommand {
            flit,
            kind: CmdKind::Grant,
            visible_at: now + p,
            key: (req.source_id, req.start_address),
        });
        c.lgc_last_grant = Some(now);
        c.stats.grants += 1;
        c.stats.bypass_grants += bypass as u64;
        c.stats.max_outstanding_grants = c.stats.max_outstanding_grants.max(c.outstanding_grants() as u64);
        self.events.push((now, FpgaEvent::Grant { ch, tb, bypass }));
    }

    /// Local grant controller: at most one grant per cycle, oldest request first.
    fn lgc_step(&mut self, ch: usize, now: Ps) {
        let c = &self.channels[ch];
        let Some(front) = c.rb.front() else { return };
        if front.visible_at > now || !c.lgb_has_space() {
            return;
        }
        let Some(tb) = c.free_tb(now) else { return };
        let q = self.channels[ch].rb.pop_front().expect("front exists");
        self.grant(ch, tb, q.times, q.header, now, false);
    }

    fn pr_step(&mut self, now: Ps) {
        let Some(&flit) = self.rx.peek(now) else { return };
        match std::mem::replace(&mut self.pr_mode, PrMode::Idle) {
            PrMode::Receiving { pr, ch, tb, head, mut data, flits, head_time } => {
                if flit.is_head() {
                    self.fail(format!("head flit inside a packet for hwa {}", head.hwa_id));
                    return;
                }
                self.rx.pop(now).expect("visible");
                self.stats.rx_flits += 1;
                data.extend_from_slice(&flit.lo().to_le_bytes());
                if flit.is_tail() {
                    self.finish_payload(pr, ch, tb, head, data, flits + 1, head_time, now);
                } else {
                    self.pr_mode = PrMode::Receiving { pr, ch, tb, head, data, flits: flits + 1, head_time };
                }
            }
            PrMode::Discarding => {
                self.rx.pop(now).expect("visible");
                self.stats.rx_flits += 1;
                if !flit.is_tail() {
                    self.pr_mode = PrMode::Discarding;
                }
            }
            PrMode::Idle => self.pr_head(flit, now),
        }
    }

    fn pr_head(&mut self, flit: Flit, now: Ps) {
        if !flit.is_head() {
            self.rx.pop(now).expect("visible");
            self.stats.rx_flits += 1;
            self.fail("body flit with no packet in progress".into());
            return;
        }
        let h = decode_head_unchecked(&flit);
        let Some(ch) = self.channel_of(h.hwa_id) else {
            self.rx.pop(now).expect("visible");
            self.stats.rx_flits += 1;
            self.stats.unknown_hwa_drops += 1;
            self.events.push((now, FpgaEvent::Drop { hwa: h.hwa_id }));
            if !flit.is_tail() {
                self.pr_mode = PrMode::Discarding;
            }
            return;
        };
        let pr = self.cfg.pr.owner(ch);
        if self.pr_busy_until[pr] > now {
            self.stats.pr_stall_cycles += 1;
            return;
        }
        let p = self.cycle();
        if h.is_command() {
            if PacketKind::from_command_head(&h) != Some(PacketKind::Request) {
                self.rx.pop(now).expect("visible");
                self.stats.rx_flits += 1;
                self.fail(format!("unexpected command {:?} at FPGA", h.task_head_tail));
                return;
            }
            let c = &self.channels[ch];
            let times = TaskTimes { request_rx: now, request_visible: now + p, ..Default::default() };
            let bypass_tb = if c.rb.is_empty() && c.lgc_last_grant != Some(now) && c.lgb_has_space() {
                c.free_tb(now)
            } else {
                None
            };
            if bypass_tb.is_none() && c.rb.len() >= c.rb_depth {
                self.stats.pr_stall_cycles += 1;
                return;
            }
            self.rx.pop(now).expect("visible");
            self.stats.rx_flits += 1;
            self.pr_busy_until[pr] = now + p;
            self.channels[ch].stats.requests += 1;
            self.events.push((now, FpgaEvent::Request { ch }));
            match bypass_tb {
                Some(tb) => {
                    let times = TaskTimes { request_visible: now, ..times };
                    self.grant(ch, tb, times, h, now, true);
                }
                None => self.channels[ch].rb.push_back(QueuedRequest { header: h, visible_at: now + p, times }),
            }
            return;
        }
        let tb = h.task_buffer_id as usize;
        let ok = self.channels[ch].tbs.get(tb).is_some_and(|t| {
            matches!(t.state, TbState::Granted | TbState::Filling)
                && t.task.as_ref().is_some_and(|k| (k.request.source_id, k.request.start_address) == (h.source_id, h.start_address))
        });
        if !ok {
            self.rx.pop(now).expect("visible");
            self.stats.rx_flits += 1;
            self.fail(format!("payload for ungranted TB {tb} of hwa {}", h.hwa_id));
            if !flit.is_tail() {
                self.pr_mode = PrMode::Discarding;
            }
            return;
        }
        self.rx.pop(now).expect("visible");
        self.stats.rx_flits += 1;
        if flit.is_tail() {
            self.finish_payload(pr, ch, tb, h, Vec::new(), 1, now, now);
        } else {
            self.pr_mode = PrMode::Receiving { pr, ch, tb, head: h, data: Vec::new(), flits: 1, head_time: now };
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_payload(&mut self, pr: usize, ch: usize, tb: usize, head: HeadFields, mut data: Vec<u8>, flits: usize, head_time: Ps, tail_time: Ps) {
        data.truncate(head.data_size as usize);
        self.stats.payload_flits_in += flits as u64;
        let p = self.cycle();
        let commit = tail_time + 3 * p;
        let task_tail = head.task_flags().tail;
        let ready_iface = if self.cache.is_some() {
            let offset = self.channels[ch].tbs[tb].task.as_ref().map_or(0, |t| t.data.len()) as u64;
            let addr = self.slot_addr(ch, tb, false) + offset;
            let done = self.cache_access(commit, ch, CacheOp::Write, addr, &mut data);
            commit.max(self.cfg.iface.edge_at_or_after(done))
        } else {
            commit
        };
        self.pr_busy_until[pr] = ready_iface;
        let hwa_clock = self.channels[ch].clock();
        let c = &mut self.channels[ch];
        c.stats.tb_flits_in += flits as u64;
        let buf = &mut c.tbs[tb];
        let task = buf.task.as_mut().expect("granted TB holds a task");
        if task.flits == 0 {
            task.times.payload_head = head_time;
        }
        task.data.extend_from_slice(&data);
        task.flits += flits;
        if task_tail {
            task.times.tb_ready = ready_iface;
            buf.state = TbState::Ready;
            buf.ready_at = hwa_clock.edge_at_or_after(ready_iface);
            self.events.push((tail_time, FpgaEvent::TaskReady { ch, tb }));
        } else {
            buf.state = TbState::Filling;
        }
    }

    fn select_job(&mut self, ch: usize, now: Ps) {
        let clock = self.channels[ch].clock();
        let p = clock.period();
        let me = self.channels[ch].spec.hwa_id;
        let cache_mode = self.cache.is_some();

        // Chaining controller: chain-buffer entries take precedence over task buffers.
        let group = self.channels[ch].spec.chain_group;
        let mut from_chain = None;
        if let Some(g) = group {
            let matches = |k: usize| {
                let Some(e) = self.channels[k].cb.front() else { return false };
                let wait = if cache_mode { 2 } else { 4 + e.flits as u64 };
                e.group == g
                    && clock.nth_edge_after(e.written_at, wait) <= now
                    && self.cfg.groups[g].members.get(e.next_index as usize) == Some(&me)
            };
            let rr = self.channels[ch].cc_rr.clone();
            if let Some(k) = rr.peek(matches) {
                self.channels[ch].cc_rr.grant(k);
                from_chain = Some(k);
            }
        }
        let mut chain_addr = 0;
        let (source, header, input, input_flits, task) = if let Some(k) = from_chain {
            let e: ChainEntry = self.channels[k].cb.pop_front().expect("matched entry");
            chain_addr = e.addr;
            (JobSource::Chain, e.header, e.data, e.flits, e.task)
        } else if let Some(tb) = self.channels[ch].ta_select(now) {
            let buf = &mut self.channels[ch].tbs[tb];
            buf.state = TbState::Running;
            let mut task = buf.task.take().expect("ready TB holds a task");
            let data = std::mem::take(&mut task.data);
            let flits = task.flits;
            self.channels[ch].stats.tasks_started += 1;
            (JobSource::TaskBuffer(tb), task.request, data, flits, task)
        } else {
            return;
        };

        let hwac_start = now + p;
        let stage_end = if cache_mode {
            let addr = match source {
                JobSource::TaskBuffer(tb) => self.slot_addr(ch, tb, false),
                JobSource::Chain => chain_addr,
            };
            let mut buf = input.clone();
            let done = self.cache_access(hwac_start, ch, CacheOp::Read, addr, &mut buf);
            if buf != input {
                self.fail(format!("cache returned wrong input for hwa {me}"));
            }
            clock.edge_at_or_after(done) + (4 + input_flits as u64) * p
        } else {
            hwac_start + (4 + input_flits as u64) * p
        };
        let c = &mut self.channels[ch];
        c.stats.invocations += 1;
        c.stats.hwac_flits += input_flits as u64;
        let hop = HopTimes { hwa_id: me, select: now, hwac_start, input_flits, ..Default::default() };
        c.job = Some(Job {
            source,
            header,
            input,
            input_flits,
            stage: Stage::Hwac,
            stage_end,
            result: Vec::new(),
            hop,
            task,
            stalled_since: None,
            out_addr: 0,
        });
        self.events.push((now, FpgaEvent::Select { ch, chained: from_chain.is_some() }));
    }

    fn advance_job(&mut self, ch: usize, now: Ps) {
        let clock = self.channels[ch].clock();
        let p = clock.period();
        loop {
            let spec = &self.channels[ch].spec;
            let (exec_model, out_flits, function) = (spec.exec, spec.output_flits, spec.function);
            let Some(job) = self.channels[ch].job.as_mut() else { return };
            if job.stage_end > now {
                return;
            }
            match job.stage {
                Stage::Hwac => {
                    let e = exec_model.cycles(job.input_flits);
                    job.hop.exec_start = job.stage_end;
                    job.hop.exec_ps = e * p;
                    job.stage = Stage::Exec;
                    job.stage_end += e * p;
                }
                Stage::Exec => {
                    let out_bytes = out_flits.saturating_sub(1) * BODY_PAYLOAD_BYTES;
                    job.result = synthetic_result(function, &job.input, out_bytes);
                    job.hop.pg_start = job.stage_end;
                    job.hop.output_flits = out_flits;
                    job.stage = Stage::Pg;
                    let pg_start = job.stage_end;
                    let base_end = pg_start + (4 + out_flits as u64) * p;
                    if self.cache.is_some() {
                        let mut data = job.result.clone();
                        let (hwa, tb) = (job.task.request.hwa_id, job.task.times.tb as usize);
                        let chained = job.header.chaining_depth > 0;
                        let addr = self.task_out_addr(hwa, tb, chained);
                        let done = self.cache_access(base_end, ch, CacheOp::Write, addr, &mut data);
                        let job = self.channels[ch].job.as_mut().expect("job");
                        job.stage_end = clock.edge_at_or_after(done);
                        job.out_addr = addr;
                    } else {
                        job.stage_end = base_end;
                    }
                }
                Stage::Pg => {
                    if !self.pg_write(ch, now) {
                        let c = &mut self.channels[ch];
                        c.stats.pg_stall_cycles += 1;
                        let job = c.job.as_mut().expect("job");
                        job.stalled_since.get_or_insert(now);
                    }
                    return;
                }
            }
        }
    }

    /// Packet generator output. Returns false while the destination buffer is full.
    fn pg_write(&mut self, ch: usize, now: Ps) -> bool {
        let iface = self.cfg.iface;
        let cache_mode = self.cache.is_some();
        let job = self.channels[ch].job.as_ref().expect("job in PG");
        let depth = job.header.chaining_depth;
        let out_flits = job.hop.output_flits;
        if depth > 0 {
            let c = &self.channels[ch];
            if c.cb.len() >= c.cb_depth {
                return false;
            }
            let Some(g) = c.spec.chain_group else {
                self.fail(format!("hwa {} has chain depth {depth} but no chain group", c.spec.hwa_id));
                return false;
            };
            let next_index = chain_front(job.header.chaining_index);
            if let Err(e) = self.cfg.groups[g].member(next_index) {
                self.fail(e.to_string());
                return false;
            }
            let mut job = self.channels[ch].job.take().expect("job");
            let mut header = job.header;
            header.chaining_depth -= 1;
            header.chaining_index = chain_shift(header.chaining_index);
            job.hop.pg_done = now;
            job.hop.out_visible = if cache_mode { now } else { now + (4 + out_flits as u64) * self.channels[ch].clock().period() };
            job.task.times.hops.push(job.hop.clone());
            let c = &mut self.channels[ch];
            c.stats.result_flits += out_flits as u64;
            c.stats.chain_flits += out_flits as u64;
            c.cb.push_back(ChainEntry {
                next_index,
                group: g,
                header,
                data: job.result,
                flits: out_flits,
                written_at: now,
                addr: job.out_addr,
                task: job.task,
            });
            self.release_source(ch, job.source, now);
            self.events.push((now, FpgaEvent::PgDone { ch, chained: true }));
            return true;
        }

        let req = job.header;
        let direction = req.direction().unwrap_or(Direction::Direct);
        let (dest, address) = match direction {
            Direction::Memory => (self.cfg.mmu_route, req.start_address.wrapping_add(self.cfg.result_offset)),
            Direction::Direct => (self.proc_route(req.source_id), req.start_address),
        };
        let mut rh = req;
        rh.routing_info = dest.encode();
        rh.hwa_id = self.channels[ch].spec.hwa_id;
        rh.task_head_tail = 0b11;
        rh.chaining_depth = 0;
        rh.chaining_index = 0;
        rh.start_address = address;
        let packet = match segment(&job.result, &rh, PacketKind::Result) {
            Ok(p) => p,
            Err(e) => {
                self.fail(format!("result segmentation: {e}"));
                return false;
            }
        };
        let priority = req.packet_priority;
        if cache_mode {
            // Without a packet output buffer the result waits in the cache; the
            // task slot stays held until the sender has read it out.
            let mut job = self.channels[ch].job.take().expect("job");
            let origin_slot = self.channel_of(job.task.request.hwa_id).map(|o| (o, job.task.times.tb as usize));
            let addr = job.out_addr;
            job.hop.pg_done = now;
            let visible = iface.nth_edge_after(now, 2);
            job.hop.out_visible = visible;
            job.task.times.hops.push(job.hop.clone());
            let flits = packet.len();
            self.cache_out[ch].push_back(CachedResult {
                packet: ResultPacket { flits: packet.into_flits(), priority, task: job.task },
                visible_at: visible,
                slot: origin_slot,
                addr,
            });
            let c = &mut self.channels[ch];
            c.stats.result_flits += flits as u64;
            c.stats.pob_flits += flits as u64;
            self.notify(ch, &req, dest, address, now);
            self.events.push((now, FpgaEvent::PgDone { ch, chained: false }));
            return true;
        }
        if self.channels[ch].pob.is_full() {
            return false;
        }
        let flits = packet.len();
        let mut job = self.channels[ch].job.take().expect("job");
        job.hop.pg_done = now;
        job.hop.out_visible = self.channels[ch].pob.read_domain().nth_edge_after(now, 4 + flits as u64);
        job.task.times.hops.push(job.hop.clone());
        let pkt = ResultPacket { flits: packet.into_flits(), priority, task: job.task };
        let c = &mut self.channels[ch];
        c.pob.push_delayed(pkt, now, flits as u64 + 2).map_err(|_| ()).expect("space checked");
        c.stats.result_flits += flits as u64;
        c.stats.pob_flits += flits as u64;
        self.release_source(ch, job.source, now);
        self.notify(ch, &req, dest, address, now);
        self.events.push((now, FpgaEvent::PgDone { ch, chained: false }));
        true
    }

    fn notify(&mut self, ch: usize, req: &HeadFields, _result_dest: RouteInfo, address: u32, now: Ps) {
        let mut h = *req;
        h.routing_info = self.proc_route(req.source_id).encode();
        h.hwa_id = self.channels[ch].spec.hwa_id;
        h.start_address = address;
        h.chaining_depth = 0;
        h.chaining_index = 0;
        let flit = match Packet::command(PacketKind::Notify, h) {
            Ok(p) => p.into_flits()[0],
            Err(e) => return self.fail(format!("notify encode: {e}")),
        };
        let visible_at = self.cfg.iface.nth_edge_after(now, 2);
        let c = &mut self.channels[ch];
        c.cmdq.push_back(QueuedCommand { flit, kind: CmdKind::Notify, visible_at, key: (req.source_id, req.start_address) });
        c.stats.notifies += 1;
        self.events.push((now, FpgaEvent::Notify { ch }));
    }

    fn release_source(&mut self, ch: usize, source: JobSource, now: Ps) {
        if let JobSource::TaskBuffer(tb) = source {
            if self.cache.is_some() {
                return;
            }
            let free_at = self.cfg.iface.nth_edge_after(now, 2);
            let buf = &mut self.channels[ch].tbs[tb];
            buf.state = TbState::Free;
            buf.free_visible_at = free_at;
            buf.task = None;
            self.events.push((now, FpgaEvent::Free { ch, tb }));
        }
    }

    fn ps_step(&mut self, now: Ps) {
        let p = self.cycle();
        if let PsState::Result { flits, next, push_from, task, slot } = &mut self.ps {
            if now < *push_from {
                return;
            }
            if self.tx.is_full() {
                self.stats.ps_stall_cycles += 1;
                return;
            }
            self.tx.push(flits[*next], now).expect("space checked");
            self.stats.tx_result_flits += 1;
            self.events.push((now, FpgaEvent::Tx { result: true }));
            *next += 1;
            if *next == flits.len() {
                let mut task = std::mem::take(task);
                task.times.ps_done = now + p;
                let slot = *slot;
                self.ps = PsState::Idle;
                if let Some((ch, tb)) = slot {
                    let buf = &mut self.channels[ch].tbs[tb];
                    buf.state = TbState::Free;
                    buf.task = None;
                    buf.free_visible_at = self.cfg.iface.nth_edge_after(now, 2);
                    self.events.push((now, FpgaEvent::Free { ch, tb }));
                }
                self.finished.push(*task);
            }
            return;
        }
        if self.tx.is_full() {
            return;
        }
        let n = self.channels.len();
        let cmd: Vec<bool> = self.channels.iter().map(|c| c.cmdq.front().is_some_and(|q| q.visible_at <= now)).collect();
        let res: Vec<Option<u8>> = if self.cache.is_some() {
            self.cache_out.iter().map(|q| q.front().filter(|r| r.visible_at <= now).map(|r| r.packet.priority)).collect()
        } else {
            self.channels.iter().map(|c| c.pob.peek(now).map(|r| r.priority)).collect()
        };
        debug_assert_eq!(cmd.len(), n);
        match self.arb.select(&cmd, &res) {
            None => {}
            Some((ch, OutClass::Command)) => {
                let q = self.channels[ch].cmdq.pop_front().expect("visible command");
                self.tx.push(q.flit, now).expect("space checked");
                self.stats.tx_cmd_flits += 1;
                self.events.push((now, FpgaEvent::Tx { result: false }));
            }
            Some((ch, OutClass::Result)) => {
                let (packet, push_from, slot) = if self.cache.is_some() {
                    let r = self.cache_out[ch].pop_front().expect("visible result");
                    let bytes = decode_head_unchecked(&r.packet.flits[0]).data_size as usize;
                    let mut buf = vec![0u8; bytes];
                    let done = self.cache_access(now, ch, CacheOp::Read, r.addr, &mut buf);
                    let from = self.cfg.iface.edge_at_or_after(done) + 3 * p;
                    (r.packet, from.max(now + 4 * p), r.slot)
                } else {
                    let r = self.channels[ch].pob.pop(now).expect("visible result");
                    (r, now + 4 * p, None)
                };
                let mut task = packet.task;
                task.times.ps_select = now;
                self.ps = PsState::Result { flits: packet.flits, next: 0, push_from, task: Box::new(task), slot };
            }
        }
    }

    /// Queue and controller state, for deadlock reports.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "fpga rx={} tx={} pr={:?} ps={}\n",
            self.rx.len(),
            self.tx.len(),
            match &self.pr_mode {
                PrMode::Idle => "idle".to_string(),
                PrMode::Receiving { ch, tb, flits, .. } => format!("recv ch{ch} tb{tb} {flits} flits"),
                PrMode::Discarding => "discard".to_string(),
            },
            match &self.ps {
                PsState::Idle => "idle".to_string(),
                PsState::Result { next, flits, .. } => format!("result {next}/{}", flits.len()),
            }
        );
        for (i, c) in self.channels.iter().enumerate() {
            let tbs: Vec<String> = c.tbs.iter().map(|t| format!("{:?}", t.state)).collect();
            s.push_str(&format!(
                "  ch{i} hwa{} rb={} tbs=[{}] cmdq={} pob={} cb={} job={:?}\n",
                c.spec.hwa_id,
                c.rb.len(),
                tbs.join(","),
                c.cmdq.len(),
                c.pob.len(),
                c.cb.len(),
                c.job.as_ref().map(|j| (j.stage, j.stage_end, j.stalled_since))
            ));
        }
        s
    }
}



#[cfg(test)]
mod tests {
    use super::bench::*;
    use super::*;
    use crate::channel::{pack_chain_index, ExecModel};
    use crate::codec::reassemble_flits;

    const P: Ps = IFACE;

    fn data(n_flits: usize, salt: u8) -> Vec<u8> {
        (0..(n_flits - 1) * 16).map(|i| (i as u8).wrapping_mul(31) ^ salt).collect()
    }

    #[test]
    fn latency_contracts_on_idle_channel() {
        for n in [1usize, 3, 18, 64] {
            let mut b = Bench::new(config(vec![hwa(5, n, n, 10)]));
            let input = data(n, 7);
            b.invoke(request(1, 5, 0x40, input.len() as u16), &input);
            b.settle(1);
            let t = b.fpga.finished[0].times.clone();
            let h = &t.hops[0];
            let n64 = n as u64;
            assert_eq!(t.tb_ready - t.payload_head, (2 + n64) * P, "PR payload, N={n}");
            assert_eq!(h.select, t.tb_ready, "TA sees the ready TB at once, N={n}");
            assert_eq!(h.hwac_start - h.select, P, "TA, N={n}");
            assert_eq!(h.exec_start - h.hwac_start, (4 + n64) * P, "HWAC, N={n}");
            assert_eq!(h.pg_start - h.exec_start, 10 * P, "exec, N={n}");
            assert_eq!(h.pg_done - h.pg_start, (4 + n64) * P, "PG, N={n}");
            assert_eq!(h.out_visible - h.pg_done, (4 + n64) * P, "POB, N={n}");
            assert_eq!(t.ps_select, h.out_visible, "PS starts when the POB shows the packet, N={n}");
            assert_eq!(t.ps_done - t.ps_select, (4 + n64) * P, "PS payload, N={n}");
            // Bypass grant: granted on the cycle the request was read.
            assert_eq!(t.granted, t.request_rx);
            // Result leaves intact.
            let res: Vec<Flit> = b.out.iter().map(|x| x.1).filter(|f| !(f.is_head() && decode_head_unchecked(f).is_command())).collect();
            assert_eq!(res.len(), n);
            let bytes = reassemble_flits(&res).unwrap();
            assert_eq!(bytes, synthetic_result(5, &input, (n - 1) * 16));
            assert_eq!(b.commands(PacketKind::Notify).len(), 1);
        }
    }

    #[test]
    fn command_and_grant_take_one_cycle() {
        let mut b = Bench::new(config(vec![hwa(0, 2, 2, 1)]));
        b.feed.push_back(request_flit(request(0, 0, 1, 16)));
        b.run_until(|b| !b.commands(PacketKind::Grant).is_empty(), 1_000_000);
        let c = &b.fpga.channels[0];
        let q = c.tbs[0].task.as_ref().unwrap().times.clone();
        // Request read at s, granted at s (bypass), grant leaves the sender at s+1.
        assert_eq!(q.granted, q.request_rx);
        assert_eq!(c.stats.bypass_grants, 1);
        let grant_tx = b.fpga.events.iter().find(|e| e.1 == FpgaEvent::Tx { result: false }).unwrap().0;
        assert_eq!(grant_tx - q.granted, P);
    }

    #[test]
    fn queued_request_granted_one_cycle_after_tb_frees() {
        let mut cfg = config(vec![hwa(0, 2, 2, 50)]);
        cfg.channel.num_tb = 1;
        let mut b = Bench::new(cfg);
        let input = data(2, 1);
        let g0 = b.invoke(request(0, 0, 1, 16), &input);
        assert_eq!(g0.task_buffer_id, 0);
        b.feed.push_back(request_flit(request(1, 0, 2, 16)));
        b.run_until(|b| b.fpga.channels[0].rb.len() == 1, 10_000_000);
        let visible = b.fpga.channels[0].rb[0].visible_at;
        b.run_until(|b| b.commands(PacketKind::Grant).len() == 2, 100_000_000);
        let grant_ev: Vec<Ps> = b.fpga.events.iter().filter(|e| matches!(e.1, FpgaEvent::Grant { .. })).map(|e| e.0).collect();
        let pg_done = b.fpga.events.iter().find(|e| matches!(e.1, FpgaEvent::PgDone { .. })).unwrap().0;
        let free_visible = b.fpga.iface().nth_edge_after(pg_done, 2);
        assert!(visible < free_visible);
        // The LGC grants on the first cycle the freed TB is visible.
        assert_eq!(grant_ev[1], free_visible);
        let q = b.fpga.channels[0].tbs[0].task.as_ref().unwrap().times.clone();
        assert_eq!(q.request_visible - q.request_rx, P);
    }

    #[test]
    fn three_requests_two_tbs_fcfs() {
        let mut b = Bench::new(config(vec![hwa(3, 2, 2, 200)]));
        for tag in 0..3 {
            b.feed.push_back(request_flit(request(tag as u8, 3, tag, 16)));
        }
        b.run_until(|b| b.commands(PacketKind::Grant).len() == 2, 1_000_000);
        for _ in 0..200 {
            b.step();
        }
        let grants = b.commands(PacketKind::Grant);
        assert_eq!(grants.len(), 2);
        assert_eq!(grants.iter().map(|g| g.1.start_address).collect::<Vec<_>>(), vec![0, 1]);
        assert_ne!(grants[0].1.task_buffer_id, grants[1].1.task_buffer_id);
        assert_eq!(b.fpga.channels[0].rb.len(), 1);
        // Complete the first task: the third request gets the freed buffer.
        let g = grants[0].1;
        b.feed.extend(payload(&g, &data(2, 0)));
        b.run_until(|b| b.commands(PacketKind::Grant).len() == 3, 100_000_000);
        let third = b.commands(PacketKind::Grant)[2].1;
        assert_eq!(third.start_address, 2);
        assert_eq!(third.task_buffer_id, g.task_buffer_id);
    }

    #[test]
    fn unknown_hwa_dropped_and_counted() {
        let mut b = Bench::new(config(vec![hwa(0, 2, 2, 1)]));
        b.feed.push_back(request_flit(request(0, 9, 1, 16)));
        b.feed.push_back(request_flit(request(0, 0, 2, 16)));
        b.run_until(|b| !b.commands(PacketKind::Grant).is_empty(), 1_000_000);
        assert_eq!(b.fpga.stats.unknown_hwa_drops, 1);
        assert_eq!(b.commands(PacketKind::Grant)[0].1.start_address, 2);
    }

    #[test]
    fn chain_hops_take_buffer_latency_and_one_cc_cycle() {
        let mut hwas: Vec<HwaSpec> = (0..4).map(|i| hwa(i, 9, 9, 3 + i as u64)).collect();
        for h in &mut hwas {
            h.chain_group = Some(0);
        }
        let mut cfg = config(hwas);
        cfg.groups = vec![ChainGroup { name: "g".into(), members: vec![0, 1, 2, 3] }];
        let mut b = Bench::new(cfg);
        let input = data(9, 3);
        let mut req = request(2, 0, 0x10, input.len() as u16);
        req.chaining_depth = 3;
        req.chaining_index = pack_chain_index(&[1, 2, 3]);
        b.invoke(req, &input);
        b.settle(1);
        let t = b.fpga.finished[0].times.clone();
        assert_eq!(t.hops.iter().map(|h| h.hwa_id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        for w in t.hops.windows(2) {
            assert_eq!(w[0].out_visible - w[0].pg_done, (4 + 9) * P, "chain buffer hop");
            assert_eq!(w[1].select, w[0].out_visible);
            assert_eq!(w[1].hwac_start - w[1].select, P, "CC");
        }
        assert_eq!(b.commands(PacketKind::Notify).len(), 1);
        assert_eq!(b.commands(PacketKind::Notify)[0].1.hwa_id, 3);
        let res: Vec<Flit> = b.out.iter().map(|x| x.1).filter(|f| !(f.is_head() && decode_head_unchecked(f).is_command())).collect();
        let mut expect = input.clone();
        for f in 0..4 {
            expect = synthetic_result(f, &expect, 128);
        }
        assert_eq!(reassemble_flits(&res).unwrap(), expect);
        let chain_flits: u64 = b.fpga.channels.iter().map(|c| c.stats.chain_flits).sum();
        assert_eq!(chain_flits, 27);
    }

    #[test]
    fn chain_index_outside_group_is_an_error() {
        let mut hwas: Vec<HwaSpec> = (0..2).map(|i| hwa(i, 2, 2, 1)).collect();
        for h in &mut hwas {
            h.chain_group = Some(0);
        }
        let mut cfg = config(hwas);
        cfg.groups = vec![ChainGroup { name: "g".into(), members: vec![0, 1] }];
        let mut b = Bench::new(cfg);
        let mut req = request(0, 0, 1, 16);
        req.chaining_depth = 1;
        req.chaining_index = pack_chain_index(&[3]);
        b.invoke(req, &data(2, 0));
        b.check_errors = false;
        b.run_until(|b| b.fpga.error.is_some(), 100_000_000);
        assert!(b.fpga.error.as_deref().unwrap_or("").contains("outside group"), "{:?}", b.fpga.error);
    }

    #[test]
    fn chain_entry_preferred_over_ready_task() {
        let mut hwas = vec![hwa(0, 2, 2, 1), hwa(1, 2, 2, 400)];
        for h in &mut hwas {
            h.chain_group = Some(0);
        }
        let mut cfg = config(hwas);
        cfg.groups = vec![ChainGroup { name: "g".into(), members: vec![0, 1] }];
        let mut b = Bench::new(cfg);
        // Occupy HWA 1 with a long task, then queue a direct task behind it and
        // a chained task that lands in HWA 1's chain path.
        b.invoke(request(0, 1, 1, 16), &data(2, 0));
        b.run_until(|b| b.fpga.channels[1].job.is_some(), 10_000_000);
        b.invoke(request(1, 1, 2, 16), &data(2, 1));
        let mut chained = request(2, 0, 3, 16);
        chained.chaining_depth = 1;
        chained.chaining_index = pack_chain_index(&[1]);
        b.invoke(chained, &data(2, 2));
        b.run_until(|b| b.fpga.finished.len() == 3, 100_000_000);
        let order: Vec<u32> = b.fpga.finished.iter().map(|t| t.request.start_address).collect();
        assert_eq!(order, vec![1, 3, 2]);
    }

    #[test]
    fn pg_stalls_while_pob_full() {
        let mut cfg = config(vec![hwa(0, 2, 30, 1)]);
        cfg.channel.pob_depth = 1;
        let mut b = Bench::new(cfg);
        b.invoke(request(0, 0, 1, 16), &data(2, 0));
        b.invoke(request(1, 0, 2, 16), &data(2, 1));
        // Third grant arrives once the first task frees its buffer.
        b.invoke(request(2, 0, 3, 16), &data(2, 2));
        // The sender now blocks mid-result, so the POB stays full.
        b.drain = false;
        b.run_until(|b| b.fpga.channels[0].stats.pg_stall_cycles > 0, 100_000_000);
        b.drain = true;
        b.settle(3);
        let t = &b.fpga.finished[2].times.hops[0];
        assert!(t.pg_done > t.pg_start + (4 + 30) * P);
    }

    #[test]
    fn distributed_receivers_partition_channels() {
        let hwas: Vec<HwaSpec> = (0..8).map(|i| hwa(i, 3, 3, 5)).collect();
        for per in [2usize, 4] {
            let mut cfg = config(hwas.clone());
            cfg.pr = PrStrategy::Distributed { channels_per_pr: per };
            cfg.ps = PsStrategy::Hierarchical { channels_per_group: per };
            let mut b = Bench::new(cfg);
            for i in 0..8u8 {
                b.invoke(request(i, i, i as u32, 32), &data(3, i));
            }
            b.run_until(|b| b.fpga.finished.len() == 8, 100_000_000);
            for (i, c) in b.fpga.channels.iter().enumerate() {
                assert_eq!(c.stats.invocations, 1, "channel {i}");
            }
        }
    }

    #[test]
    fn cache_mode_runs_tasks_with_intact_data() {
        let mut cfg = config(vec![hwa(0, 18, 18, 1), hwa(1, 18, 18, 1)]);
        cfg.buffering = Buffering::SharedCache(CacheConfig::default());
        let mut b = Bench::new(cfg);
        let a = data(18, 1);
        b.invoke(request(0, 0, 1, a.len() as u16), &a);
        b.invoke(request(1, 1, 2, a.len() as u16), &a);
        b.run_until(|b| b.fpga.finished.len() == 2, 100_000_000);
        let c = b.fpga.cache().unwrap().stats();
        assert!(c.accesses >= 8);
        let t = &b.fpga.finished[0].times;
        let h = &t.hops[0];
        assert!(h.exec_start - h.hwac_start > (4 + 18) * P);
    }

    #[test]
    fn exec_model_affine_applies_to_input_flits() {
        let mut s = hwa(0, 5, 2, 1);
        s.exec = ExecModel::Affine { base: 10, per_flit: 3 };
        let mut b = Bench::new(config(vec![s]));
        b.invoke(request(0, 0, 1, 64), &data(5, 0));
        b.run_until(|b| !b.fpga.finished.is_empty(), 100_000_000);
        let h = &b.fpga.finished[0].times.hops[0];
        assert_eq!(h.pg_start - h.exec_start, 25 * P);
    }
}
