// SPDX-License-Identifier: Apache-2.0

//! Whole-system assembly: interconnect, processors, memory node and FPGA,
//! driven clock edge by clock edge through the kernel.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use serde::Serialize;

use crate::baselines::{Bus, BusConfig};
use crate::channel::Task;
use crate::codec::{decode_head_unchecked, Direction, Flit, RouteInfo};
use crate::endpoints::{Catalog, JobRecord, Mmu, Processor, TaskRecord, WorkloadSpec};
use crate::fabric::{EndpointId, Fabric, Sinks};
use crate::fpga::{Fpga, FpgaConfig, FpgaEvent};
use crate::kernel::{ClockDomain, ComponentId, Kernel, Ps, Trace, PS_PER_US};
use crate::noc::{Mesh, MeshConfig};

#[derive(Debug, Clone)]
pub enum Interconnect {
    Mesh(MeshConfig),
    Bus(BusConfig),
}

impl Interconnect {
    pub fn name(&self) -> &'static str {
        match self {
            Interconnect::Mesh(_) => "noc",
            Interconnect::Bus(_) => "bus",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemConfig {
    /// Clock of the interconnect (mesh routers or bus).
    pub noc_clock: ClockDomain,
    pub proc_clock: ClockDomain,
    pub mem_clock: ClockDomain,
    pub interconnect: Interconnect,
    /// Also carries the placement: processor routes and the memory node route.
    pub fpga: FpgaConfig,
    pub fpga_route: RouteInfo,
    pub workloads: Vec<WorkloadSpec>,
    pub inbox_depth: usize,
    pub mem_bytes: usize,
    /// Memory cycles before the first beat of a DMA transfer.
    pub mem_latency: u64,
    /// Processor cycles to fetch a memory-mode result after notification.
    pub fetch_latency: u64,
    pub seed: u64,
    /// New jobs stop arriving at this time.
    pub duration_ps: Ps,
    pub warmup_ps: Ps,
    /// Keep running after `duration_ps` until all work has completed.
    pub drain: bool,
    pub drain_limit_ps: Ps,
    /// Longest stretch without any progress tolerated while work is pending.
    pub watchdog_ps: Ps,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimError {
    Protocol(String),
    Deadlock(String),
    Config(String),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::Protocol(m) => write!(f, "protocol violation: {m}"),
            SimError::Deadlock(m) => write!(f, "no progress (deadlock suspected):\n{m}"),
            SimError::Config(m) => write!(f, "invalid configuration: {m}"),
        }
    }
}

impl std::error::Error for SimError {}

/// Observation that feeds the metrics; each one is also a trace line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Obs {
    Rx { payload: bool },
    Tx { result: bool },
    Busy(bool),
    Done { latency: Ps, exec: Ps },
    Job { latency: Ps },
}

impl fmt::Display for Obs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Obs::Rx { payload } => write!(f, "rx {}", if *payload { "pay" } else { "cmd" }),
            Obs::Tx { result } => write!(f, "tx {}", if *result { "res" } else { "cmd" }),
            Obs::Busy(b) => write!(f, "busy {}", *b as u8),
            Obs::Done { latency, exec } => write!(f, "done lat={latency} exec={exec}"),
            Obs::Job { latency } => write!(f, "job lat={latency}"),
        }
    }
}

impl Obs {
    /// Inverse of `Display`; `None` for lines that are not observations.
    pub fn parse(event: &str) -> Option<Obs> {
        let mut it = event.split_whitespace();
        let kind = it.next()?;
        let arg = it.next()?;
        let field = |s: &str, key: &str| s.strip_prefix(key).and_then(|v| v.parse::<Ps>().ok());
        Some(match (kind, arg) {
            ("rx", "pay") => Obs::Rx { payload: true },
            ("rx", "cmd") => Obs::Rx { payload: false },
            ("tx", "res") => Obs::Tx { result: true },
            ("tx", "cmd") => Obs::Tx { result: false },
            ("busy", b) => Obs::Busy(b == "1"),
            ("done", lat) => Obs::Done { latency: field(lat, "lat=")?, exec: field(it.next()?, "exec=")? },
            ("job", lat) => Obs::Job { latency: field(lat, "lat=")? },
            _ => return None,
        })
    }
}

/// Rate and latency metrics built only from observations.
#[derive(Debug, Clone, Default)]
pub struct ObsAccumulator {
    warmup: Ps,
    rx: u64,
    rx_payload: u64,
    tx: u64,
    tx_result: u64,
    busy_since: Option<Ps>,
    busy_ps: Ps,
    tasks: u64,
    latency_sum: u128,
    exec_sum: u128,
    max_latency: Ps,
    jobs: u64,
    job_latency_sum: u128,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ObsSummary {
    pub window_us: f64,
    pub injection_rate: f64,
    pub payload_injection_rate: f64,
    pub throughput: f64,
    pub result_throughput: f64,
    pub busy_fraction: f64,
    pub tasks: u64,
    pub mean_latency_ns: f64,
    pub mean_comm_latency_ns: f64,
    pub max_latency_ns: f64,
    pub jobs: u64,
    pub mean_job_latency_ns: f64,
}

impl ObsAccumulator {
    pub fn new(warmup: Ps) -> Self {
        ObsAccumulator { warmup, ..Default::default() }
    }

    pub fn observe(&mut self, t: Ps, obs: &Obs) {
        let counted = t >= self.warmup;
        match *obs {
            Obs::Rx { payload } if counted => {
                self.rx += 1;
                self.rx_payload += payload as u64;
            }
            Obs::Tx { result } if counted => {
                self.tx += 1;
                self.tx_result += result as u64;
            }
            Obs::Busy(true) => self.busy_since = Some(self.busy_since.unwrap_or(t)),
            Obs::Busy(false) => {
                if let Some(s) = self.busy_since.take() {
                    self.busy_ps += t.saturating_sub(s.max(self.warmup)) * (t > self.warmup) as u64;
                }
            }
            Obs::Done { latency, exec } if counted => {
                self.tasks += 1;
                self.latency_sum += latency as u128;
                self.exec_sum += exec as u128;
                self.max_latency = self.max_latency.max(latency);
            }
            Obs::Job { latency } if counted => {
                self.jobs += 1;
                self.job_latency_sum += latency as u128;
            }
            _ => {}
        }
    }

    pub fn summary(&self, end: Ps) -> ObsSummary {
        let window = end.saturating_sub(self.warmup);
        let us = window as f64 / PS_PER_US as f64;
        let rate = |n: u64| if us > 0.0 { n as f64 / us } else { 0.0 };
        let open = self.busy_since.map_or(0, |s| end.saturating_sub(s.max(self.warmup)));
        let mean = |sum: u128, n: u64| if n > 0 { sum as f64 / n as f64 / 1000.0 } else { 0.0 };
        ObsSummary {
            window_us: us,
            injection_rate: rate(self.rx),
            payload_injection_rate: rate(self.rx_payload),
            throughput: rate(self.tx),
            result_throughput: rate(self.tx_result),
            busy_fraction: if window > 0 { (self.busy_ps + open) as f64 / window as f64 } else { 0.0 },
            tasks: self.tasks,
            mean_latency_ns: mean(self.latency_sum, self.tasks),
            mean_comm_latency_ns: mean(self.latency_sum - self.exec_sum, self.tasks),
            max_latency_ns: self.max_latency as f64 / 1000.0,
            jobs: self.jobs,
            mean_job_latency_ns: mean(self.job_latency_sum, self.jobs),
        }
    }
}

/// Recomputes the observation summary from trace text.
pub fn summary_from_trace(text: &str, warmup: Ps, end: Ps) -> ObsSummary {
    let mut acc = ObsAccumulator::new(warmup);
    for line in text.lines() {
        let mut parts = line.splitn(3, ' ');
        let (Some(t), Some(_), Some(ev)) = (parts.next(), parts.next(), parts.next()) else { continue };
        if let (Ok(t), Some(obs)) = (t.parse::<Ps>(), Obs::parse(ev)) {
            acc.observe(t, &obs);
        }
    }
    acc.summary(end)
}

/// Per-invocation log row; the six latency segments add up to `latency_ps`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskRow {
    pub task_id: u64,
    pub source: u8,
    pub tag: u32,
    pub job: u64,
    pub segment: usize,
    pub hwa: u8,
    pub hops: String,
    pub input_bytes: usize,
    pub output_bytes: usize,
    pub issue_ps: Ps,
    pub granted_ps: Ps,
    pub tb_ready_ps: Ps,
    pub start_ps: Ps,
    pub pg_done_ps: Ps,
    /// Last result flit handed to the network.
    pub sent_ps: Ps,
    pub complete_ps: Ps,
    pub exec_ps: Ps,
    pub latency_ps: Ps,
    pub comm_ps: Ps,
    pub request_ps: Ps,
    pub payload_ps: Ps,
    pub queue_ps: Ps,
    pub processing_ps: Ps,
    pub output_ps: Ps,
    pub return_ps: Ps,
    pub data_ok: bool,
}

impl TaskRow {
    /// `cycle` is the interface period: the sender's last push happens one cycle before `ps_done`.
    fn join(rec: &TaskRecord, task: &Task, cycle: Ps) -> Result<TaskRow, String> {
        let t = &task.times;
        let (first, last) = match (t.hops.first(), t.hops.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(format!("task {} finished without hops", task.id)),
        };
        let sent = t.ps_done - cycle;
        let marks = [rec.issue, t.granted, t.tb_ready, first.hwac_start, last.pg_done, sent, rec.complete];
        if marks.windows(2).any(|w| w[0] > w[1]) {
            return Err(format!("task {} has non-monotone timestamps {marks:?}", task.id));
        }
        let exec: Ps = t.hops.iter().map(|h| h.exec_ps).sum();
        let latency = rec.complete - rec.issue;
        Ok(TaskRow {
            task_id: task.id,
            source: rec.source,
            tag: rec.tag,
            job: rec.job,
            segment: rec.segment,
            hwa: rec.hops[0],
            hops: rec.hops.iter().map(u8::to_string).collect::<Vec<_>>().join("-"),
            input_bytes: rec.input_bytes,
            output_bytes: rec.output_bytes,
            issue_ps: rec.issue,
            granted_ps: t.granted,
            tb_ready_ps: t.tb_ready,
            start_ps: first.hwac_start,
            pg_done_ps: last.pg_done,
            sent_ps: sent,
            complete_ps: rec.complete,
            exec_ps: exec,
            latency_ps: latency,
            comm_ps: latency - exec,
            request_ps: marks[1] - marks[0],
            payload_ps: marks[2] - marks[1],
            queue_ps: marks[3] - marks[2],
            processing_ps: marks[4] - marks[3],
            output_ps: marks[5] - marks[4],
            return_ps: marks[6] - marks[5],
            data_ok: rec.data_ok,
        })
    }
}

/// Everything a run reports, one CSV row. `obs` fields are inlined into the row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub interconnect: String,
    pub seed: u64,
    pub end_ps: Ps,
    pub obs: ObsSummary,
    pub makespan_ps: Ps,
    pub noc_flits: u64,
    pub requests: u64,
    pub grants: u64,
    pub tasks_started: u64,
    pub notifies: u64,
    pub tasks_completed: u64,
    pub data_errors: u64,
    pub pr_stall_cycles: u64,
    pub ps_stall_cycles: u64,
    pub pg_stall_cycles: u64,
    pub inject_stalls: u64,
    pub fabric_stalls: u64,
    pub max_outstanding_grants: u64,
    pub mean_request_ns: f64,
    pub mean_payload_ns: f64,
    pub mean_queue_ns: f64,
    pub mean_processing_ns: f64,
    pub mean_output_ns: f64,
    pub mean_return_ns: f64,
}

macro_rules! flat_fields {
    ($st:ident, $src:expr; $($f:ident),*) => {
        $( $st.serialize_field(stringify!($f), &$src.$f)?; )*
    };
}

impl Serialize for RunMetrics {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("RunMetrics", 38)?;
        flat_fields!(st, self; interconnect, seed, end_ps);
        flat_fields!(st, self.obs; window_us, injection_rate, payload_injection_rate, throughput, result_throughput,
            busy_fraction, tasks, mean_latency_ns, mean_comm_latency_ns, max_latency_ns, jobs, mean_job_latency_ns);
        flat_fields!(st, self; makespan_ps, noc_flits, requests, grants, tasks_started, notifies, tasks_completed,
            data_errors, pr_stall_cycles, ps_stall_cycles, pg_stall_cycles, inject_stalls, fabric_stalls,
            max_outstanding_grants, mean_request_ns, mean_payload_ns, mean_queue_ns, mean_processing_ns,
            mean_output_ns, mean_return_ns);
        st.end()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub tasks: Vec<TaskRow>,
    /// FPGA-side record of each completed task, input data dropped.
    pub fpga_tasks: Vec<Task>,
    pub jobs: Vec<JobRecord>,
    pub violations: Vec<String>,
    pub trace_digest: String,
    pub trace_lines: u64,
    pub quiescent: bool,
}

impl RunOutput {
    pub fn write_tasks_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.tasks {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_metrics_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        write_metrics_csv(std::slice::from_ref(&self.metrics), w)
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[RunMetrics], w: W) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

const EP_FPGA: EndpointId = 0;
const EP_MMU: EndpointId = 1;
const EP_PROC0: EndpointId = 2;

struct Ports<'a> {
    fpga: &'a mut Fpga,
    mmu: &'a mut Mmu,
    procs: &'a mut [Processor],
    rx: &'a mut Vec<Obs>,
}

impl Sinks for Ports<'_> {
    fn has_space(&self, ep: EndpointId) -> bool {
        match ep {
            EP_FPGA => !self.fpga.rx.is_full(),
            EP_MMU => self.mmu.inbox.len() < self.mmu.inbox_depth,
            p => self.procs[p - EP_PROC0].inbox.len() < self.procs[p - EP_PROC0].inbox_depth,
        }
    }

    fn deliver(&mut self, ep: EndpointId, flit: Flit, now: Ps) {
        match ep {
            EP_FPGA => {
                let command = flit.is_head() && decode_head_unchecked(&flit).is_command();
                self.fpga.rx.push(flit, now).expect("space checked");
                self.rx.push(Obs::Rx { payload: !command });
            }
            EP_MMU => {
                let at = self.mmu.clock.edge_after(now);
                self.mmu.inbox.push_back((flit, at));
            }
            p => {
                let proc = &mut self.procs[p - EP_PROC0];
                let at = proc.clock.edge_after(now);
                proc.inbox.push_back((flit, at));
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Comp {
    Fabric,
    Proc(usize),
    Mmu,
    Iface,
    Hwa(usize),
}

pub struct System {
    cfg: SystemConfig,
    kernel: Kernel<Comp>,
    fabric: Box<dyn Fabric>,
    fpga: Fpga,
    procs: Vec<Processor>,
    mmu: Mmu,
    trace: Trace,
    acc: ObsAccumulator,
    pending: BTreeMap<(u8, u32), Task>,
    rows: Vec<TaskRow>,
    fpga_tasks: Vec<Task>,
    job_log: Vec<JobRecord>,
    tb_held: BTreeMap<(usize, usize), bool>,
    violations: Vec<String>,
    sleep_until: Ps,
    stopped: bool,
    done: bool,
    progress: u64,
    last_progress: (u64, Ps),
    error: Option<SimError>,
    mmu_seen: usize,
    first_issue: Option<Ps>,
    last_complete: Ps,
}

impl fmt::Debug for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

impl System {
    pub fn new(mut cfg: SystemConfig, trace_sink: Option<Box<dyn Write>>) -> Result<Self, SimError> {
        cfg.fpga.noc = cfg.noc_clock;
        let routes = &cfg.fpga.proc_routes;
        let mut endpoints = vec![cfg.fpga_route, cfg.fpga.mmu_route];
        endpoints.extend(routes.iter().copied());
        for (i, e) in endpoints.iter().enumerate() {
            if endpoints[..i].contains(e) {
                return Err(SimError::Config(format!("two endpoints share route {e:?}")));
            }
        }
        for w in &cfg.workloads {
            if w.source as usize >= routes.len() {
                return Err(SimError::Config(format!("workload for processor {} without a placement", w.source)));
            }
        }
        let fabric: Box<dyn Fabric> = match &cfg.interconnect {
            Interconnect::Mesh(m) => {
                for e in &endpoints {
                    if e.x >= m.width || e.y >= m.height {
                        return Err(SimError::Config(format!("endpoint {e:?} is outside the {}x{} mesh", m.width, m.height)));
                    }
                }
                Box::new(Mesh::new(m.clone(), cfg.noc_clock, endpoints.clone()))
            }
            Interconnect::Bus(b) => {
                let mut b = b.clone();
                b.burst_limit.resize(endpoints.len(), None);
                Box::new(Bus::new(b, cfg.noc_clock, endpoints.clone()))
            }
        };
        let catalog = Catalog { hwas: cfg.fpga.hwas.clone(), groups: cfg.fpga.groups.clone() };
        let fetch_ps = cfg.fetch_latency * cfg.proc_clock.period();
        let procs = routes
            .iter()
            .enumerate()
            .map(|(i, &route)| {
                let spec = cfg.workloads.iter().find(|w| w.source as usize == i).cloned().unwrap_or_else(|| {
                    WorkloadSpec::new(i as u8, crate::endpoints::Arrival::Burst { count: 0 }, crate::endpoints::Targets::Fixed(0))
                });
                let mut p = Processor::new(
                    spec,
                    route,
                    cfg.proc_clock,
                    cfg.fpga_route,
                    catalog.clone(),
                    cfg.fpga.result_offset,
                    fetch_ps,
                    cfg.seed,
                );
                p.inbox_depth = cfg.inbox_depth;
                p
            })
            .collect::<Vec<_>>();
        let mut mmu = Mmu::new(cfg.fpga.mmu_route, cfg.mem_clock, cfg.fpga_route, cfg.mem_bytes, cfg.mem_latency);
        mmu.inbox_depth = cfg.inbox_depth;
        let fpga = Fpga::new(cfg.fpga.clone());
        let mut kernel = Kernel::new();
        let mut sys_comps = vec![(Comp::Fabric, cfg.noc_clock)];
        sys_comps.extend(procs.iter().enumerate().map(|(i, p)| (Comp::Proc(i), p.clock)));
        sys_comps.push((Comp::Mmu, cfg.mem_clock));
        sys_comps.push((Comp::Iface, cfg.fpga.iface));
        sys_comps.extend(fpga.channels.iter().enumerate().map(|(i, c)| (Comp::Hwa(i), c.clock())));
        for (id, (c, clock)) in sys_comps.into_iter().enumerate() {
            kernel.schedule(clock.edge_at_or_after(0), id as ComponentId, c).expect("time zero");
        }
        Ok(System {
            acc: ObsAccumulator::new(cfg.warmup_ps),
            cfg,
            kernel,
            fabric,
            fpga,
            procs,
            mmu,
            trace: Trace::new(trace_sink),
            pending: BTreeMap::new(),
            rows: Vec::new(),
            fpga_tasks: Vec::new(),
            job_log: Vec::new(),
            tb_held: BTreeMap::new(),
            violations: Vec::new(),
            sleep_until: 0,
            stopped: false,
            done: false,
            progress: 0,
            last_progress: (0, 0),
            error: None,
            mmu_seen: 0,
            first_issue: None,
            last_complete: 0,
        })
    }

    pub fn fpga(&self) -> &Fpga {
        &self.fpga
    }

    pub fn processors(&self) -> &[Processor] {
        &self.procs
    }

    pub fn mmu(&self) -> &Mmu {
        &self.mmu
    }

    pub fn fabric(&self) -> &dyn Fabric {
        self.fabric.as_ref()
    }

    pub fn now(&self) -> Ps {
        self.kernel.now()
    }

    /// Queue and buffer dump of every component.
    pub fn describe(&self) -> String {
        let mut s = format!("t={} ps\n", self.kernel.now());
        s += &self.fabric.describe();
        s += "\n";
        s += &self.fpga.describe();
        for p in &self.procs {
            s += &format!(
                "\nprocessor {}: send_q={} inbox={} outstanding={}",
                p.id,
                p.send_q.len(),
                p.inbox.len(),
                p.outstanding()
            );
        }
        s += &format!("\nmmu: inbox={} send_q={} idle={}", self.mmu.inbox.len(), self.mmu.send_q.len(), self.mmu.idle());
        s
    }

    fn quiescent(&self) -> bool {
        self.fabric.in_flight() == 0
            && self.fpga.quiescent()
            && self.mmu.idle()
            && self.mmu.inbox.is_empty()
            && self.procs.iter().all(|p| p.send_q.is_empty() && p.inbox.is_empty() && p.outstanding() == 0)
    }

    fn record(&mut self, t: Ps, comp: &str, ev: &dyn fmt::Display) {
        self.trace.record(t, comp, ev);
    }

    fn observe(&mut self, t: Ps, comp: &str, obs: Obs) {
        self.trace.record(t, comp, &obs);
        self.acc.observe(t, &obs);
    }

    fn fail(&mut self, e: SimError) {
        if self.error.is_none() {
            self.error = Some(e);
        }
        self.done = true;
    }

    pub fn run(mut self) -> Result<RunOutput, SimError> {
        while !self.done {
            let Some((t, _, comp)) = self.kernel.pop_until(Ps::MAX) else { break };
            let (clock, id) = self.handle(t, comp);
            if let Some(next) = clock {
                self.kernel.schedule(next, id, comp).expect("future edge");
            }
        }
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        Ok(self.finish())
    }

    fn clock_of(&self, comp: Comp) -> (ClockDomain, ComponentId) {
        let np = self.procs.len() as ComponentId;
        match comp {
            Comp::Fabric => (self.cfg.noc_clock, 0),
            Comp::Proc(i) => (self.procs[i].clock, 1 + i as ComponentId),
            Comp::Mmu => (self.cfg.mem_clock, 1 + np),
            Comp::Iface => (self.cfg.fpga.iface, 2 + np),
            Comp::Hwa(c) => (self.fpga.channels[c].clock(), 3 + np + c as ComponentId),
        }
    }

    /// Handles one clock edge; returns when the component ticks next.
    fn handle(&mut self, t: Ps, comp: Comp) -> (Option<Ps>, ComponentId) {
        let (clock, id) = self.clock_of(comp);
        if t < self.sleep_until {
            return (Some(clock.edge_at_or_after(self.sleep_until)), id);
        }
        match comp {
            Comp::Fabric => self.fabric_tick(t),
            Comp::Proc(i) => self.proc_tick(i, t),
            Comp::Mmu => self.mmu_tick(t),
            Comp::Iface => {
                self.fpga.iface_tick(t);
                self.drain_fpga(t, "iface");
            }
            Comp::Hwa(c) => {
                self.fpga.hwa_tick(c, t);
                self.drain_fpga(t, "hwa");
            }
        }
        (Some(clock.edge_after(t)), id)
    }

    fn fabric_tick(&mut self, t: Ps) {
        if let Some(&f) = self.fpga.tx.peek(t) {
            if self.fabric.can_inject(EP_FPGA) {
                self.fabric.inject(EP_FPGA, f, t).expect("space checked");
                self.fpga.tx.pop(t).expect("peeked");
            }
        }
        let mut rx = Vec::new();
        let moved = {
            let mut ports = Ports { fpga: &mut self.fpga, mmu: &mut self.mmu, procs: &mut self.procs, rx: &mut rx };
            self.fabric.step(t, &mut ports)
        };
        self.progress += moved as u64;
        for o in rx {
            self.observe(t, "fpga", o);
        }
        self.control(t);
    }

    /// Stop conditions, idle skipping and the watchdog.
    fn control(&mut self, t: Ps) {
        let duration = self.cfg.duration_ps;
        if t > duration && !self.stopped {
            self.stopped = true;
            self.procs.iter_mut().for_each(Processor::stop_arrivals);
        }
        if t >= duration && !self.cfg.drain {
            self.done = true;
            return;
        }
        let quiet = self.quiescent();
        if quiet {
            self.last_progress = (self.progress, t);
            let next = self.procs.iter().filter_map(Processor::next_wakeup).min();
            match next {
                None if self.stopped || t >= duration => {
                    self.done = true;
                    return;
                }
                None => self.sleep_until = duration,
                Some(a) => self.sleep_until = a.min(duration.max(t)),
            }
            return;
        }
        if self.progress != self.last_progress.0 {
            self.last_progress = (self.progress, t);
        } else if t - self.last_progress.1 > self.cfg.watchdog_ps {
            let d = self.describe();
            self.fail(SimError::Deadlock(d));
            return;
        }
        if self.cfg.drain && t > duration + self.cfg.drain_limit_ps {
            self.done = true;
        }
    }

    fn proc_tick(&mut self, i: usize, t: Ps) {
        let p = &mut self.procs[i];
        let before = (p.stats.requests, p.inbox.len());
        p.tick(t);
        for (addr, data) in std::mem::take(&mut p.mem_writes) {
            if let Err(e) = self.mmu.write(addr, &data) {
                self.fail(SimError::Config(e));
            }
        }
        let p = &mut self.procs[i];
        if let Some(&f) = p.send_q.front() {
            if self.fabric.can_inject(EP_PROC0 + i) {
                self.fabric.inject(EP_PROC0 + i, f, t).expect("space checked");
                p.send_q.pop_front();
                self.progress += 1;
            } else {
                p.stats.inject_stalls += 1;
            }
        }
        if p.stats.requests > before.0 {
            self.first_issue.get_or_insert(t);
        }
        if p.inbox.len() != before.1 {
            self.progress += 1;
        }
        self.collect(i);
    }

    /// Moves finished tasks and jobs out of processor `i`.
    fn collect(&mut self, i: usize) {
        if let Some(e) = self.procs[i].error.clone() {
            return self.fail(SimError::Protocol(e));
        }
        let new: Vec<TaskRecord> = self.procs[i].completed.drain(..).collect();
        let jobs: Vec<JobRecord> = std::mem::take(&mut self.procs[i].jobs);
        for rec in new {
            self.complete(rec);
        }
        for j in jobs {
            self.last_complete = self.last_complete.max(j.complete);
            self.observe(j.complete, &format!("p{i}"), Obs::Job { latency: j.complete - j.issue });
            self.job_log.push(j);
        }
    }

    fn complete(&mut self, rec: TaskRecord) {
        let Some(mut task) = self.pending.remove(&(rec.source, rec.tag)) else {
            return self.fail(SimError::Protocol(format!(
                "processor {} completed task {:#x} the FPGA never finished",
                rec.source, rec.tag
            )));
        };
        match TaskRow::join(&rec, &task, self.cfg.fpga.iface.period()) {
            Ok(row) => {
                if !row.data_ok {
                    self.violations.push(format!("task {} result data mismatch", row.task_id));
                }
                self.progress += 1;
                self.observe(rec.complete, &format!("p{}", rec.source), Obs::Done { latency: row.latency_ps, exec: row.exec_ps });
                self.rows.push(row);
                task.data = Vec::new();
                self.fpga_tasks.push(task);
            }
            Err(e) => self.violations.push(e),
        }
    }

    fn mmu_tick(&mut self, t: Ps) {
        self.mmu.tick(t);
        if let Some(&f) = self.mmu.send_q.front() {
            if self.fabric.can_inject(EP_MMU) {
                self.fabric.inject(EP_MMU, f, t).expect("space checked");
                self.mmu.send_q.pop_front();
                self.progress += 1;
            }
        }
        if let Some(e) = self.mmu.error.clone() {
            return self.fail(SimError::Protocol(e));
        }
        let offset = self.cfg.fpga.result_offset;
        while self.mmu_seen < self.mmu.written.len() {
            let (src, addr, data, at) = self.mmu.written[self.mmu_seen].clone();
            self.mmu_seen += 1;
            self.progress += 1;
            self.record(at, "mmu", &format_args!("write src={src} addr={addr:#x} bytes={}", data.len()));
            let input = addr.wrapping_sub(offset);
            let Some(p) = self.procs.get_mut(src as usize) else {
                return self.fail(SimError::Protocol(format!("memory result for unknown processor {src}")));
            };
            let ok = p.expected_for(input).is_some_and(|e| e == data.as_slice());
            p.on_memory_result(input, ok, at);
            self.collect(src as usize);
        }
        // Keep the stored history small; only new entries matter.
        if self.mmu_seen > 1024 {
            self.mmu.written.drain(..self.mmu_seen);
            self.mmu_seen = 0;
        }
    }

    fn drain_fpga(&mut self, _t: Ps, comp: &str) {
        let events = std::mem::take(&mut self.fpga.events);
        if !events.is_empty() {
            self.progress += events.len() as u64;
        }
        for (at, ev) in events {
            match ev {
                FpgaEvent::Tx { result } => self.observe(at, "iface", Obs::Tx { result }),
                FpgaEvent::Busy(b) => self.observe(at, "iface", Obs::Busy(b)),
                FpgaEvent::Grant { ch, tb, .. } => {
                    if self.tb_held.insert((ch, tb), true) == Some(true) {
                        self.violations.push(format!("t={at}: task buffer {tb} of channel {ch} granted twice"));
                    }
                    self.record(at, comp, &ev);
                }
                FpgaEvent::Free { ch, tb } => {
                    if self.tb_held.insert((ch, tb), false) != Some(true) {
                        self.violations.push(format!("t={at}: task buffer {tb} of channel {ch} freed while free"));
                    }
                    self.record(at, comp, &ev);
                }
                _ => self.record(at, comp, &ev),
            }
        }
        for task in std::mem::take(&mut self.fpga.finished) {
            let key = (task.request.source_id, task.request.start_address);
            if self.pending.insert(key, task).is_some() {
                self.violations.push(format!("two live tasks share key {key:?}"));
            }
        }
        if let Some(e) = self.fpga.error.clone() {
            self.fail(SimError::Protocol(e));
        }
    }

    fn finish(mut self) -> RunOutput {
        let quiescent = self.quiescent();
        let end = if self.cfg.drain { self.kernel.now().max(self.cfg.duration_ps) } else { self.cfg.duration_ps };
        let memory = self.procs.iter().any(|p| p.spec.scenario == Direction::Memory);
        let requests: u64 = self.procs.iter().map(|p| p.stats.requests).sum();
        let notifies: u64 = self.procs.iter().map(|p| p.stats.notifies).sum();
        let grants: u64 = self.fpga.channels.iter().map(|c| c.stats.grants).sum();
        let started: u64 = self.fpga.channels.iter().map(|c| c.stats.tasks_started).sum();
        let fs = self.fabric.stats().clone();
        if quiescent {
            if !(requests == grants && grants == started && started == notifies) {
                self.violations.push(format!(
                    "counts differ at quiescence: requests={requests} grants={grants} started={started} notifies={notifies}"
                ));
            }
            if memory {
                let proc_grants: u64 = self.procs.iter().map(|p| p.stats.grants).sum();
                if self.mmu.stats.dma_jobs + proc_grants != grants {
                    self.violations.push(format!("{grants} grants but {} DMA jobs", self.mmu.stats.dma_jobs));
                }
            }
            if fs.injected != fs.ejected + fs.dropped || fs.dropped != 0 {
                self.violations.push(format!(
                    "flits not conserved: injected={} ejected={} dropped={}",
                    fs.injected, fs.ejected, fs.dropped
                ));
            }
            if !self.pending.is_empty() {
                self.violations.push(format!("{} finished tasks never completed", self.pending.len()));
            }
        }
        self.trace.flush();
        let n = self.rows.iter().filter(|r| r.complete_ps >= self.cfg.warmup_ps).count().max(1) as f64;
        let mean = |f: fn(&TaskRow) -> Ps| {
            self.rows.iter().filter(|r| r.complete_ps >= self.cfg.warmup_ps).map(|r| f(r) as f64).sum::<f64>() / n / 1000.0
        };
        let ch = &self.fpga.channels;
        let metrics = RunMetrics {
            interconnect: self.cfg.interconnect.name().into(),
            seed: self.cfg.seed,
            end_ps: end,
            obs: self.acc.summary(end),
            makespan_ps: self.first_issue.map_or(0, |f| self.last_complete.saturating_sub(f)),
            noc_flits: fs.injected,
            requests,
            grants,
            tasks_started: started,
            notifies,
            tasks_completed: self.rows.len() as u64,
            data_errors: self.rows.iter().filter(|r| !r.data_ok).count() as u64,
            pr_stall_cycles: self.fpga.stats.pr_stall_cycles,
            ps_stall_cycles: self.fpga.stats.ps_stall_cycles,
            pg_stall_cycles: ch.iter().map(|c| c.stats.pg_stall_cycles).sum(),
            inject_stalls: self.procs.iter().map(|p| p.stats.inject_stalls).sum(),
            fabric_stalls: fs.stalls,
            max_outstanding_grants: ch.iter().map(|c| c.stats.max_outstanding_grants).max().unwrap_or(0),
            mean_request_ns: mean(|r| r.request_ps),
            mean_payload_ns: mean(|r| r.payload_ps),
            mean_queue_ns: mean(|r| r.queue_ps),
            mean_processing_ns: mean(|r| r.processing_ps),
            mean_output_ns: mean(|r| r.output_ps),
            mean_return_ns: mean(|r| r.return_ps),
        };
        RunOutput {
            metrics,
            tasks: self.rows,
            fpga_tasks: self.fpga_tasks,
            jobs: self.job_log,
            violations: self.violations,
            trace_digest: self.trace.digest(),
            trace_lines: self.trace.lines(),
            quiescent,
        }
    }
}
