// SPDX-License-Identifier: Apache-2.0

//! Built-in scenarios, single runs and parameter sweeps.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::baselines::{BusConfig, CacheConfig};
use crate::channel::{ChainGroup, ChannelParams, ExecModel, HwaSpec};
use crate::codec::RouteInfo;
use crate::endpoints::{Arrival, Targets, WorkloadSpec};
use crate::fpga::{Buffering, FpgaConfig};
use crate::interface::{PrStrategy, PsStrategy};
use crate::kernel::{ClockDomain, Ps, PS_PER_US};
use crate::noc::MeshConfig;
use crate::system::{Interconnect, RunOutput, SimError, System, SystemConfig};

pub const NOC_PERIOD: Ps = 1000;
pub const IFACE_PERIOD: Ps = 3333;
pub const PROCESSORS: usize = 8;
/// Depth used by open-loop scenarios so that offered load beyond saturation
/// queues in the request buffers instead of blocking the packet receiver.
pub const FLOOD_RB_DEPTH: usize = 4096;

pub fn fpga_route() -> RouteInfo {
    RouteInfo::new(2, 2, 0)
}

pub fn mmu_route() -> RouteInfo {
    RouteInfo::new(1, 1, 1)
}

/// Processor `i` sits on router (i mod 3, i div 3); the FPGA takes the last router.
pub fn proc_routes() -> Vec<RouteInfo> {
    (0..PROCESSORS as u8).map(|i| RouteInfo::new(i % 3, i / 3, 0)).collect()
}

pub fn izigzag_hwa(id: u8) -> HwaSpec {
    let mut h = HwaSpec::new(id, ExecModel::Const(1), 18, 18, IFACE_PERIOD);
    h.name = format!("izigzag{id}");
    h
}

pub fn dfdiv_hwa(id: u8) -> HwaSpec {
    let mut h = HwaSpec::new(id, ExecModel::Const(1000), 2, 2, IFACE_PERIOD);
    h.name = format!("dfdiv{id}");
    h
}

/// Eight accelerators spanning short to long execution and small to large payloads.
pub fn mixed_hwas() -> Vec<HwaSpec> {
    const EXEC: [u64; 8] = [1, 20, 60, 150, 400, 800, 1500, 2000];
    const FLITS: [usize; 8] = [18, 9, 5, 18, 2, 9, 3, 2];
    (0..8)
        .map(|i| {
            let mut h = HwaSpec::new(i as u8, ExecModel::Const(EXEC[i]), FLITS[i], FLITS[i], IFACE_PERIOD);
            h.name = format!("mixed{i}");
            h
        })
        .collect()
}

pub const CHAIN_STAGES: [u8; 4] = [0, 1, 2, 3];

/// Four 128-byte stages forming one chaining group.
pub fn chain_hwas() -> (Vec<HwaSpec>, Vec<ChainGroup>) {
    let hwas = CHAIN_STAGES
        .iter()
        .map(|&i| {
            let mut h = HwaSpec::new(i, ExecModel::Const(20), 9, 9, IFACE_PERIOD);
            h.name = format!("stage{i}");
            h.chain_group = Some(0);
            h
        })
        .collect();
    (hwas, vec![ChainGroup { name: "pipeline".into(), members: CHAIN_STAGES.to_vec() }])
}

pub fn base_config(hwas: Vec<HwaSpec>, groups: Vec<ChainGroup>, workloads: Vec<WorkloadSpec>) -> SystemConfig {
    let noc = ClockDomain::with_period(NOC_PERIOD);
    SystemConfig {
        noc_clock: noc,
        proc_clock: ClockDomain::with_period(1000),
        mem_clock: ClockDomain::with_period(1000),
        interconnect: Interconnect::Mesh(MeshConfig::default()),
        fpga: FpgaConfig {
            iface: ClockDomain::with_period(IFACE_PERIOD),
            noc,
            pr: PrStrategy::Centralized,
            ps: PsStrategy::Global,
            channel: ChannelParams::default(),
            rx_depth: 4,
            tx_depth: 4,
            hwas,
            groups,
            proc_routes: proc_routes(),
            mmu_route: mmu_route(),
            result_offset: 0x100_0000,
            buffering: Buffering::Distributed,
        },
        fpga_route: fpga_route(),
        workloads,
        inbox_depth: 2,
        mem_bytes: 0x200_0000,
        mem_latency: 30,
        fetch_latency: 30,
        seed: 1,
        duration_ps: 100 * PS_PER_US,
        warmup_ps: 0,
        drain: true,
        drain_limit_ps: 100_000 * PS_PER_US,
        watchdog_ps: 200 * PS_PER_US,
    }
}

/// Every processor sends `jobs` requests to `targets` at time zero.
pub fn burst_workloads(jobs: u64, targets: Targets) -> Vec<WorkloadSpec> {
    (0..PROCESSORS as u8).map(|p| WorkloadSpec::new(p, Arrival::Burst { count: jobs }, targets.clone())).collect()
}

/// Every processor issues Poisson requests at `rate` per microsecond.
pub fn poisson_workloads(rate: f64, targets: Targets) -> Vec<WorkloadSpec> {
    (0..PROCESSORS as u8)
        .map(|p| WorkloadSpec::new(p, Arrival::Poisson { rate_per_us: rate }, targets.clone()))
        .collect()
}

/// Open-loop sweep setup: fixed duration, warmup excluded, no drain.
pub fn open_loop(mut cfg: SystemConfig, duration_us: u64, warmup_us: u64) -> SystemConfig {
    cfg.fpga.channel.rb_depth = FLOOD_RB_DEPTH;
    cfg.duration_ps = duration_us * PS_PER_US;
    cfg.warmup_ps = warmup_us * PS_PER_US;
    cfg.drain = false;
    cfg
}

pub const BUILTIN: [&str; 4] = ["izigzag", "dfdiv", "eight-mixed", "chain"];

/// Named scenario with its default workload.
pub fn builtin(name: &str) -> Option<SystemConfig> {
    let all = |n: u8| Targets::Uniform((0..n).collect());
    Some(match name {
        "izigzag" => {
            let hwas = (0..8).map(izigzag_hwa).collect();
            open_loop(base_config(hwas, vec![], poisson_workloads(0.5, all(8))), 200, 20)
        }
        "dfdiv" => {
            let hwas = (0..8).map(dfdiv_hwa).collect();
            open_loop(base_config(hwas, vec![], poisson_workloads(0.2, all(8))), 400, 40)
        }
        "eight-mixed" => open_loop(base_config(mixed_hwas(), vec![], poisson_workloads(0.1, all(8))), 400, 40),
        "chain" => {
            let (hwas, groups) = chain_hwas();
            let chain = Targets::Chain { stages: CHAIN_STAGES.to_vec(), depth: 3 };
            let mut c = base_config(hwas, groups, burst_workloads(4, chain));
            c.fpga.channel.rb_depth = FLOOD_RB_DEPTH;
            c
        }
        _ => return None,
    })
}

/// Bus with the same endpoints as the mesh; processors issue single-beat bursts.
pub fn bus_interconnect(txn_overhead: u64) -> Interconnect {
    let mut burst = vec![None, None];
    burst.extend(std::iter::repeat(Some(1)).take(PROCESSORS));
    Interconnect::Bus(BusConfig { txn_overhead, burst_limit: burst, link_depth: 2 })
}

pub fn run(cfg: SystemConfig) -> Result<RunOutput, SimError> {
    System::new(cfg, None)?.run()
}

/// In-memory trace sink that can be read back after the run.
#[derive(Debug, Clone, Default)]
pub struct SharedBuf(Arc<Mutex<Vec<u8>>>);

impl SharedBuf {
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.0.lock().expect("trace buffer")).into_owned()
    }
}

impl Write for SharedBuf {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().expect("trace buffer").extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Runs `cfg` and also returns the full event trace.
pub fn run_with_trace(cfg: SystemConfig) -> Result<(RunOutput, String), SimError> {
    let buf = SharedBuf::default();
    let out = System::new(cfg, Some(Box::new(buf.clone())))?.run()?;
    Ok((out, buf.text()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    RequestRate,
    NumTb,
    ChainingDepth,
    PrStrategy,
    PsStrategy,
    Interconnect,
    Buffering,
    Seed,
}

impl Axis {
    pub const ALL: [Axis; 8] = [
        Axis::RequestRate,
        Axis::NumTb,
        Axis::ChainingDepth,
        Axis::PrStrategy,
        Axis::PsStrategy,
        Axis::Interconnect,
        Axis::Buffering,
        Axis::Seed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::RequestRate => "request_rate",
            Axis::NumTb => "num_tb",
            Axis::ChainingDepth => "chaining_depth",
            Axis::PrStrategy => "pr_strategy",
            Axis::PsStrategy => "ps_strategy",
            Axis::Interconnect => "interconnect",
            Axis::Buffering => "buffering",
            Axis::Seed => "seed",
        }
    }

    /// Returns `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &SystemConfig, value: &str) -> Result<SystemConfig, String> {
        let mut c = cfg.clone();
        let bad = |e: &dyn fmt::Display| format!("{}: bad value {value:?}: {e}", self.name());
        match self {
            Axis::RequestRate => {
                let r = f64::from_str(value).map_err(|e| bad(&e))?;
                if !(r >= 0.0 && r.is_finite()) {
                    return Err(bad(&"rate must be a finite non-negative number"));
                }
                for w in &mut c.workloads {
                    w.arrival = match w.arrival {
                        Arrival::Fixed { .. } => Arrival::Fixed { rate_per_us: r },
                        _ => Arrival::Poisson { rate_per_us: r },
                    };
                }
            }
            Axis::NumTb => {
                let n = usize::from_str(value).map_err(|e| bad(&e))?;
                if n == 0 {
                    return Err(bad(&"at least one task buffer"));
                }
                c.fpga.channel.num_tb = n;
            }
            Axis::ChainingDepth => {
                let d = u8::from_str(value).map_err(|e| bad(&e))?;
                for w in &mut c.workloads {
                    match &mut w.targets {
                        Targets::Chain { depth, .. } => *depth = d,
                        _ => return Err(bad(&"workload has no chain")),
                    }
                }
            }
            Axis::PrStrategy => c.fpga.pr = value.parse().map_err(|e: String| bad(&e))?,
            Axis::PsStrategy => c.fpga.ps = value.parse().map_err(|e: String| bad(&e))?,
            Axis::Interconnect => {
                c.interconnect = match value {
                    "noc" | "mesh" => Interconnect::Mesh(MeshConfig::default()),
                    "bus" => bus_interconnect(BUS_TXN_OVERHEAD),
                    _ => return Err(bad(&"expected noc or bus")),
                }
            }
            Axis::Buffering => {
                c.fpga.buffering = match value {
                    "distributed" => Buffering::Distributed,
                    "cache" => Buffering::SharedCache(CacheConfig::default()),
                    _ => return Err(bad(&"expected distributed or cache")),
                }
            }
            Axis::Seed => c.seed = u64::from_str(value).map_err(|e| bad(&e))?,
        }
        Ok(c)
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Axis::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Axis::ALL.iter().map(|a| a.name()).collect();
            format!("{s:?} is not sweepable; choose one of {}", names.join(", "))
        })
    }
}

/// Default per-transaction arbitration and address overhead of the bus, in cycles.
pub const BUS_TXN_OVERHEAD: u64 = 10;

/// Runs one simulation per value in parallel; rows come back in input order.
pub fn sweep(cfg: &SystemConfig, axis: Axis, values: &[String]) -> Result<Vec<(String, RunOutput)>, String> {
    let cfgs = values.iter().map(|v| axis.apply(cfg, v).map(|c| (v.clone(), c))).collect::<Result<Vec<_>, _>>()?;
    cfgs.into_par_iter()
        .map(|(v, c)| run(c).map(|o| (v.clone(), o)).map_err(|e| format!("{}={v}: {e}", axis.name())))
        .collect()
}

/// Small randomized system for safety and determinism checks. Covers both
/// interconnects, both buffering schemes, both access scenarios, chaining,
/// PR/PS strategies and unaligned accelerator clocks.
pub fn random_config(seed: u64) -> SystemConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=8u8);
    let mut hwas: Vec<HwaSpec> = (0..n)
        .map(|i| {
            let exec = if rng.gen_bool(0.7) {
                ExecModel::Const(rng.gen_range(1..=300))
            } else {
                ExecModel::Affine { base: rng.gen_range(1..=50), per_flit: rng.gen_range(0..=4) }
            };
            let period = [2500, 3333, 5000][rng.gen_range(0..3)];
            let mut h = HwaSpec::new(i, exec, rng.gen_range(1..=20), rng.gen_range(1..=20), period);
            h.clock = ClockDomain::new(period, rng.gen_range(0..period)).expect("phase below period");
            h
        })
        .collect();
    let mut groups = Vec::new();
    if n >= 2 && rng.gen_bool(0.4) {
        let k = rng.gen_range(2..=n.min(4));
        let members: Vec<u8> = (0..k).collect();
        for h in &mut hwas[..k as usize] {
            h.chain_group = Some(0);
        }
        groups.push(ChainGroup { name: "g0".into(), members });
    }
    let memory = rng.gen_bool(0.3);
    let workloads = (0..PROCESSORS as u8)
        .map(|p| {
            let targets = match groups.first() {
                Some(g) if rng.gen_bool(0.5) => {
                    Targets::Chain { stages: g.members.clone(), depth: rng.gen_range(0..g.members.len() as u8) }
                }
                _ => {
                    let set: Vec<u8> = (0..n).filter(|_| rng.gen_bool(0.6)).collect();
                    if set.is_empty() {
                        Targets::Fixed(rng.gen_range(0..n))
                    } else {
                        Targets::Uniform(set)
                    }
                }
            };
            let arrival = if rng.gen_bool(0.5) {
                Arrival::Burst { count: rng.gen_range(0..=3) }
            } else {
                Arrival::Poisson { rate_per_us: rng.gen_range(0.05..1.0) }
            };
            let mut w = WorkloadSpec::new(p, arrival, targets);
            w.max_jobs = Some(rng.gen_range(1..=4));
            w.priority = rng.gen_range(0..4);
            if memory {
                w.scenario = crate::codec::Direction::Memory;
            }
            w
        })
        .collect();
    let mut c = base_config(hwas, groups, workloads);
    c.seed = seed;
    c.duration_ps = 20 * PS_PER_US;
    c.fpga.channel.num_tb = rng.gen_range(1..=4);
    c.fpga.channel.rb_depth = FLOOD_RB_DEPTH;
    c.fpga.channel.lgb_depth = rng.gen_range(1..=4);
    c.fpga.channel.pob_depth = rng.gen_range(1..=3);
    c.fpga.channel.cb_depth = rng.gen_range(1..=3);
    c.fpga.rx_depth = rng.gen_range(2..=8);
    c.fpga.tx_depth = rng.gen_range(2..=8);
    let per = [1, 2, 4][rng.gen_range(0..3)];
    c.fpga.pr = if rng.gen_bool(0.5) { PrStrategy::Centralized } else { PrStrategy::Distributed { channels_per_pr: per } };
    c.fpga.ps = if rng.gen_bool(0.5) { PsStrategy::Global } else { PsStrategy::Hierarchical { channels_per_group: per } };
    if rng.gen_bool(0.25) {
        c.interconnect = bus_interconnect(rng.gen_range(0..=BUS_TXN_OVERHEAD));
    }
    if rng.gen_bool(0.25) {
        c.fpga.buffering = Buffering::SharedCache(CacheConfig::default());
    }
    c
}
