// SPDX-License-Identifier: Apache-2.0

//! TOML configuration files.
//!
//! A file may start from a built-in scenario (`base = "izigzag"`) and pull in
//! other files with `include = ["common.toml"]`. Included files are merged
//! first, in order, and the including file overrides them key by key. Arrays
//! (including `[[hwa]]`, `[[group]]` and `[[workload]]`) replace rather than
//! append. Times ending in `_us` are microseconds, `_ps` picoseconds; all
//! other latencies are cycles of the owning clock.
//!
//! ```toml
//! base = "izigzag"              # optional: izigzag | dfdiv | eight-mixed | chain
//! include = ["shared.toml"]     # optional, relative to this file
//!
//! [sim]
//! seed = 7
//! duration_us = 200.0
//! warmup_us = 20.0
//! drain = false                 # true: run until every issued job completes
//! drain_limit_us = 100000.0
//! watchdog_us = 200.0
//! interconnect = "noc"          # noc | bus
//! fpga_buffering = "distributed" # distributed | shared_cache
//! inbox_depth = 2
//! mem_bytes = 33554432
//! mem_latency = 30              # memory cycles to first DMA beat
//! fetch_latency = 30            # processor cycles to read a memory-mode result
//!
//! [clocks]
//! noc_ps = 1000
//! interface_ps = 3333
//! processor_ps = 1000
//! memory_ps = 1000
//!
//! [mesh]
//! width = 3
//! height = 3
//! pipeline_depth = 2
//! voq_depth = 16
//! link_depth = 2
//! fpga = [2, 2, 0]              # x, y, endpoint slot (0 or 1)
//! mmu = [1, 1, 1]
//! processors = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0], [1, 1, 0], [2, 1, 0], [0, 2, 0], [1, 2, 0]]
//!
//! [fpga]
//! pr_strategy = "centralized"   # centralized | PR<n>
//! ps_strategy = "global"        # global | <channels per group>
//! num_tb = 2
//! rb_depth = 8
//! lgb_depth = 4
//! pob_depth = 2
//! cb_depth = 2
//! rx_depth = 4
//! tx_depth = 4
//! result_offset = 16777216
//!
//! [bus]
//! txn_overhead = 10
//! link_depth = 2
//! processor_burst = 1           # beats per processor burst; 0 = whole packet
//!
//! [cache]
//! size_bytes = 32768
//! ways = 2
//! line_bytes = 64
//! port_bytes = 32
//! hit_latency = 3
//! miss_penalty = 30
//!
//! [[hwa]]
//! id = 0
//! name = "stage0"
//! exec_cycles = 20              # or exec_base + exec_per_flit * input_flits
//! input_flits = 9
//! output_flits = 9
//! period_ps = 3333
//! phase_ps = 0
//!
//! [[group]]
//! name = "pipeline"
//! members = [0, 1, 2, 3]        # chain index = position in this list
//!
//! [[workload]]
//! sources = [0, 1]              # default: every processor
//! arrival = "poisson"           # poisson | fixed | burst
//! rate_per_us = 0.5             # poisson and fixed
//! count = 4                     # burst
//! targets = [0, 1]              # uniform choice per request
//! chain = [0, 1, 2, 3]          # instead of targets
//! depth = 3                     # chained hops inside the FPGA
//! access = "direct"             # direct | memory
//! payload_bytes = 128
//! max_packet_bytes = 1024
//! priority = 0
//! start_us = 0.0
//! max_jobs = 10
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::baselines::{BusConfig, CacheConfig};
use crate::channel::{ChainGroup, ExecModel, HwaSpec};
use crate::codec::{Direction, RouteInfo};
use crate::endpoints::{Arrival, Targets, WorkloadSpec};
use crate::fpga::Buffering;
use crate::harness::{base_config, builtin, BUILTIN, BUS_TXN_OVERHEAD};
use crate::kernel::{ClockDomain, Ps, PS_PER_US};
use crate::noc::MeshConfig;
use crate::system::{Interconnect, SystemConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("{path}:{line}:{col}: {msg}")]
    Parse { path: String, line: usize, col: usize, msg: String },
    #[error("{path}: include cycle through {again}")]
    IncludeCycle { path: String, again: String },
    #[error("{path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("{path}: {} error(s):\n  {}", .errors.len(), .errors.join("\n  "))]
    Semantic { path: String, errors: Vec<String> },
}

type Table = toml::map::Map<String, toml::Value>;

/// Reads, merges and validates a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<SystemConfig, ConfigError> {
    let path = path.as_ref();
    let table = load_merged(path, &mut Vec::new())?;
    build(table, &path.display().to_string())
}

/// Parses config text that has no includes.
pub fn parse_config(text: &str) -> Result<SystemConfig, ConfigError> {
    let table = parse_table(text, "<config>")?;
    if table.contains_key("include") {
        return Err(ConfigError::Schema { path: "<config>".into(), msg: "include needs a file path".into() });
    }
    build(table, "<config>")
}

/// Parses one file. Each file must also type-check on its own, which pins
/// schema errors to a line.
fn parse_table(text: &str, path: &str) -> Result<Table, ConfigError> {
    let located = |e: toml::de::Error| {
        let (line, col) = e.span().map(|s| line_col(text, s.start)).unwrap_or((1, 1));
        ConfigError::Parse { path: path.into(), line, col, msg: e.message().trim_end().to_string() }
    };
    let table = text.parse::<Table>().map_err(located)?;
    toml::from_str::<FileConfig>(text).map_err(located)?;
    Ok(table)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

fn load_merged(path: &Path, stack: &mut Vec<PathBuf>) -> Result<Table, ConfigError> {
    let shown = path.display().to_string();
    let canon = path.canonicalize().map_err(|e| ConfigError::Io { path: shown.clone(), msg: e.to_string() })?;
    if stack.contains(&canon) {
        let from = stack.last().map(|p| p.display().to_string()).unwrap_or_default();
        return Err(ConfigError::IncludeCycle { path: from, again: shown });
    }
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io { path: shown.clone(), msg: e.to_string() })?;
    let mut table = parse_table(&text, &shown)?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                _ => Err(ConfigError::Schema { path: shown.clone(), msg: "include entries must be strings".into() }),
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(ConfigError::Schema { path: shown, msg: "include must be a string or list of strings".into() }),
    };
    stack.push(canon);
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = Table::new();
    for inc in includes {
        let sub = load_merged(&dir.join(inc), stack)?;
        merge(&mut merged, sub);
    }
    stack.pop();
    merge(&mut merged, table);
    Ok(merged)
}

/// Overlays `top` onto `base`: tables merge recursively, everything else replaces.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    base: Option<String>,
    #[allow(dead_code)]
    include: Option<toml::Value>,
    #[serde(default)]
    sim: SimSection,
    #[serde(default)]
    clocks: ClockSection,
    #[serde(default)]
    mesh: MeshSection,
    #[serde(default)]
    fpga: FpgaSection,
    #[serde(default)]
    bus: BusSection,
    cache: Option<CacheSection>,
    hwa: Option<Vec<HwaEntry>>,
    group: Option<Vec<GroupEntry>>,
    workload: Option<Vec<WorkloadEntry>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    seed: Option<u64>,
    duration_us: Option<f64>,
    warmup_us: Option<f64>,
    drain: Option<bool>,
    drain_limit_us: Option<f64>,
    watchdog_us: Option<f64>,
    interconnect: Option<String>,
    fpga_buffering: Option<String>,
    inbox_depth: Option<usize>,
    mem_bytes: Option<usize>,
    mem_latency: Option<u64>,
    fetch_latency: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClockSection {
    noc_ps: Option<u64>,
    interface_ps: Option<u64>,
    processor_ps: Option<u64>,
    memory_ps: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshSection {
    width: Option<u8>,
    height: Option<u8>,
    pipeline_depth: Option<u64>,
    voq_depth: Option<usize>,
    link_depth: Option<usize>,
    fpga: Option<[u8; 3]>,
    mmu: Option<[u8; 3]>,
    processors: Option<Vec<[u8; 3]>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FpgaSection {
    pr_strategy: Option<String>,
    ps_strategy: Option<String>,
    num_tb: Option<usize>,
    rb_depth: Option<usize>,
    lgb_depth: Option<usize>,
    pob_depth: Option<usize>,
    cb_depth: Option<usize>,
    rx_depth: Option<usize>,
    tx_depth: Option<usize>,
    result_offset: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusSection {
    txn_overhead: Option<u64>,
    link_depth: Option<usize>,
    processor_burst: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheSection {
    size_bytes: Option<usize>,
    ways: Option<usize>,
    line_bytes: Option<usize>,
    port_bytes: Option<usize>,
    hit_latency: Option<u64>,
    miss_penalty: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct HwaEntry {
    id: u8,
    name: Option<String>,
    exec_cycles: Option<u64>,
    exec_base: Option<u64>,
    exec_per_flit: Option<u64>,
    input_flits: usize,
    output_flits: usize,
    period_ps: Option<u64>,
    phase_ps: Option<u64>,
    function: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupEntry {
    name: String,
    members: Vec<u8>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadEntry {
    sources: Option<Vec<u8>>,
    arrival: String,
    rate_per_us: Option<f64>,
    count: Option<u64>,
    targets: Option<Vec<u8>>,
    chain: Option<Vec<u8>>,
    depth: Option<u8>,
    access: Option<String>,
    payload_bytes: Option<usize>,
    max_packet_bytes: Option<usize>,
    priority: Option<u8>,
    start_us: Option<f64>,
    max_jobs: Option<u64>,
}

fn us_to_ps(us: f64) -> Ps {
    (us * PS_PER_US as f64).round() as Ps
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn build(table: Table, path: &str) -> Result<SystemConfig, ConfigError> {
    let f: FileConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Schema { path: path.into(), msg: e.message().to_string() })?;
    let mut errors = Vec::new();
    let mut c = match f.base.as_deref() {
        None => base_config(Vec::new(), Vec::new(), Vec::new()),
        Some(name) => match builtin(name) {
            Some(c) => c,
            None => {
                errors.push(format!("unknown base scenario {name:?}; choose one of {}", BUILTIN.join(", ")));
                base_config(Vec::new(), Vec::new(), Vec::new())
            }
        },
    };

    let s = f.sim;
    set(&mut c.seed, s.seed);
    set(&mut c.duration_ps, s.duration_us.map(us_to_ps));
    set(&mut c.warmup_ps, s.warmup_us.map(us_to_ps));
    set(&mut c.drain, s.drain);
    set(&mut c.drain_limit_ps, s.drain_limit_us.map(us_to_ps));
    set(&mut c.watchdog_ps, s.watchdog_us.map(us_to_ps));
    set(&mut c.inbox_depth, s.inbox_depth);
    set(&mut c.mem_bytes, s.mem_bytes);
    set(&mut c.mem_latency, s.mem_latency);
    set(&mut c.fetch_latency, s.fetch_latency);
    for (name, v) in [("duration_us", s.duration_us), ("warmup_us", s.warmup_us), ("drain_limit_us", s.drain_limit_us), ("watchdog_us", s.watchdog_us)] {
        if v.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
            errors.push(format!("sim.{name} must be a finite non-negative number"));
        }
    }
    if c.inbox_depth == 0 {
        errors.push("sim.inbox_depth must be at least 1".into());
    }

    let k = f.clocks;
    let mut clock = |name: &str, v: Option<u64>, slot: &mut ClockDomain| match v {
        Some(0) => errors.push(format!("clocks.{name} must be positive")),
        Some(p) => *slot = ClockDomain::with_period(p),
        None => {}
    };
    clock("noc_ps", k.noc_ps, &mut c.noc_clock);
    clock("interface_ps", k.interface_ps, &mut c.fpga.iface);
    clock("processor_ps", k.processor_ps, &mut c.proc_clock);
    clock("memory_ps", k.memory_ps, &mut c.mem_clock);
    c.fpga.noc = c.noc_clock;

    let m = f.mesh;
    let mut mesh = match &c.interconnect {
        Interconnect::Mesh(m) => m.clone(),
        Interconnect::Bus(_) => MeshConfig::default(),
    };
    set(&mut mesh.width, m.width);
    set(&mut mesh.height, m.height);
    set(&mut mesh.pipeline_depth, m.pipeline_depth);
    set(&mut mesh.voq_depth, m.voq_depth);
    set(&mut mesh.link_depth, m.link_depth);
    let route = |r: [u8; 3]| RouteInfo::new(r[0], r[1], r[2]);
    if let Some(r) = m.fpga {
        c.fpga_route = route(r);
    }
    set(&mut c.fpga.mmu_route, m.mmu.map(route));
    set(&mut c.fpga.proc_routes, m.processors.map(|v| v.into_iter().map(route).collect()));
    if mesh.width == 0 || mesh.height == 0 || mesh.width > 8 || mesh.height > 8 {
        errors.push(format!("mesh {}x{} must be between 1x1 and 8x8", mesh.width, mesh.height));
    }
    if mesh.voq_depth == 0 || mesh.link_depth == 0 || mesh.pipeline_depth == 0 {
        errors.push("mesh pipeline_depth, voq_depth and link_depth must be at least 1".into());
    }
    let mut placed: BTreeMap<(u8, u8, u8), String> = BTreeMap::new();
    let endpoints = std::iter::once(("fpga".to_string(), c.fpga_route))
        .chain(std::iter::once(("mmu".to_string(), c.fpga.mmu_route)))
        .chain(c.fpga.proc_routes.iter().enumerate().map(|(i, r)| (format!("processor {i}"), *r)));
    for (name, r) in endpoints {
        if r.x >= mesh.width || r.y >= mesh.height || r.endpoint > 1 {
            errors.push(format!("{name} at ({}, {}, {}) is outside the {}x{} mesh", r.x, r.y, r.endpoint, mesh.width, mesh.height));
        }
        if let Some(prev) = placed.insert((r.x, r.y, r.endpoint), name.clone()) {
            errors.push(format!("{name} and {prev} share node ({}, {}, {})", r.x, r.y, r.endpoint));
        }
    }
    let procs = c.fpga.proc_routes.len();
    if procs == 0 {
        errors.push("at least one processor is required".into());
    }

    let p = f.fpga;
    if let Some(v) = p.pr_strategy {
        match v.parse() {
            Ok(s) => c.fpga.pr = s,
            Err(e) => errors.push(format!("fpga.pr_strategy: {e}")),
        }
    }
    if let Some(v) = p.ps_strategy {
        match v.parse() {
            Ok(s) => c.fpga.ps = s,
            Err(e) => errors.push(format!("fpga.ps_strategy: {e}")),
        }
    }
    let ch = &mut c.fpga.channel;
    set(&mut ch.num_tb, p.num_tb);
    set(&mut ch.rb_depth, p.rb_depth);
    set(&mut ch.lgb_depth, p.lgb_depth);
    set(&mut ch.pob_depth, p.pob_depth);
    set(&mut ch.cb_depth, p.cb_depth);
    set(&mut c.fpga.rx_depth, p.rx_depth);
    set(&mut c.fpga.tx_depth, p.tx_depth);
    set(&mut c.fpga.result_offset, p.result_offset);
    let ch = &c.fpga.channel;
    for (name, v) in [
        ("num_tb", ch.num_tb),
        ("rb_depth", ch.rb_depth),
        ("lgb_depth", ch.lgb_depth),
        ("pob_depth", ch.pob_depth),
        ("cb_depth", ch.cb_depth),
        ("rx_depth", c.fpga.rx_depth),
        ("tx_depth", c.fpga.tx_depth),
    ] {
        if v == 0 {
            errors.push(format!("fpga.{name} must be at least 1"));
        }
    }

    let interconnect = s.interconnect.as_deref().unwrap_or(c.interconnect.name());
    let b = f.bus;
    c.interconnect = match interconnect {
        "noc" | "mesh" => Interconnect::Mesh(mesh),
        "bus" => {
            let mut bus = match &c.interconnect {
                Interconnect::Bus(b) => b.clone(),
                Interconnect::Mesh(_) => BusConfig { txn_overhead: BUS_TXN_OVERHEAD, burst_limit: Vec::new(), link_depth: 2 },
            };
            set(&mut bus.txn_overhead, b.txn_overhead);
            set(&mut bus.link_depth, b.link_depth);
            let beats = b.processor_burst.unwrap_or(1);
            bus.burst_limit = vec![None, None];
            bus.burst_limit.extend(std::iter::repeat((beats > 0).then_some(beats)).take(procs));
            if bus.link_depth == 0 {
                errors.push("bus.link_depth must be at least 1".into());
            }
            Interconnect::Bus(bus)
        }
        other => {
            errors.push(format!("sim.interconnect {other:?} is not noc or bus"));
            Interconnect::Mesh(mesh)
        }
    };

    let mut cache = match &c.fpga.buffering {
        Buffering::SharedCache(cc) => cc.clone(),
        Buffering::Distributed => CacheConfig::default(),
    };
    if let Some(cs) = f.cache {
        set(&mut cache.size_bytes, cs.size_bytes);
        set(&mut cache.ways, cs.ways);
        set(&mut cache.line_bytes, cs.line_bytes);
        set(&mut cache.port_bytes, cs.port_bytes);
        set(&mut cache.hit_latency, cs.hit_latency);
        set(&mut cache.miss_penalty, cs.miss_penalty);
    }
    let buffering = s.fpga_buffering.as_deref().unwrap_or(match c.fpga.buffering {
        Buffering::Distributed => "distributed",
        Buffering::SharedCache(_) => "shared_cache",
    });
    c.fpga.buffering = match buffering {
        "distributed" => Buffering::Distributed,
        "shared_cache" | "cache" => {
            if cache.ways == 0 || cache.line_bytes == 0 || cache.port_bytes == 0 || cache.size_bytes < cache.ways * cache.line_bytes {
                errors.push("cache needs ways, line_bytes and port_bytes >= 1 and size_bytes >= ways * line_bytes".into());
            }
            Buffering::SharedCache(cache)
        }
        other => {
            errors.push(format!("sim.fpga_buffering {other:?} is not distributed or shared_cache"));
            Buffering::Distributed
        }
    };

    if let Some(hwas) = f.hwa {
        let iface = c.fpga.iface.period();
        c.fpga.hwas = hwas.into_iter().filter_map(|h| hwa_spec(h, iface, &mut errors)).collect();
    }
    if let Some(groups) = f.group {
        c.fpga.groups = groups.into_iter().map(|g| ChainGroup { name: g.name, members: g.members }).collect();
    }
    let mut ids = BTreeSet::new();
    for h in &c.fpga.hwas {
        if !ids.insert(h.hwa_id) {
            errors.push(format!("duplicate hwa_id {}", h.hwa_id));
        }
    }
    if c.fpga.hwas.is_empty() {
        errors.push("no [[hwa]] defined".into());
    }
    assign_groups(&mut c, &ids, &mut errors);

    if let Some(ws) = f.workload {
        c.workloads = Vec::new();
        for (i, w) in ws.into_iter().enumerate() {
            workload(i, w, procs, &mut c, &ids, &mut errors);
        }
    }
    for w in &c.workloads {
        if w.source as usize >= procs {
            errors.push(format!("workload source {} has no processor (there are {procs})", w.source));
        }
    }

    if errors.is_empty() {
        Ok(c)
    } else {
        Err(ConfigError::Semantic { path: path.into(), errors })
    }
}

fn hwa_spec(h: HwaEntry, iface: Ps, errors: &mut Vec<String>) -> Option<HwaSpec> {
    let id = h.id;
    let exec = match (h.exec_cycles, h.exec_base, h.exec_per_flit) {
        (Some(c), None, None) => ExecModel::Const(c),
        (None, base, per_flit) if base.is_some() || per_flit.is_some() => {
            ExecModel::Affine { base: base.unwrap_or(0), per_flit: per_flit.unwrap_or(0) }
        }
        (None, None, None) => {
            errors.push(format!("hwa {id}: needs exec_cycles or exec_base/exec_per_flit"));
            return None;
        }
        _ => {
            errors.push(format!("hwa {id}: exec_cycles conflicts with exec_base/exec_per_flit"));
            return None;
        }
    };
    if h.input_flits == 0 || h.output_flits == 0 {
        errors.push(format!("hwa {id}: input_flits and output_flits must be at least 1"));
        return None;
    }
    let period = h.period_ps.unwrap_or(iface);
    let Ok(clock) = ClockDomain::new(period, h.phase_ps.unwrap_or(0)) else {
        errors.push(format!("hwa {id}: period_ps must be positive"));
        return None;
    };
    let mut spec = HwaSpec::new(id, exec, h.input_flits, h.output_flits, period);
    spec.clock = clock;
    spec.name = h.name.unwrap_or_else(|| format!("hwa{id}"));
    if let Some(f) = h.function {
        spec.function = f;
    }
    Some(spec)
}

fn assign_groups(c: &mut SystemConfig, ids: &BTreeSet<u8>, errors: &mut Vec<String>) {
    for h in &mut c.fpga.hwas {
        h.chain_group = None;
    }
    let mut names = BTreeSet::new();
    for (gi, g) in c.fpga.groups.iter().enumerate() {
        if !names.insert(g.name.clone()) {
            errors.push(format!("duplicate chain group {:?}", g.name));
        }
        if g.members.is_empty() {
            errors.push(format!("chain group {:?} has no members", g.name));
        }
        for &m in &g.members {
            if !ids.contains(&m) {
                errors.push(format!("chain group {:?} names undefined hwa_id {m}", g.name));
                continue;
            }
            let h = c.fpga.hwas.iter_mut().find(|h| h.hwa_id == m).expect("defined");
            match h.chain_group {
                Some(prev) if prev == gi => errors.push(format!("chain group {:?} lists hwa_id {m} twice", g.name)),
                Some(_) => errors.push(format!("hwa_id {m} belongs to more than one chain group")),
                None => h.chain_group = Some(gi),
            }
        }
    }
}

fn workload(i: usize, w: WorkloadEntry, procs: usize, c: &mut SystemConfig, ids: &BTreeSet<u8>, errors: &mut Vec<String>) {
    let n0 = errors.len();
    let rate = w.rate_per_us.unwrap_or(0.0);
    if !(rate >= 0.0 && rate.is_finite()) {
        errors.push(format!("workload {i}: rate_per_us must be a finite non-negative number"));
    }
    let arrival = match w.arrival.as_str() {
        "poisson" => Arrival::Poisson { rate_per_us: rate },
        "fixed" => Arrival::Fixed { rate_per_us: rate },
        "burst" => Arrival::Burst { count: w.count.unwrap_or(1) },
        other => {
            errors.push(format!("workload {i}: arrival {other:?} is not poisson, fixed or burst"));
            Arrival::Burst { count: 0 }
        }
    };
    let targets = match (w.targets, w.chain) {
        (Some(t), None) => {
            if t.is_empty() {
                errors.push(format!("workload {i}: targets is empty"));
            }
            for id in &t {
                if !ids.contains(id) {
                    errors.push(format!("workload {i}: target hwa_id {id} is not defined"));
                }
            }
            if w.depth.is_some() {
                errors.push(format!("workload {i}: depth needs a chain"));
            }
            match t.as_slice() {
                [one] => Targets::Fixed(*one),
                _ => Targets::Uniform(t),
            }
        }
        (None, Some(stages)) => {
            let depth = w.depth.unwrap_or(0);
            check_chain(i, &stages, depth, c, ids, errors);
            Targets::Chain { stages, depth }
        }
        (Some(_), Some(_)) => {
            errors.push(format!("workload {i}: give either targets or chain, not both"));
            return;
        }
        (None, None) => {
            errors.push(format!("workload {i}: needs targets or chain"));
            return;
        }
    };
    let scenario = match w.access.as_deref().unwrap_or("direct") {
        "direct" => Direction::Direct,
        "memory" => Direction::Memory,
        other => {
            errors.push(format!("workload {i}: access {other:?} is not direct or memory"));
            Direction::Direct
        }
    };
    if w.start_us.is_some_and(|v| !(v >= 0.0 && v.is_finite())) {
        errors.push(format!("workload {i}: start_us must be a finite non-negative number"));
    }
    if w.max_packet_bytes == Some(0) {
        errors.push(format!("workload {i}: max_packet_bytes must be positive"));
    }
    let sources = w.sources.unwrap_or_else(|| (0..procs as u8).collect());
    if errors.len() > n0 {
        return;
    }
    for source in sources {
        let mut spec = WorkloadSpec::new(source, arrival.clone(), targets.clone());
        spec.scenario = scenario;
        spec.payload_bytes = w.payload_bytes;
        set(&mut spec.max_packet_bytes, w.max_packet_bytes);
        set(&mut spec.priority, w.priority);
        set(&mut spec.start_ps, w.start_us.map(us_to_ps));
        spec.max_jobs = w.max_jobs;
        c.workloads.push(spec);
    }
}

fn check_chain(i: usize, stages: &[u8], depth: u8, c: &SystemConfig, ids: &BTreeSet<u8>, errors: &mut Vec<String>) {
    if stages.is_empty() {
        errors.push(format!("workload {i}: chain is empty"));
        return;
    }
    for id in stages {
        if !ids.contains(id) {
            errors.push(format!("workload {i}: chain stage hwa_id {id} is not defined"));
            return;
        }
    }
    if depth as usize >= stages.len() {
        errors.push(format!("workload {i}: depth {depth} needs at least {} chain stages", depth as usize + 1));
        return;
    }
    if depth == 0 {
        return;
    }
    let chained = &stages[..=depth as usize];
    let group_of = |id: u8| c.fpga.hwas.iter().find(|h| h.hwa_id == id).and_then(|h| h.chain_group);
    let Some(g) = group_of(chained[0]) else {
        errors.push(format!("workload {i}: chain stage hwa_id {} is in no chain group", chained[0]));
        return;
    };
    let group = &c.fpga.groups[g];
    for &id in &chained[1..] {
        if group_of(id) != Some(g) {
            errors.push(format!("workload {i}: chain index of hwa_id {id} is outside group {:?}", group.name));
            return;
        }
    }
    if let Err(e) = group.encode_route(chained) {
        errors.push(format!("workload {i}: {e}"));
    }
}

impl fmt::Display for SystemConfigSummary<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.0;
        writeln!(f, "interconnect: {}", c.interconnect.name())?;
        writeln!(
            f,
            "buffering: {}",
            match c.fpga.buffering {
                Buffering::Distributed => "distributed",
                Buffering::SharedCache(_) => "shared_cache",
            }
        )?;
        writeln!(f, "processors: {}", c.fpga.proc_routes.len())?;
        writeln!(f, "hwas: {}", c.fpga.hwas.len())?;
        writeln!(f, "chain groups: {}", c.fpga.groups.len())?;
        writeln!(f, "workloads: {}", c.workloads.len())?;
        writeln!(f, "task buffers per channel: {}", c.fpga.channel.num_tb)?;
        write!(f, "duration: {} ps, warmup: {} ps, drain: {}", c.duration_ps, c.warmup_ps, c.drain)
    }
}

/// One-screen description of a loaded config.
pub struct SystemConfigSummary<'a>(pub &'a SystemConfig);

