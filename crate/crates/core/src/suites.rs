// SPDX-License-Identifier: Apache-2.0

//! Experiment suites. Each runs a fixed set of simulations and evaluates
//! pass/fail predicates over the measured values.

use std::fmt;

use crate::channel::{ChainGroup, ExecModel, HwaSpec, Task};
use crate::endpoints::{Arrival, Targets, WorkloadSpec};
use crate::harness::{
    base_config, builtin, burst_workloads, bus_interconnect, dfdiv_hwa, izigzag_hwa, run, run_with_trace, sweep, Axis,
    BUS_TXN_OVERHEAD, IFACE_PERIOD,
};
use crate::kernel::{Ps, PS_PER_US};
use crate::system::{RunOutput, SystemConfig};

pub const SUITES: [&str; 6] = ["contracts", "tb_count", "throughput", "chaining", "bus_compare", "cache_compare"];

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), pass, detail: detail.into() }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub name: String,
    /// Measured values, one row per line.
    pub lines: Vec<String>,
    pub checks: Vec<Check>,
}

impl Report {
    fn new(name: &str) -> Self {
        Report { name: name.into(), ..Default::default() }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check::new(name, pass, detail));
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "== {} ==", self.name)?;
        for l in &self.lines {
            writeln!(f, "  {l}")?;
        }
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        Ok(())
    }
}

/// Runs the named suite. `None` for an unknown name.
pub fn suite(name: &str) -> Option<Result<Report, String>> {
    Some(match name {
        "contracts" => contracts(),
        "tb_count" => tb_count(),
        "throughput" => throughput(),
        "chaining" => chaining(),
        "bus_compare" => baseline_compare(false),
        "cache_compare" => baseline_compare(true),
        _ => return None,
    })
}

fn clean(o: &RunOutput, what: &str) -> Result<(), String> {
    if !o.violations.is_empty() {
        return Err(format!("{what}: {}", o.violations.join("; ")));
    }
    Ok(())
}

fn cycles(d: Ps, p: Ps) -> String {
    if d % p == 0 {
        format!("{}", d / p)
    } else {
        format!("{:.3}", d as f64 / p as f64)
    }
}

fn single_job(hwas: Vec<HwaSpec>, groups: Vec<ChainGroup>, targets: Targets) -> SystemConfig {
    let mut c = base_config(hwas, groups, vec![WorkloadSpec::new(0, Arrival::Burst { count: 1 }, targets)]);
    c.duration_ps = 0;
    c
}

pub const CONTRACT_SIZES: [usize; 4] = [1, 3, 18, 64];

/// Idle-channel micro-benchmarks of the per-component latencies, in
/// interface (or accelerator) cycles, for in = out = N flits.
pub fn contracts() -> Result<Report, String> {
    let mut r = Report::new("contracts");
    let p = IFACE_PERIOD;
    for n in CONTRACT_SIZES {
        let hwa = HwaSpec::new(0, ExecModel::Const(10), n, n, p);
        let (o, trace) = run_with_trace(single_job(vec![hwa], vec![], Targets::Fixed(0))).map_err(|e| e.to_string())?;
        clean(&o, "contracts")?;
        let t = o.fpga_tasks.first().ok_or("no task completed")?.times.clone();
        let h = &t.hops[0];
        let n64 = n as u64;
        let grant = trace_time(&trace, " iface grant ", 0).ok_or("no grant in trace")?;
        let tx = trace_time(&trace, " iface tx cmd", grant).ok_or("no grant transmit in trace")?;
        let measured = [
            ("PR", t.tb_ready - t.payload_head, 2 + n64),
            ("TA", h.hwac_start - h.select, 1),
            ("LGC", tx - grant, 1),
            ("HWAC", h.exec_start - h.hwac_start, 4 + n64),
            ("PG", h.pg_done - h.pg_start, 4 + n64),
            ("POB", h.out_visible - h.pg_done, 4 + n64),
            ("PS", t.ps_done - t.ps_select, 4 + n64),
        ];
        let mut line = format!("N={n:<3}");
        for (name, d, want) in measured {
            line += &format!(" {name}={}", cycles(d, p));
            r.check(format!("{name} N={n}"), d == want * p, format!("{} cycles, expected {want}", cycles(d, p)));
        }

        // Two-stage chain of N-flit accelerators: one chain-buffer hop and one CC decision.
        let hwas: Vec<HwaSpec> = (0..2)
            .map(|i| {
                let mut h = HwaSpec::new(i, ExecModel::Const(10), n, n, p);
                h.chain_group = Some(0);
                h
            })
            .collect();
        let groups = vec![ChainGroup { name: "pair".into(), members: vec![0, 1] }];
        let o = run(single_job(hwas, groups, Targets::Chain { stages: vec![0, 1], depth: 1 })).map_err(|e| e.to_string())?;
        clean(&o, "contracts chain")?;
        let hops = &o.fpga_tasks.first().ok_or("no chained task completed")?.times.hops;
        if hops.len() != 2 {
            return Err(format!("chained task ran {} hops", hops.len()));
        }
        let cb = hops[0].out_visible - hops[0].pg_done;
        let cc = hops[1].hwac_start - hops[1].select;
        line += &format!(" CB={} CC={}", cycles(cb, p), cycles(cc, p));
        r.check(format!("CB N={n}"), cb == (4 + n64) * p, format!("{} cycles, expected {}", cycles(cb, p), 4 + n64));
        r.check(format!("CC N={n}"), cc == p, format!("{} cycles, expected 1", cycles(cc, p)));
        r.lines.push(line);
    }
    Ok(r)
}

/// Time of the first trace line at or after `from` containing `pat`.
fn trace_time(trace: &str, pat: &str, from: Ps) -> Option<Ps> {
    trace
        .lines()
        .filter(|l| l.contains(pat))
        .filter_map(|l| l.split_whitespace().next()?.parse::<Ps>().ok())
        .find(|&t| t >= from)
}

pub const TB_COUNTS: [usize; 4] = [1, 2, 3, 4];

/// Eight processors each fire four requests at one accelerator at time zero.
pub fn tb_config(hwa: HwaSpec) -> SystemConfig {
    let mut c = base_config(vec![hwa], vec![], burst_workloads(4, Targets::Fixed(0)));
    c.fpga.channel.rb_depth = 64;
    c.duration_ps = 0;
    c
}

fn makespans(cfg: &SystemConfig) -> Result<Vec<Ps>, String> {
    let values: Vec<String> = TB_COUNTS.iter().map(|n| n.to_string()).collect();
    let rows = sweep(cfg, Axis::NumTb, &values)?;
    rows.iter().map(|(v, o)| clean(o, &format!("num_tb={v}")).map(|_| o.metrics.makespan_ps)).collect()
}

fn gain(before: Ps, after: Ps) -> f64 {
    (before as f64 - after as f64) / before as f64
}

pub fn tb_count() -> Result<Report, String> {
    let mut r = Report::new("tb_count");
    let iz = makespans(&tb_config(izigzag_hwa(0)))?;
    let df = makespans(&tb_config(dfdiv_hwa(0)))?;
    for (i, n) in TB_COUNTS.iter().enumerate() {
        r.lines.push(format!("num_tb={n} izigzag_makespan_ns={:.1} dfdiv_makespan_ns={:.1}", iz[i] as f64 / 1e3, df[i] as f64 / 1e3));
    }
    let g12 = gain(iz[0], iz[1]);
    let g24 = gain(iz[1], iz[3]);
    let d12 = gain(df[0], df[1]);
    r.check("izigzag 1->2 TB improvement >= 20%", g12 >= 0.20, format!("{:.1}% (reference 28.4%)", g12 * 100.0));
    r.check("izigzag 2->4 TB change < 3%", g24.abs() < 0.03, format!("{:.1}%", g24 * 100.0));
    r.check("dfdiv 1->2 TB change < 3%", d12.abs() < 0.03, format!("{:.1}%", d12 * 100.0));
    Ok(r)
}

pub const IZIGZAG_RATES: [f64; 10] = [0.1, 0.3, 0.6, 0.9, 1.2, 1.5, 1.8, 2.4, 3.0, 4.0];
pub const DFDIV_RATES: [f64; 9] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.6, 0.8, 1.2, 2.0];

struct Point {
    rate: f64,
    injection: f64,
    payload: f64,
    throughput: f64,
    result: f64,
    busy: f64,
}

fn rate_sweep(cfg: &SystemConfig, rates: &[f64]) -> Result<Vec<Point>, String> {
    let values: Vec<String> = rates.iter().map(|r| r.to_string()).collect();
    let rows = sweep(cfg, Axis::RequestRate, &values)?;
    rows.iter()
        .zip(rates)
        .map(|((v, o), &rate)| {
            clean(o, &format!("rate={v}"))?;
            let m = &o.metrics.obs;
            Ok(Point {
                rate,
                injection: m.injection_rate,
                payload: m.payload_injection_rate,
                throughput: m.throughput,
                result: m.result_throughput,
                busy: m.busy_fraction,
            })
        })
        .collect()
}

fn point_line(name: &str, p: &Point) -> String {
    format!(
        "{name} rate={:.2} injection={:.1} payload={:.1} throughput={:.1} result={:.1} busy={:.3}",
        p.rate, p.injection, p.payload, p.throughput, p.result, p.busy
    )
}

/// First point within 2% of the peak throughput.
fn saturation_index(pts: &[Point]) -> usize {
    let peak = pts.iter().map(|p| p.throughput).fold(0.0, f64::max);
    pts.iter().position(|p| p.throughput >= 0.98 * peak).unwrap_or(0)
}

pub fn throughput() -> Result<Report, String> {
    let mut r = Report::new("throughput");
    let iz = rate_sweep(&builtin("izigzag").expect("builtin"), &IZIGZAG_RATES)?;
    let df = rate_sweep(&builtin("dfdiv").expect("builtin"), &DFDIV_RATES)?;
    r.lines.extend(iz.iter().map(|p| point_line("izigzag", p)));
    r.lines.extend(df.iter().map(|p| point_line("dfdiv", p)));

    let (peak_i, peak) = iz.iter().enumerate().fold((0, 0.0), |b, (i, p)| if p.throughput > b.1 { (i, p.throughput) } else { b });
    let rising = iz[..=peak_i].windows(2).all(|w| w[1].throughput >= w[0].throughput);
    r.check("izigzag throughput nondecreasing up to peak", rising, format!("peak {peak:.1} flits/us at rate {:.2}", iz[peak_i].rate));
    let low = iz[peak_i..].iter().map(|p| p.throughput).fold(f64::INFINITY, f64::min);
    r.check("izigzag throughput beyond peak within 10%", low >= 0.9 * peak, format!("min {low:.1} vs peak {peak:.1}"));
    let s = &iz[saturation_index(&iz)];
    r.check("busy fraction at saturation >= 85%", s.busy >= 0.85, format!("{:.1}% at rate {:.2} (reference 93%)", s.busy * 100.0, s.rate));
    let gap = (s.result - s.payload).abs() / s.payload;
    r.check(
        "result throughput within 15% of payload injection at saturation",
        gap <= 0.15,
        format!("result {:.1} payload {:.1} gap {:.1}% (reference 5.7%)", s.result, s.payload, gap * 100.0),
    );

    let si = saturation_index(&df);
    let tail = &df[si..];
    let (lo, hi) = tail.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), p| (lo.min(p.throughput), hi.max(p.throughput)));
    r.check(
        "dfdiv throughput constant within 2% beyond saturation",
        tail.len() >= 2 && hi <= lo * 1.02,
        format!("{} points from rate {:.2}: {lo:.2}..{hi:.2} flits/us", tail.len(), df[si].rate),
    );
    let injection_rises = tail.windows(2).all(|w| w[1].injection > w[0].injection);
    r.check(
        "dfdiv injection still rising beyond saturation",
        tail.len() >= 2 && injection_rises,
        format!("{:.1}..{:.1} flits/us", tail[0].injection, tail[tail.len() - 1].injection),
    );
    Ok(r)
}

pub const CHAIN_DEPTHS: [u8; 4] = [0, 1, 2, 3];

/// Intermediate hops of chained tasks whose chain-buffer latency is not 4+N.
pub fn chain_hop_mismatches(tasks: &[Task], period: Ps) -> (usize, usize) {
    let mut hops = 0;
    let mut bad = 0;
    for t in tasks {
        for h in t.times.hops.iter().rev().skip(1) {
            hops += 1;
            if h.out_visible - h.pg_done != (4 + h.output_flits as u64) * period {
                bad += 1;
            }
        }
    }
    (hops, bad)
}

pub fn chaining() -> Result<Report, String> {
    let mut r = Report::new("chaining");
    let base = builtin("chain").expect("builtin");
    let values: Vec<String> = CHAIN_DEPTHS.iter().map(|d| d.to_string()).collect();
    let rows = sweep(&base, Axis::ChainingDepth, &values)?;
    for (v, o) in &rows {
        clean(o, &format!("depth={v}"))?;
    }
    let span0 = rows[0].1.metrics.makespan_ps as f64;
    let speedup: Vec<f64> = rows.iter().map(|(_, o)| span0 / o.metrics.makespan_ps as f64).collect();
    let flits: Vec<u64> = rows.iter().map(|(_, o)| o.metrics.noc_flits).collect();
    for (i, (v, o)) in rows.iter().enumerate() {
        r.lines.push(format!(
            "depth={v} makespan_ns={:.1} speedup={:.3} job_latency_ns={:.1} noc_flits={}",
            o.metrics.makespan_ps as f64 / 1e3,
            speedup[i],
            o.metrics.obs.mean_job_latency_ns,
            flits[i]
        ));
    }
    let fmt_list = |v: &[String]| v.join(" ");
    r.check(
        "speedup strictly increasing with depth",
        speedup.windows(2).all(|w| w[1] > w[0]),
        fmt_list(&speedup.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>()),
    );
    r.check(
        "NoC flits strictly decreasing with depth",
        flits.windows(2).all(|w| w[1] < w[0]),
        fmt_list(&flits.iter().map(|f| f.to_string()).collect::<Vec<_>>()),
    );
    let period = base.fpga.hwas[0].clock.period();
    let (hops, bad) = rows.iter().map(|(_, o)| chain_hop_mismatches(&o.fpga_tasks, period)).fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    r.check("chain hop latency 4+N cycles", hops > 0 && bad == 0, format!("{bad} of {hops} hops off"));
    Ok(r)
}

pub const BASELINE_RATES: [f64; 8] = [0.2, 0.4, 0.6, 0.8, 1.0, 1.5, 2.0, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System3 {
    Noc,
    Cache,
    Bus,
}

impl System3 {
    pub fn name(self) -> &'static str {
        match self {
            System3::Noc => "noc",
            System3::Cache => "cache",
            System3::Bus => "bus",
        }
    }

    /// The izigzag scenario rebuilt on this system.
    pub fn config(self) -> SystemConfig {
        let c = builtin("izigzag").expect("builtin");
        match self {
            System3::Noc => c,
            System3::Cache => Axis::Buffering.apply(&c, "cache").expect("valid"),
            System3::Bus => SystemConfig { interconnect: bus_interconnect(BUS_TXN_OVERHEAD), ..c },
        }
    }
}

/// Peak throughput over the rate sweep and idle single-invocation communication latency.
#[derive(Debug, Clone, Copy)]
pub struct Baseline {
    pub peak: f64,
    pub peak_rate: f64,
    pub comm_ns: f64,
}

pub fn measure_baseline(sys: System3) -> Result<Baseline, String> {
    let cfg = sys.config();
    let pts = rate_sweep(&cfg, &BASELINE_RATES)?;
    let best = pts.iter().max_by(|a, b| a.throughput.total_cmp(&b.throughput)).expect("points");
    // Two spaced jobs from one processor; the second sees warm caches and an idle fabric.
    let mut s = cfg;
    let mut w = WorkloadSpec::new(0, Arrival::Fixed { rate_per_us: 0.05 }, Targets::Fixed(0));
    w.max_jobs = Some(2);
    s.workloads = vec![w];
    s.drain = true;
    s.duration_ps = 100 * PS_PER_US;
    s.warmup_ps = 0;
    let o = run(s).map_err(|e| e.to_string())?;
    clean(&o, sys.name())?;
    let mut tasks = o.tasks.clone();
    tasks.sort_by_key(|t| t.issue_ps);
    let last = tasks.last().ok_or("no single invocation completed")?;
    Ok(Baseline { peak: best.throughput, peak_rate: best.rate, comm_ns: last.comm_ps as f64 / 1e3 })
}

fn compare(r: &mut Report, fast: (&str, Baseline), slow: (&str, Baseline), reference: &str) {
    let (fa, f) = fast;
    let (sa, s) = slow;
    let thr_drop = 1.0 - s.peak / f.peak;
    let lat_ratio = s.comm_ns / f.comm_ns;
    r.check(
        format!("max throughput {fa} > {sa} by >= 10%"),
        s.peak <= 0.9 * f.peak,
        format!("{:.1} vs {:.1} flits/us, {sa} {:.1}% lower", f.peak, s.peak, thr_drop * 100.0),
    );
    r.check(
        format!("single-invocation latency {fa} < {sa} by >= 10%"),
        s.comm_ns >= 1.1 * f.comm_ns,
        format!("{:.1} vs {:.1} ns, {lat_ratio:.2}x ({reference})", f.comm_ns, s.comm_ns),
    );
}

pub fn baseline_compare(with_cache: bool) -> Result<Report, String> {
    let mut r = Report::new(if with_cache { "cache_compare" } else { "bus_compare" });
    let systems: &[System3] = if with_cache { &[System3::Noc, System3::Cache, System3::Bus] } else { &[System3::Noc, System3::Bus] };
    let mut m = Vec::new();
    for &s in systems {
        let b = measure_baseline(s)?;
        r.lines.push(format!(
            "{} peak_throughput={:.1} at rate {:.2} single_comm_latency_ns={:.1}",
            s.name(),
            b.peak,
            b.peak_rate,
            b.comm_ns
        ));
        m.push((s.name(), b));
    }
    if with_cache {
        compare(&mut r, m[0], m[1], "reference: cache 22.5% lower throughput, 1.63x latency");
        compare(&mut r, m[1], m[2], "ordering only");
    } else {
        compare(&mut r, m[0], m[1], "reference: bus 27% lower throughput, 2.42x latency");
    }
    Ok(r)
}
