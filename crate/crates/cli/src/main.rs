// SPDX-License-Identifier: Apache-2.0

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use accelsim::config::{load_config, SystemConfigSummary};
use accelsim::harness::{builtin, sweep, Axis, BUILTIN};
use accelsim::suites::{suite, SUITES};
use accelsim::system::{write_metrics_csv, RunOutput, System, SystemConfig};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

/// Cycle-level simulator of an NoC-attached FPGA multi-accelerator interface.
#[derive(Parser)]
#[command(name = "accelsim", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulation and write metrics.csv and tasks.csv.
    Run {
        /// Config file, or a built-in scenario name.
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the event trace to this file.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run one simulation per value of a parameter and write sweep.csv.
    Sweep {
        config: String,
        /// request_rate, num_tb, chaining_depth, pr_strategy, ps_strategy, interconnect, buffering or seed.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run an experiment suite and print PASS/FAIL per check, or `all`.
    Suite { name: String },
    /// Load and check a config without running it.
    Validate { config: String },
}

fn load(spec: &str) -> Result<SystemConfig> {
    if !Path::new(spec).exists() {
        if let Some(c) = builtin(spec) {
            return Ok(c);
        }
        bail!("{spec}: no such file and not a built-in scenario ({})", BUILTIN.join(", "));
    }
    Ok(load_config(spec)?)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
}

fn print_summary(o: &RunOutput) {
    let m = &o.metrics;
    println!("interconnect       {}", m.interconnect);
    println!("end_ps             {}", m.end_ps);
    println!("tasks_completed    {}", m.tasks_completed);
    println!("injection_rate     {:.3} flits/us", m.obs.injection_rate);
    println!("throughput         {:.3} flits/us", m.obs.throughput);
    println!("busy_fraction      {:.4}", m.obs.busy_fraction);
    println!("mean_latency_ns    {:.1}", m.obs.mean_latency_ns);
    println!("mean_comm_ns       {:.1}", m.obs.mean_comm_latency_ns);
    println!("noc_flits          {}", m.noc_flits);
    println!("trace_sha256       {}", o.trace_digest);
    for v in &o.violations {
        println!("violation: {v}");
    }
}

fn run(config: &str, seed: Option<u64>, trace: Option<PathBuf>, out_dir: &Path) -> Result<bool> {
    let mut cfg = load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let sink: Option<Box<dyn Write>> = match &trace {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            Some(Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)))
        }
        None => None,
    };
    let out = System::new(cfg, sink)?.run()?;
    out.write_metrics_csv(create(out_dir, "metrics.csv")?)?;
    out.write_tasks_csv(create(out_dir, "tasks.csv")?)?;
    print_summary(&out);
    Ok(out.violations.is_empty())
}

fn run_sweep(config: &str, axis: &str, values: &[String], out_dir: &Path) -> Result<bool> {
    let cfg = load(config)?;
    let axis: Axis = axis.parse().map_err(anyhow::Error::msg)?;
    let rows = sweep(&cfg, axis, values).map_err(anyhow::Error::msg)?;
    let metrics: Vec<_> = rows.iter().map(|(_, o)| o.metrics.clone()).collect();
    let mut buf = Vec::new();
    write_metrics_csv(&metrics, &mut buf)?;
    let text = String::from_utf8(buf)?;
    let mut w = create(out_dir, "sweep.csv")?;
    let mut clean = true;
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            writeln!(w, "axis,value,{line}")?;
        } else {
            writeln!(w, "{},{},{line}", axis.name(), rows[i - 1].0)?;
        }
    }
    w.flush()?;
    for (v, o) in &rows {
        println!(
            "{}={v:<10} throughput={:.2} injection={:.2} busy={:.3} latency_ns={:.1} makespan_ps={}",
            axis.name(),
            o.metrics.obs.throughput,
            o.metrics.obs.injection_rate,
            o.metrics.obs.busy_fraction,
            o.metrics.obs.mean_latency_ns,
            o.metrics.makespan_ps
        );
        for viol in &o.violations {
            clean = false;
            println!("violation ({v}): {viol}");
        }
    }
    Ok(clean)
}

fn run_suite(name: &str) -> Result<bool> {
    let names: Vec<&str> = if name == "all" { SUITES.to_vec() } else { vec![name] };
    let mut ok = true;
    for n in names {
        let Some(res) = suite(n) else {
            bail!("unknown suite {n:?}; choose one of {} or all", SUITES.join(", "));
        };
        match res {
            Ok(r) => {
                print!("{r}");
                ok &= r.passed();
            }
            Err(e) => {
                println!("FAIL {n}: {e}");
                ok = false;
            }
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { config, seed, trace, out_dir } => run(&config, seed, trace, &out_dir),
        Cmd::Sweep { config, axis, values, out_dir } => run_sweep(&config, &axis, &values, &out_dir),
        Cmd::Suite { name } => run_suite(&name),
        Cmd::Validate { config } => load(&config).map(|c| {
            println!("{}", SystemConfigSummary(&c));
            true
        }),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
