// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use accelsim::channel::ExecModel;
use accelsim::config::{load_config, parse_config, ConfigError};
use accelsim::endpoints::{Arrival, Targets};
use accelsim::fpga::Buffering;
use accelsim::harness::{builtin, run};
use accelsim::system::Interconnect;

const MINIMAL: &str = r#"
[[hwa]]
id = 3
exec_cycles = 5
input_flits = 2
output_flits = 2

[[workload]]
sources = [0]
arrival = "burst"
count = 2
targets = [3]
"#;

fn semantic(text: &str) -> Vec<String> {
    match parse_config(text) {
        Err(ConfigError::Semantic { errors, .. }) => errors,
        other => panic!("expected semantic errors, got {other:?}"),
    }
}

#[test]
fn minimal_config_fills_defaults_and_runs() {
    let c = parse_config(MINIMAL).unwrap();
    assert_eq!(c.fpga.hwas.len(), 1);
    assert_eq!(c.fpga.hwas[0].exec, ExecModel::Const(5));
    assert_eq!(c.fpga.hwas[0].clock.period(), 3333);
    assert_eq!(c.fpga.channel.num_tb, 2);
    assert_eq!(c.fpga.proc_routes.len(), 8);
    assert!(matches!(c.interconnect, Interconnect::Mesh(_)));
    assert_eq!(c.workloads.len(), 1);
    assert_eq!(c.workloads[0].arrival, Arrival::Burst { count: 2 });
    let o = run(c).unwrap();
    assert_eq!(o.metrics.tasks_completed, 2);
    assert!(o.violations.is_empty());
}

#[test]
fn base_scenario_matches_builtin() {
    let c = parse_config("base = \"dfdiv\"\n").unwrap();
    let b = builtin("dfdiv").unwrap();
    assert_eq!(c.fpga.hwas, b.fpga.hwas);
    assert_eq!(c.duration_ps, b.duration_ps);
    assert_eq!(c.workloads, b.workloads);
    let c = parse_config("base = \"chain\"\n[fpga]\nnum_tb = 3\n[sim]\nfpga_buffering = \"shared_cache\"\n").unwrap();
    assert_eq!(c.fpga.channel.num_tb, 3);
    assert!(matches!(c.fpga.buffering, Buffering::SharedCache(_)));
    assert_eq!(c.fpga.groups.len(), 1);
}

#[test]
fn duplicate_hwa_id_is_named() {
    let text = format!("{MINIMAL}\n[[hwa]]\nid = 3\nexec_cycles = 1\ninput_flits = 2\noutput_flits = 2\n");
    let errs = semantic(&text);
    assert!(errs.iter().any(|e| e == "duplicate hwa_id 3"), "{errs:?}");
}

#[test]
fn chain_outside_group_is_named() {
    let text = r#"
[[hwa]]
id = 0
exec_cycles = 1
input_flits = 2
output_flits = 2
[[hwa]]
id = 1
exec_cycles = 1
input_flits = 2
output_flits = 2
[[hwa]]
id = 2
exec_cycles = 1
input_flits = 2
output_flits = 2
[[group]]
name = "pair"
members = [0, 1]
[[workload]]
arrival = "burst"
chain = [0, 2]
depth = 1
"#;
    let errs = semantic(text);
    assert!(errs.iter().any(|e| e.contains("chain index of hwa_id 2 is outside group \"pair\"")), "{errs:?}");
}

#[test]
fn semantic_errors_are_aggregated() {
    let text = r#"
[sim]
interconnect = "ring"
[fpga]
num_tb = 0
[[hwa]]
id = 1
exec_cycles = 1
input_flits = 0
output_flits = 2
[[group]]
name = "g"
members = [7]
[[workload]]
sources = [9]
arrival = "sometimes"
targets = [4]
"#;
    let errs = semantic(text);
    for needle in ["ring", "num_tb", "input_flits", "undefined hwa_id 7", "sometimes", "target hwa_id 4"] {
        assert!(errs.iter().any(|e| e.contains(needle)), "missing {needle}: {errs:?}");
    }
}

#[test]
fn parse_errors_carry_line_numbers() {
    match parse_config("[sim]\nseed = 1\nduration_us = \n") {
        Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
    match parse_config("[sim]\n\nseed = \"seven\"\n") {
        Err(ConfigError::Parse { line, msg, .. }) => {
            assert_eq!(line, 3);
            assert!(msg.contains("u64"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    match parse_config("[sim]\nsede = 1\n") {
        Err(ConfigError::Parse { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("sede"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn includes_merge_and_override() {
    let dir = tempfile::tempdir().unwrap();
    let w = |name: &str, text: &str| std::fs::write(dir.path().join(name), text).unwrap();
    w("platform.toml", "[sim]\nseed = 5\nduration_us = 10.0\n[fpga]\nnum_tb = 4\nrb_depth = 16\n");
    w("main.toml", &format!("include = \"platform.toml\"\n[fpga]\nnum_tb = 1\n{MINIMAL}"));
    let c = load_config(dir.path().join("main.toml")).unwrap();
    assert_eq!(c.seed, 5);
    assert_eq!(c.duration_ps, 10_000_000);
    assert_eq!(c.fpga.channel.num_tb, 1);
    assert_eq!(c.fpga.channel.rb_depth, 16);

    w("a.toml", "include = [\"b.toml\"]\n");
    w("b.toml", "include = [\"a.toml\"]\n");
    assert!(matches!(load_config(dir.path().join("a.toml")), Err(ConfigError::IncludeCycle { .. })));
    w("bad.toml", "include = \"platform.toml\"\n[sim\n");
    match load_config(dir.path().join("bad.toml")) {
        Err(ConfigError::Parse { path, line, .. }) => {
            assert!(path.ends_with("bad.toml"));
            assert_eq!(line, 2);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn documented_schema_example_is_valid() {
    let src = include_str!("../src/config.rs");
    let block: String = src
        .lines()
        .skip_while(|l| !l.starts_with("//! ```toml"))
        .skip(1)
        .take_while(|l| !l.starts_with("//! ```"))
        .map(|l| l.trim_start_matches("//!").trim_start_matches(' '))
        .filter(|l| !l.starts_with("include"))
        .collect::<Vec<_>>()
        .join("\n");
    // The example names both `targets` and `chain`; keep the chain.
    let block = block.replace("targets = [0, 1]", "");
    let hwas: String = (1..4)
        .map(|i| format!("\n[[hwa]]\nid = {i}\nexec_cycles = 20\ninput_flits = 9\noutput_flits = 9\n"))
        .collect();
    let c = parse_config(&format!("{block}\n{hwas}")).unwrap();
    assert_eq!(c.seed, 7);
    assert_eq!(c.workloads.len(), 2);
    assert!(matches!(c.workloads[0].targets, Targets::Chain { depth: 3, .. }));
}

#[test]
fn shipped_configs_load_and_run() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut loaded = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() == "common.toml" {
            continue;
        }
        let mut c = load_config(&path).unwrap_or_else(|e| panic!("{e}"));
        if !c.drain {
            c.duration_ps = c.duration_ps.min(20_000_000);
            c.warmup_ps = 0;
        }
        let o = run(c).unwrap();
        assert!(o.violations.is_empty(), "{}: {:?}", path.display(), o.violations);
        loaded += 1;
    }
    assert!(loaded >= 3);
}
