// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, VecDeque};

use accelsim::baselines::{CacheConfig, CacheOp, SharedCache};
use accelsim::codec::{
    decode_head, encode_head, flits_for_bytes, reassemble, segment, HeadFields, Packet, PacketKind, RouteInfo,
    HEAD_LAYOUT, MAX_DATA_BYTES,
};
use accelsim::fabric::{Fabric, VecSinks};
use accelsim::harness::{random_config, run, run_with_trace};
use accelsim::kernel::{AsyncFifo, ClockDomain, Kernel};
use accelsim::noc::{Mesh, MeshConfig};
use accelsim::system::summary_from_trace;
use proptest::prelude::*;

fn head_fields() -> impl Strategy<Value = HeadFields> {
    let w = |name: &str| HEAD_LAYOUT.iter().find(|f| f.0 == name).unwrap().2;
    let m = move |name: &str| (1u128 << w(name)) - 1;
    (
        (0..=m("routing_info") as u8, 2u8..=3, 0..=m("source_id") as u8, 0..=m("hwa_id") as u8),
        (0u8..=1, 0u8..=3, 0u8..=3, 0u8..=3, 0..=m("chaining_index") as u8),
        (0u8..=3, 0u8..=3, any::<u32>(), 0..=m("data_size") as u16, 0..=m("payload") as u64),
    )
        .prop_map(|((ri, pht, src, hwa), (ty, tht, tb, cd, ci), (pr, dir, sa, ds, pl))| HeadFields {
            routing_info: ri,
            packet_head_tail: pht,
            source_id: src,
            hwa_id: hwa,
            packet_type: ty,
            task_head_tail: tht,
            task_buffer_id: tb,
            chaining_depth: cd,
            chaining_index: ci,
            packet_priority: pr,
            packet_direction: dir,
            start_address: sa,
            data_size: ds,
            payload: pl,
        })
}

proptest! {
    #[test]
    fn head_round_trip(h in head_fields()) {
        let f = encode_head(&h).unwrap();
        prop_assert_eq!(decode_head(&f).unwrap(), h);
    }

    #[test]
    fn segmentation_inverse_and_flit_count(data in proptest::collection::vec(any::<u8>(), 0..=MAX_DATA_BYTES)) {
        let h = HeadFields { routing_info: RouteInfo::new(2, 2, 0).encode(), ..Default::default() };
        let p = segment(&data, &h, PacketKind::Payload).unwrap();
        prop_assert_eq!(reassemble(&p).unwrap(), data.clone());
        let expected = if data.is_empty() { 1 } else { 1 + data.len().div_ceil(16).max(1) };
        prop_assert_eq!(p.len(), expected);
        prop_assert_eq!(flits_for_bytes(data.len()), expected);
    }

    #[test]
    fn commands_are_one_flit(h in head_fields(), k in 0usize..3) {
        let kind = [PacketKind::Request, PacketKind::Grant, PacketKind::Notify][k];
        let p = Packet::command(kind, h).unwrap();
        prop_assert_eq!(p.len(), 1);
        prop_assert!(p.flits()[0].is_head() && p.flits()[0].is_tail());
    }

    #[test]
    fn crossing_lands_between_one_and_two_read_periods(
        wp in 1u64..5000, wph in 0u64..5000, rp in 1u64..5000, rph in 0u64..5000, k in 0u64..1000,
    ) {
        let w = ClockDomain::new(wp, wph % wp).unwrap();
        let r = ClockDomain::new(rp, rph % rp).unwrap();
        let mut fifo = AsyncFifo::new(4, w, r);
        let t = w.tick_time(k);
        let visible = fifo.push(1u8, t).unwrap();
        prop_assert!(visible - t > rp && visible - t <= 2 * rp, "t={} visible={} rp={}", t, visible, rp);
        prop_assert!(r.cycle_at(visible).is_some());
        prop_assert!(fifo.peek(visible - 1).is_none());
        prop_assert_eq!(fifo.pop(visible), Ok(1));
    }

    #[test]
    fn kernel_never_loses_events(ops in proptest::collection::vec((any::<bool>(), 0u64..100, 0u32..4), 1..200)) {
        let mut k: Kernel<u32> = Kernel::new();
        for (i, (push, dt, comp)) in ops.into_iter().enumerate() {
            if push {
                k.schedule(k.now() + dt, comp, i as u32).unwrap();
            } else {
                let until = k.now() + dt;
                let _ = k.pop_until(until);
            }
            prop_assert_eq!(k.scheduled(), k.dispatched() + k.pending());
        }
    }

    #[test]
    fn idle_mesh_hop_latency(sx in 0u8..3, sy in 0u8..3, dx in 0u8..3, dy in 0u8..3, pipe in 1u64..4) {
        prop_assume!((sx, sy) != (dx, dy));
        let eps = vec![RouteInfo::new(sx, sy, 0), RouteInfo::new(dx, dy, 0)];
        let cfg = MeshConfig { pipeline_depth: pipe, ..Default::default() };
        let mut mesh = Mesh::new(cfg, ClockDomain::with_period(1000), eps);
        let mut sinks = VecSinks::new(2, 4);
        let h = HeadFields { routing_info: RouteInfo::new(dx, dy, 0).encode(), packet_head_tail: 3, ..Default::default() };
        mesh.inject(0, encode_head(&h).unwrap(), 0).unwrap();
        let mut arrived = None;
        for c in 0..100u64 {
            mesh.step(c * 1000, &mut sinks);
            if arrived.is_none() && !sinks.received[1].is_empty() {
                arrived = Some(c);
            }
        }
        let routers = (sx.abs_diff(dx) + sy.abs_diff(dy)) as u64 + 1;
        prop_assert_eq!(arrived, Some(routers * pipe));
    }

    #[test]
    fn mesh_delivers_in_order_without_loss(
        packets in proptest::collection::vec((0usize..9, 0usize..9, 0usize..64), 1..60),
        drain_every in 1u64..4,
    ) {
        let eps: Vec<RouteInfo> = (0..9).map(|i| RouteInfo::new(i % 3, i / 3, 0)).collect();
        let mut mesh = Mesh::new(MeshConfig::default(), ClockDomain::with_period(1000), eps.clone());
        let mut sinks = VecSinks::new(9, 4);
        let mut queues: Vec<VecDeque<_>> = vec![VecDeque::new(); 9];
        let mut sent: BTreeMap<(usize, usize), Vec<Vec<u8>>> = BTreeMap::new();
        for (seq, &(s, d, len)) in packets.iter().enumerate() {
            let data: Vec<u8> = (0..len).map(|i| (seq * 7 + i) as u8).collect();
            let h = HeadFields { routing_info: eps[d].encode(), source_id: (s % 8) as u8, start_address: s as u32, ..Default::default() };
            queues[s].extend(segment(&data, &h, PacketKind::Payload).unwrap().into_flits());
            sent.entry((s, d)).or_default().push(data);
        }
        let mut got: Vec<Vec<_>> = vec![Vec::new(); 9];
        let mut c = 0u64;
        while (queues.iter().any(|q| !q.is_empty()) || mesh.in_flight() > 0) && c < 200_000 {
            for (s, q) in queues.iter_mut().enumerate() {
                if let Some(&f) = q.front() {
                    if mesh.inject(s, f, c * 1000).is_ok() {
                        q.pop_front();
                    }
                }
            }
            mesh.step(c * 1000, &mut sinks);
            if c % drain_every == 0 {
                for (d, r) in sinks.received.iter_mut().enumerate() {
                    got[d].append(r);
                }
            }
            c += 1;
        }
        for (d, r) in sinks.received.iter_mut().enumerate() {
            got[d].append(r);
        }
        prop_assert_eq!(mesh.in_flight(), 0, "stuck after {} cycles", c);
        prop_assert_eq!(mesh.stats().injected, mesh.stats().ejected);
        let mut recv: BTreeMap<(usize, usize), Vec<Vec<u8>>> = BTreeMap::new();
        for (d, flits) in got.iter().enumerate() {
            let mut i = 0;
            while i < flits.len() {
                let h = decode_head(&flits[i]).expect("packet starts with a head flit");
                prop_assert_eq!(h.routing_info, eps[d].encode());
                let mut j = i;
                while !flits[j].is_tail() {
                    j += 1;
                }
                let p = Packet::new(PacketKind::Payload, flits[i..=j].to_vec()).unwrap();
                recv.entry((h.start_address as usize, d)).or_default().push(reassemble(&p).unwrap());
                i = j + 1;
            }
        }
        prop_assert_eq!(recv, sent);
    }

    #[test]
    fn cache_reads_return_last_write(ops in proptest::collection::vec((any::<bool>(), 0u64..4096, 1usize..200, any::<u8>()), 1..80)) {
        let cfg = CacheConfig { size_bytes: 1024, ways: 2, line_bytes: 64, ..Default::default() };
        let mut cache = SharedCache::new(cfg, ClockDomain::with_period(3333));
        let mut flat = vec![0u8; 4096 + 256];
        let mut now = 0;
        for (write, addr, len, fill) in ops {
            let mut buf: Vec<u8> = (0..len).map(|i| fill.wrapping_add(i as u8)).collect();
            if write {
                now = cache.access(now, 0, CacheOp::Write, addr, &mut buf).completion;
                flat[addr as usize..addr as usize + len].copy_from_slice(&buf);
            } else {
                now = cache.access(now, 0, CacheOp::Read, addr, &mut buf).completion;
                prop_assert_eq!(&buf[..], &flat[addr as usize..addr as usize + len]);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    /// Protocol and accounting invariants on randomized whole systems.
    #[test]
    fn random_system_invariants(seed in 0u64..100_000) {
        let cfg = random_config(seed);
        let num_tb = cfg.fpga.channel.num_tb as u64;
        let (warmup, twice) = (cfg.warmup_ps, cfg.clone());
        let (o, trace) = run_with_trace(cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(o.violations.is_empty(), "{:?}", o.violations);
        prop_assert!(o.quiescent);
        let m = &o.metrics;
        prop_assert_eq!(m.requests, m.grants);
        prop_assert_eq!(m.grants, m.tasks_started);
        prop_assert_eq!(m.tasks_started, m.notifies);
        prop_assert_eq!(m.tasks_completed, m.requests);
        prop_assert_eq!(m.data_errors, 0);
        prop_assert!(m.max_outstanding_grants <= num_tb);
        for t in &o.tasks {
            prop_assert!(t.data_ok);
            let parts = t.request_ps + t.payload_ps + t.queue_ps + t.processing_ps + t.output_ps + t.return_ps;
            prop_assert_eq!(parts, t.latency_ps, "task {}", t.task_id);
            prop_assert_eq!(t.comm_ps, t.latency_ps - t.exec_ps);
        }
        for t in &o.fpga_tasks {
            prop_assert!((1..=4).contains(&t.times.hops.len()));
        }
        prop_assert_eq!(summary_from_trace(&trace, warmup, m.end_ps), m.obs);
        let again = run(twice).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(&again.trace_digest, &o.trace_digest);
        prop_assert_eq!(&again.metrics, m);
    }
}
