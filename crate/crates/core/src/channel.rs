// SPDX-License-Identifier: Apache-2.0

//! Per-accelerator channel state: request buffer, task buffers, grant
//! buffer, output and chaining buffers, plus the accelerator's delay model.

use std::collections::VecDeque;

use sha2::{Digest, Sha256};

use crate::codec::{Flit, HeadFields};
use crate::interface::RoundRobin;
use crate::kernel::{AsyncFifo, ClockDomain, Ps};

/// Cycles an accelerator spends computing, as a function of its input flit count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecModel {
    Const(u64),
    Affine { base: u64, per_flit: u64 },
}

impl ExecModel {
    pub fn cycles(&self, input_flits: usize) -> u64 {
        let c = match *self {
            ExecModel::Const(c) => c,
            ExecModel::Affine { base, per_flit } => base + per_flit * input_flits as u64,
        };
        c.max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HwaSpec {
    pub hwa_id: u8,
    pub name: String,
    pub exec: ExecModel,
    /// Flits per invocation including the head flit.
    pub input_flits: usize,
    pub output_flits: usize,
    pub clock: ClockDomain,
    /// Identifies the synthetic function computed; defaults to the HWA id.
    pub function: u32,
    pub chain_group: Option<usize>,
}

impl HwaSpec {
    pub fn new(hwa_id: u8, exec: ExecModel, input_flits: usize, output_flits: usize, period_ps: u64) -> Self {
        HwaSpec {
            hwa_id,
            name: format!("hwa{hwa_id}"),
            exec,
            input_flits,
            output_flits,
            clock: ClockDomain::with_period(period_ps),
            function: hwa_id as u32,
            chain_group: None,
        }
    }

    pub fn input_bytes(&self) -> usize {
        (self.input_flits.saturating_sub(1)) * 16
    }

    pub fn output_bytes(&self) -> usize {
        (self.output_flits.saturating_sub(1)) * 16
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainGroup {
    pub name: String,
    pub members: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ChainError {
    #[error("chain index {index} is outside group {group:?}")]
    NoSuchMember { group: String, index: u8 },
    #[error("HWA {0} is not a member of the chain group")]
    NotInGroup(u8),
    #[error("chain of {0} hops exceeds the 3-hop limit")]
    TooDeep(usize),
}

impl ChainGroup {
    pub fn member(&self, index: u8) -> Result<u8, ChainError> {
        self.members
            .get(index as usize)
            .copied()
            .ok_or_else(|| ChainError::NoSuchMember { group: self.name.clone(), index })
    }

    pub fn index_of(&self, hwa: u8) -> Result<u8, ChainError> {
        self.members.iter().position(|&m| m == hwa).map(|p| p as u8).ok_or(ChainError::NotInGroup(hwa))
    }

    /// Header chain fields (depth, index) for a request whose first stage is
    /// `hops[0]` and which then visits `hops[1..]` inside the FPGA.
    pub fn encode_route(&self, hops: &[u8]) -> Result<(u8, u8), ChainError> {
        let rest = hops.get(1..).unwrap_or_default();
        if rest.len() > 3 {
            return Err(ChainError::TooDeep(rest.len()));
        }
        let idx: Vec<u8> = rest.iter().map(|&h| self.index_of(h)).collect::<Result<_, _>>()?;
        Ok((rest.len() as u8, pack_chain_index(&idx)))
    }
}

/// Packs up to three 2-bit entries, front entry in the top bits.
pub fn pack_chain_index(entries: &[u8]) -> u8 {
    assert!(entries.len() <= 3);
    entries.iter().enumerate().fold(0, |acc, (i, &e)| acc | ((e & 3) << (4 - 2 * i)))
}

pub fn unpack_chain_index(index: u8, depth: u8) -> Vec<u8> {
    (0..depth.min(3)).map(|i| (index >> (4 - 2 * i)) & 3).collect()
}

pub fn chain_front(index: u8) -> u8 {
    (index >> 4) & 3
}

pub fn chain_shift(index: u8) -> u8 {
    (index << 2) & 0x3f
}

/// Deterministic stand-in for an accelerator's computation.
pub fn synthetic_result(function: u32, input: &[u8], out_bytes: usize) -> Vec<u8> {
    let mut seed = Sha256::new();
    seed.update(function.to_le_bytes());
    seed.update((input.len() as u64).to_le_bytes());
    seed.update(input);
    let seed = seed.finalize();
    let mut out = Vec::with_capacity(out_bytes);
    let mut counter = 0u64;
    while out.len() < out_bytes {
        let block = Sha256::new().chain_update(seed).chain_update(counter.to_le_bytes()).finalize();
        let take = (out_bytes - out.len()).min(block.len());
        out.extend_from_slice(&block[..take]);
        counter += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TbState {
    Free,
    Granted,
    Filling,
    Ready,
    Running,
}

/// Per-invocation timestamps at one accelerator.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HopTimes {
    pub hwa_id: u8,
    pub select: Ps,
    pub hwac_start: Ps,
    pub exec_start: Ps,
    pub pg_start: Ps,
    pub pg_done: Ps,
    /// When the result became readable downstream (sender or next chain stage).
    pub out_visible: Ps,
    pub exec_ps: Ps,
    pub input_flits: usize,
    pub output_flits: usize,
}

/// Everything the FPGA learns about one task, request to last result flit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskTimes {
    pub request_rx: Ps,
    pub request_visible: Ps,
    pub granted: Ps,
    pub tb: u8,
    pub payload_head: Ps,
    pub tb_ready: Ps,
    pub hops: Vec<HopTimes>,
    pub ps_select: Ps,
    pub ps_done: Ps,
}

#[derive(Debug, Clone, Default)]
pub struct Task {
    pub id: u64,
    pub request: HeadFields,
    pub data: Vec<u8>,
    pub flits: usize,
    pub times: TaskTimes,
}

#[derive(Debug, Clone)]
pub struct TaskBuffer {
    pub state: TbState,
    /// Earliest interface time the LGC may regrant this buffer.
    pub free_visible_at: Ps,
    /// Earliest time (in the HWA domain) the task arbiter may select it.
    pub ready_at: Ps,
    pub task: Option<Task>,
}

impl TaskBuffer {
    fn new() -> Self {
        TaskBuffer { state: TbState::Free, free_visible_at: 0, ready_at: 0, task: None }
    }
}

#[derive(Debug, Clone)]
pub struct QueuedRequest {
    pub header: HeadFields,
    pub visible_at: Ps,
    pub times: TaskTimes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmdKind {
    Grant,
    Notify,
}

#[derive(Debug, Clone)]
pub struct QueuedCommand {
    pub flit: Flit,
    pub kind: CmdKind,
    pub visible_at: Ps,
    /// Task this grant or notify belongs to: (source_id, start_address).
    pub key: (u8, u32),
}

/// A finished result waiting for the packet sender.
#[derive(Debug, Clone)]
pub struct ResultPacket {
    pub flits: Vec<Flit>,
    pub priority: u8,
    pub task: Task,
}

#[derive(Debug, Clone)]
pub struct ChainEntry {
    /// Group member index of the stage that must consume this entry.
    pub next_index: u8,
    pub group: usize,
    pub header: HeadFields,
    pub data: Vec<u8>,
    pub flits: usize,
    pub written_at: Ps,
    /// Where the data sits when buffering goes through the shared cache.
    pub addr: u64,
    pub task: Task,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Hwac,
    Exec,
    Pg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JobSource {
    TaskBuffer(usize),
    Chain,
}

/// The invocation currently occupying the channel datapath.
#[derive(Debug, Clone)]
pub struct Job {
    pub source: JobSource,
    pub header: HeadFields,
    pub input: Vec<u8>,
    pub input_flits: usize,
    pub stage: Stage,
    pub stage_end: Ps,
    pub result: Vec<u8>,
    pub hop: HopTimes,
    pub task: Task,
    pub stalled_since: Option<Ps>,
    /// Cache address of the result, in shared-cache mode.
    pub out_addr: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub requests: u64,
    pub grants: u64,
    pub bypass_grants: u64,
    pub invocations: u64,
    pub tasks_started: u64,
    pub notifies: u64,
    pub tb_flits_in: u64,
    pub hwac_flits: u64,
    pub result_flits: u64,
    pub pob_flits: u64,
    pub chain_flits: u64,
    pub pg_stall_cycles: u64,
    pub max_outstanding_grants: u64,
}

#[derive(Debug, Clone)]
pub struct ChannelParams {
    pub num_tb: usize,
    pub rb_depth: usize,
    pub lgb_depth: usize,
    pub pob_depth: usize,
    pub cb_depth: usize,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams { num_tb: 2, rb_depth: 8, lgb_depth: 4, pob_depth: 2, cb_depth: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct Channel {
    pub spec: HwaSpec,
    pub rb: VecDeque<QueuedRequest>,
    pub rb_depth: usize,
    pub tbs: Vec<TaskBuffer>,
    pub cmdq: VecDeque<QueuedCommand>,
    pub lgb_depth: usize,
    pub pob: AsyncFifo<ResultPacket>,
    pub cb: VecDeque<ChainEntry>,
    pub cb_depth: usize,
    pub ta_rr: RoundRobin,
    pub cc_rr: RoundRobin,
    pub job: Option<Job>,
    pub lgc_last_grant: Option<Ps>,
    pub stats: ChannelStats,
}

impl Channel {
    pub fn new(spec: HwaSpec, params: &ChannelParams, iface: ClockDomain, channels: usize) -> Self {
        let hwa_clock = spec.clock;
        Channel {
            spec,
            rb: VecDeque::new(),
            rb_depth: params.rb_depth,
            tbs: (0..params.num_tb).map(|_| TaskBuffer::new()).collect(),
            cmdq: VecDeque::new(),
            lgb_depth: params.lgb_depth,
            pob: AsyncFifo::new(params.pob_depth, hwa_clock, iface),
            cb: VecDeque::new(),
            cb_depth: params.cb_depth,
            ta_rr: RoundRobin::new(params.num_tb),
            cc_rr: RoundRobin::new(channels),
            job: None,
            lgc_last_grant: None,
            stats: ChannelStats::default(),
        }
    }

    pub fn clock(&self) -> ClockDomain {
        self.spec.clock
    }

    /// A task buffer the LGC may hand out at interface time `now`.
    pub fn free_tb(&self, now: Ps) -> Option<usize> {
        self.tbs.iter().position(|t| t.state == TbState::Free && t.free_visible_at <= now)
    }

    pub fn grants_queued(&self) -> usize {
        self.cmdq.iter().filter(|c| c.kind == CmdKind::Grant).count()
    }

    pub fn lgb_has_space(&self) -> bool {
        self.grants_queued() < self.lgb_depth
    }

    pub fn outstanding_grants(&self) -> usize {
        self.tbs.iter().filter(|t| t.state != TbState::Free).count()
    }

    /// Round-robin pick among task buffers holding a complete task visible at `now`.
    pub fn ta_select(&mut self, now: Ps) -> Option<usize> {
        let tbs = &self.tbs;
        self.ta_rr.pick(|i| tbs[i].state == TbState::Ready && tbs[i].ready_at <= now)
    }

    /// Task currently holding any resource of this channel.
    pub fn holds_task(&self) -> bool {
        self.job.is_some() || self.tbs.iter().any(|t| t.state != TbState::Free) || !self.cb.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_index_shift_example() {
        // depth 2 with entries [1, 2]: front pops to 1, remaining [2].
        let idx = pack_chain_index(&[1, 2]);
        assert_eq!(chain_front(idx), 1);
        let shifted = chain_shift(idx);
        assert_eq!(unpack_chain_index(shifted, 1), vec![2]);
        assert_eq!(shifted, pack_chain_index(&[2]));
    }

    #[test]
    fn chain_index_bits_sit_front_first() {
        assert_eq!(pack_chain_index(&[3]), 0b11_0000);
        assert_eq!(pack_chain_index(&[1, 2, 3]), 0b01_10_11);
        assert_eq!(unpack_chain_index(0b01_10_11, 3), vec![1, 2, 3]);
    }

    #[test]
    fn group_lookup_errors() {
        let g = ChainGroup { name: "jpeg".into(), members: vec![2, 7, 9, 11] };
        assert_eq!(g.member(1), Ok(7));
        assert!(matches!(g.member(3), Ok(11)));
        let g3 = ChainGroup { name: "short".into(), members: vec![2, 7, 9] };
        assert!(matches!(g3.member(3), Err(ChainError::NoSuchMember { .. })));
        assert_eq!(g.encode_route(&[2, 7, 9]).unwrap(), (2, pack_chain_index(&[1, 2])));
        assert_eq!(g.encode_route(&[2]).unwrap(), (0, 0));
        assert!(g.encode_route(&[2, 5]).is_err());
    }

    #[test]
    fn exec_model_floor_is_one() {
        assert_eq!(ExecModel::Const(0).cycles(5), 1);
        assert_eq!(ExecModel::Affine { base: 10, per_flit: 2 }.cycles(3), 16);
    }

    #[test]
    fn synthetic_result_is_deterministic_and_input_sensitive() {
        let a = synthetic_result(1, b"abc", 100);
        assert_eq!(a.len(), 100);
        assert_eq!(a, synthetic_result(1, b"abc", 100));
        assert_ne!(a, synthetic_result(2, b"abc", 100));
        assert_ne!(a, synthetic_result(1, b"abd", 100));
        assert_eq!(&synthetic_result(1, b"abc", 40)[..], &a[..40]);
    }
}
