// SPDX-License-Identifier: Apache-2.0

//! Receiver partitioning and sender arbitration for the FPGA interface.

use std::fmt;
use std::str::FromStr;

/// How inbound packets are split across packet receivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrStrategy {
    Centralized,
    Distributed { channels_per_pr: usize },
}

impl PrStrategy {
    pub fn num_prs(&self, channels: usize) -> usize {
        match *self {
            PrStrategy::Centralized => 1,
            PrStrategy::Distributed { channels_per_pr } => channels.div_ceil(channels_per_pr).max(1),
        }
    }

    /// Receiver that owns channel `ch`.
    pub fn owner(&self, ch: usize) -> usize {
        match *self {
            PrStrategy::Centralized => 0,
            PrStrategy::Distributed { channels_per_pr } => ch / channels_per_pr,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<(), String> {
        match *self {
            PrStrategy::Centralized => Ok(()),
            PrStrategy::Distributed { channels_per_pr } => {
                if channels_per_pr == 0 || channels % channels_per_pr != 0 {
                    Err(format!("pr_channels = {channels_per_pr} does not divide {channels} channels"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl fmt::Display for PrStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrStrategy::Centralized => f.write_str("centralized"),
            PrStrategy::Distributed { channels_per_pr } => write!(f, "{channels_per_pr}"),
        }
    }
}

impl FromStr for PrStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "centralized" => Ok(PrStrategy::Centralized),
            t => t
                .trim_start_matches("PR")
                .parse()
                .map(|channels_per_pr| PrStrategy::Distributed { channels_per_pr })
                .map_err(|_| format!("bad PR strategy {s:?}")),
        }
    }
}

/// How the packet sender arbitrates outbound packets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsStrategy {
    Global,
    Hierarchical { channels_per_group: usize },
}

impl PsStrategy {
    pub fn validate(&self, channels: usize) -> Result<(), String> {
        match *self {
            PsStrategy::Global => Ok(()),
            PsStrategy::Hierarchical { channels_per_group } => {
                if channels_per_group == 0 || channels % channels_per_group != 0 {
                    Err(format!("ps_group = {channels_per_group} does not divide {channels} channels"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl fmt::Display for PsStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PsStrategy::Global => f.write_str("global"),
            PsStrategy::Hierarchical { channels_per_group } => write!(f, "{channels_per_group}"),
        }
    }
}

impl FromStr for PsStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "global" => Ok(PsStrategy::Global),
            t => t
                .parse()
                .map(|channels_per_group| PsStrategy::Hierarchical { channels_per_group })
                .map_err(|_| format!("bad PS strategy {s:?}")),
        }
    }
}

/// Round-robin pointer over `n` requesters. The pointer moves past each winner.
#[derive(Debug, Clone)]
pub struct RoundRobin {
    n: usize,
    next: usize,
}

impl RoundRobin {
    pub fn new(n: usize) -> Self {
        RoundRobin { n: n.max(1), next: 0 }
    }

    pub fn pointer(&self) -> usize {
        self.next
    }

    /// First pending requester at or after the pointer.
    pub fn peek(&self, pending: impl Fn(usize) -> bool) -> Option<usize> {
        (0..self.n).map(|k| (self.next + k) % self.n).find(|&i| pending(i))
    }

    pub fn grant(&mut self, winner: usize) {
        self.next = (winner + 1) % self.n;
    }

    pub fn pick(&mut self, pending: impl Fn(usize) -> bool) -> Option<usize> {
        let w = self.peek(pending)?;
        self.grant(w);
        Some(w)
    }

    /// Highest priority wins; ties resolved in round-robin order.
    pub fn peek_priority(&self, prio: impl Fn(usize) -> Option<u8>) -> Option<usize> {
        let best = (0..self.n).filter_map(&prio).max()?;
        self.peek(|i| prio(i) == Some(best))
    }

    pub fn pick_priority(&mut self, prio: impl Fn(usize) -> Option<u8>) -> Option<usize> {
        let w = self.peek_priority(prio)?;
        self.grant(w);
        Some(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutClass {
    Command,
    Result,
}

/// Sender arbitration: commands first (plain RR), then results (priority RR).
#[derive(Debug, Clone)]
pub struct PsArbiter {
    strategy: PsStrategy,
    channels: usize,
    cmd_top: RoundRobin,
    res_top: RoundRobin,
    cmd_groups: Vec<RoundRobin>,
    res_groups: Vec<RoundRobin>,
}

impl PsArbiter {
    pub fn new(strategy: PsStrategy, channels: usize) -> Self {
        let (groups, size) = match strategy {
            PsStrategy::Global => (1, channels),
            PsStrategy::Hierarchical { channels_per_group } => (channels.div_ceil(channels_per_group), channels_per_group),
        };
        let top = match strategy {
            PsStrategy::Global => channels,
            PsStrategy::Hierarchical { .. } => groups,
        };
        PsArbiter {
            strategy,
            channels,
            cmd_top: RoundRobin::new(top),
            res_top: RoundRobin::new(top),
            cmd_groups: vec![RoundRobin::new(size); groups],
            res_groups: vec![RoundRobin::new(size); groups],
        }
    }

    pub fn strategy(&self) -> PsStrategy {
        self.strategy
    }

    /// `cmd[i]`: channel i has a command ready. `res[i]`: priority of its ready result, if any.
    pub fn select(&mut self, cmd: &[bool], res: &[Option<u8>]) -> Option<(usize, OutClass)> {
        debug_assert_eq!(cmd.len(), self.channels);
        debug_assert_eq!(res.len(), self.channels);
        match self.strategy {
            PsStrategy::Global => {
                if let Some(c) = self.cmd_top.pick(|i| cmd[i]) {
                    return Some((c, OutClass::Command));
                }
                self.res_top.pick_priority(|i| res[i]).map(|c| (c, OutClass::Result))
            }
            PsStrategy::Hierarchical { channels_per_group: g } => {
                let member = |grp: usize, k: usize| grp * g + k;
                let in_range = |grp: usize, k: usize| member(grp, k) < self.channels;
                let cmd_groups = &self.cmd_groups;
                if let Some(grp) = self
                    .cmd_top
                    .peek(|grp| cmd_groups[grp].peek(|k| in_range(grp, k) && cmd[member(grp, k)]).is_some())
                {
                    self.cmd_top.grant(grp);
                    let k = self.cmd_groups[grp].pick(|k| in_range(grp, k) && cmd[member(grp, k)]).expect("group has a command");
                    return Some((member(grp, k), OutClass::Command));
                }
                let res_groups = &self.res_groups;
                let group_best = |grp: usize| {
                    res_groups[grp]
                        .peek_priority(|k| if in_range(grp, k) { res[member(grp, k)] } else { None })
                        .map(|k| res[member(grp, k)].expect("pending"))
                };
                let grp = self.res_top.pick_priority(group_best)?;
                let k = self.res_groups[grp]
                    .pick_priority(|k| if in_range(grp, k) { res[member(grp, k)] } else { None })
                    .expect("group has a result");
                Some((member(grp, k), OutClass::Result))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn command_beats_result() {
        let mut a = PsArbiter::new(PsStrategy::Global, 8);
        let mut cmd = vec![false; 8];
        let mut res = vec![None; 8];
        cmd[3] = true;
        res[1] = Some(0);
        assert_eq!(a.select(&cmd, &res), Some((3, OutClass::Command)));
    }

    #[test]
    fn higher_priority_result_wins() {
        let mut a = PsArbiter::new(PsStrategy::Global, 8);
        let cmd = vec![false; 8];
        let mut res = vec![None; 8];
        res[0] = Some(2);
        res[5] = Some(1);
        assert_eq!(a.select(&cmd, &res), Some((0, OutClass::Result)));
        // Pointer now past 0, but 0 still has the higher priority.
        assert_eq!(a.select(&cmd, &res), Some((0, OutClass::Result)));
    }

    #[test]
    fn equal_priority_round_robin_matches_modular_oracle() {
        for strategy in [PsStrategy::Global, PsStrategy::Hierarchical { channels_per_group: 2 }] {
            let mut a = PsArbiter::new(strategy, 4);
            let cmd = vec![false; 4];
            let res = vec![Some(0); 4];
            for cycle in 0..100 {
                let (ch, _) = a.select(&cmd, &res).unwrap();
                let expect = match strategy {
                    PsStrategy::Global => cycle % 4,
                    // Groups alternate; members alternate within each group.
                    _ => (cycle % 2) * 2 + (cycle / 2) % 2,
                };
                assert_eq!(ch, expect, "{strategy} cycle {cycle}");
            }
        }
    }

    #[test]
    fn zero_priorities_reduce_to_round_robin() {
        let mut a = PsArbiter::new(PsStrategy::Global, 3);
        let res = vec![Some(0), None, Some(0)];
        let picks: Vec<_> = (0..4).map(|_| a.select(&[false; 3], &res).unwrap().0).collect();
        assert_eq!(picks, vec![0, 2, 0, 2]);
    }

    #[test]
    fn strategies_parse_and_partition() {
        assert_eq!("centralized".parse::<PrStrategy>().unwrap(), PrStrategy::Centralized);
        let pr: PrStrategy = "4".parse().unwrap();
        assert_eq!(pr.num_prs(16), 4);
        assert_eq!(pr.owner(7), 1);
        assert!(pr.validate(16).is_ok());
        assert!(PrStrategy::Distributed { channels_per_pr: 3 }.validate(8).is_err());
        assert_eq!("global".parse::<PsStrategy>().unwrap(), PsStrategy::Global);
    }

    proptest! {
        #[test]
        fn grant_only_to_pending(
            pend in proptest::collection::vec((any::<bool>(), proptest::option::of(0u8..4)), 8),
            hier in any::<bool>(),
        ) {
            let s = if hier { PsStrategy::Hierarchical { channels_per_group: 4 } } else { PsStrategy::Global };
            let mut a = PsArbiter::new(s, 8);
            let cmd: Vec<bool> = pend.iter().map(|p| p.0).collect();
            let res: Vec<Option<u8>> = pend.iter().map(|p| p.1).collect();
            match a.select(&cmd, &res) {
                None => prop_assert!(cmd.iter().all(|c| !c) && res.iter().all(Option::is_none)),
                Some((ch, OutClass::Command)) => prop_assert!(cmd[ch]),
                Some((ch, OutClass::Result)) => {
                    prop_assert!(cmd.iter().all(|c| !c));
                    prop_assert_eq!(res[ch], res.iter().flatten().max().copied());
                }
            }
        }

        #[test]
        fn continuously_pending_channel_is_served(
            seed in any::<u64>(), watch in 0usize..8, hier in any::<bool>(),
        ) {
            let s = if hier { PsStrategy::Hierarchical { channels_per_group: 4 } } else { PsStrategy::Global };
            let mut a = PsArbiter::new(s, 8);
            let mut x = seed;
            let mut waited = 0;
            for _ in 0..200 {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1);
                let res: Vec<Option<u8>> = (0..8).map(|i| (i == watch || (x >> (i + 20)) & 1 == 1).then_some(0)).collect();
                let (ch, _) = a.select(&[false; 8], &res).unwrap();
                if ch == watch { waited = 0; } else { waited += 1; }
                prop_assert!(waited < 8);
            }
        }
    }
}
