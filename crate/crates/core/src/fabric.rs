// SPDX-License-Identifier: Apache-2.0

//! Common surface of the interconnects (mesh NoC and shared bus).

use crate::codec::{Flit, RouteInfo};
use crate::kernel::{ClockDomain, Full, Ps};

pub type EndpointId = usize;

/// Receivers at the edge of the fabric. A flit is only handed over when
/// `has_space` said yes in the same cycle.
pub trait Sinks {
    fn has_space(&self, ep: EndpointId) -> bool;
    fn deliver(&mut self, ep: EndpointId, flit: Flit, now: Ps);
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FabricStats {
    pub injected: u64,
    pub ejected: u64,
    pub dropped: u64,
    /// Router-to-router link traversals (mesh) or bus beats (bus).
    pub hops: u64,
    /// Cycles an output or the bus could not advance for lack of downstream space.
    pub stalls: u64,
}

pub trait Fabric {
    fn clock(&self) -> ClockDomain;
    fn endpoints(&self) -> &[RouteInfo];
    fn can_inject(&self, ep: EndpointId) -> bool;
    fn inject(&mut self, ep: EndpointId, flit: Flit, now: Ps) -> Result<(), Full<Flit>>;
    /// Advances one fabric clock cycle; returns how many flits moved.
    fn step(&mut self, now: Ps, sinks: &mut dyn Sinks) -> usize;
    fn in_flight(&self) -> usize;
    fn stats(&self) -> &FabricStats;
    /// Human-readable queue dump for deadlock diagnostics.
    fn describe(&self) -> String;

    fn endpoint_for(&self, dest: RouteInfo) -> Option<EndpointId> {
        self.endpoints().iter().position(|e| *e == dest)
    }
}

/// Plain bounded per-endpoint inboxes; handy in tests.
#[derive(Debug, Clone)]
pub struct VecSinks {
    pub received: Vec<Vec<Flit>>,
    pub capacity: usize,
}

impl VecSinks {
    pub fn new(endpoints: usize, capacity: usize) -> Self {
        VecSinks { received: vec![Vec::new(); endpoints], capacity }
    }
}

impl Sinks for VecSinks {
    fn has_space(&self, ep: EndpointId) -> bool {
        self.received[ep].len() < self.capacity
    }

    fn deliver(&mut self, ep: EndpointId, flit: Flit, _now: Ps) {
        self.received[ep].push(flit);
    }
}
