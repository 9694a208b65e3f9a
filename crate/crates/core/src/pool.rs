//! Public endpoint pool for port-allocating SNAT.
//!
//! Every (ip, port, proto) triple owns one atomic slot holding the id of the
//! lease that currently holds it, or 0 when free. Allocation claims a slot
//! with a single compare-and-swap, so concurrent callers never block each
//! other and never receive the same triple.

use std::net::Ipv4Addr;
use std::ops::RangeInclusive;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use serde::Serialize;
use thiserror::Error;

use crate::hash::mix64;
use crate::packet::Protocol;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PoolError {
    #[error("no free {0} endpoint left in the pool")]
    PoolExhausted(Protocol),
    #[error("lease {0} was already released")]
    DoubleRelease(u64),
    #[error("address {0} is not part of the pool")]
    UnknownAddress(Ipv4Addr),
    #[error("invalid pool configuration: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolConfig {
    pub public_ips: Vec<Ipv4Addr>,
    pub port_range: RangeInclusive<u16>,
}

impl PoolConfig {
    pub const DEFAULT_PORTS: RangeInclusive<u16> = 1024..=65535;

    pub fn new(public_ips: Vec<Ipv4Addr>) -> Self {
        PoolConfig {
            public_ips,
            port_range: Self::DEFAULT_PORTS,
        }
    }

    pub fn with_ports(mut self, ports: RangeInclusive<u16>) -> Self {
        self.port_range = ports;
        self
    }
}

/// How a free triple is picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AllocPolicy {
    /// Round-robin over addresses, sequential over ports.
    #[default]
    RoundRobin,
    /// Start the search at a slot derived from the caller's flow hint, so a
    /// flow's endpoint does not depend on the order in which flows arrive
    /// (unless two flows prefer the same slot).
    FlowHash { seed: u64 },
}

/// Exclusive claim on one public (ip, port, proto) triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Lease {
    pub ip: Ipv4Addr,
    pub port: u16,
    pub proto: Protocol,
    pub id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PoolOccupancy {
    pub tcp_leased: usize,
    pub udp_leased: usize,
    /// Triples per protocol.
    pub capacity: usize,
}

struct ProtoSlots {
    // Index i maps to ip i % n_ips, port lo + i / n_ips.
    owners: Box<[AtomicU64]>,
    cursor: AtomicUsize,
    live: AtomicUsize,
}

impl ProtoSlots {
    fn new(n: usize) -> Self {
        ProtoSlots {
            owners: (0..n).map(|_| AtomicU64::new(0)).collect(),
            cursor: AtomicUsize::new(0),
            live: AtomicUsize::new(0),
        }
    }
}

pub struct NatPool {
    ips: Vec<Ipv4Addr>,
    port_lo: u16,
    n_ports: usize,
    policy: AllocPolicy,
    slots: [ProtoSlots; 2],
    next_id: AtomicU64,
}

impl std::fmt::Debug for NatPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NatPool")
            .field("ips", &self.ips)
            .field("ports", &(self.port_lo..=self.port_hi()))
            .field("policy", &self.policy)
            .field("occupancy", &self.occupancy())
            .finish()
    }
}

fn proto_index(p: Protocol) -> usize {
    match p {
        Protocol::Tcp => 0,
        Protocol::Udp => 1,
    }
}

impl NatPool {
    pub fn new(config: PoolConfig, policy: AllocPolicy) -> Result<Self, PoolError> {
        if config.public_ips.is_empty() {
            return Err(PoolError::InvalidConfig("no public addresses"));
        }
        if config.port_range.is_empty() {
            return Err(PoolError::InvalidConfig("empty port range"));
        }
        let mut ips = config.public_ips;
        let mut seen = std::collections::HashSet::new();
        ips.retain(|ip| seen.insert(*ip));
        let port_lo = *config.port_range.start();
        let n_ports = usize::from(*config.port_range.end() - port_lo) + 1;
        let total = ips.len() * n_ports;
        Ok(NatPool {
            ips,
            port_lo,
            n_ports,
            policy,
            slots: [ProtoSlots::new(total), ProtoSlots::new(total)],
            next_id: AtomicU64::new(1),
        })
    }

    pub fn addresses(&self) -> &[Ipv4Addr] {
        &self.ips
    }

    pub fn contains_address(&self, ip: Ipv4Addr) -> bool {
        self.ips.contains(&ip)
    }

    fn port_hi(&self) -> u16 {
        self.port_lo + (self.n_ports - 1) as u16
    }

    /// Triples available per protocol.
    pub fn capacity(&self) -> usize {
        self.ips.len() * self.n_ports
    }

    pub fn leased(&self, proto: Protocol) -> usize {
        self.slots[proto_index(proto)].live.load(Ordering::Relaxed)
    }

    pub fn occupancy(&self) -> PoolOccupancy {
        PoolOccupancy {
            tcp_leased: self.leased(Protocol::Tcp),
            udp_leased: self.leased(Protocol::Udp),
            capacity: self.capacity(),
        }
    }

    pub fn allocate(&self, proto: Protocol) -> Result<Lease, PoolError> {
        self.allocate_with(proto, None, None)
    }

    /// Allocates a triple, optionally restricted to one pool address and
    /// optionally steered by a flow hash (used by [`AllocPolicy::FlowHash`]).
    pub fn allocate_with(
        &self,
        proto: Protocol,
        ip: Option<Ipv4Addr>,
        flow_hint: Option<u64>,
    ) -> Result<Lease, PoolError> {
        let slots = &self.slots[proto_index(proto)];
        let n_ips = self.ips.len();
        // Candidate i of the search maps to slot base + i * stride.
        let (base, stride, count) = match ip {
            None => (0, 1, self.capacity()),
            Some(addr) => {
                let idx = self
                    .ips
                    .iter()
                    .position(|a| *a == addr)
                    .ok_or(PoolError::UnknownAddress(addr))?;
                (idx, n_ips, self.n_ports)
            }
        };
        let start = match (self.policy, flow_hint) {
            (AllocPolicy::FlowHash { seed }, Some(h)) => (mix64(h ^ seed) % count as u64) as usize,
            _ => slots.cursor.fetch_add(1, Ordering::Relaxed) % count,
        };
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        for k in 0..count {
            let i = (start + k) % count;
            let slot = base + i * stride;
            let owner = &slots.owners[slot];
            if owner.load(Ordering::Relaxed) == 0
                && owner
                    .compare_exchange(0, id, Ordering::AcqRel, Ordering::Relaxed)
                    .is_ok()
            {
                if k > 0
                    && !matches!(self.policy, AllocPolicy::FlowHash { .. } if flow_hint.is_some())
                {
                    // Skip past the held run so the next caller starts fresh.
                    slots.cursor.fetch_add(k, Ordering::Relaxed);
                }
                slots.live.fetch_add(1, Ordering::Relaxed);
                return Ok(Lease {
                    ip: self.ips[slot % n_ips],
                    port: self.port_lo + (slot / n_ips) as u16,
                    proto,
                    id,
                });
            }
        }
        Err(PoolError::PoolExhausted(proto))
    }

    /// Slot a flow hint would try first, for callers that want to check
    /// whether two flows compete for one endpoint.
    pub fn preferred_slot(&self, flow_hint: u64) -> Option<usize> {
        match self.policy {
            AllocPolicy::FlowHash { seed } => {
                Some((mix64(flow_hint ^ seed) % self.capacity() as u64) as usize)
            }
            AllocPolicy::RoundRobin => None,
        }
    }

    pub fn release(&self, lease: &Lease) -> Result<(), PoolError> {
        let idx = self
            .ips
            .iter()
            .position(|a| *a == lease.ip)
            .ok_or(PoolError::UnknownAddress(lease.ip))?;
        if !(self.port_lo..=self.port_hi()).contains(&lease.port) {
            return Err(PoolError::DoubleRelease(lease.id));
        }
        let slot = usize::from(lease.port - self.port_lo) * self.ips.len() + idx;
        let slots = &self.slots[proto_index(lease.proto)];
        slots.owners[slot]
            .compare_exchange(lease.id, 0, Ordering::AcqRel, Ordering::Relaxed)
            .map_err(|_| PoolError::DoubleRelease(lease.id))?;
        slots.live.fetch_sub(1, Ordering::Relaxed);
        Ok(())
    }
}
