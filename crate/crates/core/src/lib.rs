//! Userspace NAT/NAPT engine.
//!
//! The pieces mirror a classic NAT gateway: a connection tracer
//! ([`conntrack`]), a rule finder ([`rules`]), an in-place tuple rewriter
//! ([`packet`]) and an IP/port pool ([`pool`]), composed per packet by
//! [`datapath`] and fed by the pcap and synthetic sources in [`traffic`].

pub mod checksum;
pub mod conntrack;
pub mod datapath;
pub mod hash;
pub mod packet;
pub mod pool;
pub mod rules;
pub mod traffic;

pub use conntrack::{
    ConnDirection, ConnRecord, ConnTable, CtConfig, CtError, CtStats, Insertion, RecordData,
    Timeouts,
};
pub use datapath::{
    affinity_key, dispatch, process_packet, run_pipeline, Direction, Ingress, NatContext, NullSink,
    PacketSink, PipelineConfig, PipelineError, PipelineStats, Policy, Verdict, WorkerStats,
};
pub use packet::{FiveTuple, PacketError, PacketView, ParseMode, Protocol, Side};
pub use pool::{AllocPolicy, Lease, NatPool, PoolConfig, PoolError, PoolOccupancy};
pub use rules::{
    linear_lookup, NatRule, NatType, Probe, RewritePort, RuleError, RuleStore, RuleTableSet,
};
pub use traffic::{LinkType, Packet};
