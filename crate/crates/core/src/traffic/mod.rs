//! Packet sources and sinks: classic pcap files and a seeded synthetic
//! traffic generator.

pub mod pcap;
pub mod synth;

use std::time::Duration;

use crate::packet::ParseMode;

/// Captured packet with its timestamp (time since the Unix epoch, or since
/// the start of a synthetic trace).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub timestamp: Duration,
    pub data: Vec<u8>,
    /// Length on the wire; at least `data.len()`.
    pub orig_len: u32,
}

impl Packet {
    pub fn new(timestamp: Duration, data: Vec<u8>) -> Self {
        let orig_len = data.len() as u32;
        Packet {
            timestamp,
            data,
            orig_len,
        }
    }
}

/// pcap link-layer header type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LinkType(pub u32);

impl LinkType {
    pub const ETHERNET: LinkType = LinkType(1);
    /// LINKTYPE_RAW: raw IPv4 or IPv6.
    pub const RAW: LinkType = LinkType(101);
    pub const IPV4: LinkType = LinkType(228);

    pub fn parse_mode(self) -> Option<ParseMode> {
        match self {
            LinkType::ETHERNET => Some(ParseMode::Ethernet),
            LinkType::RAW | LinkType::IPV4 => Some(ParseMode::Ipv4),
            _ => None,
        }
    }
}

impl std::fmt::Display for LinkType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
