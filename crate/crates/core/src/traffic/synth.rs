//! Packet construction and the seeded synthetic traffic generator.

use std::collections::HashSet;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::time::Duration;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::Packet;
use crate::checksum::{ipv4_header_checksum, tcp_checksum, udp_checksum};
use crate::packet::{FiveTuple, PacketView, ParseMode, Protocol};
use crate::rules::prefix_mask;

/// Bytes at the start of every generated payload: flow index and per-flow
/// sequence number, both big-endian u32.
pub const TAG_LEN: usize = 8;

/// Header fields for [`build_packet`].
#[derive(Debug, Clone, Copy)]
pub struct PacketSpec<'a> {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: Protocol,
    pub payload: &'a [u8],
    pub ttl: u8,
    pub ident: u16,
    pub tcp_seq: u32,
    pub tcp_ack: u32,
    pub tcp_flags: u8,
}

impl Default for PacketSpec<'_> {
    fn default() -> Self {
        PacketSpec {
            src_ip: Ipv4Addr::new(192, 168, 88, 32),
            dst_ip: Ipv4Addr::new(198, 51, 100, 9),
            src_port: 5000,
            dst_port: 80,
            proto: Protocol::Tcp,
            payload: &[],
            ttl: 64,
            ident: 0,
            tcp_seq: 0,
            tcp_ack: 0,
            tcp_flags: 0x18,
        }
    }
}

impl PacketSpec<'_> {
    pub fn tuple(&self) -> FiveTuple {
        FiveTuple::new(
            self.src_ip,
            self.src_port,
            self.dst_ip,
            self.dst_port,
            self.proto,
        )
    }
}

/// Builds a raw IPv4 packet (no options) with valid checksums.
pub fn build_packet(spec: &PacketSpec<'_>) -> Vec<u8> {
    let l4_len = match spec.proto {
        Protocol::Tcp => 20,
        Protocol::Udp => 8,
    } + spec.payload.len();
    let total = 20 + l4_len;
    let mut b = vec![0u8; total];
    b[0] = 0x45;
    b[2..4].copy_from_slice(&(total as u16).to_be_bytes());
    b[4..6].copy_from_slice(&spec.ident.to_be_bytes());
    b[6..8].copy_from_slice(&0x4000u16.to_be_bytes());
    b[8] = spec.ttl;
    b[9] = spec.proto.ip_proto();
    b[12..16].copy_from_slice(&spec.src_ip.octets());
    b[16..20].copy_from_slice(&spec.dst_ip.octets());
    let ip_csum = ipv4_header_checksum(&b[..20]);
    b[10..12].copy_from_slice(&ip_csum.to_be_bytes());

    let seg = &mut b[20..];
    seg[0..2].copy_from_slice(&spec.src_port.to_be_bytes());
    seg[2..4].copy_from_slice(&spec.dst_port.to_be_bytes());
    match spec.proto {
        Protocol::Tcp => {
            seg[4..8].copy_from_slice(&spec.tcp_seq.to_be_bytes());
            seg[8..12].copy_from_slice(&spec.tcp_ack.to_be_bytes());
            seg[12] = 5 << 4;
            seg[13] = spec.tcp_flags;
            seg[14..16].copy_from_slice(&65535u16.to_be_bytes());
            seg[20..].copy_from_slice(spec.payload);
            let c = tcp_checksum(spec.src_ip, spec.dst_ip, seg);
            seg[16..18].copy_from_slice(&c.to_be_bytes());
        }
        Protocol::Udp => {
            seg[4..6].copy_from_slice(&(l4_len as u16).to_be_bytes());
            seg[8..].copy_from_slice(spec.payload);
            let c = udp_checksum(spec.src_ip, spec.dst_ip, seg);
            seg[6..8].copy_from_slice(&c.to_be_bytes());
        }
    }
    b
}

/// An IPv4 prefix such as `192.168.0.0/16`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Ipv4Net {
    pub addr: Ipv4Addr,
    pub prefix: u8,
}

impl Ipv4Net {
    pub fn new(addr: Ipv4Addr, prefix: u8) -> Self {
        let prefix = prefix.min(32);
        Ipv4Net {
            addr: Ipv4Addr::from(u32::from(addr) & prefix_mask(prefix)),
            prefix,
        }
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        u32::from(ip) & prefix_mask(self.prefix) == u32::from(self.addr)
    }

    fn random_host(&self, rng: &mut impl Rng) -> Ipv4Addr {
        let host_bits = !prefix_mask(self.prefix);
        Ipv4Addr::from(u32::from(self.addr) | (rng.random::<u32>() & host_bits))
    }
}

impl fmt::Display for Ipv4Net {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.prefix)
    }
}

impl FromStr for Ipv4Net {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, p) = s
            .split_once('/')
            .ok_or_else(|| format!("missing prefix length in {s:?}"))?;
        let addr: Ipv4Addr = a.parse().map_err(|_| format!("bad address {a:?}"))?;
        let prefix: u8 = p
            .parse()
            .ok()
            .filter(|p| *p <= 32)
            .ok_or_else(|| format!("bad prefix length {p:?}"))?;
        Ok(Ipv4Net::new(addr, prefix))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficSpec {
    pub n_flows: usize,
    pub packets_per_flow: usize,
    pub private_subnet: Ipv4Net,
    pub remote_subnet: Ipv4Net,
    /// Fraction of flows that are TCP, in `[0, 1]`.
    pub tcp_fraction: f64,
    /// IPv4 total length of every packet.
    pub packet_size: usize,
    pub seed: u64,
}

impl Default for TrafficSpec {
    fn default() -> Self {
        TrafficSpec {
            n_flows: 100,
            packets_per_flow: 10,
            private_subnet: Ipv4Net::new(Ipv4Addr::new(192, 168, 0, 0), 16),
            remote_subnet: Ipv4Net::new(Ipv4Addr::new(198, 51, 100, 0), 24),
            tcp_fraction: 0.5,
            packet_size: 64,
            seed: 1,
        }
    }
}

pub const MIN_PACKET_SIZE: usize = 64;
pub const MAX_PACKET_SIZE: usize = 9000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("packet size {0} outside {MIN_PACKET_SIZE}..={MAX_PACKET_SIZE}")]
    PacketSize(usize),
    #[error("tcp fraction {0} outside [0, 1]")]
    TcpFraction(f64),
    #[error("cannot draw {0} distinct flows from the configured subnets")]
    TooManyFlows(usize),
}

impl TrafficSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if !(MIN_PACKET_SIZE..=MAX_PACKET_SIZE).contains(&self.packet_size) {
            return Err(SpecError::PacketSize(self.packet_size));
        }
        if !(0.0..=1.0).contains(&self.tcp_fraction) {
            return Err(SpecError::TcpFraction(self.tcp_fraction));
        }
        // Source ports alone give 64512 choices per private host; only tiny
        // subnets can run out, and they run out long before this bound.
        let hosts = |n: &Ipv4Net| 1u128 << (32 - u32::from(n.prefix));
        let space = hosts(&self.private_subnet) * hosts(&self.remote_subnet) * 64512;
        if self.n_flows as u128 * 2 > space {
            return Err(SpecError::TooManyFlows(self.n_flows));
        }
        Ok(())
    }

    pub fn total_packets(&self) -> usize {
        self.n_flows * self.packets_per_flow
    }
}

const SERVICE_PORTS: [u16; 6] = [80, 443, 53, 123, 8080, 5201];

/// Iterator over the packets described by a [`TrafficSpec`].
///
/// Flows are drawn first, then all packets are emitted in a seeded shuffle;
/// every flow's packets carry sequence numbers 0, 1, 2, ... in emission
/// order. Timestamps advance by one microsecond per packet.
pub struct Generator {
    flows: Vec<FiveTuple>,
    order: Vec<u32>,
    next_seq: Vec<u32>,
    pos: usize,
    packet_size: usize,
}

impl Generator {
    pub fn flows(&self) -> &[FiveTuple] {
        &self.flows
    }
}

pub fn generate(spec: &TrafficSpec) -> Result<Generator, SpecError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(spec.n_flows);
    let mut flows = Vec::with_capacity(spec.n_flows);
    while flows.len() < spec.n_flows {
        let proto = if rng.random::<f64>() < spec.tcp_fraction {
            Protocol::Tcp
        } else {
            Protocol::Udp
        };
        let t = FiveTuple::new(
            spec.private_subnet.random_host(&mut rng),
            rng.random_range(1024..=65535),
            spec.remote_subnet.random_host(&mut rng),
            *SERVICE_PORTS.choose(&mut rng).unwrap_or(&80),
            proto,
        );
        if seen.insert(t) {
            flows.push(t);
        }
    }
    let mut order: Vec<u32> = (0..spec.n_flows as u32)
        .flat_map(|f| std::iter::repeat_n(f, spec.packets_per_flow))
        .collect();
    order.shuffle(&mut rng);
    Ok(Generator {
        next_seq: vec![0; flows.len()],
        flows,
        order,
        pos: 0,
        packet_size: spec.packet_size,
    })
}

impl Iterator for Generator {
    type Item = Packet;

    fn next(&mut self) -> Option<Packet> {
        let flow = *self.order.get(self.pos)?;
        let t = self.flows[flow as usize];
        let seq = self.next_seq[flow as usize];
        self.next_seq[flow as usize] += 1;

        let header = 20 + if t.proto == Protocol::Tcp { 20 } else { 8 };
        let mut payload = vec![0u8; self.packet_size - header];
        payload[..4].copy_from_slice(&flow.to_be_bytes());
        payload[4..8].copy_from_slice(&seq.to_be_bytes());
        let data = build_packet(&PacketSpec {
            src_ip: t.src_ip,
            dst_ip: t.dst_ip,
            src_port: t.src_port,
            dst_port: t.dst_port,
            proto: t.proto,
            payload: &payload,
            ident: seq as u16,
            tcp_seq: seq.wrapping_mul(payload.len() as u32),
            ..PacketSpec::default()
        });
        let ts = Duration::from_micros(self.pos as u64);
        self.pos += 1;
        Some(Packet::new(ts, data))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.order.len() - self.pos;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Generator {}

/// Reads the (flow, sequence) tag of a generated packet.
pub fn sequence_tag(data: &[u8], mode: ParseMode) -> Option<(u32, u32)> {
    let view = PacketView::parse(data, mode).ok()?;
    let off = view.l4_offset()
        + match view.protocol()? {
            Protocol::Tcp => 20,
            Protocol::Udp => 8,
        };
    let tag = data.get(off..off + TAG_LEN)?;
    Some((
        u32::from_be_bytes([tag[0], tag[1], tag[2], tag[3]]),
        u32::from_be_bytes([tag[4], tag[5], tag[6], tag[7]]),
    ))
}
