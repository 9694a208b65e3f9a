//! Parsed, mutable-in-place view of IPv4 TCP/UDP packets.
//!
//! A [`PacketView`] wraps the caller's buffer and only records offsets. All
//! header rewrites go straight into that buffer with incremental checksum
//! maintenance, so nothing on the NAT path ever copies packet bytes.

use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

use crate::checksum::{incr_csum_update, incr_csum_update32};

pub const IPV4_MIN_HEADER: usize = 20;
pub const TCP_MIN_HEADER: usize = 20;
pub const UDP_HEADER: usize = 8;
const ETHERNET_HEADER: usize = 14;
const VLAN_TAG: usize = 4;
const ETHERTYPE_IPV4: u16 = 0x0800;
const ETHERTYPE_VLAN: u16 = 0x8100;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("malformed packet: {0}")]
    Malformed(&'static str),
    #[error("contract violation: {0}")]
    ContractViolation(&'static str),
}

/// Where the IPv4 header starts in a buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParseMode {
    /// Buffer starts with the IPv4 header.
    Ipv4,
    /// Buffer starts with an Ethernet II header (optionally one 802.1Q tag).
    Ethernet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Protocol {
    Tcp,
    Udp,
}

impl Protocol {
    pub fn from_ip_proto(value: u8) -> Option<Self> {
        match value {
            6 => Some(Protocol::Tcp),
            17 => Some(Protocol::Udp),
            _ => None,
        }
    }

    pub fn ip_proto(self) -> u8 {
        match self {
            Protocol::Tcp => 6,
            Protocol::Udp => 17,
        }
    }

    fn csum_offset(self) -> usize {
        match self {
            Protocol::Tcp => 16,
            Protocol::Udp => 6,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "tcp",
            Protocol::Udp => "udp",
        })
    }
}

/// Addresses and ports in host byte order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FiveTuple {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub proto: Protocol,
}

impl FiveTuple {
    pub fn new(
        src_ip: Ipv4Addr,
        src_port: u16,
        dst_ip: Ipv4Addr,
        dst_port: u16,
        proto: Protocol,
    ) -> Self {
        FiveTuple {
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            proto,
        }
    }

    /// The same flow seen from the other end.
    pub fn reversed(&self) -> Self {
        FiveTuple {
            src_ip: self.dst_ip,
            dst_ip: self.src_ip,
            src_port: self.dst_port,
            dst_port: self.src_port,
            proto: self.proto,
        }
    }

    pub fn src(&self) -> (Ipv4Addr, u16) {
        (self.src_ip, self.src_port)
    }

    pub fn dst(&self) -> (Ipv4Addr, u16) {
        (self.dst_ip, self.dst_port)
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}:{} -> {}:{}",
            self.proto, self.src_ip, self.src_port, self.dst_ip, self.dst_port
        )
    }
}

/// Which address/port pair a rewrite touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Src,
    Dst,
}

/// Offsets into a packet buffer plus its L4 classification.
///
/// `B` is whatever owns or borrows the bytes; read-only parsing works on
/// `&[u8]`, rewriting needs `AsMut<[u8]>` (`&mut [u8]`, `Vec<u8>`, ...).
#[derive(Debug, Clone)]
pub struct PacketView<B> {
    buf: B,
    l3: usize,
    l4: usize,
    end: usize,
    proto: Option<Protocol>,
}

impl<B: AsRef<[u8]>> PacketView<B> {
    /// Parses `buf` without copying it.
    ///
    /// Non-IPv4 frames, non-TCP/UDP protocols and non-first fragments yield a
    /// view with `is_valid() == false`; only truncated or inconsistent
    /// headers are errors.
    pub fn parse(buf: B, mode: ParseMode) -> Result<Self, PacketError> {
        let bytes = buf.as_ref();
        if bytes.is_empty() {
            return Err(PacketError::Malformed("empty buffer"));
        }
        let l3 = match mode {
            ParseMode::Ipv4 => 0,
            ParseMode::Ethernet => {
                if bytes.len() < ETHERNET_HEADER {
                    return Err(PacketError::Malformed("truncated ethernet header"));
                }
                let mut ethertype = u16::from_be_bytes([bytes[12], bytes[13]]);
                let mut off = ETHERNET_HEADER;
                if ethertype == ETHERTYPE_VLAN {
                    if bytes.len() < ETHERNET_HEADER + VLAN_TAG {
                        return Err(PacketError::Malformed("truncated vlan tag"));
                    }
                    ethertype = u16::from_be_bytes([bytes[16], bytes[17]]);
                    off += VLAN_TAG;
                }
                if ethertype != ETHERTYPE_IPV4 {
                    return Ok(Self::other(buf, off, off));
                }
                off
            }
        };

        let ip = &bytes[l3..];
        if ip.len() < IPV4_MIN_HEADER {
            return Err(PacketError::Malformed("truncated ipv4 header"));
        }
        if ip[0] >> 4 != 4 {
            return Ok(Self::other(buf, l3, l3));
        }
        let header_len = usize::from(ip[0] & 0x0f) * 4;
        if header_len < IPV4_MIN_HEADER {
            return Err(PacketError::Malformed("ipv4 ihl below 5"));
        }
        if ip.len() < header_len {
            return Err(PacketError::Malformed("truncated ipv4 options"));
        }
        let total_len = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
        if total_len < header_len {
            return Err(PacketError::Malformed(
                "ipv4 total length below header length",
            ));
        }
        if ip.len() < total_len {
            return Err(PacketError::Malformed("ipv4 total length exceeds buffer"));
        }
        let l4 = l3 + header_len;
        let end = l3 + total_len;

        let frag_offset = u16::from_be_bytes([ip[6], ip[7]]) & 0x1fff;
        if frag_offset != 0 {
            return Ok(PacketView {
                buf,
                l3,
                l4,
                end,
                proto: None,
            });
        }
        let proto = match Protocol::from_ip_proto(ip[9]) {
            Some(p) => p,
            None => {
                return Ok(PacketView {
                    buf,
                    l3,
                    l4,
                    end,
                    proto: None,
                })
            }
        };
        let min = match proto {
            Protocol::Tcp => TCP_MIN_HEADER,
            Protocol::Udp => UDP_HEADER,
        };
        if end - l4 < min {
            return Err(PacketError::Malformed("truncated l4 header"));
        }
        Ok(PacketView {
            buf,
            l3,
            l4,
            end,
            proto: Some(proto),
        })
    }

    fn other(buf: B, l3: usize, l4: usize) -> Self {
        let end = buf.as_ref().len();
        PacketView {
            buf,
            l3,
            l4,
            end,
            proto: None,
        }
    }

    /// True for unfragmented (or first-fragment) IPv4 TCP/UDP packets.
    pub fn is_valid(&self) -> bool {
        self.proto.is_some()
    }

    pub fn protocol(&self) -> Option<Protocol> {
        self.proto
    }

    pub fn l3_offset(&self) -> usize {
        self.l3
    }

    pub fn l4_offset(&self) -> usize {
        self.l4
    }

    /// One past the last byte covered by the IPv4 total length.
    pub fn ip_end(&self) -> usize {
        self.end
    }

    pub fn bytes(&self) -> &[u8] {
        self.buf.as_ref()
    }

    pub fn into_inner(self) -> B {
        self.buf
    }

    /// IPv4 source and destination, when the frame carried IPv4.
    pub fn ip_pair(&self) -> Option<(Ipv4Addr, Ipv4Addr)> {
        let b = self.bytes();
        if self.l4 == self.l3 || b.len() < self.l3 + IPV4_MIN_HEADER {
            return None;
        }
        Some((read_ip(b, self.l3 + 12), read_ip(b, self.l3 + 16)))
    }

    /// The five-tuple as currently present in the buffer.
    pub fn five_tuple(&self) -> Result<FiveTuple, PacketError> {
        let proto = self.proto.ok_or(PacketError::ContractViolation(
            "five_tuple on non-TCP/UDP view",
        ))?;
        let b = self.bytes();
        Ok(FiveTuple {
            src_ip: read_ip(b, self.l3 + 12),
            dst_ip: read_ip(b, self.l3 + 16),
            src_port: read_u16(b, self.l4),
            dst_port: read_u16(b, self.l4 + 2),
            proto,
        })
    }

    pub fn ip_checksum(&self) -> u16 {
        read_u16(self.bytes(), self.l3 + 10)
    }

    /// The L4 checksum field, if this is a TCP/UDP view.
    pub fn l4_checksum(&self) -> Option<u16> {
        self.proto
            .map(|p| read_u16(self.bytes(), self.l4 + p.csum_offset()))
    }

    /// Recomputes both checksums from scratch and compares them with the
    /// stored fields. A UDP checksum of zero counts as correct.
    pub fn checksums_ok(&self) -> bool {
        if self.l4 == self.l3 {
            return true;
        }
        let b = self.bytes();
        let header = &b[self.l3..self.l4];
        if crate::checksum::ipv4_header_checksum(header) != self.ip_checksum() {
            return false;
        }
        let Some(proto) = self.proto else { return true };
        let (src, dst) = (read_ip(b, self.l3 + 12), read_ip(b, self.l3 + 16));
        let segment = &b[self.l4..self.end];
        let stored = read_u16(b, self.l4 + proto.csum_offset());
        match proto {
            Protocol::Tcp => crate::checksum::tcp_checksum(src, dst, segment) == stored,
            Protocol::Udp => {
                stored == 0 || crate::checksum::udp_checksum(src, dst, segment) == stored
            }
        }
    }
}

impl<B: AsRef<[u8]> + AsMut<[u8]>> PacketView<B> {
    /// Overwrites the source or destination address (and port, unless `None`)
    /// in place and patches the IPv4 and TCP/UDP checksums incrementally.
    pub fn rewrite(
        &mut self,
        which: Side,
        new_ip: Ipv4Addr,
        new_port: Option<u16>,
    ) -> Result<(), PacketError> {
        let proto = self.proto.ok_or(PacketError::ContractViolation(
            "rewrite on non-TCP/UDP view",
        ))?;
        let (ip_off, port_off) = match which {
            Side::Src => (self.l3 + 12, self.l4),
            Side::Dst => (self.l3 + 16, self.l4 + 2),
        };
        let ip_csum_off = self.l3 + 10;
        let l4_csum_off = self.l4 + proto.csum_offset();
        let b = self.buf.as_mut();

        let old_ip = u32::from(read_ip(b, ip_off));
        let new_ip = u32::from(new_ip);
        let old_port = read_u16(b, port_off);
        let new_port = new_port.unwrap_or(old_port);

        let ip_csum = incr_csum_update32(read_u16(b, ip_csum_off), old_ip, new_ip);
        write_u16(b, ip_csum_off, ip_csum);

        let l4_csum = read_u16(b, l4_csum_off);
        if !(proto == Protocol::Udp && l4_csum == 0) {
            // Addresses enter the L4 checksum through the pseudo-header.
            let mut c = incr_csum_update32(l4_csum, old_ip, new_ip);
            c = incr_csum_update(c, old_port, new_port);
            if proto == Protocol::Udp && c == 0 {
                c = 0xffff;
            }
            write_u16(b, l4_csum_off, c);
        }

        b[ip_off..ip_off + 4].copy_from_slice(&new_ip.to_be_bytes());
        write_u16(b, port_off, new_port);
        Ok(())
    }
}

#[inline]
fn read_u16(b: &[u8], off: usize) -> u16 {
    u16::from_be_bytes([b[off], b[off + 1]])
}

#[inline]
fn write_u16(b: &mut [u8], off: usize, v: u16) {
    b[off..off + 2].copy_from_slice(&v.to_be_bytes());
}

#[inline]
fn read_ip(b: &[u8], off: usize) -> Ipv4Addr {
    Ipv4Addr::new(b[off], b[off + 1], b[off + 2], b[off + 3])
}
