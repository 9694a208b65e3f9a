//! Helpers shared by the integration test binaries.

#![allow(dead_code)]

/// Ones-complement sum written out longhand, independent of the engine.
fn sum(bytes: &[u8]) -> u32 {
    let mut s = 0u32;
    for pair in bytes.chunks(2) {
        let hi = u32::from(pair[0]) << 8;
        let lo = pair.get(1).map_or(0, |&b| u32::from(b));
        s += hi | lo;
    }
    s
}

fn fold(mut s: u32) -> u16 {
    while s > 0xffff {
        s = (s & 0xffff) + (s >> 16);
    }
    s as u16
}

/// Expected (IP header, L4) checksums for a raw IPv4 TCP/UDP packet,
/// computed from scratch with the checksum fields treated as zero. A UDP
/// result of 0 is sent as 0xffff.
pub fn expected_checksums(pkt: &[u8]) -> (u16, u16) {
    let ihl = usize::from(pkt[0] & 0x0f) * 4;
    let total = usize::from(u16::from_be_bytes([pkt[2], pkt[3]]));
    let mut hdr = pkt[..ihl].to_vec();
    hdr[10] = 0;
    hdr[11] = 0;
    let ip = !fold(sum(&hdr));

    let proto = pkt[9];
    let mut seg = pkt[ihl..total].to_vec();
    let off = if proto == 6 { 16 } else { 6 };
    seg[off] = 0;
    seg[off + 1] = 0;
    let mut pseudo = Vec::new();
    pseudo.extend_from_slice(&pkt[12..20]);
    pseudo.extend_from_slice(&[0, proto]);
    pseudo.extend_from_slice(&(seg.len() as u16).to_be_bytes());
    let mut l4 = !fold(sum(&pseudo) + sum(&seg));
    if proto == 17 && l4 == 0 {
        l4 = 0xffff;
    }
    (ip, l4)
}

/// Checksums as stored in the packet.
pub fn stored_checksums(pkt: &[u8]) -> (u16, u16) {
    let ihl = usize::from(pkt[0] & 0x0f) * 4;
    let off = ihl + if pkt[9] == 6 { 16 } else { 6 };
    (
        u16::from_be_bytes([pkt[10], pkt[11]]),
        u16::from_be_bytes([pkt[off], pkt[off + 1]]),
    )
}

pub fn checksums_ok(pkt: &[u8]) -> bool {
    expected_checksums(pkt) == stored_checksums(pkt)
}
