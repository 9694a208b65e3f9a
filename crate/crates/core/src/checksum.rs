//! Internet checksum (RFC 1071) and its incremental update (RFC 1624).

use std::net::Ipv4Addr;

/// Adds `data` as big-endian 16-bit words to `acc` without folding.
/// An odd trailing byte is padded with zero.
pub fn sum_words(data: &[u8], mut acc: u32) -> u32 {
    let mut chunks = data.chunks_exact(2);
    for w in &mut chunks {
        acc = acc.wrapping_add(u32::from(u16::from_be_bytes([w[0], w[1]])));
        // Keep the accumulator far away from overflow on jumbo inputs.
        if acc > 0xffff_0000 {
            acc = (acc & 0xffff) + (acc >> 16);
        }
    }
    if let [b] = chunks.remainder() {
        acc = acc.wrapping_add(u32::from(*b) << 8);
    }
    acc
}

/// Folds carries back into the low 16 bits.
pub fn fold(mut acc: u32) -> u16 {
    while acc >> 16 != 0 {
        acc = (acc & 0xffff) + (acc >> 16);
    }
    acc as u16
}

/// Checksum over an IPv4 header. The checksum field (bytes 10..12) is skipped.
pub fn ipv4_header_checksum(header: &[u8]) -> u16 {
    let acc = sum_words(&header[..10], 0);
    let acc = sum_words(&header[12..], acc);
    !fold(acc)
}

/// Sum of the IPv4 pseudo-header used by TCP and UDP.
pub fn pseudo_header_sum(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, l4_len: u16) -> u32 {
    let mut acc = sum_words(&src.octets(), 0);
    acc = sum_words(&dst.octets(), acc);
    acc += u32::from(proto);
    acc += u32::from(l4_len);
    acc
}

/// Full TCP/UDP checksum over `segment` (header plus payload). The checksum
/// field at `csum_offset` is treated as zero. UDP callers must map a zero
/// result to `0xffff` themselves; see [`udp_checksum`].
pub fn l4_checksum(
    src: Ipv4Addr,
    dst: Ipv4Addr,
    proto: u8,
    segment: &[u8],
    csum_offset: usize,
) -> u16 {
    let acc = pseudo_header_sum(src, dst, proto, segment.len() as u16);
    let acc = sum_words(&segment[..csum_offset], acc);
    let acc = sum_words(&segment[csum_offset + 2..], acc);
    !fold(acc)
}

pub fn tcp_checksum(src: Ipv4Addr, dst: Ipv4Addr, segment: &[u8]) -> u16 {
    l4_checksum(src, dst, 6, segment, 16)
}

/// UDP checksum with the "zero means disabled" transmission rule applied.
pub fn udp_checksum(src: Ipv4Addr, dst: Ipv4Addr, segment: &[u8]) -> u16 {
    match l4_checksum(src, dst, 17, segment, 6) {
        0 => 0xffff,
        c => c,
    }
}

/// Incrementally updates a one's-complement checksum after a 16-bit word of
/// the covered data changed from `old_word` to `new_word`:
/// `HC' = ~(~HC + ~m + m')`.
#[inline]
pub fn incr_csum_update(csum: u16, old_word: u16, new_word: u16) -> u16 {
    if old_word == new_word {
        return csum;
    }
    let acc = u32::from(!csum) + u32::from(!old_word) + u32::from(new_word);
    !fold(acc)
}

/// Incremental update for a 32-bit field (an IPv4 address), as two words.
#[inline]
pub fn incr_csum_update32(csum: u16, old: u32, new: u32) -> u16 {
    let c = incr_csum_update(csum, (old >> 16) as u16, (new >> 16) as u16);
    incr_csum_update(c, old as u16, new as u16)
}
