//! Seedable 64-bit hashing shared by rule tables, conntrack buckets, worker
//! dispatch and flow-hashed pool allocation.

use std::hash::{BuildHasher, Hasher};
use std::net::Ipv4Addr;

use crate::packet::FiveTuple;

/// 64-bit finalizer (MurmurHash3 fmix64).
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    x
}

#[inline]
pub fn endpoint_word(ip: Ipv4Addr, port: u16) -> u64 {
    (u64::from(u32::from(ip)) << 16) | u64::from(port)
}

/// Direction-sensitive hash of a five-tuple.
#[inline]
pub fn tuple_hash(t: &FiveTuple, seed: u64) -> u64 {
    let a = endpoint_word(t.src_ip, t.src_port);
    let b = endpoint_word(t.dst_ip, t.dst_port) ^ (u64::from(t.proto.ip_proto()) << 56);
    mix64(a ^ mix64(b ^ seed))
}

/// Hash that is identical for a tuple and its reverse.
#[inline]
pub fn symmetric_hash(t: &FiveTuple, seed: u64) -> u64 {
    let a = endpoint_word(t.src_ip, t.src_port);
    let b = endpoint_word(t.dst_ip, t.dst_port);
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    mix64(lo ^ mix64(hi ^ seed ^ (u64::from(t.proto.ip_proto()) << 56)))
}

/// `BuildHasher` producing [`SeededHasher`]s.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededState {
    seed: u64,
}

impl SeededState {
    pub fn new(seed: u64) -> Self {
        SeededState { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl Default for SeededState {
    fn default() -> Self {
        SeededState::new(0x9e37_79b9_7f4a_7c15)
    }
}

impl BuildHasher for SeededState {
    type Hasher = SeededHasher;

    fn build_hasher(&self) -> SeededHasher {
        SeededHasher { state: self.seed }
    }
}

/// Fast path for integer keys; arbitrary bytes fall back to word-wise mixing.
#[derive(Debug, Clone)]
pub struct SeededHasher {
    state: u64,
}

impl Hasher for SeededHasher {
    #[inline]
    fn finish(&self) -> u64 {
        self.state
    }

    fn write(&mut self, bytes: &[u8]) {
        for chunk in bytes.chunks(8) {
            let mut w = [0u8; 8];
            w[..chunk.len()].copy_from_slice(chunk);
            self.write_u64(u64::from_le_bytes(w));
        }
    }

    #[inline]
    fn write_u64(&mut self, x: u64) {
        self.state = mix64(self.state ^ x);
    }

    #[inline]
    fn write_u32(&mut self, x: u32) {
        self.write_u64(u64::from(x));
    }

    #[inline]
    fn write_u16(&mut self, x: u16) {
        self.write_u64(u64::from(x));
    }
}
