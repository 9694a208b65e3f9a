//! NAT rule storage and lookup.
//!
//! Rules live in 2 × 32 hash sub-tables, one per (NAT type, prefix length).
//! Each NAT type keeps a 32-bit presence mask with bit `m - 1` set while the
//! `/m` sub-table holds at least one rule. A lookup walks the set bits from
//! `/32` downwards, masks the address to the sub-table's width and probes the
//! exact-port key before the wildcard key (port 0). The first hit wins, so
//! longer prefixes take precedence and port specificity only breaks ties
//! within one prefix length.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use thiserror::Error;

use crate::hash::SeededState;

pub const MAX_PREFIX: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NatType {
    Snat,
    Dnat,
}

impl NatType {
    fn index(self) -> usize {
        match self {
            NatType::Snat => 0,
            NatType::Dnat => 1,
        }
    }
}

impl fmt::Display for NatType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NatType::Snat => "snat",
            NatType::Dnat => "dnat",
        })
    }
}

/// Port written by a rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RewritePort {
    Port(u16),
    /// Leave the original port in place.
    Keep,
    /// Lease a port from the NAT pool (SNAT only).
    FromPool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuleError {
    #[error("invalid rule: {0}")]
    InvalidRule(&'static str),
    #[error("duplicate rule: {0}")]
    DuplicateRule(NatRule),
    #[error("rule not found")]
    NotFound,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NatRule {
    pub nat_type: NatType,
    /// Network address; host bits are always zero.
    pub match_ip: Ipv4Addr,
    pub prefix_len: u8,
    /// `None` matches any port.
    pub match_port: Option<u16>,
    pub rewrite_ip: Ipv4Addr,
    pub rewrite_port: RewritePort,
}

#[inline]
pub fn prefix_mask(prefix_len: u8) -> u32 {
    match prefix_len {
        0 => 0,
        m => u32::MAX << (32 - u32::from(m.min(32))),
    }
}

#[inline]
pub fn mask_ip(ip: Ipv4Addr, prefix_len: u8) -> Ipv4Addr {
    Ipv4Addr::from(u32::from(ip) & prefix_mask(prefix_len))
}

impl NatRule {
    /// Validates the rule and clears host bits of `match_ip`.
    pub fn new(
        nat_type: NatType,
        match_ip: Ipv4Addr,
        prefix_len: u8,
        match_port: Option<u16>,
        rewrite_ip: Ipv4Addr,
        rewrite_port: RewritePort,
    ) -> Result<Self, RuleError> {
        NatRule {
            nat_type,
            match_ip,
            prefix_len,
            match_port,
            rewrite_ip,
            rewrite_port,
        }
        .normalized()
    }

    pub fn normalized(mut self) -> Result<Self, RuleError> {
        if !(1..=MAX_PREFIX).contains(&self.prefix_len) {
            return Err(RuleError::InvalidRule(
                "prefix length must be within 1..=32",
            ));
        }
        if self.match_port == Some(0) {
            return Err(RuleError::InvalidRule(
                "match port 0 is reserved for wildcard rules",
            ));
        }
        if self.nat_type == NatType::Dnat && self.rewrite_port == RewritePort::FromPool {
            return Err(RuleError::InvalidRule(
                "pool allocation is only valid for snat rules",
            ));
        }
        if self.rewrite_port == RewritePort::Port(0) {
            return Err(RuleError::InvalidRule("rewrite port 0 is not a valid port"));
        }
        self.match_ip = mask_ip(self.match_ip, self.prefix_len);
        Ok(self)
    }

    pub fn matches(&self, ip: Ipv4Addr, port: u16) -> bool {
        mask_ip(ip, self.prefix_len) == self.match_ip && self.match_port.is_none_or(|p| p == port)
    }

    fn key(&self) -> u64 {
        table_key(u32::from(self.match_ip), self.match_port.unwrap_or(0))
    }
}

impl fmt::Display for NatRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{} ",
            self.nat_type, self.match_ip, self.prefix_len
        )?;
        match self.match_port {
            Some(p) => write!(f, "{p}")?,
            None => f.write_str("*")?,
        }
        write!(f, " -> {} ", self.rewrite_ip)?;
        match self.rewrite_port {
            RewritePort::Port(p) => write!(f, "{p}"),
            RewritePort::Keep => f.write_str("*"),
            RewritePort::FromPool => f.write_str("pool"),
        }
    }
}

#[inline]
fn table_key(masked_ip: u32, port: u16) -> u64 {
    (u64::from(masked_ip) << 16) | u64::from(port)
}

/// One hash probe made by [`RuleTableSet::qns_lookup_traced`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub prefix_len: u8,
    pub masked_ip: Ipv4Addr,
    /// Probed port key; 0 for the wildcard probe.
    pub port: u16,
    pub hit: bool,
}

impl Probe {
    pub fn is_wildcard(&self) -> bool {
        self.port == 0
    }
}

type SubTable = HashMap<u64, NatRule, SeededState>;

#[derive(Debug, Clone)]
pub struct RuleTableSet {
    tables: [[SubTable; 32]; 2],
    flags: [u32; 2],
    generation: u64,
}

impl Default for RuleTableSet {
    fn default() -> Self {
        RuleTableSet::with_hasher(SeededState::default())
    }
}

impl RuleTableSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Empty tables whose sub-table hashing is keyed by `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self::with_hasher(SeededState::new(seed))
    }

    fn with_hasher(hasher: SeededState) -> Self {
        let mk = || std::array::from_fn(|_| HashMap::with_hasher(hasher));
        RuleTableSet {
            tables: [mk(), mk()],
            flags: [0; 2],
            generation: 0,
        }
    }

    pub fn from_rules<I: IntoIterator<Item = NatRule>>(rules: I) -> Result<Self, RuleError> {
        let mut set = RuleTableSet::new();
        for r in rules {
            set.insert_rule(r)?;
        }
        Ok(set)
    }

    pub fn insert_rule(&mut self, rule: NatRule) -> Result<(), RuleError> {
        let rule = rule.normalized()?;
        let t = rule.nat_type.index();
        let bit = usize::from(rule.prefix_len - 1);
        let table = &mut self.tables[t][bit];
        let key = rule.key();
        if let Some(existing) = table.get(&key) {
            return Err(RuleError::DuplicateRule(existing.clone()));
        }
        table.insert(key, rule);
        self.flags[t] |= 1 << bit;
        Ok(())
    }

    pub fn delete_rule(
        &mut self,
        nat_type: NatType,
        match_ip: Ipv4Addr,
        prefix_len: u8,
        match_port: Option<u16>,
    ) -> Result<NatRule, RuleError> {
        if !(1..=MAX_PREFIX).contains(&prefix_len) {
            return Err(RuleError::NotFound);
        }
        let t = nat_type.index();
        let bit = usize::from(prefix_len - 1);
        let masked = u32::from(match_ip) & prefix_mask(prefix_len);
        let table = &mut self.tables[t][bit];
        let removed = table
            .remove(&table_key(masked, match_port.unwrap_or(0)))
            .ok_or(RuleError::NotFound)?;
        if table.is_empty() {
            self.flags[t] &= !(1 << bit);
        }
        Ok(removed)
    }

    /// Presence mask for `nat_type`: bit `m - 1` is set iff the `/m` sub-table is non-empty.
    pub fn flags(&self, nat_type: NatType) -> u32 {
        self.flags[nat_type.index()]
    }

    pub fn has_rules(&self, nat_type: NatType, prefix_len: u8) -> bool {
        (1..=MAX_PREFIX).contains(&prefix_len)
            && self.flags(nat_type) & (1 << (prefix_len - 1)) != 0
    }

    pub fn sub_table_len(&self, nat_type: NatType, prefix_len: u8) -> usize {
        if !(1..=MAX_PREFIX).contains(&prefix_len) {
            return 0;
        }
        self.tables[nat_type.index()][usize::from(prefix_len - 1)].len()
    }

    pub fn len(&self) -> usize {
        self.tables.iter().flatten().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.flags == [0, 0]
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn rules(&self) -> impl Iterator<Item = &NatRule> {
        self.tables.iter().flatten().flat_map(HashMap::values)
    }

    /// Most specific rule of `nat_type` matching `(ip, port)`.
    #[inline]
    pub fn qns_lookup(&self, nat_type: NatType, ip: Ipv4Addr, port: u16) -> Option<&NatRule> {
        self.qns_lookup_traced(nat_type, ip, port, |_| {})
    }

    /// [`qns_lookup`](Self::qns_lookup) reporting every hash probe to `trace`.
    #[inline]
    pub fn qns_lookup_traced<F>(
        &self,
        nat_type: NatType,
        ip: Ipv4Addr,
        port: u16,
        mut trace: F,
    ) -> Option<&NatRule>
    where
        F: FnMut(Probe),
    {
        let t = nat_type.index();
        let tables = &self.tables[t];
        let ip = u32::from(ip);
        let mut flags = self.flags[t];
        while flags != 0 {
            let bit = 31 - flags.leading_zeros();
            flags &= !(1 << bit);
            let prefix_len = bit as u8 + 1;
            let masked = ip & prefix_mask(prefix_len);
            let table = &tables[bit as usize];
            if port != 0 {
                let hit = table.get(&table_key(masked, port));
                trace(Probe {
                    prefix_len,
                    masked_ip: masked.into(),
                    port,
                    hit: hit.is_some(),
                });
                if hit.is_some() {
                    return hit;
                }
            }
            let hit = table.get(&table_key(masked, 0));
            trace(Probe {
                prefix_len,
                masked_ip: masked.into(),
                port: 0,
                hit: hit.is_some(),
            });
            if hit.is_some() {
                return hit;
            }
        }
        None
    }

    /// Flat copy of every rule ordered for [`linear_lookup`] to agree with
    /// [`qns_lookup`](Self::qns_lookup).
    pub fn to_precedence_list(&self) -> Vec<NatRule> {
        let mut rules: Vec<NatRule> = self.rules().cloned().collect();
        sort_by_precedence(&mut rules);
        rules
    }
}

/// Sorts longest prefix first, exact port before wildcard at equal length.
/// Remaining ties are ordered by address/port so the result is stable
/// regardless of the input order.
pub fn sort_by_precedence(rules: &mut [NatRule]) {
    rules.sort_by(|a, b| {
        b.prefix_len
            .cmp(&a.prefix_len)
            .then_with(|| b.match_port.is_some().cmp(&a.match_port.is_some()))
            .then_with(|| a.nat_type.cmp(&b.nat_type))
            .then_with(|| a.match_ip.cmp(&b.match_ip))
            .then_with(|| a.match_port.cmp(&b.match_port))
    });
}

/// Sequential scan returning the first matching rule in list order.
#[inline]
pub fn linear_lookup(
    rules: &[NatRule],
    nat_type: NatType,
    ip: Ipv4Addr,
    port: u16,
) -> Option<&NatRule> {
    let ip = u32::from(ip);
    rules.iter().find(|r| {
        r.nat_type == nat_type
            && ip & prefix_mask(r.prefix_len) == u32::from(r.match_ip)
            && r.match_port.is_none_or(|p| p == port)
    })
}

/// Copy-on-write publisher for rule tables.
///
/// Readers take an `Arc` snapshot without locking; writers clone the current
/// tables, mutate the private copy and swap it in with a bumped generation.
#[derive(Debug)]
pub struct RuleStore {
    current: ArcSwap<RuleTableSet>,
    writer: Mutex<()>,
}

impl RuleStore {
    pub fn new(mut tables: RuleTableSet) -> Self {
        tables.generation = tables.generation.max(1);
        RuleStore {
            current: ArcSwap::from_pointee(tables),
            writer: Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<RuleTableSet> {
        self.current.load_full()
    }

    pub fn generation(&self) -> u64 {
        self.current.load().generation
    }

    /// Applies `f` to a private copy and publishes it if `f` succeeds.
    pub fn update<T, E>(&self, f: impl FnOnce(&mut RuleTableSet) -> Result<T, E>) -> Result<T, E> {
        let _guard = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let mut next = RuleTableSet::clone(&self.current.load());
        let out = f(&mut next)?;
        next.generation += 1;
        self.current.store(Arc::new(next));
        Ok(out)
    }
}

impl Default for RuleStore {
    fn default() -> Self {
        RuleStore::new(RuleTableSet::new())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn snat(net: &str, prefix: u8, port: Option<u16>) -> NatRule {
        NatRule::new(
            NatType::Snat,
            ip(net),
            prefix,
            port,
            ip("203.0.113.7"),
            RewritePort::FromPool,
        )
        .unwrap()
    }

    // Brute force: every matching rule, ranked by (prefix length, exact port).
    fn oracle(rules: &[NatRule], t: NatType, addr: Ipv4Addr, port: u16) -> Option<&NatRule> {
        rules
            .iter()
            .filter(|r| r.nat_type == t)
            .filter(|r| {
                let m = r.prefix_len as u32;
                let net_bits = |x: Ipv4Addr| u32::from(x).checked_shr(32 - m).unwrap_or(0);
                net_bits(addr) == net_bits(r.match_ip)
                    && (r.match_port.is_none() || r.match_port == Some(port))
            })
            .max_by_key(|r| (r.prefix_len, r.match_port.is_some()))
    }

    #[test]
    fn insert_sets_flag_for_prefix() {
        let mut t = RuleTableSet::new();
        t.insert_rule(snat("192.168.88.0", 24, None)).unwrap();
        assert!(t.has_rules(NatType::Snat, 24));
        assert_eq!(t.flags(NatType::Snat), 1 << 23);
        assert_eq!(t.flags(NatType::Dnat), 0);

        t.insert_rule(snat("192.168.88.32", 32, Some(5000)))
            .unwrap();
        assert_eq!(t.sub_table_len(NatType::Snat, 32), 1);
    }

    #[test]
    fn insert_normalizes_host_bits() {
        let mut t = RuleTableSet::new();
        t.insert_rule(snat("192.168.88.77", 24, None)).unwrap();
        assert_eq!(t.rules().next().unwrap().match_ip, ip("192.168.88.0"));
    }

    #[test]
    fn duplicate_and_invalid_rules() {
        let mut t = RuleTableSet::new();
        t.insert_rule(snat("192.168.88.0", 24, None)).unwrap();
        assert!(matches!(
            t.insert_rule(snat("192.168.88.1", 24, None)),
            Err(RuleError::DuplicateRule(_))
        ));
        let bad = |prefix| NatRule {
            prefix_len: prefix,
            ..snat("10.0.0.0", 8, None)
        };
        assert!(matches!(
            t.insert_rule(bad(0)),
            Err(RuleError::InvalidRule(_))
        ));
        assert!(matches!(
            t.insert_rule(bad(33)),
            Err(RuleError::InvalidRule(_))
        ));
        let dnat_pool = NatRule {
            nat_type: NatType::Dnat,
            ..snat("10.0.0.0", 8, None)
        };
        assert!(matches!(
            t.insert_rule(dnat_pool),
            Err(RuleError::InvalidRule(_))
        ));
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn delete_clears_flag_only_when_empty() {
        let mut t = RuleTableSet::new();
        t.insert_rule(snat("192.168.88.0", 24, None)).unwrap();
        t.insert_rule(snat("192.168.89.0", 24, None)).unwrap();
        t.delete_rule(NatType::Snat, ip("192.168.89.0"), 24, None)
            .unwrap();
        assert!(t.has_rules(NatType::Snat, 24));
        t.delete_rule(NatType::Snat, ip("192.168.88.0"), 24, None)
            .unwrap();
        assert!(!t.has_rules(NatType::Snat, 24));
        assert_eq!(
            t.delete_rule(NatType::Snat, ip("192.168.88.0"), 24, None),
            Err(RuleError::NotFound)
        );
    }

    #[test]
    fn wildcard_path_after_missing_longer_prefix() {
        let mut t = RuleTableSet::new();
        t.insert_rule(snat("192.168.88.0", 24, None)).unwrap();
        // A /32 rule for another host keeps the /32 sub-table flagged.
        t.insert_rule(snat("192.168.88.1", 32, Some(22))).unwrap();
        let mut probes = Vec::new();
        let hit = t
            .qns_lookup_traced(NatType::Snat, ip("192.168.88.32"), 5000, |p| probes.push(p))
            .unwrap();
        assert_eq!(hit.prefix_len, 24);
        let shape: Vec<_> = probes
            .iter()
            .map(|p| (p.prefix_len, p.port, p.hit))
            .collect();
        assert_eq!(
            shape,
            vec![
                (32, 5000, false),
                (32, 0, false),
                (24, 5000, false),
                (24, 0, true)
            ]
        );
        assert_eq!(probes[2].masked_ip, ip("192.168.88.0"));
    }

    #[test]
    fn empty_flag_skips_sub_table() {
        let t = RuleTableSet::from_rules([snat("192.168.88.0", 24, None)]).unwrap();
        let mut probes = Vec::new();
        assert!(t
            .qns_lookup_traced(NatType::Snat, ip("192.168.88.32"), 5000, |p| probes.push(p))
            .is_some());
        assert!(probes.iter().all(|p| p.prefix_len == 24));
        assert!(RuleTableSet::new()
            .qns_lookup(NatType::Snat, ip("1.2.3.4"), 1)
            .is_none());
    }

    #[test]
    fn longer_prefix_wins() {
        let t = RuleTableSet::from_rules([
            snat("192.168.88.0", 24, None),
            snat("192.168.88.32", 32, Some(5000)),
        ])
        .unwrap();
        assert_eq!(
            t.qns_lookup(NatType::Snat, ip("192.168.88.32"), 5000)
                .unwrap()
                .prefix_len,
            32
        );
        assert_eq!(
            t.qns_lookup(NatType::Snat, ip("192.168.88.32"), 5001)
                .unwrap()
                .prefix_len,
            24
        );
    }

    #[test]
    fn prefix_dominates_port_specificity() {
        let t =
            RuleTableSet::from_rules([snat("10.1.0.0", 16, Some(80)), snat("10.1.2.0", 24, None)])
                .unwrap();
        assert_eq!(
            t.qns_lookup(NatType::Snat, ip("10.1.2.3"), 80)
                .unwrap()
                .prefix_len,
            24
        );
    }

    #[test]
    fn linear_lookup_on_sorted_list() {
        let mut list = vec![
            snat("192.168.88.0", 24, None),
            snat("192.168.88.32", 32, Some(5000)),
        ];
        assert!(linear_lookup(&[], NatType::Snat, ip("1.1.1.1"), 1).is_none());
        // Insertion order puts the /24 first; precedence sorting fixes it.
        assert_eq!(
            linear_lookup(&list, NatType::Snat, ip("192.168.88.32"), 5000)
                .unwrap()
                .prefix_len,
            24
        );
        sort_by_precedence(&mut list);
        assert_eq!(
            linear_lookup(&list, NatType::Snat, ip("192.168.88.32"), 5000)
                .unwrap()
                .prefix_len,
            32
        );
    }

    #[test]
    fn linear_scan_of_ten_thousand_rules() {
        let mut rules: Vec<NatRule> = (0..9_999u32)
            .map(|i| {
                snat(
                    &Ipv4Addr::from(0x0a00_0000 + (i << 8)).to_string(),
                    24,
                    None,
                )
            })
            .collect();
        rules.push(snat("192.168.88.32", 32, Some(5000)));
        let hit = linear_lookup(&rules, NatType::Snat, ip("192.168.88.32"), 5000).unwrap();
        assert_eq!(hit.match_ip, ip("192.168.88.32"));
    }

    fn random_rule(rng: &mut ChaCha8Rng) -> NatRule {
        let t = if rng.random_bool(0.8) {
            NatType::Snat
        } else {
            NatType::Dnat
        };
        // A small address space keeps overlaps between prefixes frequent.
        let addr = Ipv4Addr::from(
            0x0a00_0000 | rng.random_range(0..4096u32) << 4 | rng.random_range(0..16u32),
        );
        let prefix = rng.random_range(20..=32u8);
        let port = rng.random_bool(0.5).then(|| rng.random_range(1..8u16));
        NatRule::new(
            t,
            addr,
            prefix,
            port,
            ip("203.0.113.1"),
            RewritePort::Port(9),
        )
        .unwrap()
    }

    #[test]
    fn qns_matches_oracle_on_random_rule_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut t = RuleTableSet::new();
            let mut rules = Vec::new();
            for _ in 0..1000 {
                let r = random_rule(&mut rng);
                if t.insert_rule(r.clone()).is_ok() {
                    rules.push(r);
                }
            }
            let sorted = t.to_precedence_list();
            for _ in 0..1000 {
                let ty = if rng.random_bool(0.8) {
                    NatType::Snat
                } else {
                    NatType::Dnat
                };
                let addr = Ipv4Addr::from(0x0a00_0000 | rng.random_range(0..65536u32));
                let port = rng.random_range(0..8u16);
                let want = oracle(&rules, ty, addr, port);
                let mut probes = 0;
                assert_eq!(t.qns_lookup_traced(ty, addr, port, |_| probes += 1), want);
                assert!(probes <= 64);
                assert_eq!(linear_lookup(&sorted, ty, addr, port), want);
            }
        }
    }

    #[test]
    fn store_publishes_new_generation() {
        let store = RuleStore::default();
        let before = store.snapshot();
        let g0 = store.generation();
        store
            .update(|t| t.insert_rule(snat("192.168.88.0", 24, None)))
            .unwrap();
        assert_eq!(store.generation(), g0 + 1);
        assert!(before.is_empty());
        assert_eq!(store.snapshot().len(), 1);
        // A failed update publishes nothing.
        assert!(store
            .update(|t| t.insert_rule(snat("192.168.88.0", 24, None)))
            .is_err());
        assert_eq!(store.generation(), g0 + 1);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Insert(u8, u8, Option<u16>),
        Delete(u8, u8, Option<u16>),
    }

    fn arb_op() -> impl Strategy<Value = Op> {
        let fields = (
            0u8..4,
            prop::sample::select(vec![8u8, 16, 24, 31, 32]),
            prop::option::of(1u16..3),
        );
        prop_oneof![
            fields
                .clone()
                .prop_map(|(h, p, port)| Op::Insert(h, p, port)),
            fields.prop_map(|(h, p, port)| Op::Delete(h, p, port)),
        ]
    }

    proptest! {
        #[test]
        fn flags_track_non_empty_sub_tables(ops in prop::collection::vec(arb_op(), 0..200)) {
            let mut t = RuleTableSet::new();
            for op in ops {
                match op {
                    Op::Insert(h, p, port) => {
                        let _ = t.insert_rule(snat(&format!("10.0.0.{h}"), p, port));
                    }
                    Op::Delete(h, p, port) => {
                        let _ = t.delete_rule(NatType::Snat, Ipv4Addr::new(10, 0, 0, h), p, port);
                    }
                }
                for m in 1..=32u8 {
                    prop_assert_eq!(t.has_rules(NatType::Snat, m), t.sub_table_len(NatType::Snat, m) > 0);
                }
            }
        }

        #[test]
        fn insertion_order_does_not_matter(seed: u64, query_seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rules: Vec<NatRule> = (0..100).map(|_| random_rule(&mut rng)).collect();
            let mut a = RuleTableSet::with_seed(1);
            let mut b = RuleTableSet::with_seed(2);
            for r in &rules { let _ = a.insert_rule(r.clone()); }
            for r in rules.iter().rev() { let _ = b.insert_rule(r.clone()); }
            // Reverse insertion keeps the last duplicate instead of the first.
            let mut q = ChaCha8Rng::seed_from_u64(query_seed);
            for _ in 0..200 {
                let addr = Ipv4Addr::from(0x0a00_0000 | q.random_range(0..65536u32));
                let port = q.random_range(0..8u16);
                let ra = a.qns_lookup(NatType::Snat, addr, port).map(|r| (r.match_ip, r.prefix_len, r.match_port));
                let rb = b.qns_lookup(NatType::Snat, addr, port).map(|r| (r.match_ip, r.prefix_len, r.match_port));
                prop_assert_eq!(ra, rb);
            }
        }
    }
}
