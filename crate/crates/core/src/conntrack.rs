//! Connection Tracer: the connection-record table shared by all workers.
//!
//! The table is a fixed array of buckets, each a lock-free singly linked list
//! (Harris-style logical deletion by tagging a node's `next` pointer, nodes
//! reclaimed through `crossbeam-epoch`). New nodes are only ever pushed at a
//! bucket head, so an insert that rescans from an unchanged head can never
//! miss a concurrently inserted duplicate.
//!
//! A connection is stored as two nodes, one per direction, sharing a single
//! `Conn`. Both nodes are linked while the `Conn` is `PENDING` and become
//! visible together when its state flips to `LIVE`; eviction flips it to
//! `DEAD` before unlinking. Lookups only report `LIVE` connections, so the
//! two directions appear and disappear atomically.

use std::sync::atomic::{AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_epoch::{self as epoch, Atomic, Guard, Owned, Shared};
use serde::Serialize;
use thiserror::Error;

use crate::hash::tuple_hash;
use crate::packet::{FiveTuple, Protocol};
use crate::pool::{Lease, NatPool};

const PENDING: u8 = 0;
const LIVE: u8 = 1;
const DEAD: u8 = 2;

pub const DEFAULT_CAPACITY: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeouts {
    pub tcp_idle: Duration,
    pub udp_idle: Duration,
}

impl Timeouts {
    pub fn idle(&self, proto: Protocol) -> Duration {
        match proto {
            Protocol::Tcp => self.tcp_idle,
            Protocol::Udp => self.udp_idle,
        }
    }
}

impl Default for Timeouts {
    fn default() -> Self {
        Timeouts {
            tcp_idle: Duration::from_secs(300),
            udp_idle: Duration::from_secs(60),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtConfig {
    /// Maximum number of directional entries (two per connection). Rounded
    /// up to a power of two; also the bucket count.
    pub capacity: usize,
    pub timeouts: Timeouts,
    pub seed: u64,
}

impl Default for CtConfig {
    fn default() -> Self {
        CtConfig {
            capacity: DEFAULT_CAPACITY,
            timeouts: Timeouts::default(),
            seed: 0x5eed_c0ffee,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConnDirection {
    Original,
    Reply,
}

/// Snapshot of one directional record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnRecord {
    /// Shared by both directions of a connection; never reused.
    pub id: u64,
    pub direction: ConnDirection,
    pub key: FiveTuple,
    /// What a packet matching `key` looks like after translation.
    pub translated: FiveTuple,
    pub peer_key: FiveTuple,
    pub rule_generation: u64,
    pub last_seen: Duration,
    pub lease: Option<Lease>,
}

impl ConnRecord {
    pub fn translated_src(&self) -> (std::net::Ipv4Addr, u16) {
        self.translated.src()
    }

    pub fn translated_dst(&self) -> (std::net::Ipv4Addr, u16) {
        self.translated.dst()
    }
}

/// Per-connection data handed to [`ConnTable::insert_pair`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecordData {
    pub rule_generation: u64,
    /// Released back to the table's pool when the connection is evicted.
    pub lease: Option<Lease>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Insertion {
    Installed(ConnRecord),
    /// Another caller already owns the original key; use its translation.
    Existing(ConnRecord),
}

impl Insertion {
    pub fn record(&self) -> &ConnRecord {
        match self {
            Insertion::Installed(r) | Insertion::Existing(r) => r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CtError {
    #[error("connection table is full")]
    TableFull,
    #[error("reply key already belongs to connection {}", .0.id)]
    ReplyInUse(Box<ConnRecord>),
    #[error("original and reply keys are identical")]
    InvalidPair,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CtStats {
    pub live_pairs: usize,
    pub entries: usize,
    pub capacity: usize,
    pub installed: u64,
    pub races_lost: u64,
    pub reply_conflicts: u64,
    pub table_full: u64,
    pub evictions: u64,
}

/// Points at which tests can suspend an `insert_pair` caller.
#[cfg(test)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum PausePoint {
    OriginalClaimed(FiveTuple),
    BeforePublish(FiveTuple),
}

struct Conn {
    id: u64,
    original: FiveTuple,
    reply: FiveTuple,
    rule_generation: u64,
    lease: Option<Lease>,
    state: AtomicU8,
    last_seen: AtomicU64,
}

impl Conn {
    fn record(&self, dir: ConnDirection) -> ConnRecord {
        let (key, peer) = match dir {
            ConnDirection::Original => (self.original, self.reply),
            ConnDirection::Reply => (self.reply, self.original),
        };
        ConnRecord {
            id: self.id,
            direction: dir,
            key,
            translated: peer.reversed(),
            peer_key: peer,
            rule_generation: self.rule_generation,
            last_seen: Duration::from_nanos(self.last_seen.load(Ordering::Relaxed)),
            lease: self.lease,
        }
    }

    fn idle_for(&self, now: u64) -> Duration {
        Duration::from_nanos(now.saturating_sub(self.last_seen.load(Ordering::Relaxed)))
    }
}

struct Node {
    key: FiveTuple,
    dir: ConnDirection,
    conn: Arc<Conn>,
    next: Atomic<Node>,
}

#[derive(Default)]
struct Counters {
    live_pairs: AtomicUsize,
    installed: AtomicU64,
    races_lost: AtomicU64,
    reply_conflicts: AtomicU64,
    table_full: AtomicU64,
    evictions: AtomicU64,
}

pub struct ConnTable {
    buckets: Box<[Atomic<Node>]>,
    mask: usize,
    capacity: usize,
    entries: AtomicUsize,
    seed: u64,
    timeouts: Timeouts,
    pool: Option<Arc<NatPool>>,
    next_id: AtomicU64,
    counters: Counters,
    #[cfg(test)]
    pause: Option<Box<dyn Fn(PausePoint) + Send + Sync>>,
}

impl std::fmt::Debug for ConnTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConnTable")
            .field("stats", &self.stats())
            .finish()
    }
}

#[inline]
fn nanos(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}

impl ConnTable {
    pub fn new(config: CtConfig) -> Self {
        Self::with_pool(config, None)
    }

    /// A table that returns evicted connections' leases to `pool`.
    pub fn with_pool(config: CtConfig, pool: Option<Arc<NatPool>>) -> Self {
        let capacity = config.capacity.max(2).next_power_of_two();
        ConnTable {
            buckets: (0..capacity).map(|_| Atomic::null()).collect(),
            mask: capacity - 1,
            capacity,
            entries: AtomicUsize::new(0),
            seed: config.seed,
            timeouts: config.timeouts,
            pool,
            next_id: AtomicU64::new(1),
            counters: Counters::default(),
            #[cfg(test)]
            pause: None,
        }
    }

    #[cfg(test)]
    pub(crate) fn set_pause_hook(&mut self, hook: impl Fn(PausePoint) + Send + Sync + 'static) {
        self.pause = Some(Box::new(hook));
    }

    #[cfg(test)]
    fn pause(&self, point: PausePoint) {
        if let Some(hook) = &self.pause {
            hook(point);
        }
    }

    pub fn timeouts(&self) -> Timeouts {
        self.timeouts
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of live connections (pairs).
    pub fn len(&self) -> usize {
        self.counters.live_pairs.load(Ordering::Relaxed)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CtStats {
        let c = &self.counters;
        CtStats {
            live_pairs: c.live_pairs.load(Ordering::Relaxed),
            entries: self.entries.load(Ordering::Relaxed),
            capacity: self.capacity,
            installed: c.installed.load(Ordering::Relaxed),
            races_lost: c.races_lost.load(Ordering::Relaxed),
            reply_conflicts: c.reply_conflicts.load(Ordering::Relaxed),
            table_full: c.table_full.load(Ordering::Relaxed),
            evictions: c.evictions.load(Ordering::Relaxed),
        }
    }

    #[inline]
    fn bucket(&self, key: &FiveTuple) -> &Atomic<Node> {
        &self.buckets[tuple_hash(key, self.seed) as usize & self.mask]
    }

    #[inline]
    fn is_stale(&self, conn: &Conn, now: u64) -> bool {
        conn.idle_for(now) > self.timeouts.idle(conn.original.proto)
    }

    /// Live record for `key`, refreshing its idle timer. Records past their
    /// idle timeout read as absent even before a sweep reclaims them.
    pub fn lookup(&self, key: &FiveTuple, now: Duration) -> Option<ConnRecord> {
        let now = nanos(now);
        let guard = epoch::pin();
        let mut cur = self.bucket(key).load(Ordering::Acquire, &guard);
        // SAFETY: nodes reachable from a bucket are only freed after every
        // guard pinned before their unlink has been dropped.
        while let Some(node) = unsafe { cur.as_ref() } {
            let next = node.next.load(Ordering::Acquire, &guard);
            if next.tag() == 0 && node.key == *key {
                let conn = &node.conn;
                if conn.state.load(Ordering::Acquire) != LIVE || self.is_stale(conn, now) {
                    return None;
                }
                if conn.last_seen.load(Ordering::Relaxed) < now {
                    conn.last_seen.fetch_max(now, Ordering::Relaxed);
                }
                return Some(conn.record(node.dir));
            }
            cur = next.with_tag(0);
        }
        None
    }

    /// Installs both directions of a connection, or reports the connection
    /// that already owns `original` (first writer wins).
    ///
    /// The translation is implied by the keys: packets matching `original`
    /// are rewritten to look like `reply` reversed and vice versa.
    ///
    /// `Existing` can name a connection whose inserting thread has not yet
    /// published it; lookups start seeing it once that thread finishes.
    /// Nothing here waits for another thread.
    pub fn insert_pair(
        &self,
        original: FiveTuple,
        reply: FiveTuple,
        data: RecordData,
        now: Duration,
    ) -> Result<Insertion, CtError> {
        if original == reply {
            return Err(CtError::InvalidPair);
        }
        let now = nanos(now);
        if self.entries.fetch_add(2, Ordering::AcqRel) + 2 > self.capacity {
            self.entries.fetch_sub(2, Ordering::AcqRel);
            self.counters.table_full.fetch_add(1, Ordering::Relaxed);
            return Err(CtError::TableFull);
        }
        let conn = Arc::new(Conn {
            id: self.next_id.fetch_add(1, Ordering::Relaxed),
            original,
            reply,
            rule_generation: data.rule_generation,
            lease: data.lease,
            state: AtomicU8::new(PENDING),
            last_seen: AtomicU64::new(now),
        });
        let guard = epoch::pin();

        let claimed = match self.insert_node(original, ConnDirection::Original, &conn, now, &guard)
        {
            Ok(node) => node,
            Err(existing) => {
                self.entries.fetch_sub(2, Ordering::AcqRel);
                self.counters.races_lost.fetch_add(1, Ordering::Relaxed);
                return Ok(Insertion::Existing(existing));
            }
        };
        #[cfg(test)]
        self.pause(PausePoint::OriginalClaimed(original));

        if let Err(existing) = self.insert_node(reply, ConnDirection::Reply, &conn, now, &guard) {
            conn.state.store(DEAD, Ordering::Release);
            // SAFETY: `claimed` was linked under `guard`, which is still held.
            Self::mark(unsafe { claimed.deref() }, &guard);
            self.purge(self.bucket(&original), &guard);
            self.entries.fetch_sub(2, Ordering::AcqRel);
            self.counters
                .reply_conflicts
                .fetch_add(1, Ordering::Relaxed);
            return Err(CtError::ReplyInUse(Box::new(existing)));
        }
        #[cfg(test)]
        self.pause(PausePoint::BeforePublish(original));

        conn.state.store(LIVE, Ordering::Release);
        self.counters.live_pairs.fetch_add(1, Ordering::Relaxed);
        self.counters.installed.fetch_add(1, Ordering::Relaxed);
        Ok(Insertion::Installed(conn.record(ConnDirection::Original)))
    }

    /// Pushes a node for `key` unless a pending or live node already holds it.
    fn insert_node<'g>(
        &self,
        key: FiveTuple,
        dir: ConnDirection,
        conn: &Arc<Conn>,
        now: u64,
        guard: &'g Guard,
    ) -> Result<Shared<'g, Node>, ConnRecord> {
        let bucket = self.bucket(&key);
        let mut new = Owned::new(Node {
            key,
            dir,
            conn: Arc::clone(conn),
            next: Atomic::null(),
        });
        loop {
            let head = bucket.load(Ordering::Acquire, guard);
            let mut cur = head;
            let mut found = None;
            // SAFETY: see `lookup`.
            while let Some(node) = unsafe { cur.as_ref() } {
                let next = node.next.load(Ordering::Acquire, guard);
                if next.tag() == 0 && node.key == key {
                    found = Some(node);
                    break;
                }
                cur = next.with_tag(0);
            }
            if let Some(node) = found {
                let other = &node.conn;
                match other.state.load(Ordering::Acquire) {
                    DEAD => {
                        // Help the evicting thread along instead of waiting for it.
                        Self::mark(node, guard);
                        continue;
                    }
                    LIVE if self.is_stale(other, now) => {
                        self.kill(other, guard);
                        continue;
                    }
                    _ => return Err(other.record(node.dir)),
                }
            }
            new.next.store(head, Ordering::Relaxed);
            match bucket.compare_exchange(head, new, Ordering::AcqRel, Ordering::Acquire, guard) {
                Ok(shared) => return Ok(shared),
                Err(e) => new = e.new,
            }
        }
    }

    /// Logically deletes `node`. Returns false if it was already deleted.
    fn mark(node: &Node, guard: &Guard) -> bool {
        loop {
            let next = node.next.load(Ordering::Acquire, guard);
            if next.tag() == 1 {
                return false;
            }
            if node
                .next
                .compare_exchange(
                    next,
                    next.with_tag(1),
                    Ordering::AcqRel,
                    Ordering::Acquire,
                    guard,
                )
                .is_ok()
            {
                return true;
            }
        }
    }

    /// Unlinks every logically deleted node in `bucket`.
    fn purge(&self, bucket: &Atomic<Node>, guard: &Guard) {
        'retry: loop {
            let mut pred = bucket;
            let mut cur = pred.load(Ordering::Acquire, guard);
            // SAFETY: see `lookup`.
            while let Some(node) = unsafe { cur.as_ref() } {
                let next = node.next.load(Ordering::Acquire, guard);
                if next.tag() == 1 {
                    let succ = next.with_tag(0);
                    if pred
                        .compare_exchange(cur, succ, Ordering::AcqRel, Ordering::Acquire, guard)
                        .is_err()
                    {
                        continue 'retry;
                    }
                    // SAFETY: the successful CAS made this thread the one
                    // that unlinked `cur`; no new reference can reach it.
                    unsafe { guard.defer_destroy(cur) };
                    cur = succ;
                } else {
                    pred = &node.next;
                    cur = next;
                }
            }
            return;
        }
    }

    fn unlink_conn_node(&self, key: &FiveTuple, conn: &Arc<Conn>, guard: &Guard) {
        let bucket = self.bucket(key);
        let mut cur = bucket.load(Ordering::Acquire, guard);
        // SAFETY: see `lookup`.
        while let Some(node) = unsafe { cur.as_ref() } {
            if node.key == *key && Arc::ptr_eq(&node.conn, conn) {
                Self::mark(node, guard);
                break;
            }
            cur = node.next.load(Ordering::Acquire, guard).with_tag(0);
        }
        self.purge(bucket, guard);
    }

    /// Evicts a live connection. Only the caller that wins the LIVE -> DEAD
    /// transition does the bookkeeping and returns true.
    fn kill(&self, conn: &Arc<Conn>, guard: &Guard) -> bool {
        if conn
            .state
            .compare_exchange(LIVE, DEAD, Ordering::AcqRel, Ordering::Acquire)
            .is_err()
        {
            return false;
        }
        self.unlink_conn_node(&conn.original, conn, guard);
        self.unlink_conn_node(&conn.reply, conn, guard);
        self.entries.fetch_sub(2, Ordering::AcqRel);
        self.counters.live_pairs.fetch_sub(1, Ordering::Relaxed);
        self.counters.evictions.fetch_add(1, Ordering::Relaxed);
        if let (Some(pool), Some(lease)) = (&self.pool, conn.lease) {
            let _ = pool.release(&lease);
        }
        true
    }

    /// Evicts connections idle longer than the per-protocol timeout
    /// (measured on the most recent use of either direction). Returns the
    /// number of connections this call evicted.
    pub fn expire(&self, now: Duration, tcp_idle: Duration, udp_idle: Duration) -> usize {
        let now = nanos(now);
        let timeouts = Timeouts { tcp_idle, udp_idle };
        let mut evicted = 0;
        let mut guard = epoch::pin();
        for (i, bucket) in self.buckets.iter().enumerate() {
            if i % 1024 == 0 {
                guard.repin();
            }
            let mut dirty = false;
            let mut cur = bucket.load(Ordering::Acquire, &guard);
            // SAFETY: see `lookup`.
            while let Some(node) = unsafe { cur.as_ref() } {
                let next = node.next.load(Ordering::Acquire, &guard);
                if next.tag() == 1 {
                    dirty = true;
                } else {
                    let conn = &node.conn;
                    match conn.state.load(Ordering::Acquire) {
                        DEAD => dirty |= Self::mark(node, &guard),
                        LIVE if node.dir == ConnDirection::Original
                            && conn.idle_for(now) > timeouts.idle(conn.original.proto)
                            && self.kill(conn, &guard) =>
                        {
                            evicted += 1;
                        }
                        _ => {}
                    }
                }
                cur = next.with_tag(0);
            }
            if dirty {
                self.purge(bucket, &guard);
            }
        }
        evicted
    }

    /// [`expire`](Self::expire) with the table's configured timeouts.
    pub fn sweep(&self, now: Duration) -> usize {
        self.expire(now, self.timeouts.tcp_idle, self.timeouts.udp_idle)
    }

    /// Snapshot of every live directional record (both directions of each
    /// connection), without touching idle timers.
    pub fn records(&self) -> Vec<ConnRecord> {
        let guard = epoch::pin();
        let mut out = Vec::new();
        for bucket in self.buckets.iter() {
            let mut cur = bucket.load(Ordering::Acquire, &guard);
            // SAFETY: see `lookup`.
            while let Some(node) = unsafe { cur.as_ref() } {
                let next = node.next.load(Ordering::Acquire, &guard);
                if next.tag() == 0 && node.conn.state.load(Ordering::Acquire) == LIVE {
                    out.push(node.conn.record(node.dir));
                }
                cur = next.with_tag(0);
            }
        }
        out
    }
}

impl Drop for ConnTable {
    fn drop(&mut self) {
        // SAFETY: `&mut self` means no other thread can hold references into
        // the table; nodes already unlinked were handed to the collector.
        unsafe {
            let guard = epoch::unprotected();
            for bucket in self.buckets.iter() {
                let mut cur = bucket.load(Ordering::Relaxed, guard);
                while !cur.is_null() {
                    let next = cur.deref().next.load(Ordering::Relaxed, guard).with_tag(0);
                    drop(cur.into_owned());
                    cur = next;
                }
            }
        }
    }
}
