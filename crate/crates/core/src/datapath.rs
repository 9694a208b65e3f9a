//! Per-packet NAT pipeline and the multi-worker driver around it.
//!
//! [`process_packet`] runs the four NAT stages in order: connection record
//! lookup, rule lookup on a miss, endpoint allocation and record install,
//! then the in-place rewrite. [`run_pipeline`] fans packets out to worker
//! threads by a direction-symmetric flow hash (software RSS) and gathers
//! their output back into input order for the sink.

use std::collections::VecDeque;
use std::error::Error as StdError;
use std::io::{self, Write};
use std::net::Ipv4Addr;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::Serialize;
use thiserror::Error;

use crate::conntrack::{ConnTable, CtError, Insertion, RecordData};
use crate::hash::{mix64, symmetric_hash, tuple_hash};
use crate::packet::{FiveTuple, PacketView, ParseMode, Side};
use crate::pool::{NatPool, PoolError};
use crate::rules::{NatType, RewritePort, RuleTableSet};
use crate::traffic::pcap::PcapWriter;
use crate::traffic::Packet;

const DISPATCH_SEED: u64 = 0x2f6b_8e3a_51c4_d907;

/// Which side of the gateway a packet arrived on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// From the private side; SNAT rules apply.
    Outbound,
    /// From the public side; DNAT rules apply.
    Inbound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verdict {
    /// Translated and sent on.
    Forward,
    Drop,
    /// Sent on untranslated.
    PassThrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Policy {
    /// Verdict when no rule matches a new flow.
    pub rule_miss: Verdict,
    /// Verdict for packets that cannot be translated: non-IPv4, protocols
    /// other than TCP/UDP, and non-first fragments.
    pub untranslatable: Verdict,
}

impl Default for Policy {
    fn default() -> Self {
        Policy {
            rule_miss: Verdict::PassThrough,
            untranslatable: Verdict::PassThrough,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct WorkerStats {
    pub packets_in: u64,
    pub packets_out: u64,
    pub dropped: u64,
    pub ct_hits: u64,
    pub rule_hits: u64,
    pub rule_misses: u64,
    pub malformed: u64,
    pub pass_through: u64,
    pub pool_exhausted: u64,
    pub table_full: u64,
    pub reply_conflicts: u64,
    pub races_lost: u64,
}

impl WorkerStats {
    fn count(&mut self, v: Verdict) {
        match v {
            Verdict::Forward => self.packets_out += 1,
            Verdict::PassThrough => {
                self.packets_out += 1;
                self.pass_through += 1;
            }
            Verdict::Drop => self.dropped += 1,
        }
    }

    pub fn merge(&mut self, o: &WorkerStats) {
        self.packets_in += o.packets_in;
        self.packets_out += o.packets_out;
        self.dropped += o.dropped;
        self.ct_hits += o.ct_hits;
        self.rule_hits += o.rule_hits;
        self.rule_misses += o.rule_misses;
        self.malformed += o.malformed;
        self.pass_through += o.pass_through;
        self.pool_exhausted += o.pool_exhausted;
        self.table_full += o.table_full;
        self.reply_conflicts += o.reply_conflicts;
        self.races_lost += o.races_lost;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PipelineStats {
    pub workers: Vec<WorkerStats>,
}

impl PipelineStats {
    pub fn totals(&self) -> WorkerStats {
        let mut t = WorkerStats::default();
        for w in &self.workers {
            t.merge(w);
        }
        t
    }
}

/// Shared state every worker needs.
#[derive(Debug, Clone)]
pub struct NatContext {
    pub rules: Arc<RuleTableSet>,
    pub conntrack: Arc<ConnTable>,
    pub pool: Option<Arc<NatPool>>,
    pub policy: Policy,
    /// Keys the flow hint passed to the pool.
    pub flow_seed: u64,
}

impl NatContext {
    pub fn new(
        rules: Arc<RuleTableSet>,
        conntrack: Arc<ConnTable>,
        pool: Option<Arc<NatPool>>,
    ) -> Self {
        NatContext {
            rules,
            conntrack,
            pool,
            policy: Policy::default(),
            flow_seed: 0,
        }
    }
}

/// Worker index for a flow. A tuple and its reverse map to the same worker.
#[inline]
pub fn dispatch(tuple: &FiveTuple, n_workers: usize) -> usize {
    if n_workers <= 1 {
        return 0;
    }
    (symmetric_hash(tuple, DISPATCH_SEED) % n_workers as u64) as usize
}

/// Worker for a packet in the pipeline. Only the remote endpoint feeds the
/// hash: translation rewrites the local side, so keying on the full tuple
/// would send a reply (already addressed to the public endpoint) to a
/// different worker than its flow, racing the record install.
fn dispatch_view<B: AsRef<[u8]>>(view: &PacketView<B>, dir: Direction, n_workers: usize) -> usize {
    if n_workers <= 1 {
        return 0;
    }
    if let Ok(t) = view.five_tuple() {
        return dispatch(&affinity_key(&t, dir), n_workers);
    }
    match view.ip_pair() {
        Some((a, b)) => {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let h =
                mix64((u64::from(u32::from(lo)) << 32 | u64::from(u32::from(hi))) ^ DISPATCH_SEED);
            (h % n_workers as u64) as usize
        }
        None => 0,
    }
}

/// `t` with the gateway-side endpoint blanked out.
pub fn affinity_key(t: &FiveTuple, dir: Direction) -> FiveTuple {
    match dir {
        Direction::Outbound => FiveTuple {
            src_ip: Ipv4Addr::UNSPECIFIED,
            src_port: 0,
            ..*t
        },
        Direction::Inbound => FiveTuple {
            dst_ip: Ipv4Addr::UNSPECIFIED,
            dst_port: 0,
            ..*t
        },
    }
}

fn apply<B: AsRef<[u8]> + AsMut<[u8]>>(
    pkt: &mut PacketView<B>,
    current: &FiveTuple,
    target: &FiveTuple,
) {
    // The view is valid here, so rewrite cannot fail.
    if current.src() != target.src() {
        let _ = pkt.rewrite(Side::Src, target.src_ip, Some(target.src_port));
    }
    if current.dst() != target.dst() {
        let _ = pkt.rewrite(Side::Dst, target.dst_ip, Some(target.dst_port));
    }
}

/// Translates one packet in place and returns what to do with it.
pub fn process_packet<B: AsRef<[u8]> + AsMut<[u8]>>(
    pkt: &mut PacketView<B>,
    dir: Direction,
    ctx: &NatContext,
    stats: &mut WorkerStats,
    now: Duration,
) -> Verdict {
    stats.packets_in += 1;
    let v = translate(pkt, dir, ctx, stats, now);
    stats.count(v);
    v
}

fn translate<B: AsRef<[u8]> + AsMut<[u8]>>(
    pkt: &mut PacketView<B>,
    dir: Direction,
    ctx: &NatContext,
    stats: &mut WorkerStats,
    now: Duration,
) -> Verdict {
    let Ok(tuple) = pkt.five_tuple() else {
        return ctx.policy.untranslatable;
    };

    if let Some(rec) = ctx.conntrack.lookup(&tuple, now) {
        stats.ct_hits += 1;
        apply(pkt, &tuple, &rec.translated);
        return Verdict::Forward;
    }

    let (nat_type, (ip, port)) = match dir {
        Direction::Outbound => (NatType::Snat, tuple.src()),
        Direction::Inbound => (NatType::Dnat, tuple.dst()),
    };
    let Some(rule) = ctx.rules.qns_lookup(nat_type, ip, port) else {
        stats.rule_misses += 1;
        return ctx.policy.rule_miss;
    };
    stats.rule_hits += 1;

    let mut lease = None;
    let (new_ip, new_port) = match rule.rewrite_port {
        RewritePort::Port(p) => (rule.rewrite_ip, p),
        RewritePort::Keep => (rule.rewrite_ip, port),
        RewritePort::FromPool => {
            let pinned = (!rule.rewrite_ip.is_unspecified()).then_some(rule.rewrite_ip);
            let allocated = match &ctx.pool {
                Some(pool) => {
                    pool.allocate_with(tuple.proto, pinned, Some(tuple_hash(&tuple, ctx.flow_seed)))
                }
                None => Err(PoolError::PoolExhausted(tuple.proto)),
            };
            match allocated {
                Ok(l) => {
                    lease = Some(l);
                    (l.ip, l.port)
                }
                Err(_) => {
                    stats.pool_exhausted += 1;
                    return Verdict::Drop;
                }
            }
        }
    };
    let translated = match nat_type {
        NatType::Snat => FiveTuple {
            src_ip: new_ip,
            src_port: new_port,
            ..tuple
        },
        NatType::Dnat => FiveTuple {
            dst_ip: new_ip,
            dst_port: new_port,
            ..tuple
        },
    };

    let data = RecordData {
        rule_generation: ctx.rules.generation(),
        lease,
    };
    let release = |ctx: &NatContext| {
        if let (Some(pool), Some(l)) = (&ctx.pool, lease) {
            let _ = pool.release(&l);
        }
    };
    match ctx
        .conntrack
        .insert_pair(tuple, translated.reversed(), data, now)
    {
        Ok(Insertion::Installed(rec)) => apply(pkt, &tuple, &rec.translated),
        Ok(Insertion::Existing(rec)) => {
            // Another worker set this flow up first; adopt its translation.
            release(ctx);
            stats.races_lost += 1;
            apply(pkt, &tuple, &rec.translated);
        }
        Err(e) => {
            release(ctx);
            match e {
                CtError::TableFull => stats.table_full += 1,
                CtError::ReplyInUse(_) | CtError::InvalidPair => stats.reply_conflicts += 1,
            }
            return Verdict::Drop;
        }
    }
    Verdict::Forward
}

/// A packet entering the gateway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingress {
    pub direction: Direction,
    pub mode: ParseMode,
    pub packet: Packet,
}

pub trait PacketSink {
    fn write_packet(&mut self, pkt: &Packet) -> io::Result<()>;
}

impl<W: Write> PacketSink for PcapWriter<W> {
    fn write_packet(&mut self, pkt: &Packet) -> io::Result<()> {
        PcapWriter::write_packet(self, pkt)
    }
}

impl PacketSink for Vec<Packet> {
    fn write_packet(&mut self, pkt: &Packet) -> io::Result<()> {
        self.push(pkt.clone());
        Ok(())
    }
}

/// Discards everything, counting packets and bytes.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullSink {
    pub packets: u64,
    pub bytes: u64,
}

impl PacketSink for NullSink {
    fn write_packet(&mut self, pkt: &Packet) -> io::Result<()> {
        self.packets += 1;
        self.bytes += pkt.data.len() as u64;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineConfig {
    pub workers: usize,
    /// Packets per hand-off between threads.
    pub batch_size: usize,
    /// Batches buffered per worker queue.
    pub queue_depth: usize,
    /// Emit packets in input order. Per-flow order holds either way.
    pub preserve_order: bool,
    /// Trace time between conntrack sweeps; `None` disables sweeping.
    pub sweep_interval: Option<Duration>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workers: 1,
            batch_size: 64,
            queue_depth: 16,
            preserve_order: true,
            sweep_interval: Some(Duration::from_secs(10)),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("packet source failed: {source}")]
    Source {
        source: Box<dyn StdError + Send + Sync>,
        stats: PipelineStats,
    },
    #[error("packet sink failed: {source}")]
    Sink {
        source: io::Error,
        stats: PipelineStats,
    },
}

impl PipelineError {
    /// Counters for the packets processed before the failure.
    pub fn stats(&self) -> &PipelineStats {
        match self {
            PipelineError::Source { stats, .. } | PipelineError::Sink { stats, .. } => stats,
        }
    }
}

struct Job {
    seq: u64,
    direction: Direction,
    mode: ParseMode,
    packet: Packet,
}

type OutBatch = Vec<(u64, Option<Packet>)>;

fn worker_loop(rx: Receiver<Vec<Job>>, tx: Sender<OutBatch>, ctx: &NatContext) -> WorkerStats {
    let mut stats = WorkerStats::default();
    for batch in rx {
        let mut out = Vec::with_capacity(batch.len());
        for mut job in batch {
            let now = job.packet.timestamp;
            let keep = match PacketView::parse(&mut job.packet.data[..], job.mode) {
                Ok(mut view) => {
                    process_packet(&mut view, job.direction, ctx, &mut stats, now) != Verdict::Drop
                }
                Err(_) => {
                    stats.packets_in += 1;
                    stats.malformed += 1;
                    stats.dropped += 1;
                    false
                }
            };
            out.push((job.seq, keep.then_some(job.packet)));
        }
        if tx.send(out).is_err() {
            break;
        }
    }
    stats
}

fn collect<S: PacketSink>(
    rx: Receiver<OutBatch>,
    sink: &mut S,
    preserve_order: bool,
) -> io::Result<()> {
    let mut result = Ok(());
    let mut emit = |p: &Packet| {
        if result.is_ok() {
            result = sink.write_packet(p);
        }
    };
    // pending[i] holds the outcome for sequence number base + i.
    let mut pending: VecDeque<Option<Option<Packet>>> = VecDeque::new();
    let mut base = 0u64;
    for batch in rx {
        for (seq, pkt) in batch {
            if !preserve_order {
                if let Some(p) = &pkt {
                    emit(p);
                }
                continue;
            }
            let idx = (seq - base) as usize;
            if pending.len() <= idx {
                pending.resize(idx + 1, None);
            }
            pending[idx] = Some(pkt);
            while let Some(Some(_)) = pending.front() {
                if let Some(Some(Some(p))) = pending.pop_front() {
                    emit(&p);
                }
                base += 1;
            }
        }
    }
    result
}

/// Runs every packet from `source` through `config.workers` parallel
/// workers and writes forwarded and passed-through packets to `sink`.
pub fn run_pipeline<I, E, S>(
    source: I,
    sink: &mut S,
    config: &PipelineConfig,
    ctx: &NatContext,
) -> Result<PipelineStats, PipelineError>
where
    I: IntoIterator<Item = Result<Ingress, E>>,
    E: Into<Box<dyn StdError + Send + Sync>>,
    S: PacketSink + Send,
{
    let n = config.workers.max(1);
    let batch_size = config.batch_size.max(1);
    let depth = config.queue_depth.max(1);

    thread::scope(|scope| {
        let (out_tx, out_rx) = bounded::<OutBatch>(depth * n);
        let mut senders = Vec::with_capacity(n);
        let mut workers = Vec::with_capacity(n);
        for _ in 0..n {
            let (tx, rx) = bounded::<Vec<Job>>(depth);
            let out_tx = out_tx.clone();
            senders.push(tx);
            workers.push(scope.spawn(move || worker_loop(rx, out_tx, ctx)));
        }
        drop(out_tx);
        let preserve = config.preserve_order;
        let collector = scope.spawn(move || collect(out_rx, sink, preserve));

        let mut batches: Vec<Vec<Job>> = (0..n).map(|_| Vec::with_capacity(batch_size)).collect();
        let mut source_err = None;
        let mut last_sweep: Option<Duration> = None;
        for (seq, item) in source.into_iter().enumerate() {
            let ingress = match item {
                Ok(i) => i,
                Err(e) => {
                    source_err = Some(e.into());
                    break;
                }
            };
            let ts = ingress.packet.timestamp;
            if let Some(interval) = config.sweep_interval {
                match last_sweep {
                    None => last_sweep = Some(ts),
                    Some(t) if ts >= t + interval => {
                        ctx.conntrack.sweep(ts);
                        last_sweep = Some(ts);
                    }
                    _ => {}
                }
            }
            let w = match PacketView::parse(&ingress.packet.data[..], ingress.mode) {
                Ok(view) => dispatch_view(&view, ingress.direction, n),
                Err(_) => 0,
            };
            batches[w].push(Job {
                seq: seq as u64,
                direction: ingress.direction,
                mode: ingress.mode,
                packet: ingress.packet,
            });
            if batches[w].len() >= batch_size {
                let full = std::mem::replace(&mut batches[w], Vec::with_capacity(batch_size));
                // A closed queue means the worker is gone; its stats still report.
                let _ = senders[w].send(full);
            }
        }
        for (w, b) in batches.into_iter().enumerate() {
            if !b.is_empty() {
                let _ = senders[w].send(b);
            }
        }
        drop(senders);

        let stats = PipelineStats {
            workers: workers
                .into_iter()
                .map(|h| h.join().expect("nat worker panicked"))
                .collect(),
        };
        let sink_result = collector.join().expect("sink thread panicked");
        if let Some(source) = source_err {
            return Err(PipelineError::Source { source, stats });
        }
        match sink_result {
            Ok(()) => Ok(stats),
            Err(source) => Err(PipelineError::Sink { source, stats }),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conntrack::CtConfig;
    use crate::packet::Protocol;
    use crate::pool::{AllocPolicy, PoolConfig};
    use crate::rules::NatRule;
    use crate::traffic::synth::{build_packet, generate, sequence_tag, PacketSpec, TrafficSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;
    use std::convert::Infallible;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn ctx_with(rules: Vec<NatRule>, policy: AllocPolicy) -> NatContext {
        let pool = Arc::new(
            NatPool::new(
                PoolConfig::new(vec![ip("203.0.113.7")]).with_ports(40001..=60000),
                policy,
            )
            .unwrap(),
        );
        let ct = Arc::new(ConnTable::with_pool(
            CtConfig {
                capacity: 1 << 16,
                ..CtConfig::default()
            },
            Some(pool.clone()),
        ));
        NatContext::new(
            Arc::new(RuleTableSet::from_rules(rules).unwrap()),
            ct,
            Some(pool),
        )
    }

    fn fig3_rule() -> NatRule {
        NatRule::new(
            NatType::Snat,
            ip("192.168.88.0"),
            24,
            None,
            ip("203.0.113.7"),
            RewritePort::FromPool,
        )
        .unwrap()
    }

    fn packet(src: (&str, u16), dst: (&str, u16)) -> Vec<u8> {
        build_packet(&PacketSpec {
            src_ip: ip(src.0),
            src_port: src.1,
            dst_ip: ip(dst.0),
            dst_port: dst.1,
            payload: b"payload!",
            ..PacketSpec::default()
        })
    }

    fn run(ctx: &NatContext, buf: &mut [u8], dir: Direction, stats: &mut WorkerStats) -> Verdict {
        let mut view = PacketView::parse(buf, ParseMode::Ipv4).unwrap();
        process_packet(&mut view, dir, ctx, stats, Duration::from_secs(1))
    }

    fn tuple(buf: &[u8]) -> FiveTuple {
        PacketView::parse(buf, ParseMode::Ipv4)
            .unwrap()
            .five_tuple()
            .unwrap()
    }

    #[test]
    fn dispatch_single_worker() {
        let t = FiveTuple::new(ip("1.2.3.4"), 1, ip("5.6.7.8"), 2, Protocol::Udp);
        assert_eq!(dispatch(&t, 1), 0);
    }

    #[test]
    fn dispatch_is_symmetric_and_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 6];
        for i in 0..100_000 {
            let t = FiveTuple::new(
                Ipv4Addr::from(rng.random::<u32>()),
                rng.random(),
                Ipv4Addr::from(rng.random::<u32>()),
                rng.random(),
                if rng.random_bool(0.5) {
                    Protocol::Tcp
                } else {
                    Protocol::Udp
                },
            );
            if i < 10_000 {
                assert_eq!(dispatch(&t, 8), dispatch(&t.reversed(), 8));
            }
            counts[dispatch(&t, 6)] += 1;
        }
        for c in counts {
            assert!((100_000 / 12..=100_000 / 3).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn translated_reply_keeps_affinity() {
        let out = FiveTuple::new(
            ip("192.168.88.32"),
            5000,
            ip("198.51.100.9"),
            80,
            Protocol::Tcp,
        );
        let reply = FiveTuple::new(
            ip("198.51.100.9"),
            80,
            ip("203.0.113.7"),
            40001,
            Protocol::Tcp,
        );
        for n in 2..16 {
            assert_eq!(
                dispatch(&affinity_key(&out, Direction::Outbound), n),
                dispatch(&affinity_key(&reply, Direction::Inbound), n)
            );
        }
    }

    #[test]
    fn first_packet_installs_and_second_hits_conntrack() {
        let ctx = ctx_with(vec![fig3_rule()], AllocPolicy::RoundRobin);
        let mut stats = WorkerStats::default();

        let mut p1 = packet(("192.168.88.32", 5000), ("198.51.100.9", 80));
        assert_eq!(
            run(&ctx, &mut p1, Direction::Outbound, &mut stats),
            Verdict::Forward
        );
        let t1 = tuple(&p1);
        assert_eq!(t1.src(), (ip("203.0.113.7"), 40001));
        assert!(PacketView::parse(&p1[..], ParseMode::Ipv4)
            .unwrap()
            .checksums_ok());
        assert_eq!(ctx.conntrack.len(), 1);
        assert_eq!(stats.rule_hits, 1);

        let mut p2 = packet(("192.168.88.32", 5000), ("198.51.100.9", 80));
        assert_eq!(
            run(&ctx, &mut p2, Direction::Outbound, &mut stats),
            Verdict::Forward
        );
        assert_eq!(tuple(&p2), t1);
        assert_eq!(stats.rule_hits, 1);
        assert_eq!(stats.ct_hits, 1);

        // Reply from the server to the public endpoint goes back to the host.
        let mut reply = packet(("198.51.100.9", 80), ("203.0.113.7", 40001));
        assert_eq!(
            run(&ctx, &mut reply, Direction::Inbound, &mut stats),
            Verdict::Forward
        );
        assert_eq!(tuple(&reply).dst(), (ip("192.168.88.32"), 5000));
        assert_eq!(tuple(&reply).src(), (ip("198.51.100.9"), 80));
        assert!(PacketView::parse(&reply[..], ParseMode::Ipv4)
            .unwrap()
            .checksums_ok());
        assert_eq!(stats.ct_hits, 2);
    }

    #[test]
    fn rule_miss_follows_policy() {
        let mut ctx = ctx_with(vec![fig3_rule()], AllocPolicy::RoundRobin);
        let mut stats = WorkerStats::default();
        let mut p = packet(("10.9.9.9", 5000), ("198.51.100.9", 80));
        let before = p.clone();
        assert_eq!(
            run(&ctx, &mut p, Direction::Outbound, &mut stats),
            Verdict::PassThrough
        );
        assert_eq!(p, before);
        ctx.policy.rule_miss = Verdict::Drop;
        assert_eq!(
            run(&ctx, &mut p, Direction::Outbound, &mut stats),
            Verdict::Drop
        );
        assert_eq!(
            (stats.rule_misses, stats.pass_through, stats.dropped),
            (2, 1, 1)
        );
    }

    #[test]
    fn non_tcp_udp_untouched() {
        let mut ctx = ctx_with(vec![fig3_rule()], AllocPolicy::RoundRobin);
        let mut stats = WorkerStats::default();
        let mut p = packet(("192.168.88.32", 5000), ("198.51.100.9", 80));
        p[9] = 1;
        assert_eq!(
            run(&ctx, &mut p, Direction::Outbound, &mut stats),
            Verdict::PassThrough
        );
        ctx.policy.untranslatable = Verdict::Drop;
        assert_eq!(
            run(&ctx, &mut p, Direction::Outbound, &mut stats),
            Verdict::Drop
        );
        assert!(ctx.conntrack.is_empty());
    }

    #[test]
    fn dnat_rule_with_kept_port() {
        let rule = NatRule::new(
            NatType::Dnat,
            ip("203.0.113.7"),
            32,
            Some(8080),
            ip("192.168.88.10"),
            RewritePort::Keep,
        )
        .unwrap();
        let ctx = ctx_with(vec![rule], AllocPolicy::RoundRobin);
        let mut stats = WorkerStats::default();
        let mut p = packet(("198.51.100.9", 33000), ("203.0.113.7", 8080));
        assert_eq!(
            run(&ctx, &mut p, Direction::Inbound, &mut stats),
            Verdict::Forward
        );
        assert_eq!(tuple(&p).dst(), (ip("192.168.88.10"), 8080));
        let mut back = packet(("192.168.88.10", 8080), ("198.51.100.9", 33000));
        assert_eq!(
            run(&ctx, &mut back, Direction::Outbound, &mut stats),
            Verdict::Forward
        );
        assert_eq!(tuple(&back).src(), (ip("203.0.113.7"), 8080));
    }

    #[test]
    fn pool_exhaustion_drops() {
        let pool = Arc::new(
            NatPool::new(
                PoolConfig::new(vec![ip("203.0.113.7")]).with_ports(40001..=40001),
                AllocPolicy::RoundRobin,
            )
            .unwrap(),
        );
        let ct = Arc::new(ConnTable::with_pool(
            CtConfig {
                capacity: 64,
                ..CtConfig::default()
            },
            Some(pool.clone()),
        ));
        let ctx = NatContext::new(
            Arc::new(RuleTableSet::from_rules([fig3_rule()]).unwrap()),
            ct,
            Some(pool.clone()),
        );
        let mut stats = WorkerStats::default();
        let mut a = packet(("192.168.88.1", 1000), ("198.51.100.9", 80));
        let mut b = packet(("192.168.88.2", 1000), ("198.51.100.9", 80));
        assert_eq!(
            run(&ctx, &mut a, Direction::Outbound, &mut stats),
            Verdict::Forward
        );
        assert_eq!(
            run(&ctx, &mut b, Direction::Outbound, &mut stats),
            Verdict::Drop
        );
        assert_eq!(stats.pool_exhausted, 1);
    }

    #[test]
    fn table_full_drops_and_releases_lease() {
        let pool = Arc::new(
            NatPool::new(
                PoolConfig::new(vec![ip("203.0.113.7")]),
                AllocPolicy::RoundRobin,
            )
            .unwrap(),
        );
        let ct = Arc::new(ConnTable::with_pool(
            CtConfig {
                capacity: 2,
                ..CtConfig::default()
            },
            Some(pool.clone()),
        ));
        let ctx = NatContext::new(
            Arc::new(RuleTableSet::from_rules([fig3_rule()]).unwrap()),
            ct,
            Some(pool.clone()),
        );
        let mut stats = WorkerStats::default();
        let mut a = packet(("192.168.88.1", 1000), ("198.51.100.9", 80));
        let mut b = packet(("192.168.88.2", 1000), ("198.51.100.9", 80));
        assert_eq!(
            run(&ctx, &mut a, Direction::Outbound, &mut stats),
            Verdict::Forward
        );
        assert_eq!(
            run(&ctx, &mut b, Direction::Outbound, &mut stats),
            Verdict::Drop
        );
        assert_eq!(stats.table_full, 1);
        assert_eq!(pool.leased(Protocol::Tcp), 1);
    }

    fn ingress(packets: impl IntoIterator<Item = Packet>) -> Vec<Result<Ingress, Infallible>> {
        packets
            .into_iter()
            .map(|packet| {
                Ok(Ingress {
                    direction: Direction::Outbound,
                    mode: ParseMode::Ipv4,
                    packet,
                })
            })
            .collect()
    }

    #[test]
    fn empty_source_gives_zero_stats() {
        let ctx = ctx_with(vec![fig3_rule()], AllocPolicy::RoundRobin);
        let mut sink = Vec::new();
        let stats = run_pipeline(ingress([]), &mut sink, &PipelineConfig::default(), &ctx).unwrap();
        assert_eq!(stats.totals(), WorkerStats::default());
        assert!(sink.is_empty());
    }

    #[test]
    fn multi_worker_preserves_order_and_counts() {
        let spec = TrafficSpec {
            n_flows: 100,
            packets_per_flow: 20,
            private_subnet: "192.168.88.0/24".parse().unwrap(),
            seed: 4,
            ..TrafficSpec::default()
        };
        let input: Vec<Packet> = generate(&spec).unwrap().collect();
        let ctx = ctx_with(vec![fig3_rule()], AllocPolicy::FlowHash { seed: 9 });
        let mut sink = Vec::new();
        let config = PipelineConfig {
            workers: 4,
            batch_size: 8,
            ..PipelineConfig::default()
        };
        let stats = run_pipeline(ingress(input.clone()), &mut sink, &config, &ctx).unwrap();
        let totals = stats.totals();
        assert_eq!(stats.workers.len(), 4);
        assert_eq!(totals.packets_in, 2000);
        assert_eq!(totals.packets_out, 2000);
        assert_eq!(sink.len(), 2000);
        let mut last: HashMap<u32, u32> = HashMap::new();
        for (i, p) in sink.iter().enumerate() {
            // Input order restored; timestamps are the input positions.
            assert_eq!(p.timestamp, input[i].timestamp);
            let (flow, seq) = sequence_tag(&p.data, ParseMode::Ipv4).unwrap();
            if let Some(prev) = last.insert(flow, seq) {
                assert_eq!(seq, prev + 1);
            }
        }
    }

    #[test]
    fn malformed_packets_are_counted() {
        let ctx = ctx_with(vec![fig3_rule()], AllocPolicy::RoundRobin);
        let mut sink = Vec::new();
        let bad = Packet::new(Duration::ZERO, vec![0x45; 10]);
        let stats =
            run_pipeline(ingress([bad]), &mut sink, &PipelineConfig::default(), &ctx).unwrap();
        assert_eq!(stats.totals().malformed, 1);
        assert_eq!(stats.totals().dropped, 1);
        assert!(sink.is_empty());
    }

    #[test]
    fn source_error_reports_partial_stats() {
        let ctx = ctx_with(vec![fig3_rule()], AllocPolicy::RoundRobin);
        let good = Packet::new(
            Duration::ZERO,
            packet(("192.168.88.32", 5000), ("198.51.100.9", 80)),
        );
        let items: Vec<Result<Ingress, io::Error>> = vec![
            Ok(Ingress {
                direction: Direction::Outbound,
                mode: ParseMode::Ipv4,
                packet: good,
            }),
            Err(io::Error::other("disk on fire")),
        ];
        let err = run_pipeline(
            items,
            &mut NullSink::default(),
            &PipelineConfig::default(),
            &ctx,
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::Source { .. }));
        assert_eq!(err.stats().totals().packets_in, 1);
    }

    struct FailingSink;
    impl PacketSink for FailingSink {
        fn write_packet(&mut self, _: &Packet) -> io::Result<()> {
            Err(io::Error::other("full"))
        }
    }

    #[test]
    fn sink_error_propagates() {
        let ctx = ctx_with(vec![fig3_rule()], AllocPolicy::RoundRobin);
        let input = generate(&TrafficSpec {
            n_flows: 10,
            ..TrafficSpec::default()
        })
        .unwrap();
        let err = run_pipeline(
            ingress(input),
            &mut FailingSink,
            &PipelineConfig::default(),
            &ctx,
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::Sink { .. }));
        assert_eq!(err.stats().totals().packets_in, 100);
    }
}
