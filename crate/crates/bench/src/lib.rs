//! Lookup-latency and pipeline-throughput benchmarks for qnat.
//!
//! The lookup bench times single rule lookups one at a time against a seeded
//! random rule set, for both the prefix-partitioned hash lookup and a plain
//! linear scan. The throughput bench pushes synthetic traffic through the
//! full multi-worker pipeline into a null sink.

use std::collections::HashSet;
use std::fmt;
use std::hint::black_box;
use std::io::{self, Write};
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use qnat_core::traffic::synth::{generate, SpecError, TrafficSpec};
use qnat_core::{
    linear_lookup, AllocPolicy, ConnTable, CtConfig, Direction, Ingress, NatContext, NatPool,
    NatRule, NatType, NullSink, ParseMode, PipelineConfig, PipelineStats, PoolConfig, RewritePort,
    RuleTableSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub mod stats;

pub use stats::Summary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Qns,
    Linear,
}

impl Algorithm {
    pub const ALL: [Algorithm; 2] = [Algorithm::Qns, Algorithm::Linear];
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Qns => "qns",
            Algorithm::Linear => "linear",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "qns" => Ok(Algorithm::Qns),
            "linear" => Ok(Algorithm::Linear),
            _ => Err(format!("unknown algorithm {s:?} (expected qns or linear)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub algorithm: Algorithm,
    pub rule_count: usize,
    pub lookups: usize,
    pub mean_ns: f64,
    pub p50_ns: f64,
    pub p99_ns: f64,
    pub seed: u64,
}

pub const DEFAULT_QUERIES: usize = 100_000;
pub const QUICK_QUERIES: usize = 100;
pub const DEFAULT_WARMUP: usize = 10_000;
/// Rule counts of the published lookup-time table.
pub const TABLE_RULE_COUNTS: [usize; 5] = [100, 1000, 3000, 5000, 10_000];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    /// Untimed lookups run before measurement starts.
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            warmup: DEFAULT_WARMUP,
        }
    }
}

/// A seeded rule set plus the query keys to run against it.
#[derive(Debug, Clone)]
pub struct Workload {
    pub seed: u64,
    pub rules: Vec<NatRule>,
    pub tables: RuleTableSet,
    /// The same rules in precedence order, for the linear scan.
    pub linear: Vec<NatRule>,
    pub queries: Vec<(Ipv4Addr, u16)>,
}

impl Workload {
    /// `rule_count` distinct SNAT rules with prefix lengths drawn uniformly
    /// from {16, 24, 32}, half of them wildcard-port, and `n_queries` keys
    /// each built to fall inside a randomly chosen rule.
    pub fn new(rule_count: usize, n_queries: usize, seed: u64) -> Self {
        assert!(rule_count >= 1, "rule_count must be at least 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::with_capacity(rule_count);
        let mut rules = Vec::with_capacity(rule_count);
        let target = Ipv4Addr::new(203, 0, 113, 7);
        while rules.len() < rule_count {
            let prefix = [16u8, 24, 32][rng.random_range(0..3)];
            let port = rng.random_bool(0.5).then(|| rng.random_range(1..=u16::MAX));
            let Ok(rule) = NatRule::new(
                NatType::Snat,
                Ipv4Addr::from(rng.random::<u32>()),
                prefix,
                port,
                target,
                RewritePort::FromPool,
            ) else {
                continue;
            };
            if seen.insert((rule.match_ip, rule.prefix_len, rule.match_port)) {
                rules.push(rule);
            }
        }
        let tables = RuleTableSet::from_rules(rules.iter().cloned()).expect("rules are distinct");
        let linear = tables.to_precedence_list();

        let queries = (0..n_queries)
            .map(|_| {
                let r = &rules[rng.random_range(0..rules.len())];
                let host = !qnat_core::rules::prefix_mask(r.prefix_len);
                let ip = Ipv4Addr::from(u32::from(r.match_ip) | (rng.random::<u32>() & host));
                let port = r
                    .match_port
                    .unwrap_or_else(|| rng.random_range(1..=u16::MAX));
                (ip, port)
            })
            .collect();
        Workload {
            seed,
            rules,
            tables,
            linear,
            queries,
        }
    }

    #[inline]
    pub fn lookup(&self, algorithm: Algorithm, ip: Ipv4Addr, port: u16) -> Option<&NatRule> {
        match algorithm {
            Algorithm::Qns => self.tables.qns_lookup(NatType::Snat, ip, port),
            Algorithm::Linear => linear_lookup(&self.linear, NatType::Snat, ip, port),
        }
    }
}

fn other(a: Algorithm) -> Algorithm {
    match a {
        Algorithm::Qns => Algorithm::Linear,
        Algorithm::Linear => Algorithm::Qns,
    }
}

/// Times every query of `workload` once and returns the result with the
/// raw per-lookup samples in nanoseconds.
///
/// Panics if any timed answer differs from the other algorithm's answer or
/// if a query matches no rule.
pub fn measure(
    workload: &Workload,
    algorithm: Algorithm,
    options: BenchOptions,
) -> (BenchResult, Vec<u64>) {
    let n = workload.queries.len();
    assert!(n > 0, "at least one query is required");
    for i in 0..options.warmup {
        let (ip, port) = workload.queries[i % n];
        black_box(workload.lookup(algorithm, black_box(ip), black_box(port)));
    }

    let mut samples = Vec::with_capacity(n);
    let mut answers = Vec::with_capacity(n);
    for &(ip, port) in &workload.queries {
        let start = Instant::now();
        let hit = black_box(workload.lookup(algorithm, black_box(ip), black_box(port)));
        let elapsed = start.elapsed();
        samples.push(elapsed.as_nanos() as u64);
        answers.push(hit);
    }

    let check = other(algorithm);
    for (&(ip, port), got) in workload.queries.iter().zip(&answers) {
        let want = workload.lookup(check, ip, port);
        assert!(got.is_some(), "query {ip}:{port} matched no rule");
        assert_eq!(
            *got, want,
            "{algorithm} and {check} disagree on {ip}:{port}"
        );
    }

    let summary = Summary::from_samples(&samples);
    let result = BenchResult {
        algorithm,
        rule_count: workload.rules.len(),
        lookups: n,
        mean_ns: summary.mean,
        p50_ns: summary.p50,
        p99_ns: summary.p99,
        seed: workload.seed,
    };
    (result, samples)
}

pub fn run_lookup_bench(
    rule_count: usize,
    n_queries: usize,
    algorithm: Algorithm,
    seed: u64,
) -> BenchResult {
    let workload = Workload::new(rule_count, n_queries, seed);
    measure(&workload, algorithm, BenchOptions::default()).0
}

/// Mean cost in nanoseconds of an empty timed region, i.e. the clock-read
/// overhead included in every lookup sample.
pub fn timer_baseline(iterations: usize) -> f64 {
    let iterations = iterations.max(1);
    let mut total = 0u64;
    for _ in 0..iterations {
        let start = Instant::now();
        black_box(());
        total += start.elapsed().as_nanos() as u64;
    }
    total as f64 / iterations as f64
}

/// Writes one CSV row per result, in the given order, under a header.
pub fn emit_report<W: Write>(results: &[BenchResult], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if results.is_empty() {
        w.write_record([
            "algorithm",
            "rule_count",
            "lookups",
            "mean_ns",
            "p50_ns",
            "p99_ns",
            "seed",
        ])?;
    }
    for r in results {
        w.serialize(r)?;
    }
    w.flush()
}

pub fn emit_json<W: Write>(results: &[BenchResult], mut out: W) -> io::Result<()> {
    serde_json::to_writer_pretty(&mut out, results)?;
    writeln!(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ThroughputResult {
    pub workers: usize,
    pub packets: u64,
    pub elapsed: Duration,
    pub packets_per_sec: f64,
    pub stats: PipelineStats,
}

/// Builds a NAT context that translates every private source in `spec`.
pub fn throughput_context(spec: &TrafficSpec) -> NatContext {
    let rule = NatRule::new(
        NatType::Snat,
        spec.private_subnet.addr,
        spec.private_subnet.prefix.max(1),
        None,
        Ipv4Addr::UNSPECIFIED,
        RewritePort::FromPool,
    )
    .expect("subnet rule is valid");
    let ips = (1..=8).map(|i| Ipv4Addr::new(203, 0, 113, i)).collect();
    let pool = Arc::new(
        NatPool::new(
            PoolConfig::new(ips),
            AllocPolicy::FlowHash { seed: spec.seed },
        )
        .expect("pool"),
    );
    let capacity = (spec.n_flows * 4).next_power_of_two().max(1 << 12);
    let ct = Arc::new(ConnTable::with_pool(
        CtConfig {
            capacity,
            ..CtConfig::default()
        },
        Some(pool.clone()),
    ));
    NatContext::new(
        Arc::new(RuleTableSet::from_rules([rule]).expect("one rule")),
        ct,
        Some(pool),
    )
}

/// Generates the trace up front, then times only the pipeline run.
pub fn run_throughput_bench(
    spec: &TrafficSpec,
    n_workers: usize,
) -> Result<ThroughputResult, SpecError> {
    let packets: Vec<_> = generate(spec)?
        .map(|packet| {
            Ok::<_, io::Error>(Ingress {
                direction: Direction::Outbound,
                mode: ParseMode::Ipv4,
                packet,
            })
        })
        .collect();
    let ctx = throughput_context(spec);
    let config = PipelineConfig {
        workers: n_workers,
        batch_size: 256,
        preserve_order: false,
        sweep_interval: None,
        ..PipelineConfig::default()
    };
    let mut sink = NullSink::default();
    let start = Instant::now();
    let stats = qnat_core::run_pipeline(packets, &mut sink, &config, &ctx)
        .expect("in-memory pipeline cannot fail");
    let elapsed = start.elapsed();
    let packets = stats.totals().packets_in;
    let secs = elapsed.as_secs_f64();
    Ok(ThroughputResult {
        workers: n_workers,
        packets,
        elapsed,
        packets_per_sec: if packets == 0 || secs == 0.0 {
            0.0
        } else {
            packets as f64 / secs
        },
        stats,
    })
}
