//! `natctl`: run the qnat gateway over pcap files or synthetic traffic, and
//! benchmark rule lookup.

pub mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::iter::Peekable;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use qnat_bench::{
    emit_json, emit_report, measure, timer_baseline, Algorithm, BenchOptions, Workload,
};
use qnat_core::traffic::pcap::{PcapError, PcapReader, PcapWriter};
use qnat_core::traffic::synth::{generate, Ipv4Net, TrafficSpec};
use qnat_core::{
    run_pipeline, AllocPolicy, ConnTable, CtConfig, CtStats, Direction, Ingress, LinkType,
    NatContext, NatPool, NullSink, Packet, PacketSink, ParseMode, PipelineConfig, PipelineError,
    PipelineStats, PoolOccupancy, RuleTableSet, WorkerStats,
};
use serde::Serialize;

pub use config::{parse_config, ConfigDocument, ConfigError};

#[derive(Debug, Parser)]
#[command(
    name = "natctl",
    version,
    about = "Userspace NAT gateway over pcap files and synthetic traffic"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Translate packets from pcap files or generated traffic.
    Run(RunArgs),
    /// Time rule lookups for the hash-partitioned and linear algorithms.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Gateway configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Capture of packets arriving on the private side (SNAT applies).
    #[arg(long)]
    pub in_private: Option<PathBuf>,
    /// Capture of packets arriving on the public side (DNAT applies).
    #[arg(long)]
    pub in_public: Option<PathBuf>,
    /// Generate this many outbound flows instead of reading captures.
    #[arg(long, conflicts_with_all = ["in_private", "in_public"])]
    pub synthetic_flows: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub packets_per_flow: usize,
    #[arg(long, default_value = "192.168.0.0/16")]
    pub private_subnet: Ipv4Net,
    #[arg(long, default_value = "198.51.100.0/24")]
    pub remote_subnet: Ipv4Net,
    #[arg(long, default_value_t = 0.5)]
    pub tcp_fraction: f64,
    /// IPv4 total length of generated packets.
    #[arg(long, default_value_t = 64)]
    pub packet_size: usize,
    #[arg(long, default_value_t = 1)]
    pub traffic_seed: u64,
    /// Write forwarded packets here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `workers` from the configuration (default 1).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub stats_json: Option<PathBuf>,
    /// Make pool allocation a function of the flow and this seed rather
    /// than of arrival order.
    #[arg(long)]
    pub pool_seed: Option<u64>,
    #[arg(long, default_value_t = qnat_core::conntrack::DEFAULT_CAPACITY)]
    pub conntrack_capacity: usize,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Comma-separated rule counts.
    #[arg(long, value_delimiter = ',', default_values_t = qnat_bench::TABLE_RULE_COUNTS)]
    pub rules: Vec<usize>,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = Algorithm::ALL)]
    pub algorithms: Vec<Algorithm>,
    /// Timed lookups per result (at least 100).
    #[arg(long, conflicts_with = "quick")]
    pub queries: Option<usize>,
    /// 100 timed lookups per result instead of the default 100000.
    #[arg(long)]
    pub quick: bool,
    #[arg(long, default_value_t = qnat_bench::DEFAULT_WARMUP)]
    pub warmup: usize,
    /// JSON array instead of CSV.
    #[arg(long)]
    pub json: bool,
    /// Report file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration. Exit code 1.
    Config(Vec<String>),
    /// Reading or writing packets or reports failed. Exit code 2.
    Io(String),
}

impl CliError {
    fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
        }
    }

    /// One `natctl: <kind>: <message>` line per problem.
    pub fn lines(&self) -> Vec<String> {
        match self {
            CliError::Config(msgs) => msgs
                .iter()
                .map(|m| format!("natctl: config-error: {m}"))
                .collect(),
            CliError::Io(m) => vec![format!("natctl: io-error: {m}")],
        }
    }
}

pub fn load_config(path: &Path) -> Result<ConfigDocument, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|errs| {
        CliError::Config(
            errs.iter()
                .map(|e| format!("{}:{}: {}", path.display(), e.line, e.kind))
                .collect(),
        )
    })
}

/// Rules, conntrack and pool wired together as `natctl run` does it.
pub fn build_context(
    doc: &ConfigDocument,
    pool_seed: Option<u64>,
    ct_capacity: usize,
) -> Result<NatContext, CliError> {
    let policy = match pool_seed {
        Some(seed) => AllocPolicy::FlowHash { seed },
        None => AllocPolicy::RoundRobin,
    };
    let pool = match &doc.pool {
        Some(cfg) => Some(Arc::new(
            NatPool::new(cfg.clone(), policy).map_err(|e| CliError::config(e.to_string()))?,
        )),
        None => None,
    };
    let rules = RuleTableSet::from_rules(doc.rules.iter().cloned())
        .map_err(|e| CliError::config(e.to_string()))?;
    if ct_capacity < 2 {
        return Err(CliError::config("conntrack capacity must be at least 2"));
    }
    let ct = ConnTable::with_pool(
        CtConfig {
            capacity: ct_capacity,
            timeouts: doc.timeouts,
            ..CtConfig::default()
        },
        pool.clone(),
    );
    let mut ctx = NatContext::new(Arc::new(rules), Arc::new(ct), pool);
    ctx.policy = doc.policy;
    ctx.flow_seed = pool_seed.unwrap_or(0);
    Ok(ctx)
}

struct Side {
    reader: Peekable<PcapReader<BufReader<File>>>,
    direction: Direction,
    mode: ParseMode,
}

/// Interleaves the two captures by timestamp; the private side goes first
/// on ties.
struct Merged {
    sides: Vec<Side>,
}

impl Iterator for Merged {
    type Item = Result<Ingress, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut best: Option<(usize, Duration)> = None;
        for (i, side) in self.sides.iter_mut().enumerate() {
            match side.reader.peek() {
                None => {}
                Some(Err(_)) => {
                    best = Some((i, Duration::ZERO));
                    break;
                }
                Some(Ok(p)) if best.is_none_or(|(_, t)| p.timestamp < t) => {
                    best = Some((i, p.timestamp));
                }
                Some(Ok(_)) => {}
            }
        }
        let side = &mut self.sides[best?.0];
        let (direction, mode) = (side.direction, side.mode);
        Some(side.reader.next()?.map(|packet| Ingress {
            direction,
            mode,
            packet,
        }))
    }
}

fn open_captures(args: &RunArgs) -> Result<(Merged, LinkType), CliError> {
    let mut sides = Vec::new();
    let mut link: Option<LinkType> = None;
    for (path, direction) in [
        (&args.in_private, Direction::Outbound),
        (&args.in_public, Direction::Inbound),
    ] {
        let Some(path) = path else { continue };
        let reader =
            PcapReader::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let lt = reader.link_type();
        let mode = lt.parse_mode().ok_or_else(|| {
            CliError::Io(format!("{}: unsupported link type {lt}", path.display()))
        })?;
        if link.is_some_and(|l| l.parse_mode() != Some(mode)) {
            return Err(CliError::Io(
                "input captures have different link types".into(),
            ));
        }
        link.get_or_insert(lt);
        sides.push(Side {
            reader: reader.peekable(),
            direction,
            mode,
        });
    }
    Ok((Merged { sides }, link.unwrap_or(LinkType::RAW)))
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub workers: usize,
    pub elapsed_secs: f64,
    pub totals: WorkerStats,
    pub per_worker: Vec<WorkerStats>,
    pub conntrack: CtStats,
    pub pool: Option<PoolOccupancy>,
}

impl RunReport {
    fn new(stats: &PipelineStats, ctx: &NatContext, elapsed: Duration) -> Self {
        RunReport {
            workers: stats.workers.len(),
            elapsed_secs: elapsed.as_secs_f64(),
            totals: stats.totals(),
            per_worker: stats.workers.clone(),
            conntrack: ctx.conntrack.stats(),
            pool: ctx.pool.as_ref().map(|p| p.occupancy()),
        }
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> io::Result<()> {
        let row = |w: &mut W, name: &str, s: &WorkerStats| {
            writeln!(
                w,
                "{name:<8}{:>10}{:>10}{:>9}{:>10}{:>10}{:>9}{:>10}{:>9}",
                s.packets_in,
                s.packets_out,
                s.dropped,
                s.ct_hits,
                s.rule_hits,
                s.rule_misses,
                s.malformed,
                s.pass_through
            )
        };
        writeln!(
            w,
            "{:<8}{:>10}{:>10}{:>9}{:>10}{:>10}{:>9}{:>10}{:>9}",
            "worker",
            "in",
            "out",
            "dropped",
            "ct_hits",
            "rule_hits",
            "misses",
            "malformed",
            "passed"
        )?;
        for (i, s) in self.per_worker.iter().enumerate() {
            row(&mut w, &i.to_string(), s)?;
        }
        row(&mut w, "total", &self.totals)?;
        let t = &self.totals;
        writeln!(
            w,
            "drops: pool_exhausted={} table_full={} reply_conflicts={}; races_lost={}",
            t.pool_exhausted, t.table_full, t.reply_conflicts, t.races_lost
        )?;
        let c = &self.conntrack;
        writeln!(
            w,
            "conntrack: live_pairs={} installed={} evictions={} capacity={}",
            c.live_pairs, c.installed, c.evictions, c.capacity
        )?;
        if let Some(p) = &self.pool {
            writeln!(w, "pool: {}", serde_json::to_string(p).unwrap_or_default())?;
        }
        writeln!(w, "elapsed: {:.3}s", self.elapsed_secs)
    }
}

enum Sink {
    Pcap(PcapWriter<BufWriter<File>>),
    Null(NullSink),
}

impl PacketSink for Sink {
    fn write_packet(&mut self, pkt: &Packet) -> io::Result<()> {
        match self {
            Sink::Pcap(w) => PacketSink::write_packet(w, pkt),
            Sink::Null(n) => n.write_packet(pkt),
        }
    }
}

pub fn cmd_run<W: Write>(args: &RunArgs, mut stdout: W) -> Result<RunReport, CliError> {
    let doc = load_config(&args.config)?;
    let workers = args.workers.or(doc.workers).unwrap_or(1);
    if workers == 0 {
        return Err(CliError::config("--workers must be at least 1"));
    }
    let ctx = build_context(&doc, args.pool_seed, args.conntrack_capacity)?;

    type Source = Box<dyn Iterator<Item = Result<Ingress, PcapError>> + Send>;
    let (source, link): (Source, LinkType) = match args.synthetic_flows {
        Some(n_flows) => {
            let spec = TrafficSpec {
                n_flows,
                packets_per_flow: args.packets_per_flow,
                private_subnet: args.private_subnet,
                remote_subnet: args.remote_subnet,
                tcp_fraction: args.tcp_fraction,
                packet_size: args.packet_size,
                seed: args.traffic_seed,
            };
            let gen = generate(&spec).map_err(|e| CliError::config(e.to_string()))?;
            let it = gen.map(|packet| {
                Ok(Ingress {
                    direction: Direction::Outbound,
                    mode: ParseMode::Ipv4,
                    packet,
                })
            });
            (Box::new(it), LinkType::RAW)
        }
        None => {
            if args.in_private.is_none() && args.in_public.is_none() {
                return Err(CliError::config(
                    "no input: give --in-private, --in-public or --synthetic-flows",
                ));
            }
            let (merged, link) = open_captures(args)?;
            (Box::new(merged), link)
        }
    };

    let mut sink = match &args.out {
        Some(path) => Sink::Pcap(
            PcapWriter::create(path, link)
                .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
        ),
        None => Sink::Null(NullSink::default()),
    };
    let config = PipelineConfig {
        workers,
        ..PipelineConfig::default()
    };
    let start = Instant::now();
    let result = run_pipeline(source, &mut sink, &config, &ctx);
    let elapsed = start.elapsed();

    let (stats, failure) = match result {
        Ok(stats) => (stats, None),
        Err(e) => {
            let msg = match &e {
                PipelineError::Source { source, .. } => format!("reading input: {source}"),
                PipelineError::Sink { source, .. } => format!("writing output: {source}"),
            };
            (e.stats().clone(), Some(CliError::Io(msg)))
        }
    };
    if let Sink::Pcap(w) = &mut sink {
        if let Err(e) = w.flush() {
            return Err(CliError::Io(format!("writing output: {e}")));
        }
    }
    let report = RunReport::new(&stats, &ctx, elapsed);
    report
        .write_summary(&mut stdout)
        .map_err(|e| CliError::Io(e.to_string()))?;
    if let Some(path) = &args.stats_json {
        let json = serde_json::to_vec_pretty(&report).expect("report serializes");
        fs::write(path, json).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

pub fn cmd_bench<W: Write>(
    args: &BenchArgs,
    stdout: W,
    mut stderr: impl Write,
) -> Result<Vec<qnat_bench::BenchResult>, CliError> {
    let queries = if args.quick {
        qnat_bench::QUICK_QUERIES
    } else {
        args.queries.unwrap_or(qnat_bench::DEFAULT_QUERIES)
    };
    if queries < 100 {
        return Err(CliError::config("--queries must be at least 100"));
    }
    if let Some(bad) = args.rules.iter().find(|&&n| n == 0) {
        return Err(CliError::config(format!("invalid rule count {bad}")));
    }
    if args.rules.is_empty() || args.algorithms.is_empty() {
        return Err(CliError::config("nothing to run"));
    }
    let baseline = timer_baseline(100_000);
    let _ = writeln!(
        stderr,
        "# timer baseline: {baseline:.1} ns per sample (included in every lookup time)"
    );

    let options = BenchOptions {
        warmup: args.warmup,
    };
    let mut results = Vec::new();
    for &n in &args.rules {
        let workload = Workload::new(n, queries, args.seed);
        for &alg in &args.algorithms {
            results.push(measure(&workload, alg, options).0);
        }
    }

    let write = |out: &mut dyn Write| -> io::Result<()> {
        if args.json {
            emit_json(&results, out)
        } else {
            emit_report(&results, out)
        }
    };
    match &args.out {
        Some(path) => {
            let mut f =
                File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            write(&mut f).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        }
        None => {
            let mut out = stdout;
            write(&mut out).map_err(|e| CliError::Io(format!("writing report: {e}")))?;
        }
    }
    Ok(results)
}

/// Entry point shared by the binary and the tests.
pub fn run_cli<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let first = rendered
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("natctl: usage-error: {first}");
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args, io::stdout().lock()).map(|_| ()),
        Command::Bench(args) => cmd_bench(args, io::stdout().lock(), io::stderr()).map(|_| ()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            for line in e.lines() {
                eprintln!("{line}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
