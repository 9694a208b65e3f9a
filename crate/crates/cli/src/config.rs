//! The line-oriented gateway configuration format.
//!
//! ```text
//! # comments run to end of line
//! pool 203.0.113.7,203.0.113.8 ports 40000-40999
//! snat 192.168.88.0/24 * -> 203.0.113.7 pool
//! dnat 203.0.113.7/32 8080 -> 192.168.88.10 *
//! policy miss forward
//! policy fragment drop
//! timeout tcp 300
//! timeout udp 60
//! workers 4
//! ```
//!
//! A snat target of `0.0.0.0 pool` leases from any pool address; a named
//! address restricts leasing to that address, which must be in the pool.
//! A `*` target port keeps the original port.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::time::Duration;

use qnat_core::{NatRule, NatType, Policy, PoolConfig, RewritePort, Timeouts, Verdict};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigDocument {
    pub rules: Vec<NatRule>,
    pub pool: Option<PoolConfig>,
    pub policy: Policy,
    pub timeouts: Timeouts,
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("invalid prefix {0:?}")]
    InvalidPrefix(String),
    #[error("invalid port {0:?}")]
    InvalidPort(String),
    #[error("invalid address {0:?}")]
    InvalidAddress(String),
    #[error("invalid value {0:?}")]
    InvalidValue(String),
    #[error("invalid rule: {0}")]
    InvalidRule(&'static str),
    #[error("duplicate rule (first defined on line {0})")]
    DuplicateRule(usize),
    #[error("duplicate {0} statement (first on line {1})")]
    DuplicateStatement(&'static str, usize),
    #[error("pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct ConfigError {
    pub line: usize,
    pub kind: ErrorKind,
}

fn syntax(msg: impl Into<String>) -> ErrorKind {
    ErrorKind::Syntax(msg.into())
}

fn parse_ip(s: &str) -> Result<Ipv4Addr, ErrorKind> {
    s.parse()
        .map_err(|_| ErrorKind::InvalidAddress(s.to_string()))
}

fn parse_port(s: &str) -> Result<u16, ErrorKind> {
    match s.parse::<u16>() {
        Ok(p) if p != 0 => Ok(p),
        _ => Err(ErrorKind::InvalidPort(s.to_string())),
    }
}

fn parse_verdict(s: &str) -> Result<Verdict, ErrorKind> {
    match s {
        "forward" => Ok(Verdict::PassThrough),
        "drop" => Ok(Verdict::Drop),
        _ => Err(syntax(format!("expected forward or drop, found {s:?}"))),
    }
}

fn verdict_word(v: Verdict) -> &'static str {
    match v {
        Verdict::Drop => "drop",
        Verdict::Forward | Verdict::PassThrough => "forward",
    }
}

fn parse_rule(nat_type: NatType, t: &[&str]) -> Result<NatRule, ErrorKind> {
    let [net, port, arrow, target, target_port] = t else {
        return Err(syntax(format!(
            "expected `{nat_type} <ip>/<prefix> <port|*> -> <ip> <port|{}>`",
            match nat_type {
                NatType::Snat => "pool",
                NatType::Dnat => "*",
            }
        )));
    };
    if *arrow != "->" {
        return Err(syntax(format!("expected `->`, found {arrow:?}")));
    }
    let (ip, prefix) = net
        .split_once('/')
        .ok_or_else(|| syntax(format!("missing /<prefix> in {net:?}")))?;
    let match_ip = parse_ip(ip)?;
    let prefix_len = match prefix.parse::<u8>() {
        Ok(p) if (1..=32).contains(&p) => p,
        _ => return Err(ErrorKind::InvalidPrefix(prefix.to_string())),
    };
    let match_port = match *port {
        "*" => None,
        p => Some(parse_port(p)?),
    };
    let rewrite_ip = parse_ip(target)?;
    let rewrite_port = match (*target_port, nat_type) {
        ("*", _) => RewritePort::Keep,
        ("pool", NatType::Snat) => RewritePort::FromPool,
        ("pool", NatType::Dnat) => {
            return Err(ErrorKind::InvalidRule(
                "pool allocation is only valid for snat rules",
            ))
        }
        (p, _) => RewritePort::Port(parse_port(p)?),
    };
    NatRule::new(
        nat_type,
        match_ip,
        prefix_len,
        match_port,
        rewrite_ip,
        rewrite_port,
    )
    .map_err(|e| match e {
        qnat_core::RuleError::InvalidRule(m) => ErrorKind::InvalidRule(m),
        other => syntax(other.to_string()),
    })
}

fn parse_pool(t: &[&str]) -> Result<PoolConfig, ErrorKind> {
    let (ips, ports) = match t {
        [ips] => (ips, None),
        [ips, "ports", range] => (ips, Some(range)),
        _ => return Err(syntax("expected `pool <ip>[,<ip>...] ports <lo>-<hi>`")),
    };
    let mut addrs = Vec::new();
    for ip in ips.split(',') {
        let ip = parse_ip(ip)?;
        if ip.is_unspecified() {
            return Err(ErrorKind::InvalidAddress(ip.to_string()));
        }
        if addrs.contains(&ip) {
            return Err(ErrorKind::Pool(format!("address {ip} listed twice")));
        }
        addrs.push(ip);
    }
    let mut config = PoolConfig::new(addrs);
    if let Some(range) = ports {
        let (lo, hi) = range
            .split_once('-')
            .ok_or_else(|| syntax(format!("expected <lo>-<hi>, found {range:?}")))?;
        let (lo, hi) = (parse_port(lo)?, parse_port(hi)?);
        if lo > hi {
            return Err(ErrorKind::InvalidPort(range.to_string()));
        }
        config = config.with_ports(lo..=hi);
    }
    Ok(config)
}

fn parse_secs(s: &str) -> Result<Duration, ErrorKind> {
    match s.parse::<u64>() {
        Ok(n) if n > 0 => Ok(Duration::from_secs(n)),
        _ => Err(ErrorKind::InvalidValue(s.to_string())),
    }
}

/// Parses a whole document, reporting every bad line. Nothing is returned
/// unless the document is valid as a whole.
pub fn parse_config(text: &str) -> Result<ConfigDocument, Vec<ConfigError>> {
    let mut doc = ConfigDocument::default();
    let mut errors = Vec::new();
    let mut seen_rules: HashMap<(NatType, Ipv4Addr, u8, Option<u16>), usize> = HashMap::new();
    let mut seen_stmt: HashMap<&'static str, usize> = HashMap::new();
    let mut rule_lines = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").replace("->", " -> ");
        let tokens: Vec<&str> = content.split_whitespace().collect();
        let Some((&head, rest)) = tokens.split_first() else {
            continue;
        };
        let mut once = |name: &'static str| match seen_stmt.get(name) {
            Some(&first) => Err(ErrorKind::DuplicateStatement(name, first)),
            None => {
                seen_stmt.insert(name, line);
                Ok(())
            }
        };
        let result: Result<(), ErrorKind> = (|| {
            match (head, rest) {
                ("snat" | "dnat", _) => {
                    let ty = if head == "snat" {
                        NatType::Snat
                    } else {
                        NatType::Dnat
                    };
                    let rule = parse_rule(ty, rest)?;
                    let key = (
                        rule.nat_type,
                        rule.match_ip,
                        rule.prefix_len,
                        rule.match_port,
                    );
                    if let Some(&first) = seen_rules.get(&key) {
                        return Err(ErrorKind::DuplicateRule(first));
                    }
                    seen_rules.insert(key, line);
                    rule_lines.push(line);
                    doc.rules.push(rule);
                }
                ("pool", _) => {
                    let pool = parse_pool(rest)?;
                    once("pool")?;
                    doc.pool = Some(pool);
                }
                ("policy", [which, v]) => {
                    let v = parse_verdict(v)?;
                    match *which {
                        "miss" => {
                            once("policy miss")?;
                            doc.policy.rule_miss = v;
                        }
                        "fragment" => {
                            once("policy fragment")?;
                            doc.policy.untranslatable = v;
                        }
                        _ => {
                            return Err(syntax(format!(
                                "unknown policy {which:?} (expected miss or fragment)"
                            )))
                        }
                    }
                }
                ("timeout", [proto, secs]) => {
                    let d = parse_secs(secs)?;
                    match *proto {
                        "tcp" => {
                            once("timeout tcp")?;
                            doc.timeouts.tcp_idle = d;
                        }
                        "udp" => {
                            once("timeout udp")?;
                            doc.timeouts.udp_idle = d;
                        }
                        _ => {
                            return Err(syntax(format!(
                                "unknown protocol {proto:?} (expected tcp or udp)"
                            )))
                        }
                    }
                }
                ("workers", [n]) => {
                    let n = match n.parse::<usize>() {
                        Ok(n) if n > 0 => n,
                        _ => return Err(ErrorKind::InvalidValue(n.to_string())),
                    };
                    once("workers")?;
                    doc.workers = Some(n);
                }
                ("policy" | "timeout" | "workers", _) => {
                    return Err(syntax(format!("wrong number of arguments to {head}")));
                }
                _ => return Err(syntax(format!("unknown statement {head:?}"))),
            }
            Ok(())
        })();
        if let Err(kind) = result {
            errors.push(ConfigError { line, kind });
        }
    }

    for (rule, &line) in doc.rules.iter().zip(&rule_lines) {
        if rule.rewrite_port != RewritePort::FromPool {
            continue;
        }
        let problem = match &doc.pool {
            None => Some("rule allocates from the pool but no pool is configured".to_string()),
            Some(p)
                if !rule.rewrite_ip.is_unspecified()
                    && !p.public_ips.contains(&rule.rewrite_ip) =>
            {
                Some(format!("{} is not a pool address", rule.rewrite_ip))
            }
            _ => None,
        };
        if let Some(msg) = problem {
            errors.push(ConfigError {
                line,
                kind: ErrorKind::Pool(msg),
            });
        }
    }

    if errors.is_empty() {
        Ok(doc)
    } else {
        errors.sort_by_key(|e| e.line);
        Err(errors)
    }
}

/// Canonical text; parsing it yields an identical document.
impl fmt::Display for ConfigDocument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(pool) = &self.pool {
            let ips: Vec<String> = pool.public_ips.iter().map(Ipv4Addr::to_string).collect();
            writeln!(
                f,
                "pool {} ports {}-{}",
                ips.join(","),
                pool.port_range.start(),
                pool.port_range.end()
            )?;
        }
        writeln!(f, "policy miss {}", verdict_word(self.policy.rule_miss))?;
        writeln!(
            f,
            "policy fragment {}",
            verdict_word(self.policy.untranslatable)
        )?;
        writeln!(f, "timeout tcp {}", self.timeouts.tcp_idle.as_secs())?;
        writeln!(f, "timeout udp {}", self.timeouts.udp_idle.as_secs())?;
        if let Some(n) = self.workers {
            writeln!(f, "workers {n}")?;
        }
        for r in &self.rules {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}
