use std::collections::HashMap;
use std::convert::Infallible;
use std::net::Ipv4Addr;
use std::sync::Arc;
use std::time::Duration;

use qnat_core::traffic::synth::{build_packet, generate, sequence_tag, PacketSpec, TrafficSpec};
use qnat_core::{
    run_pipeline, AllocPolicy, ConnTable, CtConfig, Direction, FiveTuple, Ingress, NatContext,
    NatPool, NatRule, NatType, Packet, PacketView, ParseMode, PipelineConfig, PoolConfig,
    RewritePort, RuleTableSet,
};

fn context(policy: AllocPolicy) -> NatContext {
    let rule = NatRule::new(
        NatType::Snat,
        Ipv4Addr::new(192, 168, 0, 0),
        16,
        None,
        Ipv4Addr::UNSPECIFIED,
        RewritePort::FromPool,
    )
    .unwrap();
    let ips = vec![Ipv4Addr::new(203, 0, 113, 7), Ipv4Addr::new(203, 0, 113, 8)];
    let pool = Arc::new(NatPool::new(PoolConfig::new(ips), policy).unwrap());
    let ct = Arc::new(ConnTable::with_pool(
        CtConfig {
            capacity: 1 << 14,
            ..CtConfig::default()
        },
        Some(pool.clone()),
    ));
    let mut ctx = NatContext::new(
        Arc::new(RuleTableSet::from_rules([rule]).unwrap()),
        ct,
        Some(pool),
    );
    ctx.flow_seed = 99;
    ctx
}

fn run(input: &[(Direction, Packet)], workers: usize, policy: AllocPolicy) -> Vec<Packet> {
    let ctx = context(policy);
    let source = input.iter().map(|(d, p)| {
        Ok::<_, Infallible>(Ingress {
            direction: *d,
            mode: ParseMode::Ipv4,
            packet: p.clone(),
        })
    });
    let mut out = Vec::new();
    let config = PipelineConfig {
        workers,
        batch_size: 4,
        ..PipelineConfig::default()
    };
    run_pipeline(source, &mut out, &config, &ctx).unwrap();
    out
}

fn tuple(p: &Packet) -> FiveTuple {
    PacketView::parse(&p.data[..], ParseMode::Ipv4)
        .unwrap()
        .five_tuple()
        .unwrap()
}

/// A two-way conversation whose replies target the endpoint a one-worker
/// run assigns, so both runs see identical inputs.
fn two_way_flow(policy: AllocPolicy) -> Vec<(Direction, Packet)> {
    let host = (Ipv4Addr::new(192, 168, 4, 4), 40123);
    let server = (Ipv4Addr::new(198, 51, 100, 20), 443);
    let out = |i: u16| {
        let data = build_packet(&PacketSpec {
            src_ip: host.0,
            src_port: host.1,
            dst_ip: server.0,
            dst_port: server.1,
            ident: i,
            ..PacketSpec::default()
        });
        (
            Direction::Outbound,
            Packet::new(Duration::from_millis(u64::from(i)), data),
        )
    };
    let first = run(&[out(0)], 1, policy);
    let public = tuple(&first[0]).src();
    (0..16u16)
        .map(|i| {
            if i % 2 == 0 {
                out(i)
            } else {
                let data = build_packet(&PacketSpec {
                    src_ip: server.0,
                    src_port: server.1,
                    dst_ip: public.0,
                    dst_port: public.1,
                    ident: i,
                    ..PacketSpec::default()
                });
                (
                    Direction::Inbound,
                    Packet::new(Duration::from_millis(u64::from(i)), data),
                )
            }
        })
        .collect()
}

#[test]
fn single_flow_output_independent_of_worker_count() {
    let policy = AllocPolicy::FlowHash { seed: 3 };
    let input = two_way_flow(policy);
    let one = run(&input, 1, policy);
    assert_eq!(one.len(), 16);
    for workers in [2, 4, 7] {
        assert_eq!(run(&input, workers, policy), one, "{workers} workers");
    }
    // Every reply reached the private host.
    for p in one.iter().skip(1).step_by(2) {
        assert_eq!(tuple(p).dst(), (Ipv4Addr::new(192, 168, 4, 4), 40123));
    }
}

#[test]
fn mixed_trace_keeps_per_flow_order() {
    let spec = TrafficSpec {
        n_flows: 100,
        packets_per_flow: 30,
        seed: 21,
        ..TrafficSpec::default()
    };
    let input: Vec<_> = generate(&spec)
        .unwrap()
        .map(|p| (Direction::Outbound, p))
        .collect();
    let out = run(&input, 4, AllocPolicy::RoundRobin);
    assert_eq!(out.len(), 3000);
    let mut next: HashMap<u32, u32> = HashMap::new();
    let mut endpoint: HashMap<u32, (Ipv4Addr, u16)> = HashMap::new();
    for p in &out {
        let (flow, seq) = sequence_tag(&p.data, ParseMode::Ipv4).unwrap();
        let want = next.entry(flow).or_insert(0);
        assert_eq!(seq, *want, "flow {flow} out of order");
        *want += 1;
        // Translation stability: one public endpoint per flow.
        let src = tuple(p).src();
        assert_eq!(*endpoint.entry(flow).or_insert(src), src);
    }
    assert_eq!(next.len(), 100);
}

#[test]
fn round_robin_results_agree_up_to_port_renaming() {
    let spec = TrafficSpec {
        n_flows: 200,
        packets_per_flow: 5,
        seed: 8,
        ..TrafficSpec::default()
    };
    let input: Vec<_> = generate(&spec)
        .unwrap()
        .map(|p| (Direction::Outbound, p))
        .collect();
    let a = run(&input, 1, AllocPolicy::RoundRobin);
    let b = run(&input, 4, AllocPolicy::RoundRobin);
    assert_eq!(a.len(), b.len());
    // Leases are per protocol, so the renaming is too.
    let mut rename = HashMap::new();
    let mut inverse = HashMap::new();
    for (x, y) in a.iter().zip(&b) {
        let (tx, ty) = (tuple(x), tuple(y));
        assert_eq!(tx.dst(), ty.dst());
        let (kx, ky) = ((tx.proto, tx.src()), (ty.proto, ty.src()));
        assert_eq!(*rename.entry(kx).or_insert(ky), ky);
        assert_eq!(*inverse.entry(ky).or_insert(kx), kx);
        assert_eq!(x.data[40..], y.data[40..]);
    }
}
