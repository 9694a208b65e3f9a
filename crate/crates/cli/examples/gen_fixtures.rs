//! Regenerates the golden pipeline fixtures under `tests/fixtures`.
//!
//!     cargo run -p natctl --example gen_fixtures
//!
//! Only rerun this when the expected output is meant to change; the golden
//! test exists to catch every other change.

use std::net::Ipv4Addr;
use std::path::PathBuf;
use std::time::Duration;

use natctl::{build_context, cmd_run, load_config, RunArgs};
use qnat_core::traffic::pcap::write_pcap;
use qnat_core::traffic::synth::{build_packet, PacketSpec};
use qnat_core::{
    process_packet, Direction, LinkType, Packet, PacketView, ParseMode, Protocol, WorkerStats,
};

const CONFIG: &str = "\
# Office LAN behind one public address.
pool 203.0.113.7 ports 40000-49999
snat 192.168.88.0/24 * -> 203.0.113.7 pool
";
const POOL_SEED: u64 = 7;

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    std::fs::create_dir_all(&dir).unwrap();
    let conf = dir.join("nat.conf");
    std::fs::write(&conf, CONFIG).unwrap();

    let host = (Ipv4Addr::new(192, 168, 88, 32), 5000);
    let server = (Ipv4Addr::new(198, 51, 100, 9), 80);

    // Find the public endpoint the seeded pool gives this flow.
    let doc = load_config(&conf).unwrap_or_else(|e| panic!("{:?}", e.lines()));
    let ctx =
        build_context(&doc, Some(POOL_SEED), 1024).unwrap_or_else(|e| panic!("{:?}", e.lines()));
    let mut probe = build_packet(&PacketSpec {
        src_ip: host.0,
        src_port: host.1,
        dst_ip: server.0,
        dst_port: server.1,
        ..Default::default()
    });
    let mut view = PacketView::parse(&mut probe[..], ParseMode::Ipv4).unwrap();
    process_packet(
        &mut view,
        Direction::Outbound,
        &ctx,
        &mut WorkerStats::default(),
        Duration::ZERO,
    );
    let public = view.five_tuple().unwrap().src();

    // (outbound?, flags, seq, ack, payload)
    let script: [(bool, u8, u32, u32, &[u8]); 12] = [
        (true, 0x02, 1000, 0, b""),
        (false, 0x12, 7000, 1001, b""),
        (true, 0x10, 1001, 7001, b""),
        (true, 0x18, 1001, 7001, b"GET / HTTP/1.0\r\n\r\n"),
        (false, 0x10, 7001, 1019, b""),
        (false, 0x18, 7001, 1019, b"HTTP/1.0 200 OK\r\n\r\n"),
        (false, 0x18, 7020, 1019, b"hello, world\n"),
        (true, 0x10, 1019, 7033, b""),
        (true, 0x11, 1019, 7033, b""),
        (false, 0x10, 7033, 1020, b""),
        (false, 0x11, 7033, 1020, b""),
        (true, 0x10, 1020, 7034, b""),
    ];
    let base = Duration::from_secs(1_700_000_000);
    let (mut private, mut public_side) = (Vec::new(), Vec::new());
    for (i, &(outbound, flags, seq, ack, payload)) in script.iter().enumerate() {
        let (src, dst) = if outbound {
            (host, server)
        } else {
            (server, public)
        };
        let spec = PacketSpec {
            src_ip: src.0,
            src_port: src.1,
            dst_ip: dst.0,
            dst_port: dst.1,
            proto: Protocol::Tcp,
            payload,
            ident: 0x1000 + i as u16,
            tcp_seq: seq,
            tcp_ack: ack,
            tcp_flags: flags,
            ..Default::default()
        };
        let pkt = Packet::new(base + Duration::from_millis(i as u64), build_packet(&spec));
        if outbound {
            private.push(pkt)
        } else {
            public_side.push(pkt)
        }
    }
    write_pcap(dir.join("private.pcap"), LinkType::RAW, &private).unwrap();
    write_pcap(dir.join("public.pcap"), LinkType::RAW, &public_side).unwrap();

    let args = RunArgs {
        config: conf,
        in_private: Some(dir.join("private.pcap")),
        in_public: Some(dir.join("public.pcap")),
        synthetic_flows: None,
        packets_per_flow: 0,
        private_subnet: "192.168.0.0/16".parse().unwrap(),
        remote_subnet: "198.51.100.0/24".parse().unwrap(),
        tcp_fraction: 0.5,
        packet_size: 64,
        traffic_seed: 1,
        out: Some(dir.join("golden_out.pcap")),
        workers: Some(1),
        stats_json: None,
        pool_seed: Some(POOL_SEED),
        conntrack_capacity: 1024,
    };
    cmd_run(&args, std::io::stdout()).unwrap_or_else(|e| panic!("{:?}", e.lines()));
    println!("public endpoint {}:{}", public.0, public.1);
}
