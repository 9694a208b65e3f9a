//! Classic libpcap file format.
//!
//! Reads both byte orders and both microsecond (0xa1b2c3d4) and nanosecond
//! (0xa1b23c4d) magics; always writes little-endian microsecond files.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Duration;

use thiserror::Error;

use super::{LinkType, Packet};

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const GLOBAL_HEADER_LEN: usize = 24;
const RECORD_HEADER_LEN: usize = 16;
const DEFAULT_SNAPLEN: u32 = 65535;
// Largest record accepted regardless of the declared snaplen.
const MAX_RECORD: u32 = 256 * 1024;

#[derive(Debug, Error)]
pub enum PcapError {
    #[error("not a classic pcap file (magic {0:#010x})")]
    BadMagic(u32),
    #[error("pcap global header is truncated")]
    TruncatedHeader,
    #[error("pcap record {index} is truncated")]
    TruncatedRecord { index: usize },
    #[error("pcap record {index} claims {len} bytes")]
    OversizedRecord { index: usize, len: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteOrder {
    Little,
    Big,
}

impl ByteOrder {
    fn u32(self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        match self {
            ByteOrder::Little => u32::from_le_bytes(a),
            ByteOrder::Big => u32::from_be_bytes(a),
        }
    }
}

/// Streaming reader yielding packets in file order.
pub struct PcapReader<R> {
    inner: R,
    order: ByteOrder,
    nanos: bool,
    link_type: LinkType,
    snaplen: u32,
    index: usize,
    done: bool,
}

/// Reads until `buf` is full or EOF; returns the number of bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

impl PcapReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, PcapError> {
        PcapReader::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> PcapReader<R> {
    pub fn new(mut inner: R) -> Result<Self, PcapError> {
        let mut hdr = [0u8; GLOBAL_HEADER_LEN];
        let n = read_full(&mut inner, &mut hdr)?;
        if n < 4 {
            return Err(PcapError::BadMagic(0));
        }
        let le = u32::from_le_bytes([hdr[0], hdr[1], hdr[2], hdr[3]]);
        let (order, nanos) = match le {
            MAGIC_MICROS => (ByteOrder::Little, false),
            MAGIC_NANOS => (ByteOrder::Little, true),
            m if m.swap_bytes() == MAGIC_MICROS => (ByteOrder::Big, false),
            m if m.swap_bytes() == MAGIC_NANOS => (ByteOrder::Big, true),
            m => return Err(PcapError::BadMagic(m)),
        };
        if n < GLOBAL_HEADER_LEN {
            return Err(PcapError::TruncatedHeader);
        }
        Ok(PcapReader {
            inner,
            order,
            nanos,
            snaplen: order.u32(&hdr[16..20]),
            link_type: LinkType(order.u32(&hdr[20..24])),
            index: 0,
            done: false,
        })
    }

    pub fn link_type(&self) -> LinkType {
        self.link_type
    }

    pub fn is_nanosecond(&self) -> bool {
        self.nanos
    }

    fn next_record(&mut self) -> Result<Option<Packet>, PcapError> {
        let index = self.index;
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        match read_full(&mut self.inner, &mut hdr)? {
            0 => return Ok(None),
            RECORD_HEADER_LEN => {}
            _ => return Err(PcapError::TruncatedRecord { index }),
        }
        let sec = self.order.u32(&hdr[0..4]);
        let frac = self.order.u32(&hdr[4..8]);
        let incl = self.order.u32(&hdr[8..12]);
        let orig = self.order.u32(&hdr[12..16]);
        if incl > MAX_RECORD.max(self.snaplen) {
            return Err(PcapError::OversizedRecord { index, len: incl });
        }
        let mut data = vec![0u8; incl as usize];
        if read_full(&mut self.inner, &mut data)? < data.len() {
            return Err(PcapError::TruncatedRecord { index });
        }
        let sub = if self.nanos {
            u64::from(frac)
        } else {
            u64::from(frac) * 1000
        };
        self.index += 1;
        Ok(Some(Packet {
            timestamp: Duration::from_secs(u64::from(sec)) + Duration::from_nanos(sub),
            data,
            orig_len: orig.max(incl),
        }))
    }
}

impl<R: Read> Iterator for PcapReader<R> {
    type Item = Result<Packet, PcapError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = self.next_record().transpose();
        if !matches!(item, Some(Ok(_))) {
            self.done = true;
        }
        item
    }
}

/// Little-endian microsecond pcap writer.
pub struct PcapWriter<W: Write> {
    inner: W,
}

impl PcapWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>, link_type: LinkType) -> io::Result<Self> {
        PcapWriter::new(BufWriter::new(File::create(path)?), link_type)
    }
}

impl<W: Write> PcapWriter<W> {
    pub fn new(mut inner: W, link_type: LinkType) -> io::Result<Self> {
        let mut hdr = [0u8; GLOBAL_HEADER_LEN];
        hdr[0..4].copy_from_slice(&MAGIC_MICROS.to_le_bytes());
        hdr[4..6].copy_from_slice(&2u16.to_le_bytes());
        hdr[6..8].copy_from_slice(&4u16.to_le_bytes());
        // thiszone and sigfigs stay zero.
        hdr[16..20].copy_from_slice(&DEFAULT_SNAPLEN.to_le_bytes());
        hdr[20..24].copy_from_slice(&link_type.0.to_le_bytes());
        inner.write_all(&hdr)?;
        Ok(PcapWriter { inner })
    }

    pub fn write_packet(&mut self, pkt: &Packet) -> io::Result<()> {
        let sec = u32::try_from(pkt.timestamp.as_secs()).map_err(|_| {
            io::Error::new(io::ErrorKind::InvalidInput, "timestamp beyond pcap range")
        })?;
        let incl = pkt.data.len() as u32;
        let mut hdr = [0u8; RECORD_HEADER_LEN];
        hdr[0..4].copy_from_slice(&sec.to_le_bytes());
        hdr[4..8].copy_from_slice(&pkt.timestamp.subsec_micros().to_le_bytes());
        hdr[8..12].copy_from_slice(&incl.to_le_bytes());
        hdr[12..16].copy_from_slice(&pkt.orig_len.max(incl).to_le_bytes());
        self.inner.write_all(&hdr)?;
        self.inner.write_all(&pkt.data)
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Writes all `packets` to `path`.
pub fn write_pcap<'a>(
    path: impl AsRef<Path>,
    link_type: LinkType,
    packets: impl IntoIterator<Item = &'a Packet>,
) -> io::Result<()> {
    let mut w = PcapWriter::create(path, link_type)?;
    for p in packets {
        w.write_packet(p)?;
    }
    w.flush()
}

/// Reads a whole file. On a bad record the packets read so far are returned
/// alongside the error.
pub fn read_pcap(
    path: impl AsRef<Path>,
) -> Result<(LinkType, Vec<Packet>), (Vec<Packet>, PcapError)> {
    let reader = PcapReader::open(path).map_err(|e| (Vec::new(), e))?;
    let link = reader.link_type();
    let mut out = Vec::new();
    for item in reader {
        match item {
            Ok(p) => out.push(p),
            Err(e) => return Err((out, e)),
        }
    }
    Ok((link, out))
}
