//! UDP collector.
//!
//! One reader thread owns the sockets and is the single producer of a
//! whole-packet ring buffer; the owner of [`Collector`] is the single
//! consumer. Each datagram is one packet. Datagrams that fail validation are
//! counted and skipped. A slow consumer never stalls the reader: the ring
//! evicts its oldest entries instead.

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::codec::{decode_packet, CsiPacket, DecodeError, MAX_PACKET_LEN};
use super::ring::{RingBuffer, RingConsumer, RingProducer};

pub const DEFAULT_UNICAST_PORT: u16 = 5000;
pub const DEFAULT_BURST_PORT: u16 = 5555;
pub const PORT_ENV: &str = "CSI_MESH_PORT";
pub const BURST_PORT_ENV: &str = "CSI_MESH_BURST_PORT";

#[derive(Debug, Clone)]
pub struct CollectorConfig {
    pub addrs: Vec<SocketAddr>,
    pub ring_capacity: usize,
}

impl CollectorConfig {
    pub fn new(addrs: Vec<SocketAddr>) -> Self {
        Self { addrs, ring_capacity: 4096 }
    }

    /// Unicast and burst ports on `host`, taken from the environment when set.
    pub fn from_env(host: std::net::IpAddr) -> Self {
        let port = |var: &str, default: u16| std::env::var(var).ok().and_then(|v| v.parse().ok()).unwrap_or(default);
        Self::new(vec![
            SocketAddr::new(host, port(PORT_ENV, DEFAULT_UNICAST_PORT)),
            SocketAddr::new(host, port(BURST_PORT_ENV, DEFAULT_BURST_PORT)),
        ])
    }
}

#[derive(Default)]
struct Counters {
    received: AtomicU64,
    decoded: AtomicU64,
    bad_magic: AtomicU64,
    bad_length: AtomicU64,
    crc_mismatch: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CollectorStats {
    pub received: u64,
    pub decoded: u64,
    pub invalid: u64,
    pub bad_magic: u64,
    pub bad_length: u64,
    pub crc_mismatch: u64,
    /// Valid packets evicted from the ring before the consumer took them.
    pub dropped: u64,
    pub delivered: u64,
}

pub struct Collector {
    consumer: RingConsumer,
    counters: Arc<Counters>,
    stop: Arc<AtomicBool>,
    reader: Option<JoinHandle<()>>,
    local_addrs: Vec<SocketAddr>,
}

impl Collector {
    pub fn start(config: &CollectorConfig) -> io::Result<Self> {
        if config.addrs.is_empty() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "no listen address"));
        }
        let timeout = Duration::from_millis(if config.addrs.len() > 1 { 2 } else { 10 });
        let mut sockets = Vec::with_capacity(config.addrs.len());
        for addr in &config.addrs {
            let s = UdpSocket::bind(addr)?;
            s.set_read_timeout(Some(timeout))?;
            sockets.push(s);
        }
        let local_addrs = sockets.iter().map(|s| s.local_addr()).collect::<io::Result<Vec<_>>>()?;
        let (producer, consumer) = RingBuffer::new(config.ring_capacity.max(1), MAX_PACKET_LEN)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let counters = Arc::new(Counters::default());
        let stop = Arc::new(AtomicBool::new(false));
        let reader = {
            let counters = counters.clone();
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("csi-collector".into())
                .spawn(move || read_loop(sockets, producer, &counters, &stop))?
        };
        Ok(Self { consumer, counters, stop, reader: Some(reader), local_addrs })
    }

    pub fn local_addrs(&self) -> &[SocketAddr] {
        &self.local_addrs
    }

    pub fn try_recv(&mut self) -> Option<CsiPacket> {
        // entries were validated before they entered the ring
        self.consumer.pop().map(|bytes| decode_packet(&bytes).expect("ring holds validated packets"))
    }

    pub fn recv_timeout(&mut self, timeout: Duration) -> Option<CsiPacket> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(p) = self.try_recv() {
                return Some(p);
            }
            if Instant::now() >= deadline {
                return None;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
    }

    pub fn stats(&self) -> CollectorStats {
        let c = &self.counters;
        let ring = self.consumer.stats();
        let bad_magic = c.bad_magic.load(Ordering::Acquire);
        let bad_length = c.bad_length.load(Ordering::Acquire);
        let crc_mismatch = c.crc_mismatch.load(Ordering::Acquire);
        CollectorStats {
            received: c.received.load(Ordering::Acquire),
            decoded: c.decoded.load(Ordering::Acquire),
            invalid: bad_magic + bad_length + crc_mismatch,
            bad_magic,
            bad_length,
            crc_mismatch,
            dropped: ring.dropped as u64,
            delivered: ring.popped as u64,
        }
    }

    pub fn is_running(&self) -> bool {
        self.reader.as_ref().is_some_and(|h| !h.is_finished())
    }

    /// Stops the reader thread. Packets still buffered remain available via
    /// [`Collector::try_recv`].
    pub fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Collector {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn read_loop(sockets: Vec<UdpSocket>, mut producer: RingProducer, counters: &Counters, stop: &AtomicBool) {
    let mut buf = [0u8; 2048];
    while !stop.load(Ordering::Acquire) {
        for socket in &sockets {
            let n = match socket.recv_from(&mut buf) {
                Ok((n, _)) => n,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted) => {
                    continue
                }
                Err(_) => continue,
            };
            counters.received.fetch_add(1, Ordering::AcqRel);
            match decode_packet(&buf[..n]) {
                Ok(_) => {
                    counters.decoded.fetch_add(1, Ordering::AcqRel);
                    producer.push(&buf[..n]).expect("validated packets fit the ring entry");
                }
                Err(DecodeError::BadMagic(_)) => {
                    counters.bad_magic.fetch_add(1, Ordering::AcqRel);
                }
                Err(DecodeError::BadLength(_)) => {
                    counters.bad_length.fetch_add(1, Ordering::AcqRel);
                }
                Err(DecodeError::CrcMismatch { .. }) => {
                    counters.crc_mismatch.fetch_add(1, Ordering::AcqRel);
                }
            }
        }
    }
}
