//! Node-to-server wire protocol: packet codec, CRC, TDMA schedule math, the
//! overwrite-oldest ring buffer and the UDP collector.

pub mod capture;
pub mod codec;
pub mod collector;
pub mod crc;
pub mod ring;
pub mod tdma;

pub use capture::{CaptureReader, CaptureWriter};
pub use codec::{decode_packet, encode_packet, CsiPacket, DecodeError, EncodeError, Iq, MAGIC};
pub use collector::{Collector, CollectorConfig, CollectorStats};
pub use crc::crc32;
pub use ring::{PushOutcome, RingBuffer, RingConsumer, RingError, RingProducer, RingStats};
pub use tdma::{tdma_rate, ClockUnwrapper, SlotPlan, TdmaSchedule};
