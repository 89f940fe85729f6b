//! Binary CSI packet codec.
//!
//! ```text
//! magic(1) | node_id(2, LE) | timestamp_us(4, LE) | K x (I, Q) as i8 (2K) | crc32(4, LE)
//! ```
//!
//! The CRC covers every byte before it. `K` is not transmitted; it is
//! implied by the datagram length, `K = (len - 11) / 2`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::crc::crc32;

pub const MAGIC: u8 = 0xC5;
pub const MAX_SUBCARRIERS: usize = 52;
pub const HEADER_LEN: usize = 7;
pub const CRC_LEN: usize = 4;
/// Bytes of framing around the subcarrier payload.
pub const OVERHEAD: usize = HEADER_LEN + CRC_LEN;
pub const MIN_PACKET_LEN: usize = OVERHEAD + 2;
pub const MAX_PACKET_LEN: usize = OVERHEAD + 2 * MAX_SUBCARRIERS;

/// One subcarrier sample as reported by the radio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct Iq {
    pub i: i8,
    pub q: i8,
}

impl Iq {
    pub const fn new(i: i8, q: i8) -> Self {
        Self { i, q }
    }

    pub fn amplitude(&self) -> f64 {
        let (i, q) = (self.i as f64, self.q as f64);
        (i * i + q * q).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CsiPacket {
    /// Reporting (receiving) node.
    pub node_id: u16,
    /// Node clock in microseconds; wraps every 2^32 us.
    pub timestamp_us: u32,
    pub subcarriers: Vec<Iq>,
}

impl CsiPacket {
    pub fn encoded_len(&self) -> usize {
        OVERHEAD + 2 * self.subcarriers.len()
    }

    /// Per-subcarrier amplitude `sqrt(I^2 + Q^2)`; phase is discarded.
    pub fn amplitudes(&self) -> Vec<f64> {
        self.subcarriers.iter().map(Iq::amplitude).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("subcarrier count {0} outside 1..=52")]
    SubcarrierCount(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic byte {0:#04x}")]
    BadMagic(u8),
    #[error("bad packet length {0}")]
    BadLength(usize),
    #[error("crc mismatch: header says {expected:#010x}, computed {actual:#010x}")]
    CrcMismatch { expected: u32, actual: u32 },
}

pub fn encode_packet(p: &CsiPacket) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::with_capacity(p.encoded_len());
    encode_into(p, &mut out)?;
    Ok(out)
}

/// Appends the encoded packet to `out`.
pub fn encode_into(p: &CsiPacket, out: &mut Vec<u8>) -> Result<(), EncodeError> {
    let k = p.subcarriers.len();
    if !(1..=MAX_SUBCARRIERS).contains(&k) {
        return Err(EncodeError::SubcarrierCount(k));
    }
    let start = out.len();
    out.push(MAGIC);
    out.extend_from_slice(&p.node_id.to_le_bytes());
    out.extend_from_slice(&p.timestamp_us.to_le_bytes());
    for iq in &p.subcarriers {
        out.push(iq.i as u8);
        out.push(iq.q as u8);
    }
    let crc = crc32(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(())
}

pub fn decode_packet(bytes: &[u8]) -> Result<CsiPacket, DecodeError> {
    let len = bytes.len();
    let Some(&first) = bytes.first() else {
        return Err(DecodeError::BadLength(0));
    };
    if first != MAGIC {
        return Err(DecodeError::BadMagic(first));
    }
    if !(MIN_PACKET_LEN..=MAX_PACKET_LEN).contains(&len) || (len - OVERHEAD) % 2 != 0 {
        return Err(DecodeError::BadLength(len));
    }
    let body = &bytes[..len - CRC_LEN];
    let expected = u32::from_le_bytes(bytes[len - CRC_LEN..].try_into().unwrap());
    let actual = crc32(body);
    if expected != actual {
        return Err(DecodeError::CrcMismatch { expected, actual });
    }
    let node_id = u16::from_le_bytes([bytes[1], bytes[2]]);
    let timestamp_us = u32::from_le_bytes(bytes[3..7].try_into().unwrap());
    let subcarriers = body[HEADER_LEN..].chunks_exact(2).map(|c| Iq::new(c[0] as i8, c[1] as i8)).collect();
    Ok(CsiPacket { node_id, timestamp_us, subcarriers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn packet(k: usize) -> CsiPacket {
        CsiPacket {
            node_id: 0xE228,
            timestamp_us: 123_456_789,
            subcarriers: (0..k).map(|j| Iq::new(j as i8 - 20, 30 - j as i8)).collect(),
        }
    }

    #[test]
    fn lengths() {
        assert_eq!(encode_packet(&packet(52)).unwrap().len(), 115);
        assert_eq!(encode_packet(&packet(1)).unwrap().len(), 13);
        assert_eq!(encode_packet(&packet(0)), Err(EncodeError::SubcarrierCount(0)));
        assert_eq!(encode_packet(&packet(53)), Err(EncodeError::SubcarrierCount(53)));
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = encode_packet(&packet(1)).unwrap();
        assert_eq!(bytes[0], 0xC5);
        assert_eq!(&bytes[1..3], &[0x28, 0xE2]);
        assert_eq!(&bytes[3..7], &123_456_789u32.to_le_bytes());
        assert_eq!(bytes[7] as i8, -20);
        assert_eq!(bytes[8] as i8, 30);
        assert_eq!(&bytes[9..13], &crc32(&bytes[..9]).to_le_bytes());
    }

    #[test]
    fn error_kinds() {
        let mut bytes = encode_packet(&packet(52)).unwrap();
        assert_eq!(decode_packet(&[]), Err(DecodeError::BadLength(0)));
        let mut bad = bytes.clone();
        bad[0] = 0x00;
        assert_eq!(decode_packet(&bad), Err(DecodeError::BadMagic(0)));
        assert_eq!(decode_packet(&bytes[..114]), Err(DecodeError::BadLength(114)));
        assert_eq!(decode_packet(&bytes[..12]), Err(DecodeError::BadLength(12)));
        bytes[40] ^= 0xFF;
        assert!(matches!(decode_packet(&bytes), Err(DecodeError::CrcMismatch { .. })));
    }

    #[test]
    fn every_single_byte_flip_is_rejected() {
        let bytes = encode_packet(&packet(52)).unwrap();
        for pos in 0..bytes.len() {
            for flip in [0x01u8, 0x80, 0xFF, 0x5A] {
                let mut b = bytes.clone();
                b[pos] ^= flip;
                assert!(decode_packet(&b).is_err(), "pos {pos} flip {flip:#x}");
            }
        }
    }

    #[test]
    fn amplitude_of_iq() {
        assert_eq!(Iq::new(3, 4).amplitude(), 5.0);
        assert_eq!(Iq::new(-128, 0).amplitude(), 128.0);
    }

    fn arb_packet() -> impl Strategy<Value = CsiPacket> {
        (any::<u16>(), any::<u32>(), prop::collection::vec((any::<i8>(), any::<i8>()), 1..=52)).prop_map(|(node_id, ts, iq)| {
            CsiPacket { node_id, timestamp_us: ts, subcarriers: iq.into_iter().map(|(i, q)| Iq::new(i, q)).collect() }
        })
    }

    proptest! {
        #[test]
        fn roundtrip(p in arb_packet()) {
            let bytes = encode_packet(&p).unwrap();
            prop_assert_eq!(bytes.len(), 11 + 2 * p.subcarriers.len());
            prop_assert_eq!(decode_packet(&bytes).unwrap(), p);
        }

        #[test]
        fn single_bit_corruption_never_decodes(p in arb_packet(), bit in 0usize..920) {
            let mut bytes = encode_packet(&p).unwrap();
            let bit = bit % (bytes.len() * 8);
            bytes[bit / 8] ^= 1 << (bit % 8);
            prop_assert!(decode_packet(&bytes).is_err());
        }
    }
}
