//! On-disk packet captures: each record is a 16-bit little-endian length
//! followed by that many bytes of encoded packet.

use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};

use super::codec::{decode_packet, encode_into, CsiPacket, DecodeError, EncodeError};

pub struct CaptureWriter<W: Write> {
    inner: BufWriter<W>,
    scratch: Vec<u8>,
    records: u64,
}

impl<W: Write> CaptureWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner: BufWriter::new(inner), scratch: Vec::with_capacity(128), records: 0 }
    }

    pub fn write_packet(&mut self, p: &CsiPacket) -> io::Result<()> {
        self.scratch.clear();
        encode_into(p, &mut self.scratch).map_err(|e: EncodeError| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        self.inner.write_all(&(self.scratch.len() as u16).to_le_bytes())?;
        self.inner.write_all(&self.scratch)?;
        self.records += 1;
        Ok(())
    }

    /// Writes already-encoded bytes verbatim (valid or not).
    pub fn write_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        let len = u16::try_from(bytes.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "record too long"))?;
        self.inner.write_all(&len.to_le_bytes())?;
        self.inner.write_all(bytes)?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.inner.flush()?;
        self.inner.into_inner().map_err(|e| e.into_error())
    }
}

/// Iterates raw records of a capture stream.
pub struct CaptureReader<R: Read> {
    inner: BufReader<R>,
}

impl<R: Read> CaptureReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner: BufReader::with_capacity(1 << 16, inner) }
    }

    pub fn next_record(&mut self) -> io::Result<Option<Vec<u8>>> {
        if self.inner.fill_buf()?.is_empty() {
            return Ok(None);
        }
        let mut len = [0u8; 2];
        self.inner.read_exact(&mut len)?;
        let mut buf = vec![0u8; u16::from_le_bytes(len) as usize];
        self.inner.read_exact(&mut buf)?;
        Ok(Some(buf))
    }

    /// Decoded packets; `Err` items are records that failed validation.
    pub fn packets(self) -> impl Iterator<Item = io::Result<Result<CsiPacket, DecodeError>>> {
        let mut reader = self;
        std::iter::from_fn(move || match reader.next_record() {
            Ok(Some(rec)) => Some(Ok(decode_packet(&rec))),
            Ok(None) => None,
            Err(e) => Some(Err(e)),
        })
    }
}
