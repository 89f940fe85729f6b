//! Bounded single-producer/single-consumer ring buffer with overwrite-oldest
//! semantics.
//!
//! The producer never blocks: pushing into a full buffer evicts the oldest
//! entry and counts it as dropped. Entries are fixed-capacity byte records
//! stored in atomic words, so a consumer racing with an eviction may read a
//! half-overwritten slot; it detects this because its claim on `head` fails,
//! and retries.
//!
//! `head` and `tail` are monotonic counters. `tail` only moves under the
//! producer; `head` moves under the consumer (pop) or the producer (eviction),
//! always by compare-and-swap. Hence `pushed = popped + dropped + occupancy`.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

/// Default capacity and entry size of the node-side buffer (6 KB).
pub const DEFAULT_CAPACITY: usize = 384;
pub const DESCRIPTOR_SIZE: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RingError {
    #[error("entry of {len} bytes exceeds entry size {entry_size}")]
    Oversized { len: usize, entry_size: usize },
    #[error("capacity and entry size must be positive")]
    ZeroSized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RingStats {
    pub pushed: usize,
    pub popped: usize,
    pub dropped: usize,
    pub occupancy: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Stored,
    /// Stored after evicting the oldest entry.
    EvictedOldest,
}

struct Shared {
    capacity: usize,
    entry_size: usize,
    words: usize,
    data: Box<[AtomicU64]>,
    lens: Box<[AtomicUsize]>,
    head: AtomicUsize,
    tail: AtomicUsize,
    popped: AtomicUsize,
    dropped: AtomicUsize,
}

impl Shared {
    fn stats(&self) -> RingStats {
        let tail = self.tail.load(Ordering::Acquire);
        let head = self.head.load(Ordering::Acquire);
        RingStats {
            pushed: tail,
            popped: self.popped.load(Ordering::Acquire),
            dropped: self.dropped.load(Ordering::Acquire),
            occupancy: tail.saturating_sub(head),
        }
    }
}

/// Constructor for a producer/consumer pair sharing one buffer.
pub struct RingBuffer;

impl RingBuffer {
    #[allow(clippy::new_ret_no_self)]
    pub fn new(capacity: usize, entry_size: usize) -> Result<(RingProducer, RingConsumer), RingError> {
        if capacity == 0 || entry_size == 0 {
            return Err(RingError::ZeroSized);
        }
        let words = entry_size.div_ceil(8);
        let shared = Arc::new(Shared {
            capacity,
            entry_size,
            words,
            data: (0..capacity * words).map(|_| AtomicU64::new(0)).collect(),
            lens: (0..capacity).map(|_| AtomicUsize::new(0)).collect(),
            head: AtomicUsize::new(0),
            tail: AtomicUsize::new(0),
            popped: AtomicUsize::new(0),
            dropped: AtomicUsize::new(0),
        });
        Ok((RingProducer { shared: shared.clone() }, RingConsumer { shared }))
    }

    /// The node-side configuration: 384 descriptors of 16 bytes.
    pub fn descriptor_mode() -> (RingProducer, RingConsumer) {
        Self::new(DEFAULT_CAPACITY, DESCRIPTOR_SIZE).expect("non-zero sizes")
    }
}

pub struct RingProducer {
    shared: Arc<Shared>,
}

impl RingProducer {
    pub fn push(&mut self, entry: &[u8]) -> Result<PushOutcome, RingError> {
        let s = &*self.shared;
        if entry.len() > s.entry_size {
            return Err(RingError::Oversized { len: entry.len(), entry_size: s.entry_size });
        }
        let tail = s.tail.load(Ordering::Relaxed);
        let mut outcome = PushOutcome::Stored;
        loop {
            let head = s.head.load(Ordering::Acquire);
            if tail - head < s.capacity {
                break;
            }
            if s.head.compare_exchange(head, head + 1, Ordering::AcqRel, Ordering::Acquire).is_ok() {
                s.dropped.fetch_add(1, Ordering::AcqRel);
                outcome = PushOutcome::EvictedOldest;
                break;
            }
        }
        let slot = tail % s.capacity;
        let words = &s.data[slot * s.words..(slot + 1) * s.words];
        for (word, chunk) in words.iter().zip(entry.chunks(8)) {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            word.store(u64::from_le_bytes(buf), Ordering::Relaxed);
        }
        s.lens[slot].store(entry.len(), Ordering::Relaxed);
        s.tail.store(tail + 1, Ordering::Release);
        Ok(outcome)
    }

    pub fn stats(&self) -> RingStats {
        self.shared.stats()
    }

    pub fn capacity(&self) -> usize {
        self.shared.capacity
    }
}

pub struct RingConsumer {
    shared: Arc<Shared>,
}

impl RingConsumer {
    pub fn pop(&mut self) -> Option<Vec<u8>> {
        let s = &*self.shared;
        loop {
            let head = s.head.load(Ordering::Acquire);
            let tail = s.tail.load(Ordering::Acquire);
            if head == tail {
                return None;
            }
            let slot = head % s.capacity;
            let len = s.lens[slot].load(Ordering::Relaxed).min(s.entry_size);
            let mut out = Vec::with_capacity(s.words * 8);
            for word in &s.data[slot * s.words..(slot + 1) * s.words] {
                out.extend_from_slice(&word.load(Ordering::Relaxed).to_le_bytes());
            }
            out.truncate(len);
            if s.head.compare_exchange(head, head + 1, Ordering::AcqRel, Ordering::Acquire).is_ok() {
                s.popped.fetch_add(1, Ordering::AcqRel);
                return Some(out);
            }
        }
    }

    pub fn stats(&self) -> RingStats {
        self.shared.stats()
    }

    pub fn is_empty(&self) -> bool {
        self.shared.stats().occupancy == 0
    }
}

/// 16-byte record for descriptor mode: where a packet lives in a larger
/// payload store rather than the packet itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketDescriptor {
    pub seq: u32,
    pub node_id: u16,
    pub len: u16,
    pub timestamp_us: u32,
    pub offset: u32,
}

impl PacketDescriptor {
    pub fn to_bytes(&self) -> [u8; DESCRIPTOR_SIZE] {
        let mut b = [0u8; DESCRIPTOR_SIZE];
        b[0..4].copy_from_slice(&self.seq.to_le_bytes());
        b[4..6].copy_from_slice(&self.node_id.to_le_bytes());
        b[6..8].copy_from_slice(&self.len.to_le_bytes());
        b[8..12].copy_from_slice(&self.timestamp_us.to_le_bytes());
        b[12..16].copy_from_slice(&self.offset.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != DESCRIPTOR_SIZE {
            return None;
        }
        Some(Self {
            seq: u32::from_le_bytes(b[0..4].try_into().ok()?),
            node_id: u16::from_le_bytes(b[4..6].try_into().ok()?),
            len: u16::from_le_bytes(b[6..8].try_into().ok()?),
            timestamp_us: u32::from_le_bytes(b[8..12].try_into().ok()?),
            offset: u32::from_le_bytes(b[12..16].try_into().ok()?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::VecDeque;

    #[test]
    fn overflow_drops_oldest() {
        let (mut p, mut c) = RingBuffer::descriptor_mode();
        for i in 0..385u32 {
            let out = p.push(&i.to_le_bytes()).unwrap();
            assert_eq!(out == PushOutcome::EvictedOldest, i == 384);
        }
        let drained: Vec<u32> = std::iter::from_fn(|| c.pop()).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        assert_eq!(drained.len(), 384);
        assert_eq!(drained[0], 1);
        assert_eq!(*drained.last().unwrap(), 384);
        let st = c.stats();
        assert_eq!((st.pushed, st.popped, st.dropped, st.occupancy), (385, 384, 1, 0));
    }

    #[test]
    fn empty_pop_and_oversize() {
        let (mut p, mut c) = RingBuffer::new(4, 8).unwrap();
        assert_eq!(c.pop(), None);
        assert_eq!(p.push(&[0; 9]), Err(RingError::Oversized { len: 9, entry_size: 8 }));
        assert_eq!(RingBuffer::new(0, 8).err(), Some(RingError::ZeroSized));
        p.push(&[]).unwrap();
        assert_eq!(c.pop(), Some(vec![]));
    }

    #[test]
    fn matches_fifo_with_eviction_model() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let cap = 17;
        let (mut p, mut c) = RingBuffer::new(cap, 13).unwrap();
        let mut model: VecDeque<Vec<u8>> = VecDeque::new();
        let mut model_dropped = 0;
        for step in 0..100_000u32 {
            if rng.random_bool(0.55) {
                let len = rng.random_range(0..=13);
                let entry: Vec<u8> = (0..len).map(|j| (step as u8).wrapping_add(j)).collect();
                if model.len() == cap {
                    model.pop_front();
                    model_dropped += 1;
                }
                model.push_back(entry.clone());
                p.push(&entry).unwrap();
            } else {
                assert_eq!(c.pop(), model.pop_front());
            }
            let st = p.stats();
            assert_eq!(st.occupancy, model.len());
            assert_eq!(st.dropped, model_dropped);
            assert_eq!(st.pushed, st.popped + st.dropped + st.occupancy);
        }
    }

    #[test]
    fn concurrent_producer_never_blocks_or_reorders() {
        let (mut p, mut c) = RingBuffer::new(64, 8).unwrap();
        const N: u64 = 200_000;
        let producer = std::thread::spawn(move || {
            for i in 0..N {
                p.push(&i.to_le_bytes()).unwrap();
            }
            p
        });
        let mut last: Option<u64> = None;
        let mut received = 0u64;
        loop {
            match c.pop() {
                Some(b) => {
                    let v = u64::from_le_bytes(b.try_into().unwrap());
                    assert!(last.is_none_or(|l| v > l), "reordered: {v} after {last:?}");
                    last = Some(v);
                    received += 1;
                }
                None if producer.is_finished() => {
                    if c.is_empty() {
                        break;
                    }
                }
                None => std::hint::spin_loop(),
            }
        }
        let p = producer.join().unwrap();
        let st = p.stats();
        assert_eq!(st.pushed as u64, N);
        assert_eq!(st.popped as u64, received);
        assert_eq!(st.pushed, st.popped + st.dropped + st.occupancy);
        assert_eq!(last, Some(N - 1));
    }

    #[test]
    fn descriptor_roundtrip() {
        let d = PacketDescriptor { seq: 7, node_id: 0xE228, len: 115, timestamp_us: 99, offset: 1234 };
        assert_eq!(PacketDescriptor::from_bytes(&d.to_bytes()), Some(d));
        assert_eq!(PacketDescriptor::from_bytes(&[0; 3]), None);
    }
}
