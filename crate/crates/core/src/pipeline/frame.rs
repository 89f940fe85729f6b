//! Frame synchronization of the per-node packet streams.

use std::collections::BTreeMap;

use crate::geometry::LinkId;
use crate::protocol::{ClockUnwrapper, CsiPacket, SlotPlan};

/// A packet with its full-width time and inferred transmitter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TimedPacket {
    pub t_us: u64,
    pub tx: u16,
    pub packet: CsiPacket,
}

impl TimedPacket {
    pub fn link(&self) -> LinkId {
        LinkId { tx: self.tx, rx: self.packet.node_id }
    }
}

/// Attributes packets to links: unwraps each node's 32-bit clock and reads
/// the transmitter off the TDMA slot the timestamp falls in.
#[derive(Debug, Clone)]
pub struct PacketTagger {
    plan: SlotPlan,
    clocks: BTreeMap<u16, ClockUnwrapper>,
    reference_us: u64,
    self_reports: u64,
}

impl PacketTagger {
    pub fn new(plan: SlotPlan) -> Self {
        Self::with_reference(plan, 0)
    }

    pub fn with_reference(plan: SlotPlan, reference_us: u64) -> Self {
        Self { plan, clocks: BTreeMap::new(), reference_us, self_reports: 0 }
    }

    pub fn plan(&self) -> &SlotPlan {
        &self.plan
    }

    /// `None` for a packet reported during the receiver's own slot.
    pub fn tag(&mut self, packet: CsiPacket) -> Option<TimedPacket> {
        let reference = self.reference_us;
        let t_us = self.clocks.entry(packet.node_id).or_insert_with(|| ClockUnwrapper::new(reference)).unwrap(packet.timestamp_us);
        let tx = self.plan.transmitter_at(t_us);
        if tx == packet.node_id {
            self.self_reports += 1;
            return None;
        }
        Some(TimedPacket { t_us, tx, packet })
    }

    pub fn self_reports(&self) -> u64 {
        self.self_reports
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_start_us: u64,
    pub duration_us: u64,
    /// Newest packet per link within `[start, start + duration)`.
    pub packets: BTreeMap<LinkId, TimedPacket>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SyncStats {
    pub accepted: u64,
    /// Older packets displaced by a newer one for the same link and frame.
    pub superseded: u64,
    /// Packets older than the horizon, discarded.
    pub late: u64,
    pub frames: u64,
}

/// Streaming synchronizer. A frame is released once a packet arrives more
/// than `horizon_frames` frames after it; packets for released frames are late.
#[derive(Debug, Clone)]
pub struct FrameSynchronizer {
    frame_us: u64,
    horizon: u64,
    pending: BTreeMap<u64, BTreeMap<LinkId, TimedPacket>>,
    newest_frame: Option<u64>,
    /// Frames with index below this have been released.
    released_below: u64,
    stats: SyncStats,
}

impl FrameSynchronizer {
    pub fn new(frame_ms: f64, horizon_frames: u64) -> Self {
        let frame_us = ((frame_ms * 1000.0).round() as u64).max(1);
        Self { frame_us, horizon: horizon_frames, pending: BTreeMap::new(), newest_frame: None, released_below: 0, stats: SyncStats::default() }
    }

    pub fn frame_us(&self) -> u64 {
        self.frame_us
    }

    pub fn stats(&self) -> SyncStats {
        self.stats
    }

    pub fn push(&mut self, p: TimedPacket, out: &mut Vec<Frame>) {
        let idx = p.t_us / self.frame_us;
        if idx < self.released_below {
            self.stats.late += 1;
            return;
        }
        self.stats.accepted += 1;
        let slot = self.pending.entry(idx).or_default();
        match slot.get(&p.link()) {
            Some(old) if (old.t_us, &old.packet) >= (p.t_us, &p.packet) => self.stats.superseded += 1,
            Some(_) => {
                self.stats.superseded += 1;
                slot.insert(p.link(), p);
            }
            None => {
                slot.insert(p.link(), p);
            }
        }
        let newest = self.newest_frame.map_or(idx, |n| n.max(idx));
        self.newest_frame = Some(newest);
        if newest > self.horizon {
            self.release_below(newest - self.horizon, out);
        }
    }

    fn release_below(&mut self, bound: u64, out: &mut Vec<Frame>) {
        if bound <= self.released_below {
            return;
        }
        let keep = self.pending.split_off(&bound);
        for (idx, packets) in std::mem::replace(&mut self.pending, keep) {
            self.stats.frames += 1;
            out.push(Frame { frame_start_us: idx * self.frame_us, duration_us: self.frame_us, packets });
        }
        self.released_below = bound;
    }

    /// Releases everything still pending.
    pub fn flush(&mut self, out: &mut Vec<Frame>) {
        if let Some(n) = self.newest_frame {
            self.release_below(n + 1, out);
        }
    }
}

/// Batch synchronization: input order does not matter.
pub fn synchronize(mut packets: Vec<TimedPacket>, frame_ms: f64) -> Vec<Frame> {
    packets.sort();
    let mut sync = FrameSynchronizer::new(frame_ms, 2);
    let mut out = Vec::new();
    for p in packets {
        sync.push(p, &mut out);
    }
    sync.flush(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Iq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn tp(t_us: u64, tx: u16, rx: u16, v: i8) -> TimedPacket {
        TimedPacket { t_us, tx, packet: CsiPacket { node_id: rx, timestamp_us: t_us as u32, subcarriers: vec![Iq::new(v, 0); 4] } }
    }

    /// Grouping by `floor(t / frame)` and keeping the maximum per link.
    fn oracle(packets: &[TimedPacket], frame_us: u64) -> Vec<Frame> {
        let mut frames: BTreeMap<u64, BTreeMap<LinkId, TimedPacket>> = BTreeMap::new();
        for p in packets {
            let f = frames.entry(p.t_us / frame_us).or_default();
            let e = f.entry(p.link()).or_insert_with(|| p.clone());
            if (p.t_us, &p.packet) > (e.t_us, &e.packet) {
                *e = p.clone();
            }
        }
        frames.into_iter().map(|(i, packets)| Frame { frame_start_us: i * frame_us, duration_us: frame_us, packets }).collect()
    }

    #[test]
    fn newest_packet_wins() {
        let frames = synchronize(vec![tp(10_000, 1, 2, 1), tp(40_000, 1, 2, 2)], 50.0);
        assert_eq!(frames.len(), 1);
        assert_eq!(frames[0].packets[&LinkId { tx: 1, rx: 2 }].t_us, 40_000);
    }

    #[test]
    fn boundary_goes_to_next_frame() {
        let frames = synchronize(vec![tp(49_999, 1, 2, 1), tp(50_000, 1, 2, 2)], 50.0);
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].frame_start_us, 50_000);
        assert_eq!(frames[1].packets[&LinkId { tx: 1, rx: 2 }].t_us, 50_000);
    }

    #[test]
    fn late_packets_are_counted() {
        let mut s = FrameSynchronizer::new(50.0, 2);
        let mut out = Vec::new();
        s.push(tp(0, 1, 2, 0), &mut out);
        s.push(tp(200_000, 1, 2, 0), &mut out);
        assert_eq!(out.len(), 1);
        s.push(tp(10_000, 1, 2, 0), &mut out);
        // frame 2 is still inside the horizon
        s.push(tp(110_000, 1, 2, 0), &mut out);
        s.flush(&mut out);
        assert_eq!(s.stats().late, 1);
        assert_eq!(s.stats().accepted, 3);
        assert_eq!(out.len(), 3);
        assert!(out.windows(2).all(|w| w[0].frame_start_us < w[1].frame_start_us));
    }

    #[test]
    fn tagger_infers_transmitter_across_clock_wrap() {
        let plan = SlotPlan::new(vec![7, 8, 9], 80.0).unwrap();
        let mut tagger = PacketTagger::new(plan.clone());
        let cycle = plan.schedule.cycle_us();
        let mut last = 0;
        // step just under a cycle so every slot is visited, well past 2^32 us
        for k in 0..30_000u64 {
            let t = k * (cycle * 250 + 80_000) + 1_000;
            let p = CsiPacket { node_id: 9, timestamp_us: t as u32, subcarriers: vec![Iq::new(1, 1)] };
            match tagger.tag(p) {
                Some(tp) => {
                    assert_eq!(tp.t_us, t);
                    assert_eq!(tp.tx, plan.transmitter_at(t));
                    assert!(tp.t_us > last || k == 0);
                    last = tp.t_us;
                }
                None => assert_eq!(plan.transmitter_at(t), 9),
            }
        }
        assert!(last > 1 << 32);
        assert!(tagger.self_reports() > 0);
    }

    proptest! {
        #[test]
        fn shuffled_input_matches_oracle(
            raw in prop::collection::vec((0u64..2_000_000, 0u16..3, 0u16..3, any::<i8>()), 1..200),
            seed in any::<u64>(),
        ) {
            let packets: Vec<_> = raw.into_iter().filter(|(_, a, b, _)| a != b).map(|(t, a, b, v)| tp(t, a, b, v)).collect();
            let expected = oracle(&packets, 50_000);
            let mut shuffled = packets.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(synchronize(shuffled, 50.0), expected.clone());

            // streaming with disorder bounded well inside the horizon
            let mut sorted = packets;
            sorted.sort();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 1);
            let mut jittered: Vec<(u64, TimedPacket)> = sorted
                .into_iter()
                .map(|p| (p.t_us + rand::Rng::random_range(&mut rng, 0..40_000), p))
                .collect();
            jittered.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            let mut s = FrameSynchronizer::new(50.0, 2);
            let mut out = Vec::new();
            for (_, p) in jittered {
                s.push(p, &mut out);
            }
            s.flush(&mut out);
            prop_assert_eq!(s.stats().late, 0);
            prop_assert_eq!(out, expected);
        }
    }
}
