//! Packets to per-link, per-window feature vectors.
//!
//! Stages: tag packets with their link ([`PacketTagger`]), align them into
//! 50 ms frames ([`FrameSynchronizer`]), keep the last `W` samples of each
//! link and emit a window every `stride` TDMA cycles, then compute the 11
//! features. Normalization is separate because it must be fitted on
//! training days only.

pub mod features;
pub mod frame;
pub mod normalize;

use std::collections::{BTreeMap, VecDeque};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{
    amplitude_variance, extract_features, nbvi, nbvi_guarded, CsiWindow, FeatureExtractor, FeatureFlags, FeatureVector, WindowError,
    FEATURE_COUNT, FEATURE_NAMES, SNR_CAP,
};
pub use frame::{synchronize, Frame, FrameSynchronizer, PacketTagger, SyncStats, TimedPacket};
pub use normalize::{normalize, FeatureMoments, LinkStats, NormalizeError};

use crate::geometry::LinkId;
use crate::protocol::{CsiPacket, SlotPlan};
use crate::synth::{LabelStream, SpanLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub frame_ms: f64,
    /// Window length in packets.
    pub window: usize,
    /// Window step in TDMA cycles.
    pub stride: usize,
    pub epsilon: f64,
    pub late_horizon_frames: u64,
    pub snr_cap: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self { frame_ms: 50.0, window: 50, stride: 5, epsilon: 1e-8, late_horizon_frames: 2, snr_cap: SNR_CAP }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    Config(String),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("feature file: {0}")]
    Format(String),
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.frame_ms > 0.0) {
            return Err(PipelineError::Config("frame_ms must be positive".into()));
        }
        if self.window < 4 || self.stride == 0 {
            return Err(PipelineError::Config("window must be at least 4 and stride at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.snr_cap > 0.0) {
            return Err(PipelineError::Config("epsilon and snr_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Features of one link window.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub link: LinkId,
    pub window_start_us: u64,
    pub window_end_us: u64,
    pub features: [f64; FEATURE_COUNT],
    pub flags: FeatureFlags,
    pub label: Option<u8>,
}

impl FeatureRecord {
    pub fn vector(&self) -> FeatureVector {
        FeatureVector::from_array(self.features)
    }
}

#[derive(Debug, Default)]
struct LinkBuffer {
    day: u64,
    timestamps: VecDeque<u64>,
    rows: VecDeque<Vec<f64>>,
}

/// Streaming packets-to-features stage.
#[derive(Debug)]
pub struct FeaturePipeline {
    config: PipelineConfig,
    tagger: PacketTagger,
    sync: FrameSynchronizer,
    cycle_us: u64,
    /// Windows never span a day boundary when set.
    day_us: Option<u64>,
    links: BTreeMap<LinkId, LinkBuffer>,
    extractor: FeatureExtractor,
    frames: Vec<Frame>,
    out: Vec<FeatureRecord>,
}

impl FeaturePipeline {
    pub fn new(config: PipelineConfig, plan: SlotPlan, day_us: Option<u64>) -> Result<Self, PipelineError> {
        config.validate()?;
        let cycle_us = plan.schedule.cycle_us();
        Ok(Self {
            sync: FrameSynchronizer::new(config.frame_ms, config.late_horizon_frames),
            extractor: FeatureExtractor::new(config.epsilon, config.snr_cap),
            tagger: PacketTagger::new(plan),
            config,
            cycle_us,
            day_us: day_us.filter(|d| *d > 0),
            links: BTreeMap::new(),
            frames: Vec::new(),
            out: Vec::new(),
        })
    }

    pub fn push(&mut self, packet: CsiPacket) -> Result<(), PipelineError> {
        if let Some(tp) = self.tagger.tag(packet) {
            self.sync.push(tp, &mut self.frames);
            self.process_frames()?;
        }
        Ok(())
    }

    /// Records completed so far.
    pub fn drain(&mut self) -> Vec<FeatureRecord> {
        std::mem::take(&mut self.out)
    }

    pub fn finish(mut self) -> Result<(Vec<FeatureRecord>, SyncStats), PipelineError> {
        self.sync.flush(&mut self.frames);
        self.process_frames()?;
        Ok((self.out, self.sync.stats()))
    }

    pub fn sync_stats(&self) -> SyncStats {
        self.sync.stats()
    }

    fn process_frames(&mut self) -> Result<(), PipelineError> {
        let w = self.config.window;
        for frame in std::mem::take(&mut self.frames) {
            for (link, tp) in frame.packets {
                let day = self.day_us.map_or(0, |d| tp.t_us / d);
                let buf = self.links.entry(link).or_default();
                if buf.day != day {
                    buf.timestamps.clear();
                    buf.rows.clear();
                    buf.day = day;
                }
                buf.timestamps.push_back(tp.t_us);
                buf.rows.push_back(tp.packet.amplitudes());
                if buf.rows.len() > w {
                    buf.timestamps.pop_front();
                    buf.rows.pop_front();
                }
                let first_cycle = self.day_us.map_or(0, |d| (day * d).div_ceil(self.cycle_us));
                let cycle = tp.t_us / self.cycle_us;
                if buf.rows.len() == w && (cycle + 1 - first_cycle) % self.config.stride as u64 == 0 {
                    let rows: Vec<Vec<f64>> = buf.rows.iter().cloned().collect();
                    let window = CsiWindow::new(link, buf.timestamps.iter().copied().collect(), &rows)?;
                    let (f, flags) = self.extractor.extract(&window)?;
                    self.out.push(FeatureRecord {
                        link,
                        window_start_us: window.start_us(),
                        window_end_us: window.end_us(),
                        features: f.to_array(),
                        flags,
                        label: None,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Runs the whole stage over an in-memory packet sequence.
pub fn extract_stream(
    packets: impl IntoIterator<Item = CsiPacket>,
    config: &PipelineConfig,
    plan: &SlotPlan,
    day_us: Option<u64>,
) -> Result<Vec<FeatureRecord>, PipelineError> {
    let mut p = FeaturePipeline::new(config.clone(), plan.clone(), day_us)?;
    for pkt in packets {
        p.push(pkt)?;
    }
    Ok(p.finish()?.0)
}

/// Labels each record from the ground truth over its window span; windows
/// straddling a state change stay unlabeled.
pub fn attach_labels(records: &mut [FeatureRecord], labels: &LabelStream) {
    for r in records {
        r.label = match labels.span_label(r.window_start_us, r.window_end_us) {
            SpanLabel::Empty => Some(0),
            SpanLabel::Occupied => Some(1),
            SpanLabel::Mixed | SpanLabel::Unknown => None,
        };
    }
}

/// Column order of the feature CSV.
pub fn csv_header() -> Vec<&'static str> {
    let mut h = vec!["link_tx", "link_rx", "window_start_us", "window_end_us"];
    h.extend(FEATURE_NAMES);
    h.extend(["flags", "label"]);
    h
}

/// Writes records as CSV: link ids in hex, times in microseconds, features
/// in shortest round-trip decimal, flags as a bit set (1 = NBVI guard,
/// 2 = SNR cap), label empty when unknown.
pub fn write_features_csv<W: Write>(records: &[FeatureRecord], w: W) -> Result<(), PipelineError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(csv_header())?;
    let mut row: Vec<String> = Vec::with_capacity(FEATURE_COUNT + 6);
    for r in records {
        row.clear();
        row.push(format!("{:04X}", r.link.tx));
        row.push(format!("{:04X}", r.link.rx));
        row.push(r.window_start_us.to_string());
        row.push(r.window_end_us.to_string());
        row.extend(r.features.iter().map(|v| v.to_string()));
        row.push(r.flags.bits().to_string());
        row.push(r.label.map(|l| l.to_string()).unwrap_or_default());
        wr.write_record(&row)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_features_csv<R: Read>(r: R) -> Result<Vec<FeatureRecord>, PipelineError> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != csv_header() {
        return Err(PipelineError::Format(format!("unexpected header {header:?}")));
    }
    let bad = |what: &str, line: usize| PipelineError::Format(format!("line {}: bad {what}", line + 2));
    let mut out = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let hex = |j: usize| u16::from_str_radix(&rec[j], 16).map_err(|_| bad("link id", i));
        let int = |j: usize| rec[j].parse::<u64>().map_err(|_| bad("timestamp", i));
        let mut features = [0.0; FEATURE_COUNT];
        for (d, f) in features.iter_mut().enumerate() {
            *f = rec[4 + d].parse().map_err(|_| bad(FEATURE_NAMES[d], i))?;
        }
        let flags = rec[4 + FEATURE_COUNT].parse::<u8>().map_err(|_| bad("flags", i))?;
        let label = match &rec[5 + FEATURE_COUNT] {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            _ => return Err(bad("label", i)),
        };
        out.push(FeatureRecord {
            link: LinkId::new(hex(0)?, hex(1)?),
            window_start_us: int(2)?,
            window_end_us: int(3)?,
            features,
            flags: FeatureFlags::from_bits(flags),
            label,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{decode_packet, encode_packet, Iq};

    fn plan() -> SlotPlan {
        SlotPlan::new(vec![1, 2, 3], 80.0).unwrap()
    }

    /// Every receiver reports once per slot; amplitude follows `f(cycle)`.
    fn packets(cycles: u64, f: impl Fn(u64, u16) -> i8) -> Vec<CsiPacket> {
        let plan = plan();
        let mut out = Vec::new();
        for c in 0..cycles {
            for (s, &tx) in plan.order.iter().enumerate() {
                let start = plan.schedule.slot_start_us(c, s);
                for (rank, &rx) in plan.order.iter().filter(|&&r| r != tx).enumerate() {
                    out.push(CsiPacket {
                        node_id: rx,
                        timestamp_us: (start + 500 + rank as u64 * 20) as u32,
                        subcarriers: vec![Iq::new(f(c, tx), 3); 4],
                    });
                }
            }
        }
        out
    }

    #[test]
    fn windows_land_on_a_shared_cycle_grid() {
        let cfg = PipelineConfig { window: 10, stride: 5, ..PipelineConfig::default() };
        let recs = extract_stream(packets(40, |c, _| (c % 7) as i8 + 1), &cfg, &plan(), None).unwrap();
        // windows end at cycles 9, 14, ..., 39 for all 6 links
        assert_eq!(recs.len(), 7 * 6);
        let cycle_us = plan().schedule.cycle_us();
        let mut by_end: BTreeMap<u64, usize> = BTreeMap::new();
        for r in &recs {
            *by_end.entry(r.window_end_us / cycle_us).or_default() += 1;
            assert_eq!((r.window_end_us - r.window_start_us) / cycle_us, 9);
        }
        assert_eq!(by_end.keys().copied().collect::<Vec<_>>(), vec![9, 14, 19, 24, 29, 34, 39]);
        assert!(by_end.values().all(|&n| n == 6));
    }

    #[test]
    fn windows_do_not_cross_days() {
        let cfg = PipelineConfig { window: 10, stride: 5, ..PipelineConfig::default() };
        let cycle_us = plan().schedule.cycle_us();
        let recs = extract_stream(packets(40, |_, _| 5), &cfg, &plan(), Some(20 * cycle_us)).unwrap();
        assert!(recs.iter().all(|r| r.window_start_us / (20 * cycle_us) == r.window_end_us / (20 * cycle_us)));
        // cycles 9, 14, 19 on each day
        assert_eq!(recs.len(), 2 * 3 * 6);
    }

    #[test]
    fn codec_roundtrip_preserves_features() {
        let cfg = PipelineConfig { window: 10, stride: 5, ..PipelineConfig::default() };
        let pk = packets(30, |c, tx| ((c * 3 + tx as u64) % 11) as i8);
        let again: Vec<CsiPacket> = pk.iter().map(|p| decode_packet(&encode_packet(p).unwrap()).unwrap()).collect();
        assert_eq!(extract_stream(pk, &cfg, &plan(), None).unwrap(), extract_stream(again, &cfg, &plan(), None).unwrap());
    }

    #[test]
    fn csv_roundtrip() {
        let cfg = PipelineConfig { window: 10, stride: 5, ..PipelineConfig::default() };
        let mut recs = extract_stream(packets(30, |c, _| (c % 5) as i8), &cfg, &plan(), None).unwrap();
        recs[0].label = Some(1);
        recs[1].label = Some(0);
        let mut buf = Vec::new();
        write_features_csv(&recs, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("link_tx,link_rx,window_start_us,window_end_us,nbvi,"));
        assert_eq!(read_features_csv(&buf[..]).unwrap(), recs);
    }
}
