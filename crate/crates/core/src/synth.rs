//! Ground-truth world: occupancy timelines, occupant motion, and per-link CSI
//! amplitudes sampled at TDMA instants.
//!
//! A link only sees the occupant while the occupant is inside its first
//! Fresnel zone. Inside, subcarrier amplitudes are modulated by a sinusoid in
//! the motion band; outside (or with the room empty) the link reports its
//! static multipath baseline, a slow environmental drift, and thermal noise.
//! Synthesis is evaluated only at packet times, so motion faster than half
//! the mesh rate aliases exactly as it would on hardware.

use std::f64::consts::TAU;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{in_fresnel_zone, ActivityRegion, LinkGeometry, Point3, RoomModel};
use crate::protocol::{CsiPacket, Iq, SlotPlan};
use crate::rng;
use crate::scenario::{Scenario, ScenarioError};

const US_PER_S: f64 = 1e6;

// stream tags for keyed RNG
const TAG_TIMELINE: u64 = 0x7431;
const TAG_SEGMENT: u64 = 0x5E61;
const TAG_BASELINE: u64 = 0xBA5E;
const TAG_DRIFT: u64 = 0xD21F;
const TAG_NOISE: u64 = 0x4015;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("state fractions must be non-negative and sum to 1, got {0:.6}")]
    InfeasibleMix(f64),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("time {t_us} us outside simulated span [0, {end_us})")]
    OutOfRange { t_us: u64, end_us: u64 },
    #[error("scenario has no region `{0}`")]
    UnknownRegion(String),
    #[error("scenario mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OccupancyState {
    Empty,
    Sedentary,
    Ambulatory,
}

impl OccupancyState {
    pub fn is_occupied(self) -> bool {
        self != OccupancyState::Empty
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OccupancyState::Empty => "empty",
            OccupancyState::Sedentary => "sedentary",
            OccupancyState::Ambulatory => "ambulatory",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "empty" => Some(Self::Empty),
            "sedentary" => Some(Self::Sedentary),
            "ambulatory" => Some(Self::Ambulatory),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_us: u64,
    pub end_us: u64,
    pub state: OccupancyState,
    pub region: Option<String>,
}

impl Segment {
    pub fn duration_us(&self) -> u64 {
        self.end_us - self.start_us
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTimeline {
    pub day_count: u32,
    pub day_us: u64,
    pub segments: Vec<Segment>,
}

impl OccupancyTimeline {
    pub fn end_us(&self) -> u64 {
        self.day_count as u64 * self.day_us
    }

    pub fn segment_index_at(&self, t_us: u64) -> Result<usize, SynthError> {
        if t_us >= self.end_us() {
            return Err(SynthError::OutOfRange { t_us, end_us: self.end_us() });
        }
        Ok(self.segments.partition_point(|s| s.end_us <= t_us))
    }

    pub fn state_at(&self, t_us: u64) -> Result<OccupancyState, SynthError> {
        Ok(self.segments[self.segment_index_at(t_us)?].state)
    }

    pub fn time_in(&self, state: OccupancyState) -> u64 {
        self.segments.iter().filter(|s| s.state == state).map(Segment::duration_us).sum()
    }

    pub fn empty_fraction(&self) -> f64 {
        if self.end_us() == 0 {
            return 0.0;
        }
        self.time_in(OccupancyState::Empty) as f64 / self.end_us() as f64
    }
}

fn default_day_hours() -> f64 {
    24.0
}
fn default_empty() -> f64 {
    0.65
}
fn default_sedentary() -> f64 {
    0.20
}
fn default_ambulatory() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimelineParams {
    /// Length of one simulated day (a contiguous observation session).
    pub day_hours: f64,
    pub empty_fraction: f64,
    pub sedentary_fraction: f64,
    pub ambulatory_fraction: f64,
    pub mean_empty_block_min: f64,
    pub mean_occupied_block_min: f64,
    pub mean_sedentary_min: f64,
    /// Region walked through on every entry and exit.
    pub entry_region: String,
    pub entry_walk_s: [f64; 2],
    pub walking_speed_mps: [f64; 2],
    pub sedentary_burst_period_s: f64,
    pub sedentary_burst_s: f64,
    pub sedentary_burst_gain: f64,
    /// Gamma shape of the per-day region preference weights; small values
    /// make daily routines differ more.
    pub region_concentration: f64,
}

impl Default for TimelineParams {
    fn default() -> Self {
        Self {
            day_hours: default_day_hours(),
            empty_fraction: default_empty(),
            sedentary_fraction: default_sedentary(),
            ambulatory_fraction: default_ambulatory(),
            mean_empty_block_min: 40.0,
            mean_occupied_block_min: 25.0,
            mean_sedentary_min: 8.0,
            entry_region: "doorway".into(),
            entry_walk_s: [15.0, 45.0],
            walking_speed_mps: [0.8, 1.2],
            sedentary_burst_period_s: 120.0,
            sedentary_burst_s: 2.0,
            sedentary_burst_gain: 0.1,
            region_concentration: 1.0,
        }
    }
}

impl TimelineParams {
    pub fn day_us(&self) -> u64 {
        (self.day_hours * 3600.0 * US_PER_S).round() as u64
    }

    fn validate(&self) -> Result<(), SynthError> {
        let fr = [self.empty_fraction, self.sedentary_fraction, self.ambulatory_fraction];
        let sum: f64 = fr.iter().sum();
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
            return Err(SynthError::InfeasibleMix(sum));
        }
        let positive = [
            ("day_hours", self.day_hours),
            ("mean_empty_block_min", self.mean_empty_block_min),
            ("mean_occupied_block_min", self.mean_occupied_block_min),
            ("mean_sedentary_min", self.mean_sedentary_min),
            ("sedentary_burst_period_s", self.sedentary_burst_period_s),
            ("region_concentration", self.region_concentration),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(SynthError::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, [lo, hi]) in [("entry_walk_s", self.entry_walk_s), ("walking_speed_mps", self.walking_speed_mps)] {
            if !(lo > 0.0 && hi >= lo) {
                return Err(SynthError::InvalidParam(format!("{name} must be an increasing positive range")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturberModel {
    pub relative_permittivity: f64,
    /// Modulation depth of the amplitude when a moving occupant is in zone.
    pub perturbation_gain: f64,
    pub motion_band_hz: [f64; 2],
}

impl Default for PerturberModel {
    fn default() -> Self {
        Self { relative_permittivity: 50.0, perturbation_gain: 0.3, motion_band_hz: [1.0, 3.0] }
    }
}

impl PerturberModel {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.relative_permittivity > 1.0) {
            return Err(SynthError::InvalidParam("relative_permittivity must exceed 1".into()));
        }
        if !(self.perturbation_gain >= 0.0) {
            return Err(SynthError::InvalidParam("perturbation_gain must be non-negative".into()));
        }
        let [lo, hi] = self.motion_band_hz;
        if !(lo > 0.0 && lo < hi) {
            return Err(SynthError::InvalidParam("motion band must satisfy 0 < lower < upper".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelParams {
    pub subcarriers: usize,
    /// Log-uniform range of static per-subcarrier amplitudes.
    pub baseline_range: [f64; 2],
    pub thermal_noise_sigma: f64,
    /// Log-amplitude standard deviation of the slow environmental drift.
    pub drift_sigma: f64,
    pub drift_period_min: [f64; 2],
    /// I/Q counts per amplitude unit when quantizing to 8 bits.
    pub iq_scale: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self {
            subcarriers: 52,
            baseline_range: [0.5, 2.0],
            thermal_noise_sigma: 0.05,
            drift_sigma: 0.0,
            drift_period_min: [10.0, 60.0],
            iq_scale: 40.0,
        }
    }
}

impl ChannelParams {
    fn validate(&self) -> Result<(), SynthError> {
        if !(1..=crate::protocol::codec::MAX_SUBCARRIERS).contains(&self.subcarriers) {
            return Err(SynthError::InvalidParam(format!("subcarriers must be in 1..=52, got {}", self.subcarriers)));
        }
        let [lo, hi] = self.baseline_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(SynthError::InvalidParam("baseline range must be positive and increasing".into()));
        }
        if !(self.thermal_noise_sigma >= 0.0 && self.drift_sigma >= 0.0 && self.iq_scale > 0.0) {
            return Err(SynthError::InvalidParam("noise, drift and iq scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Slow multiplicative gain: `exp(sigma * sum_j sin(2 pi t / P_j + phi_j) * sqrt(2/J))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub sigma: f64,
    pub components: Vec<(f64, f64)>,
}

impl Drift {
    pub fn none() -> Self {
        Self { sigma: 0.0, components: Vec::new() }
    }

    pub fn gain_at(&self, t_s: f64) -> f64 {
        if self.sigma == 0.0 || self.components.is_empty() {
            return 1.0;
        }
        let norm = (2.0 / self.components.len() as f64).sqrt();
        let s: f64 = self.components.iter().map(|&(period, phase)| (TAU * t_s / period + phase).sin()).sum();
        (self.sigma * norm * s).exp()
    }
}

/// Static description of one link's channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelModel {
    pub baseline: Vec<f64>,
    pub thermal_noise_sigma: f64,
    pub drift: Drift,
    /// Per-link phase of the motion sinusoid, so links do not move in lockstep.
    pub motion_phase: f64,
}

impl ChannelModel {
    pub fn static_baseline(baseline: Vec<f64>, thermal_noise_sigma: f64) -> Self {
        Self { baseline, thermal_noise_sigma, drift: Drift::none(), motion_phase: 0.0 }
    }

    /// Draws a link's baseline once per `(seed, link)`.
    pub fn for_link(link: &LinkGeometry, params: &ChannelParams, seed: u64) -> Self {
        let mut rng = rng::keyed(seed, &[TAG_BASELINE, link.id().key()]);
        let [lo, hi] = params.baseline_range;
        let baseline = (0..params.subcarriers).map(|_| (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp()).collect();
        Self {
            baseline,
            thermal_noise_sigma: params.thermal_noise_sigma,
            drift: Drift::none(),
            motion_phase: rng.random::<f64>() * TAU,
        }
    }

    /// Drift realization for one day of one link.
    pub fn with_day_drift(mut self, link: &LinkGeometry, params: &ChannelParams, seed: u64, day: u32) -> Self {
        let mut rng = rng::keyed(seed, &[TAG_DRIFT, link.id().key(), day as u64]);
        let [lo, hi] = params.drift_period_min;
        self.drift = Drift {
            sigma: params.drift_sigma,
            components: (0..3).map(|_| ((lo + (hi - lo) * rng.random::<f64>()) * 60.0, rng.random::<f64>() * TAU)).collect(),
        };
        self
    }

    pub fn subcarriers(&self) -> usize {
        self.baseline.len()
    }
}

/// Occupant position plus the motion driving the modulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occupant {
    pub position: Point3,
    pub motion_hz: f64,
    pub phase: f64,
    /// Multiplier on the perturbation gain: 1 while walking, the burst gain
    /// during sedentary micro-motion, 0 while perfectly still.
    pub gain_scale: f64,
}

/// Amplitudes of one CSI measurement:
/// `a_k = baseline_k * drift(t) * (1 + m(t)) + noise`, clamped at 0.
pub fn synthesize_csi<R: Rng + ?Sized>(
    link: &LinkGeometry,
    channel: &ChannelModel,
    perturber: &PerturberModel,
    occupant: Option<&Occupant>,
    t_s: f64,
    rng: &mut R,
) -> Vec<f64> {
    let m = modulation(link, channel, perturber, occupant, t_s);
    let gain = channel.drift.gain_at(t_s) * (1.0 + m);
    channel
        .baseline
        .iter()
        .map(|b| {
            let noise = if channel.thermal_noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                channel.thermal_noise_sigma * z
            } else {
                0.0
            };
            (b * gain + noise).max(0.0)
        })
        .collect()
}

fn modulation(link: &LinkGeometry, channel: &ChannelModel, perturber: &PerturberModel, occupant: Option<&Occupant>, t_s: f64) -> f64 {
    match occupant {
        Some(o) if o.gain_scale > 0.0 && in_fresnel_zone(&o.position, link, 1) => {
            perturber.perturbation_gain * o.gain_scale * (TAU * o.motion_hz * t_s + o.phase + channel.motion_phase).sin()
        }
        _ => 0.0,
    }
}

/// Quantizes amplitudes to 8-bit I/Q with a fixed per-subcarrier phase.
pub fn quantize(amplitudes: &[f64], phases: &[f64], iq_scale: f64) -> Vec<Iq> {
    amplitudes
        .iter()
        .zip(phases)
        .map(|(a, ph)| {
            let c = |v: f64| (v * iq_scale).round().clamp(-127.0, 127.0) as i8;
            Iq::new(c(a * ph.cos()), c(a * ph.sin()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub days: u32,
    pub seed: u64,
    /// Emit every burst packet instead of one report per link per slot.
    #[serde(default)]
    pub emit_bursts: bool,
}

impl SimConfig {
    pub fn new(scenario: Scenario, days: u32, seed: u64) -> Self {
        Self { scenario, days, seed, emit_bursts: false }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.scenario.validate()?;
        self.scenario.timeline.validate()?;
        self.scenario.channel.validate()?;
        self.scenario.perturber.validate()?;
        let tl = &self.scenario.timeline;
        if tl.empty_fraction < 1.0 && self.scenario.room.region(&tl.entry_region).is_none() {
            return Err(SynthError::UnknownRegion(tl.entry_region.clone()));
        }
        Ok(())
    }
}

/// Splits `total` into `n` random parts, each at least `min_part` when possible.
fn random_split<R: Rng + ?Sized>(rng: &mut R, total: u64, n: usize, min_part: u64) -> Vec<u64> {
    if n == 0 {
        return Vec::new();
    }
    let floor = if min_part.saturating_mul(n as u64) <= total { min_part } else { 0 };
    let free = total - floor * n as u64;
    let mut cuts: Vec<u64> = (0..n - 1).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut parts = Vec::with_capacity(n);
    let mut prev = 0;
    for c in cuts.into_iter().chain(std::iter::once(free)) {
        parts.push(floor + c - prev);
        prev = c;
    }
    parts
}

fn weighted_pick<'a, R: Rng + ?Sized>(rng: &mut R, items: &[(&'a str, f64)]) -> Option<&'a str> {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    if items.is_empty() || total <= 0.0 {
        return items.first().map(|(l, _)| *l);
    }
    let mut u = rng.random::<f64>() * total;
    for (label, w) in items {
        if u < *w {
            return Some(label);
        }
        u -= w;
    }
    items.last().map(|(l, _)| *l)
}

/// Labeled occupancy schedule. Each day holds exactly
/// `round(empty_fraction * day)` microseconds of empty time, split into
/// blocks that alternate with occupied visits. A visit enters and leaves
/// through the entry region and alternates sedentary spells (box regions)
/// with walks (corridor regions); which regions are favoured varies by day.
pub fn generate_timeline(config: &SimConfig) -> Result<OccupancyTimeline, SynthError> {
    config.validate()?;
    let p = &config.scenario.timeline;
    let room = &config.scenario.room;
    let day_us = p.day_us();
    let mut segments = Vec::new();
    let min_us = |m: f64| (m * 60.0 * US_PER_S) as u64;
    for day in 0..config.days {
        let mut rng = rng::keyed(config.seed, &[TAG_TIMELINE, day as u64]);
        let start = day as u64 * day_us;
        let empty_total = (p.empty_fraction * day_us as f64).round() as u64;
        let occupied_total = day_us - empty_total;

        let gamma = Gamma::new(p.region_concentration, 1.0).map_err(|e| SynthError::InvalidParam(e.to_string()))?;
        let mut boxes = Vec::new();
        let mut walks = Vec::new();
        for r in &room.regions {
            let w = gamma.sample(&mut rng);
            if r.is_corridor() {
                if r.label != p.entry_region {
                    walks.push((r.label.as_str(), w));
                }
            } else {
                boxes.push((r.label.as_str(), w));
            }
        }

        let mut pieces: Vec<(u64, OccupancyState, Option<String>)> = Vec::new();
        if occupied_total == 0 {
            pieces.push((empty_total, OccupancyState::Empty, None));
        } else {
            let n_occ = ((occupied_total as f64 / min_us(p.mean_occupied_block_min) as f64).round() as usize).max(1);
            let occ_blocks = random_split(&mut rng, occupied_total, n_occ, min_us(2.0));
            let empty_blocks = if empty_total > 0 {
                let n_empty = ((empty_total as f64 / min_us(p.mean_empty_block_min) as f64).round() as usize).max(n_occ + 1);
                let mut blocks = random_split(&mut rng, empty_total, n_empty, 0);
                // merge extra empty blocks so they interleave: E O E ... O E
                while blocks.len() > n_occ + 1 {
                    let last = blocks.pop().unwrap();
                    let i = rng.random_range(0..blocks.len());
                    blocks[i] += last;
                }
                blocks
            } else {
                Vec::new()
            };
            let sed_share = if p.sedentary_fraction + p.ambulatory_fraction > 0.0 {
                p.sedentary_fraction / (p.sedentary_fraction + p.ambulatory_fraction)
            } else {
                0.0
            };
            for (i, &occ) in occ_blocks.iter().enumerate() {
                if let Some(&e) = empty_blocks.get(i) {
                    pieces.push((e, OccupancyState::Empty, None));
                }
                pieces.extend(visit(&mut rng, p, occ, sed_share, &boxes, &walks));
            }
            if let Some(&e) = empty_blocks.get(occ_blocks.len()) {
                pieces.push((e, OccupancyState::Empty, None));
            }
        }
        let mut t = start;
        for (dur, state, region) in pieces {
            if dur == 0 {
                continue;
            }
            // merge neighbours with identical state and region
            if let Some(last) = segments.last_mut().filter(|s: &&mut Segment| s.state == state && s.region == region && s.end_us == t) {
                last.end_us += dur;
            } else {
                segments.push(Segment { start_us: t, end_us: t + dur, state, region });
            }
            t += dur;
        }
        debug_assert_eq!(t, start + day_us);
    }
    Ok(OccupancyTimeline { day_count: config.days, day_us, segments })
}

fn visit<R: Rng + ?Sized>(
    rng: &mut R,
    p: &TimelineParams,
    total: u64,
    sed_share: f64,
    boxes: &[(&str, f64)],
    walks: &[(&str, f64)],
) -> Vec<(u64, OccupancyState, Option<String>)> {
    let entry = Some(p.entry_region.clone());
    let walk_us = |rng: &mut R| (rng.random_range(p.entry_walk_s[0]..=p.entry_walk_s[1]) * US_PER_S) as u64;
    let (t_in, t_out) = (walk_us(rng), walk_us(rng));
    if t_in + t_out >= total {
        return vec![(total, OccupancyState::Ambulatory, entry)];
    }
    let middle = total - t_in - t_out;
    let sed_total = if boxes.is_empty() { 0 } else { (middle as f64 * sed_share).round() as u64 };
    let amb_total = middle - sed_total;
    let mut out = vec![(t_in, OccupancyState::Ambulatory, entry.clone())];
    let n = ((sed_total as f64 / (p.mean_sedentary_min * 60.0 * US_PER_S)).round() as usize).max(1);
    let seds = random_split(rng, sed_total, n, 0);
    let ambs = random_split(rng, amb_total, n, 0);
    for (s, a) in seds.into_iter().zip(ambs) {
        if s > 0 {
            out.push((s, OccupancyState::Sedentary, weighted_pick(rng, boxes).map(str::to_string)));
        }
        if a > 0 {
            let region = weighted_pick(rng, walks).map(str::to_string).or_else(|| entry.clone());
            out.push((a, OccupancyState::Ambulatory, region));
        }
    }
    out.push((t_out, OccupancyState::Ambulatory, entry));
    out
}

/// Per-segment motion parameters, a pure function of `(seed, segment index)`.
#[derive(Debug, Clone, Copy)]
struct SegmentMotion {
    motion_hz: f64,
    phase: f64,
    speed: f64,
    path_offset: f64,
    lateral: Point3,
    burst_offset_s: f64,
}

fn segment_motion(seed: u64, index: usize, region: Option<&ActivityRegion>, timeline: &TimelineParams, perturber: &PerturberModel) -> SegmentMotion {
    let mut rng = rng::keyed(seed, &[TAG_SEGMENT, index as u64]);
    let [f_lo, f_hi] = perturber.motion_band_hz;
    let [v_lo, v_hi] = timeline.walking_speed_mps;
    let motion_hz = f_lo + (f_hi - f_lo) * rng.random::<f64>();
    let phase = rng.random::<f64>() * TAU;
    let speed = v_lo + (v_hi - v_lo) * rng.random::<f64>();
    let burst_offset_s = rng.random::<f64>() * timeline.sedentary_burst_period_s;
    let (path_offset, lateral) = match region {
        Some(r) => match &r.shape {
            crate::geometry::RegionShape::Corridor { radius, .. } => {
                (rng.random::<f64>() * r.path_length(), crate::geometry::ball_offset(&mut rng, *radius))
            }
            crate::geometry::RegionShape::Box { .. } => (0.0, r.sample(&mut rng)),
        },
        None => (0.0, Point3::new(0.0, 0.0, 0.0)),
    };
    SegmentMotion { motion_hz, phase, speed, path_offset, lateral, burst_offset_s }
}

/// Occupant (position and motion) at time `t_us`; `None` while empty.
pub fn occupant_at(
    timeline: &OccupancyTimeline,
    t_us: u64,
    room: &RoomModel,
    params: &TimelineParams,
    perturber: &PerturberModel,
    seed: u64,
) -> Result<Option<Occupant>, SynthError> {
    let idx = timeline.segment_index_at(t_us)?;
    let seg = &timeline.segments[idx];
    if seg.state == OccupancyState::Empty {
        return Ok(None);
    }
    let label = seg.region.as_deref().ok_or_else(|| SynthError::Mismatch("occupied segment without region".into()))?;
    let region = room.region(label).ok_or_else(|| SynthError::UnknownRegion(label.to_string()))?;
    let motion = segment_motion(seed, idx, Some(region), params, perturber);
    let elapsed_s = (t_us - seg.start_us) as f64 / US_PER_S;
    let (position, gain_scale) = match (&region.shape, seg.state) {
        (crate::geometry::RegionShape::Corridor { .. }, OccupancyState::Ambulatory) => {
            (region.point_on_path(motion.path_offset + motion.speed * elapsed_s) + motion.lateral, 1.0)
        }
        (crate::geometry::RegionShape::Corridor { .. }, _) => (region.point_on_path(motion.path_offset) + motion.lateral, 0.0),
        // boxes keep the point drawn for the segment
        (crate::geometry::RegionShape::Box { .. }, state) => {
            let scale = if state == OccupancyState::Ambulatory {
                1.0
            } else {
                let in_cycle = (elapsed_s + motion.burst_offset_s).rem_euclid(params.sedentary_burst_period_s);
                if in_cycle < params.sedentary_burst_s {
                    params.sedentary_burst_gain
                } else {
                    0.0
                }
            };
            (motion.lateral, scale)
        }
    };
    Ok(Some(Occupant { position, motion_hz: motion.motion_hz, phase: motion.phase, gain_scale }))
}

/// Occupant position only; see [`occupant_at`].
pub fn occupant_position(
    timeline: &OccupancyTimeline,
    t_us: u64,
    room: &RoomModel,
    params: &TimelineParams,
    seed: u64,
) -> Result<Option<Point3>, SynthError> {
    Ok(occupant_at(timeline, t_us, room, params, &PerturberModel::default(), seed)?.map(|o| o.position))
}

/// One row of the label stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRow {
    pub window_start_us: u64,
    pub window_end_us: u64,
    pub label: u8,
    pub state: OccupancyState,
}

/// Ground truth resampled onto a fixed grid (state at each cell's midpoint).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelStream {
    pub rows: Vec<LabelRow>,
}

/// Coarse label of a time span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanLabel {
    Empty,
    Occupied,
    /// Both states occur in the span.
    Mixed,
    /// No label coverage.
    Unknown,
}

impl LabelStream {
    pub fn from_timeline(timeline: &OccupancyTimeline, quantum_us: u64) -> Self {
        let quantum_us = quantum_us.max(1);
        let mut rows = Vec::new();
        let mut t = 0;
        while t < timeline.end_us() {
            let end = (t + quantum_us).min(timeline.end_us());
            let state = timeline.state_at(t + (end - t) / 2).expect("inside span");
            rows.push(LabelRow { window_start_us: t, window_end_us: end, label: state.is_occupied() as u8, state });
            t = end;
        }
        Self { rows }
    }

    pub fn empty_fraction(&self) -> f64 {
        let total: u64 = self.rows.iter().map(|r| r.window_end_us - r.window_start_us).sum();
        let empty: u64 = self.rows.iter().filter(|r| r.label == 0).map(|r| r.window_end_us - r.window_start_us).sum();
        if total == 0 {
            0.0
        } else {
            empty as f64 / total as f64
        }
    }

    /// Label of `[start, end]` from all overlapping rows.
    pub fn span_label(&self, start_us: u64, end_us: u64) -> SpanLabel {
        let first = self.rows.partition_point(|r| r.window_end_us <= start_us);
        let mut seen = [false; 2];
        for r in self.rows[first..].iter().take_while(|r| r.window_start_us <= end_us) {
            seen[r.label as usize] = true;
        }
        match seen {
            [true, true] => SpanLabel::Mixed,
            [true, false] => SpanLabel::Empty,
            [false, true] => SpanLabel::Occupied,
            [false, false] => SpanLabel::Unknown,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["window_start_us", "window_end_us", "label", "state"])?;
        for r in &self.rows {
            wr.write_record([r.window_start_us.to_string(), r.window_end_us.to_string(), r.label.to_string(), r.state.as_str().to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> csv::Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for rec in rd.deserialize() {
            rows.push(rec?);
        }
        Ok(Self { rows })
    }
}

/// Deterministic simulator for one configuration.
pub struct Simulation {
    config: SimConfig,
    links: Vec<LinkGeometry>,
    channels: Vec<ChannelModel>,
    phases: Vec<Vec<f64>>,
    plan: SlotPlan,
    timeline: OccupancyTimeline,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SynthError> {
        config.validate()?;
        let scenario = &config.scenario;
        let links = scenario.links()?;
        let plan = scenario.slot_plan()?;
        let timeline = generate_timeline(&config)?;
        for seg in &timeline.segments {
            if let Some(label) = &seg.region {
                if scenario.room.region(label).is_none() {
                    return Err(SynthError::UnknownRegion(label.clone()));
                }
            }
        }
        let channels = links.iter().map(|l| ChannelModel::for_link(l, &scenario.channel, config.seed)).collect();
        let phases = links
            .iter()
            .map(|l| {
                let mut rng = rng::keyed(config.seed, &[TAG_BASELINE ^ 0xF, l.id().key()]);
                (0..scenario.channel.subcarriers).map(|_| rng.random::<f64>() * TAU).collect()
            })
            .collect();
        Ok(Self { config, links, channels, phases, plan, timeline })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn timeline(&self) -> &OccupancyTimeline {
        &self.timeline
    }

    pub fn links(&self) -> &[LinkGeometry] {
        &self.links
    }

    pub fn slot_plan(&self) -> &SlotPlan {
        &self.plan
    }

    /// Labels on a one-cycle grid.
    pub fn labels(&self) -> LabelStream {
        LabelStream::from_timeline(&self.timeline, self.plan.schedule.cycle_us())
    }

    /// Report time of receiver `rank` (0-based among receivers) for burst
    /// packet `burst` of a slot starting at `slot_start`.
    fn report_time(&self, slot_start: u64, rank: usize, burst: u32) -> u64 {
        slot_start + 500 + burst as u64 * self.plan.schedule.burst_interval_us as u64 + rank as u64 * 20
    }

    /// Streams the packets of one day in timestamp order.
    pub fn for_each_packet_in_day(&self, day: u32, mut emit: impl FnMut(CsiPacket)) -> Result<(), SynthError> {
        if day >= self.config.days {
            return Ok(());
        }
        let scenario = &self.config.scenario;
        let seed = self.config.seed;
        let day_us = self.timeline.day_us;
        let (day_start, day_end) = (day as u64 * day_us, (day as u64 + 1) * day_us);
        let cycle_us = self.plan.schedule.cycle_us();
        let channels: Vec<ChannelModel> = self
            .links
            .iter()
            .zip(&self.channels)
            .map(|(l, c)| c.clone().with_day_drift(l, &scenario.channel, seed, day))
            .collect();
        let mut noise: Vec<_> = self.links.iter().map(|l| rng::keyed(seed, &[TAG_NOISE, day as u64, l.id().key()])).collect();
        let index_of = |tx: u16, rx: u16| self.links.binary_search_by_key(&(tx, rx), |l| (l.tx, l.rx)).expect("link exists");
        let bursts = if self.config.emit_bursts { self.plan.schedule.burst_count.max(1) } else { 1 };
        let mut cycle = day_start.div_ceil(cycle_us);
        loop {
            let mut emitted_any = false;
            for (slot, &tx) in self.plan.order.iter().enumerate() {
                let slot_start = self.plan.schedule.slot_start_us(cycle, slot);
                if self.report_time(slot_start, 0, 0) >= day_end {
                    continue;
                }
                emitted_any = true;
                let occupant = occupant_at(&self.timeline, self.report_time(slot_start, 0, 0), &scenario.room, &scenario.timeline, &scenario.perturber, seed)?;
                for burst in 0..bursts {
                    for (rank, &rx) in self.plan.order.iter().filter(|&&rx| rx != tx).enumerate() {
                        let t = self.report_time(slot_start, rank, burst);
                        if t >= day_end {
                            continue;
                        }
                        let li = index_of(tx, rx);
                        let amps = synthesize_csi(&self.links[li], &channels[li], &scenario.perturber, occupant.as_ref(), t as f64 / US_PER_S, &mut noise[li]);
                        emit(CsiPacket {
                            node_id: rx,
                            timestamp_us: t as u32,
                            subcarriers: quantize(&amps, &self.phases[li], scenario.channel.iq_scale),
                        });
                    }
                }
            }
            if !emitted_any {
                break;
            }
            cycle += 1;
        }
        Ok(())
    }

    pub fn for_each_packet(&self, mut emit: impl FnMut(CsiPacket)) -> Result<(), SynthError> {
        for day in 0..self.config.days {
            self.for_each_packet_in_day(day, &mut emit)?;
        }
        Ok(())
    }
}

/// Whole simulation in memory: packets in timestamp order and labels.
pub fn run_simulation(config: &SimConfig) -> Result<(Vec<CsiPacket>, LabelStream), SynthError> {
    let sim = Simulation::new(config.clone())?;
    let mut packets = Vec::new();
    sim.for_each_packet(|p| packets.push(p))?;
    Ok((packets, sim.labels()))
}
