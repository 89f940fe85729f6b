//! TDMA slot arithmetic.
//!
//! Nodes transmit in fixed rotating slots. While one node owns the slot every
//! other node receives its burst and reports CSI, so each directed link is
//! sampled once per full cycle.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("node count must be at least 1")]
    NoNodes,
    #[error("slot duration must be positive, got {0} ms")]
    BadSlot(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdmaSchedule {
    pub node_count: usize,
    #[serde(default = "default_slot_ms")]
    pub slot_ms: f64,
    #[serde(default = "default_burst_count")]
    pub burst_count: u32,
    #[serde(default = "default_burst_interval_us")]
    pub burst_interval_us: u32,
}

fn default_slot_ms() -> f64 {
    80.0
}
fn default_burst_count() -> u32 {
    100
}
fn default_burst_interval_us() -> u32 {
    200
}

impl TdmaSchedule {
    pub fn new(node_count: usize, slot_ms: f64) -> Result<Self, ScheduleError> {
        let s = Self {
            node_count,
            slot_ms,
            burst_count: default_burst_count(),
            burst_interval_us: default_burst_interval_us(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.node_count == 0 {
            return Err(ScheduleError::NoNodes);
        }
        if !(self.slot_ms.is_finite() && self.slot_ms > 0.0) {
            return Err(ScheduleError::BadSlot(self.slot_ms));
        }
        Ok(())
    }

    pub fn cycle_ms(&self) -> f64 {
        self.node_count as f64 * self.slot_ms
    }

    pub fn mesh_rate_hz(&self) -> f64 {
        1000.0 / self.cycle_ms()
    }

    pub fn slot_us(&self) -> u64 {
        (self.slot_ms * 1000.0).round() as u64
    }

    pub fn cycle_us(&self) -> u64 {
        self.slot_us() * self.node_count as u64
    }

    /// Index of the slot (transmitting node position) active at `t_us`.
    pub fn slot_index_at(&self, t_us: u64) -> usize {
        ((t_us / self.slot_us()) % self.node_count as u64) as usize
    }

    /// Start of slot `slot` within cycle `cycle`.
    pub fn slot_start_us(&self, cycle: u64, slot: usize) -> u64 {
        cycle * self.cycle_us() + slot as u64 * self.slot_us()
    }

    /// Time taken by one burst inside a slot.
    pub fn burst_span_us(&self) -> u64 {
        self.burst_count.saturating_sub(1) as u64 * self.burst_interval_us as u64
    }
}

/// `(cycle_ms, mesh_rate_hz)` for a schedule.
pub fn tdma_rate(schedule: &TdmaSchedule) -> (f64, f64) {
    (schedule.cycle_ms(), schedule.mesh_rate_hz())
}

/// Maps slot positions to node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotPlan {
    pub schedule: TdmaSchedule,
    pub order: Vec<u16>,
}

impl SlotPlan {
    pub fn new(order: Vec<u16>, slot_ms: f64) -> Result<Self, ScheduleError> {
        let schedule = TdmaSchedule::new(order.len(), slot_ms)?;
        Ok(Self { schedule, order })
    }

    pub fn transmitter_at(&self, t_us: u64) -> u16 {
        self.order[self.schedule.slot_index_at(t_us)]
    }
}

/// Extends wrapping 32-bit microsecond clocks to 64 bits.
///
/// Consecutive readings must be less than 2^31 us (about 35 minutes) apart.
#[derive(Debug, Clone, Copy)]
pub struct ClockUnwrapper {
    last: u64,
}

impl ClockUnwrapper {
    /// `reference` is any full-width time close to the first reading.
    pub fn new(reference: u64) -> Self {
        Self { last: reference }
    }

    pub fn unwrap(&mut self, ts: u32) -> u64 {
        const SPAN: i128 = 1 << 32;
        let base = (self.last >> 32) << 32;
        let mut candidate = (base | ts as u64) as i128;
        let last = self.last as i128;
        if candidate - last > SPAN / 2 {
            candidate -= SPAN;
        } else if last - candidate > SPAN / 2 {
            candidate += SPAN;
        }
        let full = candidate.max(0) as u64;
        self.last = full;
        full
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates() {
        let (c, r) = tdma_rate(&TdmaSchedule::new(9, 80.0).unwrap());
        assert_eq!(c, 720.0);
        assert!((r - 1.3889).abs() < 1e-4);
        let (c, r) = tdma_rate(&TdmaSchedule::new(3, 80.0).unwrap());
        assert_eq!(c, 240.0);
        assert!((r - 4.1667).abs() < 1e-4);
        let (c, r) = tdma_rate(&TdmaSchedule::new(1, 80.0).unwrap());
        assert_eq!((c, r), (80.0, 12.5));
    }

    #[test]
    fn rate_inverse_in_node_count() {
        let base = TdmaSchedule::new(1, 80.0).unwrap().mesh_rate_hz();
        for n in 1..=20 {
            let r = TdmaSchedule::new(n, 80.0).unwrap().mesh_rate_hz();
            assert!((r * n as f64 - base).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_schedules() {
        assert_eq!(TdmaSchedule::new(0, 80.0), Err(ScheduleError::NoNodes));
        assert_eq!(TdmaSchedule::new(3, 0.0), Err(ScheduleError::BadSlot(0.0)));
    }

    #[test]
    fn slot_owner() {
        let plan = SlotPlan::new(vec![10, 20, 30], 80.0).unwrap();
        assert_eq!(plan.transmitter_at(0), 10);
        assert_eq!(plan.transmitter_at(79_999), 10);
        assert_eq!(plan.transmitter_at(80_000), 20);
        assert_eq!(plan.transmitter_at(240_000 + 170_000), 30);
        assert_eq!(plan.schedule.burst_span_us(), 19_800);
    }

    #[test]
    fn unwrap_across_wraps() {
        let mut u = ClockUnwrapper::new(0);
        let mut t: u64 = 0;
        for _ in 0..20_000 {
            t += 720_000;
            assert_eq!(u.unwrap(t as u32), t);
        }
        let mut u = ClockUnwrapper::new(5 * (1u64 << 32) + 100);
        assert_eq!(u.unwrap(50), 5 * (1u64 << 32) + 50);
        assert_eq!(u.unwrap(u32::MAX - 10), 5 * (1u64 << 32) - 11);
    }
}
