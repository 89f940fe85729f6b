//! Deployment trade-off tables: mesh sampling rate and hardware cost by
//! node count.

use serde::{Deserialize, Serialize};

use crate::protocol::{tdma_rate, TdmaSchedule};

pub const DEFAULT_NYQUIST_HZ: f64 = 4.0;
pub const DEFAULT_UNIT_COST: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NyquistRow {
    pub nodes: usize,
    pub links: usize,
    pub cycle_ms: f64,
    pub rate_hz: f64,
    pub threshold_hz: f64,
    pub meets_threshold: bool,
}

/// Per-link sampling rate of a full TDMA rotation for each node count.
pub fn nyquist_table(node_counts: &[usize], slot_ms: f64, threshold_hz: f64) -> Vec<NyquistRow> {
    node_counts
        .iter()
        .filter_map(|&n| TdmaSchedule::new(n, slot_ms).ok())
        .map(|s| {
            let (cycle_ms, rate_hz) = tdma_rate(&s);
            NyquistRow {
                nodes: s.node_count,
                links: s.node_count * (s.node_count - 1),
                cycle_ms,
                rate_hz,
                threshold_hz,
                meets_threshold: rate_hz >= threshold_hz,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub nodes: usize,
    pub links: usize,
    pub cost: f64,
}

pub fn cost_table(node_counts: &[usize], unit_cost: f64) -> Vec<CostRow> {
    node_counts.iter().map(|&n| CostRow { nodes: n, links: n * n.saturating_sub(1), cost: n as f64 * unit_cost }).collect()
}

/// Fewest nodes whose full mesh provides at least `links` directed links.
pub fn nodes_for_links(links: usize) -> usize {
    (2..).find(|n| n * (n - 1) >= links).expect("unbounded search")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates_against_threshold() {
        let t = nyquist_table(&[2, 3, 4, 9], 80.0, DEFAULT_NYQUIST_HZ);
        assert_eq!(t.len(), 4);
        assert_eq!(t[1].cycle_ms, 240.0);
        assert!((t[1].rate_hz - 4.167).abs() < 1e-3 && t[1].meets_threshold);
        assert!(!t[2].meets_threshold);
        assert_eq!((t[3].links, t[3].cycle_ms), (72, 720.0));
        assert!((t[3].rate_hz - 1.389).abs() < 1e-3);
        assert!(nyquist_table(&[0], 80.0, 4.0).is_empty());
    }

    #[test]
    fn cost_per_node() {
        let c = cost_table(&[2, 9], DEFAULT_UNIT_COST);
        assert_eq!(c[1], CostRow { nodes: 9, links: 72, cost: 90.0 });
        assert_eq!(c[0].links, 2);
        assert_eq!([1, 2, 3, 10, 36, 72].map(nodes_for_links), [2, 2, 3, 4, 7, 9]);
    }
}
