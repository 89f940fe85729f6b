//! Per-link Z-score normalization, fitted on training data only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::features::FEATURE_COUNT;
use crate::geometry::LinkId;

#[derive(Debug, Error, PartialEq)]
pub enum NormalizeError {
    #[error("no statistics fitted for link {0}")]
    Unfitted(LinkId),
    #[error("epsilon must be positive")]
    BadEpsilon,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMoments {
    pub mean: [f64; FEATURE_COUNT],
    pub std: [f64; FEATURE_COUNT],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkStats {
    pub epsilon: f64,
    pub links: BTreeMap<LinkId, FeatureMoments>,
}

impl LinkStats {
    /// Population mean and standard deviation per link and dimension.
    pub fn fit<'a>(rows: impl IntoIterator<Item = (LinkId, &'a [f64; FEATURE_COUNT])>, epsilon: f64) -> Result<Self, NormalizeError> {
        if !(epsilon > 0.0) {
            return Err(NormalizeError::BadEpsilon);
        }
        // Welford accumulators
        let mut acc: BTreeMap<LinkId, (f64, [f64; FEATURE_COUNT], [f64; FEATURE_COUNT])> = BTreeMap::new();
        for (link, x) in rows {
            let (n, mean, m2) = acc.entry(link).or_insert((0.0, [0.0; FEATURE_COUNT], [0.0; FEATURE_COUNT]));
            *n += 1.0;
            for d in 0..FEATURE_COUNT {
                let delta = x[d] - mean[d];
                mean[d] += delta / *n;
                m2[d] += delta * (x[d] - mean[d]);
            }
        }
        let links = acc
            .into_iter()
            .map(|(l, (n, mean, m2))| (l, FeatureMoments { mean, std: m2.map(|v| (v / n).max(0.0).sqrt()) }))
            .collect();
        Ok(Self { epsilon, links })
    }

    pub fn apply(&self, link: LinkId, x: &[f64; FEATURE_COUNT]) -> Result<[f64; FEATURE_COUNT], NormalizeError> {
        let m = self.links.get(&link).ok_or(NormalizeError::Unfitted(link))?;
        Ok(std::array::from_fn(|d| (x[d] - m.mean[d]) / (m.std[d] + self.epsilon)))
    }

    pub fn apply_in_place(&self, link: LinkId, x: &mut [f64]) -> Result<(), NormalizeError> {
        let m = self.links.get(&link).ok_or(NormalizeError::Unfitted(link))?;
        for (d, v) in x.iter_mut().enumerate() {
            *v = (*v - m.mean[d]) / (m.std[d] + self.epsilon);
        }
        Ok(())
    }
}

/// Applies fitted statistics to a stream of `(link, features)` rows.
pub fn normalize<'a>(
    rows: impl IntoIterator<Item = (LinkId, &'a [f64; FEATURE_COUNT])>,
    stats: &LinkStats,
) -> Result<Vec<[f64; FEATURE_COUNT]>, NormalizeError> {
    rows.into_iter().map(|(l, x)| stats.apply(l, x)).collect()
}
