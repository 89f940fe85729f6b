//! Link ranking on training samples.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, LearnError};
use crate::geometry::LinkId;
use crate::rng;

const NBVI: usize = 0;
const SNR: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankCriterion {
    /// Mean SNR proxy, highest first.
    Snr,
    /// Variance of NBVI over time, highest first.
    TemporalVariance,
    /// Seeded shuffle.
    Random(u64),
}

impl fmt::Display for RankCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Snr => f.write_str("snr"),
            Self::TemporalVariance => f.write_str("temporal_variance"),
            Self::Random(seed) => write!(f, "random({seed})"),
        }
    }
}

impl FromStr for RankCriterion {
    type Err = LearnError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || LearnError::Unknown { what: "ranking criterion", name: s.to_string() };
        match s {
            "snr" => Ok(Self::Snr),
            "temporal_variance" => Ok(Self::TemporalVariance),
            _ => {
                let seed = s.strip_prefix("random(").and_then(|r| r.strip_suffix(')')).ok_or_else(unknown)?;
                seed.parse().map(Self::Random).map_err(|_| unknown())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkRanking {
    pub criterion: RankCriterion,
    /// Best first; equal scores in `(tx, rx)` order.
    pub entries: Vec<(LinkId, f64)>,
}

impl LinkRanking {
    pub fn links(&self) -> Vec<LinkId> {
        self.entries.iter().map(|(l, _)| *l).collect()
    }
}

/// Ranks the dataset's links using only the samples in `train_idx`.
pub fn rank_links(dataset: &Dataset, train_idx: &[usize], criterion: RankCriterion) -> Result<LinkRanking, LearnError> {
    if train_idx.is_empty() || dataset.links.is_empty() {
        return Err(LearnError::Empty);
    }
    let n = train_idx.len() as f64;
    let mut entries: Vec<(LinkId, f64)> = match criterion {
        RankCriterion::Snr => dataset
            .links
            .iter()
            .enumerate()
            .map(|(l, id)| (*id, train_idx.iter().map(|&i| dataset.samples[i].features[l][SNR]).sum::<f64>() / n))
            .collect(),
        RankCriterion::TemporalVariance => dataset
            .links
            .iter()
            .enumerate()
            .map(|(l, id)| {
                let xs: Vec<f64> = train_idx.iter().map(|&i| dataset.samples[i].features[l][NBVI]).collect();
                let m = xs.iter().sum::<f64>() / n;
                (*id, xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n)
            })
            .collect(),
        RankCriterion::Random(seed) => {
            let mut links = dataset.links.clone();
            links.sort();
            links.shuffle(&mut rng::keyed(seed, &[0x4A4E]));
            let len = links.len() as f64;
            links.into_iter().enumerate().map(|(i, l)| (l, len - i as f64)).collect()
        }
    };
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(LinkRanking { criterion, entries })
}

pub fn select_top_k(ranking: &LinkRanking, k: usize) -> Result<Vec<LinkId>, LearnError> {
    if k == 0 || k > ranking.entries.len() {
        return Err(LearnError::BadK { k, max: ranking.entries.len() });
    }
    Ok(ranking.entries[..k].iter().map(|(l, _)| *l).collect())
}
