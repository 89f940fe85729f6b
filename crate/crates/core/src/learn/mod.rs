//! Classifiers, link ranking and fusion.
//!
//! Everything here is hand-rolled on a small row-major [`Matrix`] type:
//! logistic regression, a batch-normalized MLP, attention fusion, and the
//! rank-based AUC.

pub mod attention;
pub mod logistic;
pub mod metrics;
pub mod mlp;
pub mod rank;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attention::{attention_fusion, AttentionConfig, AttentionMode, AttentionModel};
pub use logistic::{train_logistic, LogisticConfig, LogisticModel};
pub use metrics::auc;
pub use mlp::{train_mlp, MlpConfig, MlpModel};
pub use rank::{rank_links, select_top_k, LinkRanking, RankCriterion};

use crate::geometry::LinkId;
use crate::pipeline::{FeatureRecord, LinkStats, NormalizeError, FEATURE_COUNT};

#[derive(Debug, Error, PartialEq)]
pub enum LearnError {
    #[error("training or scoring data has a single class")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("k = {k} out of range 1..={max}")]
    BadK { k: usize, max: usize },
    #[error("link {0} not in dataset")]
    MissingLink(LinkId),
    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },
    #[error(transparent)]
    Normalize(#[from] NormalizeError),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LearnError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LearnError::Shape("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Inverse class-frequency weights, `n / (2 n_c)`, so both classes carry
/// equal total weight.
pub fn class_weights(labels: &[u8]) -> Result<Vec<f64>, LearnError> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len();
    if n_pos == 0 || n_pos == n {
        return Err(LearnError::SingleClass);
    }
    let w_pos = n as f64 / (2.0 * n_pos as f64);
    let w_neg = n as f64 / (2.0 * (n - n_pos) as f64);
    Ok(labels.iter().map(|&l| if l == 1 { w_pos } else { w_neg }).collect())
}

pub(crate) fn check_training(x: &Matrix, y: &[u8]) -> Result<(), LearnError> {
    if x.rows != y.len() {
        return Err(LearnError::Shape(format!("{} rows for {} labels", x.rows, y.len())));
    }
    if x.rows == 0 {
        return Err(LearnError::Empty);
    }
    if !x.is_finite() {
        return Err(LearnError::NonFinite);
    }
    if y.iter().any(|&l| l > 1) {
        return Err(LearnError::Shape("labels must be 0 or 1".into()));
    }
    class_weights(y).map(|_| ())
}

/// One aligned observation: every link's features over the same window.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// 1-based day index.
    pub day: u32,
    pub label: u8,
    pub window_end_us: u64,
    /// Indexed like [`Dataset::links`].
    pub features: Vec<[f64; FEATURE_COUNT]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub links: Vec<LinkId>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Joins per-link records into samples on the window grid (records whose
    /// windows end in the same TDMA cycle). Grid points missing a link, or
    /// whose links disagree on the label, are dropped.
    pub fn from_records(records: &[FeatureRecord], cycle_us: u64, day_us: u64) -> Result<Self, LearnError> {
        if cycle_us == 0 || day_us == 0 {
            return Err(LearnError::Shape("cycle and day lengths must be positive".into()));
        }
        let links: Vec<LinkId> = records.iter().map(|r| r.link).collect::<BTreeSet<_>>().into_iter().collect();
        let index: BTreeMap<LinkId, usize> = links.iter().enumerate().map(|(i, l)| (*l, i)).collect();
        let mut grid: BTreeMap<u64, Vec<Option<&FeatureRecord>>> = BTreeMap::new();
        for r in records {
            grid.entry(r.window_end_us / cycle_us).or_insert_with(|| vec![None; links.len()])[index[&r.link]] = Some(r);
        }
        let mut samples = Vec::new();
        for row in grid.into_values() {
            let Some(row) = row.into_iter().collect::<Option<Vec<_>>>() else { continue };
            let Some(label) = row[0].label else { continue };
            if row.iter().any(|r| r.label != Some(label)) {
                continue;
            }
            let end = row.iter().map(|r| r.window_end_us).max().unwrap_or(0);
            samples.push(Sample {
                day: (end / day_us) as u32 + 1,
                label,
                window_end_us: end,
                features: row.iter().map(|r| r.features).collect(),
            });
        }
        Ok(Self { links, samples })
    }

    /// Sorted distinct days present.
    pub fn days(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.day).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn link_index(&self, link: LinkId) -> Result<usize, LearnError> {
        self.links.binary_search(&link).map_err(|_| LearnError::MissingLink(link))
    }

    pub fn indices_where(&self, pred: impl Fn(&Sample) -> bool) -> Vec<usize> {
        self.samples.iter().enumerate().filter(|(_, s)| pred(s)).map(|(i, _)| i).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), LearnError> {
        if self.links.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LearnError::Shape("links must be sorted and distinct".into()));
        }
        for s in &self.samples {
            if s.features.len() != self.links.len() {
                return Err(LearnError::Shape("sample does not cover the link set".into()));
            }
            if s.label > 1 {
                return Err(LearnError::Shape("labels must be binary".into()));
            }
        }
        let days = self.days();
        if days.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(LearnError::Shape("day indices must be contiguous".into()));
        }
        Ok(())
    }

    /// Per-link normalization statistics over the given samples.
    pub fn fit_stats(&self, idx: &[usize], links: &[usize], epsilon: f64) -> Result<LinkStats, LearnError> {
        let rows = idx.iter().flat_map(|&i| links.iter().map(move |&l| (self.links[l], &self.samples[i].features[l])));
        Ok(LinkStats::fit(rows, epsilon)?)
    }

    /// Design matrix of the chosen samples with the links concatenated in the
    /// given order, optionally normalized.
    pub fn design(&self, idx: &[usize], links: &[usize], stats: Option<&LinkStats>) -> Result<Matrix, LearnError> {
        let mut m = Matrix::zeros(idx.len(), links.len() * FEATURE_COUNT);
        for (r, &i) in idx.iter().enumerate() {
            let row = m.row_mut(r);
            for (j, &l) in links.iter().enumerate() {
                let dst = &mut row[j * FEATURE_COUNT..(j + 1) * FEATURE_COUNT];
                dst.copy_from_slice(&self.samples[i].features[l]);
                if let Some(s) = stats {
                    s.apply_in_place(self.links[l], dst)?;
                }
            }
        }
        Ok(m)
    }
}

/// Concatenates a sample's per-link features in the given link order.
pub fn concat_fusion(dataset: &Dataset, sample: &Sample, links: &[LinkId]) -> Result<Vec<f64>, LearnError> {
    let mut out = Vec::with_capacity(links.len() * FEATURE_COUNT);
    for &l in links {
        let i = dataset.link_index(l)?;
        let f = sample.features.get(i).ok_or(LearnError::MissingLink(l))?;
        out.extend_from_slice(f);
    }
    Ok(out)
}

/// Classifier choice for a study configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Logistic,
    Mlp,
    /// Seeded uniform scores; a chance baseline.
    RandomScores,
    SoftAttention,
    HardAttention(usize),
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Logistic => f.write_str("logistic"),
            Self::Mlp => f.write_str("mlp"),
            Self::RandomScores => f.write_str("random_scores"),
            Self::SoftAttention => f.write_str("soft_attention"),
            Self::HardAttention(k) => write!(f, "hard_attention_{k}"),
        }
    }
}

impl FromStr for ClassifierKind {
    type Err = LearnError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || LearnError::Unknown { what: "classifier", name: s.to_string() };
        Ok(match s {
            "logistic" => Self::Logistic,
            "mlp" => Self::Mlp,
            "random_scores" => Self::RandomScores,
            "soft_attention" => Self::SoftAttention,
            _ => match s.strip_prefix("hard_attention_") {
                Some(k) => Self::HardAttention(k.parse().map_err(|_| unknown())?),
                None => return Err(unknown()),
            },
        })
    }
}

/// Hyper-parameters for every classifier kind.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierParams {
    pub logistic: LogisticConfig,
    pub mlp: MlpConfig,
    pub attention: AttentionConfig,
}

/// Scores of a fitted classifier on the test rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    pub scores: Vec<f64>,
    /// Mean attention weight per input link, for the attention kinds.
    pub link_weights: Option<Vec<f64>>,
}

/// Fits `kind` on the training matrix and scores the test matrix. Columns
/// are `links * FEATURE_COUNT` concatenated per-link features;
/// `train_days` drives the MLP's validation split.
pub fn fit_and_score(
    kind: ClassifierKind,
    params: &ClassifierParams,
    train: &Matrix,
    labels: &[u8],
    train_days: &[u32],
    test: &Matrix,
    seed: u64,
) -> Result<FitOutcome, LearnError> {
    let plain = |scores| Ok(FitOutcome { scores, link_weights: None });
    match kind {
        ClassifierKind::Logistic => plain(train_logistic(train, labels, &params.logistic, seed)?.predict(test)),
        ClassifierKind::Mlp => plain(train_mlp(train, labels, train_days, &params.mlp, seed)?.predict(test)),
        ClassifierKind::RandomScores => {
            check_training(train, labels)?;
            plain((0..test.rows).map(|i| crate::rng::unit(seed, &[0x5C0E, i as u64])).collect())
        }
        ClassifierKind::SoftAttention | ClassifierKind::HardAttention(_) => {
            let mode = match kind {
                ClassifierKind::HardAttention(k) => AttentionMode::Hard(k),
                _ => AttentionMode::Soft,
            };
            let model = attention_fusion(train, labels, mode, &params.attention, seed)?;
            Ok(FitOutcome { scores: model.predict(test)?, link_weights: Some(model.link_weights.clone()) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::FeatureFlags;

    fn rec(tx: u16, end: u64, label: Option<u8>, v: f64) -> FeatureRecord {
        FeatureRecord {
            link: LinkId::new(tx, 9),
            window_start_us: end.saturating_sub(10),
            window_end_us: end,
            features: [v; FEATURE_COUNT],
            flags: FeatureFlags::default(),
            label,
        }
    }

    #[test]
    fn join_drops_incomplete_and_disagreeing_rows() {
        let records = vec![
            rec(1, 100, Some(1), 1.0),
            rec(2, 140, Some(1), 2.0),
            rec(1, 1100, Some(0), 3.0),
            // missing link 2 at grid point 1
            rec(1, 2100, Some(0), 4.0),
            rec(2, 2150, Some(1), 5.0),
            rec(1, 3100, None, 6.0),
            rec(2, 3100, None, 6.0),
            rec(1, 10_100, Some(0), 7.0),
            rec(2, 10_100, Some(0), 8.0),
        ];
        let d = Dataset::from_records(&records, 1000, 10_000).unwrap();
        assert_eq!(d.links, vec![LinkId::new(1, 9), LinkId::new(2, 9)]);
        assert_eq!(d.samples.len(), 2);
        assert_eq!((d.samples[0].day, d.samples[0].label, d.samples[0].window_end_us), (1, 1, 140));
        assert_eq!(d.samples[1].day, 2);
        assert_eq!(d.samples[1].features[1][0], 8.0);
        d.validate().unwrap();
    }

    #[test]
    fn concat_dimensions() {
        let links: Vec<LinkId> = (0..72).map(|i| LinkId::new(i / 8, i % 8 + 100)).collect();
        let sample = Sample { day: 1, label: 0, window_end_us: 0, features: vec![[0.5; FEATURE_COUNT]; 72] };
        let d = Dataset { links: links.clone(), samples: vec![sample.clone()] };
        assert_eq!(concat_fusion(&d, &sample, &links).unwrap().len(), 792);
        assert_eq!(concat_fusion(&d, &sample, &links[..1]).unwrap().len(), 11);
        assert_eq!(concat_fusion(&d, &sample, &links[5..8]).unwrap().len(), 33);
        assert!(matches!(concat_fusion(&d, &sample, &[LinkId::new(999, 1)]), Err(LearnError::MissingLink(_))));
    }

    #[test]
    fn classifier_names_roundtrip() {
        for k in [
            ClassifierKind::Logistic,
            ClassifierKind::Mlp,
            ClassifierKind::RandomScores,
            ClassifierKind::SoftAttention,
            ClassifierKind::HardAttention(3),
        ] {
            assert_eq!(k.to_string().parse::<ClassifierKind>().unwrap(), k);
        }
        assert!("svm".parse::<ClassifierKind>().is_err());
    }

    #[test]
    fn class_weights_balance() {
        let w = class_weights(&[1, 0, 0, 0]).unwrap();
        assert_eq!(w, vec![2.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(class_weights(&[1, 1]), Err(LearnError::SingleClass));
    }
}
