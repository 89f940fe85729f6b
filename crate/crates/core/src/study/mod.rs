//! Day-level evaluation: forward-chaining folds, link policies, sweeps and
//! the per-link quality matrix.

pub mod experiment;
pub mod report;
pub mod stats;
pub mod tables;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::geometry::LinkId;
use crate::learn::{auc, fit_and_score, rank_links, select_top_k, ClassifierKind, ClassifierParams, Dataset, LearnError, RankCriterion};
use crate::rng;

pub use experiment::{prepare_dataset, Prepared};
pub use report::{emit_report, ReportFormat, StudyReport, StudyResults};
pub use stats::{bootstrap_ci, cohens_d, paired_t_test, wilcoxon_signed_rank, StatsError};
pub use tables::{cost_table, nyquist_table, CostRow, NyquistRow};

pub const DEFAULT_SWEEP_COUNTS: [usize; 5] = [1, 3, 10, 36, 72];

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("need more days than min_train_days ({days} <= {min_train_days})")]
    TooFewDays { days: u32, min_train_days: u32 },
    #[error("dataset has no samples for day {0}")]
    MissingDay(u32),
    #[error("unknown link policy {0:?}")]
    Policy(String),
    #[error("link count {k} outside [1, {max}]")]
    Count { k: usize, max: usize },
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("report is incomplete; missing cells: {}", .0.join(", "))]
    Partial(Vec<String>),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FoldSpec {
    pub train_days: Vec<u32>,
    pub test_day: u32,
}

/// Expanding-window folds: train on days `1..d`, test on day `d`.
pub fn forward_chain_folds(day_count: u32, min_train_days: u32) -> Result<Vec<FoldSpec>, StudyError> {
    if min_train_days < 1 || day_count <= min_train_days {
        return Err(StudyError::TooFewDays { days: day_count, min_train_days });
    }
    Ok((min_train_days + 1..=day_count).map(|d| FoldSpec { train_days: (1..d).collect(), test_day: d }).collect())
}

/// Which links feed the classifier in each fold.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkPolicy {
    All,
    /// Best `k` links under a ranking fitted on the training days.
    TopK { criterion: RankCriterion, k: usize },
    /// `k` links drawn per fold from a stream keyed by the seed and test day.
    RandomK { seed: u64, k: usize },
    /// A fixed link set.
    Links(Vec<LinkId>),
}

impl fmt::Display for LinkPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::All => f.write_str("all"),
            Self::TopK { criterion, k } => write!(f, "top_k({criterion},{k})"),
            Self::RandomK { seed, k } => write!(f, "random_k({seed},{k})"),
            Self::Links(links) => {
                let names: Vec<String> = links.iter().map(|l| l.to_string()).collect();
                write!(f, "links({})", names.join("+"))
            }
        }
    }
}

impl FromStr for LinkPolicy {
    type Err = StudyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || StudyError::Policy(s.to_string());
        if s == "all" {
            return Ok(Self::All);
        }
        let (name, args) = s.strip_suffix(')').and_then(|r| r.split_once('(')).ok_or_else(bad)?;
        match name {
            "top_k" => {
                // the criterion may itself contain a comma-free "random(n)"
                let (c, k) = args.rsplit_once(',').ok_or_else(bad)?;
                Ok(Self::TopK { criterion: c.parse().map_err(|_| bad())?, k: k.parse().map_err(|_| bad())? })
            }
            "random_k" => {
                let (seed, k) = args.split_once(',').ok_or_else(bad)?;
                Ok(Self::RandomK { seed: seed.parse().map_err(|_| bad())?, k: k.parse().map_err(|_| bad())? })
            }
            "links" => {
                let links = args.split('+').map(|l| l.parse::<LinkId>().map_err(|_| bad())).collect::<Result<Vec<_>, _>>()?;
                if links.is_empty() {
                    return Err(bad());
                }
                Ok(Self::Links(links))
            }
            _ => Err(bad()),
        }
    }
}

impl Serialize for LinkPolicy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LinkPolicy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Configuration {
    pub policy: LinkPolicy,
    pub classifier: ClassifierKind,
}

impl Configuration {
    pub fn new(policy: LinkPolicy, classifier: ClassifierKind) -> Self {
        Self { policy, classifier }
    }

    pub fn id(&self) -> String {
        format!("{}/{}", self.policy, self.classifier)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub seed: u64,
    pub epsilon: f64,
    pub params: ClassifierParams,
    /// Shuffle each test day's labels with this seed before scoring.
    pub permute_test_labels: Option<u64>,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self { seed: 42, epsilon: 1e-8, params: ClassifierParams::default(), permute_test_labels: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: FoldSpec,
    pub configuration: Configuration,
    pub auc: f64,
    /// Links fed to the classifier, best first for ranked policies.
    pub selected_links: Vec<LinkId>,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedFold {
    pub test_day: u32,
    pub configuration: Configuration,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConfigurationRun {
    pub results: Vec<FoldResult>,
    pub skipped: Vec<SkippedFold>,
}

impl ConfigurationRun {
    pub fn aucs(&self) -> Vec<f64> {
        self.results.iter().map(|r| r.auc).collect()
    }
}

enum Cell {
    Done(FoldResult),
    Skipped(SkippedFold),
}

fn select_links(dataset: &Dataset, train_idx: &[usize], policy: &LinkPolicy, test_day: u32) -> Result<Vec<LinkId>, StudyError> {
    let max = dataset.links.len();
    let check = |k: usize| if k == 0 || k > max { Err(StudyError::Count { k, max }) } else { Ok(()) };
    Ok(match policy {
        LinkPolicy::All => dataset.links.clone(),
        LinkPolicy::TopK { criterion, k } => {
            check(*k)?;
            select_top_k(&rank_links(dataset, train_idx, *criterion)?, *k)?
        }
        LinkPolicy::RandomK { seed, k } => {
            check(*k)?;
            let mut links = dataset.links.clone();
            links.shuffle(&mut rng::keyed(*seed, &[0x4B, test_day as u64]));
            links.truncate(*k);
            links
        }
        LinkPolicy::Links(links) => {
            for &l in links {
                dataset.link_index(l)?;
            }
            links.clone()
        }
    })
}

fn run_cell(dataset: &Dataset, fold: &FoldSpec, config: &Configuration, opts: &StudyOptions) -> Result<Cell, StudyError> {
    let train_days: BTreeSet<u32> = fold.train_days.iter().copied().collect();
    let train_idx = dataset.indices_where(|s| train_days.contains(&s.day));
    let test_idx = dataset.indices_where(|s| s.day == fold.test_day);
    let skip = |reason: &str| {
        Ok(Cell::Skipped(SkippedFold { test_day: fold.test_day, configuration: config.clone(), reason: reason.to_string() }))
    };
    let mut test_labels = dataset.labels(&test_idx);
    if test_labels.iter().all(|&l| l == test_labels[0]) {
        return skip("single-class test day");
    }
    let train_labels = dataset.labels(&train_idx);
    if train_labels.iter().all(|&l| l == train_labels[0]) {
        return skip("single-class training days");
    }

    let selected = select_links(dataset, &train_idx, &config.policy, fold.test_day)?;
    // columns follow the dataset's link order so equal link sets give equal designs
    let mut columns: Vec<usize> = selected.iter().map(|&l| dataset.link_index(l)).collect::<Result<_, _>>()?;
    columns.sort_unstable();
    let stats = dataset.fit_stats(&train_idx, &columns, opts.epsilon)?;
    let x_train = dataset.design(&train_idx, &columns, Some(&stats))?;
    let x_test = dataset.design(&test_idx, &columns, Some(&stats))?;
    let sample_days: Vec<u32> = train_idx.iter().map(|&i| dataset.samples[i].day).collect();
    let seed = rng::mix(opts.seed, &[0xF01D, fold.test_day as u64]);
    let outcome = fit_and_score(config.classifier, &opts.params, &x_train, &train_labels, &sample_days, &x_test, seed)?;

    if let Some(perm_seed) = opts.permute_test_labels {
        test_labels.shuffle(&mut rng::keyed(perm_seed, &[0x9E27, fold.test_day as u64]));
    }
    let auc = auc(&outcome.scores, &test_labels)?;
    Ok(Cell::Done(FoldResult {
        fold: fold.clone(),
        configuration: config.clone(),
        auc,
        selected_links: selected,
        train_samples: train_idx.len(),
        test_samples: test_idx.len(),
    }))
}

fn check_days(dataset: &Dataset, folds: &[FoldSpec]) -> Result<(), StudyError> {
    let days: BTreeSet<u32> = dataset.days().into_iter().collect();
    for f in folds {
        if let Some(d) = f.train_days.iter().chain([&f.test_day]).find(|d| !days.contains(d)) {
            return Err(StudyError::MissingDay(*d));
        }
    }
    Ok(())
}

/// Evaluates every (configuration, fold) cell in parallel; runs come back in
/// the order of `configs`, results within a run in fold order.
pub fn run_grid(dataset: &Dataset, folds: &[FoldSpec], configs: &[Configuration], opts: &StudyOptions) -> Result<Vec<ConfigurationRun>, StudyError> {
    check_days(dataset, folds)?;
    let cells: Vec<(usize, usize)> = (0..configs.len()).flat_map(|c| (0..folds.len()).map(move |f| (c, f))).collect();
    let done = cells
        .par_iter()
        .map(|&(c, f)| run_cell(dataset, &folds[f], &configs[c], opts))
        .collect::<Result<Vec<_>, _>>()?;
    let mut runs = vec![ConfigurationRun::default(); configs.len()];
    for ((c, _), cell) in cells.into_iter().zip(done) {
        match cell {
            Cell::Done(r) => runs[c].results.push(r),
            Cell::Skipped(s) => runs[c].skipped.push(s),
        }
    }
    Ok(runs)
}

pub fn run_configuration(dataset: &Dataset, folds: &[FoldSpec], config: &Configuration, opts: &StudyOptions) -> Result<ConfigurationRun, StudyError> {
    Ok(run_grid(dataset, folds, std::slice::from_ref(config), opts)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub criterion: RankCriterion,
    pub classifier: ClassifierKind,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Whether each step's mean rises by at most one pooled standard error,
    /// `sqrt((s1^2 + s2^2) / 2) * sqrt(1/n1 + 1/n2)`.
    pub fn non_increasing_within_se(&self) -> bool {
        self.rows.windows(2).all(|w| {
            let (a, b) = (&w[0], &w[1]);
            let pooled = ((a.std * a.std + b.std * b.std) / 2.0).sqrt();
            let se = pooled * (1.0 / a.folds as f64 + 1.0 / b.folds as f64).sqrt();
            b.mean <= a.mean + se
        })
    }
}

pub fn sweep_configurations(counts: &[usize], criterion: RankCriterion, classifier: ClassifierKind) -> Vec<Configuration> {
    counts.iter().map(|&k| Configuration::new(LinkPolicy::TopK { criterion, k }, classifier)).collect()
}

pub fn sweep_row(count: usize, run: &ConfigurationRun) -> SweepRow {
    let aucs = run.aucs();
    SweepRow { count, mean: stats::mean(&aucs), std: stats::sample_std(&aucs), folds: aucs.len() }
}

/// Mean and spread of AUC over folds for the top-`k` policy at each count.
pub fn link_count_sweep(
    dataset: &Dataset,
    folds: &[FoldSpec],
    counts: &[usize],
    criterion: RankCriterion,
    classifier: ClassifierKind,
    opts: &StudyOptions,
) -> Result<(SweepTable, Vec<ConfigurationRun>), StudyError> {
    let max = dataset.links.len();
    if let Some(&k) = counts.iter().find(|&&k| k == 0 || k > max) {
        return Err(StudyError::Count { k, max });
    }
    let runs = run_grid(dataset, folds, &sweep_configurations(counts, criterion, classifier), opts)?;
    let rows = counts.iter().zip(&runs).map(|(&k, r)| sweep_row(k, r)).collect();
    Ok((SweepTable { criterion, classifier, rows }, runs))
}

/// Per-link detection quality; `q[i][j]` is the mean AUC of link
/// `nodes[i] -> nodes[j]`, `None` on the diagonal or where no fold ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkQualityMatrix {
    pub nodes: Vec<u16>,
    pub q: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDayRecord {
    pub link: LinkId,
    pub day: u32,
    pub auc: f64,
}

impl LinkQualityMatrix {
    pub fn from_records(records: &[LinkDayRecord]) -> Self {
        let nodes: Vec<u16> = records.iter().flat_map(|r| [r.link.tx, r.link.rx]).collect::<BTreeSet<_>>().into_iter().collect();
        let n = nodes.len();
        let mut sums = vec![vec![(0.0, 0usize); n]; n];
        for r in records {
            let i = nodes.binary_search(&r.link.tx).expect("node listed");
            let j = nodes.binary_search(&r.link.rx).expect("node listed");
            sums[i][j].0 += r.auc;
            sums[i][j].1 += 1;
        }
        let q = sums
            .into_iter()
            .enumerate()
            .map(|(i, row)| row.into_iter().enumerate().map(|(j, (s, c))| (i != j && c > 0).then(|| s / c as f64)).collect())
            .collect();
        Self { nodes, q }
    }

    pub fn get(&self, link: LinkId) -> Option<f64> {
        let i = self.nodes.binary_search(&link.tx).ok()?;
        let j = self.nodes.binary_search(&link.rx).ok()?;
        self.q[i][j]
    }
}

pub fn single_link_configurations(dataset: &Dataset, classifier: ClassifierKind) -> Vec<Configuration> {
    dataset.links.iter().map(|&l| Configuration::new(LinkPolicy::Links(vec![l]), classifier)).collect()
}

/// Link-day records from single-link runs, in link then day order.
pub fn link_day_records(results: &[FoldResult]) -> Vec<LinkDayRecord> {
    let mut out: Vec<LinkDayRecord> = results
        .iter()
        .filter_map(|r| match &r.configuration.policy {
            LinkPolicy::Links(l) if l.len() == 1 => Some(LinkDayRecord { link: l[0], day: r.fold.test_day, auc: r.auc }),
            _ => None,
        })
        .collect();
    out.sort_by(|a, b| (a.link, a.day).cmp(&(b.link, b.day)));
    out
}

/// Fits every link on its own and tabulates the AUCs.
pub fn per_link_quality(
    dataset: &Dataset,
    folds: &[FoldSpec],
    classifier: ClassifierKind,
    opts: &StudyOptions,
) -> Result<(LinkQualityMatrix, Vec<LinkDayRecord>, Vec<ConfigurationRun>), StudyError> {
    let runs = run_grid(dataset, folds, &single_link_configurations(dataset, classifier), opts)?;
    let results: Vec<FoldResult> = runs.iter().flat_map(|r| r.results.iter().cloned()).collect();
    let records = link_day_records(&results);
    Ok((LinkQualityMatrix::from_records(&records), records, runs))
}

/// Splits a list of link ids such as `"E228-D990,A4F0-B724"`.
pub fn parse_links(s: &str) -> Result<Vec<LinkId>, StudyError> {
    s.split(',').map(|l| l.trim().parse::<LinkId>().map_err(|_| StudyError::Policy(s.to_string()))).collect()
}
