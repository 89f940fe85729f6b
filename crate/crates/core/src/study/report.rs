//! Aggregation of fold results into comparison tables and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stats::{self, bootstrap_ci, cohens_d, paired_t_test, wilcoxon_signed_rank, TTest, Wilcoxon};
use super::tables::{self, cost_table, nodes_for_links, nyquist_table, CostRow, NyquistRow};
use super::{link_day_records, Configuration, FoldResult, FoldSpec, LinkDayRecord, LinkPolicy, LinkQualityMatrix, SkippedFold, StudyError, SweepRow, SweepTable};
use crate::learn::{ClassifierKind, RankCriterion};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportMeta {
    pub seed: u64,
    pub bootstrap_iterations: usize,
    pub confidence: f64,
    pub slot_ms: f64,
    pub max_nodes: usize,
    pub nyquist_hz: f64,
    pub unit_cost: f64,
}

impl Default for ReportMeta {
    fn default() -> Self {
        Self {
            seed: 42,
            bootstrap_iterations: 10_000,
            confidence: 0.95,
            slot_ms: 80.0,
            max_nodes: 9,
            nyquist_hz: tables::DEFAULT_NYQUIST_HZ,
            unit_cost: tables::DEFAULT_UNIT_COST,
        }
    }
}

/// Everything a report is derived from; persisted as `results.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StudyResults {
    pub meta: ReportMeta,
    pub folds: Vec<FoldSpec>,
    pub results: Vec<FoldResult>,
    pub skipped: Vec<SkippedFold>,
}

impl StudyResults {
    pub fn extend(&mut self, runs: impl IntoIterator<Item = super::ConfigurationRun>) {
        for r in runs {
            self.results.extend(r.results);
            self.skipped.extend(r.skipped);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("results serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, StudyError> {
        serde_json::from_str(text).map_err(|e| StudyError::Other(format!("results file: {e}")))
    }

    /// Every configuration must have a result or a skip flag for every fold.
    pub fn missing_cells(&self) -> Vec<String> {
        let mut seen: BTreeMap<&Configuration, BTreeSet<u32>> = BTreeMap::new();
        for r in &self.results {
            seen.entry(&r.configuration).or_default().insert(r.fold.test_day);
        }
        for s in &self.skipped {
            seen.entry(&s.configuration).or_default().insert(s.test_day);
        }
        let mut missing = Vec::new();
        for (config, days) in &seen {
            for f in &self.folds {
                if !days.contains(&f.test_day) {
                    missing.push(format!("{} day {}", config.id(), f.test_day));
                }
            }
        }
        missing
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSummary {
    pub configuration: String,
    pub classifier: ClassifierKind,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub folds: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub a: String,
    pub b: String,
    pub folds: usize,
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_b: f64,
    pub std_b: f64,
    pub mean_diff: f64,
    pub t_test: Option<TTest>,
    pub wilcoxon: Option<Wilcoxon>,
    pub cohens_d: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

impl StatsSummary {
    /// Paired comparison of `a` against `b` over the folds both completed.
    pub fn compare(a_id: &str, a: &BTreeMap<u32, f64>, b_id: &str, b: &BTreeMap<u32, f64>, iterations: usize, level: f64, seed: u64) -> Self {
        let days: Vec<u32> = a.keys().filter(|d| b.contains_key(d)).copied().collect();
        let xa: Vec<f64> = days.iter().map(|d| a[d]).collect();
        let xb: Vec<f64> = days.iter().map(|d| b[d]).collect();
        let diffs: Vec<f64> = xa.iter().zip(&xb).map(|(x, y)| x - y).collect();
        let ci = bootstrap_ci(&diffs, iterations, level, seed).ok();
        let mean_or_zero = |v: &[f64]| if v.is_empty() { 0.0 } else { stats::mean(v) };
        Self {
            a: a_id.to_string(),
            b: b_id.to_string(),
            folds: days.len(),
            mean_a: mean_or_zero(&xa),
            std_a: stats::sample_std(&xa),
            mean_b: mean_or_zero(&xb),
            std_b: stats::sample_std(&xb),
            mean_diff: mean_or_zero(&diffs),
            t_test: paired_t_test(&xa, &xb).ok(),
            wilcoxon: wilcoxon_signed_rank(&xa, &xb).ok(),
            cohens_d: cohens_d(&xa, &xb).ok(),
            ci_low: ci.map(|c| c.0),
            ci_high: ci.map(|c| c.1),
            wins: diffs.iter().filter(|&&d| d > 0.0).count(),
            losses: diffs.iter().filter(|&&d| d < 0.0).count(),
            ties: diffs.iter().filter(|&&d| d == 0.0).count(),
        }
    }

    pub fn ci_half_width(&self) -> Option<f64> {
        Some((self.ci_high? - self.ci_low?) / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityTable {
    pub classifier: ClassifierKind,
    pub matrix: LinkQualityMatrix,
    pub records: Vec<LinkDayRecord>,
    pub median_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub results: StudyResults,
    pub configurations: Vec<ConfigSummary>,
    pub comparisons: Vec<StatsSummary>,
    pub sweeps: Vec<SweepTable>,
    pub quality: Vec<QualityTable>,
    pub nyquist: Vec<NyquistRow>,
    pub cost: Vec<CostRow>,
}

fn string_key(s: &str) -> u64 {
    let words: Vec<u64> = s.bytes().map(u64::from).collect();
    rng::mix(0x57, &words)
}

fn is_single_link(c: &Configuration) -> bool {
    matches!(&c.policy, LinkPolicy::Links(l) if l.len() == 1)
}

impl StudyReport {
    /// Derives every table from the persisted results; refuses partial grids.
    pub fn build(results: &StudyResults) -> Result<Self, StudyError> {
        let missing = results.missing_cells();
        if !missing.is_empty() {
            return Err(StudyError::Partial(missing));
        }
        let meta = &results.meta;
        let mut by_config: BTreeMap<&Configuration, BTreeMap<u32, f64>> = BTreeMap::new();
        for r in &results.results {
            by_config.entry(&r.configuration).or_default().insert(r.fold.test_day, r.auc);
        }
        let mut skipped: BTreeMap<&Configuration, usize> = BTreeMap::new();
        for s in &results.skipped {
            *skipped.entry(&s.configuration).or_default() += 1;
        }

        let configurations = by_config
            .iter()
            .filter(|(c, _)| !is_single_link(c))
            .map(|(c, aucs)| {
                let v: Vec<f64> = aucs.values().copied().collect();
                ConfigSummary {
                    configuration: c.id(),
                    classifier: c.classifier,
                    mean_auc: stats::mean(&v),
                    std_auc: stats::sample_std(&v),
                    folds: v.len(),
                    skipped: skipped.get(c).copied().unwrap_or(0),
                }
            })
            .collect();

        let mut comparisons = Vec::new();
        let mut compare = |a: &Configuration, b: &Configuration| {
            let (ia, ib) = (a.id(), b.id());
            let seed = rng::mix(meta.seed, &[string_key(&ia), string_key(&ib)]);
            comparisons.push(StatsSummary::compare(&ia, &by_config[a], &ib, &by_config[b], meta.bootstrap_iterations, meta.confidence, seed));
        };
        for (c, _) in by_config.iter().filter(|(c, _)| !is_single_link(c) && c.policy != LinkPolicy::All) {
            let all = Configuration::new(LinkPolicy::All, c.classifier);
            if by_config.contains_key(&all) {
                compare(c, &all);
            }
        }
        for (c, _) in by_config.iter() {
            let LinkPolicy::TopK { k, .. } = c.policy else { continue };
            for (r, _) in by_config.iter() {
                if matches!(r.policy, LinkPolicy::RandomK { k: rk, .. } if rk == k) && r.classifier == c.classifier {
                    compare(c, r);
                }
            }
        }

        let mut sweep_groups: BTreeMap<(RankCriterion, ClassifierKind), Vec<SweepRow>> = BTreeMap::new();
        for (c, aucs) in &by_config {
            if let LinkPolicy::TopK { criterion, k } = c.policy {
                let v: Vec<f64> = aucs.values().copied().collect();
                sweep_groups.entry((criterion, c.classifier)).or_default().push(SweepRow {
                    count: k,
                    mean: stats::mean(&v),
                    std: stats::sample_std(&v),
                    folds: v.len(),
                });
            }
        }
        let sweeps = sweep_groups
            .into_iter()
            .map(|((criterion, classifier), mut rows)| {
                rows.sort_by_key(|r| r.count);
                SweepTable { criterion, classifier, rows }
            })
            .collect();

        let mut per_classifier: BTreeMap<ClassifierKind, Vec<FoldResult>> = BTreeMap::new();
        for r in results.results.iter().filter(|r| is_single_link(&r.configuration)) {
            per_classifier.entry(r.configuration.classifier).or_default().push(r.clone());
        }
        let quality = per_classifier
            .into_iter()
            .map(|(classifier, rs)| {
                let records = link_day_records(&rs);
                let mut aucs: Vec<f64> = records.iter().map(|r| r.auc).collect();
                aucs.sort_by(f64::total_cmp);
                QualityTable {
                    classifier,
                    matrix: LinkQualityMatrix::from_records(&records),
                    median_auc: crate::pipeline::features::quantile_sorted(&aucs, 0.5),
                    records,
                }
            })
            .collect();

        let node_counts: Vec<usize> = (2..=meta.max_nodes).collect();
        Ok(Self {
            results: results.clone(),
            configurations,
            comparisons,
            sweeps,
            quality,
            nyquist: nyquist_table(&node_counts, meta.slot_ms, meta.nyquist_hz),
            cost: cost_table(&node_counts, meta.unit_cost),
        })
    }

    pub fn configuration(&self, id: &str) -> Option<&ConfigSummary> {
        self.configurations.iter().find(|c| c.configuration == id)
    }

    pub fn comparison(&self, a: &str, b: &str) -> Option<&StatsSummary> {
        self.comparisons.iter().find(|s| s.a == a && s.b == b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    All,
}

impl std::str::FromStr for ReportFormat {
    type Err = StudyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "all" => Ok(Self::All),
            _ => Err(StudyError::Other(format!("unknown report format {s:?}"))),
        }
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Emitter {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Emitter {
    fn csv(&mut self, name: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), StudyError> {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| StudyError::Other(e.to_string()))?;
        w.write_record(header).map_err(|e| StudyError::Other(e.to_string()))?;
        for row in rows {
            w.write_record(&row).map_err(|e| StudyError::Other(e.to_string()))?;
        }
        w.flush().map_err(|e| StudyError::Other(e.to_string()))?;
        self.written.push(path);
        Ok(())
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), StudyError> {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|e| StudyError::Other(format!("{}: {e}", path.display())))?;
        self.written.push(path);
        Ok(())
    }
}

const HIST_BINS: usize = 20;

/// Writes the report tables and plot series under `dir`; returns the paths
/// written, in a fixed order.
pub fn emit_report(report: &StudyReport, dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>, StudyError> {
    let missing = report.results.missing_cells();
    if !missing.is_empty() {
        return Err(StudyError::Partial(missing));
    }
    fs::create_dir_all(dir).map_err(|e| StudyError::Other(format!("{}: {e}", dir.display())))?;
    let mut out = Emitter { dir: dir.to_path_buf(), written: Vec::new() };

    if matches!(format, ReportFormat::Json | ReportFormat::All) {
        out.text("summary.json", &(serde_json::to_string_pretty(report).expect("report serializes") + "\n"))?;
    }
    if !matches!(format, ReportFormat::Csv | ReportFormat::All) {
        return Ok(out.written);
    }

    let mut results: Vec<&FoldResult> = report.results.results.iter().collect();
    results.sort_by(|a, b| (a.configuration.id(), a.fold.test_day).cmp(&(b.configuration.id(), b.fold.test_day)));
    out.csv(
        "fold_results.csv",
        &["configuration", "classifier", "test_day", "train_days", "auc", "selected_links", "train_samples", "test_samples"],
        results.iter().map(|r| {
            vec![
                r.configuration.id(),
                r.configuration.classifier.to_string(),
                r.fold.test_day.to_string(),
                r.fold.train_days.len().to_string(),
                r.auc.to_string(),
                r.selected_links.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("+"),
                r.train_samples.to_string(),
                r.test_samples.to_string(),
            ]
        }),
    )?;
    out.csv(
        "skipped_folds.csv",
        &["configuration", "test_day", "reason"],
        report.results.skipped.iter().map(|s| vec![s.configuration.id(), s.test_day.to_string(), s.reason.clone()]),
    )?;
    out.csv(
        "configurations.csv",
        &["configuration", "classifier", "mean_auc", "std_auc", "folds", "skipped"],
        report.configurations.iter().map(|c| {
            vec![c.configuration.clone(), c.classifier.to_string(), c.mean_auc.to_string(), c.std_auc.to_string(), c.folds.to_string(), c.skipped.to_string()]
        }),
    )?;
    out.csv(
        "comparisons.csv",
        &[
            "a", "b", "folds", "mean_a", "std_a", "mean_b", "std_b", "mean_diff", "t", "t_p", "wilcoxon_w", "wilcoxon_p", "cohens_d", "ci_low", "ci_high",
            "wins", "losses", "ties",
        ],
        report.comparisons.iter().map(|s| {
            vec![
                s.a.clone(),
                s.b.clone(),
                s.folds.to_string(),
                s.mean_a.to_string(),
                s.std_a.to_string(),
                s.mean_b.to_string(),
                s.std_b.to_string(),
                s.mean_diff.to_string(),
                opt(s.t_test.map(|t| t.t)),
                opt(s.t_test.map(|t| t.p)),
                opt(s.wilcoxon.map(|w| w.w)),
                opt(s.wilcoxon.map(|w| w.p_two_sided)),
                opt(s.cohens_d),
                opt(s.ci_low),
                opt(s.ci_high),
                s.wins.to_string(),
                s.losses.to_string(),
                s.ties.to_string(),
            ]
        }),
    )?;
    out.csv(
        "sweep.csv",
        &["criterion", "classifier", "count", "mean_auc", "std_auc", "folds"],
        report.sweeps.iter().flat_map(|t| {
            t.rows.iter().map(move |r| {
                vec![t.criterion.to_string(), t.classifier.to_string(), r.count.to_string(), r.mean.to_string(), r.std.to_string(), r.folds.to_string()]
            })
        }),
    )?;
    out.csv(
        "cost_performance.csv",
        &["criterion", "classifier", "links", "nodes", "cost", "mean_auc"],
        report.sweeps.iter().flat_map(|t| {
            let unit = report.results.meta.unit_cost;
            t.rows.iter().map(move |r| {
                let nodes = nodes_for_links(r.count);
                vec![t.criterion.to_string(), t.classifier.to_string(), r.count.to_string(), nodes.to_string(), (nodes as f64 * unit).to_string(), r.mean.to_string()]
            })
        }),
    )?;
    for q in &report.quality {
        let mut header = vec!["tx\\rx".to_string()];
        header.extend(q.matrix.nodes.iter().map(|n| format!("{n:04X}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = q.matrix.nodes.iter().zip(&q.matrix.q).map(|(n, row)| {
            let mut r = vec![format!("{n:04X}")];
            r.extend(row.iter().map(|v| opt(*v)));
            r
        });
        out.csv(&format!("quality_matrix_{}.csv", q.classifier), &header, rows)?;
    }
    out.csv(
        "link_days.csv",
        &["classifier", "link", "day", "auc"],
        report.quality.iter().flat_map(|q| q.records.iter().map(move |r| vec![q.classifier.to_string(), r.link.to_string(), r.day.to_string(), r.auc.to_string()])),
    )?;
    out.csv(
        "link_auc_histogram.csv",
        &["classifier", "bin_low", "bin_high", "count"],
        report.quality.iter().flat_map(|q| {
            let mut counts = [0usize; HIST_BINS];
            for r in &q.records {
                counts[((r.auc * HIST_BINS as f64) as usize).min(HIST_BINS - 1)] += 1;
            }
            counts.into_iter().enumerate().map(move |(i, c)| {
                vec![q.classifier.to_string(), (i as f64 / HIST_BINS as f64).to_string(), ((i + 1) as f64 / HIST_BINS as f64).to_string(), c.to_string()]
            })
        }),
    )?;
    out.csv(
        "nyquist.csv",
        &["nodes", "links", "cycle_ms", "rate_hz", "threshold_hz", "meets_threshold"],
        report.nyquist.iter().map(|r| {
            vec![r.nodes.to_string(), r.links.to_string(), r.cycle_ms.to_string(), r.rate_hz.to_string(), r.threshold_hz.to_string(), r.meets_threshold.to_string()]
        }),
    )?;
    out.csv("cost.csv", &["nodes", "links", "cost"], report.cost.iter().map(|r| vec![r.nodes.to_string(), r.links.to_string(), r.cost.to_string()]))?;
    Ok(out.written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LinkId;

    fn fold(d: u32) -> FoldSpec {
        FoldSpec { train_days: (1..d).collect(), test_day: d }
    }

    fn result(policy: LinkPolicy, d: u32, auc: f64) -> FoldResult {
        FoldResult {
            fold: fold(d),
            configuration: Configuration::new(policy, ClassifierKind::Logistic),
            auc,
            selected_links: vec![LinkId::new(1, 2)],
            train_samples: 10,
            test_samples: 5,
        }
    }

    fn sample() -> StudyResults {
        let mut results = Vec::new();
        for d in 3..=7 {
            let x = d as f64 / 100.0;
            results.push(result(LinkPolicy::All, d, 0.5 + x / 3.0));
            for (k, base) in [(1, 0.6), (3, 0.58), (10, 0.55), (36, 0.53), (72, 0.5)] {
                results.push(result(LinkPolicy::TopK { criterion: RankCriterion::Snr, k }, d, base + x));
            }
            results.push(result(LinkPolicy::RandomK { seed: 1, k: 1 }, d, 0.57 + x / 2.0));
            for (tx, rx, a) in [(1, 2, 0.7), (2, 1, 0.6), (1, 3, 0.5)] {
                results.push(result(LinkPolicy::Links(vec![LinkId::new(tx, rx)]), d, a - x));
            }
        }
        StudyResults { meta: ReportMeta::default(), folds: (3..=7).map(fold).collect(), results, skipped: vec![] }
    }

    #[test]
    fn tables_from_results() {
        let r = StudyReport::build(&sample()).unwrap();
        assert_eq!(r.sweeps.len(), 1);
        assert_eq!(r.sweeps[0].rows.iter().map(|r| r.count).collect::<Vec<_>>(), vec![1, 3, 10, 36, 72]);
        assert!(r.sweeps[0].non_increasing_within_se());
        let c = r.comparison("top_k(snr,1)/logistic", "all/logistic").unwrap();
        assert_eq!((c.folds, c.wins, c.losses), (5, 5, 0));
        assert!(c.ci_low.unwrap() <= c.ci_high.unwrap());
        assert!(r.comparison("top_k(snr,1)/logistic", "random_k(1,1)/logistic").is_some());
        assert_eq!(r.quality.len(), 1);
        assert_eq!(r.quality[0].records.len(), 15);
        let q = &r.quality[0].matrix;
        assert!((q.get(LinkId::new(1, 2)).unwrap() - 0.65).abs() < 1e-12);
        assert_eq!(r.configurations.len(), 7);
        assert_eq!(r.nyquist.len(), 8);
    }

    #[test]
    fn partial_results_are_refused() {
        let mut s = sample();
        s.results.retain(|r| !(r.fold.test_day == 5 && r.configuration.policy == LinkPolicy::All));
        match StudyReport::build(&s) {
            Err(StudyError::Partial(m)) => assert_eq!(m, vec!["all/logistic day 5".to_string()]),
            other => panic!("{other:?}"),
        }
        // a flagged skip completes the cell
        s.skipped.push(SkippedFold {
            test_day: 5,
            configuration: Configuration::new(LinkPolicy::All, ClassifierKind::Logistic),
            reason: "single-class test day".into(),
        });
        assert_eq!(StudyReport::build(&s).unwrap().configuration("all/logistic").unwrap().skipped, 1);
    }

    #[test]
    fn emission_is_reproducible() {
        let s = sample();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let files = emit_report(&StudyReport::build(&s).unwrap(), a.path(), ReportFormat::All).unwrap();
        // regenerate from the persisted results
        let reloaded = StudyResults::from_json(&s.to_json()).unwrap();
        assert_eq!(reloaded, s);
        emit_report(&StudyReport::build(&reloaded).unwrap(), b.path(), ReportFormat::All).unwrap();
        for f in &files {
            let name = f.file_name().unwrap();
            assert_eq!(fs::read(f).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name:?}");
        }
        let sweep = fs::read_to_string(a.path().join("sweep.csv")).unwrap();
        assert_eq!(sweep.lines().count(), 6);
        let summary: StudyReport = serde_json::from_str(&fs::read_to_string(a.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary, StudyReport::build(&s).unwrap());
    }
}
