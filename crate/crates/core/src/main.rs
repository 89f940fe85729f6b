use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use csi_mesh::learn::{ClassifierKind, RankCriterion};
use csi_mesh::pipeline::{attach_labels, read_features_csv, write_features_csv, FeaturePipeline};
use csi_mesh::protocol::collector::{BURST_PORT_ENV, DEFAULT_BURST_PORT, DEFAULT_UNICAST_PORT, PORT_ENV};
use csi_mesh::protocol::{CaptureReader, CaptureWriter, Collector, CollectorConfig};
use csi_mesh::scenario::Scenario;
use csi_mesh::study::experiment::dataset_from_records;
use csi_mesh::study::report::StatsSummary;
use csi_mesh::study::{
    emit_report, forward_chain_folds, parse_links, per_link_quality, prepare_dataset, run_grid, sweep_configurations, Configuration,
    LinkPolicy, ReportFormat, StudyOptions, StudyReport, StudyResults,
};
use csi_mesh::synth::{LabelStream, SimConfig, Simulation};

const OUT_ENV: &str = "CSI_MESH_OUT";

#[derive(Parser)]
#[command(name = "csi-mesh", version, about = "Mesh CSI occupancy sensing: simulate, ingest, extract features, evaluate link selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario into a packet capture and a label file.
    Simulate(SimulateArgs),
    /// Record UDP packets (or re-validate capture files) into a capture.
    Ingest(IngestArgs),
    /// Turn a packet capture into a labelled feature CSV.
    Features(FeaturesArgs),
    /// Run link-selection configurations over forward-chaining folds.
    Study(StudyArgs),
    /// Compare two configurations of a results file.
    Stats(StatsArgs),
    /// Write tables and plot data from a results file.
    Report(ReportArgs),
    /// Link-count sweep of the top-k policy.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML; the built-in nine-node deployment when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario> {
        Scenario::load_or_default(self.scenario.as_deref()).with_context(|| format!("loading scenario {:?}", self.scenario))
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of days; defaults to the scenario's.
    #[arg(long)]
    days: Option<u32>,
    /// Emit every burst packet rather than one report per link per slot.
    #[arg(long)]
    bursts: bool,
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    /// Capture files to validate and merge instead of listening on UDP.
    #[arg(long)]
    input: Vec<PathBuf>,
    #[arg(long, default_value = "0.0.0.0")]
    host: IpAddr,
    #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_UNICAST_PORT)]
    port: u16,
    #[arg(long, env = BURST_PORT_ENV, default_value_t = DEFAULT_BURST_PORT)]
    burst_port: u16,
    /// Stop listening after this many seconds.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    /// Stop listening after this many packets.
    #[arg(long)]
    max_packets: Option<u64>,
    /// Output capture file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    packets: PathBuf,
    /// Label CSV; windows stay unlabelled without it.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Output feature CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    min_train_days: u32,
    /// Shuffle test-day labels with this seed (leakage check).
    #[arg(long)]
    permute_labels: Option<u64>,
}

impl EvalArgs {
    fn options(&self) -> StudyOptions {
        StudyOptions { seed: self.seed, permute_test_labels: self.permute_labels, ..Default::default() }
    }
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    features: PathBuf,
    /// Link policy: all, top_k(snr|temporal_variance,K), random_k(SEED,K) or
    /// links(A-B+C-D). Repeatable; defaults to all, top_k(snr,1) and
    /// random_k(<seed>,1).
    #[arg(long)]
    policy: Vec<LinkPolicy>,
    /// Fixed link list `A-B,C-D`, added as a links(...) policy.
    #[arg(long)]
    links: Option<String>,
    /// Classifier: logistic, mlp, soft_attention, hard_attention_K, random_scores.
    /// Repeatable.
    #[arg(long, default_values_t = [ClassifierKind::Logistic])]
    classifier: Vec<ClassifierKind>,
    /// Also fit every link on its own for the quality matrix.
    #[arg(long)]
    per_link: bool,
    /// Output results JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    results: PathBuf,
    /// Configuration id, e.g. `top_k(snr,1)/logistic`.
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long, default_value = "all")]
    format: ReportFormat,
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    eval: EvalArgs,
    /// Feature CSV; the scenario is simulated in memory when absent.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    days: Option<u32>,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 10, 36, 72])]
    counts: Vec<usize>,
    #[arg(long, default_value = "snr")]
    criterion: RankCriterion,
    #[arg(long, default_value = "logistic")]
    classifier: ClassifierKind,
    #[arg(long, env = OUT_ENV)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(a) => simulate(a),
        Command::Ingest(a) => ingest(a),
        Command::Features(a) => features(a),
        Command::Study(a) => study(a),
        Command::Stats(a) => stats(a),
        Command::Report(a) => report(a),
        Command::Sweep(a) => sweep(a),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let scenario = a.scenario.load()?;
    let days = a.days.unwrap_or(scenario.days);
    let mut config = SimConfig::new(scenario.clone(), days, a.seed);
    config.emit_bursts = a.bursts;
    let sim = Simulation::new(config)?;
    fs::create_dir_all(&a.out)?;
    let mut writer = CaptureWriter::new(File::create(a.out.join("packets.bin"))?);
    let mut failure = None;
    sim.for_each_packet(|p| {
        if failure.is_none() {
            failure = writer.write_packet(&p).err();
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    let packets = writer.records();
    writer.finish()?;
    sim.labels().write_csv(create(&a.out.join("labels.csv"))?)?;
    serde_json::to_writer_pretty(create(&a.out.join("timeline.json"))?, sim.timeline())?;
    fs::write(a.out.join("scenario.toml"), scenario.to_toml())?;
    println!("{packets} packets, {days} days, empty fraction {:.4} -> {}", sim.timeline().empty_fraction(), a.out.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut writer = CaptureWriter::new(create(&a.out)?);
    if !a.input.is_empty() {
        let mut rejected = 0u64;
        for path in &a.input {
            for p in CaptureReader::new(open(path)?).packets() {
                match p? {
                    Ok(p) => writer.write_packet(&p)?,
                    Err(_) => rejected += 1,
                }
            }
        }
        println!("{} packets kept, {rejected} rejected -> {}", writer.records(), a.out.display());
        writer.finish()?;
        return Ok(());
    }
    let config = CollectorConfig::new(vec![SocketAddr::new(a.host, a.port), SocketAddr::new(a.host, a.burst_port)]);
    let mut collector = Collector::start(&config).context("binding collector sockets")?;
    eprintln!("listening on {:?}", collector.local_addrs());
    let deadline = Instant::now() + Duration::from_secs_f64(a.duration.max(0.0));
    while Instant::now() < deadline && a.max_packets.is_none_or(|m| writer.records() < m) {
        if let Some(p) = collector.recv_timeout(Duration::from_millis(50)) {
            writer.write_packet(&p)?;
        }
    }
    collector.shutdown();
    while a.max_packets.is_none_or(|m| writer.records() < m) {
        let Some(p) = collector.try_recv() else { break };
        writer.write_packet(&p)?;
    }
    let s = collector.stats();
    println!(
        "{} packets written; received {} invalid {} (magic {} length {} crc {}) dropped {} -> {}",
        writer.records(),
        s.received,
        s.invalid,
        s.bad_magic,
        s.bad_length,
        s.crc_mismatch,
        s.dropped,
        a.out.display()
    );
    writer.finish()?;
    Ok(())
}

fn features(a: FeaturesArgs) -> Result<()> {
    let scenario = a.scenario.load()?;
    let mut pipeline = FeaturePipeline::new(scenario.pipeline.clone(), scenario.slot_plan()?, Some(scenario.day_us()))?;
    let mut rejected = 0u64;
    for p in CaptureReader::new(open(&a.packets)?).packets() {
        match p? {
            Ok(p) => pipeline.push(p)?,
            Err(_) => rejected += 1,
        }
    }
    let (mut records, sync) = pipeline.finish()?;
    if let Some(path) = &a.labels {
        let labels = LabelStream::read_csv(open(path)?).with_context(|| format!("reading {}", path.display()))?;
        attach_labels(&mut records, &labels);
    }
    write_features_csv(&records, create(&a.out)?)?;
    let labelled = records.iter().filter(|r| r.label.is_some()).count();
    println!(
        "{} windows ({labelled} labelled), {rejected} corrupt records, {} late packets -> {}",
        records.len(),
        sync.late,
        a.out.display()
    );
    Ok(())
}

fn load_dataset(scenario: &Scenario, path: &Path) -> Result<csi_mesh::learn::Dataset> {
    let records = read_features_csv(open(path)?).with_context(|| format!("reading {}", path.display()))?;
    Ok(dataset_from_records(scenario, &records)?)
}

fn study(a: StudyArgs) -> Result<()> {
    let scenario = a.scenario.load()?;
    let dataset = load_dataset(&scenario, &a.features)?;
    let mut policies = a.policy.clone();
    if let Some(l) = &a.links {
        policies.push(LinkPolicy::Links(parse_links(l)?));
    }
    if policies.is_empty() && !a.per_link {
        policies = vec![
            LinkPolicy::All,
            LinkPolicy::TopK { criterion: RankCriterion::Snr, k: 1 },
            LinkPolicy::RandomK { seed: a.eval.seed, k: 1 },
        ];
    }
    let configs: Vec<Configuration> =
        a.classifier.iter().flat_map(|&c| policies.iter().map(move |p| Configuration::new(p.clone(), c))).collect();
    let folds = forward_chain_folds(dataset.days().len() as u32, a.eval.min_train_days)?;
    check_days(&dataset)?;
    let opts = a.eval.options();
    let mut results = StudyResults { folds: folds.clone(), ..Default::default() };
    results.meta.seed = a.eval.seed;
    results.meta.slot_ms = scenario.tdma.slot_ms;
    results.extend(run_grid(&dataset, &folds, &configs, &opts)?);
    if a.per_link {
        for &c in &a.classifier {
            results.extend(per_link_quality(&dataset, &folds, c, &opts)?.2);
        }
    }
    write_results(&results, &a.out)?;
    print_summaries(&StudyReport::build(&results)?);
    Ok(())
}

/// Folds number days 1..=n; the dataset must hold exactly those days.
fn check_days(dataset: &csi_mesh::learn::Dataset) -> Result<()> {
    let days = dataset.days();
    if days.iter().copied().ne(1..=days.len() as u32) {
        bail!("features cover days {days:?}; expected consecutive days from 1");
    }
    Ok(())
}

fn write_results(results: &StudyResults, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(results.to_json().as_bytes())?;
    w.flush()?;
    Ok(())
}

fn print_summaries(report: &StudyReport) {
    for c in &report.configurations {
        println!("{:40} mean AUC {:.4} sd {:.4} folds {} skipped {}", c.configuration, c.mean_auc, c.std_auc, c.folds, c.skipped);
    }
    for q in &report.quality {
        println!("per-link {}: median link-day AUC {:.4}", q.classifier, q.median_auc);
    }
}

fn load_results(path: &Path) -> Result<StudyResults> {
    Ok(StudyResults::from_json(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?)
}

fn stats(a: StatsArgs) -> Result<()> {
    let results = load_results(&a.results)?;
    let by_day = |id: &str| -> Result<_> {
        let m: std::collections::BTreeMap<u32, f64> =
            results.results.iter().filter(|r| r.configuration.id() == id).map(|r| (r.fold.test_day, r.auc)).collect();
        if m.is_empty() {
            bail!("no results for configuration `{id}`");
        }
        Ok(m)
    };
    let (da, db) = (by_day(&a.a)?, by_day(&a.b)?);
    let seed = csi_mesh::rng::mix(results.meta.seed, &[0x57A7]);
    let summary = StatsSummary::compare(&a.a, &da, &a.b, &db, results.meta.bootstrap_iterations, results.meta.confidence, seed);
    let text = serde_json::to_string_pretty(&summary)?;
    match &a.out {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let results = load_results(&a.results)?;
    let report = StudyReport::build(&results)?;
    let files = emit_report(&report, &a.out, a.format)?;
    println!("{} files -> {}", files.len(), a.out.display());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let start = Instant::now();
    let scenario = a.scenario.load()?;
    let dataset = match &a.features {
        Some(path) => load_dataset(&scenario, path)?,
        None => prepare_dataset(&scenario, a.days.unwrap_or(scenario.days), a.eval.seed)?.dataset,
    };
    let max = dataset.links.len();
    if let Some(&k) = a.counts.iter().find(|&&k| k == 0 || k > max) {
        bail!("link count {k} outside 1..={max}");
    }
    let folds = forward_chain_folds(dataset.days().len() as u32, a.eval.min_train_days)?;
    check_days(&dataset)?;
    let mut configs = sweep_configurations(&a.counts, a.criterion, a.classifier);
    configs.push(Configuration::new(LinkPolicy::All, a.classifier));
    configs.push(Configuration::new(LinkPolicy::RandomK { seed: a.eval.seed, k: 1 }, a.classifier));
    let mut results = StudyResults { folds: folds.clone(), ..Default::default() };
    results.meta.seed = a.eval.seed;
    results.meta.slot_ms = scenario.tdma.slot_ms;
    results.extend(run_grid(&dataset, &folds, &configs, &a.eval.options())?);
    fs::create_dir_all(&a.out)?;
    write_results(&results, &a.out.join("results.json"))?;
    let report = StudyReport::build(&results)?;
    emit_report(&report, &a.out, ReportFormat::All)?;
    for t in &report.sweeps {
        for r in &t.rows {
            println!("{} {} k={:<3} mean AUC {:.4} sd {:.4} folds {}", t.criterion, t.classifier, r.count, r.mean, r.std, r.folds);
        }
        println!("non-increasing within one pooled SE: {}", t.non_increasing_within_se());
    }
    print_summaries(&report);
    println!("elapsed {:.1} s -> {}", start.elapsed().as_secs_f64(), a.out.display());
    Ok(())
}
