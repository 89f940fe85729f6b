//! Scenario to dataset in one pass, streaming packets straight into the
//! feature pipeline.

use crate::learn::Dataset;
use crate::pipeline::{attach_labels, FeaturePipeline, FeatureRecord, SyncStats};
use crate::scenario::Scenario;
use crate::synth::{LabelStream, SimConfig, Simulation};

use super::StudyError;

#[derive(Debug, Clone)]
pub struct Prepared {
    pub records: Vec<FeatureRecord>,
    pub labels: LabelStream,
    pub dataset: Dataset,
    pub sync: SyncStats,
    pub packets: u64,
}

pub fn dataset_from_records(scenario: &Scenario, records: &[FeatureRecord]) -> Result<Dataset, StudyError> {
    let cycle_us = scenario.slot_plan().map_err(|e| StudyError::Other(e.to_string()))?.schedule.cycle_us();
    let dataset = Dataset::from_records(records, cycle_us, scenario.day_us())?;
    dataset.validate()?;
    Ok(dataset)
}

/// Simulates `days` days of the scenario and extracts labelled features.
pub fn prepare_dataset(scenario: &Scenario, days: u32, seed: u64) -> Result<Prepared, StudyError> {
    let other = |e: &dyn std::fmt::Display| StudyError::Other(e.to_string());
    let sim = Simulation::new(SimConfig::new(scenario.clone(), days, seed)).map_err(|e| other(&e))?;
    let mut pipeline = FeaturePipeline::new(scenario.pipeline.clone(), sim.slot_plan().clone(), Some(scenario.day_us())).map_err(|e| other(&e))?;
    let mut packets = 0u64;
    let mut failure = None;
    sim.for_each_packet(|p| {
        packets += 1;
        if failure.is_none() {
            failure = pipeline.push(p).err();
        }
    })
    .map_err(|e| other(&e))?;
    if let Some(e) = failure {
        return Err(other(&e));
    }
    let (mut records, sync) = pipeline.finish().map_err(|e| other(&e))?;
    let labels = sim.labels();
    attach_labels(&mut records, &labels);
    let dataset = dataset_from_records(scenario, &records)?;
    Ok(Prepared { records, labels, dataset, sync, packets })
}
