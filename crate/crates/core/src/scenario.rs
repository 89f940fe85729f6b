//! Scenario files: room, node table, activity regions and the knobs of the
//! simulator and feature pipeline, as one TOML document.
//!
//! The committed default (`scenarios/living_room.toml`) is compiled in and
//! available as [`Scenario::living_room`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, GeometryError, LinkGeometry, NodePlacement, NodeRole, Point3, RoomModel};
use crate::pipeline::PipelineConfig;
use crate::protocol::{tdma::ScheduleError, SlotPlan};
use crate::synth::{ChannelParams, PerturberModel, TimelineParams};

const LIVING_ROOM: &str = include_str!("../scenarios/living_room.toml");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("node `{label}`: {reason}")]
    Node { label: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    /// Display label, e.g. the last two MAC bytes `E2:28`.
    pub label: String,
    /// Explicit node id; when absent the label is parsed as `XX:YY` hex.
    #[serde(default)]
    pub id: Option<u16>,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub role: NodeRole,
}

impl NodeSpec {
    pub fn node_id(&self) -> Result<u16, ScenarioError> {
        if let Some(id) = self.id {
            return Ok(id);
        }
        let hex: String = self.label.chars().filter(|c| *c != ':').collect();
        u16::from_str_radix(&hex, 16).map_err(|e| ScenarioError::Node { label: self.label.clone(), reason: format!("cannot derive id: {e}") })
    }

    pub fn position(&self) -> Point3 {
        Point3::new(self.x, self.y, self.z)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdmaParams {
    #[serde(default = "default_slot_ms")]
    pub slot_ms: f64,
}

fn default_slot_ms() -> f64 {
    80.0
}

impl Default for TdmaParams {
    fn default() -> Self {
        Self { slot_ms: default_slot_ms() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default = "default_wavelength")]
    pub wavelength_m: f64,
    #[serde(default = "default_days")]
    pub days: u32,
    pub room: RoomModel,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub tdma: TdmaParams,
    #[serde(default)]
    pub timeline: TimelineParams,
    #[serde(default)]
    pub channel: ChannelParams,
    #[serde(default)]
    pub perturber: PerturberModel,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn default_wavelength() -> f64 {
    geometry::DEFAULT_WAVELENGTH_M
}

fn default_days() -> u32 {
    12
}

impl Scenario {
    /// The built-in nine-node living-room deployment.
    pub fn living_room() -> Self {
        Self::parse(LIVING_ROOM).expect("committed scenario is valid")
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// `path`, or the built-in scenario when `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ScenarioError> {
        path.map_or_else(|| Ok(Self::living_room()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.room.validate()?;
        for n in &self.nodes {
            n.node_id()?;
            if !n.position().is_finite() || !self.room.contains(&n.position()) {
                return Err(ScenarioError::Node { label: n.label.clone(), reason: "position outside the room".into() });
            }
        }
        // duplicate ids and node count
        self.links()?;
        self.slot_plan()?;
        Ok(())
    }

    pub fn placements(&self) -> Result<Vec<NodePlacement>, ScenarioError> {
        self.nodes
            .iter()
            .map(|n| Ok(NodePlacement { node_id: n.node_id()?, position: n.position(), role: n.role }))
            .collect()
    }

    pub fn links(&self) -> Result<Vec<LinkGeometry>, ScenarioError> {
        Ok(geometry::enumerate_links(&self.placements()?, self.wavelength_m)?)
    }

    /// TDMA slot order follows the node table order.
    pub fn slot_plan(&self) -> Result<SlotPlan, ScenarioError> {
        let order = self.nodes.iter().map(NodeSpec::node_id).collect::<Result<Vec<_>, _>>()?;
        Ok(SlotPlan::new(order, self.tdma.slot_ms)?)
    }

    pub fn node_label(&self, id: u16) -> Option<&str> {
        self.nodes.iter().find(|n| n.node_id().ok() == Some(id)).map(|n| n.label.as_str())
    }

    pub fn role_of(&self, id: u16) -> Option<NodeRole> {
        self.nodes.iter().find(|n| n.node_id().ok() == Some(id)).map(|n| n.role)
    }

    pub fn day_us(&self) -> u64 {
        self.timeline.day_us()
    }

    /// Keeps only the given nodes (in their original order).
    pub fn with_nodes(&self, ids: &[u16]) -> Result<Self, ScenarioError> {
        let mut s = self.clone();
        s.nodes.retain(|n| n.node_id().map(|id| ids.contains(&id)).unwrap_or(false));
        s.validate()?;
        Ok(s)
    }
}
