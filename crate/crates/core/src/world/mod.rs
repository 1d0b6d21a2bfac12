//! Synthetic bird's-eye-view scenarios.
//!
//! A scenario is a short clip of frames over a square world. Objects move at
//! constant velocity. Agents are static sensors with a range-limited field of
//! view and first-hit occlusion; each renders its view as a binary occupancy
//! grid on the shared ego-aligned BEV grid, plus the raw scan the grid was
//! built from.

mod generate;
mod render;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use generate::generate_scenario;
pub use render::{ray_hit_counts, render_observation, visible_objects, Observation, Scan};

use crate::percept::geometry::{wrap_angle, ObjectBox};

pub type AgentId = u32;

/// Regular BEV grid. Cell `(row, col)` spans
/// `[origin_x + col·cell_m, +cell_m) × [origin_y + row·cell_m, +cell_m)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub rows: usize,
    pub cols: usize,
    pub cell_m: f64,
    pub origin_x: f64,
    pub origin_y: f64,
}

impl GridMeta {
    /// Square grid centred on the world origin.
    pub fn centered(size: usize, cell_m: f64) -> Self {
        let half = size as f64 * cell_m / 2.0;
        Self {
            rows: size,
            cols: size,
            cell_m,
            origin_x: -half,
            origin_y: -half,
        }
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let c = ((x - self.origin_x) / self.cell_m).floor();
        let r = ((y - self.origin_y) / self.cell_m).floor();
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin_x + (col as f64 + 0.5) * self.cell_m,
            self.origin_y + (row as f64 + 0.5) * self.cell_m,
        )
    }

    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.origin_x,
            self.origin_x + self.cols as f64 * self.cell_m,
            self.origin_y,
            self.origin_y + self.rows as f64 * self.cell_m,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, x1, y0, y1) = self.extent();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: AgentId,
    pub is_ego: bool,
    pub pose: Pose,
    pub encoder_family: String,
    pub sensor_range: f64,
    /// Full field of view in radians; `2π` for a spinning sensor.
    pub fov: f64,
}

impl AgentSpec {
    /// Whether `(x, y)` is inside this agent's range and field-of-view sector.
    pub fn senses(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.pose.x, y - self.pose.y);
        if dx.hypot(dy) > self.sensor_range {
            return false;
        }
        self.fov >= 2.0 * PI - 1e-12 || wrap_angle(dy.atan2(dx) - self.pose.yaw).abs() <= self.fov / 2.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub index: usize,
    pub objects: Vec<ObjectBox>,
    pub poses: Vec<(AgentId, Pose)>,
}

/// Chronological support/query split: support frames come first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub seed: u64,
    pub grid: GridMeta,
    pub sensor: SensorConfig,
    pub agents: Vec<AgentSpec>,
    pub frames: Vec<Frame>,
    pub split: Split,
}

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ScenarioFile {
    schema_version: u32,
    scenario: Scenario,
}

impl Scenario {
    pub fn ego(&self) -> &AgentSpec {
        self.agents.iter().find(|a| a.is_ego).expect("scenario has an ego")
    }

    pub fn agent(&self, id: AgentId) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| a.agent_id == id)
    }

    pub fn collaborators(&self) -> impl Iterator<Item = &AgentSpec> {
        self.agents.iter().filter(|a| !a.is_ego)
    }

    pub fn k(&self) -> usize {
        self.split.support.len()
    }

    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(&ScenarioFile {
            schema_version: SCENARIO_SCHEMA_VERSION,
            scenario: self.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        let file: ScenarioFile = serde_json::from_str(text)?;
        if file.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(crate::Error::format(
                "scenario file",
                format!("schema version {} (expected {SCENARIO_SCHEMA_VERSION})", file.schema_version),
            ));
        }
        Ok(file.scenario)
    }
}

/// Sensor model shared by all agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    /// Angular spacing between rays, degrees.
    pub azimuth_step_deg: f64,
    /// Stacked vertical channels; every ray hit yields one point per beam.
    pub beams: usize,
    /// Standard deviation of Gaussian positional noise on each point, meters.
    pub noise_sigma: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            azimuth_step_deg: 0.5,
            beams: 32,
            noise_sigma: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum YawPolicy {
    /// Yaw in `{0, π/2, π, -π/2}` plus Gaussian jitter (radians).
    RoadAligned { jitter: f64 },
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub grid_size: usize,
    pub cell_m: f64,
    pub object_count: [usize; 2],
    pub object_length: [f64; 2],
    pub object_width: [f64; 2],
    pub yaw_policy: YawPolicy,
    /// Maximum object speed, meters per frame.
    pub max_speed: f64,
    pub max_overlap_iou: f64,
    /// Total agents including the ego, inclusive range within `[2, 4]`.
    pub agent_count: [usize; 2],
    pub ego_range: f64,
    pub ego_fov_deg: f64,
    pub collaborator_range: f64,
    pub collaborator_fov_deg: f64,
    /// Fraction of objects kept outside the ego's sensing region in every
    /// frame while staying inside some collaborator's region.
    pub narrow_view_fraction: f64,
    pub ego_family: String,
    /// Collaborator families, assigned round-robin.
    pub collaborator_families: Vec<String>,
    pub query_frames: usize,
    /// Longest support prefix any run will request. Trajectories are sampled
    /// over `max_support + query_frames` frames so query frames do not depend on k.
    pub max_support: usize,
    /// Rays that must first-hit an object for it to count as observed.
    pub min_visible_rays: usize,
    pub sensor: SensorConfig,
    pub max_attempts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid_size: 32,
            cell_m: 1.0,
            object_count: [5, 8],
            object_length: [3.8, 4.6],
            object_width: [1.7, 2.0],
            yaw_policy: YawPolicy::RoadAligned { jitter: 0.1 },
            max_speed: 0.3,
            max_overlap_iou: 0.0,
            agent_count: [3, 3],
            ego_range: 15.0,
            ego_fov_deg: 360.0,
            collaborator_range: 15.0,
            collaborator_fov_deg: 360.0,
            narrow_view_fraction: 0.5,
            ego_family: "lp".into(),
            collaborator_families: vec!["ls".into()],
            query_frames: 8,
            max_support: 10,
            min_visible_rays: 3,
            sensor: SensorConfig::default(),
            max_attempts: 4000,
        }
    }
}

impl WorldConfig {
    pub fn grid(&self) -> GridMeta {
        GridMeta::centered(self.grid_size, self.cell_m)
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::Config(m.to_string()));
        if self.agent_count[0] < 2 || self.agent_count[1] > 4 || self.agent_count[0] > self.agent_count[1] {
            return bad("agent_count must satisfy 2 <= min <= max <= 4");
        }
        if self.object_count[0] > self.object_count[1] {
            return bad("object_count min exceeds max");
        }
        if !(0.0..=1.0).contains(&self.narrow_view_fraction) {
            return bad("narrow_view_fraction must be in [0, 1]");
        }
        if self.collaborator_families.is_empty() {
            return bad("collaborator_families must be nonempty");
        }
        if self.grid_size == 0 || self.cell_m <= 0.0 {
            return bad("grid must be nonempty");
        }
        if self.object_length[0] <= 0.0 || self.object_width[0] <= 0.0 {
            return bad("object dimensions must be positive");
        }
        Ok(())
    }

    /// Same world with every agent in `family`.
    pub fn homogeneous(&self, family: &str) -> Self {
        Self {
            ego_family: family.to_string(),
            collaborator_families: vec![family.to_string()],
            ..self.clone()
        }
    }
}
