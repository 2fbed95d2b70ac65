//! Per-stage metric records and the final run report.
//!
//! Wall-clock fields live only in checkpoint metrics and are excluded from
//! `report.json`, which must be byte-identical across reruns with the same
//! seed. The full schema is documented in docs/metrics.md.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricRecord {
    pub iteration: usize,
    /// "A", "B" or "C".
    pub stage: String,
    /// Deterministic counters and measurements (point counts, voxel counts,
    /// losses, coverage).
    pub values: BTreeMap<String, f64>,
    /// Wall time; stripped from the deterministic report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

impl MetricRecord {
    pub fn new(iteration: usize, stage: &str) -> Self {
        Self { iteration, stage: stage.to_string(), values: BTreeMap::new(), wall_ms: None }
    }

    pub fn set(&mut self, key: &str, value: f64) -> &mut Self {
        self.values.insert(key.to_string(), value);
        self
    }

    /// Copy without the wall-clock field, for the deterministic report.
    pub fn deterministic(&self) -> Self {
        Self { wall_ms: None, ..self.clone() }
    }
}

/// Final artifact summary written next to the mesh.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub iterations: usize,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    /// Present when the run was bound to a reference scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_per_iteration: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chamfer: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_watertight: Option<bool>,
    pub final_point_count: usize,
    pub final_voxel_count: usize,
    pub mesh_vertices: usize,
    pub mesh_triangles: usize,
}
