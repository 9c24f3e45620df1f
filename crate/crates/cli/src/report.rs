use kentreg::em::{ClusterDiagnostics, RegistrationConfig};
use kentreg::geometry::RigidTransform;
use serde::{Deserialize, Serialize};

/// Estimated transform, model frame to observed frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    /// Row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&RigidTransform> for TransformReport {
    fn from(t: &RigidTransform) -> Self {
        let v = t.to_row_major();
        let mut rotation = [0.0; 9];
        rotation.copy_from_slice(&v[..9]);
        Self {
            rotation,
            translation: [v[9], v[10], v[11]],
        }
    }
}

impl TransformReport {
    pub fn to_transform(&self) -> kentreg::Result<RigidTransform> {
        let mut v = [0.0; 12];
        v[..9].copy_from_slice(&self.rotation);
        v[9..].copy_from_slice(&self.translation);
        RigidTransform::from_row_major(&v)
    }
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load: f64,
    pub downsample: f64,
    pub register: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCounts {
    pub model_loaded: usize,
    pub observed_loaded: usize,
    pub model_used: usize,
    pub observed_used: usize,
    pub model_normals: usize,
    pub observed_normals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub model: String,
    pub observed: String,
    pub ground_truth: Option<String>,
    pub downsample: f64,
    pub registration: RegistrationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub transform: TransformReport,
    /// Radians, only with ground truth.
    #[serde(rename = "e_R", default, skip_serializing_if = "Option::is_none")]
    pub e_r: Option<f64>,
    /// Meters, only with ground truth.
    #[serde(rename = "e_t", default, skip_serializing_if = "Option::is_none")]
    pub e_t: Option<f64>,
    pub q_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub clusters: Vec<ClusterDiagnostics>,
    pub points: PointCounts,
    pub timings_ms: Timings,
    pub config: ConfigEcho,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are plain data")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}
