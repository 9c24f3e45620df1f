//! TOML scene files for `synth` and `benchmark`.
//!
//! ```toml
//! seed = 7
//! noise_sigma = 0.01
//! outlier_fraction = 0.2
//!
//! [[planes]]
//! normal = [-1.0, 0.0, 0.0]
//! offset = -3.0
//! extent = 4.0
//! points = 1667
//!
//! [outlier_box]          # optional, default 1.5x the scene bounds
//! min = [-6.0, -6.0, -4.0]
//! max = [2.0, 2.0, 3.0]
//!
//! [transform]            # ground-truth range for synth and benchmark
//! max_rotation_deg = 15.0
//! max_translation = 0.5
//!
//! [benchmark]
//! fractions = [0.0, 0.05, 0.1, 0.15, 0.2]
//! trials = 20
//! ```
//!
//! Without `[[planes]]` the scene is two walls and a floor with
//! `points_per_plane` points each.

use std::path::Path;

use kentreg::geometry::Vec3;
use kentreg::synthetic::{OutlierBox, Plane, SceneSpec};

use crate::error::{CliError, CliResult};
use crate::io::read_text;

#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneConfig {
    pub normal: [f64; 3],
    pub offset: f64,
    pub extent: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    pub max_rotation_deg: f64,
    pub max_translation: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            max_rotation_deg: 15.0,
            max_translation: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    pub fractions: Vec<f64>,
    pub trials: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        Self {
            fractions: vec![0.0, 0.05, 0.1, 0.15, 0.2],
            trials: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub seed: u64,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub points_per_plane: usize,
    pub planes: Vec<PlaneConfig>,
    pub outlier_box: Option<BoxConfig>,
    pub transform: TransformConfig,
    pub benchmark: BenchmarkSection,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            noise_sigma: 0.01,
            outlier_fraction: 0.0,
            points_per_plane: 1667,
            planes: Vec::new(),
            outlier_box: None,
            transform: TransformConfig::default(),
            benchmark: BenchmarkSection::default(),
        }
    }
}

impl SceneConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string().trim_end().replace('\n', " "))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_text(path)?;
        Self::parse(&text).map_err(|m| CliError::parse(path, m))
    }

    pub fn scene_spec(&self) -> kentreg::Result<SceneSpec> {
        let mut spec = if self.planes.is_empty() {
            SceneSpec::room_corner(self.points_per_plane, self.seed)
        } else {
            SceneSpec {
                planes: self
                    .planes
                    .iter()
                    .map(|p| Plane::new(Vec3::from(p.normal), p.offset, p.extent, p.points))
                    .collect::<kentreg::Result<_>>()?,
                noise_sigma: 0.0,
                outlier_fraction: 0.0,
                outlier_box: None,
                seed: self.seed,
            }
        };
        spec.noise_sigma = self.noise_sigma;
        spec.outlier_fraction = self.outlier_fraction;
        spec.outlier_box = match &self.outlier_box {
            Some(b) => Some(OutlierBox::new(Vec3::from(b.min), Vec3::from(b.max))?),
            None => None,
        };
        spec.validate()?;
        Ok(spec)
    }
}
