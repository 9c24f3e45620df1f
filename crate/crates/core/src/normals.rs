//! Surface normals from local PCA, oriented toward a viewpoint, plus
//! cosine-similarity removal of directional outliers.

use std::num::NonZero;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Unit};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{sorted_symmetric_eigen, PointCloud, UnitVec3, Vec3};

/// Second covariance eigenvalue below this fraction of the first means the
/// neighbourhood is (numerically) collinear.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct NormalEstimationConfig {
    /// Neighbourhood size, counting the query point itself.
    pub k_neighbors: usize,
    pub viewpoint: Vec3,
    /// Normals with cosine to the mean direction below this are dropped.
    pub cosine_threshold: f64,
}

impl Default for NormalEstimationConfig {
    fn default() -> Self {
        Self {
            k_neighbors: 15,
            viewpoint: Vec3::zeros(),
            cosine_threshold: 0.0,
        }
    }
}

impl NormalEstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_neighbors < 3 {
            return Err(Error::InvalidInput(format!(
                "k_neighbors must be at least 3, got {}",
                self.k_neighbors
            )));
        }
        if !(self.cosine_threshold > -1.0 && self.cosine_threshold < 1.0) {
            return Err(Error::InvalidInput(format!(
                "cosine_threshold must lie in (-1, 1), got {}",
                self.cosine_threshold
            )));
        }
        Ok(())
    }
}

/// Exact k-nearest-neighbour index over a point set.
pub(crate) struct NeighborIndex {
    tree: ImmutableKdTree<f64, 3>,
}

impl NeighborIndex {
    pub(crate) fn new(points: &[Vec3]) -> Self {
        let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        Self {
            tree: ImmutableKdTree::new_from_slice(&raw),
        }
    }

    /// Indices of the `k` nearest points (including an exact match), closest first.
    pub(crate) fn nearest(&self, query: &Vec3, k: usize) -> Vec<usize> {
        let Some(k) = NonZero::new(k) else {
            return Vec::new();
        };
        self.tree
            .nearest_n::<SquaredEuclidean>(&[query.x, query.y, query.z], k)
            .into_iter()
            .map(|n| n.item as usize)
            .collect()
    }

    /// Index and squared distance of the nearest point.
    pub(crate) fn nearest_one(&self, query: &Vec3) -> (usize, f64) {
        let n = self.tree.nearest_one::<SquaredEuclidean>(&[query.x, query.y, query.z]);
        (n.item as usize, n.distance)
    }
}

/// Per-point PCA normal: the smallest-eigenvalue eigenvector of the k-NN
/// covariance, flipped so that `n·(viewpoint − p) ≥ 0`.
///
/// Points whose neighbourhood is collinear (covariance rank < 2) get `None`;
/// they take no part in the directional pipeline.
pub fn estimate_normals(
    cloud: &PointCloud,
    cfg: &NormalEstimationConfig,
) -> Result<Vec<Option<UnitVec3>>> {
    cfg.validate()?;
    let points = cloud.points();
    if points.len() < cfg.k_neighbors + 1 {
        return Err(Error::TooFewPoints {
            needed: cfg.k_neighbors + 1,
            got: points.len(),
        });
    }
    let index = NeighborIndex::new(points);
    Ok(points
        .par_iter()
        .map(|p| {
            let neighbors = index.nearest(p, cfg.k_neighbors);
            pca_normal(points, &neighbors).map(|n| orient_toward(n, p, &cfg.viewpoint))
        })
        .collect())
}

fn pca_normal(points: &[Vec3], neighbors: &[usize]) -> Option<UnitVec3> {
    let count = neighbors.len() as f64;
    let centroid = neighbors
        .iter()
        .fold(Vec3::zeros(), |acc, &i| acc + points[i])
        / count;
    let cov = neighbors.iter().fold(Matrix3::zeros(), |acc, &i| {
        let d = points[i] - centroid;
        acc + d * d.transpose()
    }) / count;
    let (values, vectors) = sorted_symmetric_eigen(&cov);
    if values[0] <= 0.0 || values[1] <= RANK_TOL * values[0] {
        return None;
    }
    Some(Unit::new_normalize(vectors.column(2).into_owned()))
}

fn orient_toward(n: UnitVec3, p: &Vec3, viewpoint: &Vec3) -> UnitVec3 {
    if n.dot(&(viewpoint - p)) < 0.0 {
        -n
    } else {
        n
    }
}

/// Keeps normals whose cosine to the mean direction is at least
/// `cosine_threshold`. The mean is computed once over the whole input, so a
/// second pass over the kept set may see a different mean.
///
/// Returns `(kept, removed)` index lists, each ascending.
pub fn remove_directional_outliers(
    normals: &[UnitVec3],
    cosine_threshold: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if normals.is_empty() {
        return Err(Error::InvalidInput("no normals to filter".into()));
    }
    let sum = normals
        .iter()
        .fold(Vec3::zeros(), |acc, n| acc + n.into_inner());
    let norm = sum.norm();
    if norm < 1e-9 {
        return Err(Error::DegenerateMean(
            "normals cancel out; mean direction undefined".into(),
        ));
    }
    let mean = sum / norm;
    let (kept, removed): (Vec<usize>, Vec<usize>) =
        (0..normals.len()).partition(|&i| normals[i].dot(&mean) >= cosine_threshold);
    Ok((kept, removed))
}
