//! Point-to-point ICP: nearest-neighbour matching and a closed-form rigid solve.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{mean_point, PointCloud, RigidTransform, RotationMatrix, Vec3};
use crate::normals::NeighborIndex;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop when the mean squared error changes by less than this.
    pub convergence_tol: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            convergence_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpOutcome {
    /// Model-to-observed transform.
    pub transform: RigidTransform,
    /// MSE of each correspondence step, before that step's solve.
    pub mse_trace: Vec<f64>,
    pub converged: bool,
}

/// Least-squares rigid transform taking `source[i]` to `target[i]`
/// (Kabsch: SVD of the centred cross-covariance with a reflection fix).
pub fn kabsch(source: &[Vec3], target: &[Vec3]) -> Result<RigidTransform> {
    if source.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "{} source points but {} targets",
            source.len(),
            target.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: source.len(),
        });
    }
    let cs = mean_point(source);
    let ct = mean_point(target);
    let h = source
        .iter()
        .zip(target)
        .fold(Matrix3::zeros(), |acc, (s, t)| acc + (s - cs) * (t - ct).transpose());
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let d = (v_t.transpose() * u.transpose()).determinant().signum();
    let fix = Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d));
    let r = RotationMatrix::from_matrix_unchecked(v_t.transpose() * fix * u.transpose());
    Ok(RigidTransform::new(r, ct - r * cs))
}

/// Aligns `model` onto `observed` starting from the identity.
pub fn icp_register(model: &PointCloud, observed: &PointCloud, cfg: &IcpConfig) -> Result<IcpOutcome> {
    if cfg.max_iters == 0 {
        return Err(Error::InvalidInput("ICP needs at least one iteration".into()));
    }
    for cloud in [model, observed] {
        if cloud.len() < 3 {
            return Err(Error::TooFewPoints {
                needed: 3,
                got: cloud.len(),
            });
        }
    }
    let index = NeighborIndex::new(observed.points());
    let targets = observed.points();
    let mut transform = RigidTransform::identity();
    let mut mse_trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let matches: Vec<(usize, f64)> = model
            .points()
            .par_iter()
            .map(|p| index.nearest_one(&transform.apply(p)))
            .collect();
        let mse = matches.iter().map(|m| m.1).sum::<f64>() / matches.len() as f64;
        if let Some(&prev) = mse_trace.last() {
            if (prev - mse).abs() < cfg.convergence_tol {
                mse_trace.push(mse);
                converged = true;
                break;
            }
        }
        mse_trace.push(mse);
        let matched: Vec<Vec3> = matches.iter().map(|m| targets[m.0]).collect();
        transform = kabsch(model.points(), &matched)?;
    }
    Ok(IcpOutcome {
        transform,
        mse_trace,
        converged,
    })
}
